#include "mlae/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <map>

#include "mlae/hash.hpp"

namespace mlae {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;
constexpr std::uint64_t kAlign = 64;

std::uint64_t round_up(std::uint64_t n, std::uint64_t align) {
  return (n + align - 1) / align * align;
}

std::string hash_string(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::uint64_t aligned_tensor_bytes(const Matrix& m) {
  return round_up(m.size() * sizeof(float), kAlign);
}

void save_checkpoint(const BackboneModel& model, const RunConfig& config, bool merged,
                     const std::string& stem) {
  const auto tensors = named_tensors(model);

  std::vector<unsigned char> blob;
  json index = json::array();
  for (const auto& [name, mat] : tensors) {
    const std::uint64_t offset = blob.size();
    const std::uint64_t bytes = mat->size() * sizeof(float);
    json entry;
    entry["name"] = name;
    entry["shape"] = {mat->rows(), mat->cols()};
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    entry["byte_length"] = bytes;
    index.push_back(std::move(entry));
    blob.resize(offset + round_up(bytes, kAlign), 0);
    float* dst = reinterpret_cast<float*>(blob.data() + offset);
    for (std::size_t i = 0; i < mat->size(); ++i) {
      dst[i] = static_cast<float>(mat->data()[i]);
    }
  }

  json manifest;
  manifest["kind"] = "mlae-checkpoint";
  manifest["format_version"] = kFormatVersion;
  manifest["merged"] = merged;
  manifest["config"] = to_json(config);
  manifest["tensors"] = std::move(index);
  manifest["blob_bytes"] = blob.size();
  manifest["blob_hash"] = hash_string(fnv1a64(blob.data(), blob.size()));

  {
    std::ofstream out(stem + ".bin", std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint blob: " + stem + ".bin");
    out.write(reinterpret_cast<const char*>(blob.data()), blob.size());
  }
  {
    std::ofstream out(stem + ".json");
    if (!out) throw FormatError("cannot write checkpoint manifest: " + stem + ".json");
    out << manifest.dump(2) << "\n";
  }
}

LoadedCheckpoint load_checkpoint(const std::string& stem) {
  json manifest;
  {
    std::ifstream in(stem + ".json");
    if (!in) throw FormatError("cannot open checkpoint manifest: " + stem + ".json");
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw FormatError("checkpoint manifest parse error: " + std::string(e.what()));
    }
  }
  if (!manifest.is_object() || manifest.value("kind", "") != "mlae-checkpoint") {
    throw FormatError("not a checkpoint manifest: " + stem + ".json");
  }
  if (manifest.value("format_version", -1) != kFormatVersion) {
    throw FormatError("unsupported checkpoint format version");
  }

  LoadedCheckpoint loaded;
  loaded.merged = manifest.value("merged", false);
  loaded.config = run_config_from_json(manifest.at("config"));

  std::vector<unsigned char> blob;
  {
    std::ifstream in(stem + ".bin", std::ios::binary | std::ios::ate);
    if (!in) throw FormatError("cannot open checkpoint blob: " + stem + ".bin");
    blob.resize(static_cast<std::size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(blob.data()), blob.size());
  }
  if (blob.size() != manifest.value("blob_bytes", std::uint64_t{0})) {
    throw CorruptionError("checkpoint blob size mismatch: " + stem + ".bin");
  }
  if (hash_string(fnv1a64(blob.data(), blob.size())) !=
      manifest.value("blob_hash", std::string{})) {
    throw CorruptionError("checkpoint blob hash mismatch: " + stem + ".bin");
  }

  if (loaded.merged) {
    loaded.model = build_backbone(loaded.config.backbone);
  } else {
    loaded.model = build_model(loaded.config);
  }

  std::map<std::string, Matrix*> by_name;
  for (auto& [name, mat] : named_tensors_mut(loaded.model)) by_name[name] = mat;

  std::size_t filled = 0;
  for (const json& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint tensor '" + name + "' has no slot in the model");
    }
    Matrix& mat = *it->second;
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != mat.rows() || shape[1] != mat.cols()) {
      throw FormatError("checkpoint tensor '" + name + "' shape mismatch");
    }
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw FormatError("checkpoint tensor '" + name + "' has unsupported dtype");
    }
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t bytes = entry.at("byte_length").get<std::uint64_t>();
    if (bytes != mat.size() * sizeof(float) || offset + bytes > blob.size()) {
      throw FormatError("checkpoint tensor '" + name + "' extent out of bounds");
    }
    const float* src = reinterpret_cast<const float*>(blob.data() + offset);
    for (std::size_t i = 0; i < mat.size(); ++i) {
      mat.data()[i] = static_cast<double>(src[i]);
    }
    ++filled;
  }
  if (filled != by_name.size()) {
    throw FormatError("checkpoint is missing " + std::to_string(by_name.size() - filled) +
                      " tensor(s)");
  }
  return loaded;
}

}  // namespace mlae
