#include "mlae/prng.hpp"

#include <cmath>

namespace mlae {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;  // golden ratio
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;  // sqrt(3)-1

inline void philox_round(std::array<std::uint32_t, 4>& ctr, std::uint32_t k0,
                         std::uint32_t k1) {
  const std::uint64_t p0 = static_cast<std::uint64_t>(kPhiloxM0) * ctr[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(kPhiloxM1) * ctr[2];
  const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
  const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
  ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
}

std::array<std::uint32_t, 4> philox4x32_10(std::uint64_t key, std::uint64_t ctr_hi,
                                           std::uint64_t ctr_lo) {
  std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(ctr_lo), static_cast<std::uint32_t>(ctr_lo >> 32),
      static_cast<std::uint32_t>(ctr_hi), static_cast<std::uint32_t>(ctr_hi >> 32)};
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
  for (int round = 0; round < 10; ++round) {
    philox_round(ctr, k0, k1);
    k0 += kPhiloxW0;
    k1 += kPhiloxW1;
  }
  return ctr;
}

// SplitMix64 finalizer (Steele, Lea, Flood 2014); used only to derive
// substream ids, never as an output stream.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

Prng::Prng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

Prng Prng::split(std::uint64_t index) const {
  return Prng(seed_, mix64(stream_ ^ mix64(index)));
}

void Prng::refill() {
  block_ = philox4x32_10(seed_, stream_, pos_);
  ++pos_;
  block_used_ = 0;
}

std::uint32_t Prng::next_u32() {
  if (block_used_ >= 4) refill();
  return block_[block_used_++];
}

std::uint64_t Prng::next_u64() {
  const std::uint64_t lo = next_u32();
  const std::uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double Prng::next_uniform() {
  // 53 high bits of a u64, scaled to [0,1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Prng::next_gaussian() {
  if (has_spare_gauss_) {
    has_spare_gauss_ = false;
    return spare_gauss_;
  }
  // Box-Muller; u1 shifted into (0,1] so log stays finite.
  const double u1 = 1.0 - next_uniform();
  const double u2 = next_uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_gauss_ = radius * std::sin(angle);
  has_spare_gauss_ = true;
  return radius * std::cos(angle);
}

Matrix gaussian_init(int rows, int cols, double std, std::uint64_t seed) {
  Prng stream(seed);
  return gaussian_init(rows, cols, std, stream);
}

Matrix gaussian_init(int rows, int cols, double std, Prng& stream) {
  if (std <= 0.0) throw ParameterError("gaussian_init: std must be positive");
  if (rows < 1 || cols < 1) throw ParameterError("gaussian_init: dims must be >= 1");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = std * stream.next_gaussian();
  check_finite(m, "gaussian_init");
  return m;
}

}  // namespace mlae
