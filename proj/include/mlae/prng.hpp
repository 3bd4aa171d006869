#pragma once

#include <array>
#include <cstdint>

#include "mlae/matrix.hpp"

namespace mlae {

/// Counter-based deterministic PRNG: Philox4x32 with 10 rounds
/// (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3", 2011).
///
/// The 128-bit Philox counter is laid out as (stream id, draw position),
/// so any number of independent substreams can be derived from one seed
/// without coordination. Substreams are addressed by split(): child stream
/// ids come from a SplitMix64-style finalizer over (parent stream, index).
/// Identical (seed, split path, draw sequence) is bit-identical everywhere.
class Prng {
 public:
  explicit Prng(std::uint64_t seed, std::uint64_t stream = 0);

  // Independent substream; deterministic in (this stream, index).
  Prng split(std::uint64_t index) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double next_uniform();
  // Standard normal via Box-Muller; one pair of uniforms per two draws.
  double next_gaussian();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  void refill();

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t pos_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int block_used_ = 4;
  double spare_gauss_ = 0.0;
  bool has_spare_gauss_ = false;
};

/// rows x cols matrix of i.i.d. normal(0, std^2) entries drawn from
/// Prng(seed). Same arguments, same bits.
Matrix gaussian_init(int rows, int cols, double std, std::uint64_t seed);
/// Same, consuming an existing stream.
Matrix gaussian_init(int rows, int cols, double std, Prng& stream);

}  // namespace mlae
