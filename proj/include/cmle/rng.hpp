#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace cmle {

// Pseudo-random source used everywhere in the project.
//
// Bits come from std::mt19937_64, whose output sequence is fixed by the
// standard. The real-valued transforms are implemented here rather than
// taken from <random> distributions (whose algorithms are unspecified), so a
// seed produces the same stream on every conforming toolchain:
//   uniform()  53 high bits scaled into [0, 1)
//   normal()   Box-Muller, cosine branch; consumes exactly two uniforms
//   gumbel()   -log(-log(u)) with u in (0, 1)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform_open();
  double normal();
  double gumbel();
  // Uniform integer in [0, n), rejection-sampled. n must be positive.
  std::size_t below(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cmle
