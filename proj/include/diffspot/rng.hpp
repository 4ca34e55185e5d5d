#ifndef DIFFSPOT_RNG_HPP_
#define DIFFSPOT_RNG_HPP_

#include <cstdint>
#include <random>

namespace diffspot {

// splitmix64 finalizer; used to derive well-mixed sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Sub-seed for item `index` of a run seeded with `master`. Deriving from the
// pair (not from worker scheduling) keeps parallel fan-out deterministic.
inline std::uint64_t sub_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(master ^ mix64(index + 1));
}

// Seeded random source passed explicitly to every stochastic operation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  bool bernoulli(double p = 0.5) {
    std::bernoulli_distribution d(p);
    return d(engine_);
  }

  Rng spawn(std::uint64_t index) { return Rng(sub_seed(engine_(), index)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace diffspot

#endif  // DIFFSPOT_RNG_HPP_
