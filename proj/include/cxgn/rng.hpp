#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cxgn {

// Counter-based stream: draw i is a pure function of (seed, stream, i), so any
// (seed, stream) pair replays the identical sequence and split() children never
// overlap their parent. Gaussian draws use Box-Muller in double precision.
class SeededRng {
 public:
  SeededRng() : SeededRng(0, 0) {}
  SeededRng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  uint64_t next_u64();
  // uniform on [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // integer uniform on [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi);
  double normal();
  void fill_normal(float* dst, int64_t n);
  void fill_normal(double* dst, int64_t n);
  void fill_uniform(float* dst, int64_t n);

  // Fisher-Yates over indices 0..n-1.
  std::vector<int64_t> permutation(int64_t n);

  // k statistically independent child streams; children are a pure function of
  // (seed, stream, i) and are disjoint from the parent's own draws.
  std::vector<SeededRng> split(int k);
  SeededRng child(uint64_t i) const;

  // Named derivation for module-level streams: hash(seed, name, index).
  SeededRng derive(const std::string& name, uint64_t index = 0) const;

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cxgn
