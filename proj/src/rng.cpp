#include "cxgn/rng.hpp"

#include <cmath>

#include "cxgn/common.hpp"

namespace cxgn {

namespace {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix3(uint64_t a, uint64_t b, uint64_t c) {
  return splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

uint64_t SeededRng::next_u64() { return mix3(seed_, stream_, counter_++); }

double SeededRng::uniform() {
  // top 53 bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t SeededRng::uniform_int(int64_t lo, int64_t hi) {
  CXGN_CHECK(hi >= lo, "uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(next_u64() % span);
}

double SeededRng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // u1 in (0,1] so log is finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(kTwoPi * u2);
  have_spare_ = true;
  return r * std::cos(kTwoPi * u2);
}

void SeededRng::fill_normal(float* dst, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(normal());
}

void SeededRng::fill_normal(double* dst, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] = normal();
}

void SeededRng::fill_uniform(float* dst, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(uniform());
}

std::vector<int64_t> SeededRng::permutation(int64_t n) {
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = uniform_int(0, i);
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

SeededRng SeededRng::child(uint64_t i) const {
  return SeededRng(seed_, mix3(stream_, 0xc2b2ae3d27d4eb4full, i + 1));
}

std::vector<SeededRng> SeededRng::split(int k) {
  std::vector<SeededRng> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.push_back(child(static_cast<uint64_t>(i)));
  return out;
}

SeededRng SeededRng::derive(const std::string& name, uint64_t index) const {
  uint64_t h = fnv1a64(name);
  return SeededRng(seed_, mix3(stream_ ^ h, 0x9e3779b97f4a7c15ull, index));
}

}  // namespace cxgn
