// Shared basics: matrix aliases, error taxonomy, deterministic RNG.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#define GAE_VERSION "1.0.0"

namespace gae {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// All library failures are typed so callers (and the CLI) can distinguish
// bad inputs from file-format problems and numerical breakdowns.
enum class ErrorKind {
  bad_input,       // preconditions: empty batch, non-finite entries, bad rank
  dim_mismatch,    // shape disagreement between arguments
  format,          // checkpoint / activation-file violations
  singular,        // non-invertible system (carries a remedy in the message)
  divergence,      // training loss became non-finite
  config,          // CLI config schema violations
};

struct Error : std::runtime_error {
  ErrorKind kind;
  Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256++ with Box-Muller normals. std::normal_distribution is
// implementation-defined, which would break byte-identical reruns across
// toolchains; this generator is fully pinned.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0,1) with 53-bit resolution
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    double rad = std::sqrt(-2.0 * std::log(u1));
    double ang = 6.283185307179586476925286766559 * u2;
    cached_ = rad * std::sin(ang);
    have_cached_ = true;
    return rad * std::cos(ang);
  }

  // column-major fill keeps a matrix draw independent of storage strides
  Mat normal_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  // Fisher-Yates; used for epoch shuffles and subsampling
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// Named sub-streams derived from one master seed. Constants were fixed during
// development; everything random flows through these.
namespace streams {
inline uint64_t pretrain(uint64_t seed) { return seed; }
inline uint64_t pretrain_data(uint64_t seed) { return seed * 1000003ull + 3; }
inline uint64_t family(uint64_t seed) { return seed + 1; }
inline uint64_t explainer(uint64_t seed) { return seed + 2; }
inline uint64_t id_batch(uint64_t seed) { return seed * 1000003ull + 17; }
inline uint64_t severity(uint64_t seed, int i) { return seed * 1000003ull + 101 + uint64_t(i); }
inline uint64_t subsample(uint64_t seed) { return seed * 1000003ull + 31; }
}  // namespace streams

}  // namespace gae
