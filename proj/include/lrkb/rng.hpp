#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include <Eigen/Dense>

namespace lrkb {

/// SplitMix64 step: advances the state and returns a well-mixed 64-bit word.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a hash of a byte string, used to derive stream keys from purpose tags.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// xoshiro256** generator. Fixed algorithm so sequences are bit-identical
/// across platforms and standard libraries.
class Xoshiro256ss {
 public:
  explicit Xoshiro256ss(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::uint64_t s_[4];
};

/// A deterministic scalar/vector noise source: uniforms in (0,1] and
/// standard normals via Box-Muller (pair-cached).
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed) : gen_(seed) {}

  /// Uniform double in (0, 1].
  double uniform() {
    return static_cast<double>((gen_.next() >> 11) + 1) * 0x1.0p-53;
  }

  /// Standard normal draw.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  /// One Brownian increment vector with covariance dt * I.
  Eigen::VectorXd brownian(Eigen::Index n, double dt) {
    return std::sqrt(dt) * normal_vector(n);
  }

 private:
  Xoshiro256ss gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Derives independent, replayable noise streams from a master seed.
/// Streams are keyed by (purpose tag, replicate index, particle index), so
/// any worker can recreate exactly the stream a given particle of a given
/// replicate consumes, independent of scheduling or thread count.
struct RngPlan {
  std::uint64_t master_seed = 0;

  std::uint64_t stream_seed(std::string_view purpose, std::uint64_t replicate = 0,
                            std::uint64_t particle = 0) const {
    std::uint64_t x = master_seed;
    x ^= fnv1a64(purpose);
    (void)splitmix64(x);
    x ^= 0x9e3779b97f4a7c15ULL * (replicate + 1);
    (void)splitmix64(x);
    x ^= 0xd1b54a32d192ed03ULL * (particle + 1);
    return splitmix64(x);
  }

  NoiseStream stream(std::string_view purpose, std::uint64_t replicate = 0,
                     std::uint64_t particle = 0) const {
    return NoiseStream(stream_seed(purpose, replicate, particle));
  }
};

/// n_steps x dim matrix of Brownian increments, each row ~ N(0, dt I).
inline Eigen::MatrixXd brownian_increments(NoiseStream& stream, Eigen::Index n_steps,
                                           Eigen::Index dim, double dt) {
  Eigen::MatrixXd inc(n_steps, dim);
  const double s = std::sqrt(dt);
  for (Eigen::Index i = 0; i < n_steps; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) inc(i, j) = s * stream.normal();
  return inc;
}

}  // namespace lrkb
