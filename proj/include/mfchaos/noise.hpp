#pragma once

// Counter-based Brownian increments. Every draw is a pure function of
// (seed, stream, channel, counter), so banks can be filled in any order or
// on any number of threads and still be bit-identical.
//
// NOTE: banks built at different dt from the same seed are independent
// Brownian paths. Use refine_bank() when a dt-halving study needs the fine
// path to sum back to the coarse one.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mfchaos/errors.hpp"
#include "mfchaos/parallel.hpp"

namespace mfchaos {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent 64-bit seed for sub-stream `index` of `seed`.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Philox4x32 with 10 rounds.
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;

  static constexpr Counter round(Counter c, Key k) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }

  static constexpr Counter apply(Counter c, Key k) {
    for (int r = 0; r < 10; ++r) {
      if (r > 0) {
        k[0] += kW0;
        k[1] += kW1;
      }
      c = round(c, k);
    }
    return c;
  }
};

/// Channels keep unrelated draws of one stream disjoint.
enum class Channel : std::uint32_t {
  kBrownian = 0,
  kInitial = 1,
  kSubsample = 2,
  kPilot = 3,
  kBridgeBase = 1000,  // + refinement level
};

/// Stateless accessor for one counter-based stream.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, std::uint64_t stream)
      : key64_(derive_seed(seed, stream)) {}

  /// Two 64-bit words for counter (index, channel, block).
  std::array<std::uint64_t, 2> bits(std::uint64_t index, Channel channel, std::uint32_t block = 0) const {
    const Philox4x32::Counter c{static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                static_cast<std::uint32_t>(channel), block};
    const Philox4x32::Key k{static_cast<std::uint32_t>(key64_), static_cast<std::uint32_t>(key64_ >> 32)};
    const auto r = Philox4x32::apply(c, k);
    return {(static_cast<std::uint64_t>(r[1]) << 32) | r[0], (static_cast<std::uint64_t>(r[3]) << 32) | r[2]};
  }

  /// Two uniforms in the open interval (0, 1).
  std::array<double, 2> uniforms(std::uint64_t index, Channel channel, std::uint32_t block = 0) const {
    const auto b = bits(index, channel, block);
    constexpr double scale = 0x1.0p-53;
    return {((b[0] >> 11) + 0.5) * scale, ((b[1] >> 11) + 0.5) * scale};
  }

  /// Two independent standard normals (Box-Muller).
  std::array<double, 2> normals(std::uint64_t index, Channel channel, std::uint32_t block = 0) const {
    const auto u = uniforms(index, channel, block);
    const double r = std::sqrt(-2.0 * std::log(u[0]));
    const double a = 2.0 * std::numbers::pi * u[1];
    return {r * std::cos(a), r * std::sin(a)};
  }

  /// Fills `out` with consecutive standard normals; entry e comes from draw
  /// e / 2, so both Box-Muller outputs are used.
  void fill_normal_run(Channel channel, std::span<double> out) const {
    for (std::size_t e = 0; e < out.size(); e += 2) {
      const auto z = normals(e / 2, channel);
      out[e] = z[0];
      if (e + 1 < out.size()) out[e + 1] = z[1];
    }
  }

  /// Fills `out` with standard normals for draw `index`.
  void fill_normals(std::uint64_t index, Channel channel, std::span<double> out) const {
    for (std::size_t c = 0; c < out.size(); c += 2) {
      const auto z = normals(index, channel, static_cast<std::uint32_t>(c / 2));
      out[c] = z[0];
      if (c + 1 < out.size()) out[c + 1] = z[1];
    }
  }

 private:
  std::uint64_t key64_;
};

/// Uniform time grid on [0, T].
struct TimeGrid {
  double T = 1.0;
  int n_steps = 1;

  TimeGrid() = default;
  TimeGrid(double horizon, int steps) : T(horizon), n_steps(steps) {
    if (!(T > 0.0) || !std::isfinite(T)) throw ParameterError("TimeGrid: horizon T must be positive");
    if (n_steps <= 0) throw ParameterError("TimeGrid: n_steps must be positive");
  }

  double dt() const { return T / n_steps; }
  double t(int n) const { return T * static_cast<double>(n) / static_cast<double>(n_steps); }
  int nodes() const { return n_steps + 1; }
  TimeGrid halved() const { return {T, 2 * n_steps}; }
};

/// N x n_steps x m array of Brownian increments, stream i belonging to
/// particle i. Layout is stream-major so extending a bank appends streams.
class NoiseBank {
 public:
  std::uint64_t seed() const { return seed_; }
  std::size_t n_particles() const { return n_particles_; }
  int n_steps() const { return n_steps_; }
  double dt() const { return dt_; }
  int m() const { return m_; }
  int refinement_level() const { return level_; }

  std::span<const double> increment(std::size_t particle, int step) const {
    return {data_.data() + (particle * static_cast<std::size_t>(n_steps_) + static_cast<std::size_t>(step)) *
                               static_cast<std::size_t>(m_),
            static_cast<std::size_t>(m_)};
  }
  std::span<const double> stream(std::size_t particle) const {
    const std::size_t len = static_cast<std::size_t>(n_steps_) * static_cast<std::size_t>(m_);
    return {data_.data() + particle * len, len};
  }

  bool operator==(const NoiseBank& o) const {
    return seed_ == o.seed_ && n_particles_ == o.n_particles_ && n_steps_ == o.n_steps_ && dt_ == o.dt_ &&
           m_ == o.m_ && level_ == o.level_ && data_ == o.data_;
  }

 private:
  friend NoiseBank make_noise_bank(std::uint64_t, std::size_t, int, double, int, int);
  friend NoiseBank extend_bank(const NoiseBank&, std::size_t, int);
  friend NoiseBank refine_bank(const NoiseBank&, int);

  // Level-0 generation of one stream followed by `level` bridge refinements.
  void fill_stream(std::size_t i) {
    const std::size_t len = static_cast<std::size_t>(n_steps_) * static_cast<std::size_t>(m_);
    double* out = data_.data() + i * len;
    const int base_steps = n_steps_ >> level_;
    const double base_dt = dt_ * static_cast<double>(1 << level_);
    const CounterStream rng(seed_, i);
    std::vector<double> cur(static_cast<std::size_t>(base_steps) * static_cast<std::size_t>(m_));
    const double sd = std::sqrt(base_dt);
    rng.fill_normal_run(Channel::kBrownian, cur);
    for (double& z : cur) z *= sd;
    int steps = base_steps;
    double cur_dt = base_dt;
    for (int l = 1; l <= level_; ++l) {
      cur = bridge_split(rng, cur, steps, cur_dt, l);
      steps *= 2;
      cur_dt *= 0.5;
    }
    std::copy(cur.begin(), cur.end(), out);
  }

  // Brownian-bridge midpoint split: each coarse increment becomes two fine
  // increments summing to it.
  std::vector<double> bridge_split(const CounterStream& rng, const std::vector<double>& coarse, int steps,
                                   double coarse_dt, int level) const {
    std::vector<double> fine(coarse.size() * 2);
    std::vector<double> z(coarse.size());
    const double half_sd = 0.5 * std::sqrt(coarse_dt);
    const auto ch = static_cast<Channel>(static_cast<std::uint32_t>(Channel::kBridgeBase) + static_cast<std::uint32_t>(level));
    rng.fill_normal_run(ch, z);
    for (int n = 0; n < steps; ++n) {
      for (int c = 0; c < m_; ++c) {
        const double dw = coarse[static_cast<std::size_t>(n * m_ + c)];
        const double first = 0.5 * dw + half_sd * z[static_cast<std::size_t>(n * m_ + c)];
        fine[static_cast<std::size_t>((2 * n) * m_ + c)] = first;
        fine[static_cast<std::size_t>((2 * n + 1) * m_ + c)] = dw - first;
      }
    }
    return fine;
  }

  std::uint64_t seed_ = 0;
  std::size_t n_particles_ = 0;
  int n_steps_ = 0;
  double dt_ = 0.0;
  int m_ = 0;
  int level_ = 0;
  std::vector<double> data_;
};

/// Builds a bank of N independent streams of n_steps increments ~ Normal(0, dt I_m).
inline NoiseBank make_noise_bank(std::uint64_t seed, std::size_t n_particles, int n_steps, double dt, int m,
                                 int threads = 1) {
  if (n_particles == 0) throw ParameterError("make_noise_bank: particle count must be positive");
  if (n_steps <= 0) throw ParameterError("make_noise_bank: step count must be positive");
  if (m <= 0) throw ParameterError("make_noise_bank: Brownian dimension must be positive");
  if (!(dt > 0.0)) throw ParameterError("make_noise_bank: dt must be positive");
  NoiseBank b;
  b.seed_ = seed;
  b.n_particles_ = n_particles;
  b.n_steps_ = n_steps;
  b.dt_ = dt;
  b.m_ = m;
  b.data_.resize(n_particles * static_cast<std::size_t>(n_steps) * static_cast<std::size_t>(m));
  parallel_for(n_particles, threads, [&](std::size_t i) { b.fill_stream(i); });
  return b;
}

inline NoiseBank make_noise_bank(std::uint64_t seed, std::size_t n_particles, const TimeGrid& grid, int m,
                                 int threads = 1) {
  return make_noise_bank(seed, n_particles, grid.n_steps, grid.dt(), m, threads);
}

/// Appends `extra` streams; streams 0..N-1 are left bit-identical.
inline NoiseBank extend_bank(const NoiseBank& bank, std::size_t extra, int threads = 1) {
  NoiseBank b = bank;
  if (extra == 0) return b;
  const std::size_t old_n = bank.n_particles_;
  b.n_particles_ = old_n + extra;
  b.data_.resize(b.n_particles_ * static_cast<std::size_t>(b.n_steps_) * static_cast<std::size_t>(b.m_));
  parallel_for(extra, threads, [&](std::size_t j) { b.fill_stream(old_n + j); });
  return b;
}

/// Halves dt: every coarse increment is split by a Brownian bridge so that
/// consecutive fine pairs sum to the coarse increment (up to one rounding).
inline NoiseBank refine_bank(const NoiseBank& bank, int threads = 1) {
  if (bank.level_ >= 24) throw ParameterError("refine_bank: refinement depth exhausted");
  NoiseBank b;
  b.seed_ = bank.seed_;
  b.n_particles_ = bank.n_particles_;
  b.n_steps_ = bank.n_steps_ * 2;
  b.dt_ = bank.dt_ * 0.5;
  b.m_ = bank.m_;
  b.level_ = bank.level_ + 1;
  b.data_.resize(bank.data_.size() * 2);
  parallel_for(b.n_particles_, threads, [&](std::size_t i) {
    const CounterStream rng(b.seed_, i);
    const std::size_t len = static_cast<std::size_t>(bank.n_steps_) * static_cast<std::size_t>(bank.m_);
    std::vector<double> coarse(bank.data_.begin() + static_cast<std::ptrdiff_t>(i * len),
                               bank.data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
    const auto fine = b.bridge_split(rng, coarse, bank.n_steps_, bank.dt_, b.level_);
    std::copy(fine.begin(), fine.end(), b.data_.begin() + static_cast<std::ptrdiff_t>(i * 2 * len));
  });
  return b;
}

}  // namespace mfchaos
