#pragma once

// Independent reference implementations for the event encoder.

#include <random>
#include <vector>

#include "spikedet/events.hpp"

namespace testsupport {

namespace ev = spikedet::events;

// Per-event binning by linear search over the n*T fine bins of the window:
// the fine index j is the largest with j * span <= offset * T * n, then
// tau = j / n and micro = j % n.
inline std::vector<std::uint32_t> brute_force_cube(const ev::EventStream& s,
                                                   std::uint64_t t_a, std::uint64_t t_b,
                                                   std::size_t T, std::size_t n) {
  const std::size_t C = 2 * n, H = s.height, W = s.width;
  std::vector<std::uint32_t> cube(T * C * H * W, 0);
  using u128 = unsigned __int128;
  for (const auto& e : s.events) {
    if (e.t < t_a || e.t >= t_b) continue;
    const u128 lhs = static_cast<u128>(e.t - t_a) * T * n;
    std::size_t j = 0;
    while (j + 1 < T * n && static_cast<u128>(j + 1) * (t_b - t_a) <= lhs) ++j;
    const std::size_t tau = j / n, micro = j % n;
    const std::size_t c = e.p * n + micro;
    cube[((tau * C + c) * H + e.y) * W + e.x] += 1;
  }
  return cube;
}

inline ev::EventStream random_stream(std::mt19937_64& rng, std::size_t max_events,
                                     std::uint16_t width, std::uint16_t height,
                                     std::uint64_t duration) {
  std::uniform_int_distribution<std::size_t> count(0, max_events);
  std::uniform_int_distribution<std::uint64_t> td(0, duration - 1);
  std::uniform_int_distribution<int> xd(0, width - 1), yd(0, height - 1), pd(0, 1);
  ev::EventStream s;
  s.width = width;
  s.height = height;
  s.duration = duration;
  s.events.resize(count(rng));
  for (auto& e : s.events) {
    e.t = td(rng);
    e.x = static_cast<std::uint16_t>(xd(rng));
    e.y = static_cast<std::uint16_t>(yd(rng));
    e.p = static_cast<std::uint8_t>(pd(rng));
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const ev::Event& a, const ev::Event& b) { return a.t < b.t; });
  return s;
}

struct VoxelPropertyResult {
  std::size_t streams = 0;
  std::size_t oracle_mismatches = 0;
  std::size_t mass_violations = 0;
  std::size_t flip_violations = 0;
};

// Random streams with random windows, T in {1,3,5}, n in {1,2,3}.
inline VoxelPropertyResult voxel_property_sweep(std::uint64_t seed, std::size_t streams,
                                                std::size_t max_events) {
  std::mt19937_64 rng(seed);
  const std::size_t Ts[] = {1, 3, 5}, ns[] = {1, 2, 3};
  VoxelPropertyResult r;
  for (std::size_t i = 0; i < streams; ++i) {
    const auto w = static_cast<std::uint16_t>(1 + rng() % 20);
    const auto h = static_cast<std::uint16_t>(1 + rng() % 20);
    const std::uint64_t duration = 1 + rng() % 100000;
    auto s = random_stream(rng, max_events, w, h, duration);
    std::uint64_t t_a = rng() % duration, t_b = rng() % (duration + 1);
    if (t_a > t_b) std::swap(t_a, t_b);
    if (t_a == t_b) t_b = t_a + 1;
    const std::size_t T = Ts[rng() % 3], n = ns[rng() % 3];

    const auto cube = ev::encode_voxel_cube(s, t_a, t_b, T, n);
    ++r.streams;
    if (cube.data != brute_force_cube(s, t_a, t_b, T, n)) ++r.oracle_mismatches;

    std::uint64_t in_window = 0;
    for (const auto& e : s.events) in_window += (e.t >= t_a && e.t < t_b);
    if (cube.total() != in_window) ++r.mass_violations;

    const auto flipped = ev::encode_voxel_cube(ev::horizontal_flip(s), t_a, t_b, T, n);
    bool ok = true;
    for (std::size_t tau = 0; tau < T && ok; ++tau)
      for (std::size_t c = 0; c < 2 * n && ok; ++c)
        for (std::size_t y = 0; y < h && ok; ++y)
          for (std::size_t x = 0; x < w; ++x)
            if (flipped.at(tau, c, y, x) != cube.at(tau, c, y, w - 1 - x)) {
              ok = false;
              break;
            }
    if (!ok) ++r.flip_violations;
  }
  return r;
}

}  // namespace testsupport
