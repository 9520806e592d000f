#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "support/event_oracles.hpp"

namespace ev = spikedet::events;
namespace fs = std::filesystem;

namespace {

ev::EventStream make_stream(std::uint16_t w, std::uint16_t h, std::uint64_t duration,
                            std::vector<ev::Event> events) {
  ev::EventStream s;
  s.width = w;
  s.height = h;
  s.duration = duration;
  s.events = std::move(events);
  return s;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "spikedet_test_events";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("empty stream encodes to zeros of the right shape") {
  auto s = make_stream(8, 8, 1000, {});
  auto cube = ev::encode_voxel_cube(s, 0, 1000, 5, 2);
  CHECK(cube.time_bins == 5);
  CHECK(cube.channels() == 4);
  CHECK(cube.height == 8);
  CHECK(cube.width == 8);
  CHECK(cube.data.size() == 5 * 4 * 8 * 8);
  CHECK(cube.total() == 0);
}

TEST_CASE("single event at window start lands in bin 0, channel p*n") {
  auto s = make_stream(8, 8, 1000, {{100, 3, 4, 1}});
  auto cube = ev::encode_voxel_cube(s, 100, 600, 5, 2);
  CHECK(cube.at(0, 2, 4, 3) == 1);
  CHECK(cube.total() == 1);
}

TEST_CASE("window bounds are half-open and bins follow floor") {
  // span 100, T=5: bins of 20 us, micro bins of 10 us.
  auto s = make_stream(4, 1, 1000,
                       {{0, 0, 0, 0}, {9, 0, 0, 0}, {10, 1, 0, 0}, {19, 1, 0, 1},
                        {20, 2, 0, 0}, {99, 3, 0, 1}, {100, 3, 0, 1}});
  auto cube = ev::encode_voxel_cube(s, 0, 100, 5, 2);
  CHECK(cube.total() == 6);
  CHECK(cube.at(0, 0, 0, 0) == 2);
  CHECK(cube.at(0, 1, 0, 1) == 1);
  CHECK(cube.at(0, 3, 0, 1) == 1);
  CHECK(cube.at(1, 0, 0, 2) == 1);
  CHECK(cube.at(4, 3, 0, 3) == 1);
}

TEST_CASE("encoder rejects invalid windows and bin counts") {
  auto s = make_stream(4, 4, 100, {});
  CHECK_THROWS_AS(ev::encode_voxel_cube(s, 10, 10, 5, 2), std::invalid_argument);
  CHECK_THROWS_AS(ev::encode_voxel_cube(s, 20, 10, 5, 2), std::invalid_argument);
  CHECK_THROWS_AS(ev::encode_voxel_cube(s, 0, 10, 0, 2), std::invalid_argument);
  CHECK_THROWS_AS(ev::encode_voxel_cube(s, 0, 10, 5, 0), std::invalid_argument);
}

TEST_CASE("200 random events on 16x16 match the per-event oracle") {
  std::mt19937_64 rng(2024);
  auto s = testsupport::random_stream(rng, 200, 16, 16, 50000);
  while (s.events.size() < 200) s = testsupport::random_stream(rng, 200, 16, 16, 50000);
  auto cube = ev::encode_voxel_cube(s, 0, 50000, 5, 2);
  CHECK(cube.data == testsupport::brute_force_cube(s, 0, 50000, 5, 2));
  CHECK(cube.total() == 200);
}

TEST_CASE("voxel property sweep: oracle, mass conservation, flip equivariance") {
  auto r = testsupport::voxel_property_sweep(7, 1000, 500);
  CHECK(r.streams == 1000);
  CHECK(r.oracle_mismatches == 0);
  CHECK(r.mass_violations == 0);
  CHECK(r.flip_violations == 0);
}

TEST_CASE("encoder is linear in the event set") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = testsupport::random_stream(rng, 100, 12, 9, 10000);
    auto b = testsupport::random_stream(rng, 100, 12, 9, 10000);
    ev::EventStream both = a;
    both.events.insert(both.events.end(), b.events.begin(), b.events.end());
    std::stable_sort(both.events.begin(), both.events.end(),
                     [](const ev::Event& x, const ev::Event& y) { return x.t < y.t; });
    auto ca = ev::encode_voxel_cube(a, 1000, 9000, 3, 3);
    auto cb = ev::encode_voxel_cube(b, 1000, 9000, 3, 3);
    auto cab = ev::encode_voxel_cube(both, 1000, 9000, 3, 3);
    for (std::size_t i = 0; i < cab.data.size(); ++i) {
      REQUIRE(cab.data[i] == ca.data[i] + cb.data[i]);
    }
  }
}

TEST_CASE("horizontal flip") {
  auto s = make_stream(8, 2, 100, {{5, 0, 1, 1}, {6, 7, 0, 0}});
  auto f = ev::horizontal_flip(s);
  CHECK(f.events[0].x == 7);
  CHECK(f.events[1].x == 0);
  CHECK(f.events[0].y == 1);
  CHECK(f.events[0].t == 5);
  CHECK(f.events[0].p == 1);
  CHECK(ev::horizontal_flip(f) == s);

  std::mt19937_64 rng(5);
  auto r = testsupport::random_stream(rng, 100, 30, 20, 1000);
  auto rf = ev::horizontal_flip(r);
  CHECK(rf.events.size() == r.events.size());
  auto on = [](const ev::EventStream& st) {
    return std::count_if(st.events.begin(), st.events.end(),
                         [](const ev::Event& e) { return e.p == 1; });
  };
  CHECK(on(rf) == on(r));
}

TEST_CASE("synthetic generator is deterministic and well formed") {
  for (auto sc : {ev::Scenario::moving_bar, ev::Scenario::moving_square,
                  ev::Scenario::static_noise, ev::Scenario::multi_object}) {
    auto a = ev::generate_synthetic_stream(sc, 42, 100000, 64, 48, 0.05);
    auto b = ev::generate_synthetic_stream(sc, 42, 100000, 64, 48, 0.05);
    CHECK(a.stream == b.stream);
    CHECK(a.truth == b.truth);
    CHECK_NOTHROW(ev::validate(a.stream));
    CHECK(!a.stream.events.empty());
    auto c = ev::generate_synthetic_stream(sc, 43, 100000, 64, 48, 0.05);
    CHECK(!(c.stream == a.stream));
  }
  CHECK_THROWS_AS(ev::generate_synthetic_stream(ev::Scenario::moving_bar, 1, 1000, 0, 10, 1.0),
                  std::invalid_argument);
  CHECK(ev::parse_scenario("multi-object") == ev::Scenario::multi_object);
  CHECK_THROWS_AS(ev::parse_scenario("spiral"), std::invalid_argument);
}

TEST_CASE("moving-square boxes stay inside the sensor") {
  ev::GeneratorOptions opt;
  opt.annotation_period = 25000;
  opt.max_objects = 3;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto sample = ev::generate_synthetic_stream(ev::Scenario::moving_square, seed, 100000,
                                                152, 120, 0.02, opt);
    CHECK(sample.truth.boxes.size() % 4 == 0);
    for (const auto& b : sample.truth.boxes) {
      CHECK(b.x >= 0.0);
      CHECK(b.y >= 0.0);
      CHECK(b.x + b.w <= 152.0);
      CHECK(b.y + b.h <= 120.0);
      CHECK(b.t_end - b.t_start == 25000);
    }
  }
}

TEST_CASE("moving-bar centroid advances with the bar velocity") {
  ev::GeneratorOptions opt;
  opt.noise_fraction = 0.0;
  opt.min_speed = opt.max_speed = 0.2;  // px per ms
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto sample = ev::generate_synthetic_stream(ev::Scenario::moving_bar, seed, 100000, 64, 64,
                                                0.1, opt);
    const double v = (*sample.truth.label == 1 ? 1.0 : -1.0) * 0.2;
    std::vector<double> centroids;
    for (std::uint64_t start = 0; start < 100000; start += 10000) {
      auto win = ev::window_slice(sample.stream, start, 10000);
      REQUIRE(!win.events.empty());
      double sx = 0.0;
      for (const auto& e : win.events) sx += e.x;
      centroids.push_back(sx / static_cast<double>(win.events.size()));
    }
    for (std::size_t i = 1; i < centroids.size(); ++i) {
      CHECK(std::abs(centroids[i] - centroids[i - 1] - v * 10.0) <= 1.0);
    }
  }
}

TEST_CASE("leading edges fire polarity 1") {
  ev::MovingRect r;
  r.x0 = 10;
  r.y0 = 5;
  r.w = 6;
  r.h = 8;
  r.vx = 0.0005;
  r.bounce = false;
  auto s = ev::render_rects({r}, 3, 10000, 40, 20, 500, 0);
  for (const auto& e : s.events) {
    const double left = r.x0 + r.vx * static_cast<double>(e.t);
    if (e.p == 1) CHECK(std::abs(e.x - std::floor(left + r.w)) <= 0.0);
    else CHECK(std::abs(e.x - std::floor(left)) <= 0.0);
  }
}

TEST_CASE("event file round trip and distinct errors") {
  std::mt19937_64 rng(8);
  auto s = testsupport::random_stream(rng, 1000, 304, 240, 1000000);
  while (s.events.size() < 1000) s.events.push_back({999999, 1, 1, 0});
  auto path = scratch("round.evst");
  ev::write_event_file(s, path);
  CHECK(ev::read_event_file(path) == s);

  auto empty = make_stream(17, 9, 55, {});
  ev::write_event_file(empty, path);
  auto back = ev::read_event_file(path);
  CHECK(back.events.empty());
  CHECK(back.width == 17);
  CHECK(back.height == 9);

  auto kind_of = [](const fs::path& p) {
    try {
      ev::read_event_file(p);
    } catch (const ev::EventFileError& e) {
      return e.kind();
    }
    FAIL("expected an error");
    return ev::FileErrorKind::open_failed;
  };

  auto desc = make_stream(4, 4, 100, {{50, 0, 0, 0}, {40, 1, 1, 1}});
  ev::write_event_file(desc, path);
  CHECK(kind_of(path) == ev::FileErrorKind::unsorted_timestamps);

  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE and some bytes";
  }
  CHECK(kind_of(path) == ev::FileErrorKind::bad_magic);

  ev::write_event_file(make_stream(4, 4, 100, {{1, 0, 0, 0}, {2, 1, 1, 1}}), path);
  fs::resize_file(path, fs::file_size(path) - 3);
  CHECK(kind_of(path) == ev::FileErrorKind::truncated);

  CHECK(kind_of(scratch("missing.evst")) == ev::FileErrorKind::open_failed);
}

TEST_CASE("ground-truth sidecar round trip") {
  ev::GroundTruth det;
  det.boxes.push_back({0, 50000, 1, 10.5, 20.25, 30, 31});
  det.boxes.push_back({50000, 100000, 0, 0, 0, 12, 12});
  auto path = scratch("gt.txt");
  ev::write_ground_truth(det, path);
  CHECK(ev::read_ground_truth(path) == det);

  ev::GroundTruth cls;
  cls.label = 1;
  ev::write_ground_truth(cls, path);
  CHECK(ev::read_ground_truth(path) == cls);
}

TEST_CASE("nearest-neighbour resize") {
  std::mt19937_64 rng(12);
  auto s = testsupport::random_stream(rng, 300, 100, 80, 1000);
  CHECK(ev::resize_stream_nearest(s, 100, 80) == s);

  auto corner = make_stream(128, 128, 10, {{1, 127, 127, 0}, {2, 0, 0, 1}});
  auto r = ev::resize_stream_nearest(corner, 64, 64);
  CHECK(r.events[0].x == 63);
  CHECK(r.events[0].y == 63);
  CHECK(r.events[1].x == 0);

  for (int trial = 0; trial < 20; ++trial) {
    auto rs = ev::resize_stream_nearest(testsupport::random_stream(rng, 300, 100, 80, 1000), 64, 64);
    CHECK(rs.events.size() <= 300);
    for (const auto& e : rs.events) {
      CHECK(e.x < 64);
      CHECK(e.y < 64);
    }
    CHECK_NOTHROW(ev::validate(rs));
  }
}

TEST_CASE("window slices partition the stream") {
  std::mt19937_64 rng(13);
  auto s = testsupport::random_stream(rng, 400, 10, 10, 10000);
  auto whole = ev::window_slice(s, 0, 10000);
  CHECK(whole.events == s.events);

  auto nothing = ev::window_slice(s, 20000, 500);
  CHECK(nothing.events.empty());

  for (std::uint64_t cut = 0; cut <= 10000; cut += 1250) {
    auto a = ev::window_slice(s, 0, std::max<std::uint64_t>(cut, 1));
    auto b = ev::window_slice(s, a.duration, 10000);
    CHECK(a.events.size() + b.events.size() == s.events.size());
    for (std::size_t i = 0; i < b.events.size(); ++i) {
      CHECK(b.events[i].t + a.duration == s.events[a.events.size() + i].t);
    }
  }
}
