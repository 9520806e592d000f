#pragma once

// Event streams, their on-disk format, synthetic generators and the voxel cube
// encoder.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace spikedet::events {

struct Event {
  std::uint64_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t p = 0;  // polarity, 0 or 1

  bool operator==(const Event&) const = default;
};

struct EventStream {
  std::vector<Event> events;  // sorted by t, all inside [0, duration)
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint64_t duration = 0;

  bool operator==(const EventStream&) const = default;
};

// Throws std::invalid_argument naming the first violated invariant.
void validate(const EventStream& stream);

// Counts of shape [T, C, H, W] with C = 2n, row-major.
struct VoxelCube {
  std::size_t time_bins = 0;
  std::size_t micro_bins = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> data;

  std::size_t channels() const { return 2 * micro_bins; }
  std::size_t index(std::size_t tau, std::size_t c, std::size_t y,
                    std::size_t x) const {
    return ((tau * channels() + c) * height + y) * width + x;
  }
  std::uint32_t at(std::size_t tau, std::size_t c, std::size_t y,
                   std::size_t x) const {
    return data[index(tau, c, y, x)];
  }
  std::uint64_t total() const;
};

// Events with t in [t_a, t_b) are binned by
//   tau   = floor((t - t_a) * T / (t_b - t_a))          clamped to T - 1
//   micro = floor(frac(position within the bin) * n)   clamped to n - 1
//   c     = p * n + micro
// using exact integer arithmetic.
VoxelCube encode_voxel_cube(const EventStream& stream, std::uint64_t t_a,
                            std::uint64_t t_b, std::size_t time_bins,
                            std::size_t micro_bins);

// Mirrors x to width - 1 - x; everything else is unchanged.
EventStream horizontal_flip(const EventStream& stream);

// Maps coordinates with floor(x * out_w / width), floor(y * out_h / height).
EventStream resize_stream_nearest(const EventStream& stream, std::uint16_t out_w,
                                  std::uint16_t out_h);

// Events in [t_start, t_start + length), timestamps re-based to zero.
EventStream window_slice(const EventStream& stream, std::uint64_t t_start,
                         std::uint64_t length);

// ---- ground truth ------------------------------------------------------------

struct BoxAnnotation {
  std::uint64_t t_start = 0;
  std::uint64_t t_end = 0;
  int class_id = 0;
  double x = 0, y = 0, w = 0, h = 0;  // top-left corner and size, pixels

  bool operator==(const BoxAnnotation&) const = default;
};

// Either a class label (classification) or per-window boxes (detection).
struct GroundTruth {
  std::optional<int> label;
  std::vector<BoxAnnotation> boxes;

  bool operator==(const GroundTruth&) const = default;
};

// Sidecar text: one `class` line, or one `t_start t_end class x y w h` line
// per box.
void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path);
GroundTruth read_ground_truth(const std::filesystem::path& path);

// ---- event files ---------------------------------------------------------------

enum class FileErrorKind {
  open_failed,
  write_failed,
  bad_magic,
  unsupported_version,
  truncated,
  unsorted_timestamps,
  out_of_bounds,
};

class EventFileError : public std::runtime_error {
 public:
  EventFileError(FileErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FileErrorKind kind() const { return kind_; }

 private:
  FileErrorKind kind_;
};

// Little-endian: "EVST", u16 version = 1, u16 width, u16 height, u64 duration,
// u64 count, then count records {u64 t, u16 x, u16 y, u8 p, u8 pad}.
void write_event_file(const EventStream& stream, const std::filesystem::path& path);
EventStream read_event_file(const std::filesystem::path& path);

// ---- synthetic streams ---------------------------------------------------------

enum class Scenario { moving_bar, moving_square, static_noise, multi_object };

Scenario parse_scenario(const std::string& name);
std::string to_string(Scenario scenario);

struct GeneratorOptions {
  // Share of events drawn uniformly over the sensor instead of from objects.
  double noise_fraction = 0.1;
  // Object speed range in pixels per millisecond.
  double min_speed = 0.05;
  double max_speed = 0.15;
  // Square side range in pixels (detection scenarios).
  double min_size = 24.0;
  double max_size = 40.0;
  std::size_t max_objects = 2;
  // Detection annotations cover consecutive windows of this length; 0 means
  // one window spanning the whole stream.
  std::uint64_t annotation_period = 0;
};

struct SyntheticSample {
  EventStream stream;
  GroundTruth truth;
};

// Deterministic in `seed`. Moving objects emit events along the edges facing
// their motion: polarity 1 on the leading edge, 0 on the trailing edge.
// moving-bar: a vertical bar moving left (label 0) or right (label 1).
// static-noise: uniform events only, label 0.
// moving-square / multi-object: bouncing squares (class 0) and, for
// multi-object, 2:1 rectangles (class 1); boxes give each object's extent at
// the end of every annotation window.
SyntheticSample generate_synthetic_stream(Scenario scenario, std::uint64_t seed,
                                          std::uint64_t duration,
                                          std::uint16_t width,
                                          std::uint16_t height, double rate,
                                          const GeneratorOptions& options = {});

// Kinematics of one rigid rectangle, exposed for oracle tests.
struct MovingRect {
  double x0 = 0, y0 = 0;  // top-left at t = 0
  double w = 0, h = 0;
  double vx = 0, vy = 0;  // pixels per microsecond
  int class_id = 0;
  bool bounce = true;     // reflect off the sensor borders

  // Top-left corner at time t.
  std::pair<double, double> position(double t, double width, double height) const;
};

// Renders `count` object events for the given rectangles plus `noise` uniform
// events, sorted by time. Exposed so tests can check the generator against its
// own kinematics.
EventStream render_rects(const std::vector<MovingRect>& rects, std::uint64_t seed,
                         std::uint64_t duration, std::uint16_t width,
                         std::uint16_t height, std::size_t count,
                         std::size_t noise);

}  // namespace spikedet::events
