#include "spikedet/events.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace spikedet::events {

void validate(const EventStream& stream) {
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const Event& e = stream.events[i];
    if (e.x >= stream.width || e.y >= stream.height) {
      throw std::invalid_argument("event " + std::to_string(i) + " outside the sensor");
    }
    if (e.p > 1) throw std::invalid_argument("event " + std::to_string(i) + " polarity not in {0,1}");
    if (e.t >= stream.duration) {
      throw std::invalid_argument("event " + std::to_string(i) + " outside [0, duration)");
    }
    if (i > 0 && e.t < stream.events[i - 1].t) {
      throw std::invalid_argument("event " + std::to_string(i) + " breaks time order");
    }
  }
}

std::uint64_t VoxelCube::total() const {
  std::uint64_t s = 0;
  for (auto v : data) s += v;
  return s;
}

VoxelCube encode_voxel_cube(const EventStream& stream, std::uint64_t t_a,
                            std::uint64_t t_b, std::size_t time_bins,
                            std::size_t micro_bins) {
  if (t_a >= t_b) throw std::invalid_argument("voxel window needs t_a < t_b");
  if (time_bins == 0 || micro_bins == 0) {
    throw std::invalid_argument("voxel cube needs T >= 1 and n >= 1");
  }
  VoxelCube cube;
  cube.time_bins = time_bins;
  cube.micro_bins = micro_bins;
  cube.height = stream.height;
  cube.width = stream.width;
  cube.data.assign(time_bins * cube.channels() * cube.height * cube.width, 0);

  using u128 = unsigned __int128;
  const u128 span = t_b - t_a;
  auto first = std::lower_bound(stream.events.begin(), stream.events.end(), t_a,
                                [](const Event& e, std::uint64_t t) { return e.t < t; });
  for (auto it = first; it != stream.events.end() && it->t < t_b; ++it) {
    const u128 scaled = static_cast<u128>(it->t - t_a) * time_bins;
    auto tau = static_cast<std::size_t>(scaled / span);
    const u128 within = scaled - static_cast<u128>(tau) * span;
    auto micro = static_cast<std::size_t>(within * micro_bins / span);
    tau = std::min(tau, time_bins - 1);
    micro = std::min(micro, micro_bins - 1);
    const std::size_t c = it->p * micro_bins + micro;
    ++cube.data[cube.index(tau, c, it->y, it->x)];
  }
  return cube;
}

EventStream horizontal_flip(const EventStream& stream) {
  EventStream out = stream;
  for (auto& e : out.events) e.x = static_cast<std::uint16_t>(stream.width - 1 - e.x);
  return out;
}

EventStream resize_stream_nearest(const EventStream& stream, std::uint16_t out_w,
                                  std::uint16_t out_h) {
  if (out_w == 0 || out_h == 0) throw std::invalid_argument("resize target must be positive");
  EventStream out = stream;
  out.width = out_w;
  out.height = out_h;
  for (auto& e : out.events) {
    const auto x = static_cast<std::uint64_t>(e.x) * out_w / stream.width;
    const auto y = static_cast<std::uint64_t>(e.y) * out_h / stream.height;
    e.x = static_cast<std::uint16_t>(std::min<std::uint64_t>(x, out_w - 1));
    e.y = static_cast<std::uint16_t>(std::min<std::uint64_t>(y, out_h - 1));
  }
  return out;
}

EventStream window_slice(const EventStream& stream, std::uint64_t t_start,
                         std::uint64_t length) {
  if (length == 0) throw std::invalid_argument("window length must be positive");
  EventStream out;
  out.width = stream.width;
  out.height = stream.height;
  out.duration = length;
  const std::uint64_t t_end = t_start + length;
  auto first = std::lower_bound(stream.events.begin(), stream.events.end(), t_start,
                                [](const Event& e, std::uint64_t t) { return e.t < t; });
  for (auto it = first; it != stream.events.end() && it->t < t_end; ++it) {
    Event e = *it;
    e.t -= t_start;
    out.events.push_back(e);
  }
  return out;
}

// ---- ground truth ------------------------------------------------------------

void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw EventFileError(FileErrorKind::open_failed, "cannot write " + path.string());
  f.precision(17);
  if (gt.label) f << *gt.label << '\n';
  for (const auto& b : gt.boxes) {
    f << b.t_start << ' ' << b.t_end << ' ' << b.class_id << ' ' << b.x << ' ' << b.y
      << ' ' << b.w << ' ' << b.h << '\n';
  }
  if (!f) throw EventFileError(FileErrorKind::write_failed, "write failed for " + path.string());
}

GroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw EventFileError(FileErrorKind::open_failed, "cannot read " + path.string());
  GroundTruth gt;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream in(line);
    std::vector<std::string> fields;
    for (std::string tok; in >> tok;) fields.push_back(tok);
    try {
      if (fields.size() == 1) {
        gt.label = std::stoi(fields[0]);
      } else if (fields.size() == 7) {
        BoxAnnotation b;
        b.t_start = std::stoull(fields[0]);
        b.t_end = std::stoull(fields[1]);
        b.class_id = std::stoi(fields[2]);
        b.x = std::stod(fields[3]);
        b.y = std::stod(fields[4]);
        b.w = std::stod(fields[5]);
        b.h = std::stod(fields[6]);
        gt.boxes.push_back(b);
      } else {
        throw std::invalid_argument("field count");
      }
    } catch (const std::logic_error&) {
      throw EventFileError(FileErrorKind::truncated, path.string() + ":" +
                                                         std::to_string(lineno) +
                                                         ": malformed annotation");
    }
  }
  return gt;
}

// ---- event files ---------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'E', 'V', 'S', 'T'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 2 + 8 + 8;
constexpr std::size_t kRecordBytes = 8 + 2 + 2 + 1 + 1;

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_event_file(const EventStream& stream, const std::filesystem::path& path) {
  std::string buf;
  buf.reserve(kHeaderBytes + kRecordBytes * stream.events.size());
  buf.append(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(buf, kVersion);
  put_le<std::uint16_t>(buf, stream.width);
  put_le<std::uint16_t>(buf, stream.height);
  put_le<std::uint64_t>(buf, stream.duration);
  put_le<std::uint64_t>(buf, stream.events.size());
  for (const auto& e : stream.events) {
    put_le<std::uint64_t>(buf, e.t);
    put_le<std::uint16_t>(buf, e.x);
    put_le<std::uint16_t>(buf, e.y);
    put_le<std::uint8_t>(buf, e.p);
    put_le<std::uint8_t>(buf, 0);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw EventFileError(FileErrorKind::open_failed, "cannot write " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw EventFileError(FileErrorKind::write_failed, "write failed for " + path.string());
}

EventStream read_event_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw EventFileError(FileErrorKind::open_failed, "cannot read " + path.string());
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  const std::string name = path.string();

  if (raw.size() < kMagic.size() || std::memcmp(raw.data(), kMagic.data(), kMagic.size()) != 0) {
    throw EventFileError(FileErrorKind::bad_magic, name + ": not an event file");
  }
  if (raw.size() < kHeaderBytes) {
    throw EventFileError(FileErrorKind::truncated, name + ": truncated header");
  }
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kVersion) {
    throw EventFileError(FileErrorKind::unsupported_version,
                         name + ": unsupported version " + std::to_string(version));
  }
  EventStream s;
  s.width = get_le<std::uint16_t>(p + 6);
  s.height = get_le<std::uint16_t>(p + 8);
  s.duration = get_le<std::uint64_t>(p + 10);
  const auto count = get_le<std::uint64_t>(p + 18);
  if (count > (raw.size() - kHeaderBytes) / kRecordBytes) {
    throw EventFileError(FileErrorKind::truncated,
                         name + ": header announces " + std::to_string(count) +
                             " records, file holds fewer");
  }
  s.events.resize(count);
  const unsigned char* r = p + kHeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i, r += kRecordBytes) {
    Event& e = s.events[i];
    e.t = get_le<std::uint64_t>(r);
    e.x = get_le<std::uint16_t>(r + 8);
    e.y = get_le<std::uint16_t>(r + 10);
    e.p = r[12];
    if (i > 0 && e.t < s.events[i - 1].t) {
      throw EventFileError(FileErrorKind::unsorted_timestamps,
                           name + ": record " + std::to_string(i) + " goes back in time");
    }
    if (e.x >= s.width || e.y >= s.height || e.p > 1 || e.t >= s.duration) {
      throw EventFileError(FileErrorKind::out_of_bounds,
                           name + ": record " + std::to_string(i) + " out of bounds");
    }
  }
  return s;
}

// ---- synthetic streams ---------------------------------------------------------

Scenario parse_scenario(const std::string& name) {
  if (name == "moving-bar") return Scenario::moving_bar;
  if (name == "moving-square") return Scenario::moving_square;
  if (name == "static-noise") return Scenario::static_noise;
  if (name == "multi-object") return Scenario::multi_object;
  throw std::invalid_argument("unknown scenario '" + name + "'");
}

std::string to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::moving_bar: return "moving-bar";
    case Scenario::moving_square: return "moving-square";
    case Scenario::static_noise: return "static-noise";
    case Scenario::multi_object: return "multi-object";
  }
  return "unknown";
}

namespace {

// Folds an unbounded coordinate into [0, range] by reflection; `dir` receives
// +1 or -1 depending on whether the folded motion runs forwards.
double reflect(double u, double range, double& dir) {
  dir = 1.0;
  if (range <= 0.0) return 0.0;
  double m = std::fmod(u, 2.0 * range);
  if (m < 0.0) m += 2.0 * range;
  if (m <= range) return m;
  dir = -1.0;
  return 2.0 * range - m;
}

struct RectState {
  double x, y, vx, vy;
};

RectState state_at(const MovingRect& r, double t, double width, double height) {
  if (!r.bounce) return {r.x0 + r.vx * t, r.y0 + r.vy * t, r.vx, r.vy};
  double dx = 1.0, dy = 1.0;
  const double x = reflect(r.x0 + r.vx * t, width - r.w, dx);
  const double y = reflect(r.y0 + r.vy * t, height - r.h, dy);
  return {x, y, r.vx * dx, r.vy * dy};
}

std::vector<std::uint64_t> sorted_times(std::mt19937_64& rng, std::size_t count,
                                        std::uint64_t duration) {
  std::uniform_int_distribution<std::uint64_t> dist(0, duration - 1);
  std::vector<std::uint64_t> ts(count);
  for (auto& t : ts) t = dist(rng);
  std::sort(ts.begin(), ts.end());
  return ts;
}

}  // namespace

std::pair<double, double> MovingRect::position(double t, double width, double height) const {
  const auto s = state_at(*this, t, width, height);
  return {s.x, s.y};
}

EventStream render_rects(const std::vector<MovingRect>& rects, std::uint64_t seed,
                         std::uint64_t duration, std::uint16_t width,
                         std::uint16_t height, std::size_t count, std::size_t noise) {
  if (width == 0 || height == 0) throw std::invalid_argument("sensor must have positive area");
  if (duration == 0) throw std::invalid_argument("duration must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  EventStream s;
  s.width = width;
  s.height = height;
  s.duration = duration;
  const double W = width, H = height;

  // Object events: pick a time, an object, then an edge weighted by how fast it
  // sweeps across pixels (length times normal speed).
  const auto times = sorted_times(rng, rects.empty() ? 0 : count, duration);
  std::vector<Event> object_events;
  object_events.reserve(times.size());
  for (auto t : times) {
    const MovingRect& r = rects[static_cast<std::size_t>(unit(rng) * rects.size()) % rects.size()];
    const auto st = state_at(r, static_cast<double>(t), W, H);
    // left, right, top, bottom
    const std::array<double, 4> normal_speed{-st.vx, st.vx, -st.vy, st.vy};
    const std::array<double, 4> length{r.h, r.h, r.w, r.w};
    std::array<double, 4> weight{};
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
      weight[k] = std::abs(normal_speed[k]) * length[k];
      total += weight[k];
    }
    const double pick = unit(rng) * total;
    const double along = unit(rng);
    if (total <= 0.0) continue;
    int edge = 0;
    for (double acc = weight[0]; edge < 3 && pick >= acc; acc += weight[++edge]) {}
    double px = 0, py = 0;
    switch (edge) {
      case 0: px = st.x; py = st.y + along * r.h; break;
      case 1: px = st.x + r.w; py = st.y + along * r.h; break;
      case 2: px = st.x + along * r.w; py = st.y; break;
      default: px = st.x + along * r.w; py = st.y + r.h; break;
    }
    const double fx = std::floor(px), fy = std::floor(py);
    if (fx < 0 || fy < 0 || fx >= W || fy >= H) continue;
    object_events.push_back({t, static_cast<std::uint16_t>(fx), static_cast<std::uint16_t>(fy),
                             static_cast<std::uint8_t>(normal_speed[edge] > 0 ? 1 : 0)});
  }

  std::vector<Event> noise_events;
  noise_events.reserve(noise);
  std::uniform_int_distribution<int> xd(0, width - 1), yd(0, height - 1), pd(0, 1);
  for (auto t : sorted_times(rng, noise, duration)) {
    const auto x = static_cast<std::uint16_t>(xd(rng));
    const auto y = static_cast<std::uint16_t>(yd(rng));
    noise_events.push_back({t, x, y, static_cast<std::uint8_t>(pd(rng))});
  }

  s.events.resize(object_events.size() + noise_events.size());
  std::merge(object_events.begin(), object_events.end(), noise_events.begin(),
             noise_events.end(), s.events.begin(),
             [](const Event& a, const Event& b) { return a.t < b.t; });
  return s;
}

SyntheticSample generate_synthetic_stream(Scenario scenario, std::uint64_t seed,
                                          std::uint64_t duration, std::uint16_t width,
                                          std::uint16_t height, double rate,
                                          const GeneratorOptions& opt) {
  if (width == 0 || height == 0) throw std::invalid_argument("sensor must have positive area");
  if (duration == 0) throw std::invalid_argument("duration must be positive");
  if (!(rate >= 0.0)) throw std::invalid_argument("event rate must be non-negative");
  if (opt.min_speed > opt.max_speed || opt.min_size > opt.max_size) {
    throw std::invalid_argument("generator ranges must be ordered");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double W = width, H = height, D = static_cast<double>(duration);
  const auto total = static_cast<std::size_t>(std::llround(rate * D));
  auto noise = static_cast<std::size_t>(std::llround(total * opt.noise_fraction));
  if (scenario == Scenario::static_noise) noise = total;
  const std::size_t count = total - std::min(noise, total);

  SyntheticSample out;
  std::vector<MovingRect> rects;
  switch (scenario) {
    case Scenario::static_noise:
      out.truth.label = 0;
      break;
    case Scenario::moving_bar: {
      const int label = unit(rng) < 0.5 ? 0 : 1;
      MovingRect bar;
      bar.bounce = false;
      bar.w = std::max(2.0, std::floor(W / 10.0));
      bar.h = std::floor(uniform(H / 3.0, 2.0 * H / 3.0));
      bar.y0 = std::floor(uniform(0.0, H - bar.h));
      const double room = std::max(0.0, W - bar.w);
      const double speed = std::min(uniform(opt.min_speed, opt.max_speed) / 1000.0, room / D);
      const double travel = speed * D;
      const double start = uniform(0.0, room - travel);
      bar.vx = label == 1 ? speed : -speed;
      bar.x0 = label == 1 ? start : start + travel;
      rects.push_back(bar);
      out.truth.label = label;
      break;
    }
    case Scenario::moving_square:
    case Scenario::multi_object: {
      const bool multi = scenario == Scenario::multi_object;
      const std::size_t lo = multi ? 2 : 1;
      const std::size_t hi = std::max(lo, opt.max_objects);
      const std::size_t objects =
          lo + static_cast<std::size_t>(unit(rng) * static_cast<double>(hi - lo + 1)) % (hi - lo + 1);
      for (std::size_t i = 0; i < objects; ++i) {
        MovingRect r;
        r.class_id = multi && unit(rng) < 0.5 ? 1 : 0;
        const double side = std::min(uniform(opt.min_size, opt.max_size), std::min(W, H) - 1.0);
        if (r.class_id == 1) {
          r.h = std::max(1.0, std::floor(side * 0.7));
          r.w = std::min(W - 1.0, 2.0 * r.h);
        } else {
          r.w = r.h = std::max(1.0, std::floor(side));
        }
        r.x0 = uniform(0.0, W - r.w);
        r.y0 = uniform(0.0, H - r.h);
        const double angle = uniform(0.0, 2.0 * 3.14159265358979323846);
        const double speed = uniform(opt.min_speed, opt.max_speed) / 1000.0;
        r.vx = speed * std::cos(angle);
        r.vy = speed * std::sin(angle);
        rects.push_back(r);
      }
      const std::uint64_t period = opt.annotation_period == 0 ? duration
                                                              : std::min(opt.annotation_period, duration);
      for (std::uint64_t start = 0; start + period <= duration; start += period) {
        const std::uint64_t end = start + period;
        for (const auto& r : rects) {
          const auto [x, y] = r.position(static_cast<double>(end), W, H);
          out.truth.boxes.push_back({start, end, r.class_id, x, y, r.w, r.h});
        }
      }
      break;
    }
  }
  out.stream = render_rects(rects, rng(), duration, width, height, count, noise);
  return out;
}

}  // namespace spikedet::events
