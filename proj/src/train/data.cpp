#include <cstdio>
#include <fstream>

#include "spikedet/train.hpp"

namespace spikedet::train {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0xD1B54A32D192ED03ull);
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

namespace {

std::string sample_id(Split split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%06zu", split == Split::train ? "tr" : "te", index);
  return buf;
}

events::GeneratorOptions generator_options(const DataConfig& cfg) {
  events::GeneratorOptions o;
  o.noise_fraction = cfg.noise_fraction;
  o.min_speed = cfg.min_speed;
  o.max_speed = cfg.max_speed;
  o.min_size = cfg.min_size;
  o.max_size = cfg.max_size;
  o.max_objects = cfg.max_objects;
  return o;
}

const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

}  // namespace

std::uint64_t sample_seed(std::uint64_t data_seed, Split split, std::size_t index) {
  return mix_seed(mix_seed(data_seed, split == Split::train ? 11 : 12), index);
}

events::SyntheticSample synthesize(const DataConfig& cfg, Split split, std::size_t index) {
  return events::generate_synthetic_stream(cfg.scenario, sample_seed(cfg.seed, split, index),
                                           cfg.duration, cfg.width, cfg.height, cfg.event_rate,
                                           generator_options(cfg));
}

Sample prepare_sample(const DataConfig& cfg, std::string id, const events::EventStream& stream,
                      const events::GroundTruth& truth) {
  if (stream.width != cfg.width || stream.height != cfg.height) {
    throw DatasetError("sample " + id + " is " + std::to_string(stream.width) + "x" +
                       std::to_string(stream.height) + ", expected " + std::to_string(cfg.width) +
                       "x" + std::to_string(cfg.height));
  }
  Sample s;
  s.id = std::move(id);
  s.cube = events::encode_voxel_cube(stream, 0, stream.duration, cfg.time_bins, cfg.micro_bins);
  s.label = truth.label;
  std::vector<detect::LabeledBox> boxes;
  for (const auto& b : truth.boxes) {
    if (b.t_end == stream.duration) boxes.push_back({{b.x, b.y, b.w, b.h}, b.class_id});
  }
  s.boxes = detect::filter_gt_boxes(boxes);
  return s;
}

std::vector<Sample> make_split(const DataConfig& cfg, Split split) {
  const std::size_t count = split == Split::train ? cfg.train_samples : cfg.test_samples;
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto synth = synthesize(cfg, split, i);
    out.push_back(prepare_sample(cfg, sample_id(split, i), synth.stream, synth.truth));
  }
  return out;
}

nlohmann::ordered_json write_dataset(const DataConfig& cfg, Split split, std::size_t count,
                                     const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DatasetError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json m;
  m["scenario"] = events::to_string(cfg.scenario);
  m["seed"] = cfg.seed;
  m["split"] = split_name(split);
  m["width"] = cfg.width;
  m["height"] = cfg.height;
  m["duration_us"] = cfg.duration;
  m["event_rate"] = cfg.event_rate;
  m["count"] = count;
  auto& list = m["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const auto id = sample_id(split, i);
    const auto synth = synthesize(cfg, split, i);
    events::write_event_file(synth.stream, dir / (id + ".evt"));
    events::write_ground_truth(synth.truth, dir / (id + ".gt"));
    list.push_back({{"id", id}, {"events", synth.stream.events.size()}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) throw DatasetError("cannot write " + (dir / "manifest.json").string());
  return m;
}

std::vector<Sample> read_dataset(const DataConfig& cfg, const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw DatasetError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  std::vector<Sample> out;
  try {
    for (const auto& entry : m.at("samples")) {
      const auto id = entry.at("id").get<std::string>();
      const auto stream = events::read_event_file(dir / (id + ".evt"));
      const auto truth = events::read_ground_truth(dir / (id + ".gt"));
      out.push_back(prepare_sample(cfg, id, stream, truth));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed manifest in " + dir.string() + ": " + e.what());
  } catch (const events::EventFileError& e) {
    throw DatasetError(e.what());
  }
  if (out.empty()) throw DatasetError("dataset " + dir.string() + " has no samples");
  return out;
}

ag::Tensor batch_input(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx,
                       const std::vector<bool>& flips) {
  if (idx.empty()) throw std::invalid_argument("batch_input: empty batch");
  if (!flips.empty() && flips.size() != idx.size()) {
    throw std::invalid_argument("batch_input: one flip flag per sample expected");
  }
  const auto& first = samples.at(idx[0]).cube;
  const std::size_t T = first.time_bins, C = first.channels(), H = first.height, W = first.width;
  const std::size_t N = idx.size(), plane = H * W;
  std::vector<double> v(T * N * C * plane);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& cube = samples.at(idx[i]).cube;
    if (cube.time_bins != T || cube.channels() != C || cube.height != H || cube.width != W) {
      throw std::invalid_argument("batch_input: samples have different cube shapes");
    }
    const bool flip = !flips.empty() && flips[i];
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        double* dst = v.data() + ((t * N + i) * C + c) * plane;
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            dst[y * W + (flip ? W - 1 - x : x)] = cube.at(t, c, y, x);
          }
        }
      }
    }
  }
  return ag::Tensor::from({T * N, C, H, W}, std::move(v));
}

std::vector<detect::LabeledBox> flip_boxes(const std::vector<detect::LabeledBox>& boxes, double width) {
  auto out = boxes;
  for (auto& b : out) b.box.x = width - b.box.x - b.box.w;
  return out;
}

}  // namespace spikedet::train
