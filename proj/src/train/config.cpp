#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spikedet/train.hpp"

namespace spikedet::train {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("config: bad value '" + text + "' for " + key);
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + num(v[i]);
  return out;
}

std::string task_name(Task t) { return t == Task::classify ? "classify" : "detect"; }

Task parse_task(const std::string& s) {
  if (s == "classify") return Task::classify;
  if (s == "detect") return Task::detect;
  throw ConfigError("config: unknown task '" + s + "' (classify|detect)");
}

// Model keys fixed by the data section or the run seed.
bool derived_model_key(const std::string& k) {
  return k == "in_channels" || k == "input_h" || k == "input_w" || k == "init_seed";
}

bool set_run(RunConfig& r, const std::string& k, const std::string& v) {
  if (k == "task") r.task = parse_task(v);
  else if (k == "epochs") r.epochs = parse_number<std::size_t>(k, v);
  else if (k == "batch_size") r.batch_size = parse_number<std::size_t>(k, v);
  else if (k == "lr") r.lr = parse_number<double>(k, v);
  else if (k == "weight_decay") r.weight_decay = parse_number<double>(k, v);
  else if (k == "grad_clip") r.grad_clip = parse_number<double>(k, v);
  else if (k == "seed") r.seed = parse_number<std::uint64_t>(k, v);
  else if (k == "decode") r.decode = decode::parse_strategy(v);
  else if (k == "loss") r.loss = losses::parse_kind(v);
  else if (k == "flip") r.flip = parse_bool(k, v);
  else if (k == "eval_every") r.eval_every = parse_number<std::size_t>(k, v);
  else return false;
  return true;
}

bool set_data(DataConfig& d, const std::string& k, const std::string& v) {
  if (k == "scenario") d.scenario = events::parse_scenario(v);
  else if (k == "seed") d.seed = parse_number<std::uint64_t>(k, v);
  else if (k == "train_samples") d.train_samples = parse_number<std::size_t>(k, v);
  else if (k == "test_samples") d.test_samples = parse_number<std::size_t>(k, v);
  else if (k == "width") d.width = parse_number<std::uint16_t>(k, v);
  else if (k == "height") d.height = parse_number<std::uint16_t>(k, v);
  else if (k == "duration") d.duration = parse_number<std::uint64_t>(k, v);
  else if (k == "event_rate") d.event_rate = parse_number<double>(k, v);
  else if (k == "noise_fraction") d.noise_fraction = parse_number<double>(k, v);
  else if (k == "min_speed") d.min_speed = parse_number<double>(k, v);
  else if (k == "max_speed") d.max_speed = parse_number<double>(k, v);
  else if (k == "min_size") d.min_size = parse_number<double>(k, v);
  else if (k == "max_size") d.max_size = parse_number<double>(k, v);
  else if (k == "max_objects") d.max_objects = parse_number<std::size_t>(k, v);
  else if (k == "time_bins") d.time_bins = parse_number<std::size_t>(k, v);
  else if (k == "micro_bins") d.micro_bins = parse_number<std::size_t>(k, v);
  else return false;
  return true;
}

bool set_detect(DetectConfig& d, const std::string& k, const std::string& v) {
  if (k == "anchor_sizes") d.anchor_sizes = parse_list(k, v);
  else if (k == "anchor_scales") d.anchor_scales = parse_list(k, v);
  else if (k == "anchor_ratios") d.anchor_ratios = parse_list(k, v);
  else if (k == "pos_iou") d.pos_iou = parse_number<double>(k, v);
  else if (k == "neg_iou") d.neg_iou = parse_number<double>(k, v);
  else if (k == "focal_alpha") d.focal_alpha = parse_number<double>(k, v);
  else if (k == "focal_gamma") d.focal_gamma = parse_number<double>(k, v);
  else if (k == "score_thresh") d.score_thresh = parse_number<double>(k, v);
  else if (k == "nms_iou") d.nms_iou = parse_number<double>(k, v);
  else if (k == "max_detections") d.max_detections = parse_number<std::size_t>(k, v);
  else return false;
  return true;
}

bool set_model(snn::ModelConfig& m, const std::string& k, const std::string& v) {
  if (derived_model_key(k)) {
    throw ConfigError("config: model." + k + " is derived from [data] and run.seed");
  }
  try {
    return m.set(k, v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: bad value '" + v + "' for model." + k + " (" + e.what() + ")");
  }
}

bool set_in(TrainConfig& c, const std::string& section, const std::string& k, const std::string& v) {
  try {
    if (section == "run") return set_run(c.run, k, v);
    if (section == "data") return set_data(c.data, k, v);
    if (section == "detect") return set_detect(c.detect, k, v);
    if (section == "model") return set_model(c.model, k, v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  throw ConfigError("config: unknown section [" + section + "]");
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  const auto k = trim(key), v = trim(value);
  const auto dot = k.find('.');
  if (dot != std::string::npos) {
    if (!set_in(*this, k.substr(0, dot), k.substr(dot + 1), v)) {
      throw ConfigError("config: unknown key '" + k + "'");
    }
    return;
  }
  // Bare keys resolve in section order; "seed" therefore means run.seed.
  for (const char* section : {"run", "data", "detect", "model"}) {
    if (set_in(*this, section, k, v)) return;
  }
  throw ConfigError("config: unknown key '" + k + "'");
}

void TrainConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  c.apply(text);
  return c;
}

void TrainConfig::apply(const std::string& text) {
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto hash = raw.find('#');
    const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    set(section.empty() || key.find('.') != std::string::npos ? key : section + "." + key,
        line.substr(eq + 1));
  }
}

void TrainConfig::finalize() {
  auto& r = run;
  auto& d = data;
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (r.epochs == 0) fail("run.epochs must be positive");
  if (r.batch_size == 0) fail("run.batch_size must be positive");
  if (!(r.lr > 0.0) || !std::isfinite(r.lr)) fail("run.lr must be positive");
  if (!(r.weight_decay >= 0.0)) fail("run.weight_decay must be non-negative");
  if (!(r.grad_clip > 0.0)) fail("run.grad_clip must be positive");
  if (r.eval_every == 0) fail("run.eval_every must be positive");
  if (d.train_samples == 0 || d.test_samples == 0) fail("data sample counts must be positive");
  if (d.width < 8 || d.height < 8) fail("data.width and data.height must be at least 8");
  if (d.time_bins == 0 || d.micro_bins == 0) fail("data.time_bins and data.micro_bins must be positive");
  if (d.duration < d.time_bins * d.micro_bins) fail("data.duration shorter than T * n microseconds");
  if (!(d.event_rate >= 0.0)) fail("data.event_rate must be non-negative");
  if (!(d.noise_fraction >= 0.0 && d.noise_fraction <= 1.0)) fail("data.noise_fraction must lie in [0, 1]");

  const bool labels = d.scenario == events::Scenario::moving_bar || d.scenario == events::Scenario::static_noise;
  if (r.task == Task::classify) {
    if (!labels) fail("classification needs the moving-bar or static-noise scenario");
    if (model.classes < 2) fail("classification needs at least 2 classes");
  } else {
    if (labels) fail("detection needs the moving-square or multi-object scenario");
    if (r.decode == decode::Strategy::membrane) fail("detection supports rate or count decoding");
    if (d.scenario == events::Scenario::multi_object && model.classes < 2) {
      fail("multi-object has 2 classes");
    }
    if (!(detect.neg_iou <= detect.pos_iou)) fail("detect.neg_iou must not exceed detect.pos_iou");
    if (detect.anchor_sizes.size() < model.pyramid_levels) fail("detect.anchor_sizes must cover every pyramid level");
    for (double v : detect.anchor_sizes) if (!(v > 0.0)) fail("anchor sizes must be positive");
    for (double v : detect.anchor_scales) if (!(v > 0.0)) fail("anchor scales must be positive");
    for (double v : detect.anchor_ratios) if (!(v > 0.0)) fail("anchor ratios must be positive");
  }
  model.in_channels = 2 * d.micro_bins;
  model.input_h = d.height;
  model.input_w = d.width;
  model.init_seed = mix_seed(r.seed, 1);
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o << "[run]\n"
    << "task = " << task_name(run.task) << '\n'
    << "epochs = " << run.epochs << '\n'
    << "batch_size = " << run.batch_size << '\n'
    << "lr = " << num(run.lr) << '\n'
    << "weight_decay = " << num(run.weight_decay) << '\n'
    << "grad_clip = " << num(run.grad_clip) << '\n'
    << "seed = " << run.seed << '\n'
    << "decode = " << decode::to_string(run.decode) << '\n'
    << "loss = " << losses::to_string(run.loss) << '\n'
    << "flip = " << (run.flip ? "true" : "false") << '\n'
    << "eval_every = " << run.eval_every << '\n'
    << "\n[data]\n"
    << "scenario = " << events::to_string(data.scenario) << '\n'
    << "seed = " << data.seed << '\n'
    << "train_samples = " << data.train_samples << '\n'
    << "test_samples = " << data.test_samples << '\n'
    << "width = " << data.width << '\n'
    << "height = " << data.height << '\n'
    << "duration = " << data.duration << '\n'
    << "event_rate = " << num(data.event_rate) << '\n'
    << "noise_fraction = " << num(data.noise_fraction) << '\n'
    << "min_speed = " << num(data.min_speed) << '\n'
    << "max_speed = " << num(data.max_speed) << '\n'
    << "min_size = " << num(data.min_size) << '\n'
    << "max_size = " << num(data.max_size) << '\n'
    << "max_objects = " << data.max_objects << '\n'
    << "time_bins = " << data.time_bins << '\n'
    << "micro_bins = " << data.micro_bins << '\n'
    << "\n[detect]\n"
    << "anchor_sizes = " << list(detect.anchor_sizes) << '\n'
    << "anchor_scales = " << list(detect.anchor_scales) << '\n'
    << "anchor_ratios = " << list(detect.anchor_ratios) << '\n'
    << "pos_iou = " << num(detect.pos_iou) << '\n'
    << "neg_iou = " << num(detect.neg_iou) << '\n'
    << "focal_alpha = " << num(detect.focal_alpha) << '\n'
    << "focal_gamma = " << num(detect.focal_gamma) << '\n'
    << "score_thresh = " << num(detect.score_thresh) << '\n'
    << "nms_iou = " << num(detect.nms_iou) << '\n'
    << "max_detections = " << detect.max_detections << '\n'
    << "\n[model]\n";
  std::istringstream model_lines(model.to_text());
  for (std::string line; std::getline(model_lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || derived_model_key(line.substr(0, eq))) continue;
    o << line.substr(0, eq) << " = " << line.substr(eq + 1) << '\n';
  }
  return o.str();
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  base.apply(text.str());
  return base;
}

TrainConfig default_config(Task task) {
  TrainConfig c;
  c.run.task = task;
  if (task == Task::detect) {
    c.run.lr = 1e-3;
    c.data.scenario = events::Scenario::moving_square;
    c.data.width = 152;
    c.data.height = 120;
    c.model.classes = 1;
  }
  return c;
}

}  // namespace spikedet::train
