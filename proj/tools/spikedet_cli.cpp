// Single entry point for the pipeline. JSON payloads go to stdout, progress and
// diagnostics to stderr. Exit codes: 0 success, 1 unexpected failure, 2 bad
// flags or configuration, 3 I/O failure, 4 non-finite training loss,
// 5 checkpoint does not match its architecture or is corrupt.

#include <Eigen/Core>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "spikedet/snn/checkpoint.hpp"
#include "spikedet/train.hpp"

namespace fs = std::filesystem;
namespace ev = spikedet::events;
namespace det = spikedet::detect;
namespace metrics = spikedet::metrics;
namespace snn = spikedet::snn;
namespace train = spikedet::train;
using nlohmann::ordered_json;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, io = 3, diverged = 4, checkpoint = 5 };

// Flag and config problems discovered after CLI11 parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const ordered_json& j) { std::cout << j.dump(2) << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

// Base configuration: task defaults, then the file, then --set in order.
train::TrainConfig build_config(train::Task task, const std::string& path,
                                const std::vector<std::string>& sets) {
  train::TrainConfig cfg = train::default_config(task);
  if (!path.empty()) cfg = train::load_config(path, cfg);
  for (const auto& s : sets) cfg.set(s);
  if (cfg.run.task != task) {
    throw UsageError(std::string("configuration is for the ") +
                     (cfg.run.task == train::Task::classify ? "classify" : "detect") + " task");
  }
  cfg.finalize();
  return cfg;
}

void log_epoch(const train::EpochRecord& e, bool quiet) {
  if (quiet) return;
  std::cerr << "epoch " << e.epoch << " loss " << e.loss << " lr " << e.lr;
  if (e.accuracy) std::cerr << " acc " << *e.accuracy;
  if (e.map50) std::cerr << " map50 " << *e.map50;
  if (e.firing_rate) std::cerr << " fr " << *e.firing_rate;
  std::cerr << '\n';
}

// ---- generate -------------------------------------------------------------------

struct GenerateArgs {
  std::string scenario = "moving-square";
  std::uint64_t seed = 7;
  std::size_t count = 10;
  std::string split = "train";
  std::string out, config;
  std::vector<std::string> sets;
};

train::Task task_for(ev::Scenario s) {
  return s == ev::Scenario::moving_bar || s == ev::Scenario::static_noise ? train::Task::classify
                                                                          : train::Task::detect;
}

int cmd_generate(const GenerateArgs& a) {
  ev::Scenario scenario;
  try {
    scenario = ev::parse_scenario(a.scenario);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto sets = a.sets;
  sets.insert(sets.begin(), {"data.scenario=" + a.scenario, "data.seed=" + std::to_string(a.seed)});
  const auto cfg = build_config(task_for(scenario), a.config, sets);
  const auto split = a.split == "test" ? train::Split::test : train::Split::train;
  emit(train::write_dataset(cfg.data, split, a.count, a.out));
  return ok;
}

// ---- encode ---------------------------------------------------------------------

struct EncodeArgs {
  std::string input, out;
  std::size_t time_bins = 5, micro_bins = 2;
  std::optional<std::uint64_t> t_start, t_end;
};

int cmd_encode(const EncodeArgs& a) {
  const auto stream = ev::read_event_file(a.input);
  const std::uint64_t t0 = a.t_start.value_or(0), t1 = a.t_end.value_or(stream.duration);
  if (t1 <= t0) throw UsageError("--t-end must exceed --t-start");
  if (a.time_bins == 0 || a.micro_bins == 0) throw UsageError("bin counts must be positive");
  const auto cube = ev::encode_voxel_cube(stream, t0, t1, a.time_bins, a.micro_bins);
  ordered_json j;
  j["input"] = fs::path(a.input).filename().string();
  j["window_us"] = {t0, t1};
  j["shape"] = {cube.time_bins, cube.channels(), cube.height, cube.width};
  j["total"] = cube.total();
  auto& per_bin = j["per_bin"] = ordered_json::array();
  const std::size_t bin = cube.channels() * cube.height * cube.width;
  for (std::size_t t = 0; t < cube.time_bins; ++t) {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < bin; ++i) s += cube.data[t * bin + i];
    per_bin.push_back(s);
  }
  if (!a.out.empty()) {
    ordered_json full;
    full["shape"] = j["shape"];
    full["data"] = cube.data;
    write_text(a.out, full.dump() + '\n');
  }
  emit(j);
  return ok;
}

// ---- training -------------------------------------------------------------------

struct TrainArgs {
  std::string config, checkpoint, csv;
  std::vector<std::string> sets;
  bool quiet = false;
};

int cmd_train(train::Task task, const TrainArgs& a) {
  const auto cfg = build_config(task, a.config, a.sets);
  auto trainer = train::make_trainer(cfg);
  const auto report = trainer->run([&](const train::EpochRecord& e) { log_epoch(e, a.quiet); });
  if (!a.quiet) std::cerr << "wall clock " << report.wall_clock_seconds << " s\n";
  if (!a.checkpoint.empty()) train::save_checkpoint(*trainer, a.checkpoint);
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  emit(report.to_json());
  return ok;
}

// ---- eval and profile --------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, split = "test", detections, dump;
  std::optional<double> iou;
};

train::LoadedModel open_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("checkpoint " + path + " does not exist");
  return train::load_checkpoint(path);
}

// Dataset directory when given, otherwise the split regenerated from the
// checkpoint's data configuration.
std::vector<train::Sample> eval_data(const train::TrainConfig& cfg, const std::string& dataset,
                                     const std::string& split) {
  if (!dataset.empty()) return train::read_dataset(cfg.data, dataset);
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  return train::make_split(cfg.data, split == "train" ? train::Split::train : train::Split::test);
}

std::map<std::string, std::vector<det::LabeledBox>> ground_truth(const std::vector<train::Sample>& data) {
  std::map<std::string, std::vector<det::LabeledBox>> gts;
  for (const auto& s : data) gts[s.id] = s.boxes;
  return gts;
}

// Mean AP over classes with ground truth at a single IoU threshold.
double map_at(const std::map<std::string, std::vector<det::Detection>>& dets,
              const std::map<std::string, std::vector<det::LabeledBox>>& gts, double iou) {
  std::set<int> classes;
  for (const auto& [id, boxes] : gts) {
    for (const auto& b : boxes) classes.insert(b.class_id);
  }
  if (classes.empty()) return 0.0;
  double sum = 0.0;
  for (int c : classes) sum += det::average_precision(dets, gts, c, iou);
  return sum / static_cast<double>(classes.size());
}

void check_iou(const std::optional<double>& iou) {
  if (iou && !(*iou > 0.0 && *iou <= 1.0)) throw UsageError("--iou must lie in (0, 1]");
}

// Scores an existing detection dump against a dataset's ground truth.
int eval_dump(const EvalArgs& a) {
  if (a.dataset.empty()) throw UsageError("--detections needs --dataset");
  std::ifstream in(fs::path(a.dataset) / "manifest.json", std::ios::binary);
  if (!in) throw IoError("cannot read " + (fs::path(a.dataset) / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  train::DataConfig data;
  data.width = m.value("width", data.width);
  data.height = m.value("height", data.height);
  const auto samples = train::read_dataset(data, a.dataset);
  const auto gts = ground_truth(samples);
  std::map<std::string, std::vector<det::Detection>> dets;
  try {
    dets = det::read_detections(a.detections);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  const auto r = det::evaluate_map(dets, gts);
  ordered_json j;
  j["samples"] = samples.size();
  j["map50"] = r.map50;
  j["map50_95"] = r.map50_95;
  if (a.iou) j["map_at_iou"] = {{"iou", *a.iou}, {"map", map_at(dets, gts, *a.iou)}};
  emit(j);
  return ok;
}

int cmd_eval(const EvalArgs& a) {
  check_iou(a.iou);
  if (!a.detections.empty()) return eval_dump(a);
  if (a.checkpoint.empty()) throw UsageError("eval needs --checkpoint or --detections");
  auto model = open_checkpoint(a.checkpoint);
  const auto data = eval_data(model.config, a.dataset, a.split);
  ordered_json j;
  if (model.classifier) {
    if (a.iou || !a.dump.empty()) throw UsageError("--iou and --dump apply to detectors only");
    j = train::eval_json(train::evaluate_classifier(*model.classifier, model.config, data));
  } else {
    std::map<std::string, std::vector<det::Detection>> dets;
    j = train::eval_json(train::evaluate_detector(*model.detector, model.config, data, &dets));
    if (a.iou) j["map_at_iou"] = {{"iou", *a.iou}, {"map", map_at(dets, ground_truth(data), *a.iou)}};
    if (!a.dump.empty()) det::write_detections(a.dump, dets);
  }
  emit(j);
  return ok;
}

struct ProfileArgs {
  std::string checkpoint, dataset, split = "test";
};

int cmd_profile(const ProfileArgs& a) {
  auto model = open_checkpoint(a.checkpoint);
  const auto data = eval_data(model.config, a.dataset, a.split);
  if (model.classifier) {
    train::evaluate_classifier(*model.classifier, model.config, data);
  } else {
    train::evaluate_detector(*model.detector, model.config, data);
  }
  const auto firing = metrics::firing_rate(*model.network);
  const double non_binary = metrics::non_binary_rate(*model.network);
  const auto ops = train::count_model_ops(model.config);
  const auto e = metrics::energy(model.config.data.time_bins, firing.overall, ops);
  auto j = metrics::profile_json(ops, firing, non_binary, e);
  j["samples"] = data.size();
  emit(j);
  return ok;
}

// ---- ablate ------------------------------------------------------------------------

struct AblateArgs {
  std::string axis, config;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  bool quiet = false;
};

int cmd_ablate(const AblateArgs& a) {
  struct Cell {
    ordered_json label;
    std::vector<std::string> sets;
  };
  std::vector<Cell> cells;
  train::Task task;
  if (a.axis == "decode,loss") {
    task = train::Task::classify;
    for (const char* d : {"rate", "count"}) {
      for (const char* l : {"mse", "ce"}) {
        cells.push_back({{{"decode", d}, {"loss", l}},
                         {std::string("run.decode=") + d, std::string("run.loss=") + l}});
      }
    }
  } else if (a.axis == "fusion") {
    task = train::Task::detect;
    for (const char* f : {"none", "3", "4"}) {
      cells.push_back({{{"fusion", f}}, {std::string("model.fusion=") + f}});
    }
  } else {
    throw UsageError("--axis must be decode,loss or fusion");
  }
  // Validate every cell before spending time on training.
  std::vector<std::uint64_t> seeds = a.seeds;
  if (seeds.empty()) seeds.push_back(build_config(task, a.config, a.sets).run.seed);
  std::vector<std::vector<train::TrainConfig>> configs;
  for (const auto& cell : cells) {
    auto& row = configs.emplace_back();
    for (auto seed : seeds) {
      auto sets = a.sets;
      sets.insert(sets.end(), cell.sets.begin(), cell.sets.end());
      sets.push_back("run.seed=" + std::to_string(seed));
      row.push_back(build_config(task, a.config, sets));
    }
  }
  ordered_json out;
  out["axis"] = a.axis;
  out["seeds"] = seeds;
  auto& list = out["cells"] = ordered_json::array();
  for (std::size_t c = 0; c < cells.size(); ++c) {
    ordered_json cell = cells[c].label;
    auto& reports = cell["reports"] = ordered_json::array();
    double sum = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      if (!a.quiet) std::cerr << "== " << cells[c].label.dump() << " seed " << seeds[s] << '\n';
      auto trainer = train::make_trainer(configs[c][s]);
      const auto report = trainer->run([&](const train::EpochRecord& e) { log_epoch(e, a.quiet); });
      const auto& f = report.final_test;
      sum += task == train::Task::classify ? f.accuracy.value_or(0.0) : f.map50.value_or(0.0);
      reports.push_back(report.to_json());
    }
    cell[task == train::Task::classify ? "mean_accuracy" : "mean_map50"] =
        sum / static_cast<double>(seeds.size());
    list.push_back(std::move(cell));
  }
  emit(out);
  return ok;
}

void apply_thread_override() {
  const char* env = std::getenv("SPIKEDET_THREADS");
  if (!env) return;
  int n = 0;
  const std::string s(env);
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || end != s.data() + s.size() || n < 1) {
    throw UsageError("SPIKEDET_THREADS must be a positive integer, got '" + s + "'");
  }
  Eigen::setNbThreads(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking event-camera classification and detection pipeline"};
  app.require_subcommand(1, 1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic dataset with ground truth and manifest");
  g->add_option("--scenario", gen.scenario, "moving-bar, moving-square, static-noise or multi-object")
      ->capture_default_str();
  g->add_option("--seed", gen.seed, "data seed")->capture_default_str();
  g->add_option("--count", gen.count, "number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--split", gen.split, "sample id prefix and seed stream")
      ->check(CLI::IsMember({"train", "test"}))
      ->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--config", gen.config, "configuration file for the remaining data fields");
  g->add_option("--set", gen.sets, "key=value override, applied after --config");

  EncodeArgs enc;
  auto* e = app.add_subcommand("encode", "encode an event file into a voxel cube");
  e->add_option("--input", enc.input, "event file")->required();
  e->add_option("--time-bins", enc.time_bins, "T")->capture_default_str();
  e->add_option("--micro-bins", enc.micro_bins, "n; channels = 2n")->capture_default_str();
  e->add_option("--t-start", enc.t_start, "window start in microseconds (default 0)");
  e->add_option("--t-end", enc.t_end, "window end in microseconds (default: stream duration)");
  e->add_option("--out", enc.out, "write the full cube as JSON here");

  TrainArgs cls, dtr;
  auto add_train = [&](const char* name, const char* help, TrainArgs& t) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", t.config, "configuration file");
    s->add_option("--set", t.sets, "key=value override; later ones win over earlier ones and the file");
    s->add_option("--checkpoint", t.checkpoint, "write the trained model here");
    s->add_option("--csv", t.csv, "write the per-epoch table here");
    s->add_flag("--quiet", t.quiet, "no progress on stderr");
    return s;
  };
  auto* tc = add_train("train-cls", "train the spiking classifier", cls);
  auto* td = add_train("train-det", "train the spiking detector", dtr);

  EvalArgs ea;
  auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint or a detection dump");
  ev_cmd->add_option("--checkpoint", ea.checkpoint, "trained model");
  ev_cmd->add_option("--dataset", ea.dataset, "dataset directory written by generate");
  ev_cmd->add_option("--split", ea.split, "regenerate this split from the checkpoint config")
      ->capture_default_str();
  ev_cmd->add_option("--iou", ea.iou, "also report mAP at this IoU threshold");
  ev_cmd->add_option("--detections", ea.detections, "score this detection dump instead of a model");
  ev_cmd->add_option("--dump", ea.dump, "write the model's detections here");

  ProfileArgs pa;
  auto* p = app.add_subcommand("profile", "firing rates, operation counts and energy of a checkpoint");
  p->add_option("--checkpoint", pa.checkpoint, "trained model")->required();
  p->add_option("--dataset", pa.dataset, "dataset directory written by generate");
  p->add_option("--split", pa.split, "regenerate this split from the checkpoint config")->capture_default_str();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "train one model per cell of an ablation axis");
  a->add_option("--axis", ab.axis, "decode,loss (classifier) or fusion (detector: none, 3, 4)")->required();
  a->add_option("--config", ab.config, "configuration file");
  a->add_option("--set", ab.sets, "key=value override applied to every cell");
  a->add_option("--seeds", ab.seeds, "run seeds; each cell is trained once per seed")->delimiter(',');
  a->add_flag("--quiet", ab.quiet, "no progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return usage;
  }

  try {
    apply_thread_override();
    if (*g) return cmd_generate(gen);
    if (*e) return cmd_encode(enc);
    if (*tc) return cmd_train(train::Task::classify, cls);
    if (*td) return cmd_train(train::Task::detect, dtr);
    if (*ev_cmd) return cmd_eval(ea);
    if (*p) return cmd_profile(pa);
    if (*a) return cmd_ablate(ab);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return usage;
  } catch (const train::ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return usage;
  } catch (const train::NonFiniteLoss& err) {
    std::cerr << "diverged: " << err.what() << '\n';
    return diverged;
  } catch (const snn::CheckpointError& err) {
    std::cerr << "checkpoint error: " << err.what() << '\n';
    return checkpoint;
  } catch (const IoError& err) {
    std::cerr << "I/O error: " << err.what() << '\n';
    return io;
  } catch (const train::DatasetError& err) {
    std::cerr << "dataset error: " << err.what() << '\n';
    return io;
  } catch (const ev::EventFileError& err) {
    std::cerr << "event file error: " << err.what() << '\n';
    return io;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "I/O error: " << err.what() << '\n';
    return io;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return failure;
  }
  return failure;
}
