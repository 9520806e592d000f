#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "spikedet/snn/checkpoint.hpp"
#include "spikedet/train.hpp"

namespace spikedet::train {

namespace {

detect::AnchorConfig anchor_config(const DetectConfig& d) {
  detect::AnchorConfig a;
  a.sizes = d.anchor_sizes;
  a.scales = d.anchor_scales;
  a.ratios = d.anchor_ratios;
  return a;
}

std::vector<std::size_t> level_channels(const snn::DetectorBody& body) {
  std::vector<std::size_t> out;
  for (const auto& t : body.pyramid()) out.push_back(t.channels);
  return out;
}

std::vector<detect::LevelShape> level_shapes(const snn::DetectorBody& body) {
  std::vector<detect::LevelShape> out;
  for (const auto& t : body.pyramid()) out.push_back({t.height, t.width});
  return out;
}

// Mirroring a moving-bar window reverses the motion, so the label swaps.
int mirrored_label(events::Scenario s, int label) {
  return s == events::Scenario::moving_bar ? 1 - label : label;
}

std::size_t argmax_row(std::span<const double> v, std::size_t row, std::size_t cols) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < cols; ++c) {
    if (v[row * cols + c] > v[row * cols + best]) best = c;
  }
  return best;
}

double uniform01(snn::Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<std::size_t> range_batch(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> b(end - begin);
  std::iota(b.begin(), b.end(), begin);
  return b;
}

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

// ---- detector model ------------------------------------------------------------------------

Detector::Detector(const snn::ModelConfig& model, const DetectConfig& det, decode::Strategy strategy)
    : body_(model),
      head_rng_(mix_seed(model.init_seed, 7)),
      head_(level_channels(body_),
            detect::HeadConfig{model.classes, anchor_config(det).per_cell(), 0.01}, head_rng_),
      anchors_(detect::generate_anchors(level_shapes(body_), model.input_h, model.input_w,
                                        anchor_config(det))),
      strategy_(strategy) {
  if (strategy == decode::Strategy::membrane) {
    throw std::invalid_argument("Detector: the spike pyramid is decoded by rate or count");
  }
}

detect::SsdHead::Output Detector::forward(const ag::Tensor& x, snn::RunContext& ctx) {
  auto levels = body_.forward(x, ctx);
  std::vector<ag::Tensor> decoded;
  decoded.reserve(levels.size());
  for (const auto& l : levels) decoded.push_back(decode::decode(strategy_, l, l, ctx.steps, 2.0));
  // The head runs once per sample on decoded maps; its operations are spread
  // over the T steps so that every record stays "per sample and step".
  std::vector<snn::OpRecord> head_ops;
  auto* outer = ctx.ops;
  if (outer) ctx.ops = &head_ops;
  auto out = head_.forward(decoded, ctx);
  if (outer) {
    ctx.ops = outer;
    for (auto& r : head_ops) {
      r.count /= static_cast<double>(ctx.steps);
      outer->push_back(std::move(r));
    }
  }
  return out;
}

void Detector::visit(snn::StateVisitor& v) {
  body_.visit(v, "");
  head_.visit(v, "head");
}

// ---- reports ---------------------------------------------------------------------------------

nlohmann::ordered_json eval_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  if (r.map50) j["map50"] = *r.map50;
  if (r.map50_95) j["map50_95"] = *r.map50_95;
  j["firing_rate"] = r.firing_rate;
  j["non_binary_rate"] = r.non_binary_rate;
  return j;
}

nlohmann::ordered_json RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task == Task::classify ? "classify" : "detect";
  j["config"] = config_text;
  auto& list = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : epochs) {
    nlohmann::ordered_json r;
    r["epoch"] = e.epoch;
    r["loss"] = e.loss;
    r["lr"] = e.lr;
    if (task == Task::classify) {
      r["accuracy"] = opt(e.accuracy);
    } else {
      r["map50"] = opt(e.map50);
      r["map50_95"] = opt(e.map50_95);
    }
    r["firing_rate"] = opt(e.firing_rate);
    r["non_binary_rate"] = opt(e.non_binary_rate);
    list.push_back(std::move(r));
  }
  j["final"] = {{"test", eval_json(final_test)}, {"train", eval_json(final_train)}};
  return j;
}

std::string RunReport::to_csv() const {
  std::ostringstream o;
  auto cell = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  o << "epoch,loss,lr,accuracy,map50,map50_95,firing_rate,non_binary_rate\n";
  for (const auto& e : epochs) {
    o << e.epoch << ',' << num(e.loss) << ',' << num(e.lr) << ',' << cell(e.accuracy) << ','
      << cell(e.map50) << ',' << cell(e.map50_95) << ',' << cell(e.firing_rate) << ','
      << cell(e.non_binary_rate) << '\n';
  }
  return o.str();
}

// ---- shared loop --------------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.finalize();
  train_ = make_split(cfg_.data, Split::train);
  test_ = make_split(cfg_.data, Split::test);
  const std::size_t per_epoch = (train_.size() + cfg_.run.batch_size - 1) / cfg_.run.batch_size;
  total_steps_ = cfg_.run.epochs * per_epoch;
}

void Trainer::check_finite(double loss) const {
  if (!std::isfinite(loss)) {
    throw NonFiniteLoss("non-finite training loss at step " + std::to_string(adam_.step + 1));
  }
}

void Trainer::optimize(const ag::Tensor& loss) {
  for (auto& p : params_) p.zero_grad();
  ag::backward(loss);
  // Heaviside spikes swallow NaN activations, so the gradient norm is checked too.
  if (!std::isfinite(clip_grad_norm(params_, cfg_.run.grad_clip))) {
    throw NonFiniteLoss("non-finite gradient norm at step " + std::to_string(adam_.step + 1));
  }
  last_lr_ = cosine_lr(std::min<std::size_t>(adam_.step, total_steps_), total_steps_, cfg_.run.lr);
  AdamWConfig a;
  a.weight_decay = cfg_.run.weight_decay;
  adamw_step(params_, adam_, last_lr_, a);
}

RunReport Trainer::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  const auto start = std::chrono::steady_clock::now();
  snn::Rng rng(mix_seed(cfg_.run.seed, 2));
  RunReport report;
  report.task = cfg_.run.task;
  report.config_text = cfg_.to_text();
  const std::size_t n = train_.size(), bs = cfg_.run.batch_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg_.run.epochs; ++epoch) {
    // Fisher-Yates on the raw generator keeps the order independent of the
    // standard library's distribution implementations.
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + bs)));
      std::vector<bool> flips(batch.size(), false);
      if (cfg_.run.flip) {
        for (std::size_t i = 0; i < flips.size(); ++i) flips[i] = uniform01(rng) < 0.5;
      }
      loss_sum += train_step(batch, flips);
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.lr = last_lr_;
    if (epoch % cfg_.run.eval_every == 0 || epoch == cfg_.run.epochs) {
      const auto r = evaluate(test_);
      rec.accuracy = r.accuracy;
      rec.map50 = r.map50;
      rec.map50_95 = r.map50_95;
      rec.firing_rate = r.firing_rate;
      rec.non_binary_rate = r.non_binary_rate;
      report.final_test = r;
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.final_train = evaluate(train_);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---- classification -------------------------------------------------------------------------------

ClassifierTrainer::ClassifierTrainer(TrainConfig cfg) : Trainer(std::move(cfg)) {
  if (cfg_.run.task != Task::classify) throw ConfigError("ClassifierTrainer needs task = classify");
  model_ = std::make_unique<snn::SpikingClassifier>(cfg_.model);
  for (auto& [name, t] : snn::parameters(*model_)) params_.push_back(t);
}

ag::Tensor ClassifierTrainer::loss_on(const std::vector<std::size_t>& batch,
                                      const std::vector<bool>& flips) {
  auto x = batch_input(train_, batch, flips);
  snn::reset_state(*model_);
  snn::RunContext ctx;
  ctx.steps = cfg_.data.time_bins;
  ctx.training = true;
  auto out = model_->forward(x, ctx);
  auto decoded = decode::decode(cfg_.run.decode, out.spikes, out.currents, ctx.steps, cfg_.model.tau_init);
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int l = train_[batch[i]].label.value();
    labels.push_back(!flips.empty() && flips[i] ? mirrored_label(cfg_.data.scenario, l) : l);
  }
  return losses::classification_loss(cfg_.run.loss, decoded, losses::one_hot(labels, cfg_.model.classes));
}

double ClassifierTrainer::train_step(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) {
  auto loss = loss_on(batch, flips);
  const double value = loss.item();
  check_finite(value);
  optimize(loss);
  return value;
}

double ClassifierTrainer::batch_loss(const std::vector<std::size_t>& batch) {
  return loss_on(batch, {}).item();
}

std::vector<int> ClassifierTrainer::predict(const std::vector<Sample>& data) {
  std::vector<int> out;
  const std::size_t bs = cfg_.run.batch_size, K = cfg_.model.classes;
  for (std::size_t b = 0; b < data.size(); b += bs) {
    const auto batch = range_batch(b, std::min(data.size(), b + bs));
    snn::reset_membranes(*model_);
    snn::RunContext ctx;
    ctx.steps = cfg_.data.time_bins;
    auto o = model_->forward(batch_input(data, batch, {}), ctx);
    auto d = decode::decode(cfg_.run.decode, o.spikes, o.currents, ctx.steps, cfg_.model.tau_init);
    for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(static_cast<int>(argmax_row(d.values(), i, K)));
  }
  return out;
}

EvalResult evaluate_classifier(snn::SpikingClassifier& model, const TrainConfig& cfg,
                               const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  snn::reset_state(model);
  const std::size_t bs = cfg.run.batch_size, K = cfg.model.classes;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += bs) {
    const auto batch = range_batch(b, std::min(data.size(), b + bs));
    snn::reset_membranes(model);
    snn::RunContext ctx;
    ctx.steps = cfg.data.time_bins;
    auto o = model.forward(batch_input(data, batch, {}), ctx);
    auto d = decode::decode(cfg.run.decode, o.spikes, o.currents, ctx.steps, cfg.model.tau_init);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto label = data[batch[i]].label;
      if (!label) throw std::invalid_argument("evaluate: sample " + data[batch[i]].id + " has no label");
      if (static_cast<int>(argmax_row(d.values(), i, K)) == *label) ++correct;
    }
  }
  EvalResult r;
  r.samples = data.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  r.firing_rate = metrics::firing_rate(model).overall;
  r.non_binary_rate = metrics::non_binary_rate(model);
  return r;
}

EvalResult ClassifierTrainer::evaluate(const std::vector<Sample>& data) {
  return evaluate_classifier(*model_, cfg_, data);
}

// ---- detection ---------------------------------------------------------------------------------------

DetectorTrainer::DetectorTrainer(TrainConfig cfg) : Trainer(std::move(cfg)) {
  if (cfg_.run.task != Task::detect) throw ConfigError("DetectorTrainer needs task = detect");
  model_ = std::make_unique<Detector>(cfg_.model, cfg_.detect, cfg_.run.decode);
  for (auto& [name, t] : snn::parameters(*model_)) params_.push_back(t);
}

ag::Tensor DetectorTrainer::loss_on(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) {
  auto x = batch_input(train_, batch, flips);
  snn::reset_state(*model_);
  snn::RunContext ctx;
  ctx.steps = cfg_.data.time_bins;
  ctx.training = true;
  auto out = model_->forward(x, ctx);
  losses::MultiboxTargets targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = train_[batch[i]];
    const auto gts = !flips.empty() && flips[i] ? flip_boxes(s.boxes, cfg_.data.width) : s.boxes;
    std::vector<detect::Box> boxes;
    for (const auto& g : gts) boxes.push_back(g.box);
    const auto m = detect::match_anchors(model_->anchors(), boxes, cfg_.detect.pos_iou, cfg_.detect.neg_iou);
    detect::append_targets(model_->anchors(), gts, m, targets);
  }
  losses::FocalParams fp;
  fp.alpha = cfg_.detect.focal_alpha;
  fp.gamma = cfg_.detect.focal_gamma;
  return losses::ssd_multibox_loss(out.class_logits, out.box_offsets, targets, fp).total;
}

double DetectorTrainer::train_step(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) {
  auto loss = loss_on(batch, flips);
  const double value = loss.item();
  check_finite(value);
  optimize(loss);
  return value;
}

double DetectorTrainer::batch_loss(const std::vector<std::size_t>& batch) {
  return loss_on(batch, {}).item();
}

EvalResult evaluate_detector(Detector& model, const TrainConfig& cfg, const std::vector<Sample>& data,
                             std::map<std::string, std::vector<detect::Detection>>* dets_out) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  snn::reset_state(model);
  detect::PostprocessConfig pp;
  pp.score_thresh = cfg.detect.score_thresh;
  pp.nms_iou = cfg.detect.nms_iou;
  pp.max_detections = cfg.detect.max_detections;
  std::map<std::string, std::vector<detect::Detection>> dets;
  std::map<std::string, std::vector<detect::LabeledBox>> gts;
  const std::size_t bs = cfg.run.batch_size;
  for (std::size_t b = 0; b < data.size(); b += bs) {
    const auto batch = range_batch(b, std::min(data.size(), b + bs));
    snn::reset_membranes(model);
    snn::RunContext ctx;
    ctx.steps = cfg.data.time_bins;
    auto out = model.forward(batch_input(data, batch, {}), ctx);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& s = data[batch[i]];
      dets[s.id] = detect::postprocess(out, i, model.anchors(), cfg.data.height, cfg.data.width, pp);
      gts[s.id] = s.boxes;
    }
  }
  const auto m = detect::evaluate_map(dets, gts);
  EvalResult r;
  r.samples = data.size();
  r.map50 = m.map50;
  r.map50_95 = m.map50_95;
  r.firing_rate = metrics::firing_rate(model).overall;
  r.non_binary_rate = metrics::non_binary_rate(model);
  if (dets_out) *dets_out = std::move(dets);
  return r;
}

EvalResult DetectorTrainer::evaluate(const std::vector<Sample>& data) {
  return evaluate_detector(*model_, cfg_, data);
}

std::map<std::string, std::vector<detect::Detection>> DetectorTrainer::detections(
    const std::vector<Sample>& data) {
  std::map<std::string, std::vector<detect::Detection>> out;
  evaluate_detector(*model_, cfg_, data, &out);
  return out;
}

std::unique_ptr<Trainer> make_trainer(const TrainConfig& cfg) {
  if (cfg.run.task == Task::classify) return std::make_unique<ClassifierTrainer>(cfg);
  return std::make_unique<DetectorTrainer>(cfg);
}

// ---- accounting and checkpoints ---------------------------------------------------------------------

metrics::OpCount count_model_ops(const TrainConfig& raw) {
  TrainConfig cfg = raw;
  cfg.finalize();
  const auto& d = cfg.data;
  const auto x = ag::Tensor::zeros({d.time_bins, 2 * d.micro_bins, d.height, d.width});
  if (cfg.run.task == Task::classify) {
    snn::SpikingClassifier model(cfg.model);
    return metrics::count_ops([&](snn::RunContext& ctx) {
      ctx.steps = d.time_bins;
      model.forward(x, ctx);
    });
  }
  Detector model(cfg.model, cfg.detect, cfg.run.decode);
  return metrics::count_ops([&](snn::RunContext& ctx) {
    ctx.steps = d.time_bins;
    model.forward(x, ctx);
  });
}

void save_checkpoint(Trainer& trainer, const std::filesystem::path& path) {
  snn::write_archive(snn::capture(trainer.network(), trainer.config().to_text()), path);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  const auto archive = snn::read_archive(path);
  LoadedModel out;
  try {
    out.config = TrainConfig::parse(archive.manifest);
    out.config.finalize();
  } catch (const ConfigError& e) {
    throw snn::CheckpointError(std::string("checkpoint manifest: ") + e.what());
  }
  if (out.config.run.task == Task::classify) {
    auto m = std::make_unique<snn::SpikingClassifier>(out.config.model);
    out.classifier = m.get();
    out.network = std::move(m);
  } else {
    auto m = std::make_unique<Detector>(out.config.model, out.config.detect, out.config.run.decode);
    out.detector = m.get();
    out.network = std::move(m);
  }
  snn::restore(*out.network, archive);
  return out;
}

}  // namespace spikedet::train
