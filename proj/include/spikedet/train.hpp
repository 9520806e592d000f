#pragma once

// Optimization and experiment drivers: AdamW, the cosine schedule, gradient
// clipping, the sectioned run configuration, synthetic datasets and the
// classification and detection training loops.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spikedet/decode.hpp"
#include "spikedet/detect.hpp"
#include "spikedet/events.hpp"
#include "spikedet/losses.hpp"
#include "spikedet/metrics.hpp"
#include "spikedet/snn/networks.hpp"

namespace spikedet::train {

namespace ag = spikedet::ag;

// ---- optimizer -------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// Decoupled decay: w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w). Reads each
// parameter's gradient buffer (absent gradient = 0). State is sized lazily and
// must match the parameter shapes afterwards.
void adamw_step(std::vector<ag::Tensor>& params, AdamWState& state, double lr,
                const AdamWConfig& cfg);

// lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi step / total)), step in [0, total].
double cosine_lr(std::size_t step, std::size_t total, double lr0, double lr_min = 0.0);

// Scales all gradients by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
double clip_grad_norm(std::vector<std::span<double>> grads, double max_norm = 1.0);
double clip_grad_norm(const std::vector<ag::Tensor>& params, double max_norm = 1.0);

// ---- configuration ---------------------------------------------------------------

enum class Task { classify, detect };

struct RunConfig {
  Task task = Task::classify;
  std::size_t epochs = 6;
  std::size_t batch_size = 8;
  double lr = 5e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;  // init, shuffling and augmentation
  decode::Strategy decode = decode::Strategy::rate;
  losses::Kind loss = losses::Kind::mse;
  bool flip = true;  // horizontal flip with probability 0.5
  std::size_t eval_every = 1;
};

struct DataConfig {
  events::Scenario scenario = events::Scenario::moving_bar;
  std::uint64_t seed = 1;
  std::size_t train_samples = 500;
  std::size_t test_samples = 100;
  std::uint16_t width = 64, height = 64;
  std::uint64_t duration = 100000;  // microseconds per window
  double event_rate = 0.02;         // events per microsecond
  double noise_fraction = 0.1;
  double min_speed = 0.2, max_speed = 0.5;  // pixels per millisecond
  double min_size = 24.0, max_size = 40.0;
  std::size_t max_objects = 2;
  std::size_t time_bins = 5;   // T
  std::size_t micro_bins = 2;  // n
};

struct DetectConfig {
  std::vector<double> anchor_sizes{16.0, 32.0, 64.0, 128.0};
  std::vector<double> anchor_scales{1.0, 1.41421356237309515};
  std::vector<double> anchor_ratios{1.0, 2.0, 0.5};
  double pos_iou = 0.5, neg_iou = 0.4;
  double focal_alpha = 0.25, focal_gamma = 2.0;
  double score_thresh = 0.05, nms_iou = 0.5;
  std::size_t max_detections = 100;
};

struct TrainConfig {
  RunConfig run;
  DataConfig data;
  DetectConfig detect;
  snn::ModelConfig model;  // in_channels, input size and init seed are derived

  // Sections [run], [data], [detect], [model] of key = value lines; '#' starts
  // a comment. Keys may be given bare or as section.key.
  static TrainConfig parse(const std::string& text);
  // Same syntax, layered over the current values.
  void apply(const std::string& text);
  // Applies "key=value"; later overrides win over earlier ones and the file.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  // Recomputes the derived model fields and checks every invariant.
  void finalize();
  std::string to_text() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The file layered over `base`; an unreadable file is a DatasetError.
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
// Desk defaults for each task.
TrainConfig default_config(Task task);

// ---- data --------------------------------------------------------------------------

enum class Split { train, test };

struct Sample {
  std::string id;
  events::VoxelCube cube;
  std::optional<int> label;
  std::vector<detect::LabeledBox> boxes;  // filtered ground truth at the window end
};

// SplitMix64 of seed and stream; derives independent generators from one seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Deterministic per (data seed, split, index).
std::uint64_t sample_seed(std::uint64_t data_seed, Split split, std::size_t index);
events::SyntheticSample synthesize(const DataConfig& cfg, Split split, std::size_t index);
Sample prepare_sample(const DataConfig& cfg, std::string id, const events::EventStream& stream,
                      const events::GroundTruth& truth);
std::vector<Sample> make_split(const DataConfig& cfg, Split split);

// Writes <dir>/<id>.evt and <id>.gt per sample plus manifest.json. Returns the
// manifest.
nlohmann::ordered_json write_dataset(const DataConfig& cfg, Split split, std::size_t count,
                                     const std::filesystem::path& dir);
// Missing or malformed dataset files.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
std::vector<Sample> read_dataset(const DataConfig& cfg, const std::filesystem::path& dir);

// Time-major [T * N, 2n, H, W] from voxel cubes; flips mirror x.
ag::Tensor batch_input(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx,
                       const std::vector<bool>& flips);
std::vector<detect::LabeledBox> flip_boxes(const std::vector<detect::LabeledBox>& boxes, double width);

// ---- models ---------------------------------------------------------------------------

// Spiking body, per-level decoding of the spike pyramid and the SSD head.
class Detector : public snn::Network {
 public:
  Detector(const snn::ModelConfig& model, const DetectConfig& det, decode::Strategy strategy);
  detect::SsdHead::Output forward(const ag::Tensor& x, snn::RunContext& ctx);
  void visit(snn::StateVisitor& v) override;
  const detect::AnchorSet& anchors() const { return anchors_; }
  const snn::ModelConfig& config() const { return body_.config(); }

 private:
  snn::DetectorBody body_;
  snn::Rng head_rng_;
  detect::SsdHead head_;
  detect::AnchorSet anchors_;
  decode::Strategy strategy_;
};

// ---- reports ------------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean training batch loss
  double lr = 0.0;    // learning rate of the last step
  // Evaluation pass on the test split; absent in epochs without evaluation.
  std::optional<double> accuracy, map50, map50_95;
  std::optional<double> firing_rate, non_binary_rate;
};

struct EvalResult {
  std::optional<double> accuracy, map50, map50_95;
  double firing_rate = 0.0, non_binary_rate = 0.0;
  std::size_t samples = 0;
};

struct RunReport {
  Task task = Task::classify;
  std::string config_text;
  std::vector<EpochRecord> epochs;
  EvalResult final_test, final_train;
  double wall_clock_seconds = 0.0;  // kept out of the JSON so reports are reproducible

  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::ordered_json eval_json(const EvalResult& r);

// ---- trainers ---------------------------------------------------------------------------

class Trainer {
 public:
  virtual ~Trainer() = default;
  // One optimizer step on the given batch; returns the loss before the step.
  virtual double train_step(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) = 0;
  // Loss on a batch in training mode without updating parameters.
  virtual double batch_loss(const std::vector<std::size_t>& batch) = 0;
  virtual EvalResult evaluate(const std::vector<Sample>& data) = 0;
  virtual snn::Network& network() = 0;

  // Full loop; `on_epoch` receives each record as it completes.
  RunReport run(const std::function<void(const EpochRecord&)>& on_epoch = {});

  const TrainConfig& config() const { return cfg_; }
  const std::vector<Sample>& train_data() const { return train_; }
  const std::vector<Sample>& test_data() const { return test_; }
  std::size_t steps_taken() const { return adam_.step; }

 protected:
  explicit Trainer(TrainConfig cfg);
  // Zeroes gradients, backpropagates, clips and steps with the scheduled lr.
  void optimize(const ag::Tensor& loss);
  void check_finite(double loss) const;
  std::vector<ag::Tensor> params_;
  TrainConfig cfg_;
  std::vector<Sample> train_, test_;
  AdamWState adam_;
  std::size_t total_steps_ = 0;
  double last_lr_ = 0.0;
};

class ClassifierTrainer : public Trainer {
 public:
  explicit ClassifierTrainer(TrainConfig cfg);
  double train_step(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) override;
  double batch_loss(const std::vector<std::size_t>& batch) override;
  EvalResult evaluate(const std::vector<Sample>& data) override;
  snn::Network& network() override { return *model_; }
  snn::SpikingClassifier& model() { return *model_; }
  // Per-sample predicted class in eval mode.
  std::vector<int> predict(const std::vector<Sample>& data);

 private:
  ag::Tensor loss_on(const std::vector<std::size_t>& batch, const std::vector<bool>& flips);
  std::unique_ptr<snn::SpikingClassifier> model_;
};

class DetectorTrainer : public Trainer {
 public:
  explicit DetectorTrainer(TrainConfig cfg);
  double train_step(const std::vector<std::size_t>& batch, const std::vector<bool>& flips) override;
  double batch_loss(const std::vector<std::size_t>& batch) override;
  EvalResult evaluate(const std::vector<Sample>& data) override;
  snn::Network& network() override { return *model_; }
  Detector& model() { return *model_; }
  std::map<std::string, std::vector<detect::Detection>> detections(const std::vector<Sample>& data);

 private:
  ag::Tensor loss_on(const std::vector<std::size_t>& batch, const std::vector<bool>& flips);
  std::unique_ptr<Detector> model_;
};

std::unique_ptr<Trainer> make_trainer(const TrainConfig& cfg);

// Evaluation of an existing network (eval mode, batches of `batch` samples).
EvalResult evaluate_classifier(snn::SpikingClassifier& model, const TrainConfig& cfg,
                               const std::vector<Sample>& data);
EvalResult evaluate_detector(Detector& model, const TrainConfig& cfg, const std::vector<Sample>& data,
                             std::map<std::string, std::vector<detect::Detection>>* dets = nullptr);

// Operation counts for one sample and step of the configured model.
metrics::OpCount count_model_ops(const TrainConfig& cfg);

// Checkpoint with the configuration text as manifest.
void save_checkpoint(Trainer& trainer, const std::filesystem::path& path);
// Rebuilds the model from the stored configuration, then restores the state.
struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<snn::Network> network;
  snn::SpikingClassifier* classifier = nullptr;
  Detector* detector = nullptr;
};
LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace spikedet::train
