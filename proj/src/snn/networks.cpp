#include "spikedet/snn/networks.hpp"

#include <cmath>
#include <sstream>

namespace spikedet::snn {

// ---- config ------------------------------------------------------------------------

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  for (std::string tok; std::getline(in, tok, ',');) out.push_back(std::stoull(tok));
  return out;
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

std::size_t halve_ceil(std::size_t n) { return (n + 1) / 2; }

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "in_channels=" << in_channels << '\n'
    << "input_h=" << input_h << '\n'
    << "input_w=" << input_w << '\n'
    << "stem_channels=" << stem_channels << '\n'
    << "growth=" << growth << '\n'
    << "block_layers=" << join(block_layers) << '\n'
    << "compression=" << fmt(compression) << '\n'
    << "tau_init=" << fmt(tau_init) << '\n'
    << "init_seed=" << init_seed << '\n'
    << "classes=" << classes << '\n'
    << "fusion_layers=" << fusion_layers << '\n'
    << "fused_channels=" << fused_channels << '\n'
    << "spes_variant=" << to_string(spes_variant) << '\n'
    << "pyramid_levels=" << pyramid_levels << '\n'
    << "spes_decay=" << fmt(spes_decay) << '\n'
    << "spes_dense_layers=" << spes_dense_layers << '\n'
    << "spes_dense_growth=" << spes_dense_growth << '\n'
    << "extra_channels=" << extra_channels << '\n';
  return o.str();
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "in_channels") in_channels = std::stoull(value);
  else if (key == "input_h") input_h = std::stoull(value);
  else if (key == "input_w") input_w = std::stoull(value);
  else if (key == "stem_channels") stem_channels = std::stoull(value);
  else if (key == "growth") growth = std::stoull(value);
  else if (key == "block_layers") block_layers = split_sizes(value);
  else if (key == "compression") compression = std::stod(value);
  else if (key == "tau_init") tau_init = std::stod(value);
  else if (key == "init_seed") init_seed = std::stoull(value);
  else if (key == "classes") classes = std::stoull(value);
  else if (key == "fusion_layers" || key == "fusion")
    fusion_layers = value == "none" ? 0 : std::stoull(value);
  else if (key == "fused_channels") fused_channels = std::stoull(value);
  else if (key == "spes_variant") spes_variant = parse_spes_variant(value);
  else if (key == "pyramid_levels") pyramid_levels = std::stoull(value);
  else if (key == "spes_decay") spes_decay = std::stod(value);
  else if (key == "spes_dense_layers") spes_dense_layers = std::stoull(value);
  else if (key == "spes_dense_growth") spes_dense_growth = std::stoull(value);
  else if (key == "extra_channels") extra_channels = std::stoull(value);
  else return false;
  return true;
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad model config line '" + line + "'");
    if (!cfg.set(line.substr(0, eq), line.substr(eq + 1))) {
      throw std::invalid_argument("unknown model config key '" + line.substr(0, eq) + "'");
    }
  }
  cfg.validate();
  return cfg;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
  };
  positive(in_channels, "in_channels");
  positive(input_h, "input_h");
  positive(input_w, "input_w");
  positive(stem_channels, "stem_channels");
  positive(growth, "growth");
  positive(classes, "classes");
  positive(fused_channels, "fused_channels");
  positive(pyramid_levels, "pyramid_levels");
  positive(extra_channels, "extra_channels");
  if (block_layers.empty()) throw std::invalid_argument("model config: block_layers is empty");
  for (auto l : block_layers) positive(l, "block_layers entry");
  if (!(compression > 0.0 && compression <= 1.0)) {
    throw std::invalid_argument("model config: compression must lie in (0, 1]");
  }
  if (!(tau_init > 1.0)) throw std::invalid_argument("model config: tau_init must exceed 1");
  if (!(spes_decay > 0.0 && spes_decay <= 1.0)) {
    throw std::invalid_argument("model config: spes_decay must lie in (0, 1]");
  }
  if (fusion_layers > block_layers.size() + 1) {
    throw std::invalid_argument("model config: fusion_layers exceeds available taps");
  }
  if (input_h < 8 || input_w < 8) throw std::invalid_argument("model config: input below 8x8");
}

// ---- network-wide helpers -------------------------------------------------------------

void reset_state(Network& net) {
  struct V : StateVisitor {
    void neuron(const std::string&, PlifLayer& p) override {
      p.reset();
      p.reset_counters();
    }
    void residual(const std::string&, SewResBlock& b) override { b.reset_counters(); }
  } v;
  net.visit(v);
}

void reset_membranes(Network& net) {
  struct V : StateVisitor {
    void neuron(const std::string&, PlifLayer& p) override { p.reset(); }
  } v;
  net.visit(v);
}

std::vector<LayerSpikes> spike_counters(Network& net) {
  struct V : StateVisitor {
    std::vector<LayerSpikes> out;
    void neuron(const std::string& name, PlifLayer& p) override {
      out.push_back({name, p.spikes(), p.slots()});
    }
  } v;
  net.visit(v);
  return v.out;
}

std::pair<std::uint64_t, std::uint64_t> residual_counters(Network& net) {
  struct V : StateVisitor {
    std::uint64_t entries = 0, non_binary = 0;
    void residual(const std::string&, SewResBlock& b) override {
      entries += b.entries();
      non_binary += b.non_binary();
    }
  } v;
  net.visit(v);
  return {v.entries, v.non_binary};
}

std::vector<std::pair<std::string, ag::Tensor>> parameters(Network& net) {
  struct V : StateVisitor {
    std::vector<std::pair<std::string, ag::Tensor>> out;
    void param(const std::string& name, ag::Tensor& t) override { out.emplace_back(name, t); }
  } v;
  net.visit(v);
  return v.out;
}

// ---- backbone ----------------------------------------------------------------------------

Backbone::Backbone(const ModelConfig& cfg, Rng& rng)
    : stem0_({cfg.in_channels, cfg.stem_channels, 3, 2, 1, 1}, cfg.tau_init, rng),
      stem1_({cfg.stem_channels, cfg.stem_channels, 3, 2, 1, 1}, cfg.tau_init, rng) {
  cfg.validate();
  std::size_t h = ag::conv_out_size(cfg.input_h, 3, 2, 1);
  std::size_t w = ag::conv_out_size(cfg.input_w, 3, 2, 1);
  h = ag::conv_out_size(h, 3, 2, 1) / 2;
  w = ag::conv_out_size(w, 3, 2, 1) / 2;
  std::size_t c = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.block_layers.size(); ++s) {
    if (s > 0) {
      const auto squeezed = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::floor(static_cast<double>(c) * cfg.compression)));
      transitions_.emplace_back(ConvBnPlif::Spec{c, squeezed, 1, 1, 0, 1}, cfg.tau_init, rng);
      c = squeezed;
      h /= 2;
      w /= 2;
    }
    if (h == 0 || w == 0) throw std::invalid_argument("input too small for the backbone depth");
    stages_.emplace_back(c, cfg.block_layers[s], cfg.growth, cfg.tau_init, rng);
    c = stages_.back().out_channels();
    taps_.push_back({c, h, w});
  }
}

std::vector<ag::Tensor> Backbone::forward(const ag::Tensor& x, RunContext& ctx,
                                          const std::string& site) {
  auto h = stem0_.forward(x, ctx, site + ".stem0");
  h = stem1_.forward(h, ctx, site + ".stem1");
  h = ag::max_pool2d(h, 2, 2);
  ctx.observe(site + ".stem_pool", ActivationKind::spike, h);
  std::vector<ag::Tensor> taps;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) {
      const auto name = site + ".transition" + std::to_string(s);
      h = ag::max_pool2d(h, 2, 2);
      ctx.observe(name + ".pool", ActivationKind::spike, h);
      h = transitions_[s - 1].forward(h, ctx, name);
    }
    h = stages_[s].forward(h, ctx, site + ".stage" + std::to_string(s));
    taps.push_back(h);
  }
  return taps;
}

void Backbone::visit(StateVisitor& v, const std::string& prefix) {
  stem0_.visit(v, prefix + ".stem0");
  stem1_.visit(v, prefix + ".stem1");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) transitions_[s - 1].visit(v, prefix + ".transition" + std::to_string(s));
    stages_[s].visit(v, prefix + ".stage" + std::to_string(s));
  }
}

// ---- classifier ---------------------------------------------------------------------------

SpikingClassifier::SpikingClassifier(const ModelConfig& cfg)
    : cfg_(cfg),
      rng_(cfg.init_seed),
      backbone_(cfg_, rng_),
      fc_(backbone_.taps().back().channels, cfg.classes, rng_),
      out_(cfg.tau_init) {}

ClassifierOutput SpikingClassifier::forward(const ag::Tensor& x, RunContext& ctx) {
  auto taps = backbone_.forward(x, ctx, "backbone");
  const auto& last = taps.back();
  const std::size_t rows = last.dim(0), c = last.dim(1);
  auto pooled = ag::mean_axis(ag::reshape(last, {rows, c, last.dim(2) * last.dim(3)}), 2);
  ctx.observe("readout.pool", ActivationKind::real, pooled);
  auto currents = fc_.forward(pooled, ctx, "readout.fc");
  ctx.observe("readout.fc", ActivationKind::real, currents);
  auto spikes = out_.forward(currents, ctx, "readout.plif");
  return {spikes, currents};
}

void SpikingClassifier::visit(StateVisitor& v) {
  backbone_.visit(v, "backbone");
  fc_.visit(v, "readout.fc");
  out_.visit(v, "readout.plif");
}

// ---- detector body ---------------------------------------------------------------------------

DetectorBody::DetectorBody(const ModelConfig& cfg)
    : cfg_(cfg), rng_(cfg.init_seed), backbone_(cfg_, rng_) {
  std::vector<TapShape> sources = backbone_.taps();
  const std::size_t wanted = cfg.fusion_layers > 0 ? cfg.fusion_layers : cfg.pyramid_levels;
  while (sources.size() < wanted) {
    const auto& last = sources.back();
    extras_.push_back(std::make_unique<ExtraBlock>(last.channels, std::max<std::size_t>(1, cfg.extra_channels / 2),
                                                   cfg.extra_channels, cfg.tau_init, rng_));
    sources.push_back({cfg.extra_channels, halve_ceil(last.height), halve_ceil(last.width)});
  }
  if (cfg.fusion_layers == 0) {
    pyramid_.assign(sources.begin(), sources.begin() + static_cast<long>(cfg.pyramid_levels));
    return;
  }
  sources.resize(cfg.fusion_layers);
  SpikingFusion::Spec spec;
  spec.fused_channels = cfg.fused_channels;
  spec.spes.variant = cfg.spes_variant;
  spec.spes.dense_layers = cfg.spes_dense_layers;
  spec.spes.dense_growth = cfg.spes_dense_growth;
  std::size_t h = sources.front().height, w = sources.front().width;
  for (std::size_t l = 0; l < cfg.pyramid_levels; ++l) {
    const double width = static_cast<double>(cfg.fused_channels) * std::pow(cfg.spes_decay, l);
    const auto c = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(width)));
    spec.spes.widths.push_back(c);
    if (l > 0) {
      h = halve_ceil(h);
      w = halve_ceil(w);
    }
    pyramid_.push_back({c, h, w});
  }
  fusion_ = std::make_unique<SpikingFusion>(spec, sources, cfg.tau_init, rng_);
}

std::vector<ag::Tensor> DetectorBody::forward(const ag::Tensor& x, RunContext& ctx) {
  auto sources = backbone_.forward(x, ctx, "backbone");
  for (std::size_t e = 0; e < extras_.size(); ++e) {
    sources.push_back(extras_[e]->forward(sources.back(), ctx, "extra" + std::to_string(e)));
  }
  if (!fusion_) {
    sources.resize(cfg_.pyramid_levels);
    return sources;
  }
  sources.resize(cfg_.fusion_layers);
  return fusion_->forward(sources, ctx, "fusion");
}

void DetectorBody::visit(StateVisitor& v) { visit(v, ""); }

void DetectorBody::visit(StateVisitor& v, const std::string& prefix) {
  backbone_.visit(v, prefix + "backbone");
  for (std::size_t e = 0; e < extras_.size(); ++e) {
    extras_[e]->visit(v, prefix + "extra" + std::to_string(e));
  }
  if (fusion_) fusion_->visit(v, prefix + "fusion");
}

}  // namespace spikedet::snn
