#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "spikedet/snn/checkpoint.hpp"

namespace ag = spikedet::ag;
namespace snn = spikedet::snn;
using ag::Tensor;

namespace {

Tensor random_spikes(snn::Rng& rng, ag::Shape shape, double p = 0.3) {
  std::bernoulli_distribution d(p);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = d(rng) ? 1.0 : 0.0;
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor random_real(snn::Rng& rng, ag::Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

std::vector<double> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

bool is_binary(const Tensor& t) {
  for (double v : t.values()) {
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

std::uint64_t ones(const Tensor& t) {
  std::uint64_t n = 0;
  for (double v : t.values()) n += v == 1.0;
  return n;
}

struct ResetNeurons : snn::StateVisitor {
  void neuron(const std::string&, snn::PlifLayer& p) override { p.reset(); }
};

snn::ModelConfig small_config() {
  snn::ModelConfig cfg;
  cfg.input_h = cfg.input_w = 64;
  cfg.stem_channels = 8;
  cfg.growth = 4;
  cfg.block_layers = {1, 1, 1};
  cfg.fused_channels = 8;
  cfg.extra_channels = 8;
  return cfg;
}

}  // namespace

// ---- PLIF ----------------------------------------------------------------------

TEST_CASE("PLIF with tau 2 and constant drive 2 spikes on every step") {
  snn::PlifLayer plif(2.0, 1.0, 0.0);
  snn::RunContext ctx;
  ctx.steps = 6;
  auto out = plif.forward(Tensor::full({6, 3}, 2.0), ctx, "p");
  for (double v : out.values()) CHECK(v == 1.0);
  for (double v : plif.membrane().values()) CHECK(v == 0.0);
}

TEST_CASE("PLIF with zero drive stays silent") {
  snn::PlifLayer plif;
  snn::RunContext ctx;
  ctx.steps = 8;
  auto out = plif.forward(Tensor::zeros({8, 4}), ctx, "p");
  CHECK(ones(out) == 0);
  CHECK(plif.spikes() == 0);
  CHECK(plif.slots() == 32);
}

TEST_CASE("PLIF w = 0 corresponds to tau = 2 and tau exceeds 1 for any w") {
  snn::PlifLayer plif;
  CHECK(plif.w().values()[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(plif.tau() == doctest::Approx(2.0));
  for (double w : {-30.0, -3.0, 0.0, 3.0, 30.0}) {
    plif.w().mutable_values()[0] = w;
    CHECK(plif.tau() > 1.0);
  }
}

TEST_CASE("PLIF single step matches the hand-iterated update rule") {
  snn::Rng rng(5);
  snn::PlifLayer plif(3.0, 1.0, 0.0);
  const double k = 1.0 / 3.0;
  std::vector<double> v(5, 0.0);
  for (int t = 0; t < 10; ++t) {
    auto x = random_real(rng, {5}, -0.5, 2.5);
    auto s = plif.step(x, {});
    for (std::size_t i = 0; i < 5; ++i) {
      const double h = v[i] + k * (x.values()[i] - v[i]);
      const double expect = h >= 1.0 ? 1.0 : 0.0;
      CHECK(s.values()[i] == expect);
      v[i] = expect == 1.0 ? 0.0 : h;
      CHECK(plif.membrane().values()[i] == doctest::Approx(v[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("PLIF step backpropagates through time into w") {
  snn::PlifLayer plif;
  auto x = Tensor::full({3}, 0.6, true);
  Tensor total = Tensor::scalar(0.0);
  for (int t = 0; t < 4; ++t) total = ag::add(total, ag::sum(plif.step(x, {})));
  ag::backward(total);
  CHECK(plif.w().has_grad());
  CHECK(plif.w().grad()[0] != 0.0);
}

TEST_CASE("PLIF rejects a step shape change without reset") {
  snn::PlifLayer plif;
  snn::RunContext ctx;
  ctx.steps = 2;
  plif.forward(Tensor::zeros({2, 3}), ctx, "p");
  CHECK_THROWS_AS(plif.forward(Tensor::zeros({2, 4}), ctx, "p"), ag::ShapeError);
  plif.reset();
  CHECK_NOTHROW(plif.forward(Tensor::zeros({2, 4}), ctx, "p"));
  CHECK_THROWS_AS(plif.forward(Tensor::zeros({3, 4}), ctx, "p"), ag::ShapeError);
}

TEST_CASE("PLIF multistep equals repeated single steps") {
  snn::Rng rng(9);
  snn::PlifLayer a(2.5), b(2.5);
  snn::RunContext ctx;
  ctx.steps = 4;
  auto seq = random_real(rng, {8, 3}, -1.0, 3.0);  // T=4, N=2, 3 features
  auto multi = a.forward(seq, ctx, "p");
  for (std::size_t t = 0; t < 4; ++t) {
    auto s = b.step(ag::slice(seq, 0, 2 * t, 2 * t + 2), {});
    for (std::size_t i = 0; i < 6; ++i) CHECK(s.values()[i] == multi.values()[6 * t + i]);
  }
}

// ---- blocks --------------------------------------------------------------------------

TEST_CASE("conv-bn-plif: zero input gives zero spikes, output binary, counters recount") {
  snn::Rng rng(11);
  snn::ConvBnPlif block({3, 6, 3, 1, 1, 1}, 2.0, rng);
  snn::RunContext ctx;
  ctx.steps = 3;
  auto silent = block.forward(Tensor::zeros({6, 3, 5, 5}), ctx, "b");
  CHECK(ones(silent) == 0);
  block.reset();
  block.plif().reset_counters();

  std::uint64_t expected = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto out = block.forward(random_spikes(rng, {6, 3, 5, 5}, 0.5), ctx, "b");
    CHECK(is_binary(out));
    expected += ones(out);
    CHECK(block.plif().spikes() == expected);
    CHECK(block.plif().spikes() <= block.plif().slots());
  }
  CHECK(expected > 0);
}

TEST_CASE("dense block channel count is in + layers * growth across configs") {
  snn::Rng rng(13);
  std::uniform_int_distribution<std::size_t> layers(1, 4), growth(1, 6), in(1, 5);
  for (int trial = 0; trial < 12; ++trial) {
    const auto l = layers(rng), g = growth(rng), c = in(rng);
    snn::DenseBlock block(c, l, g, 2.0, rng);
    CHECK(block.out_channels() == c + l * g);
    snn::RunContext ctx;
    ctx.steps = 2;
    auto out = block.forward(random_spikes(rng, {2, c, 4, 4}), ctx, "d");
    CHECK(out.shape() == ag::Shape{2, c + l * g, 4, 4});
    CHECK(is_binary(out));
  }
}

TEST_CASE("SEW residual block with a zero body is the identity and stays in {0,1,2}") {
  snn::Rng rng(17);
  snn::SewResBlock block(4, 2.0, rng);
  snn::RunContext ctx;
  ctx.steps = 2;
  auto x = random_spikes(rng, {4, 4, 6, 6}, 0.7);
  auto out = block.forward(x, ctx, "r");
  for (double v : out.values()) CHECK((v == 0.0 || v == 1.0 || v == 2.0));
  std::uint64_t twos = 0;
  for (double v : out.values()) twos += v == 2.0;
  CHECK(block.entries() == out.numel());
  CHECK(block.non_binary() == twos);

  for (auto* part : {&block.first(), &block.second()}) {
    for (auto& w : part->conv().weight().mutable_values()) w = 0.0;
    part->reset();
  }
  auto identity = block.forward(x, ctx, "r");
  CHECK(copy_values(identity) == copy_values(x));

  CHECK_THROWS_AS(block.forward(random_spikes(rng, {2, 3, 6, 6}), ctx, "r"), ag::ShapeError);
}

TEST_CASE("extra block halves with ceil rounding") {
  snn::Rng rng(19);
  snn::ExtraBlock block(6, 4, 8, 2.0, rng);
  snn::RunContext ctx;
  auto a = block.forward(random_spikes(rng, {1, 6, 7, 9}), ctx, "e");
  CHECK(a.shape() == ag::Shape{1, 8, 4, 5});
  CHECK(is_binary(a));
  ResetNeurons reset;
  block.visit(reset, "e");
  auto b = block.forward(random_spikes(rng, {1, 6, 30, 38}), ctx, "e");
  CHECK(b.shape() == ag::Shape{1, 8, 15, 19});
}

TEST_CASE("deconv geometry reaches the fusion targets exactly") {
  struct Case {
    std::size_t ih, iw, th, tw;
  };
  for (auto c : {Case{15, 19, 30, 38}, Case{7, 9, 30, 38}, Case{30, 38, 30, 38}, Case{4, 5, 30, 38},
                 Case{3, 4, 15, 19}, Case{1, 1, 5, 7}, Case{5, 5, 9, 9}}) {
    auto g = snn::solve_deconv_geometry(c.ih, c.iw, c.th, c.tw);
    CHECK(ag::conv_transpose_out_size(c.ih, g.kernel_h, g.opt.stride_h, g.opt.pad_h,
                                      g.opt.out_pad_h) == c.th);
    CHECK(ag::conv_transpose_out_size(c.iw, g.kernel_w, g.opt.stride_w, g.opt.pad_w,
                                      g.opt.out_pad_w) == c.tw);
  }
  auto same = snn::solve_deconv_geometry(30, 38, 30, 38);
  CHECK(same.opt.stride_h == 1);
  CHECK(same.opt.stride_w == 1);
  CHECK_THROWS_AS(snn::solve_deconv_geometry(8, 8, 7, 8), ag::ShapeError);
}

TEST_CASE("deconv block output has fused channels at the target size") {
  snn::Rng rng(23);
  for (std::size_t in : {3, 10}) {
    snn::DeconvBlock block(in, 5, 7, 9, 30, 38, 2.0, rng);
    snn::RunContext ctx;
    ctx.steps = 2;
    auto out = block.forward(random_spikes(rng, {2, in, 7, 9}), ctx, "u");
    CHECK(out.shape() == ag::Shape{2, 5, 30, 38});
    CHECK(is_binary(out));
  }
}

TEST_CASE("spiking fusion of three taps concatenates 3 x fused channels") {
  snn::Rng rng(29);
  const std::vector<snn::TapShape> taps{{6, 30, 38}, {8, 15, 19}, {10, 7, 9}};
  snn::SpikingFusion::Spec spec;
  spec.fused_channels = 64;
  spec.spes.variant = snn::SpesVariant::basic;
  spec.spes.widths = {16, 16, 16};
  snn::SpikingFusion fusion(spec, taps, 2.0, rng);
  snn::RunContext ctx;
  std::vector<Tensor> inputs;
  for (const auto& t : taps) inputs.push_back(random_spikes(rng, {1, t.channels, t.height, t.width}));
  auto merged = fusion.merge(fusion.transform(inputs, ctx, "f"), ctx, "f");
  CHECK(merged.shape() == ag::Shape{1, 192, 30, 38});
  auto levels = fusion.regenerate(merged, ctx, "f");
  REQUIRE(levels.size() == 3);
  CHECK(levels[0].shape() == ag::Shape{1, 16, 30, 38});
  CHECK(levels[1].shape() == ag::Shape{1, 16, 15, 19});
  CHECK(levels[2].shape() == ag::Shape{1, 16, 8, 10});

  auto bad = fusion.transform(inputs, ctx, "f");
  bad[1] = ag::slice(bad[1], 2, 0, 29);
  CHECK_THROWS_AS(fusion.merge(bad, ctx, "f"), ag::ShapeError);
}

TEST_CASE("fusion forward equals the manual transform, merge, regenerate composition") {
  for (auto variant : {snn::SpesVariant::basic, snn::SpesVariant::res_enhanced,
                       snn::SpesVariant::dense_enhanced}) {
    snn::Rng rng(31);
    const std::vector<snn::TapShape> taps{{4, 12, 16}, {6, 6, 8}, {8, 3, 4}};
    snn::SpikingFusion::Spec spec;
    spec.fused_channels = 6;
    spec.spes.variant = variant;
    spec.spes.widths = {6, 6};
    snn::SpikingFusion fusion(spec, taps, 2.0, rng);
    snn::RunContext ctx;
  ctx.training = true;  // batch statistics keep an untrained network active
    ctx.steps = 3;
    std::vector<Tensor> inputs;
    for (const auto& t : taps) {
      inputs.push_back(random_spikes(rng, {6, t.channels, t.height, t.width}, 0.5));
    }
    auto whole = fusion.forward(inputs, ctx, "f");
    ResetNeurons reset;
    fusion.visit(reset, "f");
    auto manual = fusion.regenerate(fusion.merge(fusion.transform(inputs, ctx, "f"), ctx, "f"),
                                    ctx, "f");
    REQUIRE(whole.size() == manual.size());
    for (std::size_t l = 0; l < whole.size(); ++l) {
      CHECK(whole[l].shape() == manual[l].shape());
      CHECK(copy_values(whole[l]) == copy_values(manual[l]));
    }
  }
}

TEST_CASE("SPES variants emit identical shapes") {
  std::vector<std::vector<ag::Shape>> shapes;
  for (auto variant : {snn::SpesVariant::basic, snn::SpesVariant::res_enhanced,
                       snn::SpesVariant::dense_enhanced}) {
    snn::Rng rng(37);
    snn::Spes spes({variant, 12, {8, 8, 8}, 2, 4}, 2.0, rng);
    snn::RunContext ctx;
    auto out = spes.forward(random_spikes(rng, {1, 12, 30, 38}), ctx, "s");
    std::vector<ag::Shape> s;
    for (auto& t : out) s.push_back(t.shape());
    shapes.push_back(s);
  }
  CHECK(shapes[0] == shapes[1]);
  CHECK(shapes[0] == shapes[2]);
  CHECK(shapes[0][0] == ag::Shape{1, 8, 30, 38});
  CHECK(shapes[0][2] == ag::Shape{1, 8, 8, 10});
  CHECK(snn::parse_spes_variant(snn::to_string(snn::SpesVariant::dense_enhanced)) ==
        snn::SpesVariant::dense_enhanced);
  CHECK_THROWS(snn::parse_spes_variant("bogus"));
}

// ---- networks -------------------------------------------------------------------------------

TEST_CASE("detector taps on a 240x304 input land at 30x38, 15x19, 7x9 and the extra at 4x5") {
  auto cfg = small_config();
  cfg.input_h = 240;
  cfg.input_w = 304;
  cfg.fusion_layers = 4;
  snn::DetectorBody body(cfg);
  const auto& taps = body.taps();
  REQUIRE(taps.size() == 3);
  CHECK((taps[0].height == 30 && taps[0].width == 38));
  CHECK((taps[1].height == 15 && taps[1].width == 19));
  CHECK((taps[2].height == 7 && taps[2].width == 9));
  const auto& pyr = body.pyramid();
  REQUIRE(pyr.size() == 3);
  CHECK((pyr[0].height == 30 && pyr[1].height == 15 && pyr[2].height == 8));

  cfg.fusion_layers = 0;
  cfg.pyramid_levels = 4;
  snn::DetectorBody plain(cfg);
  CHECK((plain.pyramid()[3].height == 4 && plain.pyramid()[3].width == 5));
}

TEST_CASE("classifier emits per-step class activations and they are binary") {
  auto cfg = small_config();
  cfg.input_h = cfg.input_w = 64;
  snn::SpikingClassifier net(cfg);
  snn::Rng rng(41);
  snn::RunContext ctx;
  ctx.training = true;  // batch statistics keep an untrained network active
  ctx.steps = 3;
  bool all_ok = true;
  ctx.probe = [&](const std::string&, snn::ActivationKind kind, const Tensor& t) {
    if (kind == snn::ActivationKind::spike && !is_binary(t)) all_ok = false;
  };
  auto out = net.forward(random_spikes(rng, {6, 4, 64, 64}), ctx);
  CHECK(out.spikes.shape() == ag::Shape{6, 2});
  CHECK(out.currents.shape() == ag::Shape{6, 2});
  CHECK(is_binary(out.spikes));
  CHECK(all_ok);
}

TEST_CASE("reset isolates samples and omitting it leaks state") {
  snn::SpikingClassifier net(small_config());
  snn::Rng rng(43);
  snn::RunContext ctx;
  ctx.training = true;  // batch statistics keep an untrained network active
  ctx.steps = 2;
  auto a = random_spikes(rng, {2, 4, 64, 64}, 0.5);
  auto b = random_spikes(rng, {2, 4, 64, 64}, 0.5);

  auto first = net.forward(b, ctx);
  snn::reset_state(net);
  for (const auto& l : snn::spike_counters(net)) CHECK(l.spikes == 0);
  auto again = net.forward(b, ctx);
  CHECK(copy_values(first.currents) == copy_values(again.currents));

  snn::reset_state(net);
  net.forward(a, ctx);
  auto leaked = net.forward(b, ctx);
  CHECK(copy_values(leaked.currents) != copy_values(first.currents));
}

TEST_CASE("per-layer spike counters match an independent recount of probed outputs") {
  snn::SpikingClassifier net(small_config());
  snn::Rng rng(47);
  snn::RunContext ctx;
  ctx.training = true;  // batch statistics keep an untrained network active
  ctx.steps = 2;
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> seen;
  ctx.probe = [&](const std::string& site, snn::ActivationKind kind, const Tensor& t) {
    if (kind != snn::ActivationKind::spike) return;
    seen[site].first += ones(t);
    seen[site].second += t.numel();
  };
  for (int i = 0; i < 2; ++i) net.forward(random_spikes(rng, {2, 4, 64, 64}, 0.4), ctx);
  const auto layers = snn::spike_counters(net);
  CHECK(layers.size() > 5);
  for (const auto& l : layers) {
    INFO(l.name);
    REQUIRE(seen.contains(l.name));
    CHECK(l.spikes == seen[l.name].first);
    CHECK(l.slots == seen[l.name].second);
    CHECK(l.spikes <= l.slots);
  }
}

TEST_CASE("every parameter receives a gradient") {
  for (bool detector : {false, true}) {
    auto cfg = small_config();
    cfg.input_h = cfg.input_w = 64;
    snn::RunContext ctx;
    ctx.steps = 3;
    ctx.training = true;
    snn::Rng rng(53);
    auto x = random_spikes(rng, {6, 4, 64, 64}, 0.3);
    std::unique_ptr<snn::Network> owner;
    Tensor loss;
    if (detector) {
      auto body = std::make_unique<snn::DetectorBody>(cfg);
      loss = Tensor::scalar(0.0);
      for (auto& level : body->forward(x, ctx)) loss = ag::add(loss, ag::mean(level));
      owner = std::move(body);
    } else {
      auto net = std::make_unique<snn::SpikingClassifier>(cfg);
      auto out = net->forward(x, ctx);
      loss = ag::add(ag::mean(out.spikes), ag::mean(ag::square(out.currents)));
      owner = std::move(net);
    }
    ag::backward(loss);
    auto params = snn::parameters(*owner);
    CHECK(params.size() > 10);
    for (auto& [name, t] : params) {
      INFO(name);
      REQUIRE(t.has_grad());
      bool any = false;
      for (double g : t.grad()) any = any || (g != 0.0 && std::isfinite(g));
      CHECK(any);
    }
  }
}

TEST_CASE("model config text round-trips and rejects bad values") {
  auto cfg = small_config();
  cfg.spes_variant = snn::SpesVariant::dense_enhanced;
  cfg.spes_decay = 0.75;
  cfg.block_layers = {2, 3, 1};
  auto back = snn::ModelConfig::from_text(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK_THROWS(snn::ModelConfig::from_text("nonsense=1\n"));
  CHECK_THROWS(snn::ModelConfig::from_text("growth=0\n"));
  snn::ModelConfig c;
  CHECK(c.set("fusion", "none"));
  CHECK(c.fusion_layers == 0);
  CHECK_FALSE(c.set("unknown", "1"));
}

// ---- checkpoint --------------------------------------------------------------------------

TEST_CASE("checkpoint round-trip restores identical outputs") {
  const auto dir = std::filesystem::temp_directory_path() / "spikedet_test_snn";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.ckpt";

  auto cfg = small_config();
  snn::SpikingClassifier trained(cfg);
  snn::Rng rng(59);
  snn::RunContext train_ctx;
  train_ctx.steps = 2;
  train_ctx.training = true;
  trained.forward(random_spikes(rng, {4, 4, 64, 64}), train_ctx);  // moves BN running stats
  snn::write_archive(snn::capture(trained, cfg.to_text()), path);

  auto archive = snn::read_archive(path);
  CHECK(archive.manifest == cfg.to_text());
  auto other_cfg = snn::ModelConfig::from_text(archive.manifest);
  other_cfg.init_seed = 999;
  snn::SpikingClassifier restored(other_cfg);
  snn::restore(restored, archive);

  snn::reset_state(trained);
  snn::RunContext ctx;
  ctx.steps = 2;
  auto x = random_spikes(rng, {4, 4, 64, 64});
  auto a = trained.forward(x, ctx);
  auto b = restored.forward(x, ctx);
  CHECK(copy_values(a.currents) == copy_values(b.currents));

  auto wider = cfg;
  wider.growth = 6;
  snn::SpikingClassifier mismatch(wider);
  CHECK_THROWS_AS(snn::restore(mismatch, archive), snn::CheckpointError);

  {
    std::ofstream f(dir / "trunc.ckpt", std::ios::binary);
    std::ifstream src(path, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(src)), std::istreambuf_iterator<char>());
    f.write(raw.data(), static_cast<std::streamsize>(raw.size() / 2));
  }
  CHECK_THROWS_AS(snn::read_archive(dir / "trunc.ckpt"), snn::CheckpointError);
  CHECK_THROWS_AS(snn::read_archive(dir / "absent.ckpt"), snn::CheckpointError);
  std::filesystem::remove_all(dir);
}
