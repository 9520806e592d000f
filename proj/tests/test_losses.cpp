#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support/decode_loss_oracles.hpp"
#include "support/gradcheck.hpp"

namespace ag = spikedet::ag;
namespace L = spikedet::losses;
using ag::Tensor;

namespace {

std::vector<double> grad_of(L::Kind kind, const std::vector<double>& a,
                            const std::vector<double>& y) {
  auto decoded = Tensor::from({1, a.size()}, a, true);
  ag::backward(L::classification_loss(kind, decoded, Tensor::from({1, y.size()}, y)));
  return {decoded.grad().begin(), decoded.grad().end()};
}

}  // namespace

TEST_CASE("mse worked values") {
  auto y = Tensor::from({1, 2}, {0, 1});
  CHECK(L::mse_loss(Tensor::from({1, 2}, {0.2, 0.8}), y).item() ==
        doctest::Approx(0.08).epsilon(1e-14));
  CHECK(L::mse_loss(y, y).item() == 0.0);
  // Normalized by N only: two identical rows give the same value as one.
  auto y2 = Tensor::from({2, 2}, {0, 1, 0, 1});
  CHECK(L::mse_loss(Tensor::from({2, 2}, {0.2, 0.8, 0.2, 0.8}), y2).item() ==
        doctest::Approx(0.08).epsilon(1e-14));
  CHECK_THROWS_AS(L::mse_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})), ag::ShapeError);
}

TEST_CASE("mse analytic gradient: saturation leaves the negative class gradient") {
  const auto g = L::mse_grad_analytic({0.2, 1.0}, {0, 1});
  CHECK(g[0] == doctest::Approx(0.4));
  CHECK(g[1] == 0.0);
  for (double v : L::mse_grad_analytic({0.3, 0.7}, {0.3, 0.7})) CHECK(v == 0.0);
}

TEST_CASE("softmax worked values round to [0.35, 0.65] and [0.31, 0.69]") {
  const auto z1 = L::softmax({0.2, 0.8});
  CHECK(z1[0] == doctest::Approx(0.3543).epsilon(1e-4));
  CHECK(std::round(z1[0] * 100) / 100 == doctest::Approx(0.35));
  CHECK(std::round(z1[1] * 100) / 100 == doctest::Approx(0.65));
  const auto z2 = L::softmax({0.2, 1.0});
  CHECK(std::round(z2[0] * 100) / 100 == doctest::Approx(0.31));
  CHECK(std::round(z2[1] * 100) / 100 == doctest::Approx(0.69));
  const auto g = L::ce_grad_analytic({0.2, 1.0}, {0, 1});
  CHECK(g[0] == doctest::Approx(0.3100).epsilon(1e-3));
  CHECK(g[1] == doctest::Approx(-0.3100).epsilon(1e-3));
}

TEST_CASE("ce: uniform decoded values give ln C; uniform C=2 gradient is [0.5, -0.5]") {
  for (std::size_t c : {2, 3, 7}) {
    std::vector<double> y(c, 0.0);
    y[0] = 1.0;
    CHECK(L::ce_loss(Tensor::full({1, c}, 0.4), Tensor::from({1, c}, y)).item() ==
          doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));
  }
  const auto g = L::ce_grad_analytic({0.5, 0.5}, {0, 1});
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[1] == doctest::Approx(-0.5));
}

TEST_CASE("ce is stable for large decoded values") {
  auto a = Tensor::from({1, 3}, {1000.0, -1000.0, 0.0}, true);
  auto loss = L::ce_loss(a, Tensor::from({1, 3}, {0, 1, 0}));
  CHECK(std::isfinite(loss.item()));
  CHECK(loss.item() == doctest::Approx(2000.0));
}

TEST_CASE("autodiff matches closed forms within 1e-10 on 1000 random vectors") {
  const auto r = testsupport::loss_gradient_sweep(19, 1000);
  CHECK(r.vectors == 1000);
  CHECK(r.mse_max_abs_error <= 1e-10);
  CHECK(r.ce_max_abs_error <= 1e-10);
}

TEST_CASE("batched gradients equal the per-sample closed forms divided by N") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = 4, c = 3;
  std::vector<double> a(n * c), y(n * c, 0.0);
  for (auto& v : a) v = unit(rng);
  for (std::size_t i = 0; i < n; ++i) y[i * c + i % c] = 1.0;
  for (auto kind : {L::Kind::mse, L::Kind::ce}) {
    auto decoded = Tensor::from({n, c}, a, true);
    ag::backward(L::classification_loss(kind, decoded, Tensor::from({n, c}, y)));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> ai(a.begin() + i * c, a.begin() + (i + 1) * c);
      std::vector<double> yi(y.begin() + i * c, y.begin() + (i + 1) * c);
      const auto g = kind == L::Kind::mse ? L::mse_grad_analytic(ai, yi)
                                          : L::ce_grad_analytic(ai, yi);
      for (std::size_t j = 0; j < c; ++j) {
        CHECK(std::abs(decoded.grad()[i * c + j] - g[j] / n) <= 1e-9);
      }
    }
  }
}

TEST_CASE("ce gradient rows sum to zero, mse rows in general do not") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int mse_nonzero = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(4), y(4, 0.0);
    for (auto& v : a) v = unit(rng);
    y[trial % 4] = 1.0;
    const auto ce = grad_of(L::Kind::ce, a, y);
    CHECK(std::abs(std::accumulate(ce.begin(), ce.end(), 0.0)) < 1e-14);
    const auto mse = grad_of(L::Kind::mse, a, y);
    mse_nonzero += std::abs(std::accumulate(mse.begin(), mse.end(), 0.0)) > 1e-6;
  }
  CHECK(mse_nonzero > 150);
}

TEST_CASE("both losses pick the largest decoded value as the best label") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = 2 + trial % 5;
    std::vector<double> a(c);
    for (auto& v : a) v = unit(rng);
    const auto best = static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
    for (auto kind : {L::Kind::mse, L::Kind::ce}) {
      std::size_t arg = 0;
      double lowest = 1e300;
      for (std::size_t k = 0; k < c; ++k) {
        std::vector<double> y(c, 0.0);
        y[k] = 1.0;
        const double l = L::classification_loss(kind, Tensor::from({1, c}, a),
                                                Tensor::from({1, c}, y)).item();
        if (l < lowest) lowest = l, arg = k;
      }
      CHECK(arg == best);
    }
  }
}

TEST_CASE("saturation: mse component is zero iff a_j = y_j; ce negative-class gradient shrinks") {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a{unit(rng), unit(rng), 1.0};
    const std::vector<double> y{0, 0, 1};
    if (trial % 3 == 0) a[0] = 0.0;
    const auto g = L::mse_grad_analytic(a, y);
    for (std::size_t j = 0; j < 3; ++j) CHECK((g[j] == 0.0) == (a[j] == y[j]));
  }
  double previous = 1e300;
  for (double pos = 0.0; pos <= 1.0; pos += 0.05) {
    const double neg_grad = std::abs(L::ce_grad_analytic({0.2, pos}, {0, 1})[0]);
    CHECK(neg_grad < previous);
    previous = neg_grad;
  }
}

TEST_CASE("focal loss worked value, BCE reduction and monotonicity") {
  const L::FocalParams def;
  const double v = L::focal_loss(Tensor::from({1}, {0.9}), {1}, def).item();
  CHECK(v == doctest::Approx(-0.25 * 0.01 * std::log(0.9)).epsilon(1e-12));
  CHECK(v == doctest::Approx(2.634e-4).epsilon(1e-3));

  const L::FocalParams bce{0.5, 0.0};
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unit(0.01, 0.99);
  for (int trial = 0; trial < 50; ++trial) {
    const double p = unit(rng);
    const int y = trial % 2;
    const double expect = -(y ? std::log(p) : std::log(1.0 - p));
    CHECK(L::focal_loss(Tensor::from({1}, {p}), {y}, bce).item() ==
          doctest::Approx(0.5 * expect).epsilon(1e-12));
  }

  double previous = 1e300;
  for (double pt = 0.01; pt < 1.0; pt += 0.01) {
    const double l = L::focal_loss(Tensor::from({1}, {pt}), {1}, def).item();
    CHECK(l < previous);
    previous = l;
  }
}

TEST_CASE("focal loss clamps out-of-range probabilities and matches finite differences") {
  const L::FocalParams def;
  CHECK(std::isfinite(L::focal_loss(Tensor::from({2}, {0.0, 1.0}), {1, 0}, def).item()));
  std::mt19937_64 rng(43);
  for (double gamma : {0.0, 0.5, 2.0}) {
    auto p = testsupport::random_tensor(rng, {12}, 0.05, 0.95);
    std::vector<int> labels(12);
    for (std::size_t i = 0; i < 12; ++i) labels[i] = static_cast<int>(i % 3) - 1;
    const double err = testsupport::max_grad_rel_error(
        {p}, [&] { return L::focal_loss(p, labels, {0.25, gamma}); }, 1e-6);
    CHECK(err < 1e-5);
  }
  CHECK_THROWS_AS(L::focal_loss(Tensor::from({2}, {0.5, 0.5}), {1}, def), ag::ShapeError);
}

TEST_CASE("smooth L1 values and gradient") {
  auto x = Tensor::from({4}, {0.5, 2.0, -3.0, 9.0}, true);
  auto l = L::smooth_l1_sum(x, {0, 0, 0, 0}, {1, 1, 1, 0});
  CHECK(l.item() == doctest::Approx(0.125 + 1.5 + 2.5));
  ag::backward(l);
  CHECK(x.grad()[0] == doctest::Approx(0.5));
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == -1.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("multibox loss: normalization, no positives, perfect predictions") {
  const std::size_t n = 2, a = 3, k = 2;
  L::MultiboxTargets t;
  t.label = {0, L::MultiboxTargets::kBackground, L::MultiboxTargets::kIgnore,
             L::MultiboxTargets::kBackground, 1, L::MultiboxTargets::kBackground};
  t.offsets.assign(4 * n * a, 0.0);
  for (std::size_t i = 0; i < 4; ++i) t.offsets[4 * 4 + i] = 0.1 * static_cast<double>(i);

  // Perfect: large logit on the right class, very negative elsewhere, exact offsets.
  std::vector<double> logits(n * a * k, -20.0);
  logits[0 * k + 0] = 20.0;
  logits[4 * k + 1] = 20.0;
  auto perfect = L::ssd_multibox_loss(Tensor::from({n, a, k}, logits),
                                      Tensor::from({n, a, 4}, t.offsets), t, {});
  CHECK(perfect.positives == 2);
  CHECK(perfect.total.item() < 1e-3);

  L::MultiboxTargets none = t;
  for (auto& l : none.label) l = L::MultiboxTargets::kBackground;
  auto cls = Tensor::zeros({n, a, k});
  auto empty = L::ssd_multibox_loss(cls, Tensor::full({n, a, 4}, 5.0), none, {});
  CHECK(empty.positives == 0);
  CHECK(empty.localization == 0.0);
  // All 12 entries negative at p = 0.5: 0.75 * 0.25 * ln 2 each, divided by 1.
  CHECK(empty.total.item() == doctest::Approx(12 * 0.75 * 0.25 * std::log(2.0)));

  std::mt19937_64 rng(47);
  auto cl = testsupport::random_tensor(rng, {n, a, k}, -2, 2);
  auto bx = testsupport::random_tensor(rng, {n, a, 4}, -2, 2);
  const double err = testsupport::max_grad_rel_error(
      {cl, bx}, [&] { return L::ssd_multibox_loss(cl, bx, t, {}).total; }, 1e-6);
  CHECK(err < 1e-5);
  auto full = L::ssd_multibox_loss(cl, bx, t, {});
  CHECK(full.total.item() ==
        doctest::Approx((full.classification + full.localization) / 2.0).epsilon(1e-14));
}
