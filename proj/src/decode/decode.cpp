#include "spikedet/decode.hpp"

#include <stdexcept>

namespace spikedet::decode {

namespace {

ag::Shape sample_shape(const ag::Tensor& seq, std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("decode: T must be at least 1");
  if (seq.rank() == 0 || seq.dim(0) % steps != 0) {
    throw ag::ShapeError("decode: leading dim of " + ag::to_string(seq.shape()) +
                         " is not a multiple of " + std::to_string(steps));
  }
  ag::Shape s = seq.shape();
  s[0] /= steps;
  return s;
}

}  // namespace

Strategy parse_strategy(const std::string& name) {
  if (name == "count") return Strategy::count;
  if (name == "rate") return Strategy::rate;
  if (name == "membrane") return Strategy::membrane;
  throw std::invalid_argument("unknown decode strategy '" + name + "' (count|rate|membrane)");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::count: return "count";
    case Strategy::rate: return "rate";
    case Strategy::membrane: return "membrane";
  }
  return "?";
}

ag::Tensor decode_count(const ag::Tensor& train, std::size_t steps) {
  const auto out = sample_shape(train, steps);
  auto blocks = ag::reshape(train, {steps, ag::numel(out)});
  return ag::reshape(ag::sum_axis(blocks, 0), out);
}

ag::Tensor decode_rate(const ag::Tensor& train, std::size_t steps) {
  auto count = decode_count(train, steps);
  // Divide rather than multiply by 1/T so rate == count / T holds bitwise.
  const double t = static_cast<double>(steps);
  std::vector<double> v(count.values().begin(), count.values().end());
  for (auto& x : v) x /= t;
  return ag::make_op(count.shape(), std::move(v), {count}, [count, t](std::span<const double> g) {
    auto buf = count.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] / t;
  });
}

ag::Tensor decode_membrane(const ag::Tensor& currents, std::size_t steps, double tau,
                           double v_reset) {
  const auto out = sample_shape(currents, steps);
  if (!(tau >= 1.0)) throw std::invalid_argument("decode_membrane: tau must be at least 1");
  const std::size_t rows = out[0];
  const double k = 1.0 / tau;
  auto v = ag::Tensor::full(out, v_reset);
  for (std::size_t t = 0; t < steps; ++t) {
    auto x = ag::slice(currents, 0, t * rows, (t + 1) * rows);
    v = ag::add(v, ag::scale(ag::sub(x, ag::add_scalar(v, -v_reset)), k));
  }
  return v;
}

ag::Tensor decode(Strategy s, const ag::Tensor& spikes, const ag::Tensor& currents,
                  std::size_t steps, double tau) {
  switch (s) {
    case Strategy::count: return decode_count(spikes, steps);
    case Strategy::rate: return decode_rate(spikes, steps);
    case Strategy::membrane: return decode_membrane(currents, steps, tau);
  }
  throw std::invalid_argument("decode: bad strategy");
}

}  // namespace spikedet::decode
