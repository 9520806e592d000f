#pragma once

// Spike decoding: reduce a time-major sequence [T * N, ...] to [N, ...].
// All three decoders are differentiable in their input.

#include <string>

#include "spikedet/autograd.hpp"

namespace spikedet::decode {

namespace ag = spikedet::ag;

enum class Strategy { count, rate, membrane };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

// Sum over the T leading blocks.
ag::Tensor decode_count(const ag::Tensor& train, std::size_t steps);
// decode_count / T.
ag::Tensor decode_rate(const ag::Tensor& train, std::size_t steps);
// Leaky integration V <- V + (X - (V - v_reset)) / tau from V = v_reset with
// firing disabled; returns the final V.
ag::Tensor decode_membrane(const ag::Tensor& currents, std::size_t steps, double tau,
                           double v_reset = 0.0);

// Dispatch: spike trains feed count/rate, input currents feed membrane.
ag::Tensor decode(Strategy s, const ag::Tensor& spikes, const ag::Tensor& currents,
                  std::size_t steps, double tau);

}  // namespace spikedet::decode
