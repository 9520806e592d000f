#pragma once

// Firing-rate accounting, accumulate / multiply-accumulate operation counts and
// the per-operation energy model.

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "spikedet/snn/networks.hpp"

namespace spikedet::metrics {

struct LayerRate {
  std::string name;
  std::uint64_t spikes = 0, slots = 0;  // slots = neurons x time steps
  double rate = 0.0;
};

struct FiringReport {
  std::vector<LayerRate> layers;
  std::uint64_t spikes = 0, slots = 0;
  double overall = 0.0;  // slot-weighted: sum spikes / sum slots
};

// Rejects counters from a network that has not run a forward pass (no slots).
FiringReport firing_rate(const std::vector<snn::LayerSpikes>& counters);
FiringReport firing_rate(snn::Network& net);

// Share of SEW residual entries equal to 2; 0 when there are none.
double non_binary_rate(snn::Network& net);

struct LayerOps {
  std::string name;
  ag::Shape shape;  // per-sample output shape
  double n_ac = 0.0, n_mac = 0.0;
};

// Per sample and time step.
struct OpCount {
  std::vector<LayerOps> layers;
  double n_ac = 0.0, n_mac = 0.0;
};

OpCount count_ops(const std::vector<snn::OpRecord>& records);
// Runs `forward` once with operation recording on and tallies the records.
// Counts depend on shapes only. Rejects a forward that records nothing.
OpCount count_ops(const std::function<void(snn::RunContext&)>& forward);

inline constexpr double kEnergyAc = 0.9e-12;   // J per accumulate
inline constexpr double kEnergyMac = 4.6e-12;  // J per multiply-accumulate

struct EnergyReport {
  std::size_t steps = 0;
  double firing_rate = 0.0;
  double n_ac = 0.0, n_mac = 0.0;
  double e_snn = 0.0;  // steps * fr * E_AC * N_AC
  double e_mac = 0.0;  // steps * E_MAC * N_MAC
  double total() const { return e_snn + e_mac; }
};

// fr must lie in [0, 1].
EnergyReport energy(std::size_t steps, double firing_rate, double n_ac, double n_mac);
EnergyReport energy(std::size_t steps, double firing_rate, const OpCount& ops);

// Per-layer table (name, shape, N_AC, N_MAC, rate of the neuron population the
// layer feeds, when there is one), totals, firing summary and energy.
nlohmann::ordered_json profile_json(const OpCount& ops, const FiringReport& firing,
                                    double non_binary, const EnergyReport& e);

}  // namespace spikedet::metrics
