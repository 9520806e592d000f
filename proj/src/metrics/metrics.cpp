#include "spikedet/metrics.hpp"

#include <map>
#include <stdexcept>

namespace spikedet::metrics {

FiringReport firing_rate(const std::vector<snn::LayerSpikes>& counters) {
  FiringReport out;
  for (const auto& c : counters) {
    if (c.spikes > c.slots) throw std::logic_error("firing_rate: more spikes than slots in " + c.name);
    LayerRate l{c.name, c.spikes, c.slots, 0.0};
    if (c.slots > 0) l.rate = static_cast<double>(c.spikes) / static_cast<double>(c.slots);
    out.spikes += c.spikes;
    out.slots += c.slots;
    out.layers.push_back(std::move(l));
  }
  if (out.slots == 0) throw std::invalid_argument("firing_rate: no forward pass recorded");
  out.overall = static_cast<double>(out.spikes) / static_cast<double>(out.slots);
  return out;
}

FiringReport firing_rate(snn::Network& net) { return firing_rate(snn::spike_counters(net)); }

double non_binary_rate(snn::Network& net) {
  const auto [entries, above] = snn::residual_counters(net);
  return entries == 0 ? 0.0 : static_cast<double>(above) / static_cast<double>(entries);
}

OpCount count_ops(const std::vector<snn::OpRecord>& records) {
  OpCount out;
  for (const auto& r : records) {
    if (r.count < 0.0) throw std::logic_error("count_ops: negative count at " + r.name);
    LayerOps l{r.name, r.output_shape, 0.0, 0.0};
    (r.kind == snn::OpKind::accumulate ? l.n_ac : l.n_mac) = r.count;
    out.n_ac += l.n_ac;
    out.n_mac += l.n_mac;
    out.layers.push_back(std::move(l));
  }
  return out;
}

OpCount count_ops(const std::function<void(snn::RunContext&)>& forward) {
  std::vector<snn::OpRecord> records;
  snn::RunContext ctx;
  ctx.ops = &records;
  forward(ctx);
  if (records.empty()) throw std::invalid_argument("count_ops: forward recorded no layers");
  return count_ops(records);
}

EnergyReport energy(std::size_t steps, double firing_rate, double n_ac, double n_mac) {
  if (!(firing_rate >= 0.0 && firing_rate <= 1.0)) {
    throw std::invalid_argument("energy: firing rate must lie in [0, 1]");
  }
  if (!(n_ac >= 0.0 && n_mac >= 0.0)) throw std::invalid_argument("energy: negative op count");
  EnergyReport e;
  e.steps = steps;
  e.firing_rate = firing_rate;
  e.n_ac = n_ac;
  e.n_mac = n_mac;
  const double t = static_cast<double>(steps);
  e.e_snn = t * firing_rate * kEnergyAc * n_ac;
  e.e_mac = t * kEnergyMac * n_mac;
  return e;
}

EnergyReport energy(std::size_t steps, double firing_rate, const OpCount& ops) {
  return energy(steps, firing_rate, ops.n_ac, ops.n_mac);
}

namespace {

// "a.b.conv" feeds the neuron "a.b.plif" when the model has one.
const LayerRate* fed_population(const std::string& op, const std::map<std::string, const LayerRate*>& rates) {
  const auto dot = op.rfind('.');
  if (dot == std::string::npos) return nullptr;
  const auto it = rates.find(op.substr(0, dot) + ".plif");
  return it == rates.end() ? nullptr : it->second;
}

}  // namespace

nlohmann::ordered_json profile_json(const OpCount& ops, const FiringReport& firing,
                                    double non_binary, const EnergyReport& e) {
  std::map<std::string, const LayerRate*> by_name;
  for (const auto& l : firing.layers) by_name[l.name] = &l;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : ops.layers) {
    nlohmann::ordered_json row;
    row["name"] = l.name;
    row["shape"] = l.shape;
    row["n_ac"] = l.n_ac;
    row["n_mac"] = l.n_mac;
    const auto* pop = fed_population(l.name, by_name);
    row["rate"] = pop ? nlohmann::ordered_json(pop->rate) : nlohmann::ordered_json(nullptr);
    layers.push_back(std::move(row));
  }
  nlohmann::ordered_json neurons = nlohmann::ordered_json::array();
  for (const auto& l : firing.layers) {
    neurons.push_back({{"name", l.name}, {"spikes", l.spikes}, {"slots", l.slots}, {"rate", l.rate}});
  }
  nlohmann::ordered_json out;
  out["layers"] = std::move(layers);
  out["neurons"] = std::move(neurons);
  out["totals"] = {{"n_ac", ops.n_ac}, {"n_mac", ops.n_mac}};
  out["firing"] = {{"overall_rate", firing.overall},
                   {"spikes", firing.spikes},
                   {"slots", firing.slots},
                   {"non_binary_rate", non_binary}};
  out["energy"] = {{"time_steps", e.steps},
                   {"firing_rate", e.firing_rate},
                   {"e_ac_pj", kEnergyAc * 1e12},
                   {"e_mac_pj", kEnergyMac * 1e12},
                   {"e_snn_j", e.e_snn},
                   {"e_mac_j", e.e_mac},
                   {"e_total_j", e.total()}};
  return out;
}

}  // namespace spikedet::metrics
