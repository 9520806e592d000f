#pragma once

// Single-file checkpoint: a text manifest describing the architecture plus
// named little-endian float64 arrays for every parameter and batch-norm buffer.

#include <filesystem>
#include <stdexcept>

#include "spikedet/snn/networks.hpp"

namespace spikedet::snn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;
};

struct Archive {
  std::string manifest;
  std::vector<NamedArray> arrays;
};

// Layout: "SDCKPT01", u64 manifest bytes, manifest, u64 array count, then per
// array u32 name bytes, name, u32 rank, rank x u64 dims, f64 values.
void write_archive(const Archive& archive, const std::filesystem::path& path);
Archive read_archive(const std::filesystem::path& path);

// Parameters by name plus "<buffer>.running_mean", ".running_var", ".seen".
Archive capture(Network& net, std::string manifest);
// Requires exactly the same names and shapes as the network; throws
// CheckpointError otherwise and leaves the network untouched.
void restore(Network& net, const Archive& archive);

}  // namespace spikedet::snn
