#include "spikedet/snn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace spikedet::snn {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, std::string name) : d_(data), name_(std::move(name)) {}
  std::uint64_t u64() { return get(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  double f64() { return std::bit_cast<double>(get(8)); }
  bool done() const { return pos_ == d_.size(); }

 private:
  void need(std::uint64_t n) {
    if (n > d_.size() - pos_) throw CheckpointError(name_ + ": truncated checkpoint");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& d_;
  std::string name_;
  std::size_t pos_ = 0;
};

struct Collect : StateVisitor {
  std::vector<NamedArray> arrays;
  void param(const std::string& name, ag::Tensor& t) override {
    arrays.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  }
  void buffer(const std::string& name, ag::BatchNormState& s) override {
    const std::size_t c = s.running_mean.size();
    arrays.push_back({name + ".running_mean", {c}, s.running_mean});
    arrays.push_back({name + ".running_var", {c}, s.running_var});
    arrays.push_back({name + ".seen", {1}, {s.seen_batch ? 1.0 : 0.0}});
  }
};

}  // namespace

void write_archive(const Archive& archive, const std::filesystem::path& path) {
  std::string b(kMagic, sizeof kMagic);
  put_u64(b, archive.manifest.size());
  b += archive.manifest;
  put_u64(b, archive.arrays.size());
  for (const auto& a : archive.arrays) {
    if (ag::numel(a.shape) != a.values.size()) {
      throw CheckpointError("array '" + a.name + "' size does not match its shape");
    }
    put_u32(b, static_cast<std::uint32_t>(a.name.size()));
    b += a.name;
    put_u32(b, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u64(b, d);
    for (double v : a.values) put_u64(b, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path.string());
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + path.string());
  const std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < sizeof kMagic || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint");
  }
  const std::string body = raw.substr(sizeof kMagic);
  Reader r(body, path.string());
  Archive a;
  a.manifest = r.bytes(r.u64());
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray arr;
    arr.name = r.bytes(r.u32());
    const auto rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) arr.shape.push_back(r.u64());
    const auto n = ag::numel(arr.shape);
    if (n > body.size() / 8) throw CheckpointError(path.string() + ": truncated checkpoint");
    arr.values.resize(n);
    for (auto& v : arr.values) v = r.f64();
    a.arrays.push_back(std::move(arr));
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes");
  return a;
}

Archive capture(Network& net, std::string manifest) {
  Collect c;
  net.visit(c);
  return {std::move(manifest), std::move(c.arrays)};
}

void restore(Network& net, const Archive& archive) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : archive.arrays) {
    if (!by_name.emplace(a.name, &a).second) {
      throw CheckpointError("duplicate array '" + a.name + "'");
    }
  }
  // Validate everything before mutating anything.
  Collect expected;
  net.visit(expected);
  if (expected.arrays.size() != by_name.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(by_name.size()) +
                          " arrays, network expects " + std::to_string(expected.arrays.size()));
  }
  for (const auto& e : expected.arrays) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks '" + e.name + "'");
    if (it->second->shape != e.shape) {
      throw CheckpointError("'" + e.name + "' has shape " + ag::to_string(it->second->shape) +
                            ", network expects " + ag::to_string(e.shape));
    }
  }
  struct Apply : StateVisitor {
    const std::map<std::string, const NamedArray*>* src;
    void param(const std::string& name, ag::Tensor& t) override {
      const auto& v = src->at(name)->values;
      std::copy(v.begin(), v.end(), t.mutable_values().begin());
    }
    void buffer(const std::string& name, ag::BatchNormState& s) override {
      s.running_mean = src->at(name + ".running_mean")->values;
      s.running_var = src->at(name + ".running_var")->values;
      s.seen_batch = src->at(name + ".seen")->values[0] != 0.0;
    }
  } apply;
  apply.src = &by_name;
  net.visit(apply);
}

}  // namespace spikedet::snn
