#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "spikedet/snn/checkpoint.hpp"

namespace fs = std::filesystem;
namespace snn = spikedet::snn;
using nlohmann::json;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args, const std::string& env = "") {
  Run r;
  const std::string cmd = env + " '" + SPIKEDET_CLI_PATH + "' " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::path(SPIKEDET_TEST_WORK) / "cli";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream cfg(d / "toy.cfg");
    cfg << "[run]\nepochs = 2\nbatch_size = 4\n[data]\ntrain_samples = 12\ntest_samples = 8\n"
           "[model]\nstem_channels = 8\ngrowth = 4\nblock_layers = 1,1,1\n";
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return "'" + (work() / name).string() + "'"; }

const std::string kDetSets =
    " --set width=80 --set height=64 --set train_samples=12 --set test_samples=4 --set epochs=2"
    " --set min_size=14 --set max_size=24 --set fused_channels=8 --set extra_channels=8"
    " --set spes_dense_growth=4 --set anchor_sizes=12,24,48 --set stem_channels=8 --set growth=4"
    " --set block_layers=1,1,1 --set batch_size=4 --quiet";

}  // namespace

TEST_CASE("generate writes one event file and sidecar per manifest entry") {
  const auto r = cli("generate --scenario moving-square --seed 7 --count 10 --out " + at("gen"));
  REQUIRE(r.status == 0);
  const auto m = json::parse(r.out);
  CHECK(m["count"] == 10);
  CHECK(m["samples"].size() == 10);
  std::size_t evt = 0, gt = 0;
  for (const auto& e : fs::directory_iterator(work() / "gen")) {
    evt += e.path().extension() == ".evt";
    gt += e.path().extension() == ".gt";
  }
  CHECK(evt == 10);
  CHECK(gt == 10);
  const auto on_disk = json::parse(std::ifstream(work() / "gen" / "manifest.json"));
  CHECK(on_disk == m);
}

TEST_CASE("exit codes: bad flags 2, I/O 3, divergence 4, checkpoint mismatch 5") {
  CHECK(cli("").status == 2);
  CHECK(cli("generate --count 3").status == 2);  // missing --out
  CHECK(cli("generate --scenario nope --out " + at("x")).status == 2);
  CHECK(cli("train-cls --set no_such_key=1").status == 2);
  CHECK(cli("train-cls --set scenario=moving-square").status == 2);
  CHECK(cli("train-cls --config " + at("toy.cfg"), "SPIKEDET_THREADS=zero").status == 2);
  CHECK(cli("ablate --axis width").status == 2);

  CHECK(cli("encode --input " + at("missing.evt")).status == 3);
  CHECK(cli("train-cls --config " + at("missing.cfg")).status == 3);
  CHECK(cli("eval --checkpoint " + at("missing.ckpt")).status == 3);
  {
    std::ofstream bad(work() / "bad.evt", std::ios::binary);
    bad << "not an event file";
  }
  CHECK(cli("encode --input " + at("bad.evt")).status == 3);

  CHECK(cli("train-cls --quiet --config " + at("toy.cfg") + " --set lr=1e300 --set epochs=3").status == 4);

  {
    std::ofstream junk(work() / "junk.ckpt", std::ios::binary);
    junk << "junk";
  }
  CHECK(cli("eval --checkpoint " + at("junk.ckpt")).status == 5);
  REQUIRE(cli("train-cls --quiet --config " + at("toy.cfg") + " --checkpoint " + at("small.ckpt")).status == 0);
  auto archive = snn::read_archive(work() / "small.ckpt");
  archive.arrays.pop_back();
  snn::write_archive(archive, work() / "short.ckpt");
  CHECK(cli("eval --checkpoint " + at("short.ckpt")).status == 5);
}

TEST_CASE("train-cls report and eval on the training split agree") {
  const auto r = cli("train-cls --quiet --config " + at("toy.cfg") +
                     " --set loss=mse --set decode=rate --checkpoint " + at("cls.ckpt") + " --csv " + at("cls.csv"));
  REQUIRE(r.status == 0);
  const auto report = json::parse(r.out);
  CHECK(report["task"] == "classify");
  CHECK(report["epochs"].size() == 2);
  REQUIRE(report["final"]["test"].contains("accuracy"));
  const auto e = cli("eval --checkpoint " + at("cls.ckpt") + " --split train");
  REQUIRE(e.status == 0);
  const auto ev = json::parse(e.out);
  CHECK(std::abs(ev["accuracy"].get<double>() - report["final"]["train"]["accuracy"].get<double>()) <= 0.01);
  std::ifstream csv(work() / "cls.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("train-det: eval reproduces the training-time mAP; profile rates and energy") {
  const auto r = cli("train-det" + kDetSets + " --checkpoint " + at("det.ckpt"));
  REQUIRE(r.status == 0);
  const auto report = json::parse(r.out);
  const auto e = cli("eval --checkpoint " + at("det.ckpt") + " --split train --iou 0.5 --dump " + at("det.txt"));
  REQUIRE(e.status == 0);
  const auto ev = json::parse(e.out);
  CHECK(std::abs(ev["map50"].get<double>() - report["final"]["train"]["map50"].get<double>()) <= 0.01);
  CHECK(ev["map_at_iou"]["map"].get<double>() == doctest::Approx(ev["map50"].get<double>()).epsilon(1e-12));

  // The dump scores identically against a dataset holding the same samples.
  const auto gen = cli("generate --scenario moving-square --seed 1 --count 12 --out " + at("det_train") + kDetSets.substr(0, kDetSets.find(" --set epochs")));
  REQUIRE(gen.status == 0);
  const auto d = cli("eval --detections " + at("det.txt") + " --dataset " + at("det_train"));
  REQUIRE(d.status == 0);
  CHECK(json::parse(d.out)["map50"].get<double>() == doctest::Approx(ev["map50"].get<double>()).epsilon(1e-12));

  const auto p = cli("profile --checkpoint " + at("det.ckpt"));
  REQUIRE(p.status == 0);
  const auto prof = json::parse(p.out);
  for (const auto& l : prof["layers"]) {
    if (l["rate"].is_null()) continue;
    CHECK(l["rate"].get<double>() >= 0.0);
    CHECK(l["rate"].get<double>() <= 1.0);
  }
  CHECK(prof["energy"]["e_snn_j"].get<double>() >= 0.0);
}

TEST_CASE("profile of a zero-weight model reports E_snn = 0") {
  REQUIRE(cli("train-cls --quiet --config " + at("toy.cfg") + " --set epochs=1 --checkpoint " + at("z.ckpt")).status == 0);
  auto archive = snn::read_archive(work() / "z.ckpt");
  for (auto& a : archive.arrays) {
    if (!a.name.ends_with(".running_var") && !a.name.ends_with(".seen")) std::fill(a.values.begin(), a.values.end(), 0.0);
  }
  snn::write_archive(archive, work() / "zero.ckpt");
  const auto p = cli("profile --checkpoint " + at("zero.ckpt"));
  REQUIRE(p.status == 0);
  const auto prof = json::parse(p.out);
  CHECK(prof["firing"]["overall_rate"].get<double>() == 0.0);
  CHECK(prof["energy"]["e_snn_j"].get<double>() == 0.0);
}

TEST_CASE("ablate emits one report per cell") {
  const auto r = cli("ablate --quiet --axis decode,loss --config " + at("toy.cfg") + " --set epochs=1");
  REQUIRE(r.status == 0);
  const auto j = json::parse(r.out);
  REQUIRE(j["cells"].size() == 4);
  for (const auto& c : j["cells"]) CHECK(c["reports"].size() == 1);
  CHECK(j["cells"][1]["decode"] == "rate");
  CHECK(j["cells"][1]["loss"] == "ce");

  const auto f = cli("ablate --quiet --axis fusion --seeds 1,2" + kDetSets.substr(0, kDetSets.find(" --quiet")) +
                     " --set epochs=1");
  REQUIRE(f.status == 0);
  const auto fj = json::parse(f.out);
  REQUIRE(fj["cells"].size() == 3);
  CHECK(fj["cells"][0]["fusion"] == "none");
  for (const auto& c : fj["cells"]) CHECK(c["reports"].size() == 2);
}
