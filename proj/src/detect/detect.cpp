#include "spikedet/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace spikedet::detect {

// ---- anchors and box coding ----------------------------------------------------

AnchorSet generate_anchors(const std::vector<LevelShape>& levels, std::size_t image_h,
                           std::size_t image_w, const AnchorConfig& cfg) {
  if (levels.empty()) throw std::invalid_argument("anchors: no levels");
  if (cfg.sizes.size() < levels.size()) {
    throw std::invalid_argument("anchors: " + std::to_string(cfg.sizes.size()) +
                                " sizes for " + std::to_string(levels.size()) + " levels");
  }
  if (cfg.scales.empty() || cfg.ratios.empty()) {
    throw std::invalid_argument("anchors: scales and ratios must be non-empty");
  }
  AnchorSet set;
  set.per_cell = cfg.per_cell();
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto [lh, lw] = levels[l];
    if (lh == 0 || lw == 0) throw std::invalid_argument("anchors: empty level");
    set.level_offsets.push_back(set.anchors.size());
    const double sy = static_cast<double>(image_h) / static_cast<double>(lh);
    const double sx = static_cast<double>(image_w) / static_cast<double>(lw);
    for (std::size_t i = 0; i < lh; ++i) {
      for (std::size_t j = 0; j < lw; ++j) {
        const double cy = (static_cast<double>(i) + 0.5) * sy;
        const double cx = (static_cast<double>(j) + 0.5) * sx;
        for (double s : cfg.scales) {
          for (double r : cfg.ratios) {
            const double w = cfg.sizes[l] * s * std::sqrt(r);
            const double h = cfg.sizes[l] * s / std::sqrt(r);
            set.anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, w, h});
          }
        }
      }
    }
  }
  return set;
}

std::array<double, 4> encode_box(const Box& gt, const Box& anchor) {
  if (!(gt.w > 0 && gt.h > 0) || !(anchor.w > 0 && anchor.h > 0)) {
    throw std::invalid_argument("encode_box: box sizes must be positive");
  }
  return {(gt.cx() - anchor.cx()) / anchor.w, (gt.cy() - anchor.cy()) / anchor.h,
          std::log(gt.w / anchor.w), std::log(gt.h / anchor.h)};
}

Box decode_box(const std::array<double, 4>& t, const Box& anchor) {
  const double cx = anchor.cx() + t[0] * anchor.w;
  const double cy = anchor.cy() + t[1] * anchor.h;
  const double w = anchor.w * std::exp(t[2]);
  const double h = anchor.h * std::exp(t[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

Box clip_box(const Box& b, double image_h, double image_w) {
  const double x0 = std::clamp(b.x, 0.0, image_w), y0 = std::clamp(b.y, 0.0, image_h);
  const double x1 = std::clamp(b.x + b.w, 0.0, image_w);
  const double y1 = std::clamp(b.y + b.h, 0.0, image_h);
  return {x0, y0, x1 - x0, y1 - y0};
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// ---- matching ------------------------------------------------------------------------

std::size_t MatchAssignment::positives() const {
  return static_cast<std::size_t>(std::count_if(match.begin(), match.end(), [](int m) { return m >= 0; }));
}

MatchAssignment match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                              double pos_thresh, double neg_thresh) {
  if (pos_thresh < neg_thresh) throw std::invalid_argument("match: pos_thresh below neg_thresh");
  const std::size_t na = anchors.size(), ng = gts.size();
  MatchAssignment m;
  m.match.assign(na, MatchAssignment::kNegative);
  if (ng == 0) return m;
  std::vector<double> best_anchor_iou(ng, -1.0);
  std::vector<std::size_t> best_anchor(ng, 0);
  for (std::size_t a = 0; a < na; ++a) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      const double v = iou(anchors.anchors[a], gts[g]);
      if (v > best) best = v, arg = g;
      if (v > best_anchor_iou[g]) best_anchor_iou[g] = v, best_anchor[g] = a;
    }
    if (best >= pos_thresh) {
      m.match[a] = static_cast<int>(arg);
    } else if (best >= neg_thresh) {
      m.match[a] = MatchAssignment::kIgnored;
    }
  }
  for (std::size_t g = 0; g < ng; ++g) m.match[best_anchor[g]] = static_cast<int>(g);
  return m;
}

void append_targets(const AnchorSet& anchors, const std::vector<LabeledBox>& gts,
                    const MatchAssignment& m, losses::MultiboxTargets& out) {
  if (m.match.size() != anchors.size()) throw std::invalid_argument("targets: match size");
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const int g = m.match[a];
    std::array<double, 4> t{0, 0, 0, 0};
    int label = losses::MultiboxTargets::kBackground;
    if (g == MatchAssignment::kIgnored) {
      label = losses::MultiboxTargets::kIgnore;
    } else if (g >= 0) {
      label = gts[static_cast<std::size_t>(g)].class_id;
      t = encode_box(gts[static_cast<std::size_t>(g)].box, anchors.anchors[a]);
    }
    out.label.push_back(label);
    out.offsets.insert(out.offsets.end(), t.begin(), t.end());
  }
}

// ---- NMS and filtering ---------------------------------------------------------------------

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh,
                           double score_thresh, std::size_t max_out) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score >= score_thresh) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    if (kept.size() >= max_out) break;
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == dets[i].class_id && iou(k.box, dets[i].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

std::vector<LabeledBox> filter_gt_boxes(const std::vector<LabeledBox>& gts, double min_side,
                                        double min_diag) {
  std::vector<LabeledBox> out;
  for (const auto& g : gts) {
    const double diag = std::sqrt(g.box.w * g.box.w + g.box.h * g.box.h);
    if (g.box.w >= min_side && g.box.h >= min_side && diag >= min_diag) out.push_back(g);
  }
  return out;
}

// ---- head ------------------------------------------------------------------------------------

SsdHead::SsdHead(const std::vector<std::size_t>& level_channels, const HeadConfig& cfg,
                 snn::Rng& rng)
    : cfg_(cfg) {
  if (level_channels.empty()) throw std::invalid_argument("head: no levels");
  if (cfg.classes == 0 || cfg.anchors_per_cell == 0) {
    throw std::invalid_argument("head: classes and anchors per cell must be positive");
  }
  if (!(cfg.prior_probability > 0.0 && cfg.prior_probability < 1.0)) {
    throw std::invalid_argument("head: prior probability must lie in (0, 1)");
  }
  const double prior_bias = -std::log((1.0 - cfg.prior_probability) / cfg.prior_probability);
  for (auto c : level_channels) {
    cls_.emplace_back(c, cfg.anchors_per_cell * cfg.classes, 3, 1, 1, true,
                      snn::OpKind::multiply_accumulate, rng);
    for (auto& b : cls_.back().bias()->mutable_values()) b = prior_bias;
    box_.emplace_back(c, cfg.anchors_per_cell * 4, 3, 1, 1, true,
                      snn::OpKind::multiply_accumulate, rng);
  }
}

namespace {

// [N, A * D, H, W] -> [N, H * W * A, D]
ag::Tensor flatten_level(const ag::Tensor& t, std::size_t a, std::size_t d) {
  const std::size_t n = t.dim(0), hw = t.dim(2) * t.dim(3);
  auto r = ag::reshape(t, {n, a, d, hw});
  r = ag::permute(r, {0, 3, 1, 2});
  return ag::reshape(r, {n, hw * a, d});
}

}  // namespace

SsdHead::Output SsdHead::forward(const std::vector<ag::Tensor>& levels, snn::RunContext& ctx) {
  if (levels.size() != cls_.size()) {
    throw ag::ShapeError("head: " + std::to_string(levels.size()) + " levels for a head built for " +
                         std::to_string(cls_.size()));
  }
  std::vector<ag::Tensor> cls, box;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto name = "head.level" + std::to_string(l);
    cls.push_back(flatten_level(cls_[l].forward(levels[l], ctx, name + ".cls"),
                                cfg_.anchors_per_cell, cfg_.classes));
    box.push_back(flatten_level(box_[l].forward(levels[l], ctx, name + ".box"),
                                cfg_.anchors_per_cell, 4));
  }
  return {ag::concat(cls, 1), ag::concat(box, 1)};
}

void SsdHead::visit(snn::StateVisitor& v, const std::string& prefix) {
  for (std::size_t l = 0; l < cls_.size(); ++l) {
    cls_[l].visit(v, prefix + ".level" + std::to_string(l) + ".cls");
    box_[l].visit(v, prefix + ".level" + std::to_string(l) + ".box");
  }
}

std::vector<Detection> postprocess(const SsdHead::Output& out, std::size_t n,
                                   const AnchorSet& anchors, double image_h, double image_w,
                                   const PostprocessConfig& cfg) {
  const std::size_t na = out.class_logits.dim(1), k = out.class_logits.dim(2);
  if (na != anchors.size()) throw ag::ShapeError("postprocess: anchor count mismatch");
  const auto logits = out.class_logits.values().subspan(n * na * k, na * k);
  const auto offsets = out.box_offsets.values().subspan(n * na * 4, na * 4);
  struct Candidate {
    std::size_t anchor;
    int cls;
    double score;
  };
  std::vector<Candidate> cand;
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t c = 0; c < k; ++c) {
      const double s = 1.0 / (1.0 + std::exp(-logits[a * k + c]));
      if (s >= cfg.score_thresh) cand.push_back({a, static_cast<int>(c), s});
    }
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (cand.size() > cfg.pre_nms_top_k) cand.resize(cfg.pre_nms_top_k);
  std::vector<Detection> dets;
  for (const auto& c : cand) {
    const std::array<double, 4> t{offsets[c.anchor * 4], offsets[c.anchor * 4 + 1],
                                  offsets[c.anchor * 4 + 2], offsets[c.anchor * 4 + 3]};
    // Bound the log-size offsets so an untrained head cannot overflow exp().
    auto bounded = t;
    bounded[2] = std::min(bounded[2], 4.0);
    bounded[3] = std::min(bounded[3], 4.0);
    auto box = clip_box(decode_box(bounded, anchors.anchors[c.anchor]), image_h, image_w);
    if (box.w <= 0.0 || box.h <= 0.0) continue;
    dets.push_back({box, c.cls, c.score});
  }
  return nms(dets, cfg.nms_iou, cfg.score_thresh, cfg.max_detections);
}

// ---- evaluation ---------------------------------------------------------------------------------

double average_precision(const std::map<std::string, std::vector<Detection>>& dets,
                         const std::map<std::string, std::vector<LabeledBox>>& gts,
                         int class_id, double iou_thresh) {
  std::size_t total_gt = 0;
  for (const auto& [id, boxes] : gts) {
    for (const auto& g : boxes) total_gt += g.class_id == class_id;
  }
  if (total_gt == 0) return 0.0;

  struct Ranked {
    const std::string* sample;
    const Detection* det;
  };
  std::vector<Ranked> ranked;
  for (const auto& [id, list] : dets) {
    for (const auto& d : list) {
      if (d.class_id == class_id) ranked.push_back({&id, &d});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.det->score > b.det->score; });

  std::map<std::string, std::vector<char>> used;
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    bool hit = false;
    auto it = gts.find(*r.sample);
    if (it != gts.end()) {
      auto& flags = used[*r.sample];
      flags.resize(it->second.size(), 0);
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (it->second[g].class_id != class_id || flags[g]) continue;
        const double v = iou(r.det->box, it->second[g].box);
        if (v > best) best = v, arg = g;
      }
      if (best >= iou_thresh) {
        flags[arg] = 1;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  // Precision envelope, then 101 recall points.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double sum = 0.0;
  for (int p = 0; p <= 100; ++p) {
    const double r = p / 100.0;
    auto pos = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (pos != recall.end()) sum += precision[static_cast<std::size_t>(pos - recall.begin())];
  }
  return sum / 101.0;
}

MapResult evaluate_map(const std::map<std::string, std::vector<Detection>>& dets,
                       const std::map<std::string, std::vector<LabeledBox>>& gts) {
  std::vector<int> classes;
  for (const auto& [id, boxes] : gts) {
    for (const auto& g : boxes) classes.push_back(g.class_id);
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  MapResult r;
  if (classes.empty()) return r;
  for (int c : classes) {
    double acc = 0.0;
    for (int t = 0; t < 10; ++t) {
      const double ap = average_precision(dets, gts, c, 0.5 + 0.05 * t);
      if (t == 0) r.ap50_per_class[c] = ap;
      acc += ap;
    }
    r.ap50_95_per_class[c] = acc / 10.0;
  }
  for (int c : classes) {
    r.map50 += r.ap50_per_class[c];
    r.map50_95 += r.ap50_95_per_class[c];
  }
  r.map50 /= static_cast<double>(classes.size());
  r.map50_95 /= static_cast<double>(classes.size());
  return r;
}

// ---- dump format -----------------------------------------------------------------------------------

void write_detections(const std::filesystem::path& path,
                      const std::map<std::string, std::vector<Detection>>& dets) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.precision(17);
  for (const auto& [id, list] : dets) {
    if (id.empty() || id.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("sample id '" + id + "' is empty or has whitespace");
    }
    for (const auto& d : list) {
      f << id << ' ' << d.class_id << ' ' << d.score << ' ' << d.box.x << ' ' << d.box.y << ' '
        << d.box.w << ' ' << d.box.h << '\n';
    }
  }
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::map<std::string, std::vector<Detection>> read_detections(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::map<std::string, std::vector<Detection>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(f, line); ++n) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string id;
    Detection d;
    if (!(in >> id >> d.class_id >> d.score >> d.box.x >> d.box.y >> d.box.w >> d.box.h)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed detection");
    }
    out[id].push_back(d);
  }
  return out;
}

}  // namespace spikedet::detect
