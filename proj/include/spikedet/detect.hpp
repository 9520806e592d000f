#pragma once

// SSD-style detection: anchors, box coding, matching, NMS, ground-truth
// filtering, the non-spiking head on decoded feature maps, and mAP.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "spikedet/losses.hpp"
#include "spikedet/snn/core.hpp"

namespace spikedet::detect {

namespace ag = spikedet::ag;

// Top-left corner and size in pixels.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

struct LabeledBox {
  Box box;
  int class_id = 0;
};

struct LevelShape {
  std::size_t height = 0, width = 0;
};

struct AnchorConfig {
  // Base side per level; level l uses sizes[l]. Must cover every level.
  std::vector<double> sizes{16.0, 32.0, 64.0, 128.0};
  std::vector<double> scales{1.0, 1.41421356237309515};
  std::vector<double> ratios{1.0, 2.0, 0.5};  // width / height
  std::size_t per_cell() const { return scales.size() * ratios.size(); }
};

// Ordered level-major, row-major, anchor-minor (scale-major, ratio-minor).
struct AnchorSet {
  std::vector<Box> anchors;
  std::vector<std::size_t> level_offsets;  // first anchor of each level
  std::size_t per_cell = 0;
  std::size_t size() const { return anchors.size(); }
};

AnchorSet generate_anchors(const std::vector<LevelShape>& levels, std::size_t image_h,
                           std::size_t image_w, const AnchorConfig& cfg);

// (dcx / aw, dcy / ah, ln(gw / aw), ln(gh / ah)). Rejects non-positive sizes.
std::array<double, 4> encode_box(const Box& gt, const Box& anchor);
Box decode_box(const std::array<double, 4>& offsets, const Box& anchor);
Box clip_box(const Box& b, double image_h, double image_w);

double iou(const Box& a, const Box& b);

struct MatchAssignment {
  static constexpr int kNegative = -1;
  static constexpr int kIgnored = -2;
  std::vector<int> match;  // per anchor: GT index, kNegative or kIgnored
  std::size_t positives() const;
};

// Threshold matching with forced best anchors. Each anchor takes its highest
// IoU GT (lowest index on ties): >= pos positive, < neg negative, otherwise
// ignored. Then, in GT index order, each GT's highest IoU anchor (lowest index
// on ties) is forced positive for that GT, overriding earlier assignments.
MatchAssignment match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                              double pos_thresh = 0.5, double neg_thresh = 0.4);

// Appends one sample's targets (labels and offsets per anchor) to `out`.
void append_targets(const AnchorSet& anchors, const std::vector<LabeledBox>& gts,
                    const MatchAssignment& m, losses::MultiboxTargets& out);

// Greedy per-class suppression. Candidates with score >= score_thresh are
// visited by descending score (input index breaks ties); a candidate is
// dropped when its IoU with a kept box of the same class exceeds iou_thresh.
// Output is ordered by that visiting order and truncated to max_out.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh,
                           double score_thresh, std::size_t max_out);

// Keeps boxes with both sides >= min_side and diagonal >= min_diag.
std::vector<LabeledBox> filter_gt_boxes(const std::vector<LabeledBox>& gts,
                                        double min_side = 10.0, double min_diag = 30.0);

struct HeadConfig {
  std::size_t classes = 1;
  std::size_t anchors_per_cell = 6;
  double prior_probability = 0.01;
};

// Per level one 3x3 conv to A*K class logits and one to A*4 offsets, counted
// as multiply-accumulates. Outputs are flattened in anchor order.
class SsdHead {
 public:
  SsdHead(const std::vector<std::size_t>& level_channels, const HeadConfig& cfg, snn::Rng& rng);

  struct Output {
    ag::Tensor class_logits;  // [N, anchors, K]
    ag::Tensor box_offsets;   // [N, anchors, 4]
  };
  Output forward(const std::vector<ag::Tensor>& levels, snn::RunContext& ctx);
  void visit(snn::StateVisitor& v, const std::string& prefix);
  const HeadConfig& config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  std::vector<snn::Conv2d> cls_, box_;
};

struct PostprocessConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  std::size_t pre_nms_top_k = 400;
  std::size_t max_detections = 100;
};

// Detections for sample `n` of a head output, decoded against the anchors and
// clipped to the image.
std::vector<Detection> postprocess(const SsdHead::Output& out, std::size_t n,
                                   const AnchorSet& anchors, double image_h, double image_w,
                                   const PostprocessConfig& cfg);

struct MapResult {
  double map50 = 0.0;
  double map50_95 = 0.0;
  std::map<int, double> ap50_per_class;      // classes with ground truth
  std::map<int, double> ap50_95_per_class;
};

// 101-point interpolated AP per class and IoU threshold 0.50:0.05:0.95,
// greedy per-sample matching by descending score; averaged over classes with
// at least one GT. `dets` and `gts` are keyed by sample id.
MapResult evaluate_map(const std::map<std::string, std::vector<Detection>>& dets,
                       const std::map<std::string, std::vector<LabeledBox>>& gts);
// AP at one IoU threshold for one class.
double average_precision(const std::map<std::string, std::vector<Detection>>& dets,
                         const std::map<std::string, std::vector<LabeledBox>>& gts,
                         int class_id, double iou_thresh);

// Lines "sample_id class score x y w h"; sample ids contain no whitespace.
void write_detections(const std::filesystem::path& path,
                      const std::map<std::string, std::vector<Detection>>& dets);
std::map<std::string, std::vector<Detection>> read_detections(const std::filesystem::path& path);

}  // namespace spikedet::detect
