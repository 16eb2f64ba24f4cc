#pragma once

// Single-level anchor-free detector built on a three-conv backbone with two
// 2×2 average pools (stride 4). Heads:
//
//   single-branch   shared f_c2(f_c1(F)) -> per-location FC -> class, box, centerness
//   multi-branch    F_cls = f_c2(f_c1(F)), F_reg = f'_c2(f'_c1(F)), optional MSIL,
//                   class/centerness = f_c3 / f_ctr on the class features,
//                   box = exp(f'_c3) on the box features

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "msil/losses.hpp"
#include "msil/msil_head.hpp"
#include "msil/nn.hpp"
#include "msil/scene.hpp"

namespace msil {

inline constexpr int kStride = 4;

// FCOS-style single-level assignment: a location whose center ((x+0.5)s, (y+0.5)s)
// lies strictly inside a box is positive for it; overlaps go to the smallest
// box (first listed on equal area).
DenseTargets assign_targets(const SceneSpec& scene, int stride = kStride);

enum class HeadKind { SingleBranch, MultiBranch };

struct ModelConfig {
    HeadKind head = HeadKind::MultiBranch;
    int in_channels = 1;
    int channels = 16;  // C, width of F_cls / F_reg
    int num_classes = 3;
    std::optional<MsilConfig> msil;
    double prior_prob = 0.01;  // initial foreground probability of the class logits

    void validate() const;
};

struct Backbone {
    Conv2d conv1, conv2, conv3;
    void collect(ParamList& out) const;
};

struct SingleBranchParams {
    Conv2d c1, c2;
    DenseHead fc;  // C -> K + 4 + 1
    void collect(ParamList& out) const;
};

struct MultiBranchParams {
    Conv2d cls_c1, cls_c2, reg_c1, reg_c2;
    Conv2d cls_out, ctr_out, reg_out;  // f_c3 (C->K), centerness (C->1), f'_c3 (C->4)
    std::optional<MsilParams> msil;
    void collect(ParamList& out) const;
};

struct HeadOutput {
    Tensor cls_logits;  // N×K×H×W
    Tensor box;         // N×4×H×W, positive distances in grid units
    Tensor ctr_logits;  // N×1×H×W
    // Feature taps (multi-branch only): branch features before and after MSIL.
    Tensor f_cls, f_reg, class_feat, box_feat;
};

Tensor backbone_forward(const Backbone& b, const Tensor& images);
HeadOutput single_branch_head(const Tensor& features, const SingleBranchParams& p, int num_classes);
HeadOutput multi_branch_head(const Tensor& features, const MultiBranchParams& p,
                             const std::optional<MsilConfig>& msil);

class Detector {
public:
    Detector(ModelConfig cfg, std::uint64_t seed);

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] HeadOutput forward(const Tensor& images) const;

    // Parameters that influence the output (what the optimizer updates).
    [[nodiscard]] ParamList parameters() const;
    // Everything the model owns, including MSIL layers disabled by the config.
    [[nodiscard]] ParamList all_parameters() const;
    [[nodiscard]] std::size_t parameter_count() const { return count_elements(parameters()); }

    Backbone& backbone() { return backbone_; }
    MultiBranchParams& multi() { return multi_; }
    SingleBranchParams& single() { return single_; }
    [[nodiscard]] const Backbone& backbone() const { return backbone_; }
    [[nodiscard]] const MultiBranchParams& multi() const { return multi_; }
    [[nodiscard]] const SingleBranchParams& single() const { return single_; }

private:
    ModelConfig cfg_;
    Backbone backbone_;
    SingleBranchParams single_;
    MultiBranchParams multi_;
};

struct Detection {
    int label = 1;
    double score = 0;  // class probability × centerness
    Box box;
    double centerness = 0;
    int location = 0;  // row-major grid index

    friend bool operator==(const Detection&, const Detection&) = default;
};

struct DecodeOptions {
    double score_thresh = 0.05;
    double iou_thresh = 0.5;
    int stride = kStride;
    int max_detections = 100;
};

// Candidates whose score > score_thresh in strict priority order (score desc,
// location asc, label asc), then greedy per-class NMS (IoU > iou_thresh suppresses).
std::vector<Detection> nms(std::vector<Detection> candidates, double iou_thresh);

// Single-image maps: class probabilities 1×K×H×W, box distances 1×4×H×W,
// centerness probabilities 1×1×H×W.
std::vector<Detection> decode_and_nms(const Tensor& cls_prob, const Tensor& box, const Tensor& ctr_prob,
                                      const DecodeOptions& opts);

// Forward pass plus decoding for every image of the batch.
std::vector<std::vector<Detection>> predict(const Detector& model, const Tensor& images, const DecodeOptions& opts);

struct GroundTruth {
    int label = 1;
    Box box;
};

struct ApResult {
    double ap = 0;    // mean over IoU 0.50:0.05:0.95
    double ap50 = 0;
    double ap75 = 0;
    int classes_evaluated = 0;
};

// 101-point interpolated AP for one class at one IoU threshold, or nullopt when
// the class has no ground truth.
std::optional<double> class_average_precision(const std::vector<std::vector<Detection>>& detections,
                                              const std::vector<std::vector<GroundTruth>>& truth, int label,
                                              double iou_thresh);

// Mean AP over classes that have ground truth at one threshold.
double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<GroundTruth>>& truth, int num_classes,
                              double iou_thresh);

ApResult evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                     const std::vector<std::vector<GroundTruth>>& truth, int num_classes);

std::vector<GroundTruth> ground_truth(const SceneSpec& scene);

struct QuadrantCounts {
    int upper_left = 0, upper_right = 0, lower_left = 0, lower_right = 0;
    [[nodiscard]] int total() const { return upper_left + upper_right + lower_left + lower_right; }
    friend bool operator==(const QuadrantCounts&, const QuadrantCounts&) = default;
};

struct QuadrantStats {
    std::vector<QuadrantCounts> per_class;  // index = label - 1
};

// Object center = box midpoint; a center on a dividing line counts as left/upper.
QuadrantStats quadrant_stats(std::span<const SceneSpec> scenes, int num_classes);

}  // namespace msil
