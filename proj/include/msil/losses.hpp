#pragma once

// Dense anchor-free detection losses:
//
//   L     = L_reg + lambda * L_cls + L_aux
//   L_cls = 1/N_pos * sum over all locations of the per-location class loss
//   L_reg = 1/N_pos * sum over positives of the box loss
//   L_aux = sum_i lambda_i * 1/N_pos * sum over positives of aux loss i
//
// N_pos is clamped to at least 1 for L_cls; with no positives L_reg = L_aux = 0.
// Probabilities are clamped to [kProbEpsilon, 1 - kProbEpsilon] before taking
// logs; a clamped probability contributes no gradient.

#include <algorithm>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msil/tensor.hpp"

namespace msil {

inline constexpr double kProbEpsilon = 1e-7;

enum class ClsLossKind { Focal, CrossEntropy };
enum class RegLossKind { Iou, Giou };
enum class AuxLossKind { CenternessBce };

struct AuxLoss {
    AuxLossKind kind = AuxLossKind::CenternessBce;
    double weight = 1.0;

    friend bool operator==(const AuxLoss&, const AuxLoss&) = default;
};

struct LossSpec {
    ClsLossKind cls = ClsLossKind::Focal;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    RegLossKind reg = RegLossKind::Giou;
    std::vector<AuxLoss> aux{{AuxLossKind::CenternessBce, 1.0}};
    double cls_weight = 1.0;  // lambda

    void validate() const;
    friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

// Corner-form box.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    [[nodiscard]] double width() const { return x2 - x1; }
    [[nodiscard]] double height() const { return y2 - y1; }
    [[nodiscard]] double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    friend bool operator==(const Box&, const Box&) = default;
};

// Distances from a location to the left, top, right and bottom box sides.
struct Ltrb {
    double l = 0, t = 0, r = 0, b = 0;
};

// A box with zero area (or zero union) has IoU 0 and no gradient.
double box_iou(const Box& a, const Box& b);
double box_giou(const Box& a, const Box& b);

// One-vs-all sigmoid losses over K class probabilities; label 0 = background,
// label k in [1,K] marks class k positive.
double focal_loss(std::span<const double> probs, int label, double alpha, double gamma);
double cross_entropy_loss(std::span<const double> probs, int label);
double binary_cross_entropy(double prob, double target);

double iou_loss(const Ltrb& pred, const Ltrb& target);
double giou_loss(const Ltrb& pred, const Ltrb& target);

// sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); nullopt unless all four are positive.
std::optional<double> centerness_target(double l, double t, double r, double b);

// Value and derivative w.r.t. the logit of one sigmoid output.
struct LogitLoss {
    double value = 0;
    double dlogit = 0;
};

LogitLoss focal_from_logit(double logit, bool positive, double alpha, double gamma);
LogitLoss bce_from_logit(double logit, double target);

struct BoxLoss {
    double value = 0;
    std::array<double, 4> grad{};  // d/d(l,t,r,b) of the prediction
};

BoxLoss box_loss(const Ltrb& pred, const Ltrb& target, RegLossKind kind);

// Per-image dense targets on an H×W grid.
struct DenseTargets {
    int height = 0;
    int width = 0;
    std::vector<int> labels;         // H*W, 0 = background
    std::vector<double> boxes;       // 4×H×W planes (l, t, r, b), grid units
    std::vector<double> centerness;  // H*W, defined where labels > 0

    [[nodiscard]] std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
    [[nodiscard]] int num_positive() const;
    [[nodiscard]] Ltrb box_at(std::size_t cell) const;

    static DenseTargets background(int height, int width);
};

struct LossBreakdown {
    Tensor total;  // differentiable scalar
    double total_value = 0;
    double cls = 0;
    double reg = 0;
    double aux = 0;
    int num_positive = 0;
};

// reg + lambda * cls + aux
double combine_loss_terms(double reg, double cls, double aux, double lambda);

// cls_logits N×K×H×W, box N×4×H×W (positive distances), ctr_logits N×1×H×W;
// one DenseTargets per batch item.
LossBreakdown total_loss(const Tensor& cls_logits, const Tensor& box, const Tensor& ctr_logits,
                         std::span<const DenseTargets> targets, const LossSpec& spec);

std::string to_string(ClsLossKind k);
std::string to_string(RegLossKind k);
std::string to_string(AuxLossKind k);

}  // namespace msil
