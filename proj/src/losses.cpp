#include "msil/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace msil {

void LossSpec::validate() const {
    if (!(cls_weight > 0.0)) throw std::invalid_argument("loss: classification weight must be > 0");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw std::invalid_argument("loss: focal alpha must be in [0,1]");
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("loss: focal gamma must be >= 0");
    for (const auto& a : aux)
        if (!(a.weight >= 0.0)) throw std::invalid_argument("loss: auxiliary weights must be >= 0");
}

double box_iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
    const double uni = a.area() + b.area() - inter;
    if (a.area() <= 0.0 || !(uni > 0.0)) return 0.0;
    return inter / uni;
}

double box_giou(const Box& a, const Box& b) {
    const double iou = box_iou(a, b);
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
    const double uni = a.area() + b.area() - inter;
    const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                        (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
    if (!(hull > 0.0)) return iou;
    return iou - (hull - uni) / hull;
}

namespace {

double logistic(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

bool clamp_prob(double& p) {
    if (p < kProbEpsilon) {
        p = kProbEpsilon;
        return true;
    }
    if (p > 1.0 - kProbEpsilon) {
        p = 1.0 - kProbEpsilon;
        return true;
    }
    return false;
}

double focal_term(double p, bool positive, double alpha, double gamma) {
    clamp_prob(p);
    if (positive) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

void check_label(std::size_t num_classes, int label) {
    if (label < 0 || static_cast<std::size_t>(label) > num_classes) {
        throw std::out_of_range("class label " + std::to_string(label) + " outside [0," +
                                std::to_string(num_classes) + "]");
    }
}

}  // namespace

double focal_loss(std::span<const double> probs, int label, double alpha, double gamma) {
    check_label(probs.size(), label);
    double total = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k)
        total += focal_term(probs[k], label == static_cast<int>(k) + 1, alpha, gamma);
    return total;
}

double binary_cross_entropy(double prob, double target) {
    clamp_prob(prob);
    return -(target * std::log(prob) + (1.0 - target) * std::log(1.0 - prob));
}

double cross_entropy_loss(std::span<const double> probs, int label) {
    check_label(probs.size(), label);
    double total = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k)
        total += binary_cross_entropy(probs[k], label == static_cast<int>(k) + 1 ? 1.0 : 0.0);
    return total;
}

namespace {

// log(sigmoid(x)) without forming 1 - p, which loses all precision once p is
// close to 1.
double log_sigmoid(double x) { return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); }

}  // namespace

LogitLoss focal_from_logit(double logit, bool positive, double alpha, double gamma) {
    const double p = logistic(logit);
    double pc = p;
    const bool clamped = clamp_prob(pc);
    BranchRecorder::note(clamped);
    LogitLoss out;
    if (clamped) {
        out.value = positive ? -alpha * std::pow(1.0 - pc, gamma) * std::log(pc)
                             : -(1.0 - alpha) * std::pow(pc, gamma) * std::log(1.0 - pc);
        return out;
    }
    const double q = logistic(-logit);  // 1 - p
    const double log_p = log_sigmoid(logit);
    const double log_q = log_sigmoid(-logit);
    if (positive) {
        out.value = -alpha * std::pow(q, gamma) * log_p;
        out.dlogit = alpha * gamma * std::pow(q, gamma) * p * log_p - alpha * std::pow(q, gamma + 1.0);
    } else {
        out.value = -(1.0 - alpha) * std::pow(p, gamma) * log_q;
        out.dlogit = (1.0 - alpha) * (std::pow(p, gamma + 1.0) - gamma * std::pow(p, gamma) * q * log_q);
    }
    return out;
}

LogitLoss bce_from_logit(double logit, double target) {
    const double p = logistic(logit);
    double pc = p;
    const bool clamped = clamp_prob(pc);
    BranchRecorder::note(clamped);
    if (clamped) return {-(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc)), 0.0};
    return {-(target * log_sigmoid(logit) + (1.0 - target) * log_sigmoid(-logit)), p - target};
}

namespace {

Box ltrb_to_box(const Ltrb& d) { return {-d.l, -d.t, d.r, d.b}; }

// d/dv of min(v, c) and max(v, c); ties get zero slope.
double dmin(double v, double c) { return v < c ? 1.0 : 0.0; }
double dmax(double v, double c) { return v > c ? 1.0 : 0.0; }

}  // namespace

BoxLoss box_loss(const Ltrb& p, const Ltrb& t, RegLossKind kind) {
    const double pw = p.l + p.r, ph = p.t + p.b;
    BoxLoss out;
    if (!(pw > 0.0 && ph > 0.0)) {
        // Degenerate prediction: IoU counts as 0, no gradient.
        const Box pb = ltrb_to_box(p), tb = ltrb_to_box(t);
        out.value = kind == RegLossKind::Iou ? 1.0 - box_iou(pb, tb) : 1.0 - box_giou(pb, tb);
        return out;
    }
    BranchRecorder::note((p.l < t.l) | (p.t < t.t) << 1 | (p.r < t.r) << 2 | (p.b < t.b) << 3 |
                         (p.l > t.l) << 4 | (p.t > t.t) << 5 | (p.r > t.r) << 6 | (p.b > t.b) << 7);

    const double iw = std::min(p.l, t.l) + std::min(p.r, t.r);
    const double ih = std::min(p.t, t.t) + std::min(p.b, t.b);
    const bool overlap = iw > 0.0 && ih > 0.0;
    const double inter = overlap ? iw * ih : 0.0;
    const double area_p = pw * ph;
    const double area_t = (t.l + t.r) * (t.t + t.b);
    const double uni = area_p + area_t - inter;
    const double iou = inter / uni;

    const std::array<double, 4> d_inter =
        overlap ? std::array<double, 4>{ih * dmin(p.l, t.l), iw * dmin(p.t, t.t), ih * dmin(p.r, t.r),
                                        iw * dmin(p.b, t.b)}
                : std::array<double, 4>{};
    const std::array<double, 4> d_area{ph, pw, ph, pw};
    std::array<double, 4> d_uni{}, d_iou{};
    for (int i = 0; i < 4; ++i) {
        d_uni[i] = d_area[i] - d_inter[i];
        d_iou[i] = (d_inter[i] * uni - inter * d_uni[i]) / (uni * uni);
    }

    if (kind == RegLossKind::Iou) {
        out.value = 1.0 - iou;
        for (int i = 0; i < 4; ++i) out.grad[i] = -d_iou[i];
        return out;
    }

    const double cw = std::max(p.l, t.l) + std::max(p.r, t.r);
    const double ch = std::max(p.t, t.t) + std::max(p.b, t.b);
    const double hull = cw * ch;
    const std::array<double, 4> d_hull{ch * dmax(p.l, t.l), cw * dmax(p.t, t.t), ch * dmax(p.r, t.r),
                                       cw * dmax(p.b, t.b)};
    // GIoU = IoU - 1 + U/C
    out.value = 1.0 - (iou - 1.0 + uni / hull);
    for (int i = 0; i < 4; ++i) {
        const double d_ratio = (d_uni[i] * hull - uni * d_hull[i]) / (hull * hull);
        out.grad[i] = -(d_iou[i] + d_ratio);
    }
    return out;
}

double iou_loss(const Ltrb& pred, const Ltrb& target) { return box_loss(pred, target, RegLossKind::Iou).value; }

double giou_loss(const Ltrb& pred, const Ltrb& target) {
    return box_loss(pred, target, RegLossKind::Giou).value;
}

std::optional<double> centerness_target(double l, double t, double r, double b) {
    if (!(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0)) return std::nullopt;
    return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

int DenseTargets::num_positive() const {
    int n = 0;
    for (int l : labels) n += l > 0;
    return n;
}

Ltrb DenseTargets::box_at(std::size_t cell) const {
    const std::size_t plane = cells();
    return {boxes[cell], boxes[plane + cell], boxes[2 * plane + cell], boxes[3 * plane + cell]};
}

DenseTargets DenseTargets::background(int height, int width) {
    DenseTargets t;
    t.height = height;
    t.width = width;
    t.labels.assign(t.cells(), 0);
    t.boxes.assign(4 * t.cells(), 0.0);
    t.centerness.assign(t.cells(), 0.0);
    return t;
}

double combine_loss_terms(double reg, double cls, double aux, double lambda) {
    return reg + lambda * cls + aux;
}

LossBreakdown total_loss(const Tensor& cls_logits, const Tensor& box, const Tensor& ctr_logits,
                         std::span<const DenseTargets> targets, const LossSpec& spec) {
    const Shape sc = cls_logits.shape();
    const Shape sb = box.shape();
    const Shape su = ctr_logits.shape();
    if (sb != Shape{sc.n, 4, sc.h, sc.w} || su != Shape{sc.n, 1, sc.h, sc.w}) {
        throw ShapeError("total_loss: prediction maps disagree: cls " + sc.str() + ", box " + sb.str() +
                         ", centerness " + su.str());
    }
    if (targets.size() != static_cast<std::size_t>(sc.n)) {
        throw ShapeError("total_loss: " + std::to_string(targets.size()) + " targets for batch of " +
                         std::to_string(sc.n));
    }
    for (const auto& t : targets) {
        if (t.height != sc.h || t.width != sc.w) {
            throw ShapeError("total_loss: target grid " + std::to_string(t.height) + "x" +
                             std::to_string(t.width) + " vs prediction " + sc.str());
        }
    }

    const int K = sc.c;
    const std::size_t plane = sc.plane();
    int num_pos = 0;
    for (const auto& t : targets) num_pos += t.num_positive();
    const double norm = 1.0 / std::max(num_pos, 1);

    const auto xc = cls_logits.data();
    const auto xb = box.data();
    const auto xu = ctr_logits.data();
    std::vector<double> g_cls(xc.size(), 0.0), g_box(xb.size(), 0.0), g_ctr(xu.size(), 0.0);
    // Extended-precision accumulators keep the rounding of the summed loss near
    // one ulp of the final value; a finite-difference check resolves gradients
    // only down to that noise level.
    long double cls_sum = 0.0L, reg_sum = 0.0L, aux_sum = 0.0L;

    for (int n = 0; n < sc.n; ++n) {
        const DenseTargets& tg = targets[n];
        for (int k = 0; k < K; ++k) {
            const std::size_t base = (static_cast<std::size_t>(n) * K + k) * plane;
            for (std::size_t cell = 0; cell < plane; ++cell) {
                const bool positive = tg.labels[cell] == k + 1;
                const LogitLoss l = spec.cls == ClsLossKind::Focal
                                        ? focal_from_logit(xc[base + cell], positive, spec.focal_alpha, spec.focal_gamma)
                                        : bce_from_logit(xc[base + cell], positive ? 1.0 : 0.0);
                cls_sum += l.value;
                g_cls[base + cell] = spec.cls_weight * norm * l.dlogit;
            }
        }
        for (std::size_t cell = 0; cell < plane; ++cell) {
            if (tg.labels[cell] <= 0) continue;
            const std::size_t bbase = static_cast<std::size_t>(n) * 4 * plane + cell;
            const Ltrb pred{xb[bbase], xb[bbase + plane], xb[bbase + 2 * plane], xb[bbase + 3 * plane]};
            const BoxLoss bl = box_loss(pred, tg.box_at(cell), spec.reg);
            reg_sum += bl.value;
            for (int i = 0; i < 4; ++i) g_box[bbase + i * plane] = norm * bl.grad[i];

            const std::size_t ubase = static_cast<std::size_t>(n) * plane + cell;
            for (const AuxLoss& a : spec.aux) {
                // CenternessBce is the only auxiliary kind.
                const LogitLoss l = bce_from_logit(xu[ubase], tg.centerness[cell]);
                aux_sum += a.weight * l.value;
                g_ctr[ubase] += a.weight * norm * l.dlogit;
            }
        }
    }

    LossBreakdown out;
    out.num_positive = num_pos;
    out.cls = static_cast<double>(cls_sum * norm);
    out.reg = static_cast<double>(reg_sum * norm);
    out.aux = static_cast<double>(aux_sum * norm);
    out.total_value = combine_loss_terms(out.reg, out.cls, out.aux, spec.cls_weight);

    auto C = cls_logits.impl();
    auto B = box.impl();
    auto U = ctr_logits.impl();
    out.total = record_op(
        "total_loss", {1, 1, 1, 1}, {out.total_value}, {cls_logits, box, ctr_logits},
        [C, B, U, g_cls = std::move(g_cls), g_box = std::move(g_box), g_ctr = std::move(g_ctr)](
            std::span<const double> g) {
            const auto add_into = [&](const std::shared_ptr<detail::TensorImpl>& t, const std::vector<double>& src) {
                if (!t->requires_grad) return;
                t->ensure_grad();
                for (std::size_t i = 0; i < src.size(); ++i) t->grad[i] += g[0] * src[i];
            };
            add_into(C, g_cls);
            add_into(B, g_box);
            add_into(U, g_ctr);
        });
    return out;
}

std::string to_string(ClsLossKind k) { return k == ClsLossKind::Focal ? "focal" : "ce"; }
std::string to_string(RegLossKind k) { return k == RegLossKind::Iou ? "iou" : "giou"; }
std::string to_string(AuxLossKind) { return "centerness"; }

}  // namespace msil
