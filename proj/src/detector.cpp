#include "msil/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "msil/ops.hpp"

namespace msil {

DenseTargets assign_targets(const SceneSpec& scene, int stride) {
    if (stride <= 0 || scene.size % stride != 0) {
        throw std::invalid_argument("assign_targets: stride " + std::to_string(stride) +
                                    " does not divide image size " + std::to_string(scene.size));
    }
    const int grid = scene.size / stride;
    DenseTargets t = DenseTargets::background(grid, grid);
    const std::size_t plane = t.cells();
    for (int y = 0; y < grid; ++y) {
        for (int x = 0; x < grid; ++x) {
            const double cx = (x + 0.5) * stride;
            const double cy = (y + 0.5) * stride;
            int best = -1;
            for (int k = 0; k < static_cast<int>(scene.objects.size()); ++k) {
                const Box& b = scene.objects[k].box;
                if (!(b.x1 < cx && cx < b.x2 && b.y1 < cy && cy < b.y2)) continue;
                if (best < 0 || b.area() < scene.objects[best].box.area()) best = k;
            }
            if (best < 0) continue;
            const Box& b = scene.objects[best].box;
            const double l = (cx - b.x1) / stride, tp = (cy - b.y1) / stride;
            const double r = (b.x2 - cx) / stride, bt = (b.y2 - cy) / stride;
            const std::size_t cell = static_cast<std::size_t>(y) * grid + x;
            t.labels[cell] = scene.objects[best].label;
            t.boxes[cell] = l;
            t.boxes[plane + cell] = tp;
            t.boxes[2 * plane + cell] = r;
            t.boxes[3 * plane + cell] = bt;
            t.centerness[cell] = centerness_target(l, tp, r, bt).value();
        }
    }
    return t;
}

void ModelConfig::validate() const {
    if (in_channels <= 0 || channels <= 0) throw std::invalid_argument("model: channel counts must be positive");
    if (num_classes < 1) throw std::invalid_argument("model: need at least one class");
    if (!(prior_prob > 0.0 && prior_prob < 1.0)) throw std::invalid_argument("model: prior_prob must be in (0,1)");
    if (msil) {
        if (head != HeadKind::MultiBranch) throw std::invalid_argument("model: MSIL needs the multi-branch head");
        if (msil->channels != channels) throw std::invalid_argument("model: MSIL width differs from head width");
        msil->validate();
    }
}

void Backbone::collect(ParamList& out) const {
    conv1.collect("backbone.conv1", out);
    conv2.collect("backbone.conv2", out);
    conv3.collect("backbone.conv3", out);
}

void SingleBranchParams::collect(ParamList& out) const {
    c1.collect("single.c1", out);
    c2.collect("single.c2", out);
    fc.collect("single.fc", out);
}

void MultiBranchParams::collect(ParamList& out) const {
    cls_c1.collect("head.cls_c1", out);
    cls_c2.collect("head.cls_c2", out);
    reg_c1.collect("head.reg_c1", out);
    reg_c2.collect("head.reg_c2", out);
    cls_out.collect("head.cls_out", out);
    ctr_out.collect("head.ctr_out", out);
    reg_out.collect("head.reg_out", out);
}

Tensor backbone_forward(const Backbone& b, const Tensor& images) {
    Tensor x = avg_pool2x2(relu(conv2d_forward(b.conv1, images)));
    x = avg_pool2x2(relu(conv2d_forward(b.conv2, x)));
    return relu(conv2d_forward(b.conv3, x));
}

HeadOutput single_branch_head(const Tensor& features, const SingleBranchParams& p, int num_classes) {
    const Tensor trunk = relu(conv2d_forward(p.c2, relu(conv2d_forward(p.c1, features))));
    const Tensor out = dense_head_forward(p.fc, trunk);
    HeadOutput h;
    h.cls_logits = slice_channels(out, 0, num_classes);
    h.box = exp(slice_channels(out, num_classes, 4));
    h.ctr_logits = slice_channels(out, num_classes + 4, 1);
    return h;
}

HeadOutput multi_branch_head(const Tensor& features, const MultiBranchParams& p,
                             const std::optional<MsilConfig>& msil) {
    HeadOutput h;
    h.f_cls = relu(conv2d_forward(p.cls_c2, relu(conv2d_forward(p.cls_c1, features))));
    h.f_reg = relu(conv2d_forward(p.reg_c2, relu(conv2d_forward(p.reg_c1, features))));
    h.class_feat = h.f_cls;
    h.box_feat = h.f_reg;
    if (msil) {
        if (!p.msil) throw std::logic_error("multi_branch_head: MSIL configured but no MSIL parameters");
        const SeparationResult r = msil_forward(h.f_cls, h.f_reg, *p.msil, *msil);
        h.class_feat = r.class_feat;
        h.box_feat = r.box_feat;
    }
    h.cls_logits = conv2d_forward(p.cls_out, h.class_feat);
    h.ctr_logits = conv2d_forward(p.ctr_out, h.class_feat);
    h.box = exp(conv2d_forward(p.reg_out, h.box_feat));
    return h;
}

Detector::Detector(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int C = cfg_.channels;
    const int mid = std::max(4, C / 2);
    backbone_ = {Conv2d::create(cfg_.in_channels, mid, 3), Conv2d::create(mid, C, 3), Conv2d::create(C, C, 3)};
    ParamList params;
    backbone_.collect(params);
    if (cfg_.head == HeadKind::SingleBranch) {
        single_ = {Conv2d::create(C, C, 3), Conv2d::create(C, C, 3), DenseHead::create(C, cfg_.num_classes + 5)};
        single_.collect(params);
    } else {
        multi_.cls_c1 = Conv2d::create(C, C, 3);
        multi_.cls_c2 = Conv2d::create(C, C, 3);
        multi_.reg_c1 = Conv2d::create(C, C, 3);
        multi_.reg_c2 = Conv2d::create(C, C, 3);
        multi_.cls_out = Conv2d::create(C, cfg_.num_classes, 3);
        multi_.ctr_out = Conv2d::create(C, 1, 3);
        multi_.reg_out = Conv2d::create(C, 4, 3);
        multi_.collect(params);
    }
    init_params(params, seed);

    const double prior_bias = -std::log((1.0 - cfg_.prior_prob) / cfg_.prior_prob);
    if (cfg_.head == HeadKind::SingleBranch) {
        auto bias = single_.fc.bias.mutable_data();
        std::fill(bias.begin(), bias.begin() + cfg_.num_classes, prior_bias);
    } else {
        std::ranges::fill(multi_.cls_out.bias.mutable_data(), prior_bias);
        if (cfg_.msil) {
            multi_.msil = MsilParams::create(*cfg_.msil);
            init_msil_params(*multi_.msil, *cfg_.msil, seed);
        }
    }
}

HeadOutput Detector::forward(const Tensor& images) const {
    const Tensor features = backbone_forward(backbone_, images);
    if (cfg_.head == HeadKind::SingleBranch) return single_branch_head(features, single_, cfg_.num_classes);
    return multi_branch_head(features, multi_, cfg_.msil);
}

ParamList Detector::parameters() const {
    ParamList out;
    backbone_.collect(out);
    if (cfg_.head == HeadKind::SingleBranch) {
        single_.collect(out);
        return out;
    }
    multi_.collect(out);
    if (cfg_.msil && multi_.msil) {
        for (auto& p : multi_.msil->parameters(*cfg_.msil)) out.push_back(std::move(p));
    }
    return out;
}

ParamList Detector::all_parameters() const {
    ParamList out;
    backbone_.collect(out);
    if (cfg_.head == HeadKind::SingleBranch) {
        single_.collect(out);
        return out;
    }
    multi_.collect(out);
    if (cfg_.msil && multi_.msil) {
        for (auto& p : multi_.msil->all_parameters(*cfg_.msil)) out.push_back(std::move(p));
    }
    return out;
}

namespace {

bool higher_priority(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.location != b.location) return a.location < b.location;
    return a.label < b.label;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> candidates, double iou_thresh) {
    std::sort(candidates.begin(), candidates.end(), higher_priority);
    std::vector<Detection> kept;
    for (const auto& d : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.label == d.label && box_iou(k.box, d.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<Detection> decode_and_nms(const Tensor& cls_prob, const Tensor& box, const Tensor& ctr_prob,
                                      const DecodeOptions& opts) {
    const Shape sc = cls_prob.shape();
    if (sc.n != 1 || box.shape() != Shape{1, 4, sc.h, sc.w} || ctr_prob.shape() != Shape{1, 1, sc.h, sc.w}) {
        throw ShapeError("decode_and_nms: maps disagree: " + sc.str() + ", " + box.shape().str() + ", " +
                         ctr_prob.shape().str());
    }
    const std::size_t plane = sc.plane();
    const auto pc = cls_prob.data();
    const auto pb = box.data();
    const auto pu = ctr_prob.data();
    const double s = opts.stride;
    std::vector<Detection> candidates;
    for (std::size_t cell = 0; cell < plane; ++cell) {
        const double cx = (static_cast<double>(cell % sc.w) + 0.5) * s;
        const double cy = (static_cast<double>(cell / sc.w) + 0.5) * s;
        const Box decoded{cx - pb[cell] * s, cy - pb[plane + cell] * s, cx + pb[2 * plane + cell] * s,
                          cy + pb[3 * plane + cell] * s};
        for (int k = 0; k < sc.c; ++k) {
            const double score = pc[k * plane + cell] * pu[cell];
            if (!(score > opts.score_thresh)) continue;
            candidates.push_back({k + 1, score, decoded, pu[cell], static_cast<int>(cell)});
        }
    }
    auto kept = nms(std::move(candidates), opts.iou_thresh);
    if (static_cast<int>(kept.size()) > opts.max_detections) kept.resize(opts.max_detections);
    return kept;
}

namespace {

Tensor batch_item(const Tensor& t, int n) {
    const Shape s = t.shape();
    const std::size_t block = static_cast<std::size_t>(s.c) * s.plane();
    const auto d = t.data();
    return Tensor::from_data({1, s.c, s.h, s.w}, std::vector<double>(d.begin() + n * block, d.begin() + (n + 1) * block));
}

}  // namespace

std::vector<std::vector<Detection>> predict(const Detector& model, const Tensor& images, const DecodeOptions& opts) {
    NoGradGuard no_grad;
    const HeadOutput out = model.forward(images);
    const Tensor cls = sigmoid(out.cls_logits);
    const Tensor ctr = sigmoid(out.ctr_logits);
    std::vector<std::vector<Detection>> result;
    for (int n = 0; n < images.shape().n; ++n) {
        result.push_back(decode_and_nms(batch_item(cls, n), batch_item(out.box, n), batch_item(ctr, n), opts));
    }
    return result;
}

std::vector<GroundTruth> ground_truth(const SceneSpec& scene) {
    std::vector<GroundTruth> out;
    for (const auto& o : scene.objects) out.push_back({o.label, o.box});
    return out;
}

std::optional<double> class_average_precision(const std::vector<std::vector<Detection>>& detections,
                                              const std::vector<std::vector<GroundTruth>>& truth, int label,
                                              double iou_thresh) {
    if (detections.size() != truth.size()) {
        throw std::invalid_argument("evaluate_ap: " + std::to_string(detections.size()) + " detection lists for " +
                                    std::to_string(truth.size()) + " images");
    }
    int num_truth = 0;
    for (const auto& img : truth)
        for (const auto& g : img) num_truth += g.label == label;
    if (num_truth == 0) return std::nullopt;

    struct Ref {
        double score;
        std::size_t image;
        std::size_t index;
    };
    std::vector<Ref> order;
    for (std::size_t i = 0; i < detections.size(); ++i)
        for (std::size_t j = 0; j < detections[i].size(); ++j)
            if (detections[i][j].label == label) order.push_back({detections[i][j].score, i, j});
    std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> taken(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) taken[i].assign(truth[i].size(), false);

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Ref& r : order) {
        const Box& box = detections[r.image][r.index].box;
        int best = -1;
        double best_iou = iou_thresh;
        for (std::size_t g = 0; g < truth[r.image].size(); ++g) {
            const GroundTruth& gt = truth[r.image][g];
            if (gt.label != label || taken[r.image][g]) continue;
            const double iou = box_iou(box, gt.box);
            if (iou >= best_iou) {
                // Strictly better IoU replaces; the first one reaching the threshold wins ties.
                if (best < 0 || iou > best_iou) {
                    best = static_cast<int>(g);
                    best_iou = iou;
                }
            }
        }
        if (best >= 0) {
            taken[r.image][best] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / num_truth);
    }
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[i] = std::max(precision[i], precision[i + 1]);

    double total = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double level = k / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) total += precision[it - recall.begin()];
    }
    return total / 101.0;
}

double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<GroundTruth>>& truth, int num_classes,
                              double iou_thresh) {
    double sum = 0.0;
    int n = 0;
    for (int label = 1; label <= num_classes; ++label) {
        if (auto ap = class_average_precision(detections, truth, label, iou_thresh)) {
            sum += *ap;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

ApResult evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                     const std::vector<std::vector<GroundTruth>>& truth, int num_classes) {
    ApResult r;
    for (int label = 1; label <= num_classes; ++label) {
        if (class_average_precision(detections, truth, label, 0.5)) ++r.classes_evaluated;
    }
    double sum = 0.0;
    for (int k = 0; k < 10; ++k) {
        const double thr = 0.5 + 0.05 * k;
        const double m = mean_average_precision(detections, truth, num_classes, thr);
        sum += m;
        if (k == 0) r.ap50 = m;
        if (k == 5) r.ap75 = m;
    }
    r.ap = sum / 10.0;
    return r;
}

QuadrantStats quadrant_stats(std::span<const SceneSpec> scenes, int num_classes) {
    QuadrantStats stats;
    stats.per_class.assign(num_classes, {});
    for (const auto& scene : scenes) {
        const double mid = scene.size / 2.0;
        for (const auto& o : scene.objects) {
            if (o.label < 1 || o.label > num_classes) {
                throw std::out_of_range("quadrant_stats: label " + std::to_string(o.label) + " outside [1," +
                                        std::to_string(num_classes) + "]");
            }
            const double cx = (o.box.x1 + o.box.x2) / 2.0;
            const double cy = (o.box.y1 + o.box.y2) / 2.0;
            QuadrantCounts& q = stats.per_class[o.label - 1];
            const bool left = cx <= mid;
            const bool upper = cy <= mid;
            if (upper && left) ++q.upper_left;
            else if (upper) ++q.upper_right;
            else if (left) ++q.lower_left;
            else ++q.lower_right;
        }
    }
    return stats;
}

}  // namespace msil
