#include "msil/gradcheck.hpp"

#include <array>
#include <chrono>
#include <map>
#include <optional>
#include <cmath>
#include <random>

#include "msil/detector.hpp"
#include "msil/errors.hpp"
#include "msil/scene.hpp"

namespace msil {

namespace {

std::string loss_label(const LossSpec& s) {
    std::string label = to_string(s.cls) + "+" + to_string(s.reg);
    for (const auto& a : s.aux) label += "+" + to_string(a.kind);
    return label;
}

// Replaces the training initialization with dense random values: zero
// decoders and biases would leave whole gradient paths at exactly zero.
void randomize(ParamList& params, std::uint64_t seed) {
    for (auto& p : params) {
        std::mt19937_64 rng(stream_seed(seed, "gradcheck/" + p.name));
        const Shape s = p.tensor.shape();
        const bool bias = p.name.ends_with(".bias");
        const double bound = bias ? 0.2 : std::sqrt(3.0 / (s.c * s.h * s.w));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : p.tensor.mutable_data()) v = u(rng);
    }
}

struct Evaluation {
    std::uint64_t net_fingerprint = 0;
    std::vector<double> values;
    std::vector<std::uint64_t> loss_fingerprints;
};

}  // namespace

std::vector<LossSpec> default_gradcheck_losses() {
    std::vector<LossSpec> out;
    for (ClsLossKind cls : {ClsLossKind::Focal, ClsLossKind::CrossEntropy}) {
        for (RegLossKind reg : {RegLossKind::Iou, RegLossKind::Giou}) {
            LossSpec s;
            s.cls = cls;
            s.reg = reg;
            s.aux = {{AuxLossKind::CenternessBce, 1.0}};
            out.push_back(s);
        }
    }
    return out;
}

GradcheckOptions gradcheck_options(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.data.size / kStride > 8) {
        throw ConfigError("config key 'data.size': gradcheck needs a grid of at most 8x8, i.e. data.size <= " +
                          std::to_string(8 * kStride));
    }
    GradcheckOptions o;
    o.seed = cfg.seed;
    o.size = cfg.data.size;
    o.channels = cfg.channels;
    o.classes = cfg.data.classes;
    o.batch = cfg.train.batch_size;
    o.min_object_size = cfg.data.min_object_size;
    o.max_object_size = cfg.data.max_object_size;
    o.msil = cfg.msil;
    o.msil.channels = cfg.channels;
    for (LossSpec s : default_gradcheck_losses()) {
        s.focal_alpha = cfg.loss.focal_alpha;
        s.focal_gamma = cfg.loss.focal_gamma;
        s.cls_weight = cfg.loss.cls_weight;
        o.losses.push_back(s);
    }
    return o;
}

bool GradcheckReport::pass() const {
    if (groups.empty()) return false;
    for (const auto& g : groups) {
        if (!g.pass) return false;
    }
    return true;
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<LossSpec> losses = opts.losses.empty() ? default_gradcheck_losses() : opts.losses;
    for (const auto& l : losses) l.validate();

    ModelConfig mc;
    mc.head = HeadKind::MultiBranch;
    mc.channels = opts.channels;
    mc.num_classes = opts.classes;
    mc.msil = opts.msil;
    mc.msil->channels = opts.channels;
    Detector model(mc, opts.seed);
    ParamList params = model.parameters();
    randomize(params, opts.seed);

    DatasetOptions data;
    data.seed = stream_seed(opts.seed, "gradcheck/data");
    data.num_images = opts.batch;
    data.num_classes = opts.classes;
    data.size = opts.size;
    data.min_object_size = opts.min_object_size;
    data.max_object_size = opts.max_object_size;
    const auto samples = generate_dataset(data);
    std::vector<double> pixels;
    std::vector<DenseTargets> targets;
    for (const auto& s : samples) {
        pixels.insert(pixels.end(), s.image.data().begin(), s.image.data().end());
        targets.push_back(assign_targets(s.scene, kStride));
    }
    const Tensor images = Tensor::from_data({opts.batch, 1, opts.size, opts.size}, std::move(pixels));

    // Analytic gradients, one set per loss.
    std::vector<std::vector<std::vector<double>>> analytic(losses.size());
    for (std::size_t l = 0; l < losses.size(); ++l) {
        for (auto& p : params) p.tensor.zero_grad();
        const HeadOutput out = model.forward(images);
        total_loss(out.cls_logits, out.box, out.ctr_logits, targets, losses[l]).total.backward();
        if (opts.corrupt) opts.corrupt(params);
        for (auto& p : params) {
            if (!p.tensor.has_grad()) throw std::logic_error("gradcheck: no gradient reached " + p.name);
            analytic[l].emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        }
    }

    // Perturbed passes run without a tape. Head parameters reuse the backbone
    // features, which they cannot influence.
    NoGradGuard no_grad;
    Tensor cached_features = backbone_forward(model.backbone(), images);
    auto evaluate = [&](bool from_backbone) {
        Evaluation e;
        BranchRecorder rec;
        const Tensor features = from_backbone ? backbone_forward(model.backbone(), images) : cached_features;
        const HeadOutput out = multi_branch_head(features, model.multi(), mc.msil);
        e.net_fingerprint = rec.fingerprint();
        for (const auto& spec : losses) {
            rec.reset();
            e.values.push_back(total_loss(out.cls_logits, out.box, out.ctr_logits, targets, spec).total_value);
            e.loss_fingerprints.push_back(rec.fingerprint());
        }
        return e;
    };
    const Evaluation base_full = evaluate(true);
    const Evaluation base_head = evaluate(false);

    GradcheckReport report;
    for (const auto& l : losses) report.losses.push_back(loss_label(l));
    for (std::size_t g = 0; g < params.size(); ++g) {
        auto& p = params[g];
        const bool in_backbone = p.name.starts_with("backbone.");
        const Evaluation& base = in_backbone ? base_full : base_head;
        GradGroupReport group;
        group.name = p.name;
        group.entries = p.tensor.numel();
        auto values = p.tensor.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            // Fourth-order stencils, largest step first, so the rounding of the
            // loss value stays negligible next to the step. A stencil that
            // straddles a kink is replaced by a one-sided one on the smooth
            // side; failing both, the step halves down to min_step.
            std::map<std::pair<std::size_t, int>, Evaluation> cache;
            auto at = [&](std::size_t level, int k) -> const Evaluation& {
                auto it = cache.find({level, k});
                if (it == cache.end()) {
                    values[i] = original + k * opts.step * std::pow(0.5, static_cast<double>(level));
                    it = cache.emplace(std::pair{level, k}, evaluate(in_backbone)).first;
                    values[i] = original;
                }
                return it->second;
            };
            std::size_t levels = 1;
            while (opts.step * std::pow(0.5, static_cast<double>(levels)) >= opts.min_step * (1 - 1e-9)) ++levels;
            for (std::size_t l = 0; l < losses.size(); ++l) {
                auto smooth = [&](std::size_t level, std::initializer_list<int> ks) {
                    for (int k : ks) {
                        const Evaluation& ev = at(level, k);
                        if (ev.net_fingerprint != base.net_fingerprint ||
                            ev.loss_fingerprints[l] != base.loss_fingerprints[l]) {
                            return false;
                        }
                    }
                    return true;
                };
                auto f = [&](std::size_t level, int k) { return k == 0 ? base.values[l] : at(level, k).values[l]; };
                std::optional<double> numeric;
                for (std::size_t level = 0; level < levels && !numeric; ++level) {
                    const double h = opts.step * std::pow(0.5, static_cast<double>(level));
                    if (smooth(level, {-2, -1, 1, 2})) {
                        numeric = (f(level, -2) - 8.0 * f(level, -1) + 8.0 * f(level, 1) - f(level, 2)) / (12.0 * h);
                    } else {
                        for (int dir : {1, -1}) {
                            if (numeric || !smooth(level, {dir, 2 * dir, 3 * dir, 4 * dir})) continue;
                            numeric = dir *
                                      (-25.0 * f(level, 0) + 48.0 * f(level, dir) - 36.0 * f(level, 2 * dir) +
                                       16.0 * f(level, 3 * dir) - 3.0 * f(level, 4 * dir)) /
                                      (12.0 * h);
                        }
                    }
                }
                if (!numeric) {
                    ++group.skipped_kinks;
                    continue;
                }
                const double a = analytic[l][g][i];
                if (!std::isfinite(*numeric) || !std::isfinite(a)) {
                    throw NumericalError("gradcheck: non-finite gradient for " + p.name);
                }
                const double err = std::abs(a - *numeric) / std::max({std::abs(a), std::abs(*numeric), opts.floor});
                ++group.checked;
                if (err > group.max_rel_error || group.worst_loss.empty()) {
                    group.max_rel_error = err;
                    group.worst_loss = report.losses[l];
                    group.worst_analytic = a;
                    group.worst_numeric = *numeric;
                }
            }
        }
        group.pass = group.checked > 0 && group.max_rel_error <= opts.tolerance;
        report.groups.push_back(std::move(group));
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace msil
