#pragma once

// Random dense loss instances shared by the loss tests and the acceptance run.

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "msil/losses.hpp"
#include "oracles.hpp"

namespace oracle {

using msil::AuxLossKind;
using msil::ClsLossKind;
using msil::DenseTargets;
using msil::LossSpec;
using msil::RegLossKind;
using msil::Tensor;

struct Instance {
    Tensor cls, box, ctr;
    std::vector<DenseTargets> targets;
};

// Random predictions and targets on an N×K×H×W grid. Predicted box sides are
// kept at least `margin` away from the target sides so min/max never tie.
inline Instance random_instance(std::mt19937_64& rng, int n, int k, int h, int w, double pos_frac = 0.4,
                         double margin = 0.05) {
    std::uniform_real_distribution<double> u(0, 1);
    Instance in;
    in.cls = oracle::random_tensor({n, k, h, w}, rng, -3, 3, true);
    in.ctr = oracle::random_tensor({n, 1, h, w}, rng, -3, 3, true);
    std::vector<double> box(static_cast<std::size_t>(n) * 4 * h * w);
    for (int b = 0; b < n; ++b) {
        DenseTargets t = DenseTargets::background(h, w);
        for (std::size_t cell = 0; cell < t.cells(); ++cell) {
            std::array<double, 4> tb{};
            for (double& v : tb) v = 0.3 + 3 * u(rng);
            for (int i = 0; i < 4; ++i) {
                double p = 0.3 + 3 * u(rng);
                if (std::abs(p - tb[i]) < margin) p = tb[i] + (p < tb[i] ? -margin : margin);
                box[(static_cast<std::size_t>(b) * 4 + i) * t.cells() + cell] = p;
            }
            if (u(rng) >= pos_frac) continue;
            t.labels[cell] = 1 + static_cast<int>(u(rng) * k);
            for (int i = 0; i < 4; ++i) t.boxes[i * t.cells() + cell] = tb[i];
            t.centerness[cell] = *msil::centerness_target(tb[0], tb[1], tb[2], tb[3]);
        }
        in.targets.push_back(std::move(t));
    }
    in.box = Tensor::from_data({n, 4, h, w}, std::move(box), true);
    return in;
}

inline LossSpec spec_of(ClsLossKind c, RegLossKind r, double lambda = 1.0, double aux_w = 1.0) {
    LossSpec s;
    s.cls = c;
    s.reg = r;
    s.cls_weight = lambda;
    s.aux = {{AuxLossKind::CenternessBce, aux_w}};
    return s;
}

inline const std::vector<LossSpec>& all_specs() {
    static const std::vector<LossSpec> specs{
        spec_of(ClsLossKind::Focal, RegLossKind::Giou), spec_of(ClsLossKind::Focal, RegLossKind::Iou),
        spec_of(ClsLossKind::CrossEntropy, RegLossKind::Giou, 0.7, 0.5),
        spec_of(ClsLossKind::CrossEntropy, RegLossKind::Iou, 2.0, 1.5)};
    return specs;
}

}  // namespace oracle
