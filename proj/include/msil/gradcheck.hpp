#pragma once

// Central finite-difference verification of every parameter gradient of the
// multi-branch head with MSIL, for each classification/regression loss pair.
//
// An entry whose perturbed passes take a different branch at any non-smooth
// point (ReLU, max-pool argmax, probability clamp, box min/max) than the base
// pass is skipped: the two one-sided slopes disagree there by construction.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msil/config.hpp"
#include "msil/losses.hpp"
#include "msil/msil_head.hpp"
#include "msil/nn.hpp"

namespace msil {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    int size = 32;  // 8×8 grid at stride 4
    int channels = 8;
    int classes = 2;
    int batch = 2;
    int min_object_size = 8;
    int max_object_size = 20;
    MsilConfig msil;
    std::vector<LossSpec> losses;  // empty: focal/CE × IoU/GIoU, each with centerness BCE
    double step = 1e-3;      // first stencil step
    double min_step = 1e-5;  // smallest step tried near kinks
    double tolerance = 1e-4;
    // Denominator floor for the relative error, so gradients that are zero up to
    // rounding do not blow the ratio up.
    double floor = 1e-5;
    // Test hook: runs on the parameters after each analytic backward pass and
    // may tamper with their gradients.
    std::function<void(ParamList&)> corrupt;
};

std::vector<LossSpec> default_gradcheck_losses();

// Grid must be at most 8×8; throws ConfigError otherwise.
GradcheckOptions gradcheck_options(const RunConfig& cfg);

struct GradGroupReport {
    std::string name;
    std::size_t entries = 0;
    std::size_t checked = 0;        // entry × loss pairs compared
    std::size_t skipped_kinks = 0;  // entry × loss pairs skipped
    double max_rel_error = 0;
    std::string worst_loss;
    double worst_analytic = 0;  // the two derivatives at the worst entry
    double worst_numeric = 0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradGroupReport> groups;  // one per parameter tensor, in model order
    std::vector<std::string> losses;
    double seconds = 0;
    [[nodiscard]] bool pass() const;
};

GradcheckReport run_gradcheck(const GradcheckOptions& opts);

}  // namespace msil
