#pragma once

// Multi-semantic interaction between the classification and regression
// branches of a two-branch detection head:
//
//   align     F_x' = conv(enc2(F_x + enc(F_x)))              x in {reg, cls}, enc shared
//   fuse      F_f  = fusion(concat(F_reg', F_cls'))
//   separate  out_x = F_x * sigmoid(dec_x(CAM_x(F_f) * F_f))
//   CAM(F)    = sigmoid(MLP(avg(F)) + MLP(max(F)))
//
// enc and enc2 are conv + ReLU blocks; conv, fusion and the decoders are plain
// convolutions. Every stage can be switched off for ablations.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msil/nn.hpp"

namespace msil {

struct MsilConfig {
    int channels = 16;
    bool enable_alignment = true;
    bool enable_separation = true;
    bool apply_to_cls = true;
    bool apply_to_reg = true;
    bool share_encoder_stack = true;  // enc2/conv shared between branches like enc
    int cam_reduction = 4;

    // False when neither branch is enhanced; the block is then an exact identity.
    [[nodiscard]] bool any_enhancement() const { return apply_to_cls || apply_to_reg; }
    void validate() const;

    friend bool operator==(const MsilConfig&, const MsilConfig&) = default;
};

struct MsilParams {
    Conv2d enc;                  // 3×3, shared by both branches
    Conv2d enc2_reg, enc2_cls;   // 3×3, alias one layer when shared
    Conv2d conv_reg, conv_cls;   // 3×3, alias one layer when shared
    Conv2d fusion;               // 1×1, 2C -> C
    ChannelMlp cam_cls, cam_reg; // never shared
    Conv2d dec_cls, dec_reg;     // 1×1, C -> C
    Conv2d dec_shared;           // 1×1, only used when separation is disabled

    static MsilParams create(const MsilConfig& cfg);

    // Parameters that take part in the forward pass under `cfg`.
    [[nodiscard]] ParamList parameters(const MsilConfig& cfg, const std::string& prefix = "msil") const;
    // Every distinct parameter tensor, whether used or not.
    [[nodiscard]] ParamList all_parameters(const MsilConfig& cfg, const std::string& prefix = "msil") const;
};

// Fan-in uniform everywhere, then the decoders zeroed so attention starts at 0.5.
void init_msil_params(MsilParams& params, const MsilConfig& cfg, std::uint64_t seed,
                      const std::string& prefix = "msil");

struct BranchPair {
    Tensor reg;
    Tensor cls;
};

BranchPair semantic_align(const Tensor& f_reg, const Tensor& f_cls, const MsilParams& p,
                          const MsilConfig& cfg);

Tensor semantic_fuse(const Tensor& reg_aligned, const Tensor& cls_aligned, const MsilParams& p);

// Channel weights N×C×1×1, strictly inside (0,1).
Tensor cam(const Tensor& f, const ChannelMlp& mlp);

struct SeparationResult {
    Tensor class_feat;
    Tensor box_feat;
    Tensor attn_cls;  // undefined when the branch is not enhanced
    Tensor attn_reg;
};

SeparationResult semantic_separate(const Tensor& f_fusion, const Tensor& f_cls, const Tensor& f_reg,
                                   const MsilParams& p, const MsilConfig& cfg);

// align -> fuse -> separate. Returns the inputs themselves when no branch is enhanced.
SeparationResult msil_forward(const Tensor& f_cls, const Tensor& f_reg, const MsilParams& p,
                              const MsilConfig& cfg);

struct HeatMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // row-major, each in [0,1]

    [[nodiscard]] double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Channel mean of |feat| min-max normalized to [0,1]; a constant map yields all zeros.
HeatMap export_attention_heatmap(const Tensor& feat);

// 8-bit binary PGM (P5), value v stored as round(255 v).
void write_pgm(const std::filesystem::path& path, const HeatMap& map);
// One row per grid row, raw values with full precision.
void write_heatmap_csv(const std::filesystem::path& path, const HeatMap& map);

std::string heatmap_basename(int image_id, const std::string& branch, const std::string& variant);

}  // namespace msil
