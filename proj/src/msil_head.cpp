#include "msil/msil_head.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "msil/errors.hpp"
#include "msil/ops.hpp"

namespace msil {

void MsilConfig::validate() const {
    if (channels <= 0) throw std::invalid_argument("msil: channels must be positive");
    if (cam_reduction <= 0 || channels % cam_reduction != 0) {
        throw std::invalid_argument("msil: cam_reduction must divide channels (" +
                                    std::to_string(channels) + " / " + std::to_string(cam_reduction) + ")");
    }
}

MsilParams MsilParams::create(const MsilConfig& cfg) {
    cfg.validate();
    const int c = cfg.channels;
    MsilParams p;
    p.enc = Conv2d::create(c, c, 3);
    p.enc2_reg = Conv2d::create(c, c, 3);
    p.conv_reg = Conv2d::create(c, c, 3);
    if (cfg.share_encoder_stack) {
        p.enc2_cls = p.enc2_reg;
        p.conv_cls = p.conv_reg;
    } else {
        p.enc2_cls = Conv2d::create(c, c, 3);
        p.conv_cls = Conv2d::create(c, c, 3);
    }
    p.fusion = Conv2d::create(2 * c, c, 1);
    p.cam_cls = ChannelMlp::create(c, cfg.cam_reduction);
    p.cam_reg = ChannelMlp::create(c, cfg.cam_reduction);
    p.dec_cls = Conv2d::create(c, c, 1);
    p.dec_reg = Conv2d::create(c, c, 1);
    p.dec_shared = Conv2d::create(c, c, 1);
    return p;
}

namespace {

void collect_alignment(const MsilParams& p, const MsilConfig& cfg, const std::string& prefix, ParamList& out) {
    p.enc.collect(prefix + ".enc", out);
    if (cfg.share_encoder_stack) {
        p.enc2_reg.collect(prefix + ".enc2", out);
        p.conv_reg.collect(prefix + ".conv", out);
    } else {
        p.enc2_reg.collect(prefix + ".enc2_reg", out);
        p.enc2_cls.collect(prefix + ".enc2_cls", out);
        p.conv_reg.collect(prefix + ".conv_reg", out);
        p.conv_cls.collect(prefix + ".conv_cls", out);
    }
}

}  // namespace

ParamList MsilParams::parameters(const MsilConfig& cfg, const std::string& prefix) const {
    ParamList out;
    if (!cfg.any_enhancement()) return out;
    if (cfg.enable_alignment) collect_alignment(*this, cfg, prefix, out);
    fusion.collect(prefix + ".fusion", out);
    if (cfg.enable_separation) {
        if (cfg.apply_to_cls) {
            cam_cls.collect(prefix + ".cam_cls", out);
            dec_cls.collect(prefix + ".dec_cls", out);
        }
        if (cfg.apply_to_reg) {
            cam_reg.collect(prefix + ".cam_reg", out);
            dec_reg.collect(prefix + ".dec_reg", out);
        }
    } else {
        dec_shared.collect(prefix + ".dec_shared", out);
    }
    return out;
}

ParamList MsilParams::all_parameters(const MsilConfig& cfg, const std::string& prefix) const {
    ParamList out;
    collect_alignment(*this, cfg, prefix, out);
    fusion.collect(prefix + ".fusion", out);
    cam_cls.collect(prefix + ".cam_cls", out);
    dec_cls.collect(prefix + ".dec_cls", out);
    cam_reg.collect(prefix + ".cam_reg", out);
    dec_reg.collect(prefix + ".dec_reg", out);
    dec_shared.collect(prefix + ".dec_shared", out);
    return out;
}

void init_msil_params(MsilParams& params, const MsilConfig& cfg, std::uint64_t seed, const std::string& prefix) {
    ParamList all = params.all_parameters(cfg, prefix);
    init_params(all, seed);
    for (Conv2d* dec : {&params.dec_cls, &params.dec_reg, &params.dec_shared}) {
        std::ranges::fill(dec->weight.mutable_data(), 0.0);
        std::ranges::fill(dec->bias.mutable_data(), 0.0);
    }
}

namespace {

Tensor align_branch(const Tensor& f, const Conv2d& enc, const Conv2d& enc2, const Conv2d& conv) {
    const Tensor residual = add(f, relu(conv2d_forward(enc, f)));
    return conv2d_forward(conv, relu(conv2d_forward(enc2, residual)));
}

Tensor attention(const Tensor& f_fusion, const ChannelMlp& mlp, const Conv2d& dec) {
    return sigmoid(conv2d_forward(dec, mul(f_fusion, cam(f_fusion, mlp))));
}

}  // namespace

BranchPair semantic_align(const Tensor& f_reg, const Tensor& f_cls, const MsilParams& p, const MsilConfig& cfg) {
    check_same_shape(f_reg, f_cls, "semantic_align");
    if (!cfg.enable_alignment) return {f_reg, f_cls};
    return {align_branch(f_reg, p.enc, p.enc2_reg, p.conv_reg),
            align_branch(f_cls, p.enc, p.enc2_cls, p.conv_cls)};
}

Tensor semantic_fuse(const Tensor& reg_aligned, const Tensor& cls_aligned, const MsilParams& p) {
    check_same_shape(reg_aligned, cls_aligned, "semantic_fuse");
    return conv2d_forward(p.fusion, concat_channels(reg_aligned, cls_aligned));
}

Tensor cam(const Tensor& f, const ChannelMlp& mlp) {
    return sigmoid(add(channel_mlp_forward(mlp, global_avg_pool(f)),
                       channel_mlp_forward(mlp, global_max_pool(f))));
}

SeparationResult semantic_separate(const Tensor& f_fusion, const Tensor& f_cls, const Tensor& f_reg,
                                   const MsilParams& p, const MsilConfig& cfg) {
    check_same_shape(f_cls, f_reg, "semantic_separate");
    check_same_shape(f_fusion, f_cls, "semantic_separate");
    if (f_cls.shape().c != cfg.channels) {
        throw ShapeError("semantic_separate: features have " + std::to_string(f_cls.shape().c) +
                         " channels, config says " + std::to_string(cfg.channels));
    }
    SeparationResult r{f_cls, f_reg, {}, {}};
    if (cfg.enable_separation) {
        if (cfg.apply_to_cls) r.attn_cls = attention(f_fusion, p.cam_cls, p.dec_cls);
        if (cfg.apply_to_reg) r.attn_reg = attention(f_fusion, p.cam_reg, p.dec_reg);
    } else if (cfg.any_enhancement()) {
        const Tensor shared = sigmoid(conv2d_forward(p.dec_shared, f_fusion));
        if (cfg.apply_to_cls) r.attn_cls = shared;
        if (cfg.apply_to_reg) r.attn_reg = shared;
    }
    if (r.attn_cls.defined()) r.class_feat = mul(f_cls, r.attn_cls);
    if (r.attn_reg.defined()) r.box_feat = mul(f_reg, r.attn_reg);
    return r;
}

SeparationResult msil_forward(const Tensor& f_cls, const Tensor& f_reg, const MsilParams& p,
                              const MsilConfig& cfg) {
    check_same_shape(f_cls, f_reg, "msil_forward");
    if (!cfg.any_enhancement()) return {f_cls, f_reg, {}, {}};
    const BranchPair aligned = semantic_align(f_reg, f_cls, p, cfg);
    const Tensor fused = semantic_fuse(aligned.reg, aligned.cls, p);
    return semantic_separate(fused, f_cls, f_reg, p, cfg);
}

HeatMap export_attention_heatmap(const Tensor& feat) {
    const Shape s = feat.shape();
    if (s.n != 1) throw ShapeError("heat map needs a single image, got " + s.str());
    HeatMap map{s.h, s.w, std::vector<double>(s.plane(), 0.0)};
    const auto d = feat.data();
    for (int c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < s.plane(); ++i) map.values[i] += std::abs(d[c * s.plane() + i]);
    for (double& v : map.values) v /= s.c;
    const auto [lo, hi] = std::ranges::minmax(map.values);
    if (!(hi > lo)) {
        std::ranges::fill(map.values, 0.0);
        return map;
    }
    for (double& v : map.values) v = (v - lo) / (hi - lo);
    return map;
}

void write_pgm(const std::filesystem::path& path, const HeatMap& map) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << map.width << ' ' << map.height << "\n255\n";
    for (double v : map.values) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        os.put(static_cast<char>(byte));
    }
    if (!os) throw IoError("failed writing " + path.string());
}

void write_heatmap_csv(const std::filesystem::path& path, const HeatMap& map) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    char buf[32];
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            std::snprintf(buf, sizeof(buf), "%.17g", map.at(y, x));
            os << (x ? "," : "") << buf;
        }
        os << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
}

std::string heatmap_basename(int image_id, const std::string& branch, const std::string& variant) {
    return std::to_string(image_id) + "_" + branch + "_" + variant;
}

}  // namespace msil
