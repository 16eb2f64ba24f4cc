#pragma once

// Run configuration: line-oriented `key = value` text, `#` starts a comment,
// dotted keys group settings into sections (`msil.apply_to_cls = true`).
// Unknown or repeated keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "msil/detector.hpp"
#include "msil/losses.hpp"
#include "msil/msil_head.hpp"
#include "msil/nn.hpp"
#include "msil/scene.hpp"

namespace msil {

struct DataConfig {
    std::string dir;  // empty: generate from the seed
    int train_images = 400;
    int test_images = 100;
    int classes = 3;
    int size = 64;
    double noise = 0.1;
    int max_objects = 3;
    int min_object_size = 12;
    int max_object_size = 28;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct TrainConfig {
    int epochs = 12;
    int batch_size = 8;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EvalConfig {
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_detections = 100;

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    std::string out_dir = "runs";
    DataConfig data;
    HeadKind head = HeadKind::MultiBranch;
    int channels = 16;
    bool msil_enabled = true;
    MsilConfig msil;  // msil.channels always mirrors `channels`
    LossSpec loss;
    SgdOptions optim;
    TrainConfig train;
    EvalConfig eval;

    // Throws ConfigError naming the offending key.
    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
// Every key, full precision; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);

ModelConfig model_config(const RunConfig& cfg);
DecodeOptions decode_options(const RunConfig& cfg);

enum class Split { Train, Test };
DatasetOptions dataset_options(const RunConfig& cfg, Split split);

}  // namespace msil
