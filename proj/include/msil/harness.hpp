#pragma once

// Training, evaluation and the experiment commands behind the `msil` tool.
// Every command writes into a fresh directory under the configured output
// root, so earlier results are never touched.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msil/config.hpp"
#include "msil/detector.hpp"
#include "msil/scene.hpp"

namespace msil {

struct Datasets {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

// Loads `<data.dir>/train` and `<data.dir>/test` when data.dir is set,
// otherwise generates both splits from the config seed.
Datasets prepare_datasets(const RunConfig& cfg);

// Stacks the images of `samples[indices]` into an N×1×S×S batch.
Tensor stack_images(const std::vector<Sample>& samples, std::span<const int> indices);

int steps_per_epoch(int num_train, int batch_size);

struct StepLoss {
    long step = 0;
    double total = 0, cls = 0, reg = 0, aux = 0;
    int num_positive = 0;
};

struct TrainResult {
    Detector model;
    std::vector<StepLoss> losses;
    ApResult metrics;
};

// Called once per finished epoch with the mean loss of that epoch.
using EpochCallback = std::function<void(int epoch, double mean_loss)>;

// Deterministic given the config and the data. Throws NumericalError with the
// step number when the loss stops being finite.
TrainResult train_model(const RunConfig& cfg, const Datasets& data, const EpochCallback& on_epoch = {});

ApResult evaluate_model(const Detector& model, const std::vector<Sample>& samples, const DecodeOptions& opts,
                        int num_classes, int batch_size = 16);

// `<root>/<stem>-<UTC timestamp>`, with a numeric suffix when that exists already.
std::filesystem::path create_run_dir(const std::filesystem::path& root, const std::string& stem);

void write_losses_csv(const std::filesystem::path& path, const std::vector<StepLoss>& losses);
void write_metrics_csv(const std::filesystem::path& path, const ApResult& metrics, std::size_t parameter_count,
                       std::size_t steps);

struct TrainRun {
    std::filesystem::path dir;
    TrainResult result;
};

// config.snapshot, losses.csv, metrics.csv, checkpoint.bin under a new run directory.
TrainRun cmd_train(const RunConfig& cfg, const EpochCallback& on_epoch = {});

struct AblationVariant {
    std::string name;
    MsilConfig msil;
    // Full-scale reference AP for this variant, printed next to the desk-scale result.
    double reference_ap, reference_ap50, reference_ap75;
};

// ✗✗, ✓✗, ✗✓, ✓✓ over (cls, reg) enhancement, then w/o alignment, w/o separation, full.
std::vector<AblationVariant> ablation_variants(const MsilConfig& base);

struct AblationRow {
    std::string variant;
    ApResult metrics;
    std::size_t parameter_count = 0;
    std::size_t msil_parameter_count = 0;
    double reference_ap = 0, reference_ap50 = 0, reference_ap75 = 0;
};

struct AblationRun {
    std::filesystem::path dir;
    std::vector<AblationRow> rows;
};

RunConfig variant_config(const RunConfig& base, const AblationVariant& v);

// Trains every variant from the same seed. Up to `jobs` variants train at once;
// each run stays single-threaded. Writes ablation.csv and one subdirectory per variant.
AblationRun cmd_ablate(const RunConfig& base, int jobs = 1);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

enum class HeatmapBranch { Cls, Reg, Both };
enum class HeatmapStage { Before, After, Both };

struct HeatmapRequest {
    std::filesystem::path checkpoint;
    int image_id = 0;
    Split split = Split::Test;
    HeatmapBranch branch = HeatmapBranch::Both;
    HeatmapStage stage = HeatmapStage::Both;
};

struct HeatmapRun {
    std::filesystem::path dir;
    std::vector<std::filesystem::path> files;
};

// Heat maps of the branch features before and after MSIL for one image.
// Throws ConfigError for an unknown image id or a single-branch config.
HeatmapRun cmd_heatmap(const RunConfig& cfg, const HeatmapRequest& req);

void write_centers_csv(const std::filesystem::path& path, const QuadrantStats& stats, bool empty);

struct CentersRun {
    std::filesystem::path csv;
    QuadrantStats stats;
};

// Quadrant counts of the dataset stored at `dataset_dir`, or of the generated
// training split when it is empty.
CentersRun cmd_centers(const RunConfig& cfg, const std::filesystem::path& dataset_dir);

// Writes both splits of the configured dataset to `<root>/<name>-data-<timestamp>`.
std::filesystem::path cmd_dataset(const RunConfig& cfg);

}  // namespace msil
