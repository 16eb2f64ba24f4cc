#include "msil/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "msil/errors.hpp"
#include "msil/ops.hpp"

namespace msil {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    return os;
}

void finish(std::ofstream& os, const fs::path& path) {
    os.flush();
    if (!os) throw IoError("write failed for " + path.string());
}

void check_dataset(const std::vector<Sample>& samples, const DatasetInfo& info, const RunConfig& cfg,
                   const fs::path& dir) {
    if (info.channels != 1) throw IoError(dir.string() + ": only single-channel datasets are supported");
    if (info.size != cfg.data.size) {
        throw ConfigError(dir.string() + ": image size " + std::to_string(info.size) +
                          " does not match data.size = " + std::to_string(cfg.data.size));
    }
    if (info.num_classes != cfg.data.classes) {
        throw ConfigError(dir.string() + ": dataset has " + std::to_string(info.num_classes) +
                          " classes, config data.classes = " + std::to_string(cfg.data.classes));
    }
    for (const auto& s : samples) s.scene.validate(info.num_classes);
}

std::vector<DenseTargets> all_targets(const std::vector<Sample>& samples) {
    std::vector<DenseTargets> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(assign_targets(s.scene, kStride));
    return out;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

}  // namespace

Datasets prepare_datasets(const RunConfig& cfg) {
    Datasets d;
    if (cfg.data.dir.empty()) {
        d.train = generate_dataset(dataset_options(cfg, Split::Train));
        d.test = generate_dataset(dataset_options(cfg, Split::Test));
        return d;
    }
    const fs::path root(cfg.data.dir);
    DatasetInfo info;
    d.train = load_dataset(root / "train", &info);
    check_dataset(d.train, info, cfg, root / "train");
    d.test = load_dataset(root / "test", &info);
    check_dataset(d.test, info, cfg, root / "test");
    if (d.train.empty()) throw IoError((root / "train").string() + " holds no images");
    return d;
}

Tensor stack_images(const std::vector<Sample>& samples, std::span<const int> indices) {
    if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
    const Shape one = samples.at(indices[0]).image.shape();
    std::vector<double> data;
    data.reserve(one.numel() * indices.size());
    for (int i : indices) {
        const auto& img = samples.at(i).image;
        if (!(img.shape() == one)) throw ShapeError("stack_images: mixed image shapes");
        data.insert(data.end(), img.data().begin(), img.data().end());
    }
    return Tensor::from_data({static_cast<int>(indices.size()), one.c, one.h, one.w}, std::move(data));
}

int steps_per_epoch(int num_train, int batch_size) { return (num_train + batch_size - 1) / batch_size; }

TrainResult train_model(const RunConfig& cfg, const Datasets& data, const EpochCallback& on_epoch) {
    cfg.validate();
    TrainResult result{Detector(model_config(cfg), cfg.seed), {}, {}};
    SgdOptimizer opt(result.model.parameters(), cfg.optim);
    const auto targets = all_targets(data.train);
    const int n = static_cast<int>(data.train.size());
    const int per_epoch = steps_per_epoch(n, cfg.train.batch_size);
    result.losses.reserve(static_cast<std::size_t>(per_epoch) * cfg.train.epochs);

    std::vector<int> order(n);
    long step = 0;
    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(stream_seed(cfg.seed, "shuffle/" + std::to_string(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        opt.set_epoch(epoch);
        double epoch_loss = 0;
        for (int b = 0; b < per_epoch; ++b) {
            const int begin = b * cfg.train.batch_size;
            const int end = std::min(n, begin + cfg.train.batch_size);
            const std::span<const int> idx(order.data() + begin, static_cast<std::size_t>(end - begin));
            std::vector<DenseTargets> batch_targets;
            for (int i : idx) batch_targets.push_back(targets[i]);

            const HeadOutput out = result.model.forward(stack_images(data.train, idx));
            LossBreakdown loss = total_loss(out.cls_logits, out.box, out.ctr_logits, batch_targets, cfg.loss);
            ++step;
            if (!std::isfinite(loss.total_value)) {
                throw NumericalError("loss became non-finite at step " + std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + ")",
                                     step);
            }
            opt.zero_grad();
            loss.total.backward();
            opt.step();
            result.losses.push_back({step, loss.total_value, loss.cls, loss.reg, loss.aux, loss.num_positive});
            epoch_loss += loss.total_value;
        }
        if (on_epoch) on_epoch(epoch, epoch_loss / std::max(1, per_epoch));
    }
    result.metrics = evaluate_model(result.model, data.test, decode_options(cfg), cfg.data.classes);
    return result;
}

ApResult evaluate_model(const Detector& model, const std::vector<Sample>& samples, const DecodeOptions& opts,
                        int num_classes, int batch_size) {
    std::vector<std::vector<Detection>> detections;
    std::vector<std::vector<GroundTruth>> truth;
    const int n = static_cast<int>(samples.size());
    for (int begin = 0; begin < n; begin += batch_size) {
        std::vector<int> idx(static_cast<std::size_t>(std::min(n, begin + batch_size) - begin));
        std::iota(idx.begin(), idx.end(), begin);
        auto dets = predict(model, stack_images(samples, idx), opts);
        for (auto& d : dets) detections.push_back(std::move(d));
    }
    for (const auto& s : samples) truth.push_back(ground_truth(s.scene));
    return evaluate_ap(detections, truth, num_classes);
}

fs::path create_run_dir(const fs::path& root, const std::string& stem) {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    const std::string base = stem + "-" + utc_timestamp();
    for (int k = 0;; ++k) {
        const fs::path dir = root / (k == 0 ? base : base + "-" + std::to_string(k));
        // create_directory reports false when the directory already exists, which
        // makes the choice race-free between concurrent commands.
        if (fs::create_directory(dir, ec)) return dir;
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
}

void write_losses_csv(const fs::path& path, const std::vector<StepLoss>& losses) {
    auto os = open_output(path);
    os << "step,L_total,L_cls,L_reg,L_aux,N_pos\n";
    for (const auto& l : losses) {
        os << l.step << ',' << fmt(l.total) << ',' << fmt(l.cls) << ',' << fmt(l.reg) << ',' << fmt(l.aux) << ','
           << l.num_positive << '\n';
    }
    finish(os, path);
}

void write_metrics_csv(const fs::path& path, const ApResult& m, std::size_t parameter_count, std::size_t steps) {
    auto os = open_output(path);
    os << "AP,AP50,AP75,classes_evaluated,parameter_count,steps\n";
    os << fmt(m.ap) << ',' << fmt(m.ap50) << ',' << fmt(m.ap75) << ',' << m.classes_evaluated << ','
       << parameter_count << ',' << steps << '\n';
    finish(os, path);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    auto os = open_output(path);
    os << text;
    finish(os, path);
}

void write_run_outputs(const fs::path& dir, const RunConfig& cfg, const TrainResult& r) {
    write_text(dir / "config.snapshot", serialize_config(cfg));
    write_losses_csv(dir / "losses.csv", r.losses);
    write_metrics_csv(dir / "metrics.csv", r.metrics, r.model.parameter_count(), r.losses.size());
    save_checkpoint(dir / "checkpoint.bin", r.model.all_parameters());
}

}  // namespace

TrainRun cmd_train(const RunConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    const Datasets data = prepare_datasets(cfg);
    TrainRun run{create_run_dir(cfg.out_dir, cfg.name), train_model(cfg, data, on_epoch)};
    write_run_outputs(run.dir, cfg, run.result);
    return run;
}

std::vector<AblationVariant> ablation_variants(const MsilConfig& base) {
    auto with = [&](bool cls, bool reg, bool align, bool sep) {
        MsilConfig m = base;
        m.apply_to_cls = cls;
        m.apply_to_reg = reg;
        m.enable_alignment = align;
        m.enable_separation = sep;
        return m;
    };
    return {
        {"enh_none", with(false, false, true, true), 41.2, 59.1, 44.8},
        {"enh_cls", with(true, false, true, true), 41.9, 59.9, 45.6},
        {"enh_reg", with(false, true, true, true), 40.9, 58.9, 44.1},
        {"enh_both", with(true, true, true, true), 42.1, 59.9, 46.0},
        {"wo_alignment", with(true, true, false, true), 41.7, 59.6, 45.2},
        {"wo_separation", with(true, true, true, false), 41.9, 59.8, 45.3},
        {"full", with(true, true, true, true), 42.1, 59.9, 46.0},
    };
}

RunConfig variant_config(const RunConfig& base, const AblationVariant& v) {
    RunConfig c = base;
    c.head = HeadKind::MultiBranch;
    c.msil_enabled = true;
    c.msil = v.msil;
    c.msil.channels = c.channels;
    c.name = base.name + "-" + v.name;
    c.validate();
    return c;
}

AblationRun cmd_ablate(const RunConfig& base, int jobs) {
    base.validate();
    const Datasets data = prepare_datasets(base);
    const auto variants = ablation_variants(base.msil);
    AblationRun run{create_run_dir(base.out_dir, base.name + "-ablate"), {}};
    run.rows.resize(variants.size());

    // Variants whose configs differ only by name (enh_both and full) are the
    // same deterministic run; train the first and reuse its result.
    std::vector<RunConfig> configs;
    std::vector<std::size_t> source(variants.size());
    std::map<std::string, std::size_t> first_by_config;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        configs.push_back(variant_config(base, variants[i]));
        RunConfig key = configs.back();
        key.name = base.name;
        source[i] = first_by_config.emplace(serialize_config(key), i).first->second;
    }

    std::vector<std::optional<TrainResult>> results(variants.size());
    std::vector<std::exception_ptr> errors(variants.size());
    std::vector<std::size_t> queue;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        if (source[i] == i) queue.push_back(i);
    }
    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(mu);
                if (next == queue.size()) return;
                i = queue[next++];
            }
            try {
                results[i] = train_model(configs[i], data);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int workers = std::clamp(jobs, 1, static_cast<int>(queue.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    for (std::size_t i = 0; i < variants.size(); ++i) {
        const TrainResult& r = *results[source[i]];
        const auto& v = variants[i];
        const fs::path sub = run.dir / v.name;
        fs::create_directory(sub);
        write_run_outputs(sub, configs[i], r);
        AblationRow& row = run.rows[i];
        row.variant = v.name;
        row.metrics = r.metrics;
        row.parameter_count = r.model.parameter_count();
        row.msil_parameter_count =
            r.model.config().msil ? count_elements(r.model.multi().msil->parameters(*r.model.config().msil)) : 0;
        row.reference_ap = v.reference_ap;
        row.reference_ap50 = v.reference_ap50;
        row.reference_ap75 = v.reference_ap75;
    }
    write_ablation_csv(run.dir / "ablation.csv", run.rows);
    return run;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
    auto os = open_output(path);
    os << "variant,AP,AP50,AP75,parameter_count,msil_parameter_count,reference_AP,reference_AP50,reference_AP75\n";
    for (const auto& r : rows) {
        os << r.variant << ',' << fmt(r.metrics.ap) << ',' << fmt(r.metrics.ap50) << ',' << fmt(r.metrics.ap75) << ','
           << r.parameter_count << ',' << r.msil_parameter_count << ',' << fmt(r.reference_ap) << ','
           << fmt(r.reference_ap50) << ',' << fmt(r.reference_ap75) << '\n';
    }
    finish(os, path);
}

HeatmapRun cmd_heatmap(const RunConfig& cfg, const HeatmapRequest& req) {
    cfg.validate();
    if (cfg.head != HeadKind::MultiBranch) throw ConfigError("heatmap needs model.head = multi-branch");
    const Datasets data = prepare_datasets(cfg);
    const auto& samples = req.split == Split::Train ? data.train : data.test;
    const auto it = std::find_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.id == req.image_id; });
    if (it == samples.end()) {
        throw ConfigError("image id " + std::to_string(req.image_id) + " is not in the " +
                          (req.split == Split::Train ? "train" : "test") + " split");
    }

    Detector model(model_config(cfg), cfg.seed);
    ParamList params = model.all_parameters();
    load_checkpoint_into(req.checkpoint, params);

    HeadOutput out;
    {
        NoGradGuard no_grad;
        out = model.forward(it->image);
    }

    HeatmapRun run{create_run_dir(cfg.out_dir, cfg.name + "-heatmap"), {}};
    auto emit = [&](const Tensor& feat, const std::string& branch, const std::string& stage) {
        const HeatMap map = export_attention_heatmap(feat);
        const std::string stem = heatmap_basename(req.image_id, branch, stage);
        write_pgm(run.dir / (stem + ".pgm"), map);
        write_heatmap_csv(run.dir / (stem + ".csv"), map);
        run.files.push_back(run.dir / (stem + ".pgm"));
        run.files.push_back(run.dir / (stem + ".csv"));
    };
    const bool cls = req.branch != HeatmapBranch::Reg;
    const bool reg = req.branch != HeatmapBranch::Cls;
    const bool before = req.stage != HeatmapStage::After;
    const bool after = req.stage != HeatmapStage::Before;
    if (cls && before) emit(out.f_cls, "cls", "before");
    if (cls && after) emit(out.class_feat, "cls", "after");
    if (reg && before) emit(out.f_reg, "reg", "before");
    if (reg && after) emit(out.box_feat, "reg", "after");
    return run;
}

void write_centers_csv(const fs::path& path, const QuadrantStats& stats, bool empty) {
    auto os = open_output(path);
    os << "class,ul,ur,ll,lr,total\n";
    if (!empty) {
        for (std::size_t k = 0; k < stats.per_class.size(); ++k) {
            const auto& q = stats.per_class[k];
            os << k + 1 << ',' << q.upper_left << ',' << q.upper_right << ',' << q.lower_left << ','
               << q.lower_right << ',' << q.total() << '\n';
        }
    }
    finish(os, path);
}

CentersRun cmd_centers(const RunConfig& cfg, const fs::path& dataset_dir) {
    std::vector<Sample> samples;
    int classes = cfg.data.classes;
    if (dataset_dir.empty()) {
        samples = generate_dataset(dataset_options(cfg, Split::Train));
    } else {
        DatasetInfo info;
        samples = load_dataset(dataset_dir, &info);
        classes = info.num_classes;
        for (const auto& s : samples) s.scene.validate(classes);
    }
    std::vector<SceneSpec> scenes;
    for (const auto& s : samples) scenes.push_back(s.scene);
    CentersRun run;
    run.stats = quadrant_stats(scenes, classes);
    run.csv = create_run_dir(cfg.out_dir, cfg.name + "-centers") / "centers.csv";
    write_centers_csv(run.csv, run.stats, samples.empty());
    return run;
}

fs::path cmd_dataset(const RunConfig& cfg) {
    cfg.validate();
    const fs::path dir = create_run_dir(cfg.out_dir, cfg.name + "-data");
    const DatasetInfo info{cfg.data.size, 1, cfg.data.classes};
    save_dataset(dir / "train", generate_dataset(dataset_options(cfg, Split::Train)), info);
    save_dataset(dir / "test", generate_dataset(dataset_options(cfg, Split::Test)), info);
    return dir;
}

}  // namespace msil
