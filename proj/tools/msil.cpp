// msil: train, verify and inspect the MSIL detection head on synthetic scenes.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure
// (non-finite loss or gradient check failure), 4 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "msil/config.hpp"
#include "msil/errors.hpp"
#include "msil/gradcheck.hpp"
#include "msil/harness.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kIo = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "run configuration file (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--out", c.out, "override the output root directory");
}

msil::RunConfig resolve(const Common& c) {
    msil::RunConfig cfg = c.config.empty() ? msil::RunConfig{} : msil::load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    cfg.msil.channels = cfg.channels;
    cfg.validate();
    return cfg;
}

void print_metrics(const msil::ApResult& m) {
    std::printf("AP %.4f  AP50 %.4f  AP75 %.4f  (%d classes)\n", m.ap, m.ap50, m.ap75, m.classes_evaluated);
}

int run_gradcheck(const msil::RunConfig& cfg) {
    const auto report = msil::run_gradcheck(msil::gradcheck_options(cfg));
    std::printf("%-28s %8s %9s %8s %12s %12s %12s  %-24s %s\n", "group", "entries", "checked", "skipped",
                "max_rel_err", "analytic", "numeric", "worst_loss", "result");
    for (const auto& g : report.groups) {
        std::printf("%-28s %8zu %9zu %8zu %12.3e %12.4e %12.4e  %-24s %s\n", g.name.c_str(), g.entries, g.checked,
                    g.skipped_kinks, g.max_rel_error, g.worst_analytic, g.worst_numeric, g.worst_loss.c_str(),
                    g.pass ? "PASS" : "FAIL");
    }
    std::printf("losses:");
    for (const auto& l : report.losses) std::printf(" %s", l.c_str());
    std::printf("\n%s in %.1f s\n", report.pass() ? "PASS" : "FAIL", report.seconds);
    return report.pass() ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MSIL detection head: training, ablations and diagnostics"};
    app.require_subcommand(1);

    Common train_opts, grad_opts, ablate_opts, heat_opts, centers_opts, data_opts;
    auto* train = app.add_subcommand("train", "train one model and evaluate it on the held-out split");
    add_common(train, train_opts);
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter gradient");
    add_common(grad, grad_opts);
    auto* ablate = app.add_subcommand("ablate", "train the seven MSIL ablation variants");
    add_common(ablate, ablate_opts);
    int jobs = 1;
    ablate->add_option("--jobs", jobs, "variants trained concurrently")->check(CLI::Range(1, 64));

    auto* heat = app.add_subcommand("heatmap", "export branch feature heat maps for one image");
    add_common(heat, heat_opts);
    msil::HeatmapRequest req;
    std::string checkpoint, branch = "both", stage = "both", split = "test";
    heat->add_option("--checkpoint", checkpoint, "checkpoint.bin of a trained run")->required();
    heat->add_option("--image", req.image_id, "image id")->required();
    heat->add_option("--branch", branch, "cls, reg or both")->check(CLI::IsMember({"cls", "reg", "both"}));
    heat->add_option("--variant", stage, "before, after or both")->check(CLI::IsMember({"before", "after", "both"}));
    heat->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

    auto* centers = app.add_subcommand("centers", "object-center quadrant counts per class");
    add_common(centers, centers_opts);
    std::string dataset_dir;
    centers->add_option("--data", dataset_dir, "dataset split directory (default: generated train split)");

    auto* dataset = app.add_subcommand("dataset", "write the configured train/test splits to disk");
    add_common(dataset, data_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*train) {
            const auto cfg = resolve(train_opts);
            const auto run = msil::cmd_train(cfg, [&](int epoch, double loss) {
                std::printf("epoch %d/%d  loss %.5f\n", epoch + 1, cfg.train.epochs, loss);
                std::fflush(stdout);
            });
            print_metrics(run.result.metrics);
            std::printf("run directory: %s\n", run.dir.c_str());
        } else if (*grad) {
            return run_gradcheck(resolve(grad_opts));
        } else if (*ablate) {
            const auto run = msil::cmd_ablate(resolve(ablate_opts), jobs);
            for (const auto& r : run.rows) {
                std::printf("%-14s AP %.4f  AP50 %.4f  AP75 %.4f  params %zu (msil %zu)\n", r.variant.c_str(),
                            r.metrics.ap, r.metrics.ap50, r.metrics.ap75, r.parameter_count,
                            r.msil_parameter_count);
            }
            std::printf("table: %s\n", (run.dir / "ablation.csv").c_str());
        } else if (*heat) {
            req.checkpoint = checkpoint;
            req.branch = branch == "cls" ? msil::HeatmapBranch::Cls
                         : branch == "reg" ? msil::HeatmapBranch::Reg
                                           : msil::HeatmapBranch::Both;
            req.stage = stage == "before" ? msil::HeatmapStage::Before
                        : stage == "after" ? msil::HeatmapStage::After
                                           : msil::HeatmapStage::Both;
            req.split = split == "train" ? msil::Split::Train : msil::Split::Test;
            const auto run = msil::cmd_heatmap(resolve(heat_opts), req);
            for (const auto& f : run.files) std::printf("%s\n", f.c_str());
        } else if (*centers) {
            const auto run = msil::cmd_centers(resolve(centers_opts), dataset_dir);
            std::printf("%s\n", run.csv.c_str());
        } else if (*dataset) {
            std::printf("%s\n", msil::cmd_dataset(resolve(data_opts)).c_str());
        }
    } catch (const msil::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const msil::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    } catch (const msil::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    }
    return kOk;
}
