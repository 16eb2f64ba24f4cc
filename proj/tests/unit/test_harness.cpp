#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "msil/config.hpp"
#include "msil/errors.hpp"
#include "msil/gradcheck.hpp"
#include "msil/harness.hpp"

using namespace msil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "msil_harness_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> lines(const fs::path& p) {
    std::istringstream is(read_file(p));
    std::vector<std::string> out;
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

// Small enough to train in well under a second.
RunConfig tiny(const std::string& name) {
    RunConfig c;
    c.name = name;
    c.seed = 3;
    c.out_dir = scratch(name).string();
    c.data.train_images = 12;
    c.data.test_images = 6;
    c.data.size = 32;
    c.data.min_object_size = 8;
    c.data.max_object_size = 16;
    c.channels = 8;
    c.msil.channels = 8;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    return c;
}

void expect_error(const std::string& text, const std::string& fragment) {
    try {
        (void)parse_config(text, "test.cfg");
        ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MSIL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "run.cfg";
    std::ofstream(p) << text;
    return p;
}

}  // namespace

// ---- configuration --------------------------------------------------------

TEST(Config, DefaultsFollowTrainingProtocol) {
    const RunConfig c = parse_config("");
    EXPECT_EQ(c.optim.learning_rate, 0.01);
    EXPECT_EQ(c.optim.momentum, 0.9);
    EXPECT_EQ(c.optim.weight_decay, 1e-4);
    EXPECT_EQ(c.optim.decay_epochs, (std::vector<int>{8, 11}));
    EXPECT_EQ(c.optim.decay_factor, 0.1);
    EXPECT_EQ(c.train.epochs, 12);
    EXPECT_EQ(c.head, HeadKind::MultiBranch);
    EXPECT_TRUE(c.msil_enabled);
}

TEST(Config, ParsesSectionsCommentsAndWhitespace) {
    const RunConfig c = parse_config(R"(# comment line
name = sweep   # trailing comment
seed=42
model.head = single-branch
msil.enabled = false
loss.cls = ce
loss.reg = iou
loss.aux = none
optim.decay_epochs = 3,5,7
data.train_images = 20
)");
    EXPECT_EQ(c.name, "sweep");
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.head, HeadKind::SingleBranch);
    EXPECT_FALSE(c.msil_enabled);
    EXPECT_EQ(c.loss.cls, ClsLossKind::CrossEntropy);
    EXPECT_EQ(c.loss.reg, RegLossKind::Iou);
    EXPECT_TRUE(c.loss.aux.empty());
    EXPECT_EQ(c.optim.decay_epochs, (std::vector<int>{3, 5, 7}));
    EXPECT_EQ(c.data.train_images, 20);
}

TEST(Config, ErrorsNameLineAndKey) {
    expect_error("seed = 1\nmodel.chanels = 8\n", "test.cfg:2");
    expect_error("seed = 1\nmodel.chanels = 8\n", "model.chanels");
    expect_error("seed = 1\nseed = 2\n", "test.cfg:2");
    expect_error("optim.lr = fast\n", "optim.lr");
    expect_error("optim.lr = -1\n", "optim.lr");
    expect_error("optim.momentum = 1.0\n", "optim.momentum");
    expect_error("train.epochs = 2.5\n", "train.epochs");
    expect_error("data.size = 30\n", "data.size");
    expect_error("msil.cam_reduction = 3\n", "msil.cam_reduction");
    expect_error("model.head = single-branch\n", "msil");
    expect_error("model.head = triple\n", "model.head");
    expect_error("just some words\n", "test.cfg:1");
    EXPECT_THROW((void)load_config("/nonexistent/run.cfg"), IoError);
}

TEST(Config, SerializeParseRoundTripIsIdentity) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 30; ++trial) {
        RunConfig c;
        c.name = "rt" + std::to_string(trial);
        c.seed = rng();
        c.data.noise = u(rng) * 0.3;
        c.data.train_images = 1 + trial;
        c.optim.learning_rate = 1e-3 + u(rng) * 0.1;  // arbitrary doubles, not round decimals
        c.optim.momentum = u(rng) * 0.95;
        c.optim.decay_epochs = trial % 3 ? std::vector<int>{trial, trial + 2} : std::vector<int>{};
        c.loss.focal_alpha = u(rng);
        c.loss.cls_weight = 0.1 + u(rng);
        c.loss.aux = trial % 4 ? std::vector<AuxLoss>{{AuxLossKind::CenternessBce, u(rng)}} : std::vector<AuxLoss>{};
        c.msil.apply_to_cls = trial % 2;
        c.msil.apply_to_reg = trial % 3 == 0;
        c.msil.enable_alignment = trial % 5 != 0;
        c.eval.score_thresh = u(rng) * 0.2;
        const std::string text = serialize_config(c);
        const RunConfig back = parse_config(text);
        EXPECT_EQ(back, c) << text;
        EXPECT_EQ(serialize_config(back), text);
    }
}

// ---- training -------------------------------------------------------------

TEST(Train, SameConfigTwiceIsIdentical) {
    const RunConfig cfg = tiny("determinism");
    const Datasets data = prepare_datasets(cfg);
    const TrainResult a = train_model(cfg, data);
    const TrainResult b = train_model(cfg, data);
    ASSERT_EQ(a.losses.size(), b.losses.size());
    for (std::size_t i = 0; i < a.losses.size(); ++i) EXPECT_EQ(a.losses[i].total, b.losses[i].total);
    EXPECT_EQ(a.metrics.ap, b.metrics.ap);
    EXPECT_EQ(a.metrics.ap50, b.metrics.ap50);
    const ParamList pa = a.model.all_parameters(), pb = b.model.all_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
}

TEST(Train, LossLogHasOneRowPerStep) {
    RunConfig cfg = tiny("rows");
    cfg.train.epochs = 3;
    cfg.train.batch_size = 5;  // 12 images -> 3 steps per epoch, last batch short
    const TrainRun run = cmd_train(cfg);
    EXPECT_EQ(steps_per_epoch(12, 5), 3);
    const auto csv = lines(run.dir / "losses.csv");
    ASSERT_EQ(csv.size(), 1u + 9u);
    EXPECT_EQ(csv[0], "step,L_total,L_cls,L_reg,L_aux,N_pos");
    EXPECT_EQ(csv[1].substr(0, 2), "1,");
    EXPECT_EQ(csv[9].substr(0, 2), "9,");
    const auto metrics = lines(run.dir / "metrics.csv");
    ASSERT_EQ(metrics.size(), 2u);
    EXPECT_EQ(metrics[0], "AP,AP50,AP75,classes_evaluated,parameter_count,steps");
    EXPECT_TRUE(fs::exists(run.dir / "checkpoint.bin"));
    EXPECT_EQ(parse_config(read_file(run.dir / "config.snapshot")), cfg);
}

TEST(Train, ZeroEpochsSavesInitialization) {
    RunConfig cfg = tiny("zero");
    cfg.train.epochs = 0;
    const TrainRun run = cmd_train(cfg);
    const ParamList saved = load_checkpoint(run.dir / "checkpoint.bin");
    const Detector init(model_config(cfg), cfg.seed);
    const ParamList want = init.all_parameters();
    ASSERT_EQ(saved.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(saved[i].name, want[i].name);
        EXPECT_TRUE(std::equal(want[i].tensor.data().begin(), want[i].tensor.data().end(),
                               saved[i].tensor.data().begin()));
    }
    EXPECT_EQ(lines(run.dir / "losses.csv").size(), 1u);
}

TEST(Train, RunDirectoriesAreNeverReused) {
    const fs::path root = scratch("rundirs");
    const fs::path a = create_run_dir(root, "x");
    const fs::path b = create_run_dir(root, "x");
    EXPECT_NE(a, b);
    EXPECT_TRUE(fs::is_directory(a));
    EXPECT_TRUE(fs::is_directory(b));
    EXPECT_EQ(a.filename().string().rfind("x-", 0), 0u);
}

// ---- gradient check -------------------------------------------------------

namespace {

GradcheckOptions small_gradcheck() {
    GradcheckOptions o;
    o.seed = 2;
    o.size = 16;
    o.channels = 4;
    o.batch = 1;
    o.min_object_size = 6;
    o.max_object_size = 12;
    o.msil.channels = 4;
    o.msil.cam_reduction = 2;
    LossSpec s;
    o.losses = {s};
    return o;
}

}  // namespace

TEST(Gradcheck, SmallConfigPassesAndListsEveryGroupOnce) {
    const GradcheckOptions o = small_gradcheck();
    const GradcheckReport r = run_gradcheck(o);
    EXPECT_TRUE(r.pass());

    ModelConfig mc;
    mc.channels = 4;
    mc.num_classes = 2;
    mc.msil = o.msil;
    const ParamList params = Detector(mc, 0).parameters();
    ASSERT_EQ(r.groups.size(), params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(r.groups[i].name, params[i].name);
        EXPECT_EQ(r.groups[i].entries, params[i].tensor.numel());
        EXPECT_GT(r.groups[i].checked, 0u) << params[i].name;
        EXPECT_LE(r.groups[i].max_rel_error, 1e-4) << params[i].name;
    }
}

TEST(Gradcheck, CorruptedBackwardFailsOnlyThatGroup) {
    GradcheckOptions o = small_gradcheck();
    const std::string target = "msil.fusion.weight";
    o.corrupt = [&](ParamList& params) {
        for (auto& p : params)
            if (p.name == target) p.tensor.mutable_grad()[0] += 0.05;
    };
    const GradcheckReport r = run_gradcheck(o);
    EXPECT_FALSE(r.pass());
    bool seen = false;
    for (const auto& g : r.groups) {
        if (g.name == target) {
            seen = true;
            EXPECT_FALSE(g.pass);
            EXPECT_GT(g.max_rel_error, 1e-4);
        } else {
            EXPECT_TRUE(g.pass) << g.name;
        }
    }
    EXPECT_TRUE(seen);
}

TEST(Gradcheck, OptionsFromConfigRejectLargeGrids) {
    RunConfig cfg;
    cfg.data.size = 64;
    EXPECT_THROW((void)gradcheck_options(cfg), ConfigError);
    cfg.data.size = 32;
    cfg.data.classes = 2;
    cfg.channels = 8;
    cfg.msil.channels = 8;
    const GradcheckOptions o = gradcheck_options(cfg);
    EXPECT_EQ(o.size, 32);
    EXPECT_EQ(o.losses.size(), 4u);
}

// ---- ablation -------------------------------------------------------------

TEST(Ablate, SevenVariantsAndBaselineEquality) {
    RunConfig cfg = tiny("ablate");
    cfg.train.epochs = 1;
    const AblationRun run = cmd_ablate(cfg, 2);
    const std::vector<std::string> names{"enh_none", "enh_cls",      "enh_reg",      "enh_both",
                                         "wo_alignment", "wo_separation", "full"};
    ASSERT_EQ(run.rows.size(), 7u);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(run.rows[i].variant, names[i]);
    EXPECT_EQ(run.rows[0].msil_parameter_count, 0u);
    EXPECT_LT(run.rows[0].msil_parameter_count, run.rows[3].msil_parameter_count);
    EXPECT_LT(run.rows[0].parameter_count, run.rows[3].parameter_count);
    EXPECT_EQ(run.rows[3].metrics.ap, run.rows[6].metrics.ap);
    EXPECT_NEAR(run.rows[1].reference_ap, 41.9, 1e-12);

    const auto csv = lines(run.dir / "ablation.csv");
    ASSERT_EQ(csv.size(), 8u);
    EXPECT_EQ(csv[0], "variant,AP,AP50,AP75,parameter_count,msil_parameter_count,reference_AP,reference_AP50,"
                      "reference_AP75");

    RunConfig plain = cfg;
    plain.msil_enabled = false;
    const TrainResult p = train_model(plain, prepare_datasets(plain));
    EXPECT_EQ(run.rows[0].metrics.ap, p.metrics.ap);
    EXPECT_EQ(run.rows[0].metrics.ap50, p.metrics.ap50);
    EXPECT_EQ(run.rows[0].metrics.ap75, p.metrics.ap75);
    EXPECT_EQ(run.rows[0].parameter_count, p.model.parameter_count());
}

// ---- heat maps ------------------------------------------------------------

TEST(Heatmap, FilesMatchGridAreDeterministicAndBounded) {
    RunConfig cfg = tiny("heatmap");
    cfg.train.epochs = 1;
    const TrainRun trained = cmd_train(cfg);
    HeatmapRequest req;
    req.checkpoint = trained.dir / "checkpoint.bin";
    req.image_id = 2;
    const HeatmapRun a = cmd_heatmap(cfg, req);
    const HeatmapRun b = cmd_heatmap(cfg, req);
    ASSERT_EQ(a.files.size(), 8u);
    ASSERT_NE(a.dir, b.dir);
    for (std::size_t i = 0; i < a.files.size(); ++i) {
        EXPECT_EQ(a.files[i].filename(), b.files[i].filename());
        EXPECT_EQ(read_file(a.files[i]), read_file(b.files[i]));
    }
    EXPECT_TRUE(fs::exists(a.dir / "2_cls_before.pgm"));
    EXPECT_TRUE(fs::exists(a.dir / "2_reg_after.csv"));
    const std::string pgm = read_file(a.dir / "2_cls_after.pgm");
    EXPECT_EQ(pgm.substr(0, 11), "P5\n8 8\n255\n");
    EXPECT_EQ(pgm.size(), 11u + 64u);
    for (const auto& line : lines(a.dir / "2_cls_after.csv")) {
        std::stringstream ss(line);
        int cols = 0;
        for (std::string cell; std::getline(ss, cell, ',');) {
            const double v = std::stod(cell);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            ++cols;
        }
        EXPECT_EQ(cols, 8);
    }
}

TEST(Heatmap, RejectsUnknownImageAndSingleBranch) {
    RunConfig cfg = tiny("heatmap_errors");
    cfg.train.epochs = 0;
    const TrainRun trained = cmd_train(cfg);
    HeatmapRequest req;
    req.checkpoint = trained.dir / "checkpoint.bin";
    req.image_id = 999;
    EXPECT_THROW((void)cmd_heatmap(cfg, req), ConfigError);
    req.image_id = 0;
    req.checkpoint = trained.dir / "missing.bin";
    EXPECT_THROW((void)cmd_heatmap(cfg, req), IoError);
    RunConfig single = cfg;
    single.head = HeadKind::SingleBranch;
    single.msil_enabled = false;
    EXPECT_THROW((void)cmd_heatmap(single, req), ConfigError);
}

// ---- centers --------------------------------------------------------------

TEST(Centers, CountsAreConserved) {
    RunConfig cfg = tiny("centers");
    cfg.data.train_images = 50;
    const CentersRun run = cmd_centers(cfg, {});
    const auto data = generate_dataset(dataset_options(cfg, Split::Train));
    std::vector<int> per_class(cfg.data.classes, 0);
    for (const auto& s : data)
        for (const auto& o : s.scene.objects) ++per_class[o.label - 1];
    const auto csv = lines(run.csv);
    ASSERT_EQ(csv.size(), 1u + cfg.data.classes);
    EXPECT_EQ(csv[0], "class,ul,ur,ll,lr,total");
    for (int k = 0; k < cfg.data.classes; ++k) {
        EXPECT_EQ(run.stats.per_class[k].total(), per_class[k]);
        EXPECT_EQ(csv[1 + k].substr(csv[1 + k].rfind(',') + 1), std::to_string(per_class[k]));
    }
}

TEST(Centers, SingleObjectAndEmptyDatasets) {
    const fs::path dir = scratch("centers_data");
    Sample s;
    s.id = 0;
    s.scene = {32, {{2, {20, 2, 28, 10}, 0}}, 0.0};
    s.image = render_scene(s.scene, 0);
    save_dataset(dir / "one", {s}, {32, 1, 3});
    save_dataset(dir / "empty", {}, {32, 1, 3});

    RunConfig cfg = tiny("centers_files");
    const CentersRun one = cmd_centers(cfg, dir / "one");
    const auto csv = lines(one.csv);
    ASSERT_EQ(csv.size(), 4u);
    EXPECT_EQ(csv[1], "1,0,0,0,0,0");
    EXPECT_EQ(csv[2], "2,0,1,0,0,1");
    EXPECT_EQ(csv[3], "3,0,0,0,0,0");

    const CentersRun empty = cmd_centers(cfg, dir / "empty");
    EXPECT_EQ(lines(empty.csv), (std::vector<std::string>{"class,ul,ur,ll,lr,total"}));
}

// ---- command line ---------------------------------------------------------

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch("cli");
    const std::string out = " --out " + (dir / "runs").string();

    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli("train --no-such-flag"), 2);
    EXPECT_EQ(run_cli("train --config " + write_config(dir, "model.chanels = 8\n").string() + out), 2);
    EXPECT_EQ(run_cli("train --config " + (dir / "missing.cfg").string() + out), 4);

    const std::string small = "data.size = 32\ndata.classes = 2\ndata.min_object_size = 8\n"
                              "data.max_object_size = 16\nmodel.channels = 4\nmsil.cam_reduction = 2\n"
                              "data.train_images = 4\ndata.test_images = 2\ntrain.epochs = 1\ntrain.batch_size = 2\n";
    EXPECT_EQ(run_cli("gradcheck --config " + write_config(dir, "data.size = 64\n").string() + out), 2);
    EXPECT_EQ(run_cli("train --config " + write_config(dir, small).string() + out), 0);
    EXPECT_EQ(run_cli("train --config " + write_config(dir, small + "optim.lr = 1e6\n").string() + out), 2);
    EXPECT_EQ(run_cli("heatmap --image 0 --checkpoint " + (dir / "nope.bin").string() + " --config " +
                      write_config(dir, small).string() + out),
              4);
    EXPECT_EQ(run_cli("centers --data " + (dir / "no_dataset").string() + out), 4);
    EXPECT_EQ(run_cli("dataset --seed 9 --config " + write_config(dir, small).string() + out), 0);
}
