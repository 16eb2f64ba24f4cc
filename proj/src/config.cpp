#include "msil/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "msil/errors.hpp"

namespace msil {

namespace {

struct FieldError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double to_double(const std::string& s) {
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw FieldError("expected a finite number, got '" + s + "'");
    }
    return v;
}

long long to_integer(const std::string& s) {
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw FieldError("expected an integer, got '" + s + "'");
    return v;
}

int to_int(const std::string& s) {
    const long long v = to_integer(s);
    if (v < -2147483647LL || v > 2147483647LL) throw FieldError("integer out of range: " + s);
    return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& s) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw FieldError("expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw FieldError("expected true or false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    if (s.empty() || s == "none") return out;
    std::istringstream is(s);
    for (std::string item; std::getline(is, item, ',');) out.push_back(trim(item));
    return out;
}

struct Field {
    const char* key;
    std::function<void(RunConfig&, const std::string&)> parse;
    std::function<std::string(const RunConfig&)> format;
};

#define MSIL_INT_FIELD(KEY, MEMBER) \
    Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_int(v); }, \
            [](const RunConfig& c) { return std::to_string(c.MEMBER); } }
#define MSIL_DOUBLE_FIELD(KEY, MEMBER) \
    Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(v); }, \
            [](const RunConfig& c) { return fmt_double(c.MEMBER); } }
#define MSIL_BOOL_FIELD(KEY, MEMBER) \
    Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(v); }, \
            [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); } }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"name", [](RunConfig& c, const std::string& v) { c.name = v; }, [](const RunConfig& c) { return c.name; }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
         [](const RunConfig& c) { return c.out_dir; }},
        {"data.dir", [](RunConfig& c, const std::string& v) { c.data.dir = v; },
         [](const RunConfig& c) { return c.data.dir; }},
        MSIL_INT_FIELD("data.train_images", data.train_images),
        MSIL_INT_FIELD("data.test_images", data.test_images),
        MSIL_INT_FIELD("data.classes", data.classes),
        MSIL_INT_FIELD("data.size", data.size),
        MSIL_DOUBLE_FIELD("data.noise", data.noise),
        MSIL_INT_FIELD("data.max_objects", data.max_objects),
        MSIL_INT_FIELD("data.min_object_size", data.min_object_size),
        MSIL_INT_FIELD("data.max_object_size", data.max_object_size),
        {"model.head",
         [](RunConfig& c, const std::string& v) {
             if (v == "multi-branch") c.head = HeadKind::MultiBranch;
             else if (v == "single-branch") c.head = HeadKind::SingleBranch;
             else throw FieldError("expected multi-branch or single-branch, got '" + v + "'");
         },
         [](const RunConfig& c) {
             return std::string(c.head == HeadKind::MultiBranch ? "multi-branch" : "single-branch");
         }},
        MSIL_INT_FIELD("model.channels", channels),
        MSIL_BOOL_FIELD("msil.enabled", msil_enabled),
        MSIL_BOOL_FIELD("msil.alignment", msil.enable_alignment),
        MSIL_BOOL_FIELD("msil.separation", msil.enable_separation),
        MSIL_BOOL_FIELD("msil.apply_to_cls", msil.apply_to_cls),
        MSIL_BOOL_FIELD("msil.apply_to_reg", msil.apply_to_reg),
        MSIL_BOOL_FIELD("msil.share_encoder_stack", msil.share_encoder_stack),
        MSIL_INT_FIELD("msil.cam_reduction", msil.cam_reduction),
        {"loss.cls",
         [](RunConfig& c, const std::string& v) {
             if (v == "focal") c.loss.cls = ClsLossKind::Focal;
             else if (v == "ce") c.loss.cls = ClsLossKind::CrossEntropy;
             else throw FieldError("expected focal or ce, got '" + v + "'");
         },
         [](const RunConfig& c) { return to_string(c.loss.cls); }},
        MSIL_DOUBLE_FIELD("loss.focal_alpha", loss.focal_alpha),
        MSIL_DOUBLE_FIELD("loss.focal_gamma", loss.focal_gamma),
        {"loss.reg",
         [](RunConfig& c, const std::string& v) {
             if (v == "iou") c.loss.reg = RegLossKind::Iou;
             else if (v == "giou") c.loss.reg = RegLossKind::Giou;
             else throw FieldError("expected iou or giou, got '" + v + "'");
         },
         [](const RunConfig& c) { return to_string(c.loss.reg); }},
        MSIL_DOUBLE_FIELD("loss.cls_weight", loss.cls_weight),
        {"loss.aux",
         [](RunConfig& c, const std::string& v) {
             c.loss.aux.clear();
             for (const auto& item : split_list(v)) {
                 const auto colon = item.find(':');
                 const std::string kind = trim(item.substr(0, colon));
                 if (kind != "centerness") throw FieldError("unknown auxiliary loss '" + kind + "'");
                 const double w = colon == std::string::npos ? 1.0 : to_double(trim(item.substr(colon + 1)));
                 c.loss.aux.push_back({AuxLossKind::CenternessBce, w});
             }
         },
         [](const RunConfig& c) {
             if (c.loss.aux.empty()) return std::string("none");
             std::string s;
             for (const auto& a : c.loss.aux) s += (s.empty() ? "" : ",") + to_string(a.kind) + ":" + fmt_double(a.weight);
             return s;
         }},
        MSIL_DOUBLE_FIELD("optim.lr", optim.learning_rate),
        MSIL_DOUBLE_FIELD("optim.momentum", optim.momentum),
        MSIL_DOUBLE_FIELD("optim.weight_decay", optim.weight_decay),
        {"optim.decay_epochs",
         [](RunConfig& c, const std::string& v) {
             c.optim.decay_epochs.clear();
             for (const auto& item : split_list(v)) c.optim.decay_epochs.push_back(to_int(item));
         },
         [](const RunConfig& c) {
             if (c.optim.decay_epochs.empty()) return std::string("none");
             std::string s;
             for (int e : c.optim.decay_epochs) s += (s.empty() ? "" : ",") + std::to_string(e);
             return s;
         }},
        MSIL_DOUBLE_FIELD("optim.decay_factor", optim.decay_factor),
        MSIL_INT_FIELD("train.epochs", train.epochs),
        MSIL_INT_FIELD("train.batch_size", train.batch_size),
        MSIL_DOUBLE_FIELD("eval.score_thresh", eval.score_thresh),
        MSIL_DOUBLE_FIELD("eval.nms_iou", eval.nms_iou),
        MSIL_INT_FIELD("eval.max_detections", eval.max_detections),
    };
    return table;
}

#undef MSIL_INT_FIELD
#undef MSIL_DOUBLE_FIELD
#undef MSIL_BOOL_FIELD

void require(bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(std::string("config key '") + key + "': " + what);
}

}  // namespace

void RunConfig::validate() const {
    require(!name.empty() && name.find('/') == std::string::npos, "name", "must be non-empty without '/'");
    require(data.train_images >= 1, "data.train_images", "must be >= 1");
    require(data.test_images >= 1, "data.test_images", "must be >= 1");
    require(data.classes >= 2 && data.classes <= kMaxClasses, "data.classes",
            "must be in [2," + std::to_string(kMaxClasses) + "]");
    require(data.size >= 8 && data.size % kStride == 0, "data.size", "must be >= 8 and a multiple of 4");
    require(data.noise >= 0 && data.noise <= 1, "data.noise", "must be in [0,1]");
    require(data.max_objects >= 1 && data.max_objects <= 8, "data.max_objects", "must be in [1,8]");
    require(data.min_object_size >= 4, "data.min_object_size", "must be >= 4");
    require(data.max_object_size >= data.min_object_size, "data.max_object_size", "must be >= data.min_object_size");
    require(data.max_object_size <= data.size, "data.max_object_size", "must not exceed data.size");
    require(channels >= 1 && channels <= 256, "model.channels", "must be in [1,256]");
    require(msil.cam_reduction >= 1 && channels % msil.cam_reduction == 0, "msil.cam_reduction",
            "must divide model.channels");
    require(!(msil_enabled && head == HeadKind::SingleBranch), "msil.enabled",
            "MSIL requires model.head = multi-branch");
    require(msil.channels == channels, "model.channels", "out of sync with msil width");
    require(loss.focal_alpha >= 0 && loss.focal_alpha <= 1, "loss.focal_alpha", "must be in [0,1]");
    require(loss.focal_gamma >= 0 && loss.focal_gamma <= 10, "loss.focal_gamma", "must be in [0,10]");
    require(loss.cls_weight > 0, "loss.cls_weight", "must be > 0");
    for (const auto& a : loss.aux) require(a.weight >= 0, "loss.aux", "weights must be >= 0");
    require(optim.learning_rate > 0 && optim.learning_rate <= 10, "optim.lr", "must be in (0,10]");
    require(optim.momentum >= 0 && optim.momentum < 1, "optim.momentum", "must be in [0,1)");
    require(optim.weight_decay >= 0 && optim.weight_decay < 1, "optim.weight_decay", "must be in [0,1)");
    for (int e : optim.decay_epochs) require(e >= 0, "optim.decay_epochs", "epochs must be >= 0");
    require(optim.decay_factor > 0 && optim.decay_factor <= 1, "optim.decay_factor", "must be in (0,1]");
    require(train.epochs >= 0, "train.epochs", "must be >= 0");
    require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
    require(eval.score_thresh >= 0 && eval.score_thresh < 1, "eval.score_thresh", "must be in [0,1)");
    require(eval.nms_iou > 0 && eval.nms_iou <= 1, "eval.nms_iou", "must be in (0,1]");
    require(eval.max_detections >= 1, "eval.max_detections", "must be >= 1");
}

RunConfig parse_config(std::string_view text, const std::string& source) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream is{std::string(text)};
    int line_no = 0;
    for (std::string raw; std::getline(is, raw);) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        const auto& table = fields();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
        if (it == table.end()) throw ConfigError(where + ": unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
        try {
            it->parse(cfg, value);
        } catch (const FieldError& e) {
            throw ConfigError(where + ": key '" + key + "': " + e.what());
        }
    }
    cfg.msil.channels = cfg.channels;
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str(), path.string());
}

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.key) + " = " + f.format(cfg) + "\n";
    return out;
}

ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig m;
    m.head = cfg.head;
    m.in_channels = 1;
    m.channels = cfg.channels;
    m.num_classes = cfg.data.classes;
    if (cfg.msil_enabled) {
        m.msil = cfg.msil;
        m.msil->channels = cfg.channels;
    }
    return m;
}

DecodeOptions decode_options(const RunConfig& cfg) {
    DecodeOptions d;
    d.score_thresh = cfg.eval.score_thresh;
    d.iou_thresh = cfg.eval.nms_iou;
    d.max_detections = cfg.eval.max_detections;
    d.stride = kStride;
    return d;
}

DatasetOptions dataset_options(const RunConfig& cfg, Split split) {
    DatasetOptions d;
    d.seed = stream_seed(cfg.seed, split == Split::Train ? "data/train" : "data/test");
    d.num_images = split == Split::Train ? cfg.data.train_images : cfg.data.test_images;
    d.num_classes = cfg.data.classes;
    d.size = cfg.data.size;
    d.noise = cfg.data.noise;
    d.max_objects = cfg.data.max_objects;
    d.min_object_size = cfg.data.min_object_size;
    d.max_object_size = cfg.data.max_object_size;
    return d;
}

}  // namespace msil
