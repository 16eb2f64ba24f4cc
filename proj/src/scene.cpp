#include "msil/scene.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "msil/errors.hpp"
#include "msil/nn.hpp"

namespace msil {

void SceneSpec::validate(int num_classes) const {
    if (size <= 0) throw std::invalid_argument("scene: size must be positive");
    for (const auto& o : objects) {
        if (o.label < 1 || o.label > num_classes) {
            throw std::invalid_argument("scene: label " + std::to_string(o.label) + " outside [1," +
                                        std::to_string(num_classes) + "]");
        }
        if (!(o.box.x2 > o.box.x1 && o.box.y2 > o.box.y1)) throw std::invalid_argument("scene: box not well-ordered");
        if (o.box.x1 < 0 || o.box.y1 < 0 || o.box.x2 > size || o.box.y2 > size) {
            throw std::invalid_argument("scene: box outside image bounds");
        }
    }
}

void DatasetOptions::validate() const {
    if (num_images < 1) throw std::invalid_argument("dataset: need at least one image");
    if (num_classes < 2 || num_classes > kMaxClasses) {
        throw std::invalid_argument("dataset: classes must be in [2," + std::to_string(kMaxClasses) + "]");
    }
    if (max_objects < 1) throw std::invalid_argument("dataset: max_objects must be >= 1");
    if (min_object_size < 4 || max_object_size < min_object_size) {
        throw std::invalid_argument("dataset: object size range must satisfy 4 <= min <= max");
    }
    if (size < max_object_size) {
        throw std::invalid_argument("dataset: image size " + std::to_string(size) +
                                    " is too small for objects up to " + std::to_string(max_object_size) + " px");
    }
    if (!(noise >= 0.0)) throw std::invalid_argument("dataset: noise must be >= 0");
}

double class_intensity(int label) { return 0.35 + 0.15 * label; }

namespace {

// u, v are pixel-center coordinates normalized to [0,1] inside the box.
bool inside_shape(int label, double u, double v) {
    switch (label) {
        case 1: return true;                                                          // filled rectangle
        case 2: return (2 * u - 1) * (2 * u - 1) + (2 * v - 1) * (2 * v - 1) <= 1.0;  // ellipse
        case 3: return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;  // cross
        case 4: return !(u > 0.25 && u < 0.75 && v > 0.25 && v < 0.75);               // ring
        default: return 2.0 * std::abs(u - 0.5) <= v;                                 // triangle
    }
}

}  // namespace

Tensor render_scene(const SceneSpec& scene, std::uint64_t noise_seed) {
    const int S = scene.size;
    std::vector<double> pixels(static_cast<std::size_t>(S) * S, 0.0);
    for (const auto& o : scene.objects) {
        std::mt19937_64 look(o.appearance_seed);
        const double jitter = std::uniform_real_distribution<double>(-0.03, 0.03)(look);
        const double value = class_intensity(o.label) + jitter;
        const int x1 = static_cast<int>(std::floor(o.box.x1)), x2 = static_cast<int>(std::ceil(o.box.x2));
        const int y1 = static_cast<int>(std::floor(o.box.y1)), y2 = static_cast<int>(std::ceil(o.box.y2));
        for (int y = std::max(0, y1); y < std::min(S, y2); ++y)
            for (int x = std::max(0, x1); x < std::min(S, x2); ++x) {
                const double u = (x + 0.5 - o.box.x1) / o.box.width();
                const double v = (y + 0.5 - o.box.y1) / o.box.height();
                if (u < 0 || u > 1 || v < 0 || v > 1) continue;
                if (inside_shape(o.label, u, v)) pixels[static_cast<std::size_t>(y) * S + x] = value;
            }
    }
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& p : pixels) {
        if (scene.noise > 0) p += scene.noise * gauss(rng);
        p = static_cast<double>(static_cast<float>(p));
    }
    return Tensor::from_data({1, 1, S, S}, std::move(pixels));
}

namespace {

bool overlaps(const Box& a, const Box& b, double gap) {
    return a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap;
}

}  // namespace

std::vector<Sample> generate_dataset(const DatasetOptions& opts) {
    opts.validate();
    std::vector<Sample> out;
    out.reserve(opts.num_images);
    for (int i = 0; i < opts.num_images; ++i) {
        std::mt19937_64 rng(stream_seed(opts.seed, "scene/" + std::to_string(i)));
        auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

        SceneSpec scene;
        scene.size = opts.size;
        scene.noise = opts.noise;
        const int wanted = uniform_int(1, opts.max_objects);
        for (int attempt = 0; attempt < 200 && static_cast<int>(scene.objects.size()) < wanted; ++attempt) {
            const int w = uniform_int(opts.min_object_size, opts.max_object_size);
            const int h = uniform_int(opts.min_object_size, opts.max_object_size);
            const int x1 = uniform_int(0, opts.size - w);
            const int y1 = uniform_int(0, opts.size - h);
            const Box box{double(x1), double(y1), double(x1 + w), double(y1 + h)};
            bool clash = false;
            for (const auto& o : scene.objects) clash = clash || overlaps(o.box, box, 2.0);
            if (clash) continue;
            const int label = uniform_int(1, opts.num_classes);
            scene.objects.push_back({label, box, rng()});
        }
        const std::uint64_t noise_seed = rng();
        Sample s;
        s.id = i;
        s.scene = std::move(scene);
        s.image = render_scene(s.scene, noise_seed);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) parts.push_back(cur);
    return parts;
}

double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IoError("bad number '" + s + "' in " + where);
    }
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const DatasetInfo& info) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    {
        std::ofstream os(dir / "dataset.txt", std::ios::trunc);
        os << "size = " << info.size << "\nchannels = " << info.channels << "\nclasses = " << info.num_classes
           << "\nimages = " << samples.size() << "\nnoise = "
           << format_number(samples.empty() ? 0.0 : samples.front().scene.noise) << '\n';
        if (!os) throw IoError("failed writing " + (dir / "dataset.txt").string());
    }
    std::ofstream meta(dir / "meta.csv", std::ios::trunc);
    meta << "image_id,objects\n";
    for (const auto& s : samples) {
        meta << s.id;
        for (const auto& o : s.scene.objects) {
            meta << ',' << o.label << ',' << format_number(o.box.x1) << ',' << format_number(o.box.y1) << ','
                 << format_number(o.box.x2) << ',' << format_number(o.box.y2);
        }
        meta << '\n';

        const auto path = dir / ("img_" + std::to_string(s.id) + ".bin");
        std::ofstream img(path, std::ios::binary | std::ios::trunc);
        for (double v : s.image.data()) {
            auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            unsigned char bytes[4];
            for (int b = 0; b < 4; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
            img.write(reinterpret_cast<const char*>(bytes), 4);
        }
        if (!img) throw IoError("failed writing " + path.string());
    }
    if (!meta) throw IoError("failed writing " + (dir / "meta.csv").string());
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir, DatasetInfo* info_out) {
    std::ifstream info_file(dir / "dataset.txt");
    if (!info_file) throw IoError("no dataset.txt in " + dir.string());
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(info_file, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    DatasetInfo info;
    const std::string where = (dir / "dataset.txt").string();
    if (kv.count("size")) info.size = static_cast<int>(parse_double(kv["size"], where));
    if (kv.count("channels")) info.channels = static_cast<int>(parse_double(kv["channels"], where));
    if (kv.count("classes")) info.num_classes = static_cast<int>(parse_double(kv["classes"], where));
    const double noise = kv.count("noise") ? parse_double(kv["noise"], where) : 0.0;
    if (info_out) *info_out = info;

    std::ifstream meta(dir / "meta.csv");
    if (!meta) throw IoError("no meta.csv in " + dir.string());
    std::string line;
    std::getline(meta, line);  // header
    std::vector<Sample> out;
    const std::string meta_where = (dir / "meta.csv").string();
    while (std::getline(meta, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        if ((fields.size() - 1) % 5 != 0) throw IoError("malformed row in " + meta_where + ": " + line);
        Sample s;
        s.id = static_cast<int>(parse_double(fields[0], meta_where));
        s.scene.size = info.size;
        s.scene.noise = noise;
        for (std::size_t f = 1; f < fields.size(); f += 5) {
            SceneObject o;
            o.label = static_cast<int>(parse_double(fields[f], meta_where));
            o.box = {parse_double(fields[f + 1], meta_where), parse_double(fields[f + 2], meta_where),
                     parse_double(fields[f + 3], meta_where), parse_double(fields[f + 4], meta_where)};
            s.scene.objects.push_back(o);
        }
        const auto path = dir / ("img_" + std::to_string(s.id) + ".bin");
        std::ifstream img(path, std::ios::binary);
        if (!img) throw IoError("missing image file " + path.string());
        const std::size_t count = static_cast<std::size_t>(info.channels) * info.size * info.size;
        std::vector<double> pixels(count);
        for (double& p : pixels) {
            unsigned char bytes[4];
            if (!img.read(reinterpret_cast<char*>(bytes), 4)) throw IoError("truncated image file " + path.string());
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
            p = std::bit_cast<float>(bits);
        }
        if (img.peek() != std::char_traits<char>::eof()) throw IoError("oversized image file " + path.string());
        s.image = Tensor::from_data({1, info.channels, info.size, info.size}, std::move(pixels));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace msil
