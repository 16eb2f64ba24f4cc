#include "msil/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "msil/errors.hpp"
#include "msil/ops.hpp"

namespace msil {

std::size_t count_elements(const ParamList& params) {
    std::size_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    return total;
}

Conv2d Conv2d::create(int in_channels, int out_channels, int kernel) {
    if (in_channels <= 0 || out_channels <= 0) throw ShapeError("conv2d: channel counts must be positive");
    if (kernel <= 0 || kernel % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
    Conv2d c;
    c.weight = Tensor::zeros({out_channels, in_channels, kernel, kernel}, true);
    c.bias = Tensor::zeros({1, out_channels, 1, 1}, true);
    return c;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

Tensor conv2d_forward(const Conv2d& layer, const Tensor& x) {
    if (x.shape().c != layer.in_channels()) {
        throw ShapeError("conv2d_forward: input " + x.shape().str() + " but layer expects " +
                         std::to_string(layer.in_channels()) + " channels");
    }
    return conv2d(x, layer.weight, layer.bias);
}

ChannelMlp ChannelMlp::create(int channels, int reduction) {
    if (reduction <= 0 || channels % reduction != 0) {
        throw ShapeError("channel MLP: " + std::to_string(channels) + " channels not divisible by " +
                         std::to_string(reduction));
    }
    return {Conv2d::create(channels, channels / reduction, 1),
            Conv2d::create(channels / reduction, channels, 1)};
}

void ChannelMlp::collect(const std::string& prefix, ParamList& out) const {
    reduce.collect(prefix + ".reduce", out);
    expand.collect(prefix + ".expand", out);
}

Tensor channel_mlp_forward(const ChannelMlp& mlp, const Tensor& x) {
    const Shape s = x.shape();
    if (s.h != 1 || s.w != 1 || s.c != mlp.channels()) {
        throw ShapeError("channel_mlp_forward: expected N×" + std::to_string(mlp.channels()) +
                         "×1×1, got " + s.str());
    }
    return conv2d_forward(mlp.expand, relu(conv2d_forward(mlp.reduce, x)));
}

DenseHead DenseHead::create(int in_features, int out_features) {
    DenseHead h;
    h.weight = Tensor::zeros({out_features, in_features, 1, 1}, true);
    h.bias = Tensor::zeros({1, out_features, 1, 1}, true);
    return h;
}

void DenseHead::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

Tensor dense_head_forward(const DenseHead& head, const Tensor& x) {
    return conv2d(x, head.weight, head.bias);
}

std::uint64_t stream_seed(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 1469598103934665603ull ^ seed;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

void init_tensor(Tensor& t, std::uint64_t seed, const std::string& name, InitScheme scheme) {
    auto values = t.mutable_data();
    const Shape s = t.shape();
    const bool is_bias = name.ends_with(".bias");
    if (scheme == InitScheme::Zero || is_bias) {
        std::fill(values.begin(), values.end(), 0.0);
        return;
    }
    const double fan_in = static_cast<double>(s.c) * s.h * s.w;
    const double bound = std::sqrt(3.0 / fan_in);
    std::mt19937_64 rng(stream_seed(seed, name));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : values) v = dist(rng);
}

void init_params(ParamList& params, std::uint64_t seed, InitScheme scheme) {
    for (auto& p : params) init_tensor(p.tensor, seed, p.name, scheme);
}

double scheduled_learning_rate(const SgdOptions& opts, int epoch) {
    double lr = opts.learning_rate;
    for (int boundary : opts.decay_epochs)
        if (epoch >= boundary) lr *= opts.decay_factor;
    return lr;
}

SgdOptimizer::SgdOptimizer(ParamList params, SgdOptions opts)
    : params_(std::move(params)), opts_(std::move(opts)), lr_(opts_.learning_rate) {
    if (!(opts_.learning_rate >= 0.0)) throw std::invalid_argument("sgd: learning rate must be >= 0");
    if (!(opts_.momentum >= 0.0 && opts_.momentum < 1.0)) throw std::invalid_argument("sgd: momentum must be in [0,1)");
    if (!(opts_.weight_decay >= 0.0)) throw std::invalid_argument("sgd: weight decay must be >= 0");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
}

void SgdOptimizer::set_epoch(int epoch) { lr_ = scheduled_learning_rate(opts_, epoch); }

void SgdOptimizer::step() {
    for (const auto& p : params_) {
        if (!p.tensor.has_grad()) throw std::logic_error("sgd: parameter '" + p.name + "' has no gradient");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor t = params_[k].tensor;
        auto value = t.mutable_data();
        const auto grad = t.grad();
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            v[i] = opts_.momentum * v[i] + grad[i] + opts_.weight_decay * value[i];
            value[i] -= lr_ * v[i];
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

namespace {

constexpr char kMagic[8] = {'M', 'S', 'I', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw IoError("checkpoint truncated: " + path.string());
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamList& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, params.size());
    for (const auto& p : params) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const Shape s = p.tensor.shape();
        for (int d : {s.n, s.c, s.h, s.w}) put<std::int64_t>(os, d);
        for (double v : p.tensor.data()) put<double>(os, v);
    }
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

ParamList load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + 8, kMagic)) {
        throw IoError("not a checkpoint file: " + path.string());
    }
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = get<std::uint64_t>(is, path);
    ParamList out;
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = get<std::uint32_t>(is, path);
        if (len > 4096) throw IoError("checkpoint parameter name too long in " + path.string());
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError("checkpoint truncated: " + path.string());
        std::int64_t dims[4];
        for (auto& d : dims) {
            d = get<std::int64_t>(is, path);
            if (d <= 0 || d > (1 << 20)) throw IoError("bad tensor shape in checkpoint " + path.string());
        }
        const Shape shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                          static_cast<int>(dims[2]), static_cast<int>(dims[3])};
        std::vector<double> data(shape.numel());
        for (double& v : data) v = get<double>(is, path);
        out.push_back({std::move(name), Tensor::from_data(shape, std::move(data), true)});
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw IoError("trailing bytes after checkpoint records in " + path.string());
    }
    return out;
}

void load_checkpoint_into(const std::filesystem::path& path, ParamList& params) {
    const ParamList stored = load_checkpoint(path);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& p : stored) by_name[p.name] = &p.tensor;
    if (by_name.size() != params.size()) {
        throw IoError("checkpoint holds " + std::to_string(by_name.size()) + " parameters, model has " +
                      std::to_string(params.size()));
    }
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw IoError("checkpoint lacks parameter '" + p.name + "'");
        if (!(it->second->shape() == p.tensor.shape())) {
            throw IoError("checkpoint shape mismatch for '" + p.name + "': " + it->second->shape().str() +
                          " vs " + p.tensor.shape().str());
        }
        auto dst = p.tensor.mutable_data();
        const auto src = it->second->data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

}  // namespace msil
