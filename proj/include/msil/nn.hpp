#pragma once

// Parameterized layers, initialization, SGD and parameter checkpoints.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msil/tensor.hpp"

namespace msil {

struct NamedParam {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

std::size_t count_elements(const ParamList& params);

// Shape-preserving stride-1 convolution.
struct Conv2d {
    Tensor weight;  // Cout×Cin×k×k
    Tensor bias;    // 1×Cout×1×1

    static Conv2d create(int in_channels, int out_channels, int kernel);

    [[nodiscard]] int in_channels() const { return weight.shape().c; }
    [[nodiscard]] int out_channels() const { return weight.shape().n; }
    [[nodiscard]] int kernel() const { return weight.shape().h; }

    void collect(const std::string& prefix, ParamList& out) const;
};

Tensor conv2d_forward(const Conv2d& layer, const Tensor& x);

// Two channel-axis affine maps C -> C/r -> C with a ReLU between.
struct ChannelMlp {
    Conv2d reduce;
    Conv2d expand;

    static ChannelMlp create(int channels, int reduction);

    [[nodiscard]] int channels() const { return reduce.in_channels(); }
    void collect(const std::string& prefix, ParamList& out) const;
};

// x must be N×C×1×1.
Tensor channel_mlp_forward(const ChannelMlp& mlp, const Tensor& x);

// Fully connected projection applied independently at every grid location.
struct DenseHead {
    Tensor weight;  // out×in×1×1
    Tensor bias;    // 1×out×1×1

    static DenseHead create(int in_features, int out_features);
    void collect(const std::string& prefix, ParamList& out) const;
};

Tensor dense_head_forward(const DenseHead& head, const Tensor& x);

enum class InitScheme {
    FanInUniform,  // U(-sqrt(3/fan_in), sqrt(3/fan_in)), zero bias
    Zero,
};

// Each tensor draws from its own stream keyed by (seed, name), so adding or
// removing a layer never shifts the values of the others.
void init_tensor(Tensor& t, std::uint64_t seed, const std::string& name, InitScheme scheme);
void init_params(ParamList& params, std::uint64_t seed, InitScheme scheme = InitScheme::FanInUniform);

std::uint64_t stream_seed(std::uint64_t seed, const std::string& name);

struct SgdOptions {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int> decay_epochs{8, 11};
    double decay_factor = 0.1;

    friend bool operator==(const SgdOptions&, const SgdOptions&) = default;
};

// Step schedule: base * factor^(number of boundaries <= epoch), epochs 0-based.
double scheduled_learning_rate(const SgdOptions& opts, int epoch);

class SgdOptimizer {
public:
    SgdOptimizer(ParamList params, SgdOptions opts);

    void set_epoch(int epoch);
    [[nodiscard]] double learning_rate() const { return lr_; }

    // v <- momentum*v + grad + weight_decay*param ; param <- param - lr*v
    void step();
    void zero_grad();

    [[nodiscard]] const ParamList& params() const { return params_; }
    [[nodiscard]] const std::vector<std::vector<double>>& velocity() const { return velocity_; }

private:
    ParamList params_;
    SgdOptions opts_;
    double lr_;
    std::vector<std::vector<double>> velocity_;
};

// Binary layout, all integers and floats little-endian:
//   "MSILCKPT" | u32 version | u64 count
//   count × ( u32 name_len | name bytes | 4 × i64 shape (N,C,H,W) | f64 data[] )
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParamList& params);
ParamList load_checkpoint(const std::filesystem::path& path);
// Copies values by name into existing tensors; names and shapes must match exactly.
void load_checkpoint_into(const std::filesystem::path& path, ParamList& params);

}  // namespace msil
