#pragma once

// Synthetic detection scenes: flat-intensity shapes on a noisy background.
//
// On-disk dataset layout (one directory per split):
//   dataset.txt       key = value lines: size, channels, classes, images
//   meta.csv          header "image_id,objects"; each row is the id followed by
//                     one class,x1,y1,x2,y2 group per object
//   img_{id}.bin      channels*size*size little-endian float32, row-major

#include <cstdint>
#include <filesystem>
#include <vector>

#include "msil/losses.hpp"
#include "msil/tensor.hpp"

namespace msil {

struct SceneObject {
    int label = 1;  // in [1, K]
    Box box;        // integral pixel corners, x2 > x1, y2 > y1
    std::uint64_t appearance_seed = 0;

    friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneSpec {
    int size = 64;
    std::vector<SceneObject> objects;
    double noise = 0.1;

    void validate(int num_classes) const;
    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Sample {
    int id = 0;
    Tensor image;  // 1×1×S×S
    SceneSpec scene;
};

struct DatasetOptions {
    std::uint64_t seed = 0;
    int num_images = 1;
    int num_classes = 3;
    int size = 64;
    double noise = 0.1;
    int max_objects = 3;
    int min_object_size = 12;
    int max_object_size = 28;

    void validate() const;
};

inline constexpr int kMaxClasses = 5;

// Mean foreground intensity of class `label`; objects jitter by at most 0.03.
double class_intensity(int label);

// Deterministic rendering; pixel values are rounded to float32.
Tensor render_scene(const SceneSpec& scene, std::uint64_t noise_seed);

std::vector<Sample> generate_dataset(const DatasetOptions& opts);

struct DatasetInfo {
    int size = 64;
    int channels = 1;
    int num_classes = 3;
};

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const DatasetInfo& info);
std::vector<Sample> load_dataset(const std::filesystem::path& dir, DatasetInfo* info = nullptr);

}  // namespace msil
