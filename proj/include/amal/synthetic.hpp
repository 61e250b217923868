#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "amal/dataset.hpp"

namespace amal {

/// Desk-scale stand-in for melt-pool monitoring images: a bright pool on a
/// dark, noisy background. Class 1 pools are elongated and surrounded by
/// spatter; class 0 pools are compact. `overlap` in [0, 1] pushes both
/// classes' shape parameters toward each other to create hard samples.
struct SyntheticSpec {
    int train_per_class = 150;
    int validation_per_class = 100;
    int test_per_class = 100;
    int side = 64;
    double noise = 12.0;  // gray levels, std-dev
    double overlap = 0.35;
    std::uint64_t seed = 1;
    std::array<std::string, 2> class_names{"defect_free", "defective"};
};

/// Writes grayscale PNGs as `root/<split>/<class>/<nnnnn>.png` and returns
/// the scanned manifest. Output depends only on the spec.
DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec);

}  // namespace amal
