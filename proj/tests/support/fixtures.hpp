#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unistd.h>

#include "amal/active_learning.hpp"
#include "amal/backbone.hpp"
#include "amal/classifier.hpp"
#include "amal/synthetic.hpp"

namespace amal::test {

/// Directory removed on destruction; unique per process and instance.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = std::filesystem::temp_directory_path() /
                ("amal-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
                 std::to_string(stamp % 1000000));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        if (!std::getenv("AMAL_KEEP_TEST_DIRS")) std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

/// Desk-scale setup shared by the heavier tests: compact VGG16-topology
/// backbone, 96 px inputs and a small head.
inline constexpr std::array<int, 5> kDeskWidths{8, 16, 32, 64, 64};
inline constexpr std::uint64_t kDeskBackboneSeed = 7;

inline ModelConfig desk_model_config(const std::filesystem::path& weights = {}) {
    ModelConfig mc;
    mc.backbone_weights = weights;
    mc.input_side = 96;
    mc.head_widths = {32, 16};
    mc.l2_lambda = 1e-4;
    return mc;
}

inline std::shared_ptr<const Backbone> desk_backbone() {
    static const auto bb = std::make_shared<const Backbone>(Backbone::initialized(kDeskWidths, kDeskBackboneSeed));
    return bb;
}

inline TrainConfig desk_train_config(std::uint64_t seed = 1) {
    TrainConfig tc;
    tc.optimizer = OptimizerKind::adam;
    tc.learning_rate = 1e-3;
    tc.batch_size = 8;
    tc.epochs = 20;
    tc.rng_seed = seed;
    return tc;
}

/// Synthetic dataset written once per process.
struct DeskData {
    TempDir dir;
    DatasetManifest manifest;
    std::filesystem::path manifest_path;
};

inline SyntheticSpec desk_spec(int train_per_class) {
    SyntheticSpec spec;
    spec.side = 96;
    spec.overlap = 0.3;
    spec.seed = 3;
    spec.train_per_class = train_per_class;
    spec.validation_per_class = 100;
    spec.test_per_class = 100;
    return spec;
}

inline const DeskData& desk_data(int train_per_class = 150) {
    static std::map<int, std::unique_ptr<DeskData>> cache;
    auto& slot = cache[train_per_class];
    if (!slot) {
        slot = std::make_unique<DeskData>();
        slot->manifest = write_synthetic_dataset(slot->dir / "data", desk_spec(train_per_class));
        slot->manifest_path = slot->dir / "manifest.csv";
        save_manifest(slot->manifest, slot->manifest_path);
    }
    return *slot;
}

}  // namespace amal::test
