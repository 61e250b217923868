#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace amal {

namespace fs = std::filesystem;

/// Class index of the binary task: 0 or 1.
using Label = int;

inline bool is_valid_label(int v) { return v == 0 || v == 1; }

enum class Split { train, validation, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);  // throws std::invalid_argument

/// Who set a sample's assigned label. Higher rank wins; a lower-ranked
/// source may never replace a higher-ranked one.
enum class LabelOrigin { none, autolabel, oracle, human };

LabelOrigin label_origin(std::string_view label_source);

struct Sample {
    std::string id;         // path relative to the dataset root
    std::string image_ref;  // filesystem path of the image
    Split split = Split::train;
    std::optional<Label> true_label;
    std::optional<Label> assigned_label;
    /// "", "human", "oracle" or "autolabel:<model checksum>".
    std::string label_source;

    bool operator==(const Sample&) const = default;
};

struct DatasetManifest {
    std::vector<Sample> samples;
    std::array<std::string, 2> class_names{"class_0", "class_1"};
    fs::path source_root;
    std::string created_at;

    bool operator==(const DatasetManifest&) const = default;

    std::map<Split, std::size_t> split_counts() const;
    std::vector<Sample> samples_in(Split split) const;

    /// Linear lookup; use IdIndex for repeated access.
    const Sample* find(std::string_view id) const;
    Sample* find(std::string_view id);
};

/// id -> position in DatasetManifest::samples.
class IdIndex {
public:
    explicit IdIndex(const DatasetManifest& manifest);
    std::size_t at(const std::string& id) const;  // throws NotFoundError
    bool contains(const std::string& id) const { return map_.count(id) != 0; }

private:
    std::unordered_map<std::string, std::size_t> map_;
};

enum class ScanLayout { split_dirs, flat };

/// Builds a manifest from `root/<split>/<class>/<image>` (split_dirs) or
/// from `root/manifest.csv` (flat). Class indices follow the sorted class
/// directory names.
DatasetManifest scan_directory(const fs::path& root, ScanLayout layout);

/// The CSV carries only the per-sample columns; class names, source root
/// and creation time live in a `<path>.meta.json` sidecar when present.
DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

/// Serialized CSV body, rows sorted by id. `with_source` adds the
/// label_source provenance column.
std::string manifest_csv(const DatasetManifest& manifest, bool with_source);

/// Sets an absent assigned label. Refuses to overwrite an existing one.
void assign_label(DatasetManifest& manifest, const std::string& id, Label label,
                  std::string label_source);

/// Explicit correction: replaces an assigned label, subject to source
/// precedence (a lower-ranked source cannot replace a higher-ranked one).
void correct_label(DatasetManifest& manifest, const std::string& id, Label label,
                   std::string label_source);

/// Partition of the training split into labeled and unlabeled ids.
struct PoolState {
    std::set<std::string> labeled_ids;
    std::set<std::string> unlabeled_ids;

    bool operator==(const PoolState&) const = default;
    std::size_t size() const { return labeled_ids.size() + unlabeled_ids.size(); }
};

/// Draws `seed_size` train ids uniformly without replacement into the
/// labeled pool (assigned_label := true_label, source "oracle").
PoolState init_pools(DatasetManifest& manifest, std::size_t seed_size, std::uint64_t rng_seed);

/// Rebuilds a pool from a manifest's assigned labels (train split only).
PoolState pool_from_manifest(const DatasetManifest& manifest);

/// Throws IntegrityError if the pool is not a disjoint cover of the train
/// split or a labeled id lacks an assigned label.
void check_pool(const DatasetManifest& manifest, const PoolState& pool);

/// Throws IntegrityError if an id occurs twice or in two splits.
void check_manifest(const DatasetManifest& manifest);

struct PreprocessConfig {
    int side = 224;
    // ImageNet statistics used when the backbone was pretrained.
    std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
    std::array<float, 3> stddev{0.229f, 0.224f, 0.225f};
};

/// Row-major (H, W, 3) RGB tensor.
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    float at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

ImageTensor preprocess_image(const Sample& sample, const PreprocessConfig& cfg);

}  // namespace amal
