#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "amal/backbone.hpp"
#include "amal/dataset.hpp"

namespace amal {

enum class BackboneKind { vgg16_imagenet };
enum class OptimizerKind { sgd, adam, rmsprop };

std::string_view to_string(BackboneKind k);
std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);  // throws std::invalid_argument

struct ModelConfig {
    BackboneKind backbone = BackboneKind::vgg16_imagenet;
    /// Pretrained 13-layer weights; see tools/export_vgg16_weights.py.
    std::filesystem::path backbone_weights;
    bool freeze_backbone = true;
    std::array<int, 2> head_widths{256, 64};
    /// L2 coefficient on the two hidden dense kernels (biases excluded).
    double l2_lambda = 1e-3;
    int input_side = 224;

    bool operator==(const ModelConfig&) const = default;
    void validate() const;
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::sgd;
    double learning_rate = 0.01;
    int batch_size = 4;
    int epochs = 60;
    std::uint64_t rng_seed = 0;
    /// Fixed reduction order everywhere; off allows completion-order
    /// gradient reduction when the backbone is trainable.
    bool deterministic = true;
    /// Threads for image decoding and backbone passes.
    unsigned workers = 1;

    bool operator==(const TrainConfig&) const = default;
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    /// NaN when no validation samples were supplied.
    double val_accuracy = 0.0;

    bool operator==(const EpochRecord& o) const;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    double final_train_accuracy = 0.0;
    double final_val_accuracy = 0.0;
};

/// Two ReLU dense layers and one sigmoid unit, in double precision.
/// Parameters are ordered W1, b1, W2, b2, W3, b3 with W stored (out, in).
class Head {
public:
    static constexpr std::size_t kParams = 6;

    Head() = default;
    Head(std::size_t input_size, std::array<int, 2> widths, std::uint64_t seed);

    std::size_t input_size() const { return static_cast<std::size_t>(params_[0].cols()); }
    std::size_t parameter_count() const;

    std::array<Eigen::MatrixXd, kParams>& params() { return params_; }
    const std::array<Eigen::MatrixXd, kParams>& params() const { return params_; }

    /// Output logits for features stored one sample per column.
    Eigen::RowVectorXd logits(const Eigen::MatrixXd& features) const;

    struct LossBreakdown {
        double total = 0.0;    // bce + penalty
        double bce = 0.0;      // mean binary cross-entropy
        double penalty = 0.0;  // l2_lambda * (|W1|^2 + |W2|^2)
    };

    /// Loss on a batch; when `grads` is non-null it receives dTotal/dparam
    /// and `grad_features` (if non-null) receives dTotal/dfeatures.
    LossBreakdown loss(const Eigen::MatrixXd& features, std::span<const Label> labels, double l2_lambda,
                       std::array<Eigen::MatrixXd, kParams>* grads = nullptr,
                       Eigen::MatrixXd* grad_features = nullptr) const;

    bool operator==(const Head& o) const;

private:
    std::array<Eigen::MatrixXd, kParams> params_;
};

/// Optimizer slots for every trainable tensor (head first, then backbone
/// conv weights and biases when trainable).
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::sgd;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first;   // Adam m
    std::vector<std::vector<double>> second;  // Adam v / RMSprop mean square

    bool operator==(const OptimizerState&) const = default;
};

/// Backbone outputs keyed by sample id and image path. Only meaningful
/// while the backbone is frozen; shared between model copies.
class FeatureCache {
public:
    std::shared_ptr<const std::vector<float>> get(const Sample& s) const;
    void put(const Sample& s, std::shared_ptr<const std::vector<float>> features);
    std::size_t size() const;

private:
    mutable std::mutex mu_;
    std::unordered_map<std::string, std::shared_ptr<const std::vector<float>>> entries_;
};

class Model {
public:
    ModelConfig config;
    std::shared_ptr<const Backbone> backbone;
    Head head;
    OptimizerState optimizer;
    std::vector<EpochRecord> history;
    std::shared_ptr<FeatureCache> cache = std::make_shared<FeatureCache>();

    PreprocessConfig preprocess() const;
    std::size_t trainable_parameter_count() const;
    std::size_t total_parameter_count() const;

    /// Backbone features for each sample, in order. Uses the cache when the
    /// backbone is frozen. Throws DecodeError naming the failing sample.
    std::vector<std::shared_ptr<const std::vector<float>>> features(std::span<const Sample> samples,
                                                                    unsigned workers = 1) const;

    /// SHA-256 over the serialized weights.
    std::string weights_checksum() const;
};

/// Loads the pretrained backbone and initializes the head from rng_seed.
/// Throws BackboneUnavailableError before any training can start.
Model build_model(const ModelConfig& cfg, std::uint64_t rng_seed);

/// Same, with an already loaded backbone (shared, not copied).
Model build_model(const ModelConfig& cfg, std::shared_ptr<const Backbone> backbone, std::uint64_t rng_seed);

std::pair<Model, TrainReport> train(Model model, std::span<const Sample> train_samples, const TrainConfig& cfg,
                                    std::span<const Sample> val_samples);

/// Continues from the current weights; the head is not reinitialized.
Model fine_tune(Model model, std::span<const Sample> labeled_samples, const TrainConfig& cfg);

/// Probability of class 1 for each sample, order preserved.
std::vector<double> predict_proba(const Model& model, std::span<const Sample> samples, unsigned workers = 1);

/// 1 iff p >= threshold (a tie goes to class 1).
std::vector<Label> predict_label(const Model& model, std::span<const Sample> samples, double threshold = 0.5,
                                 unsigned workers = 1);
std::vector<Label> threshold_labels(std::span<const double> probs, double threshold);

/// Loss of the current model on a batch, split into its two terms.
Head::LossBreakdown batch_loss(const Model& model, std::span<const Sample> samples);

inline constexpr int kCheckpointFormatVersion = 1;

/// POSIX tar with `config.json` and `weights.bin`; the config records the
/// weights' SHA-256.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace amal
