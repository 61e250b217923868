#include "amal/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"
#include "binary_io.hpp"
#include "tar.hpp"

namespace amal {

using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

std::string_view to_string(BackboneKind) { return "vgg16_imagenet"; }

std::string_view to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::adam: return "adam";
        case OptimizerKind::rmsprop: return "rmsprop";
    }
    return "sgd";
}

OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    if (s == "rmsprop") return OptimizerKind::rmsprop;
    throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (head_widths[0] <= 0 || head_widths[1] <= 0) throw RangeError("head widths must be positive");
    if (!(l2_lambda >= 0.0 && l2_lambda < 1.0)) throw RangeError("l2_lambda must lie in [0, 1)");
    if (input_side < 32) throw RangeError("input_side must be at least 32");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw RangeError("learning_rate must be positive");
    if (batch_size <= 0) throw RangeError("batch_size must be positive");
    if (epochs <= 0) throw RangeError("epochs must be positive");
    if (workers == 0) throw RangeError("workers must be positive");
}

json to_json(const ModelConfig& c) {
    return {{"backbone", to_string(c.backbone)},
            {"backbone_weights", c.backbone_weights.string()},
            {"freeze_backbone", c.freeze_backbone},
            {"head_widths", c.head_widths},
            {"l2_lambda", c.l2_lambda},
            {"input_side", c.input_side}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (j.contains("backbone") && j["backbone"].get<std::string>() != "vgg16_imagenet") {
        throw std::invalid_argument("unsupported backbone '" + j["backbone"].get<std::string>() + "'");
    }
    c.backbone_weights = j.value("backbone_weights", std::string());
    c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
    c.head_widths = j.value("head_widths", c.head_widths);
    c.l2_lambda = j.value("l2_lambda", c.l2_lambda);
    c.input_side = j.value("input_side", c.input_side);
    c.validate();
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"optimizer", to_string(c.optimizer)}, {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},          {"epochs", c.epochs},
            {"rng_seed", c.rng_seed},              {"deterministic", c.deterministic},
            {"workers", c.workers}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.workers = j.value("workers", c.workers);
    c.validate();
    return c;
}

bool EpochRecord::operator==(const EpochRecord& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return epoch == o.epoch && same(train_loss, o.train_loss) && same(val_accuracy, o.val_accuracy);
}

// ---------------------------------------------------------------------------
// head

Head::Head(std::size_t input_size, std::array<int, 2> widths, std::uint64_t seed) {
    Rng rng(seed);
    const std::array<std::pair<Eigen::Index, Eigen::Index>, 3> shapes{{
        {widths[0], static_cast<Eigen::Index>(input_size)},
        {widths[1], widths[0]},
        {1, widths[1]},
    }};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto [out, in] = shapes[i];
        // Glorot uniform kernels, zero biases.
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        Eigen::MatrixXd w(out, in);
        for (Eigen::Index c = 0; c < in; ++c)
            for (Eigen::Index r = 0; r < out; ++r) w(r, c) = rng.uniform(-limit, limit);
        params_[2 * i] = std::move(w);
        params_[2 * i + 1] = Eigen::MatrixXd::Zero(out, 1);
    }
}

std::size_t Head::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
}

bool Head::operator==(const Head& o) const {
    for (std::size_t i = 0; i < kParams; ++i) {
        if (params_[i].rows() != o.params_[i].rows() || params_[i].cols() != o.params_[i].cols()) return false;
        if (params_[i] != o.params_[i]) return false;
    }
    return true;
}

Eigen::RowVectorXd Head::logits(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd a1 = ((params_[0] * x).colwise() + params_[1].col(0)).cwiseMax(0.0);
    Eigen::MatrixXd a2 = ((params_[2] * a1).colwise() + params_[3].col(0)).cwiseMax(0.0);
    return (params_[4] * a2).array() + params_[5](0, 0);
}

Head::LossBreakdown Head::loss(const Eigen::MatrixXd& x, std::span<const Label> labels, double l2_lambda,
                               std::array<Eigen::MatrixXd, kParams>* grads,
                               Eigen::MatrixXd* grad_features) const {
    const Eigen::Index n = x.cols();
    if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw ShapeError("batch/label size mismatch");
    const Eigen::MatrixXd z1 = (params_[0] * x).colwise() + params_[1].col(0);
    const Eigen::MatrixXd a1 = z1.cwiseMax(0.0);
    const Eigen::MatrixXd z2 = (params_[2] * a1).colwise() + params_[3].col(0);
    const Eigen::MatrixXd a2 = z2.cwiseMax(0.0);
    const Eigen::RowVectorXd z3 = (params_[4] * a2).array() + params_[5](0, 0);

    LossBreakdown out;
    Eigen::RowVectorXd dz3(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = z3(i);
        const double y = labels[static_cast<std::size_t>(i)];
        out.bce += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        dz3(i) = (p - y) / static_cast<double>(n);
    }
    out.bce /= static_cast<double>(n);
    out.penalty = l2_lambda * (params_[0].squaredNorm() + params_[2].squaredNorm());
    out.total = out.bce + out.penalty;

    if (grads || grad_features) {
        const Eigen::MatrixXd da2 = params_[4].transpose() * dz3;
        const Eigen::MatrixXd dz2 = da2.cwiseProduct((z2.array() > 0.0).cast<double>().matrix());
        const Eigen::MatrixXd da1 = params_[2].transpose() * dz2;
        const Eigen::MatrixXd dz1 = da1.cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
        if (grads) {
            auto& g = *grads;
            g[0] = dz1 * x.transpose() + 2.0 * l2_lambda * params_[0];
            g[1] = dz1.rowwise().sum();
            g[2] = dz2 * a1.transpose() + 2.0 * l2_lambda * params_[2];
            g[3] = dz2.rowwise().sum();
            g[4] = dz3 * a2.transpose();
            g[5] = Eigen::MatrixXd::Constant(1, 1, dz3.sum());
        }
        if (grad_features) *grad_features = params_[0].transpose() * dz1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// features

std::shared_ptr<const std::vector<float>> FeatureCache::get(const Sample& s) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(s.id + '\n' + s.image_ref);
    return it == entries_.end() ? nullptr : it->second;
}

void FeatureCache::put(const Sample& s, std::shared_ptr<const std::vector<float>> f) {
    std::lock_guard lock(mu_);
    entries_[s.id + '\n' + s.image_ref] = std::move(f);
}

std::size_t FeatureCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

PreprocessConfig Model::preprocess() const {
    PreprocessConfig p;
    p.side = config.input_side;
    return p;
}

std::size_t Model::trainable_parameter_count() const {
    return head.parameter_count() + (config.freeze_backbone ? 0 : backbone->parameter_count());
}

std::size_t Model::total_parameter_count() const { return head.parameter_count() + backbone->parameter_count(); }

std::vector<std::shared_ptr<const std::vector<float>>> Model::features(std::span<const Sample> samples,
                                                                       unsigned workers) const {
    std::vector<std::shared_ptr<const std::vector<float>>> out(samples.size());
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (config.freeze_backbone) out[i] = cache->get(samples[i]);
        if (!out[i]) missing.push_back(i);
    }
    const PreprocessConfig pp = preprocess();
    parallel_for(missing.size(), workers, [&](std::size_t k) {
        const std::size_t i = missing[k];
        auto f = std::make_shared<const std::vector<float>>(backbone->extract(preprocess_image(samples[i], pp)));
        if (config.freeze_backbone) cache->put(samples[i], f);
        out[i] = std::move(f);
    });
    return out;
}

namespace {

Label training_label(const Sample& s) {
    if (s.assigned_label) return *s.assigned_label;
    if (s.true_label) return *s.true_label;
    throw MissingLabelError("sample '" + s.id + "' has no label");
}

Label reference_label(const Sample& s) {
    if (s.true_label) return *s.true_label;
    if (s.assigned_label) return *s.assigned_label;
    throw MissingLabelError("sample '" + s.id + "' has no label");
}

double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

Eigen::MatrixXd to_matrix(const std::vector<std::shared_ptr<const std::vector<float>>>& feats,
                          std::span<const std::size_t> columns) {
    const auto rows = static_cast<Eigen::Index>(feats.at(columns[0])->size());
    Eigen::MatrixXd m(rows, static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
        const auto& f = *feats[columns[j]];
        m.col(static_cast<Eigen::Index>(j)) =
            Eigen::Map<const Eigen::VectorXf>(f.data(), rows).cast<double>();
    }
    return m;
}

double probability(const Head& head, const std::vector<float>& f) {
    const Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXf>(f.data(), static_cast<Eigen::Index>(f.size())).cast<double>();
    return sigmoid(head.logits(x)(0));
}

double accuracy_on(const Head& head, const std::vector<std::shared_ptr<const std::vector<float>>>& feats,
                   std::span<const Label> labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const Label pred = probability(head, *feats[i]) >= 0.5 ? 1 : 0;
        correct += pred == labels[i] ? 1 : 0;
    }
    return feats.empty() ? std::numeric_limits<double>::quiet_NaN()
                         : static_cast<double>(correct) / static_cast<double>(feats.size());
}

// --- optimizers (Keras default hyperparameters) ---

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kRmsRho = 0.9;
constexpr double kEpsilon = 1e-7;

class Updater {
public:
    Updater(OptimizerState& state, const TrainConfig& cfg) : state_(state), cfg_(cfg) {
        if (state_.kind != cfg.optimizer) {
            state_ = OptimizerState{};
            state_.kind = cfg.optimizer;
        }
    }

    void begin_step() {
        ++state_.step;
        if (cfg_.optimizer == OptimizerKind::adam) {
            const double t = static_cast<double>(state_.step);
            adam_lr_ = cfg_.learning_rate * std::sqrt(1.0 - std::pow(kAdamBeta2, t)) /
                       (1.0 - std::pow(kAdamBeta1, t));
        }
    }

    template <typename T, typename G>
    void apply(std::size_t slot, T* param, const G* grad, std::size_t n) {
        if (cfg_.optimizer == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < n; ++i)
                param[i] = static_cast<T>(param[i] - cfg_.learning_rate * static_cast<double>(grad[i]));
            return;
        }
        auto& v = slot_vec(state_.second, slot, n);
        if (cfg_.optimizer == OptimizerKind::rmsprop) {
            for (std::size_t i = 0; i < n; ++i) {
                const double g = static_cast<double>(grad[i]);
                v[i] = kRmsRho * v[i] + (1.0 - kRmsRho) * g * g;
                param[i] = static_cast<T>(param[i] - cfg_.learning_rate * g / (std::sqrt(v[i]) + kEpsilon));
            }
            return;
        }
        auto& m = slot_vec(state_.first, slot, n);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = static_cast<double>(grad[i]);
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g * g;
            param[i] = static_cast<T>(param[i] - adam_lr_ * m[i] / (std::sqrt(v[i]) + kEpsilon));
        }
    }

private:
    static std::vector<double>& slot_vec(std::vector<std::vector<double>>& slots, std::size_t slot, std::size_t n) {
        if (slots.size() <= slot) slots.resize(slot + 1);
        if (slots[slot].size() != n) slots[slot].assign(n, 0.0);
        return slots[slot];
    }

    OptimizerState& state_;
    const TrainConfig& cfg_;
    double adam_lr_ = 0.0;
};

void apply_head(Updater& up, Head& head, const std::array<Eigen::MatrixXd, Head::kParams>& grads) {
    for (std::size_t k = 0; k < Head::kParams; ++k) {
        up.apply(k, head.params()[k].data(), grads[k].data(), static_cast<std::size_t>(grads[k].size()));
    }
}

void apply_backbone(Updater& up, Backbone& bb, const std::vector<ConvLayer>& grads) {
    for (std::size_t l = 0; l < grads.size(); ++l) {
        auto& layer = bb.layers()[l];
        up.apply(Head::kParams + 2 * l, layer.weight.data(), grads[l].weight.data(), layer.weight.size());
        up.apply(Head::kParams + 2 * l + 1, layer.bias.data(), grads[l].bias.data(), layer.bias.size());
    }
}

void add_into(std::vector<ConvLayer>& acc, const std::vector<ConvLayer>& g) {
    for (std::size_t l = 0; l < acc.size(); ++l) {
        for (std::size_t i = 0; i < acc[l].weight.size(); ++i) acc[l].weight[i] += g[l].weight[i];
        for (std::size_t i = 0; i < acc[l].bias.size(); ++i) acc[l].bias[i] += g[l].bias[i];
    }
}

struct EpochLoop {
    Model& model;
    std::span<const Sample> samples;
    const TrainConfig& cfg;
    std::vector<Label> labels;

    EpochLoop(Model& m, std::span<const Sample> s, const TrainConfig& c) : model(m), samples(s), cfg(c) {
        labels.reserve(s.size());
        for (const auto& x : s) labels.push_back(training_label(x));
    }

    std::vector<std::size_t> order_for(int global_epoch) const {
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(cfg.rng_seed, static_cast<std::uint64_t>(global_epoch)));
        rng.shuffle(order);
        return order;
    }

    // Frozen backbone: train the head on cached features.
    double frozen_epoch(int global_epoch, const std::vector<std::shared_ptr<const std::vector<float>>>& feats) {
        Updater up(model.optimizer, cfg);
        const auto order = order_for(global_epoch);
        double loss_sum = 0.0;
        std::array<Eigen::MatrixXd, Head::kParams> grads;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::span<const std::size_t> cols(order.data() + start, end - start);
            std::vector<Label> y;
            for (auto c : cols) y.push_back(labels[c]);
            const auto loss = model.head.loss(to_matrix(feats, cols), y, model.config.l2_lambda, &grads);
            if (!std::isfinite(loss.total)) throw DivergenceError(global_epoch, "non-finite training loss");
            loss_sum += loss.total * static_cast<double>(cols.size());
            up.begin_step();
            apply_head(up, model.head, grads);
        }
        return loss_sum / static_cast<double>(order.size());
    }

    // Trainable backbone: full backpropagation through the convolutions.
    double unfrozen_epoch(int global_epoch, Backbone& bb) {
        Updater up(model.optimizer, cfg);
        const auto order = order_for(global_epoch);
        const PreprocessConfig pp = model.preprocess();
        double loss_sum = 0.0;
        std::array<Eigen::MatrixXd, Head::kParams> grads;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end - start;
            std::vector<Backbone::Trace> traces(n);
            std::vector<std::shared_ptr<const std::vector<float>>> feats(n);
            parallel_for(n, cfg.workers, [&](std::size_t j) {
                feats[j] = std::make_shared<const std::vector<float>>(
                    bb.extract(preprocess_image(samples[order[start + j]], pp), &traces[j]));
            });
            std::vector<std::size_t> cols(n);
            std::iota(cols.begin(), cols.end(), std::size_t{0});
            std::vector<Label> y;
            for (std::size_t j = 0; j < n; ++j) y.push_back(labels[order[start + j]]);
            Eigen::MatrixXd grad_x;
            const auto loss = model.head.loss(to_matrix(feats, cols), y, model.config.l2_lambda, &grads, &grad_x);
            if (!std::isfinite(loss.total)) throw DivergenceError(global_epoch, "non-finite training loss");
            loss_sum += loss.total * static_cast<double>(n);

            std::vector<ConvLayer> bb_grads = bb.zero_like();
            auto per_sample_grad = [&](std::size_t j) {
                const Eigen::VectorXf gx = grad_x.col(static_cast<Eigen::Index>(j)).cast<float>();
                std::vector<ConvLayer> g = bb.zero_like();
                bb.backward(traces[j], std::span<const float>(gx.data(), static_cast<std::size_t>(gx.size())), g);
                traces[j] = {};
                return g;
            };
            if (cfg.deterministic) {
                std::vector<std::vector<ConvLayer>> parts(n);
                parallel_for(n, cfg.workers, [&](std::size_t j) { parts[j] = per_sample_grad(j); });
                for (const auto& p : parts) add_into(bb_grads, p);
            } else {
                std::mutex mu;
                parallel_for(n, cfg.workers, [&](std::size_t j) {
                    auto g = per_sample_grad(j);
                    std::lock_guard lock(mu);
                    add_into(bb_grads, g);
                });
            }
            up.begin_step();
            apply_head(up, model.head, grads);
            apply_backbone(up, bb, bb_grads);
        }
        return loss_sum / static_cast<double>(order.size());
    }

    /// Runs cfg.epochs epochs; returns the per-epoch records.
    std::vector<EpochRecord> run(std::span<const Sample> val) {
        std::vector<Label> val_labels;
        for (const auto& s : val) val_labels.push_back(reference_label(s));
        std::vector<EpochRecord> records;
        const int first = static_cast<int>(model.history.size()) + 1;

        if (model.config.freeze_backbone) {
            const auto feats = model.features(samples, cfg.workers);
            const auto val_feats = model.features(val, cfg.workers);
            for (int e = 0; e < cfg.epochs; ++e) {
                const double loss = frozen_epoch(first + e, feats);
                records.push_back({first + e, loss, accuracy_on(model.head, val_feats, val_labels)});
                model.history.push_back(records.back());
            }
            return records;
        }

        auto bb = std::make_shared<Backbone>(*model.backbone);
        for (int e = 0; e < cfg.epochs; ++e) {
            const double loss = unfrozen_epoch(first + e, *bb);
            model.backbone = std::make_shared<const Backbone>(*bb);
            const auto val_feats = model.features(val, cfg.workers);
            records.push_back({first + e, loss, accuracy_on(model.head, val_feats, val_labels)});
            model.history.push_back(records.back());
        }
        model.cache = std::make_shared<FeatureCache>();
        return records;
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// model lifecycle

Model build_model(const ModelConfig& cfg, std::uint64_t rng_seed) {
    cfg.validate();
    return build_model(cfg, std::make_shared<const Backbone>(Backbone::load(cfg.backbone_weights)), rng_seed);
}

Model build_model(const ModelConfig& cfg, std::shared_ptr<const Backbone> backbone, std::uint64_t rng_seed) {
    cfg.validate();
    if (!backbone || backbone->layers().size() != kVgg16ConvLayers) {
        throw BackboneUnavailableError("backbone must provide 13 convolutional layers");
    }
    Model m;
    m.config = cfg;
    m.backbone = std::move(backbone);
    m.head = Head(m.backbone->feature_size(cfg.input_side), cfg.head_widths, rng_seed);
    return m;
}

std::pair<Model, TrainReport> train(Model model, std::span<const Sample> train_samples, const TrainConfig& cfg,
                                    std::span<const Sample> val_samples) {
    cfg.validate();
    if (train_samples.empty()) throw EmptyDatasetError("no training samples");
    if (static_cast<std::size_t>(cfg.batch_size) > train_samples.size()) {
        throw RangeError("batch_size " + std::to_string(cfg.batch_size) + " exceeds training set size " +
                         std::to_string(train_samples.size()));
    }
    EpochLoop loop(model, train_samples, cfg);
    TrainReport report;
    report.epochs = loop.run(val_samples);
    report.final_val_accuracy = report.epochs.back().val_accuracy;
    const auto feats = model.features(train_samples, cfg.workers);
    std::vector<Label> ref;
    for (const auto& s : train_samples) ref.push_back(training_label(s));
    report.final_train_accuracy = accuracy_on(model.head, feats, ref);
    return {std::move(model), std::move(report)};
}

Model fine_tune(Model model, std::span<const Sample> labeled_samples, const TrainConfig& cfg) {
    cfg.validate();
    if (labeled_samples.empty()) throw EmptyDatasetError("no labeled samples to fine-tune on");
    TrainConfig c = cfg;
    // A pool smaller than the batch is a single (short) batch.
    c.batch_size = std::min<int>(cfg.batch_size, static_cast<int>(labeled_samples.size()));
    EpochLoop loop(model, labeled_samples, c);
    loop.run({});
    return model;
}

std::vector<double> predict_proba(const Model& model, std::span<const Sample> samples, unsigned workers) {
    const auto feats = model.features(samples, workers);
    std::vector<double> out(samples.size());
    for (std::size_t i = 0; i < feats.size(); ++i) out[i] = probability(model.head, *feats[i]);
    return out;
}

std::vector<Label> threshold_labels(std::span<const double> probs, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw RangeError("threshold must lie in (0, 1)");
    std::vector<Label> out;
    out.reserve(probs.size());
    for (double p : probs) out.push_back(p >= threshold ? 1 : 0);
    return out;
}

std::vector<Label> predict_label(const Model& model, std::span<const Sample> samples, double threshold,
                                 unsigned workers) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw RangeError("threshold must lie in (0, 1)");
    const auto probs = predict_proba(model, samples, workers);
    return threshold_labels(probs, threshold);
}

Head::LossBreakdown batch_loss(const Model& model, std::span<const Sample> samples) {
    if (samples.empty()) throw EmptyDatasetError("empty batch");
    const auto feats = model.features(samples);
    std::vector<std::size_t> cols(samples.size());
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    std::vector<Label> y;
    for (const auto& s : samples) y.push_back(training_label(s));
    return model.head.loss(to_matrix(feats, cols), y, model.config.l2_lambda);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr std::string_view kWeightsMagic = "AMALCKW1";

std::string serialize_weights(const Model& m) {
    detail::ByteWriter w;
    w.raw(kWeightsMagic.data(), kWeightsMagic.size());
    w.str(m.backbone->serialize());
    for (const auto& p : m.head.params()) {
        w.u64(static_cast<std::uint64_t>(p.rows()));
        w.u64(static_cast<std::uint64_t>(p.cols()));
        w.raw(p.data(), static_cast<std::size_t>(p.size()) * sizeof(double));
    }
    w.u32(static_cast<std::uint32_t>(m.optimizer.kind));
    w.u64(m.optimizer.step);
    for (const auto* slots : {&m.optimizer.first, &m.optimizer.second}) {
        w.u64(slots->size());
        for (const auto& v : *slots) w.array<double>(v);
    }
    return w.take();
}

void deserialize_weights(std::string_view bytes, Model& m) {
    detail::ByteReader r(bytes);
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::string_view(magic, 8) != kWeightsMagic) throw std::runtime_error("bad weights magic");
    m.backbone = std::make_shared<const Backbone>(Backbone::deserialize(r.str()));
    for (auto& p : m.head.params()) {
        const auto rows = static_cast<Eigen::Index>(r.u64());
        const auto cols = static_cast<Eigen::Index>(r.u64());
        if (rows <= 0 || cols <= 0 || rows * cols > (1LL << 32)) throw std::runtime_error("bad head shape");
        p.resize(rows, cols);
        r.raw(p.data(), static_cast<std::size_t>(p.size()) * sizeof(double));
    }
    const std::uint32_t kind = r.u32();
    if (kind > 2) throw std::runtime_error("bad optimizer kind");
    m.optimizer.kind = static_cast<OptimizerKind>(kind);
    m.optimizer.step = r.u64();
    for (auto* slots : {&m.optimizer.first, &m.optimizer.second}) {
        slots->resize(r.u64());
        for (auto& v : *slots) v = r.array<double>();
    }
    if (!r.done()) throw std::runtime_error("trailing bytes in weights blob");
}

json history_json(const std::vector<EpochRecord>& h) {
    json rows = json::array();
    for (const auto& e : h) {
        rows.push_back({e.epoch, e.train_loss,
                        std::isnan(e.val_accuracy) ? json(nullptr) : json(e.val_accuracy)});
    }
    return rows;
}

}  // namespace

std::string Model::weights_checksum() const { return sha256_hex(serialize_weights(*this)); }

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    const std::string weights = serialize_weights(model);
    json cfg = {{"format_version", kCheckpointFormatVersion},
                {"model_config", to_json(model.config)},
                {"weights_sha256", sha256_hex(weights)},
                {"train_history", history_json(model.history)}};
    write_file_atomic(path, detail::tar_pack({{"config.json", cfg.dump(2) + "\n"}, {"weights.bin", weights}}));
}

Model load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::map<std::string, std::string> files;
    try {
        files = detail::tar_unpack(bytes);
    } catch (const std::runtime_error& e) {
        throw ChecksumError(path.string() + ": " + e.what());
    }
    if (!files.count("config.json") || !files.count("weights.bin")) {
        throw ChecksumError(path.string() + ": checkpoint archive is incomplete");
    }
    json cfg;
    try {
        cfg = json::parse(files["config.json"]);
    } catch (const json::exception& e) {
        throw ChecksumError(path.string() + ": unreadable config.json: " + e.what());
    }
    const int version = cfg.value("format_version", -1);
    if (version != kCheckpointFormatVersion) {
        throw VersionError(path.string() + ": checkpoint format_version " + std::to_string(version) +
                           " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
    }
    const std::string& weights = files["weights.bin"];
    if (sha256_hex(weights) != cfg.value("weights_sha256", std::string())) {
        throw ChecksumError(path.string() + ": weights checksum mismatch");
    }
    Model m;
    try {
        m.config = model_config_from_json(cfg.at("model_config"));
        deserialize_weights(weights, m);
        for (const auto& row : cfg.at("train_history")) {
            m.history.push_back({row.at(0).get<int>(), row.at(1).get<double>(),
                                 row.at(2).is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                     : row.at(2).get<double>()});
        }
    } catch (const std::exception& e) {
        throw ChecksumError(path.string() + ": " + e.what());
    }
    return m;
}

}  // namespace amal
