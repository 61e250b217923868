#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "amal/dataset.hpp"

namespace amal {

/// Rows are the true class (0, 1), columns the predicted class.
struct ConfusionMatrix {
    std::int64_t tn = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tp = 0;

    std::int64_t total() const { return tn + fp + fn + tp; }
    bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    /// Set when a zero denominator forced a metric to 0.
    bool degenerate = false;
};

struct EvalReport {
    ConfusionMatrix cm;
    double accuracy = 0.0;
    std::array<ClassMetrics, 2> per_class{};
    std::optional<double> auc;
};

ConfusionMatrix confusion(std::span<const Label> true_labels, std::span<const Label> pred_labels);

EvalReport summarize(const ConfusionMatrix& cm);

/// Also fills `auc` from the scores.
EvalReport summarize(const ConfusionMatrix& cm, std::span<const double> scores,
                     std::span<const Label> true_labels);

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half.
double roc_auc(std::span<const double> scores, std::span<const Label> true_labels);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Two-line table with values at 3 decimals.
std::string format_report(const EvalReport& report, const std::array<std::string, 2>& class_names);

}  // namespace amal
