#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "amal/classifier.hpp"
#include "amal/metrics.hpp"

namespace amal {

struct AutoLabelFailure {
    std::string sample_id;
    std::string message;
};

struct AutoLabelReport {
    std::size_t input_count = 0;
    std::size_t labeled = 0;
    /// Below min_confidence or undecodable; labeled + skipped == input_count.
    std::size_t skipped = 0;
    std::vector<AutoLabelFailure> decode_failures;
    bool zero_coverage = false;
    std::string model_checksum;
    double threshold = 0.5;
    std::optional<double> min_confidence;
    /// Over the labeled samples that carry a true label.
    std::optional<EvalReport> evaluation;
};

struct AutoLabelResult {
    /// Labeled samples only, with assigned_label and label_source set.
    std::vector<Sample> delta;
    AutoLabelReport report;
};

/// Confidence is max(p, 1 - p); a sample is labeled when it reaches
/// min_confidence (always, when absent). LabelOverwriteError up front if
/// any input already holds a label that did not come from autolabel.
AutoLabelResult autolabel(const Model& model, std::span<const Sample> samples, double threshold = 0.5,
                          std::optional<double> min_confidence = std::nullopt, unsigned workers = 1);

/// Merges a delta into a manifest, honouring label precedence.
void apply_delta(DatasetManifest& manifest, std::span<const Sample> delta);

/// Manifest CSV (with label_source) plus its meta sidecar. `like` supplies
/// class names, source root and creation time. EmptyDatasetError if empty.
void export_labeled(std::span<const Sample> delta, const DatasetManifest& like, const std::filesystem::path& path);

nlohmann::json to_json(const AutoLabelReport& report);

}  // namespace amal
