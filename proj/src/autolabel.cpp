#include "amal/autolabel.hpp"

#include <algorithm>
#include <mutex>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"

namespace amal {

AutoLabelResult autolabel(const Model& model, std::span<const Sample> samples, double threshold,
                          std::optional<double> min_confidence, unsigned workers) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw RangeError("threshold must lie in (0, 1)");
    if (min_confidence && !(*min_confidence > 0.5 && *min_confidence <= 1.0)) {
        throw RangeError("min_confidence must lie in (0.5, 1]");
    }
    for (const auto& s : samples) {
        if (s.assigned_label && label_origin(s.label_source) != LabelOrigin::autolabel) {
            throw LabelOverwriteError("sample '" + s.id + "' already has a label from '" +
                                      (s.label_source.empty() ? std::string("unknown") : s.label_source) + "'");
        }
    }

    AutoLabelResult out;
    auto& rep = out.report;
    rep.input_count = samples.size();
    rep.model_checksum = model.weights_checksum();
    rep.threshold = threshold;
    rep.min_confidence = min_confidence;
    const std::string source = "autolabel:" + rep.model_checksum;

    // Per-sample inference so one bad image does not sink the batch.
    std::vector<std::optional<double>> probs(samples.size());
    std::vector<std::string> errors(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t i) {
        try {
            probs[i] = predict_proba(model, samples.subspan(i, 1))[0];
        } catch (const DecodeError& e) {
            errors[i] = e.what();
        }
    });

    std::vector<Label> truth, pred;
    std::vector<double> scores;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!probs[i]) {
            rep.decode_failures.push_back({samples[i].id, errors[i]});
            ++rep.skipped;
            continue;
        }
        const double p = *probs[i];
        if (min_confidence && std::max(p, 1.0 - p) < *min_confidence) {
            ++rep.skipped;
            continue;
        }
        Sample s = samples[i];
        s.assigned_label = p >= threshold ? 1 : 0;
        s.label_source = source;
        if (s.true_label) {
            truth.push_back(*s.true_label);
            pred.push_back(*s.assigned_label);
            scores.push_back(p);
        }
        out.delta.push_back(std::move(s));
        ++rep.labeled;
    }
    rep.zero_coverage = rep.labeled == 0;
    if (!truth.empty()) {
        const auto cm = confusion(truth, pred);
        rep.evaluation = (cm.tn + cm.fp > 0 && cm.fn + cm.tp > 0) ? summarize(cm, scores, truth) : summarize(cm);
    }
    return out;
}

void apply_delta(DatasetManifest& manifest, std::span<const Sample> delta) {
    for (const auto& d : delta) {
        if (!d.assigned_label) throw MissingLabelError("delta sample '" + d.id + "' has no assigned label");
        const Sample* cur = manifest.find(d.id);
        if (!cur) throw NotFoundError("sample '" + d.id + "' is not in the manifest");
        if (cur->assigned_label) {
            correct_label(manifest, d.id, *d.assigned_label, d.label_source);
        } else {
            assign_label(manifest, d.id, *d.assigned_label, d.label_source);
        }
    }
}

void export_labeled(std::span<const Sample> delta, const DatasetManifest& like, const std::filesystem::path& path) {
    if (delta.empty()) throw EmptyDatasetError("nothing to export: the auto-label delta is empty");
    DatasetManifest m;
    m.samples.assign(delta.begin(), delta.end());
    m.class_names = like.class_names;
    m.source_root = like.source_root;
    m.created_at = like.created_at;
    save_manifest(m, path);
}

nlohmann::json to_json(const AutoLabelReport& r) {
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : r.decode_failures) failures.push_back({{"sample_id", f.sample_id}, {"message", f.message}});
    return {{"input_count", r.input_count},
            {"labeled", r.labeled},
            {"skipped", r.skipped},
            {"decode_failures", failures},
            {"zero_coverage", r.zero_coverage},
            {"model_checksum", r.model_checksum},
            {"threshold", r.threshold},
            {"min_confidence", r.min_confidence ? nlohmann::json(*r.min_confidence) : nlohmann::json(nullptr)},
            {"evaluation", r.evaluation ? to_json(*r.evaluation) : nlohmann::json(nullptr)}};
}

}  // namespace amal
