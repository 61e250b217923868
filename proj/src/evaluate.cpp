#include "amal/evaluate.hpp"

#include "amal/errors.hpp"

namespace amal {

EvalReport evaluate_model(const Model& model, std::span<const Sample> samples, double threshold, unsigned workers) {
    if (samples.empty()) throw ShapeError("cannot evaluate on an empty sample list");
    std::vector<Label> truth;
    truth.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.true_label) throw MissingLabelError("sample '" + s.id + "' has no true_label");
        truth.push_back(*s.true_label);
    }
    const auto probs = predict_proba(model, samples, workers);
    const auto pred = threshold_labels(probs, threshold);
    const auto cm = confusion(truth, pred);
    if (cm.tn + cm.fp == 0 || cm.fn + cm.tp == 0) return summarize(cm);
    return summarize(cm, probs, truth);
}

}  // namespace amal
