#pragma once

#include <span>

#include "amal/classifier.hpp"
#include "amal/metrics.hpp"

namespace amal {

/// predict_proba -> threshold -> confusion -> summarize. AUC is filled when
/// both classes are present. ShapeError on an empty list, MissingLabelError
/// if a sample has no true label.
EvalReport evaluate_model(const Model& model, std::span<const Sample> samples, double threshold = 0.5,
                          unsigned workers = 1);

}  // namespace amal
