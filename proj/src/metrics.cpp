#include "amal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"

namespace amal {

using nlohmann::json;

ConfusionMatrix confusion(std::span<const Label> true_labels, std::span<const Label> pred_labels) {
    if (true_labels.size() != pred_labels.size()) {
        throw ShapeError("label lists differ in length (" + std::to_string(true_labels.size()) +
                         " vs " + std::to_string(pred_labels.size()) + ")");
    }
    if (true_labels.empty()) throw ShapeError("cannot build a confusion matrix from zero samples");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < true_labels.size(); ++i) {
        Label t = true_labels[i];
        Label p = pred_labels[i];
        if (!is_valid_label(t) || !is_valid_label(p)) throw RangeError("labels must be 0 or 1");
        if (t == 0) (p == 0 ? cm.tn : cm.fp) += 1;
        else (p == 0 ? cm.fn : cm.tp) += 1;
    }
    return cm;
}

namespace {

ClassMetrics class_metrics(std::int64_t correct, std::int64_t predicted, std::int64_t actual) {
    ClassMetrics m;
    if (predicted > 0) m.precision = static_cast<double>(correct) / static_cast<double>(predicted);
    else m.degenerate = true;
    if (actual > 0) m.recall = static_cast<double>(correct) / static_cast<double>(actual);
    else m.degenerate = true;
    const double denom = m.precision + m.recall;
    m.f1 = denom > 0.0 ? 2.0 * m.precision * m.recall / denom : 0.0;
    return m;
}

}  // namespace

EvalReport summarize(const ConfusionMatrix& cm) {
    if (cm.tn < 0 || cm.fp < 0 || cm.fn < 0 || cm.tp < 0) throw RangeError("negative confusion count");
    if (cm.total() == 0) throw ShapeError("empty confusion matrix");
    EvalReport r;
    r.cm = cm;
    r.accuracy = static_cast<double>(cm.tn + cm.tp) / static_cast<double>(cm.total());
    r.per_class[0] = class_metrics(cm.tn, cm.tn + cm.fn, cm.tn + cm.fp);
    r.per_class[1] = class_metrics(cm.tp, cm.tp + cm.fp, cm.tp + cm.fn);
    return r;
}

EvalReport summarize(const ConfusionMatrix& cm, std::span<const double> scores,
                     std::span<const Label> true_labels) {
    EvalReport r = summarize(cm);
    r.auc = roc_auc(scores, true_labels);
    return r;
}

double roc_auc(std::span<const double> scores, std::span<const Label> true_labels) {
    if (scores.size() != true_labels.size()) throw ShapeError("scores and labels differ in length");
    const std::size_t n = scores.size();
    std::int64_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_valid_label(true_labels[i])) throw RangeError("labels must be 0 or 1");
        if (std::isnan(scores[i])) throw RangeError("NaN score");
        n_pos += true_labels[i];
    }
    const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
    if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUC needs both classes present");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of (1-based, tie-averaged) ranks of the positives. Ranks are kept
    // doubled so tied groups stay integral.
    std::int64_t doubled_rank_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const auto doubled_avg = static_cast<std::int64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (true_labels[order[k]] == 1) doubled_rank_sum += doubled_avg;
        i = j;
    }
    const std::int64_t doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

json to_json(const EvalReport& r) {
    json j = {{"confusion", {{r.cm.tn, r.cm.fp}, {r.cm.fn, r.cm.tp}}},
              {"accuracy", r.accuracy},
              {"precision_0", r.per_class[0].precision},
              {"recall_0", r.per_class[0].recall},
              {"f1_0", r.per_class[0].f1},
              {"precision_1", r.per_class[1].precision},
              {"recall_1", r.per_class[1].recall},
              {"f1_1", r.per_class[1].f1},
              {"auc", r.auc ? json(*r.auc) : json(nullptr)}};
    json degenerate = json::array();
    for (int c = 0; c < 2; ++c)
        if (r.per_class[static_cast<std::size_t>(c)].degenerate) degenerate.push_back(c);
    if (!degenerate.empty()) j["degenerate_classes"] = degenerate;
    return j;
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    const auto& c = j.at("confusion");
    r.cm = {c.at(0).at(0).get<std::int64_t>(), c.at(0).at(1).get<std::int64_t>(),
            c.at(1).at(0).get<std::int64_t>(), c.at(1).at(1).get<std::int64_t>()};
    r.accuracy = j.at("accuracy").get<double>();
    for (int k = 0; k < 2; ++k) {
        auto& m = r.per_class[static_cast<std::size_t>(k)];
        const std::string s = std::to_string(k);
        m.precision = j.at("precision_" + s).get<double>();
        m.recall = j.at("recall_" + s).get<double>();
        m.f1 = j.at("f1_" + s).get<double>();
    }
    if (j.contains("degenerate_classes")) {
        for (int k : j["degenerate_classes"]) r.per_class[static_cast<std::size_t>(k)].degenerate = true;
    }
    if (!j.at("auc").is_null()) r.auc = j["auc"].get<double>();
    return r;
}

std::string format_report(const EvalReport& r, const std::array<std::string, 2>& names) {
    char buf[512];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-12s %6s %6s  %9s %6s %8s\n", "true\\pred", "0", "1", "precision",
                  "recall", "f1");
    out += buf;
    const std::int64_t rows[2][2] = {{r.cm.tn, r.cm.fp}, {r.cm.fn, r.cm.tp}};
    for (int c = 0; c < 2; ++c) {
        const auto& m = r.per_class[static_cast<std::size_t>(c)];
        std::snprintf(buf, sizeof buf, "%-12.12s %6lld %6lld  %9.3f %6.3f %8.3f\n",
                      names[static_cast<std::size_t>(c)].c_str(), static_cast<long long>(rows[c][0]),
                      static_cast<long long>(rows[c][1]), m.precision, m.recall, m.f1);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "accuracy %.3f", r.accuracy);
    out += buf;
    if (r.auc) {
        std::snprintf(buf, sizeof buf, "  auc %.3f", *r.auc);
        out += buf;
    }
    out += "\n";
    return out;
}

}  // namespace amal
