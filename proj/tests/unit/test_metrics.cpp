#include <doctest.h>

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/metrics.hpp"
#include "amal/util.hpp"

using namespace amal;

namespace {

std::vector<Label> labels_for(const ConfusionMatrix& cm, bool truth) {
    std::vector<Label> v;
    auto add = [&](std::int64_t n, Label t, Label p) { v.insert(v.end(), static_cast<std::size_t>(n), truth ? t : p); };
    add(cm.tn, 0, 0);
    add(cm.fp, 0, 1);
    add(cm.fn, 1, 0);
    add(cm.tp, 1, 1);
    return v;
}

double brute_auc(const std::vector<double>& s, const std::vector<Label>& y) {
    double wins = 0;
    double pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            pairs += 1;
            wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    }
    return wins / pairs;
}

}  // namespace

TEST_CASE("oracle: fine-tuned confusion matrix 487/13/3/497") {
    const ConfusionMatrix cm{487, 13, 3, 497};
    CHECK(confusion(labels_for(cm, true), labels_for(cm, false)) == cm);
    const auto r = summarize(cm);
    CHECK(r.accuracy == doctest::Approx(0.984).epsilon(1e-12));
    CHECK(r.per_class[0].precision == doctest::Approx(487.0 / 490.0));
    CHECK(r.per_class[0].recall == doctest::Approx(0.974));
    CHECK(r.per_class[1].precision == doctest::Approx(497.0 / 510.0));
    CHECK(r.per_class[1].recall == doctest::Approx(0.994));
    const double p1 = 497.0 / 510.0;
    CHECK(r.per_class[1].f1 == doctest::Approx(2 * p1 * 0.994 / (p1 + 0.994)));
    CHECK(!r.per_class[0].degenerate);
    CHECK(!r.per_class[1].degenerate);
}

TEST_CASE("oracle: baseline confusion matrix 496/4/19/481") {
    const auto r = summarize({496, 4, 19, 481});
    CHECK(r.accuracy == doctest::Approx(0.977));
    CHECK(r.per_class[0].recall == doctest::Approx(0.992));
    CHECK(r.per_class[0].precision == doctest::Approx(496.0 / 515.0));
    CHECK(r.per_class[1].recall == doctest::Approx(0.962));
    CHECK(r.per_class[1].precision == doctest::Approx(481.0 / 485.0));
}

TEST_CASE("hand-checked small cases") {
    const std::vector<Label> t{0, 0, 1, 1, 1};
    const std::vector<Label> p{0, 1, 1, 1, 0};
    const auto cm = confusion(t, p);
    CHECK(cm == ConfusionMatrix{1, 1, 1, 2});
    const auto r = summarize(cm);
    CHECK(r.accuracy == doctest::Approx(0.6));
    CHECK(r.per_class[1].precision == doctest::Approx(2.0 / 3.0));
    CHECK(r.per_class[1].recall == doctest::Approx(2.0 / 3.0));
    CHECK(r.per_class[0].f1 == doctest::Approx(0.5));
}

TEST_CASE("zero denominators are flagged, not NaN") {
    const auto r = summarize({5, 0, 0, 0});
    CHECK(r.accuracy == 1.0);
    CHECK(r.per_class[1].precision == 0.0);
    CHECK(r.per_class[1].recall == 0.0);
    CHECK(r.per_class[1].f1 == 0.0);
    CHECK(r.per_class[1].degenerate);
    CHECK(!r.per_class[0].degenerate);
    CHECK(to_json(r).at("degenerate_classes") == nlohmann::json::array({1}));
}

TEST_CASE("shape errors") {
    const std::vector<Label> a{0, 1};
    const std::vector<Label> b{0};
    const std::vector<Label> bad{0, 2};
    CHECK_THROWS_AS(confusion(a, b), ShapeError);
    CHECK_THROWS_AS(confusion({}, {}), ShapeError);
    CHECK_THROWS_AS(confusion(a, bad), RangeError);
    const std::vector<double> s{0.1};
    CHECK_THROWS_AS(roc_auc(s, a), ShapeError);
}

TEST_CASE("auc needs both classes") {
    const std::vector<double> s{0.1, 0.2};
    const std::vector<Label> y{1, 1};
    CHECK_THROWS_AS(roc_auc(s, y), UndefinedMetricError);
}

TEST_CASE("auc matches pairwise counting (property)") {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.below(60);
        std::vector<double> s(n);
        std::vector<Label> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse grid so ties are common.
            s[i] = static_cast<double>(rng.below(trial % 2 ? 5 : 1000)) / 10.0;
            y[i] = static_cast<Label>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        CHECK(roc_auc(s, y) == doctest::Approx(brute_auc(s, y)).epsilon(1e-12));
    }
}

TEST_CASE("auc extremes and symmetry") {
    const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
    const std::vector<Label> y{0, 0, 1, 1};
    CHECK(roc_auc(s, y) == 1.0);
    const std::vector<Label> flipped{1, 1, 0, 0};
    CHECK(roc_auc(s, flipped) == 0.0);
    const std::vector<double> flat(4, 0.5);
    CHECK(roc_auc(flat, y) == 0.5);
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> sc(20);
        std::vector<Label> yy(20);
        for (std::size_t i = 0; i < 20; ++i) {
            sc[i] = rng.uniform01();
            yy[i] = static_cast<Label>(i % 2);
        }
        std::vector<double> neg(sc);
        for (auto& v : neg) v = -v;
        CHECK(roc_auc(sc, yy) + roc_auc(neg, yy) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("metrics are invariant to sample order (property)") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(80);
        std::vector<Label> t(n), p(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = static_cast<Label>(rng.below(2));
            p[i] = static_cast<Label>(rng.below(2));
            s[i] = rng.uniform01();
        }
        t[0] = 0;
        t[1] = 1;
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        std::vector<Label> t2(n), p2(n);
        std::vector<double> s2(n);
        for (std::size_t i = 0; i < n; ++i) {
            t2[i] = t[perm[i]];
            p2[i] = p[perm[i]];
            s2[i] = s[perm[i]];
        }
        const auto cm = confusion(t, p);
        CHECK(confusion(t2, p2) == cm);
        CHECK(roc_auc(s2, t2) == roc_auc(s, t));
        CHECK(cm.total() == static_cast<std::int64_t>(n));
        const auto r = summarize(cm);
        CHECK(r.accuracy * static_cast<double>(n) == doctest::Approx(static_cast<double>(cm.tn + cm.tp)));
    }
}

TEST_CASE("swapping class roles swaps per-class metrics (property)") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const ConfusionMatrix cm{static_cast<std::int64_t>(rng.below(50)), static_cast<std::int64_t>(rng.below(50)),
                                 static_cast<std::int64_t>(rng.below(50)), static_cast<std::int64_t>(1 + rng.below(50))};
        const ConfusionMatrix swapped{cm.tp, cm.fn, cm.fp, cm.tn};
        const auto a = summarize(cm);
        const auto b = summarize(swapped);
        CHECK(a.accuracy == b.accuracy);
        for (int c = 0; c < 2; ++c) {
            CHECK(a.per_class[c].precision == b.per_class[1 - c].precision);
            CHECK(a.per_class[c].recall == b.per_class[1 - c].recall);
            CHECK(a.per_class[c].f1 == b.per_class[1 - c].f1);
        }
    }
}

TEST_CASE("report json round-trips and the table prints at 3 decimals") {
    const std::vector<double> s{0.1, 0.6, 0.7, 0.9};
    const std::vector<Label> y{0, 0, 1, 1};
    const auto r = summarize(ConfusionMatrix{487, 13, 3, 497}, s, y);
    REQUIRE(r.auc);
    const auto back = eval_report_from_json(to_json(r));
    CHECK(back.cm == r.cm);
    CHECK(back.accuracy == r.accuracy);
    CHECK(back.auc == r.auc);
    const std::string table = format_report(r, {"ok", "defect"});
    CHECK(table.find("0.974") != std::string::npos);
    CHECK(table.find("0.994") != std::string::npos);
    CHECK(table.find("accuracy 0.984") != std::string::npos);
    CHECK(table.find("auc 1.000") != std::string::npos);
}
