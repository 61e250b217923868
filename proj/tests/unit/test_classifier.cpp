#include <doctest.h>

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "amal/classifier.hpp"
#include "amal/errors.hpp"
#include "amal/evaluate.hpp"
#include "amal/util.hpp"
#include "fixtures.hpp"
#include "tar.hpp"

using namespace amal;

namespace {

std::vector<Sample> first_n(Split split, std::size_t per_class) {
    std::vector<Sample> out;
    std::size_t counts[2] = {0, 0};
    for (const auto& s : test::desk_data().manifest.samples) {
        if (s.split != split) continue;
        auto& c = counts[*s.true_label];
        if (c < per_class) {
            out.push_back(s);
            ++c;
        }
    }
    return out;
}

Model desk_model(std::uint64_t seed = 1) {
    return build_model(test::desk_model_config(), test::desk_backbone(), seed);
}

Eigen::MatrixXd feature_matrix(const Model& m, std::span<const Sample> samples) {
    const auto feats = m.features(samples);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(feats[0]->size()), static_cast<Eigen::Index>(feats.size()));
    for (std::size_t j = 0; j < feats.size(); ++j)
        for (std::size_t i = 0; i < feats[j]->size(); ++i)
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*feats[j])[i];
    return x;
}

std::vector<Label> truth(std::span<const Sample> samples) {
    std::vector<Label> y;
    for (const auto& s : samples) y.push_back(*s.true_label);
    return y;
}

}  // namespace

TEST_CASE("head gradients match central differences") {
    Rng rng(4);
    const int d = 12;
    Head head(static_cast<std::size_t>(d), {6, 5}, 99);
    Eigen::MatrixXd x(d, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const std::vector<Label> y{0, 1, 1, 0};
    const double lambda = 0.01;
    std::array<Eigen::MatrixXd, Head::kParams> grads;
    Eigen::MatrixXd gx;
    head.loss(x, y, lambda, &grads, &gx);
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t k = 0; k < Head::kParams; ++k) {
        auto& p = head.params()[k];
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double up = head.loss(x, y, lambda).total;
            p.data()[i] = orig - h;
            const double down = head.loss(x, y, lambda).total;
            p.data()[i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double analytic = grads[k].data()[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    }
    CHECK(worst <= 1e-3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double up = head.loss(x, y, lambda).total;
        x.data()[i] = orig - h;
        const double down = head.loss(x, y, lambda).total;
        x.data()[i] = orig;
        CHECK(gx.data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-4));
    }
}

TEST_CASE("backbone backward matches finite differences") {
    const auto bb = Backbone::initialized({2, 3, 3, 4, 4}, 21);
    ImageTensor img{32, 32, 3, std::vector<float>(32 * 32 * 3)};
    Rng rng(6);
    for (auto& v : img.data) v = static_cast<float>(rng.normal());
    Backbone::Trace trace;
    const auto f = bb.extract(img, &trace);
    REQUIRE(f.size() == bb.feature_size(32));
    std::vector<float> r(f.size());
    for (auto& v : r) v = static_cast<float>(rng.normal());
    auto objective = [&](const Backbone& b) {
        const auto out = b.extract(img);
        double s = 0;
        for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * r[i];
        return s;
    };
    auto grads = bb.zero_like();
    bb.backward(trace, r, grads);
    // Probes whose two step sizes disagree straddle a ReLU or pooling switch.
    auto central = [&](std::size_t l, bool bias, std::size_t i, float h) {
        Backbone plus = bb, minus = bb;
        (bias ? plus.layers()[l].bias : plus.layers()[l].weight)[i] += h;
        (bias ? minus.layers()[l].bias : minus.layers()[l].weight)[i] -= h;
        return (objective(plus) - objective(minus)) / (2.0 * h);
    };
    int checked = 0, kinked = 0;
    auto probe = [&](std::size_t l, bool bias, std::size_t i, double g) {
        if (std::abs(g) < 1e-2) return;
        const double a = central(l, bias, i, 1e-3f);
        const double b = central(l, bias, i, 2e-3f);
        if (std::abs(a - b) > 1e-2 * std::abs(a)) {
            ++kinked;
            return;
        }
        CHECK(a == doctest::Approx(g).epsilon(2e-2));
        ++checked;
    };
    for (std::size_t l : {0u, 5u, 12u}) {
        for (std::size_t i = 0; i < grads[l].bias.size(); ++i) probe(l, true, i, grads[l].bias[i]);
        for (std::size_t i = 0; i < grads[l].weight.size(); i += 7) probe(l, false, i, grads[l].weight[i]);
    }
    CHECK(checked > 5);
}

TEST_CASE("loss is bce plus an l2 penalty on the two hidden kernels") {
    Rng rng(12);
    Head head(8, {4, 3}, 5);
    for (auto& p : head.params())
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal();
    Eigen::MatrixXd x(8, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const std::vector<Label> y{1, 0, 1};
    const auto plain = head.loss(x, y, 0.0);
    const auto reg = head.loss(x, y, 0.05);
    CHECK(plain.penalty == 0.0);
    CHECK(reg.bce == plain.bce);
    const double expected = 0.05 * (head.params()[0].squaredNorm() + head.params()[2].squaredNorm());
    CHECK(reg.penalty == doctest::Approx(expected).epsilon(1e-14));
    CHECK(reg.total == doctest::Approx(reg.bce + reg.penalty).epsilon(1e-14));
    // Biases and the output kernel carry no penalty.
    Head h2 = head;
    h2.params()[1].array() += 3.0;
    h2.params()[4].array() *= 2.0;
    CHECK(h2.loss(x, y, 0.05).penalty == reg.penalty);
    // Mean BCE by hand.
    const auto z = head.logits(x);
    double bce = 0;
    for (int i = 0; i < 3; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z(i)));
        bce -= y[static_cast<std::size_t>(i)] ? std::log(p) : std::log(1 - p);
    }
    CHECK(plain.bce == doctest::Approx(bce / 3).epsilon(1e-9));
}

TEST_CASE("one full-batch step follows the optimizer update rules") {
    const auto samples = first_n(Split::train, 4);
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::rmsprop}) {
        CAPTURE(to_string(kind));
        Model m = desk_model(3);
        const Eigen::MatrixXd x = feature_matrix(m, samples);
        std::array<Eigen::MatrixXd, Head::kParams> g;
        m.head.loss(x, truth(samples), m.config.l2_lambda, &g);
        const double lr = 1e-3;
        std::array<Eigen::MatrixXd, Head::kParams> expected = m.head.params();
        for (std::size_t k = 0; k < Head::kParams; ++k) {
            const Eigen::ArrayXXd gk = g[k].array();
            switch (kind) {
                case OptimizerKind::sgd: expected[k].array() -= lr * gk; break;
                case OptimizerKind::rmsprop:
                    expected[k].array() -= lr * gk / ((0.1 * gk.square()).sqrt() + 1e-7);
                    break;
                case OptimizerKind::adam: {
                    const double alpha = lr * std::sqrt(1 - 0.999) / (1 - 0.9);
                    expected[k].array() -= alpha * (0.1 * gk) / ((0.001 * gk.square()).sqrt() + 1e-7);
                    break;
                }
            }
        }
        TrainConfig tc;
        tc.optimizer = kind;
        tc.learning_rate = lr;
        tc.batch_size = static_cast<int>(samples.size());
        tc.epochs = 1;
        auto [trained, report] = train(m, samples, tc, {});
        CHECK(trained.optimizer.step == 1);
        for (std::size_t k = 0; k < Head::kParams; ++k) {
            const double err = (trained.head.params()[k] - expected[k]).cwiseAbs().maxCoeff();
            CHECK(err < 1e-12);
        }
    }
}

TEST_CASE("frozen backbone stays bit-identical through training") {
    const auto samples = first_n(Split::train, 8);
    const std::string before = test::desk_backbone()->serialize();
    Model m = desk_model();
    TrainConfig tc = test::desk_train_config();
    tc.epochs = 2;
    tc.batch_size = 4;
    auto [trained, report] = train(m, samples, tc, {});
    CHECK(trained.backbone->serialize() == before);
    Model tuned = fine_tune(trained, samples, tc);
    CHECK(tuned.backbone->serialize() == before);
    CHECK(tuned.history.size() == 4);
    CHECK(tuned.history.back().epoch == 4);
    CHECK(!(tuned.head == m.head));
    CHECK(m.trainable_parameter_count() == m.head.parameter_count());
}

TEST_CASE("unfrozen backbone is updated and the cache is bypassed") {
    const auto samples = first_n(Split::train, 2);
    ModelConfig mc = test::desk_model_config();
    mc.freeze_backbone = false;
    Model m = build_model(mc, test::desk_backbone(), 1);
    TrainConfig tc = test::desk_train_config();
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.workers = 2;
    auto [trained, report] = train(m, samples, tc, {});
    CHECK(!(*trained.backbone == *test::desk_backbone()));
    CHECK(trained.cache->size() == 0);
    CHECK(m.trainable_parameter_count() == m.total_parameter_count());
}

TEST_CASE("training is reproducible for a fixed seed and worker count does not matter") {
    const auto samples = first_n(Split::train, 10);
    const auto val = first_n(Split::validation, 5);
    TrainConfig tc = test::desk_train_config(5);
    tc.epochs = 3;
    auto a = train(desk_model(2), samples, tc, val);
    tc.workers = 4;
    auto b = train(desk_model(2), samples, tc, val);
    CHECK(a.first.weights_checksum() == b.first.weights_checksum());
    CHECK(a.second.epochs == b.second.epochs);
    tc.rng_seed = 6;
    auto c = train(desk_model(2), samples, tc, val);
    CHECK(a.first.weights_checksum() != c.first.weights_checksum());
}

TEST_CASE("training rejects bad configuration and data") {
    const auto samples = first_n(Split::train, 2);
    TrainConfig tc = test::desk_train_config();
    tc.batch_size = 10;
    CHECK_THROWS_AS(train(desk_model(), samples, tc, {}), RangeError);
    tc.batch_size = 2;
    tc.epochs = 0;
    CHECK_THROWS_AS(train(desk_model(), samples, tc, {}), RangeError);
    tc.epochs = 1;
    CHECK_THROWS_AS(train(desk_model(), {}, tc, {}), EmptyDatasetError);
    std::vector<Sample> unlabeled = samples;
    unlabeled[0].true_label.reset();
    CHECK_THROWS_AS(train(desk_model(), unlabeled, tc, {}), MissingLabelError);
    ModelConfig mc = test::desk_model_config("/nonexistent/weights.bin");
    CHECK_THROWS_AS(build_model(mc, 1), BackboneUnavailableError);
    mc.l2_lambda = -1;
    CHECK_THROWS_AS(mc.validate(), RangeError);
}

TEST_CASE("threshold ties go to class 1") {
    const std::vector<double> p{0.5, 0.4999999, 0.5000001, 0.0, 1.0};
    CHECK(threshold_labels(p, 0.5) == std::vector<Label>{1, 0, 1, 0, 1});
    CHECK_THROWS_AS(threshold_labels(p, 0.0), RangeError);
    CHECK_THROWS_AS(threshold_labels(p, 1.0), RangeError);
}

TEST_CASE("a constant 0.5 model scores 0.5 on a balanced split") {
    Model m = desk_model();
    m.head.params()[4].setZero();
    m.head.params()[5].setZero();
    const auto val = first_n(Split::validation, 20);
    for (double p : predict_proba(m, val)) CHECK(p == 0.5);
    const auto r = evaluate_model(m, val);
    CHECK(r.accuracy == 0.5);
    CHECK(r.cm == ConfusionMatrix{0, 20, 0, 20});
    REQUIRE(r.auc);
    CHECK(*r.auc == 0.5);
    CHECK(r.per_class[0].degenerate);
}

TEST_CASE("evaluate_model errors") {
    Model m = desk_model();
    CHECK_THROWS_AS(evaluate_model(m, {}), ShapeError);
    auto s = first_n(Split::test, 1);
    s[0].true_label.reset();
    CHECK_THROWS_AS(evaluate_model(m, s), MissingLabelError);
}

TEST_CASE("checkpoints round-trip and detect damage") {
    test::TempDir dir;
    const auto samples = first_n(Split::train, 6);
    TrainConfig tc = test::desk_train_config();
    tc.epochs = 2;
    tc.batch_size = 4;
    Model m = train(desk_model(), samples, tc, {}).first;
    const auto p = dir / "m.ckpt";
    save_checkpoint(m, p);
    const Model back = load_checkpoint(p);
    CHECK(back.config == m.config);
    CHECK(back.head == m.head);
    CHECK(*back.backbone == *m.backbone);
    CHECK(back.optimizer == m.optimizer);
    CHECK(back.history == m.history);
    CHECK(back.weights_checksum() == m.weights_checksum());
    CHECK(predict_proba(back, samples) == predict_proba(m, samples));
    // Fine-tuning continues identically after a reload.
    CHECK(fine_tune(back, samples, tc).weights_checksum() == fine_tune(m, samples, tc).weights_checksum());

    const std::string bytes = read_file(p);
    auto files = detail::tar_unpack(bytes);

    SUBCASE("flipped weight byte") {
        std::string w = files["weights.bin"];
        w[w.size() / 2] ^= 0x01;
        write_file_atomic(p, detail::tar_pack({{"config.json", files["config.json"]}, {"weights.bin", w}}));
        CHECK_THROWS_AS(load_checkpoint(p), ChecksumError);
    }
    SUBCASE("truncated archive") {
        write_file_atomic(p, bytes.substr(0, bytes.size() / 3));
        CHECK_THROWS_AS(load_checkpoint(p), ChecksumError);
    }
    SUBCASE("future format version") {
        auto cfg = nlohmann::json::parse(files["config.json"]);
        cfg["format_version"] = kCheckpointFormatVersion + 1;
        write_file_atomic(p, detail::tar_pack({{"config.json", cfg.dump()}, {"weights.bin", files["weights.bin"]}}));
        CHECK_THROWS_AS(load_checkpoint(p), VersionError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), NotFoundError);
    }
}

TEST_CASE("config json round-trips") {
    ModelConfig mc = test::desk_model_config("/w.bin");
    mc.freeze_backbone = false;
    CHECK(model_config_from_json(to_json(mc)) == mc);
    TrainConfig tc = test::desk_train_config(9);
    tc.optimizer = OptimizerKind::rmsprop;
    tc.deterministic = false;
    CHECK(train_config_from_json(to_json(tc)) == tc);
    CHECK_THROWS_AS(parse_optimizer("adagrad"), std::invalid_argument);
}
