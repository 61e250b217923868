#include <doctest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "amal/active_learning.hpp"
#include "amal/errors.hpp"
#include "amal/util.hpp"
#include "fixtures.hpp"

using namespace amal;
namespace fs = std::filesystem;

namespace {

PoolState pool_of(std::initializer_list<const char*> labeled, std::initializer_list<const char*> unlabeled) {
    PoolState p;
    for (auto* id : labeled) p.labeled_ids.insert(id);
    for (auto* id : unlabeled) p.unlabeled_ids.insert(id);
    return p;
}

/// Small pool (40 train samples) for session tests.
struct SmallRun {
    const test::DeskData& data = test::desk_data(20);
    std::vector<Sample> val;
    ALConfig cfg;

    SmallRun() {
        for (const auto& s : data.manifest.samples)
            if (s.split == Split::validation && val.size() < 40) val.push_back(s);
        cfg.query_size = 5;
        cfg.max_queries = 4;
        cfg.fine_tune_epochs = 2;
        cfg.train_cfg = test::desk_train_config();
        cfg.rng_seed = 11;
    }

    ALSessionState session(const ALConfig& c) const {
        return create_session("s1", c, test::desk_model_config(), data.manifest, data.manifest_path.string());
    }
    Model model(const ALSessionState& s) const {
        return build_model(s.model_config, test::desk_backbone(), s.config.rng_seed);
    }
    std::map<std::string, Label> oracle_labels(const ALSessionState& s) const {
        std::map<std::string, Label> out;
        for (const auto& id : s.pending_batch->sample_ids) out[id] = *data.manifest.find(id)->true_label;
        return out;
    }
};

bool agree(double a1, double a2, double b1, double b2) {
    const double tol = 1e-12;
    const int sa = a1 > a2 + tol ? 1 : a1 < a2 - tol ? -1 : 0;
    const int sb = b1 > b2 + tol ? 1 : b1 < b2 - tol ? -1 : 0;
    return sa == sb;
}

}  // namespace

TEST_CASE("uncertainty score values") {
    const std::vector<double> p{0.0, 0.1, 0.5, 0.9, 1.0};
    const auto s = uncertainty_scores(p);
    CHECK(s[0] == 0.0);
    CHECK(s[1] == doctest::Approx(0.1));
    CHECK(s[2] == 0.5);
    CHECK(s[3] == doctest::Approx(0.1));
    CHECK(s[4] == 0.0);
    const std::vector<double> bad{1.5};
    CHECK_THROWS_AS(uncertainty_scores(bad), RangeError);
    const std::vector<double> nan{std::nan("")};
    CHECK_THROWS_AS(uncertainty_scores(nan), RangeError);
    CHECK(entropy_uncertainty(0.0) == 0.0);
    CHECK(entropy_uncertainty(0.5) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("least-confidence, margin and entropy order a 101-point grid like the score") {
    std::vector<double> p;
    for (int i = 0; i <= 100; ++i) p.push_back(i / 100.0);
    const auto u = uncertainty_scores(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = 0; j < p.size(); ++j) {
            CAPTURE(p[i]);
            CAPTURE(p[j]);
            CHECK(agree(u[i], u[j], least_confidence(p[i]), least_confidence(p[j])));
            CHECK(agree(u[i], u[j], margin_uncertainty(p[i]), margin_uncertainty(p[j])));
            CHECK(agree(u[i], u[j], entropy_uncertainty(p[i]), entropy_uncertainty(p[j])));
        }
    }
}

TEST_CASE("uncertainty selection takes the top scores, ties by id") {
    const auto pool = pool_of({"z"}, {"a", "b", "c", "d", "e"});
    const std::map<std::string, double> scores{{"a", 0.1}, {"b", 0.4}, {"c", 0.4}, {"d", 0.2}, {"e", 0.0}};
    const auto q = select_query(pool, scores, 3, QueryStrategy::uncertainty, 0);
    CHECK(q.sample_ids == std::vector<std::string>{"b", "c", "d"});
    CHECK(q.scores == std::vector<double>{0.4, 0.4, 0.2});
    CHECK(!q.truncated);
}

TEST_CASE("selection truncates to the pool and rejects bad requests") {
    const auto pool = pool_of({}, {"a", "b"});
    const std::map<std::string, double> scores{{"a", 0.1}, {"b", 0.2}};
    const auto q = select_query(pool, scores, 5, QueryStrategy::uncertainty, 0);
    CHECK(q.sample_ids.size() == 2);
    CHECK(q.truncated);
    CHECK_THROWS_AS(select_query(pool, scores, 0, QueryStrategy::uncertainty, 0), RangeError);
    CHECK_THROWS_AS(select_query(pool_of({"a"}, {}), scores, 1, QueryStrategy::random, 0), PoolExhaustedError);
    CHECK_THROWS_AS(select_query(pool, {{"a", 0.1}}, 1, QueryStrategy::uncertainty, 0), ShapeError);
}

TEST_CASE("random selection is seeded, per-iteration and within the pool (property)") {
    PoolState pool;
    for (int i = 0; i < 50; ++i) pool.unlabeled_ids.insert("id" + std::to_string(i));
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        const auto seed = rng.next();
        const int k = 1 + static_cast<int>(rng.below(50));
        const auto a = select_query(pool, {}, k, QueryStrategy::random, seed, 3);
        CHECK(a == select_query(pool, {}, k, QueryStrategy::random, seed, 3));
        CHECK(a.sample_ids.size() == static_cast<std::size_t>(k));
        const std::set<std::string> uniq(a.sample_ids.begin(), a.sample_ids.end());
        CHECK(uniq.size() == a.sample_ids.size());
        for (const auto& id : a.sample_ids) CHECK(pool.unlabeled_ids.count(id) == 1);
    }
    CHECK(select_query(pool, {}, 10, QueryStrategy::random, 5, 1) !=
          select_query(pool, {}, 10, QueryStrategy::random, 5, 2));
}

TEST_CASE("session creation and label submission") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.seed_size = 6;
    auto s = run.session(c);
    CHECK(s.status == SessionStatus::training);
    CHECK(s.pool.labeled_ids.size() == 6);
    CHECK(s.pool.size() == 40);
    CHECK_THROWS_AS(submit_labels(s, {}, AnnotatorKind::human), ConflictError);

    auto [s1, m1] = step(s, run.model(s), run.data.manifest, run.val);
    REQUIRE(s1.status == SessionStatus::awaiting_labels);
    REQUIRE(s1.pending_batch);
    CHECK(s1.iteration == 1);
    CHECK(s1.pending_batch->sample_ids.size() == 5);
    CHECK(s1.history.empty());
    CHECK_THROWS_AS(step(s1, m1, run.data.manifest, run.val), ConflictError);

    auto labels = run.oracle_labels(s1);
    const ALSessionState snapshot = s1;

    auto partial = labels;
    partial.erase(partial.begin());
    partial["not-in-batch"] = 0;
    try {
        submit_labels(s1, partial, AnnotatorKind::human);
        FAIL("expected BatchMismatchError");
    } catch (const BatchMismatchError& e) {
        CHECK(e.missing() == std::vector<std::string>{labels.begin()->first});
        CHECK(e.extra() == std::vector<std::string>{"not-in-batch"});
    }
    auto invalid = labels;
    invalid.begin()->second = 2;
    CHECK_THROWS_AS(submit_labels(s1, invalid, AnnotatorKind::human), RangeError);
    CHECK(s1 == snapshot);

    const auto s2 = submit_labels(s1, labels, AnnotatorKind::human);
    CHECK(s2.status == SessionStatus::training);
    CHECK(!s2.pending_batch);
    CHECK(s2.pool.labeled_ids.size() == 11);
    for (const auto& [id, label] : labels) {
        CHECK(s2.labels.at(id) == LabelRecord{label, "human"});
        CHECK(s2.pool.unlabeled_ids.count(id) == 0);
    }
    CHECK_THROWS_AS(submit_labels(s2, labels, AnnotatorKind::human), ConflictError);
}

TEST_CASE("oracle run bookkeeping") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.max_queries = 8;  // exhausts the 40-sample pool exactly
    OracleAnnotator oracle(run.data.manifest);
    std::vector<std::vector<std::string>> batches;
    std::size_t pool_size = 0;
    auto s0 = run.session(c);
    pool_size = s0.pool.size();
    auto [s, m] = run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val,
                                  [&](ALSessionState& st, const Model&) {
                                      CHECK(st.pool.size() == pool_size);
                                      if (st.pending_batch) batches.push_back(st.pending_batch->sample_ids);
                                  });
    CHECK(s.status == SessionStatus::exhausted);
    CHECK(s.history.size() == 8);
    CHECK(batches.size() == 8);
    std::set<std::string> seen;
    for (const auto& b : batches)
        for (const auto& id : b) CHECK(seen.insert(id).second);
    for (std::size_t i = 0; i < s.history.size(); ++i) {
        CHECK(s.history[i].iteration == static_cast<int>(i + 1));
        CHECK(s.history[i].labeled_count == 5 * (i + 1));
        CHECK(s.history[i].val_accuracy >= 0.0);
        CHECK(s.history[i].val_accuracy <= 1.0);
    }
    CHECK(s.pool.unlabeled_ids.empty());
    CHECK(labels_to_target(s.history, 0.0) == 5);
    CHECK(!labels_to_target(s.history, 1.01));
}

TEST_CASE("the last batch is truncated when the pool runs short") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.query_size = 15;
    c.max_queries = 10;
    OracleAnnotator oracle(run.data.manifest);
    bool saw_truncated = false;
    auto s0 = run.session(c);
    auto [s, m] = run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val,
                                  [&](ALSessionState& st, const Model&) {
                                      if (st.pending_batch && st.pending_batch->truncated) {
                                          saw_truncated = true;
                                          CHECK(st.pending_batch->sample_ids.size() == 10);
                                      }
                                  });
    CHECK(saw_truncated);
    CHECK(s.status == SessionStatus::exhausted);
    CHECK(s.history.back().labeled_count == 40);
}

TEST_CASE("stop semantics") {
    SmallRun run;
    auto s0 = run.session(run.cfg);
    auto [s1, m1] = step(s0, run.model(s0), run.data.manifest, run.val);
    REQUIRE(s1.status == SessionStatus::awaiting_labels);

    SUBCASE("while awaiting labels the batch is voided") {
        const auto stopped = request_stop(s1);
        CHECK(stopped.status == SessionStatus::converged_stopped);
        CHECK(!stopped.pending_batch);
        CHECK(stopped.pool == s1.pool);
        CHECK_THROWS_AS(request_stop(stopped), ConflictError);
        CHECK_THROWS_AS(submit_labels(stopped, run.oracle_labels(s1), AnnotatorKind::human), ConflictError);
    }
    SUBCASE("while training it finishes the step first") {
        auto s2 = submit_labels(s1, run.oracle_labels(s1), AnnotatorKind::oracle);
        s2 = request_stop(s2);
        CHECK(s2.stop_requested);
        CHECK_THROWS_AS(request_stop(s2), ConflictError);
        auto [s3, m3] = step(s2, m1, run.data.manifest, run.val);
        CHECK(s3.status == SessionStatus::converged_stopped);
        CHECK(s3.history.size() == 1);
        CHECK(!s3.pending_batch);
    }
    SUBCASE("an external stop signal acts the same") {
        auto s2 = submit_labels(s1, run.oracle_labels(s1), AnnotatorKind::oracle);
        std::atomic<bool> signal{true};
        auto [s3, m3] = step(s2, m1, run.data.manifest, run.val, &signal);
        CHECK(s3.status == SessionStatus::converged_stopped);
        CHECK(s3.history.size() == 1);
    }
}

TEST_CASE("plateau rule stops a flat run") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.max_queries = 8;
    c.stop_rule = StopRule{2, 1.0};  // any two rows span at most 1.0
    OracleAnnotator oracle(run.data.manifest);
    auto s0 = run.session(c);
    auto [s, m] = run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val);
    CHECK(s.status == SessionStatus::converged_stopped);
    CHECK(s.history.size() == 2);
}

TEST_CASE("fine-tune scope selects the training set") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.seed_size = 10;
    for (auto scope : {FineTuneScope::cumulative, FineTuneScope::batch_only}) {
        c.fine_tune_scope = scope;
        auto s0 = run.session(c);
        auto [s1, m1] = step(s0, run.model(s0), run.data.manifest, run.val);
        const auto s2 = submit_labels(s1, run.oracle_labels(s1), AnnotatorKind::oracle);
        auto [s3, m3] = step(s2, m1, run.data.manifest, run.val);

        TrainConfig ft = c.train_cfg;
        ft.epochs = c.fine_tune_epochs;
        ft.rng_seed = mix_seed(c.rng_seed, 1);
        std::vector<Sample> expected_set;
        if (scope == FineTuneScope::cumulative) {
            expected_set = labeled_samples(s2, run.data.manifest);
            CHECK(expected_set.size() == 15);
        } else {
            for (const auto& id : s2.last_batch_ids) {
                Sample smp = *run.data.manifest.find(id);
                smp.assigned_label = s2.labels.at(id).label;
                smp.label_source = "oracle";
                expected_set.push_back(smp);
            }
            CHECK(expected_set.size() == 5);
        }
        const Model expected = fine_tune(m1, expected_set, ft);
        CHECK(m3.weights_checksum() == expected.weights_checksum());
    }
}

TEST_CASE("failures inside a step abort the session with a cause") {
    SmallRun run;
    auto s0 = run.session(run.cfg);
    auto [s1, m1] = step(s0, run.model(s0), run.data.manifest, run.val);
    auto s2 = submit_labels(s1, run.oracle_labels(s1), AnnotatorKind::oracle);
    std::vector<Sample> bad_val = run.val;
    bad_val[0].true_label.reset();
    auto [s3, m3] = step(s2, m1, run.data.manifest, bad_val);
    CHECK(s3.status == SessionStatus::aborted);
    CHECK(s3.abort_cause.rfind("MissingLabelError", 0) == 0);
}

TEST_CASE("session save and resume") {
    SmallRun run;
    test::TempDir dir;
    ALConfig c = run.cfg;
    c.retention = CheckpointRetention::all;
    OracleAnnotator oracle(run.data.manifest);

    auto s0 = run.session(c);
    auto full = run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val,
                                [&](ALSessionState& st, const Model& m) { persist_session(st, m, dir / "full"); });
    CHECK(full.first.status == SessionStatus::exhausted);
    CHECK(read_history_csv(dir / "full" / "history.csv") == full.first.history);
    CHECK(resume_session(dir / "full") == full.first);
    for (int i = 1; i <= 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "iter_%03d.ckpt", i);
        CHECK(fs::exists(dir / "full" / "checkpoints" / name));
        std::snprintf(name, sizeof name, "%03d.json", i);
        CHECK(fs::exists(dir / "full" / "batches" / name));
    }

    // Interrupt after two history rows, then resume from disk.
    struct Interrupt {};
    try {
        run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val,
                        [&](ALSessionState& st, const Model& m) {
                            persist_session(st, m, dir / "cut");
                            if (st.history.size() == 2) throw Interrupt{};
                        });
        FAIL("expected interruption");
    } catch (const Interrupt&) {
    }
    auto resumed = resume_session(dir / "cut");
    CHECK(resumed.history.size() == 2);
    Model rm = load_session_model(resumed, dir / "cut");
    auto rest = run_with_oracle(resumed, rm, oracle, run.data.manifest, run.val,
                                [&](ALSessionState& st, const Model& m) { persist_session(st, m, dir / "cut"); });
    CHECK(rest.first.history == full.first.history);
    CHECK(rest.first.pool == full.first.pool);
    CHECK(rest.second.weights_checksum() == full.second.weights_checksum());
    CHECK(read_file(dir / "cut" / "history.csv") == read_file(dir / "full" / "history.csv"));
}

TEST_CASE("resume rejects damaged session files") {
    SmallRun run;
    test::TempDir dir;
    auto s0 = run.session(run.cfg);
    auto [s1, m1] = step(s0, run.model(s0), run.data.manifest, run.val);
    persist_session(s1, m1, dir.path());
    CHECK(resume_session(dir.path()) == s1);
    CHECK(s1.model_checkpoint_ref == "checkpoints/iter_000.ckpt");

    const std::string good = read_file(dir / "session.json");
    auto doc = nlohmann::json::parse(good);
    SUBCASE("tampered state") {
        doc["state"]["iteration"] = 7;
        write_file_atomic(dir / "session.json", doc.dump());
        CHECK_THROWS_AS(resume_session(dir.path()), ChecksumError);
    }
    SUBCASE("unknown version") {
        doc["format_version"] = kSessionFormatVersion + 1;
        write_file_atomic(dir / "session.json", doc.dump());
        CHECK_THROWS_AS(resume_session(dir.path()), VersionError);
    }
    SUBCASE("not json") {
        write_file_atomic(dir / "session.json", good.substr(0, good.size() / 2));
        CHECK_THROWS_AS(resume_session(dir.path()), ChecksumError);
    }
    SUBCASE("checkpoint gone") {
        fs::remove(dir / s1.model_checkpoint_ref);
        CHECK_THROWS_AS(resume_session(dir.path()), IntegrityError);
    }
    SUBCASE("no session") {
        CHECK_THROWS_AS(resume_session(dir / "nothing"), NotFoundError);
    }
}

TEST_CASE("checkpoint retention policies") {
    SmallRun run;
    OracleAnnotator oracle(run.data.manifest);
    for (auto policy : {CheckpointRetention::last, CheckpointRetention::none_but_final}) {
        test::TempDir dir;
        ALConfig c = run.cfg;
        c.retention = policy;
        auto s0 = run.session(c);
        auto [s, m] = run_with_oracle(s0, run.model(s0), oracle, run.data.manifest, run.val,
                                      [&](ALSessionState& st, const Model& mm) { persist_session(st, mm, dir.path()); });
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(dir / "checkpoints")) files.push_back(e.path().filename().string());
        CHECK(files.size() == 1);
        CHECK(load_session_model(s, dir.path()).weights_checksum() == m.weights_checksum());
    }
}

TEST_CASE("history statistics") {
    std::vector<HistoryRow> h;
    const double acc[] = {0.5, 0.7, 0.9, 0.8, 0.8};
    for (int i = 0; i < 5; ++i) h.push_back({i + 1, acc[i], static_cast<std::size_t>(10 * (i + 1)), ""});
    const auto all = history_stats(h, 1, 5);
    CHECK(all.mean == doctest::Approx(0.74));
    CHECK(all.peak == 0.9);
    CHECK(all.stddev == doctest::Approx(std::sqrt((0.0576 + 0.0016 + 0.0256 + 0.0036 + 0.0036) / 5)));
    const auto tail = history_stats(h, 3, 100);
    CHECK(tail.mean == doctest::Approx((0.9 + 0.8 + 0.8) / 3));
    CHECK(history_stats(h, 2, 2).stddev == 0.0);
    CHECK_THROWS_AS(history_stats(h, 6, 9), RangeError);
    CHECK(labels_to_target(h, 0.8) == 30);
}

TEST_CASE("config and state json round-trip") {
    SmallRun run;
    ALConfig c = run.cfg;
    c.stop_rule = StopRule{3, 0.01};
    c.strategy = QueryStrategy::random;
    c.fine_tune_scope = FineTuneScope::batch_only;
    c.retention = CheckpointRetention::none_but_final;
    CHECK(al_config_from_json(to_json(c)) == c);
    auto s0 = run.session(c);
    auto [s1, m1] = step(s0, run.model(s0), run.data.manifest, run.val);
    s1.idempotency["k"] = "{}";
    CHECK(session_state_from_json(to_json(s1)) == s1);
    ALConfig bad = c;
    bad.query_size = 0;
    CHECK_THROWS_AS(bad.validate(), RangeError);
}

TEST_CASE("history svg has one point per row") {
    std::vector<HistoryRow> h{{1, 0.5, 10, ""}, {2, 0.75, 20, ""}, {3, 1.0, 30, ""}};
    const auto svg = history_svg(h);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("polyline") != std::string::npos);
}
