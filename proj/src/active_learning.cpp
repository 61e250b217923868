#include "amal/active_learning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"

namespace amal {

using nlohmann::json;

// ---------------------------------------------------------------------------
// enums

std::string_view to_string(QueryStrategy s) { return s == QueryStrategy::uncertainty ? "uncertainty" : "random"; }
std::string_view to_string(FineTuneScope s) { return s == FineTuneScope::cumulative ? "cumulative" : "batch_only"; }
std::string_view to_string(AnnotatorKind k) { return k == AnnotatorKind::oracle ? "oracle" : "human"; }

std::string_view to_string(CheckpointRetention r) {
    switch (r) {
        case CheckpointRetention::all: return "all";
        case CheckpointRetention::last: return "last";
        case CheckpointRetention::none_but_final: return "none_but_final";
    }
    return "last";
}

std::string_view to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::awaiting_labels: return "awaiting_labels";
        case SessionStatus::training: return "training";
        case SessionStatus::converged_stopped: return "converged_stopped";
        case SessionStatus::exhausted: return "exhausted";
        case SessionStatus::aborted: return "aborted";
    }
    return "aborted";
}

QueryStrategy parse_strategy(std::string_view s) {
    if (s == "uncertainty") return QueryStrategy::uncertainty;
    if (s == "random") return QueryStrategy::random;
    throw std::invalid_argument("unknown strategy '" + std::string(s) + "'");
}

CheckpointRetention parse_retention(std::string_view s) {
    if (s == "all") return CheckpointRetention::all;
    if (s == "last") return CheckpointRetention::last;
    if (s == "none_but_final" || s == "none-but-final") return CheckpointRetention::none_but_final;
    throw std::invalid_argument("unknown retention '" + std::string(s) + "'");
}

SessionStatus parse_status(std::string_view s) {
    for (auto st : {SessionStatus::awaiting_labels, SessionStatus::training, SessionStatus::converged_stopped,
                    SessionStatus::exhausted, SessionStatus::aborted}) {
        if (to_string(st) == s) return st;
    }
    throw std::invalid_argument("unknown status '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// config

void ALConfig::validate() const {
    if (query_size <= 0) throw RangeError("query_size must be positive");
    if (max_queries <= 0) throw RangeError("max_queries must be positive");
    if (fine_tune_epochs <= 0) throw RangeError("fine_tune_epochs must be positive");
    if (stop_rule && (stop_rule->window <= 0 || stop_rule->epsilon < 0.0)) {
        throw RangeError("stop rule needs a positive window and non-negative epsilon");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw RangeError("threshold must lie in (0, 1)");
    TrainConfig t = train_cfg;
    t.epochs = fine_tune_epochs;
    t.validate();
}

json to_json(const ALConfig& c) {
    json j = {{"query_size", c.query_size},
              {"max_queries", c.max_queries},
              {"strategy", to_string(c.strategy)},
              {"fine_tune_epochs", c.fine_tune_epochs},
              {"fine_tune_scope", to_string(c.fine_tune_scope)},
              {"stop_rule", nullptr},
              {"train_cfg", to_json(c.train_cfg)},
              {"rng_seed", c.rng_seed},
              {"seed_size", c.seed_size},
              {"retention", to_string(c.retention)},
              {"threshold", c.threshold}};
    if (c.stop_rule) j["stop_rule"] = {{"window", c.stop_rule->window}, {"epsilon", c.stop_rule->epsilon}};
    return j;
}

ALConfig al_config_from_json(const json& j) {
    ALConfig c;
    c.query_size = j.value("query_size", c.query_size);
    c.max_queries = j.value("max_queries", c.max_queries);
    if (j.contains("strategy")) c.strategy = parse_strategy(j["strategy"].get<std::string>());
    c.fine_tune_epochs = j.value("fine_tune_epochs", c.fine_tune_epochs);
    if (j.contains("fine_tune_scope")) {
        const auto s = j["fine_tune_scope"].get<std::string>();
        if (s == "cumulative") c.fine_tune_scope = FineTuneScope::cumulative;
        else if (s == "batch_only") c.fine_tune_scope = FineTuneScope::batch_only;
        else throw std::invalid_argument("unknown fine_tune_scope '" + s + "'");
    }
    if (j.contains("stop_rule") && !j["stop_rule"].is_null()) {
        c.stop_rule = StopRule{j["stop_rule"].value("window", 5), j["stop_rule"].value("epsilon", 0.005)};
    }
    if (j.contains("train_cfg")) c.train_cfg = train_config_from_json(j["train_cfg"]);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.seed_size = j.value("seed_size", c.seed_size);
    if (j.contains("retention")) c.retention = parse_retention(j["retention"].get<std::string>());
    c.threshold = j.value("threshold", c.threshold);
    c.validate();
    return c;
}

namespace {

json score_json(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double score_from(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

json batch_json(const QueryBatch& b) {
    json scores = json::array();
    for (double s : b.scores) scores.push_back(score_json(s));
    return {{"iteration", b.iteration},
            {"sample_ids", b.sample_ids},
            {"scores", scores},
            {"issued_at", b.issued_at},
            {"truncated", b.truncated}};
}

QueryBatch batch_from(const json& j) {
    QueryBatch b;
    b.iteration = j.at("iteration").get<int>();
    b.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
    for (const auto& s : j.at("scores")) b.scores.push_back(score_from(s));
    b.issued_at = j.at("issued_at").get<std::string>();
    b.truncated = j.at("truncated").get<bool>();
    return b;
}

}  // namespace

json to_json(const ALSessionState& s) {
    json labels = json::object();
    for (const auto& [id, rec] : s.labels) labels[id] = {{"label", rec.label}, {"source", rec.source}};
    json history = json::array();
    for (const auto& h : s.history) {
        history.push_back({{"iteration", h.iteration},
                           {"val_accuracy", h.val_accuracy},
                           {"labeled_count", h.labeled_count},
                           {"timestamp", h.timestamp}});
    }
    return {{"session_id", s.session_id},
            {"config", to_json(s.config)},
            {"model_config", to_json(s.model_config)},
            {"manifest_path", s.manifest_path},
            {"pool", {{"labeled_ids", s.pool.labeled_ids}, {"unlabeled_ids", s.pool.unlabeled_ids}}},
            {"labels", labels},
            {"model_checkpoint_ref", s.model_checkpoint_ref},
            {"pending_batch", s.pending_batch ? batch_json(*s.pending_batch) : json(nullptr)},
            {"history", history},
            {"status", to_string(s.status)},
            {"iteration", s.iteration},
            {"stop_requested", s.stop_requested},
            {"abort_cause", s.abort_cause},
            {"queried_ids", s.queried_ids},
            {"last_batch_ids", s.last_batch_ids},
            {"idempotency", s.idempotency},
            {"logical_clock", s.logical_clock}};
}

ALSessionState session_state_from_json(const json& j) {
    ALSessionState s;
    s.session_id = j.at("session_id").get<std::string>();
    s.config = al_config_from_json(j.at("config"));
    s.model_config = model_config_from_json(j.at("model_config"));
    s.manifest_path = j.at("manifest_path").get<std::string>();
    s.pool.labeled_ids = j.at("pool").at("labeled_ids").get<std::set<std::string>>();
    s.pool.unlabeled_ids = j.at("pool").at("unlabeled_ids").get<std::set<std::string>>();
    for (const auto& [id, rec] : j.at("labels").items()) {
        s.labels[id] = {rec.at("label").get<Label>(), rec.at("source").get<std::string>()};
    }
    s.model_checkpoint_ref = j.at("model_checkpoint_ref").get<std::string>();
    if (!j.at("pending_batch").is_null()) s.pending_batch = batch_from(j["pending_batch"]);
    for (const auto& h : j.at("history")) {
        s.history.push_back({h.at("iteration").get<int>(), h.at("val_accuracy").get<double>(),
                             h.at("labeled_count").get<std::size_t>(), h.at("timestamp").get<std::string>()});
    }
    s.status = parse_status(j.at("status").get<std::string>());
    s.iteration = j.at("iteration").get<int>();
    s.stop_requested = j.at("stop_requested").get<bool>();
    s.abort_cause = j.at("abort_cause").get<std::string>();
    s.queried_ids = j.at("queried_ids").get<std::set<std::string>>();
    s.last_batch_ids = j.at("last_batch_ids").get<std::vector<std::string>>();
    s.idempotency = j.at("idempotency").get<std::map<std::string, std::string>>();
    s.logical_clock = j.at("logical_clock").get<std::int64_t>();
    return s;
}

// ---------------------------------------------------------------------------
// scoring and selection

std::vector<double> uncertainty_scores(std::span<const double> probs) {
    std::vector<double> out;
    out.reserve(probs.size());
    for (double p : probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw RangeError("probability outside [0, 1]");
        out.push_back(0.5 - std::abs(p - 0.5));
    }
    return out;
}

double least_confidence(double p) { return 1.0 - std::max(p, 1.0 - p); }

double margin_uncertainty(double p) { return 1.0 - std::abs(p - (1.0 - p)); }

double entropy_uncertainty(double p) {
    auto term = [](double q) { return q > 0.0 ? -q * std::log(q) : 0.0; };
    return term(p) + term(1.0 - p);
}

QueryBatch select_query(const PoolState& pool, const std::map<std::string, double>& scores_by_id, int k,
                        QueryStrategy strategy, std::uint64_t rng_seed, int iteration) {
    if (k < 1) throw RangeError("query size must be at least 1");
    if (pool.unlabeled_ids.empty()) throw PoolExhaustedError("the unlabeled pool is empty");

    QueryBatch batch;
    batch.iteration = iteration;
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), pool.unlabeled_ids.size());
    batch.truncated = take < static_cast<std::size_t>(k);

    auto score_of = [&](const std::string& id) {
        auto it = scores_by_id.find(id);
        return it == scores_by_id.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
    };

    if (strategy == QueryStrategy::uncertainty) {
        std::vector<std::pair<double, const std::string*>> ranked;
        ranked.reserve(pool.unlabeled_ids.size());
        for (const auto& id : pool.unlabeled_ids) {
            const double s = score_of(id);
            if (std::isnan(s)) throw ShapeError("no uncertainty score for unlabeled sample '" + id + "'");
            ranked.emplace_back(s, &id);
        }
        std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return *a.second < *b.second;
                          });
        for (std::size_t i = 0; i < take; ++i) {
            batch.sample_ids.push_back(*ranked[i].second);
            batch.scores.push_back(ranked[i].first);
        }
    } else {
        std::vector<std::string> ids(pool.unlabeled_ids.begin(), pool.unlabeled_ids.end());
        Rng rng(mix_seed(rng_seed, 0x5E1EC7ULL + static_cast<std::uint64_t>(iteration)));
        rng.shuffle(ids);
        ids.resize(take);
        for (auto& id : ids) {
            batch.scores.push_back(score_of(id));
            batch.sample_ids.push_back(std::move(id));
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// session transitions

namespace {

std::string stamp(ALSessionState& s) {
    if (s.config.train_cfg.deterministic) return format_iso_utc(s.logical_clock++);
    return WallClock().now_iso();
}

void check_conservation(const ALSessionState& s, std::size_t expected_size) {
    if (s.pool.size() != expected_size) throw IntegrityError("pool conservation violated");
    for (const auto& id : s.pool.labeled_ids) {
        if (s.pool.unlabeled_ids.count(id)) throw IntegrityError("id '" + id + "' is both labeled and unlabeled");
        if (!s.labels.count(id)) throw IntegrityError("labeled id '" + id + "' has no label record");
    }
}

bool plateaued(const std::vector<HistoryRow>& history, const StopRule& rule) {
    if (history.size() < static_cast<std::size_t>(rule.window)) return false;
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = history.size() - static_cast<std::size_t>(rule.window); i < history.size(); ++i) {
        lo = std::min(lo, history[i].val_accuracy);
        hi = std::max(hi, history[i].val_accuracy);
    }
    return hi - lo <= rule.epsilon;
}

std::vector<Sample> samples_for(const std::vector<std::string>& ids, const ALSessionState& s,
                                const DatasetManifest& manifest, const IdIndex& index) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        Sample smp = manifest.samples[index.at(id)];
        if (auto it = s.labels.find(id); it != s.labels.end()) {
            smp.assigned_label = it->second.label;
            smp.label_source = it->second.source;
        }
        out.push_back(std::move(smp));
    }
    return out;
}

}  // namespace

ALSessionState create_session(std::string session_id, const ALConfig& config, const ModelConfig& model_config,
                              const DatasetManifest& manifest, std::string manifest_path) {
    config.validate();
    model_config.validate();
    DatasetManifest scratch = manifest;
    ALSessionState s;
    s.session_id = std::move(session_id);
    s.config = config;
    s.model_config = model_config;
    s.manifest_path = std::move(manifest_path);
    s.pool = init_pools(scratch, config.seed_size, config.rng_seed);
    if (s.pool.size() == 0) throw EmptyDatasetError("the train split is empty");
    for (const auto& id : s.pool.labeled_ids) {
        const Sample* smp = scratch.find(id);
        s.labels[id] = {*smp->assigned_label, smp->label_source};
    }
    s.status = SessionStatus::training;
    return s;
}

ALSessionState submit_labels(const ALSessionState& session, const std::map<std::string, Label>& labels,
                             AnnotatorKind annotator) {
    if (session.status != SessionStatus::awaiting_labels || !session.pending_batch) {
        throw ConflictError("session '" + session.session_id + "' has no pending batch (status " +
                            std::string(to_string(session.status)) + ")");
    }
    const auto& ids = session.pending_batch->sample_ids;
    std::vector<std::string> missing, extra;
    const std::set<std::string> wanted(ids.begin(), ids.end());
    for (const auto& id : ids)
        if (!labels.count(id)) missing.push_back(id);
    for (const auto& [id, _] : labels)
        if (!wanted.count(id)) extra.push_back(id);
    if (!missing.empty() || !extra.empty()) throw BatchMismatchError(std::move(missing), std::move(extra));
    for (const auto& [id, label] : labels) {
        if (!is_valid_label(label)) throw RangeError("label for '" + id + "' must be 0 or 1");
    }

    ALSessionState next = session;
    for (const auto& id : ids) {
        if (next.queried_ids.count(id)) throw IntegrityError("sample '" + id + "' was already queried");
        next.pool.unlabeled_ids.erase(id);
        next.pool.labeled_ids.insert(id);
        next.labels[id] = {labels.at(id), std::string(to_string(annotator))};
        next.queried_ids.insert(id);
    }
    next.last_batch_ids = ids;
    next.pending_batch.reset();
    next.status = SessionStatus::training;
    check_conservation(next, session.pool.size());
    return next;
}

ALSessionState request_stop(const ALSessionState& session) {
    if (is_terminal(session.status)) {
        throw ConflictError("session '" + session.session_id + "' is already " +
                            std::string(to_string(session.status)));
    }
    ALSessionState next = session;
    if (next.status == SessionStatus::awaiting_labels) {
        // Pending ids never left the unlabeled pool; voiding is enough.
        next.pending_batch.reset();
        next.status = SessionStatus::converged_stopped;
    } else {
        if (next.stop_requested) throw ConflictError("stop already requested for '" + session.session_id + "'");
        next.stop_requested = true;
    }
    return next;
}

std::vector<Sample> labeled_samples(const ALSessionState& session, const DatasetManifest& manifest) {
    IdIndex index(manifest);
    std::vector<std::string> ids(session.pool.labeled_ids.begin(), session.pool.labeled_ids.end());
    return samples_for(ids, session, manifest, index);
}

std::pair<ALSessionState, Model> step(ALSessionState s, Model model, const DatasetManifest& manifest,
                                      std::span<const Sample> val_samples, const std::atomic<bool>* stop_signal) {
    if (s.status != SessionStatus::training) {
        throw ConflictError("step requires status training, session is " + std::string(to_string(s.status)));
    }
    const std::size_t pool_size = s.pool.size();
    try {
        IdIndex index(manifest);
        TrainConfig ft = s.config.train_cfg;
        ft.epochs = s.config.fine_tune_epochs;
        ft.rng_seed = mix_seed(s.config.rng_seed, static_cast<std::uint64_t>(s.iteration));

        if (s.iteration == 0) {
            if (!s.pool.labeled_ids.empty()) model = fine_tune(std::move(model), labeled_samples(s, manifest), ft);
            if (stop_signal && stop_signal->load()) s.stop_requested = true;
            if (s.stop_requested) {
                s.status = SessionStatus::converged_stopped;
                return {std::move(s), std::move(model)};
            }
            if (s.pool.unlabeled_ids.empty()) {
                s.status = SessionStatus::exhausted;
                return {std::move(s), std::move(model)};
            }
        } else {
            if (s.history.size() + 1 != static_cast<std::size_t>(s.iteration)) {
                throw IntegrityError("history length does not match the iteration counter");
            }
            std::vector<Sample> train_set;
            if (s.config.fine_tune_scope == FineTuneScope::cumulative) {
                train_set = labeled_samples(s, manifest);
            } else {
                train_set = samples_for(s.last_batch_ids, s, manifest, index);
            }
            model = fine_tune(std::move(model), train_set, ft);

            std::vector<Label> truth;
            for (const auto& v : val_samples) {
                if (!v.true_label) throw MissingLabelError("validation sample '" + v.id + "' has no true_label");
                truth.push_back(*v.true_label);
            }
            const auto pred = predict_label(model, val_samples, s.config.threshold, ft.workers);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i] ? 1 : 0;
            const double acc = val_samples.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                   : static_cast<double>(correct) / static_cast<double>(pred.size());
            s.history.push_back({s.iteration, acc, s.pool.labeled_ids.size(), stamp(s)});
            if (stop_signal && stop_signal->load()) s.stop_requested = true;

            if (s.stop_requested || (s.config.stop_rule && plateaued(s.history, *s.config.stop_rule))) {
                s.status = SessionStatus::converged_stopped;
            } else if (s.pool.unlabeled_ids.empty() || s.iteration >= s.config.max_queries) {
                s.status = SessionStatus::exhausted;
            }
            if (is_terminal(s.status)) return {std::move(s), std::move(model)};
        }

        std::vector<std::string> unlabeled(s.pool.unlabeled_ids.begin(), s.pool.unlabeled_ids.end());
        const auto candidates = samples_for(unlabeled, s, manifest, index);
        const auto scores = uncertainty_scores(predict_proba(model, candidates, ft.workers));
        std::map<std::string, double> by_id;
        for (std::size_t i = 0; i < unlabeled.size(); ++i) by_id.emplace(unlabeled[i], scores[i]);

        QueryBatch batch = select_query(s.pool, by_id, s.config.query_size, s.config.strategy, s.config.rng_seed,
                                        s.iteration + 1);
        batch.issued_at = stamp(s);
        s.iteration += 1;
        s.pending_batch = std::move(batch);
        s.status = SessionStatus::awaiting_labels;
        check_conservation(s, pool_size);
    } catch (const Error& e) {
        s.status = SessionStatus::aborted;
        s.abort_cause = e.code() + ": " + e.what();
    }
    return {std::move(s), std::move(model)};
}

// ---------------------------------------------------------------------------
// oracle loop

OracleAnnotator::OracleAnnotator(const DatasetManifest& manifest) {
    for (const auto& s : manifest.samples)
        if (s.true_label) truth_.emplace(s.id, *s.true_label);
}

std::vector<Label> OracleAnnotator::label(std::span<const std::string> ids) {
    std::vector<Label> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = truth_.find(id);
        if (it == truth_.end()) throw MissingLabelError("oracle has no true_label for '" + id + "'");
        out.push_back(it->second);
    }
    return out;
}

std::pair<ALSessionState, Model> run_with_oracle(ALSessionState session, Model model, Annotator& oracle,
                                                 const DatasetManifest& manifest,
                                                 std::span<const Sample> val_samples,
                                                 const TransitionHook& on_transition) {
    while (!is_terminal(session.status)) {
        if (session.status == SessionStatus::training) {
            std::tie(session, model) = step(std::move(session), std::move(model), manifest, val_samples);
        } else {
            const auto& ids = session.pending_batch->sample_ids;
            const auto answers = oracle.label(ids);
            if (answers.size() != ids.size()) throw ShapeError("annotator returned the wrong number of labels");
            std::map<std::string, Label> labels;
            for (std::size_t i = 0; i < ids.size(); ++i) labels.emplace(ids[i], answers[i]);
            session = submit_labels(session, labels, oracle.kind());
        }
        if (on_transition) on_transition(session, model);
    }
    return {std::move(session), std::move(model)};
}

// ---------------------------------------------------------------------------
// statistics

HistoryStats history_stats(std::span<const HistoryRow> history, int from_iter, int to_iter) {
    std::vector<double> xs;
    for (const auto& h : history)
        if (h.iteration >= from_iter && h.iteration <= to_iter) xs.push_back(h.val_accuracy);
    if (xs.empty()) {
        throw RangeError("no history rows in iterations " + std::to_string(from_iter) + ".." + std::to_string(to_iter));
    }
    HistoryStats st;
    for (double x : xs) st.mean += x;
    st.mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - st.mean) * (x - st.mean);
    st.stddev = std::sqrt(ss / static_cast<double>(xs.size()));
    st.peak = *std::max_element(xs.begin(), xs.end());
    return st;
}

std::optional<std::size_t> labels_to_target(std::span<const HistoryRow> history, double target) {
    for (const auto& h : history)
        if (h.val_accuracy >= target) return h.labeled_count;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

constexpr std::string_view kHistoryHeader = "iteration,val_accuracy,labeled_count,timestamp";

std::string history_line(const HistoryRow& h) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", h.val_accuracy);
    return std::to_string(h.iteration) + "," + buf + "," + std::to_string(h.labeled_count) + "," + h.timestamp;
}

std::string batch_file_name(int iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03d.json", iteration);
    return buf;
}

std::string checkpoint_name(const ALSessionState& s) {
    if (s.config.retention == CheckpointRetention::none_but_final) return "model.ckpt";
    char buf[32];
    std::snprintf(buf, sizeof buf, "iter_%03d.ckpt", static_cast<int>(s.history.size()));
    return buf;
}

}  // namespace

std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    std::vector<HistoryRow> rows;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line != kHistoryHeader) throw ParseError(1, "unexpected history header");
            continue;
        }
        if (line.empty()) continue;
        const auto f = csv::split(line);
        if (f.size() != 4) throw ParseError(lineno, "expected 4 fields");
        try {
            rows.push_back({std::stoi(f[0]), std::stod(f[1]), static_cast<std::size_t>(std::stoull(f[2])), f[3]});
        } catch (const std::exception&) {
            throw ParseError(lineno, "malformed history row");
        }
    }
    return rows;
}

void save_session(const ALSessionState& s, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "batches", ec);
    if (ec) throw IoError("cannot create session directory " + dir.string() + ": " + ec.message());

    // history.csv is append-only: add whatever rows are not on disk yet.
    const auto history_path = dir / "history.csv";
    std::size_t on_disk = 0;
    if (std::filesystem::exists(history_path)) {
        on_disk = read_history_csv(history_path).size();
    } else {
        append_line_synced(history_path, kHistoryHeader);
    }
    if (on_disk > s.history.size()) throw IntegrityError(history_path.string() + " has more rows than the session");
    for (std::size_t i = on_disk; i < s.history.size(); ++i) append_line_synced(history_path, history_line(s.history[i]));

    if (s.pending_batch) {
        const auto bp = dir / "batches" / batch_file_name(s.pending_batch->iteration);
        if (!std::filesystem::exists(bp)) write_file_atomic(bp, batch_json(*s.pending_batch).dump(2) + "\n");
    }

    const json state = to_json(s);
    const json doc = {{"format_version", kSessionFormatVersion}, {"checksum", sha256_hex(state.dump())}, {"state", state}};
    write_file_atomic(dir / "session.json", doc.dump(2) + "\n");
}

ALSessionState resume_session(const std::filesystem::path& dir) {
    const auto path = dir / "session.json";
    if (!std::filesystem::exists(path)) throw NotFoundError("no session at " + dir.string());
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ChecksumError(path.string() + ": unreadable session state: " + e.what());
    }
    const int version = doc.value("format_version", -1);
    if (version != kSessionFormatVersion) {
        throw VersionError(path.string() + ": session format_version " + std::to_string(version) + " is not supported");
    }
    if (!doc.contains("state") || sha256_hex(doc["state"].dump()) != doc.value("checksum", std::string())) {
        throw ChecksumError(path.string() + ": session state checksum mismatch");
    }
    ALSessionState s;
    try {
        s = session_state_from_json(doc["state"]);
    } catch (const std::exception& e) {
        throw ChecksumError(path.string() + ": " + e.what());
    }
    if (!s.model_checkpoint_ref.empty() && !std::filesystem::exists(dir / s.model_checkpoint_ref)) {
        throw IntegrityError("session checkpoint missing: " + (dir / s.model_checkpoint_ref).string());
    }
    return s;
}

void persist_session(ALSessionState& s, const Model& model, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "checkpoints", ec);
    if (ec) throw IoError("cannot create " + (dir / "checkpoints").string());
    const std::string rel = "checkpoints/" + checkpoint_name(s);
    if (rel != s.model_checkpoint_ref || s.config.retention == CheckpointRetention::none_but_final) {
        save_checkpoint(model, dir / rel);
        const std::string previous = s.model_checkpoint_ref;
        s.model_checkpoint_ref = rel;
        save_session(s, dir);
        if (s.config.retention == CheckpointRetention::last && !previous.empty() && previous != rel) {
            std::filesystem::remove(dir / previous, ec);
        }
        return;
    }
    save_session(s, dir);
}

Model load_session_model(const ALSessionState& s, const std::filesystem::path& dir,
                         std::shared_ptr<const Backbone> backbone) {
    if (s.model_checkpoint_ref.empty()) {
        if (backbone) return build_model(s.model_config, std::move(backbone), s.config.rng_seed);
        return build_model(s.model_config, s.config.rng_seed);
    }
    const auto path = dir / s.model_checkpoint_ref;
    if (!std::filesystem::exists(path)) throw IntegrityError("session checkpoint missing: " + path.string());
    return load_checkpoint(path);
}

std::string history_svg(std::span<const HistoryRow> history) {
    constexpr double W = 640, H = 360, L = 56, R = 16, T = 20, B = 44;
    const int max_iter = history.empty() ? 1 : std::max(1, history.back().iteration);
    auto x_of = [&](double it) { return L + (W - L - R) * (it / max_iter); };
    auto y_of = [&](double acc) { return T + (H - T - B) * (1.0 - acc); };
    std::ostringstream svg;
    char buf[160];
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int k = 0; k <= 10; k += 2) {
        const double a = k / 10.0;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/><text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n",
                      L, y_of(a), W - R, y_of(a), L - 6, y_of(a) + 4, a);
        svg << buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">query iteration</text>\n", (L + W - R) / 2, H - 8);
    svg << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"14\" y=\"%.1f\" transform=\"rotate(-90 14 %.1f)\" text-anchor=\"middle\">validation accuracy</text>\n",
                  (T + H - B) / 2, (T + H - B) / 2);
    svg << buf;
    svg << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
    for (const auto& h : history) {
        if (std::isnan(h.val_accuracy)) continue;
        std::snprintf(buf, sizeof buf, "%.1f,%.1f ", x_of(h.iteration), y_of(std::clamp(h.val_accuracy, 0.0, 1.0)));
        svg << buf;
    }
    svg << "\"/>\n";
    for (const auto& h : history) {
        if (std::isnan(h.val_accuracy)) continue;
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"2.5\" fill=\"#1f77b4\"/>\n", x_of(h.iteration),
                      y_of(std::clamp(h.val_accuracy, 0.0, 1.0)));
        svg << buf;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace amal
