#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "amal/classifier.hpp"
#include "amal/dataset.hpp"

namespace amal {

enum class QueryStrategy { uncertainty, random };
enum class FineTuneScope { cumulative, batch_only };
enum class CheckpointRetention { all, last, none_but_final };
enum class SessionStatus { awaiting_labels, training, converged_stopped, exhausted, aborted };
enum class AnnotatorKind { oracle, human };

std::string_view to_string(QueryStrategy s);
std::string_view to_string(FineTuneScope s);
std::string_view to_string(CheckpointRetention r);
std::string_view to_string(SessionStatus s);
std::string_view to_string(AnnotatorKind k);
QueryStrategy parse_strategy(std::string_view s);
CheckpointRetention parse_retention(std::string_view s);
SessionStatus parse_status(std::string_view s);

inline bool is_terminal(SessionStatus s) {
    return s == SessionStatus::converged_stopped || s == SessionStatus::exhausted || s == SessionStatus::aborted;
}

/// Plateau rule: stop once the last `window` validation accuracies span
/// no more than `epsilon` (max - min).
struct StopRule {
    int window = 5;
    double epsilon = 0.005;
    bool operator==(const StopRule&) const = default;
};

struct ALConfig {
    int query_size = 50;
    int max_queries = 40;
    QueryStrategy strategy = QueryStrategy::uncertainty;
    int fine_tune_epochs = 5;
    FineTuneScope fine_tune_scope = FineTuneScope::cumulative;
    std::optional<StopRule> stop_rule;
    /// Optimizer settings for fine-tuning; `epochs` is ignored in favour of
    /// fine_tune_epochs and the seed is derived per iteration.
    TrainConfig train_cfg;
    std::uint64_t rng_seed = 0;
    std::size_t seed_size = 0;
    CheckpointRetention retention = CheckpointRetention::last;
    double threshold = 0.5;

    bool operator==(const ALConfig&) const = default;
    void validate() const;
};

nlohmann::json to_json(const ALConfig& c);
ALConfig al_config_from_json(const nlohmann::json& j);

struct QueryBatch {
    int iteration = 0;
    std::vector<std::string> sample_ids;  // most informative first
    std::vector<double> scores;  // NaN where no score applies (random draws)
    std::string issued_at;
    bool truncated = false;

    /// Missing (NaN) scores compare equal to each other.
    bool operator==(const QueryBatch& o) const {
        if (iteration != o.iteration || sample_ids != o.sample_ids || issued_at != o.issued_at ||
            truncated != o.truncated || scores.size() != o.scores.size())
            return false;
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (scores[i] != o.scores[i] && !(std::isnan(scores[i]) && std::isnan(o.scores[i]))) return false;
        return true;
    }
};

struct HistoryRow {
    int iteration = 0;
    double val_accuracy = 0.0;
    std::size_t labeled_count = 0;
    std::string timestamp;

    bool operator==(const HistoryRow&) const = default;
};

struct LabelRecord {
    Label label = 0;
    std::string source;
    bool operator==(const LabelRecord&) const = default;
};

struct ALSessionState {
    std::string session_id;
    ALConfig config;
    ModelConfig model_config;
    std::string manifest_path;
    PoolState pool;
    std::map<std::string, LabelRecord> labels;
    std::string model_checkpoint_ref;  // relative to the session directory
    std::optional<QueryBatch> pending_batch;
    std::vector<HistoryRow> history;
    SessionStatus status = SessionStatus::training;
    /// Number of query batches issued so far.
    int iteration = 0;
    bool stop_requested = false;
    std::string abort_cause;
    std::set<std::string> queried_ids;
    /// Ids labeled by the most recent submission (batch_only fine-tuning).
    std::vector<std::string> last_batch_ids;
    /// Replay cache for label submissions: idempotency key -> response body.
    std::map<std::string, std::string> idempotency;
    /// Timestamp counter for deterministic mode.
    std::int64_t logical_clock = 0;

    bool operator==(const ALSessionState&) const = default;
};

nlohmann::json to_json(const ALSessionState& s);
ALSessionState session_state_from_json(const nlohmann::json& j);

/// score = 0.5 - |p - 0.5|; larger means less certain.
std::vector<double> uncertainty_scores(std::span<const double> probs);

// The three classic uncertainty measures for a single sigmoid output. All
// induce the same ordering as uncertainty_scores.
double least_confidence(double p);
double margin_uncertainty(double p);
double entropy_uncertainty(double p);

/// Top-k by score (ties: smaller id first) or a seeded uniform draw. k is
/// truncated to the unlabeled pool size, which sets `truncated`.
QueryBatch select_query(const PoolState& pool, const std::map<std::string, double>& scores_by_id, int k,
                        QueryStrategy strategy, std::uint64_t rng_seed, int iteration = 1);

/// Fresh session in status `training`; step() issues the first batch.
ALSessionState create_session(std::string session_id, const ALConfig& config, const ModelConfig& model_config,
                              const DatasetManifest& manifest, std::string manifest_path);

/// Applies a complete label set for the pending batch. Atomic: on error
/// the input state is untouched.
ALSessionState submit_labels(const ALSessionState& session, const std::map<std::string, Label>& labels,
                             AnnotatorKind annotator);

/// Human stop decision: immediate while awaiting labels (the pending batch
/// returns to the pool), deferred to the end of the current step while
/// training. ConflictError on a terminal session.
ALSessionState request_stop(const ALSessionState& session);

/// Training samples currently labeled in the session, label applied.
std::vector<Sample> labeled_samples(const ALSessionState& session, const DatasetManifest& manifest);

/// One cycle: fine-tune on the new labels, validate, record history, then
/// either finish or issue the next batch. A fresh session only issues.
/// `stop_signal`, when set during the cycle, acts like stop_requested.
std::pair<ALSessionState, Model> step(ALSessionState session, Model model, const DatasetManifest& manifest,
                                      std::span<const Sample> val_samples,
                                      const std::atomic<bool>* stop_signal = nullptr);

class Annotator {
public:
    virtual ~Annotator() = default;
    virtual AnnotatorKind kind() const = 0;
    /// Exactly one label per requested id.
    virtual std::vector<Label> label(std::span<const std::string> sample_ids) = 0;
};

/// Answers from stored ground truth.
class OracleAnnotator final : public Annotator {
public:
    explicit OracleAnnotator(const DatasetManifest& manifest);
    AnnotatorKind kind() const override { return AnnotatorKind::oracle; }
    std::vector<Label> label(std::span<const std::string> sample_ids) override;

private:
    std::map<std::string, Label> truth_;
};

/// Called after every state transition (e.g. to persist the session).
using TransitionHook = std::function<void(ALSessionState&, const Model&)>;

/// Drives step/submit_labels until the session is terminal.
std::pair<ALSessionState, Model> run_with_oracle(ALSessionState session, Model model, Annotator& oracle,
                                                 const DatasetManifest& manifest,
                                                 std::span<const Sample> val_samples,
                                                 const TransitionHook& on_transition = {});

struct HistoryStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
    double peak = 0.0;
};

/// Statistics over history rows with from_iter <= iteration <= to_iter.
HistoryStats history_stats(std::span<const HistoryRow> history, int from_iter, int to_iter);

/// Smallest labeled count at which validation accuracy reached `target`.
std::optional<std::size_t> labels_to_target(std::span<const HistoryRow> history, double target);

// --- session directory: session.json, history.csv, batches/NNN.json ---

inline constexpr int kSessionFormatVersion = 1;

void save_session(const ALSessionState& session, const std::filesystem::path& dir);
ALSessionState resume_session(const std::filesystem::path& dir);

/// Writes the model checkpoint per the retention policy, repoints
/// `model_checkpoint_ref`, then saves the session.
void persist_session(ALSessionState& session, const Model& model, const std::filesystem::path& dir);

/// Loads the checkpoint the session points at (IntegrityError if the file
/// is missing). Before the first checkpoint, builds the initial model from
/// the session's model config and rng_seed, using `backbone` when given.
Model load_session_model(const ALSessionState& session, const std::filesystem::path& dir,
                         std::shared_ptr<const Backbone> backbone = nullptr);

std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path);

/// SVG line chart of validation accuracy per query iteration.
std::string history_svg(std::span<const HistoryRow> history);

}  // namespace amal
