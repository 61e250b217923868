#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "amal/classifier.hpp"
#include "amal/metrics.hpp"

namespace amal {

struct GridSpec {
    std::vector<OptimizerKind> optimizers{OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::rmsprop};
    std::vector<double> learning_rates{1e-2, 1e-3, 1e-4, 1e-5};
    std::vector<int> batch_sizes{4, 32, 64};
    std::vector<int> epochs{30, 60, 120};
    std::vector<double> l2_lambdas{1e-1, 1e-2, 1e-3, 1e-4};
    std::uint64_t rng_seed = 0;

    std::size_t cell_count() const;
    void validate() const;  // RangeError on an empty axis or bad value
};

nlohmann::json to_json(const GridSpec& g);
/// Missing axes keep their defaults.
GridSpec grid_spec_from_json(const nlohmann::json& j);

struct SweepCell {
    std::size_t index = 0;  // position in the cartesian product
    OptimizerKind optimizer = OptimizerKind::sgd;
    double learning_rate = 0.0;
    int batch_size = 0;
    int epochs = 0;
    double l2_lambda = 0.0;

    bool operator==(const SweepCell&) const = default;
};

/// Cartesian product in axis order optimizer, lr, batch, epochs, l2.
std::vector<SweepCell> expand_grid(const GridSpec& grid);

struct CellResult {
    SweepCell cell;
    std::string key;  // cell hash; also the state file stem
    std::optional<EvalReport> validation;
    double final_train_accuracy = 0.0;
    double final_val_accuracy = 0.0;
    /// final train accuracy minus final validation accuracy
    double overfit_gap = 0.0;
    double wall_time_s = 0.0;
    std::string error_code;  // empty on success
    std::string error_message;

    bool ok() const { return error_code.empty(); }
};

struct SweepResult {
    std::vector<CellResult> cells;  // ordered by cell index
    /// optimizer -> position in `cells`; failed cells are never chosen.
    std::map<OptimizerKind, std::size_t> best_per_optimizer;
};

/// Highest validation accuracy; ties go to the lower learning rate, then
/// the smaller batch, then the lower cell index.
std::map<OptimizerKind, std::size_t> select_best(const std::vector<CellResult>& cells);

struct SweepOptions {
    unsigned workers = 1;
    /// Completed cells are stored here as <key>.json and skipped on rerun.
    std::filesystem::path state_dir;
    /// Threads inside each cell's training.
    unsigned train_workers = 1;
    std::function<void(const CellResult&)> on_cell;
};

/// Trains one fresh model per cell on the train split and evaluates it on
/// the validation split. Cell seed: mix_seed(rng_seed, index).
SweepResult run_sweep(const GridSpec& grid, const DatasetManifest& data, const ModelConfig& model_cfg,
                      const SweepOptions& options = {});
SweepResult run_sweep(const GridSpec& grid, const DatasetManifest& data, const ModelConfig& model_cfg,
                      std::shared_ptr<const Backbone> backbone, const SweepOptions& options = {});

inline constexpr std::string_view kSweepCsvHeader = "optimizer,lr,batch,epochs,tn,fp,fn,tp,accuracy,precision,recall,f1,auc";

/// Writes `path` (CSV of the best row per optimizer, class-1 metrics) and
/// `path` with extension .txt (readable table). EmptyResultError if no
/// successful cell exists.
void render_report(const SweepResult& result, const std::filesystem::path& path);

nlohmann::json to_json(const CellResult& c);
CellResult cell_result_from_json(const nlohmann::json& j);

}  // namespace amal
