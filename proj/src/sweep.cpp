#include "amal/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/evaluate.hpp"
#include "amal/util.hpp"

namespace amal {

using nlohmann::json;

std::size_t GridSpec::cell_count() const {
    return optimizers.size() * learning_rates.size() * batch_sizes.size() * epochs.size() * l2_lambdas.size();
}

void GridSpec::validate() const {
    if (optimizers.empty() || learning_rates.empty() || batch_sizes.empty() || epochs.empty() || l2_lambdas.empty()) {
        throw RangeError("every grid axis needs at least one value");
    }
    for (double lr : learning_rates)
        if (!(lr > 0.0)) throw RangeError("learning rates must be positive");
    for (int b : batch_sizes)
        if (b <= 0) throw RangeError("batch sizes must be positive");
    for (int e : epochs)
        if (e <= 0) throw RangeError("epoch counts must be positive");
    for (double l : l2_lambdas)
        if (!(l >= 0.0)) throw RangeError("l2 coefficients must be non-negative");
}

json to_json(const GridSpec& g) {
    std::vector<std::string> opts;
    for (auto o : g.optimizers) opts.emplace_back(to_string(o));
    return {{"optimizers", opts},
            {"learning_rates", g.learning_rates},
            {"batch_sizes", g.batch_sizes},
            {"epochs", g.epochs},
            {"l2_lambdas", g.l2_lambdas},
            {"rng_seed", g.rng_seed}};
}

GridSpec grid_spec_from_json(const json& j) {
    GridSpec g;
    if (j.contains("optimizers")) {
        g.optimizers.clear();
        for (const auto& o : j["optimizers"]) g.optimizers.push_back(parse_optimizer(o.get<std::string>()));
    }
    if (j.contains("learning_rates")) g.learning_rates = j["learning_rates"].get<std::vector<double>>();
    if (j.contains("batch_sizes")) g.batch_sizes = j["batch_sizes"].get<std::vector<int>>();
    if (j.contains("epochs")) g.epochs = j["epochs"].get<std::vector<int>>();
    if (j.contains("l2_lambdas")) g.l2_lambdas = j["l2_lambdas"].get<std::vector<double>>();
    g.rng_seed = j.value("rng_seed", g.rng_seed);
    g.validate();
    return g;
}

std::vector<SweepCell> expand_grid(const GridSpec& g) {
    g.validate();
    std::vector<SweepCell> cells;
    cells.reserve(g.cell_count());
    for (auto o : g.optimizers)
        for (double lr : g.learning_rates)
            for (int b : g.batch_sizes)
                for (int e : g.epochs)
                    for (double l2 : g.l2_lambdas) cells.push_back({cells.size(), o, lr, b, e, l2});
    return cells;
}

std::map<OptimizerKind, std::size_t> select_best(const std::vector<CellResult>& cells) {
    std::map<OptimizerKind, std::size_t> best;
    auto better = [](const CellResult& a, const CellResult& b) {
        const double aa = a.validation->accuracy, ba = b.validation->accuracy;
        if (aa != ba) return aa > ba;
        if (a.cell.learning_rate != b.cell.learning_rate) return a.cell.learning_rate < b.cell.learning_rate;
        if (a.cell.batch_size != b.cell.batch_size) return a.cell.batch_size < b.cell.batch_size;
        return a.cell.index < b.cell.index;
    };
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        if (!c.ok() || !c.validation) continue;
        auto it = best.find(c.cell.optimizer);
        if (it == best.end() || better(c, cells[it->second])) best[c.cell.optimizer] = i;
    }
    return best;
}

json to_json(const CellResult& c) {
    return {{"key", c.key},
            {"cell",
             {{"index", c.cell.index},
              {"optimizer", to_string(c.cell.optimizer)},
              {"learning_rate", c.cell.learning_rate},
              {"batch_size", c.cell.batch_size},
              {"epochs", c.cell.epochs},
              {"l2_lambda", c.cell.l2_lambda}}},
            {"validation", c.validation ? to_json(*c.validation) : json(nullptr)},
            {"final_train_accuracy", c.final_train_accuracy},
            {"final_val_accuracy", c.final_val_accuracy},
            {"overfit_gap", c.overfit_gap},
            {"wall_time_s", c.wall_time_s},
            {"error_code", c.error_code},
            {"error_message", c.error_message}};
}

CellResult cell_result_from_json(const json& j) {
    CellResult c;
    c.key = j.at("key").get<std::string>();
    const auto& cell = j.at("cell");
    c.cell = {cell.at("index").get<std::size_t>(), parse_optimizer(cell.at("optimizer").get<std::string>()),
              cell.at("learning_rate").get<double>(), cell.at("batch_size").get<int>(), cell.at("epochs").get<int>(),
              cell.at("l2_lambda").get<double>()};
    if (!j.at("validation").is_null()) c.validation = eval_report_from_json(j["validation"]);
    c.final_train_accuracy = j.at("final_train_accuracy").get<double>();
    c.final_val_accuracy = j.at("final_val_accuracy").get<double>();
    c.overfit_gap = j.at("overfit_gap").get<double>();
    c.wall_time_s = j.at("wall_time_s").get<double>();
    c.error_code = j.at("error_code").get<std::string>();
    c.error_message = j.at("error_message").get<std::string>();
    return c;
}

namespace {

std::string cell_key(const SweepCell& c, const GridSpec& g, const ModelConfig& mc, const std::string& data_digest) {
    json model = to_json(mc);
    model.erase("backbone_weights");  // location does not change the result
    const json k = {{"optimizer", to_string(c.optimizer)},
                    {"learning_rate", c.learning_rate},
                    {"batch_size", c.batch_size},
                    {"epochs", c.epochs},
                    {"l2_lambda", c.l2_lambda},
                    {"index", c.index},
                    {"rng_seed", g.rng_seed},
                    {"model", model},
                    {"data", data_digest}};
    return sha256_hex(k.dump()).substr(0, 24);
}

std::optional<CellResult> load_cell(const std::filesystem::path& path, const std::string& key) {
    if (!std::filesystem::exists(path)) return std::nullopt;
    try {
        CellResult c = cell_result_from_json(json::parse(read_file(path)));
        if (c.key == key) return c;
    } catch (const std::exception&) {
    }
    return std::nullopt;  // stale or unreadable: recompute
}

CellResult run_cell(const SweepCell& cell, const GridSpec& grid, ModelConfig mc,
                    const std::shared_ptr<const Backbone>& backbone, const std::shared_ptr<FeatureCache>& cache,
                    const std::vector<Sample>& train_set, const std::vector<Sample>& val_set, unsigned workers) {
    CellResult r;
    r.cell = cell;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        mc.l2_lambda = cell.l2_lambda;
        const std::uint64_t seed = mix_seed(grid.rng_seed, cell.index);
        Model model = build_model(mc, backbone, seed);
        if (mc.freeze_backbone) model.cache = cache;
        TrainConfig tc;
        tc.optimizer = cell.optimizer;
        tc.learning_rate = cell.learning_rate;
        tc.batch_size = cell.batch_size;
        tc.epochs = cell.epochs;
        tc.rng_seed = seed;
        tc.workers = workers;
        auto [trained, report] = train(std::move(model), train_set, tc, val_set);
        r.validation = evaluate_model(trained, val_set, 0.5, workers);
        r.final_train_accuracy = report.final_train_accuracy;
        r.final_val_accuracy = r.validation->accuracy;
        r.overfit_gap = r.final_train_accuracy - r.final_val_accuracy;
    } catch (const DivergenceError& e) {
        r.error_code = e.code();
        r.error_message = e.what();
    } catch (const RangeError& e) {
        r.error_code = e.code();
        r.error_message = e.what();
    }
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace

SweepResult run_sweep(const GridSpec& grid, const DatasetManifest& data, const ModelConfig& model_cfg,
                      const SweepOptions& options) {
    model_cfg.validate();
    return run_sweep(grid, data, model_cfg, std::make_shared<const Backbone>(Backbone::load(model_cfg.backbone_weights)),
                     options);
}

SweepResult run_sweep(const GridSpec& grid, const DatasetManifest& data, const ModelConfig& model_cfg,
                      std::shared_ptr<const Backbone> backbone, const SweepOptions& options) {
    const auto cells = expand_grid(grid);
    const auto train_set = data.samples_in(Split::train);
    const auto val_set = data.samples_in(Split::validation);
    if (train_set.empty()) throw EmptyDatasetError("sweep needs a non-empty train split");
    if (val_set.empty()) throw EmptyDatasetError("sweep needs a non-empty validation split");
    for (const auto* set : {&train_set, &val_set})
        for (const auto& s : *set)
            if (!s.true_label && !s.assigned_label) throw MissingLabelError("sample '" + s.id + "' has no label");

    const std::string digest = sha256_hex(manifest_csv(data, true));
    if (!options.state_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(options.state_dir, ec);
        if (ec) throw IoError("cannot create sweep state directory " + options.state_dir.string());
    }

    SweepResult result;
    result.cells.resize(cells.size());
    std::vector<std::size_t> todo;
    for (const auto& c : cells) {
        const std::string key = cell_key(c, grid, model_cfg, digest);
        std::optional<CellResult> done;
        if (!options.state_dir.empty()) done = load_cell(options.state_dir / (key + ".json"), key);
        if (done) {
            result.cells[c.index] = std::move(*done);
        } else {
            result.cells[c.index].key = key;
            todo.push_back(c.index);
        }
    }

    auto cache = std::make_shared<FeatureCache>();
    std::mutex writer;
    parallel_for(todo.size(), options.workers, [&](std::size_t t) {
        const std::size_t idx = todo[t];
        CellResult r = run_cell(cells[idx], grid, model_cfg, backbone, cache, train_set, val_set, options.train_workers);
        r.key = result.cells[idx].key;
        std::lock_guard lock(writer);
        if (!options.state_dir.empty()) {
            write_file_atomic(options.state_dir / (r.key + ".json"), to_json(r).dump(2) + "\n");
        }
        result.cells[idx] = r;
        if (options.on_cell) options.on_cell(r);
    });
    result.best_per_optimizer = select_best(result.cells);
    return result;
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

void render_report(const SweepResult& result, const std::filesystem::path& path) {
    if (result.best_per_optimizer.empty()) throw EmptyResultError("sweep result has no successful cell");

    std::ostringstream csv;
    csv << kSweepCsvHeader << "\n";
    std::ostringstream txt;
    txt << "Best configuration per optimizer (validation split, positive class = 1)\n\n";
    for (const auto& [opt, i] : result.best_per_optimizer) {
        const auto& c = result.cells.at(i);
        const auto& r = *c.validation;
        const auto& m = r.per_class[1];
        csv << to_string(opt) << "," << fmt("%g", c.cell.learning_rate) << "," << c.cell.batch_size << ","
            << c.cell.epochs << "," << r.cm.tn << "," << r.cm.fp << "," << r.cm.fn << "," << r.cm.tp << ","
            << fmt("%.6f", r.accuracy) << "," << fmt("%.6f", m.precision) << "," << fmt("%.6f", m.recall) << ","
            << fmt("%.6f", m.f1) << "," << (r.auc ? fmt("%.6f", *r.auc) : std::string()) << "\n";

        txt << to_string(opt) << ": lr " << fmt("%g", c.cell.learning_rate) << ", batch " << c.cell.batch_size
            << ", epochs " << c.cell.epochs << ", l2 " << fmt("%g", c.cell.l2_lambda) << "\n";
        txt << "  Accuracy  Precision  Recall  F1-Score  AUC\n";
        txt << "  " << fmt("%-8.3f", r.accuracy) << "  " << fmt("%-9.3f", m.precision) << "  "
            << fmt("%-6.3f", m.recall) << "  " << fmt("%-8.3f", m.f1) << "  "
            << (r.auc ? fmt("%.3f", *r.auc) : std::string("n/a")) << "\n";
        txt << "  confusion [[" << r.cm.tn << ", " << r.cm.fp << "], [" << r.cm.fn << ", " << r.cm.tp
            << "]]  overfit gap " << fmt("%.3f", c.overfit_gap) << "\n\n";
    }
    txt << "All cells\n";
    txt << "  idx  optimizer  lr        batch  epochs  l2        val_acc  gap     status\n";
    for (const auto& c : result.cells) {
        char line[256];
        std::snprintf(line, sizeof line, "  %-4zu %-10s %-9g %-6d %-7d %-9g ", c.cell.index,
                      std::string(to_string(c.cell.optimizer)).c_str(), c.cell.learning_rate, c.cell.batch_size,
                      c.cell.epochs, c.cell.l2_lambda);
        txt << line;
        if (c.ok()) {
            txt << fmt("%-8.3f", c.final_val_accuracy) << " " << fmt("%-7.3f", c.overfit_gap) << " ok\n";
        } else {
            txt << "-        -       " << c.error_code << "\n";
        }
    }

    if (path.has_parent_path() && !std::filesystem::is_directory(path.parent_path())) {
        throw IoError("report directory does not exist: " + path.parent_path().string());
    }
    write_file_atomic(path, csv.str());
    auto txt_path = path;
    txt_path.replace_extension(".txt");
    write_file_atomic(txt_path, txt.str());
}

}  // namespace amal
