// amal: command-line front end.

#include <atomic>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "amal/active_learning.hpp"
#include "amal/autolabel.hpp"
#include "amal/backbone.hpp"
#include "amal/classifier.hpp"
#include "amal/dataset.hpp"
#include "amal/errors.hpp"
#include "amal/evaluate.hpp"
#include "amal/metrics.hpp"
#include "amal/service.hpp"
#include "amal/sweep.hpp"
#include "amal/synthetic.hpp"
#include "amal/util.hpp"
#include "json_config.hpp"

namespace {

using namespace amal;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitUsage = 64;

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

struct ModelOpts {
    std::string backbone;
    int side = 224;
    std::vector<int> head{256, 64};
    double l2 = 1e-3;
    bool unfreeze = false;

    ModelConfig build() const {
        ModelConfig mc;
        mc.backbone_weights = backbone;
        mc.input_side = side;
        if (head.size() != 2) throw RangeError("--head takes exactly two widths");
        mc.head_widths = {head[0], head[1]};
        mc.l2_lambda = l2;
        mc.freeze_backbone = !unfreeze;
        mc.validate();
        return mc;
    }
};

void add_model_options(CLI::App* sub, ModelOpts& o) {
    sub->add_option("--backbone", o.backbone, "Backbone weights file (13 conv layers)")->required();
    sub->add_option("--side", o.side, "Input image side in pixels")->capture_default_str();
    sub->add_option("--head", o.head, "Widths of the two hidden dense layers")->expected(2)->capture_default_str();
    sub->add_option("--l2", o.l2, "L2 coefficient on the hidden dense kernels")->capture_default_str();
    sub->add_flag("--unfreeze", o.unfreeze, "Train the backbone too");
}

struct TrainOpts {
    std::string optimizer = "sgd";
    double lr = 0.01;
    int batch = 4;
    int epochs = 60;
    std::uint64_t seed = 0;
    unsigned workers = 1;
    bool nondeterministic = false;

    TrainConfig build() const {
        TrainConfig tc;
        tc.optimizer = parse_optimizer(optimizer);
        tc.learning_rate = lr;
        tc.batch_size = batch;
        tc.epochs = epochs;
        tc.rng_seed = seed;
        tc.workers = workers;
        tc.deterministic = !nondeterministic;
        tc.validate();
        return tc;
    }
};

void add_train_options(CLI::App* sub, TrainOpts& o, bool with_epochs) {
    sub->add_option("--optimizer", o.optimizer, "sgd, adam or rmsprop")
        ->check(CLI::IsMember({"sgd", "adam", "rmsprop"}))
        ->capture_default_str();
    sub->add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--batch", o.batch, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
    if (with_epochs) {
        sub->add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
    }
    sub->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
    sub->add_option("--workers", o.workers, "Threads for decoding and backbone passes")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_flag("--nondeterministic", o.nondeterministic, "Allow completion-order gradient reduction");
}

void write_json(const std::string& path, const json& j) {
    const std::filesystem::path p(path);
    if (p.has_parent_path() && !std::filesystem::is_directory(p.parent_path())) {
        throw IoError("directory does not exist: " + p.parent_path().string());
    }
    write_file_atomic(p, j.dump(2) + "\n");
}

void print_counts(const DatasetManifest& m) {
    const auto counts = m.split_counts();
    for (auto split : {Split::train, Split::validation, Split::test}) {
        auto it = counts.find(split);
        std::cout << to_string(split) << ": " << (it == counts.end() ? 0 : it->second) << "\n";
    }
}

// ---------------------------------------------------------------------------

struct ScanCmd {
    std::string root, layout = "split_dirs", out;
    int run() const {
        const auto m = scan_directory(root, layout == "flat" ? ScanLayout::flat : ScanLayout::split_dirs);
        save_manifest(m, out);
        std::cout << "classes: " << m.class_names[0] << " (0), " << m.class_names[1] << " (1)\n";
        print_counts(m);
        std::cout << "manifest: " << out << "\n";
        return kExitOk;
    }
};

struct SynthCmd {
    std::string out, manifest;
    SyntheticSpec spec;
    int run() {
        const auto m = write_synthetic_dataset(out, spec);
        const std::string path = manifest.empty() ? (std::filesystem::path(out) / "manifest.csv").string() : manifest;
        save_manifest(m, path);
        print_counts(m);
        std::cout << "manifest: " << path << "\n";
        return kExitOk;
    }
};

struct BackboneInitCmd {
    std::string out;
    std::vector<int> widths{8, 16, 32, 64, 64};
    std::uint64_t seed = 7;
    int run() const {
        if (widths.size() != 5) throw RangeError("--widths takes five block widths");
        const auto bb = Backbone::initialized({widths[0], widths[1], widths[2], widths[3], widths[4]}, seed);
        bb.save(out);
        std::cout << "backbone: " << out << " (" << bb.parameter_count() << " parameters)\n";
        return kExitOk;
    }
};

struct TrainCmd {
    std::string manifest, out, report;
    ModelOpts model;
    TrainOpts train;
    int run() const {
        const auto mc = model.build();
        const auto tc = train.build();
        const auto m = load_manifest(manifest);
        const auto tr = m.samples_in(Split::train);
        const auto val = m.samples_in(Split::validation);
        Model built = build_model(mc, tc.rng_seed);
        auto [trained, rep] = amal::train(std::move(built), tr, tc, val);
        save_checkpoint(trained, out);
        json j = {{"train_config", to_json(tc)}, {"model_config", to_json(mc)}};
        j["final_train_accuracy"] = rep.final_train_accuracy;
        j["epochs"] = json::array();
        for (const auto& e : rep.epochs) {
            j["epochs"].push_back({{"epoch", e.epoch},
                                   {"train_loss", e.train_loss},
                                   {"val_accuracy", std::isnan(e.val_accuracy) ? json(nullptr) : json(e.val_accuracy)}});
        }
        if (!val.empty()) {
            const auto ev = evaluate_model(trained, val, 0.5, tc.workers);
            j["validation"] = to_json(ev);
            std::cout << format_report(ev, m.class_names);
        }
        write_json(report.empty() ? out + ".report.json" : report, j);
        std::cout << "checkpoint: " << out << "\n";
        return kExitOk;
    }
};

struct SweepCmd {
    std::string manifest, grid, state_dir, out = "sweep.csv";
    unsigned workers = 1;
    ModelOpts model;
    int run() const {
        const auto mc = model.build();
        GridSpec g;
        if (!grid.empty()) g = grid_spec_from_json(json::parse(read_file(grid)));
        const auto m = load_manifest(manifest);
        std::cout << "grid cells: " << g.cell_count() << "\n";
        SweepOptions opts;
        opts.workers = workers;
        opts.state_dir = state_dir;
        std::size_t done = 0;
        opts.on_cell = [&](const CellResult& c) {
            ++done;
            std::cout << "[" << done << "] cell " << c.cell.index << " " << to_string(c.cell.optimizer) << " lr "
                      << c.cell.learning_rate << " batch " << c.cell.batch_size << " epochs " << c.cell.epochs
                      << " l2 " << c.cell.l2_lambda << ": "
                      << (c.ok() ? "val acc " + std::to_string(c.final_val_accuracy) : c.error_code) << std::endl;
            if (g_interrupted) throw IoError("interrupted");
        };
        const auto result = run_sweep(g, m, mc, opts);
        render_report(result, out);
        auto txt = std::filesystem::path(out);
        txt.replace_extension(".txt");
        std::cout << read_file(txt);
        return kExitOk;
    }
};

struct AlCmd {
    std::string manifest, mode = "oracle", strategy = "uncertainty", session_dir, retention = "last";
    int query_size = 50, max_queries = 40, fine_tune_epochs = 5;
    std::size_t seed_size = 0;
    std::optional<int> stop_window;
    double stop_eps = 0.005;
    bool compare = false;
    double target = 0.95;
    double threshold = 0.5;
    std::string host = "127.0.0.1", token;
    int port = 8080;
    ModelOpts model;
    TrainOpts train;

    ALConfig al_config(QueryStrategy s) const {
        ALConfig c;
        c.query_size = query_size;
        c.max_queries = max_queries;
        c.strategy = s;
        c.fine_tune_epochs = fine_tune_epochs;
        if (stop_window) c.stop_rule = StopRule{*stop_window, stop_eps};
        c.train_cfg = train.build();
        c.rng_seed = train.seed;
        c.seed_size = seed_size;
        c.retention = parse_retention(retention);
        c.threshold = threshold;
        c.validate();
        return c;
    }

    std::vector<HistoryRow> run_oracle(QueryStrategy s, const std::filesystem::path& dir,
                                       const DatasetManifest& m) const {
        ALSessionState state;
        Model mdl;
        if (std::filesystem::exists(dir / "session.json")) {
            state = resume_session(dir);
            mdl = load_session_model(state, dir);
            std::cout << "resuming " << dir.string() << " at iteration " << state.iteration << "\n";
        } else {
            state = create_session(dir.filename().string(), al_config(s), model.build(), m, manifest);
            save_session(state, dir);
            mdl = load_session_model(state, dir);
        }
        OracleAnnotator oracle(m);
        const auto val = m.samples_in(Split::validation);
        std::size_t printed = state.history.size();
        const auto hook = [&](ALSessionState& st, const Model& md) {
            persist_session(st, md, dir);
            for (; printed < st.history.size(); ++printed) {
                const auto& h = st.history[printed];
                std::printf("query %3d  labeled %6zu  val acc %.4f\n", h.iteration, h.labeled_count, h.val_accuracy);
                std::fflush(stdout);
            }
            if (g_interrupted && !is_terminal(st.status)) throw IoError("interrupted; rerun to resume");
        };
        if (!is_terminal(state.status)) {
            std::tie(state, mdl) = run_with_oracle(std::move(state), std::move(mdl), oracle, m, val, hook);
        }
        write_file_atomic(dir / "history.svg", history_svg(state.history));
        std::cout << to_string(s) << ": " << to_string(state.status);
        if (!state.abort_cause.empty()) std::cout << " (" << state.abort_cause << ")";
        std::cout << ", " << state.history.size() << " queries, " << state.pool.labeled_ids.size() << " of "
                  << state.pool.size() << " labeled\n";
        if (state.status == SessionStatus::aborted) throw IntegrityError("session aborted: " + state.abort_cause);
        return state.history;
    }

    json target_summary(const std::vector<HistoryRow>& h, std::size_t pool) const {
        const auto n = labels_to_target(h, target);
        return {{"labels_to_target", n ? json(*n) : json(nullptr)},
                {"fraction_of_pool", n ? json(static_cast<double>(*n) / static_cast<double>(pool)) : json(nullptr)},
                {"queries", h.size()},
                {"final_val_accuracy", h.empty() ? json(nullptr) : json(h.back().val_accuracy)}};
    }

    int run() const {
        if (session_dir.empty()) throw RangeError("--session-dir is required");
        if (mode == "serve") return serve();
        const auto m = load_manifest(manifest);
        const std::size_t pool = m.samples_in(Split::train).size();
        const std::filesystem::path dir(session_dir);
        if (!compare) {
            run_oracle(parse_strategy(strategy), dir, m);
            std::cout << "history: " << (dir / "history.csv").string() << "\n";
            return kExitOk;
        }
        const auto hu = run_oracle(QueryStrategy::uncertainty, dir / "uncertainty", m);
        const auto hr = run_oracle(QueryStrategy::random, dir / "random", m);
        const json summary = {{"target", target},
                              {"pool_size", pool},
                              {"uncertainty", target_summary(hu, pool)},
                              {"random", target_summary(hr, pool)}};
        write_json((dir / "comparison.json").string(), summary);
        std::cout << summary.dump(2) << "\n";
        return kExitOk;
    }

    int serve() const {
        const std::filesystem::path dir = std::filesystem::absolute(session_dir);
        ServiceConfig sc;
        sc.host = host;
        sc.port = port;
        sc.store = dir.parent_path();
        if (!token.empty()) sc.token = token;
        sc.default_model = model.build();
        SessionService svc(sc);
        const int bound = svc.start();
        const std::string id = dir.filename().string();
        bool exists = false;
        try {
            svc.snapshot(id);
            exists = true;
        } catch (const NotFoundError&) {
        }
        if (!exists) svc.create(id, std::filesystem::absolute(manifest).string(), al_config(parse_strategy(strategy)), std::nullopt);
        std::cout << "session: http://" << host << ":" << bound << "/api/v1/sessions/" << id << std::endl;
        while (!g_interrupted) {
            if (is_terminal(svc.snapshot(id).status)) break;
            std::this_thread::sleep_for(std::chrono::milliseconds(200));
        }
        svc.wait_idle(id);
        const auto st = svc.snapshot(id);
        svc.stop();
        write_file_atomic(dir / "history.svg", history_svg(st.history));
        std::cout << "status: " << to_string(st.status) << ", " << st.history.size() << " queries\n";
        return kExitOk;
    }
};

struct ServeCmd {
    std::string store, host = "127.0.0.1", token;
    int port = 8080;
    ModelOpts model;
    bool verbose = false;
    int run() const {
        ServiceConfig sc;
        sc.host = host;
        sc.port = port;
        sc.store = store;
        if (!token.empty()) sc.token = token;
        sc.default_model = model.build();
        sc.log_requests = verbose;
        SessionService svc(sc);
        const int bound = svc.start();
        std::cout << "listening on http://" << host << ":" << bound << std::endl;
        while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(200));
        svc.stop();
        return kExitOk;
    }
};

struct EvalCmd {
    std::string checkpoint, manifest, split = "test", out;
    double threshold = 0.5;
    unsigned workers = 1;
    int run() const {
        const Model model = load_checkpoint(checkpoint);
        const auto m = load_manifest(manifest);
        const auto samples = m.samples_in(parse_split(split));
        const auto rep = evaluate_model(model, samples, threshold, workers);
        std::cout << format_report(rep, m.class_names);
        if (!out.empty()) write_json(out, to_json(rep));
        return kExitOk;
    }
};

struct AutolabelCmd {
    std::string checkpoint, manifest, split = "test", out, report;
    std::optional<double> min_confidence;
    double threshold = 0.5;
    unsigned workers = 1;
    bool only_unlabeled = false;
    int run() const {
        const Model model = load_checkpoint(checkpoint);
        const auto m = load_manifest(manifest);
        auto samples = m.samples_in(parse_split(split));
        if (only_unlabeled) {
            std::erase_if(samples, [](const Sample& s) {
                return s.assigned_label && label_origin(s.label_source) != LabelOrigin::autolabel;
            });
        }
        const auto res = autolabel(model, samples, threshold, min_confidence, workers);
        const json rj = to_json(res.report);
        write_json(report.empty() ? out + ".report.json" : report, rj);
        std::cout << "labeled " << res.report.labeled << ", skipped " << res.report.skipped << " of "
                  << res.report.input_count << "\n";
        for (const auto& f : res.report.decode_failures) std::cout << "decode failure: " << f.message << "\n";
        if (res.report.evaluation) std::cout << format_report(*res.report.evaluation, m.class_names);
        if (res.report.zero_coverage) {
            std::cout << "zero coverage: no sample passed the confidence gate\n";
            return kExitOk;
        }
        export_labeled(res.delta, m, out);
        std::cout << "labels: " << out << "\n";
        return kExitOk;
    }
};

struct HistoryStatsCmd {
    std::string session_dir;
    int from = 1, to = 1 << 30;
    int run() const {
        const auto rows = read_history_csv(std::filesystem::path(session_dir) / "history.csv");
        const auto st = history_stats(rows, from, to);
        std::printf("mean %.6f  std %.6f  peak %.6f\n", st.mean, st.stddev, st.peak);
        return kExitOk;
    }
};

int exit_code_for(const Error& e) {
    switch (e.category()) {
        case ErrorCategory::io: return kExitIo;
        case ErrorCategory::numeric: return kExitNumeric;
        case ErrorCategory::validation:
        case ErrorCategory::state: return kExitValidation;
    }
    return kExitIo;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Active-learning workbench for binary image defect classification"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "JSON file supplying any flag (command-line flags win)");
    app.config_formatter(std::make_shared<amal::cli::JsonConfig>(&app));

    ScanCmd scan;
    auto* c_scan = app.add_subcommand("scan", "Build a manifest from an image directory");
    c_scan->add_option("root", scan.root, "Dataset root")->required();
    c_scan->add_option("--layout", scan.layout, "split_dirs or flat")
        ->check(CLI::IsMember({"split_dirs", "flat"}))
        ->capture_default_str();
    c_scan->add_option("--out", scan.out, "Manifest CSV to write")->required();

    SynthCmd synth;
    auto* c_synth = app.add_subcommand("synth", "Write a synthetic melt-pool-like dataset");
    c_synth->add_option("--out", synth.out, "Dataset root")->required();
    c_synth->add_option("--manifest", synth.manifest, "Manifest path (default <out>/manifest.csv)");
    c_synth->add_option("--train-per-class", synth.spec.train_per_class)->capture_default_str();
    c_synth->add_option("--val-per-class", synth.spec.validation_per_class)->capture_default_str();
    c_synth->add_option("--test-per-class", synth.spec.test_per_class)->capture_default_str();
    c_synth->add_option("--side", synth.spec.side)->capture_default_str();
    c_synth->add_option("--noise", synth.spec.noise)->capture_default_str();
    c_synth->add_option("--overlap", synth.spec.overlap)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c_synth->add_option("--seed", synth.spec.seed)->capture_default_str();

    BackboneInitCmd binit;
    auto* c_binit = app.add_subcommand("backbone-init", "Write a randomly initialized 13-layer backbone");
    c_binit->add_option("--out", binit.out)->required();
    c_binit->add_option("--widths", binit.widths, "Channels per block")->expected(5)->capture_default_str();
    c_binit->add_option("--seed", binit.seed)->capture_default_str();

    TrainCmd trainc;
    auto* c_train = app.add_subcommand("train", "Train on the train split and evaluate on validation");
    c_train->add_option("--manifest", trainc.manifest)->required();
    c_train->add_option("--out", trainc.out, "Checkpoint path")->required();
    c_train->add_option("--report", trainc.report, "Report JSON (default <out>.report.json)");
    add_model_options(c_train, trainc.model);
    add_train_options(c_train, trainc.train, true);

    SweepCmd sweep;
    auto* c_sweep = app.add_subcommand("sweep", "Grid search over optimizer hyperparameters");
    c_sweep->add_option("--manifest", sweep.manifest)->required();
    c_sweep->add_option("--grid", sweep.grid, "GridSpec JSON (default: full grid)");
    c_sweep->add_option("--workers", sweep.workers)->check(CLI::PositiveNumber)->capture_default_str();
    c_sweep->add_option("--state-dir", sweep.state_dir, "Completed cells are stored and reused here");
    c_sweep->add_option("--out", sweep.out, "Report CSV (a .txt table is written next to it)")->capture_default_str();
    add_model_options(c_sweep, sweep.model);

    AlCmd al;
    auto* c_al = app.add_subcommand("al", "Run an active-learning session");
    c_al->add_option("--manifest", al.manifest)->required();
    c_al->add_option("--mode", al.mode)->check(CLI::IsMember({"oracle", "serve"}))->capture_default_str();
    c_al->add_option("--strategy", al.strategy)->check(CLI::IsMember({"uncertainty", "random"}))->capture_default_str();
    c_al->add_option("--query-size", al.query_size)->check(CLI::PositiveNumber)->capture_default_str();
    c_al->add_option("--max-queries", al.max_queries)->check(CLI::PositiveNumber)->capture_default_str();
    c_al->add_option("--fine-tune-epochs", al.fine_tune_epochs)->check(CLI::PositiveNumber)->capture_default_str();
    c_al->add_option("--seed-size", al.seed_size, "Initially labeled samples")->capture_default_str();
    c_al->add_option("--session-dir", al.session_dir)->required();
    c_al->add_option("--stop-window", al.stop_window, "Plateau window (enables the stop rule)")
        ->check(CLI::PositiveNumber);
    c_al->add_option("--stop-eps", al.stop_eps, "Plateau tolerance")->capture_default_str();
    c_al->add_option("--retention", al.retention)
        ->check(CLI::IsMember({"all", "last", "none_but_final"}))
        ->capture_default_str();
    c_al->add_option("--threshold", al.threshold)->capture_default_str();
    c_al->add_flag("--compare", al.compare, "Paired uncertainty and random runs with a labels-to-target summary");
    c_al->add_option("--target", al.target, "Accuracy target for --compare")->capture_default_str();
    c_al->add_option("--host", al.host)->capture_default_str();
    c_al->add_option("--port", al.port)->capture_default_str();
    c_al->add_option("--token", al.token, "Shared token required by the service");
    add_model_options(c_al, al.model);
    add_train_options(c_al, al.train, false);

    ServeCmd serve;
    auto* c_serve = app.add_subcommand("serve", "Serve all sessions in a store over HTTP");
    c_serve->add_option("--store", serve.store)->required();
    c_serve->add_option("--host", serve.host)->capture_default_str();
    c_serve->add_option("--port", serve.port)->capture_default_str();
    c_serve->add_option("--token", serve.token);
    c_serve->add_flag("--verbose", serve.verbose, "Log requests");
    add_model_options(c_serve, serve.model);

    EvalCmd evalc;
    auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    c_eval->add_option("--checkpoint", evalc.checkpoint)->required();
    c_eval->add_option("--manifest", evalc.manifest)->required();
    c_eval->add_option("--split", evalc.split)->check(CLI::IsMember({"train", "validation", "test"}))->capture_default_str();
    c_eval->add_option("--threshold", evalc.threshold)->capture_default_str();
    c_eval->add_option("--out", evalc.out, "Report JSON");
    c_eval->add_option("--workers", evalc.workers)->check(CLI::PositiveNumber);

    AutolabelCmd autol;
    auto* c_auto = app.add_subcommand("autolabel", "Label a split with a trained model");
    c_auto->add_option("--checkpoint", autol.checkpoint)->required();
    c_auto->add_option("--manifest", autol.manifest)->required();
    c_auto->add_option("--out", autol.out, "Labeled manifest CSV")->required();
    c_auto->add_option("--report", autol.report, "Report JSON (default <out>.report.json)");
    c_auto->add_option("--split", autol.split)->check(CLI::IsMember({"train", "validation", "test"}))->capture_default_str();
    c_auto->add_option("--min-confidence", autol.min_confidence, "Label only when max(p, 1-p) reaches this");
    c_auto->add_option("--threshold", autol.threshold)->capture_default_str();
    c_auto->add_option("--workers", autol.workers)->check(CLI::PositiveNumber);
    c_auto->add_flag("--only-unlabeled", autol.only_unlabeled, "Skip samples holding human or oracle labels");

    HistoryStatsCmd hstats;
    auto* c_hist = app.add_subcommand("history-stats", "Mean, std and peak validation accuracy over a range");
    c_hist->add_option("--session-dir", hstats.session_dir)->required();
    c_hist->add_option("--from", hstats.from)->capture_default_str();
    c_hist->add_option("--to", hstats.to);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);

    try {
        if (*c_scan) return scan.run();
        if (*c_synth) return synth.run();
        if (*c_binit) return binit.run();
        if (*c_train) return trainc.run();
        if (*c_sweep) return sweep.run();
        if (*c_al) return al.run();
        if (*c_serve) return serve.run();
        if (*c_eval) return evalc.run();
        if (*c_auto) return autol.run();
        if (*c_hist) return hstats.run();
    } catch (const Error& e) {
        std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}
