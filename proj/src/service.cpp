#include "amal/service.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <condition_variable>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"

namespace amal {

using nlohmann::json;

SessionSummary summarize_session(const ALSessionState& s) {
    SessionSummary out;
    out.session_id = s.session_id;
    out.status = s.status;
    out.iteration = s.iteration;
    out.labeled_count = s.pool.labeled_ids.size();
    out.pool_remaining = s.pool.unlabeled_ids.size();
    if (!s.history.empty()) out.latest_val_accuracy = s.history.back().val_accuracy;
    return out;
}

json to_json(const SessionSummary& s) {
    return {{"session_id", s.session_id},
            {"status", to_string(s.status)},
            {"iteration", s.iteration},
            {"labeled_count", s.labeled_count},
            {"pool_remaining", s.pool_remaining},
            {"latest_val_accuracy", s.latest_val_accuracy ? json(*s.latest_val_accuracy) : json(nullptr)}};
}

namespace {

struct Live {
    std::mutex mu;  // serializes every transition of this session
    std::condition_variable cv;
    ALSessionState state;
    std::optional<Model> model;
    DatasetManifest manifest;
    std::filesystem::path image_root;
    std::vector<Sample> val;
    std::filesystem::path dir;
    bool busy = false;
    std::atomic<bool> stop_signal{false};
    std::thread worker;
};

std::string url_encode_path(const std::string& s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~' || c == '/') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 15]);
        }
    }
    return out;
}

std::string content_type_for(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".bmp") return "image/bmp";
    if (ext == ".tif" || ext == ".tiff") return "image/tiff";
    if (ext == ".gif") return "image/gif";
    return "application/octet-stream";
}

int http_status_for(const Error& e) {
    if (dynamic_cast<const NotFoundError*>(&e)) return 404;
    if (dynamic_cast<const ConflictError*>(&e)) return 409;
    switch (e.category()) {
        case ErrorCategory::validation: return 422;
        case ErrorCategory::state: return 409;
        case ErrorCategory::numeric:
        case ErrorCategory::io: return 500;
    }
    return 500;
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                json details = json::object()) {
    send_json(res, status, {{"error_code", code}, {"message", message}, {"details", std::move(details)}});
}

bool within(const std::filesystem::path& root, const std::filesystem::path& p) {
    const auto r = std::filesystem::weakly_canonical(root);
    const auto c = std::filesystem::weakly_canonical(p);
    auto rit = r.begin();
    auto cit = c.begin();
    for (; rit != r.end(); ++rit, ++cit) {
        if (rit->empty()) continue;  // trailing separator
        if (cit == c.end() || *rit != *cit) return false;
    }
    return true;
}

}  // namespace

struct SessionService::Impl {
    ServiceConfig cfg;
    httplib::Server server;
    std::thread listener;
    int bound_port = -1;

    std::mutex sessions_mu;
    std::map<std::string, std::shared_ptr<Live>> sessions;

    std::mutex backbone_mu;
    std::map<std::string, std::shared_ptr<const Backbone>> backbones;

    std::mutex run_mu;
    std::condition_variable run_cv;
    bool running = false;
    bool stopped = false;
    std::uint64_t created = 0;

    explicit Impl(ServiceConfig c) : cfg(std::move(c)) {}

    void log(const std::string& msg) const {
        if (cfg.log_requests) std::cerr << msg << "\n";
    }

    std::shared_ptr<const Backbone> backbone_for(const ModelConfig& mc) {
        if (cfg.backbone) return cfg.backbone;
        std::lock_guard lock(backbone_mu);
        auto& slot = backbones[mc.backbone_weights.string()];
        if (!slot) slot = std::make_shared<const Backbone>(Backbone::load(mc.backbone_weights));
        return slot;
    }

    std::shared_ptr<Live> find(const std::string& id) {
        std::lock_guard lock(sessions_mu);
        auto it = sessions.find(id);
        if (it == sessions.end()) throw NotFoundError("no session '" + id + "'");
        return it->second;
    }

    std::shared_ptr<Live> attach(ALSessionState state, const std::filesystem::path& dir) {
        auto live = std::make_shared<Live>();
        live->manifest = load_manifest(state.manifest_path);
        live->image_root = live->manifest.source_root.empty()
                               ? std::filesystem::path(state.manifest_path).parent_path()
                               : live->manifest.source_root;
        live->val = live->manifest.samples_in(Split::validation);
        live->dir = dir;
        if (!is_terminal(state.status)) {
            live->model = load_session_model(state, dir, state.model_checkpoint_ref.empty()
                                                             ? backbone_for(state.model_config)
                                                             : nullptr);
        }
        live->state = std::move(state);
        return live;
    }

    // Called with live->mu held and status == training.
    void schedule_step(const std::shared_ptr<Live>& live) {
        if (live->worker.joinable()) live->worker.join();
        live->busy = true;
        live->stop_signal = live->state.stop_requested;
        live->worker = std::thread([this, live] { run_step(live); });
    }

    void run_step(const std::shared_ptr<Live>& live) {
        ALSessionState st;
        Model model;
        {
            std::lock_guard lock(live->mu);
            st = live->state;
            model = *live->model;
        }
        ALSessionState next;
        Model trained;
        try {
            std::tie(next, trained) = step(st, model, live->manifest, live->val, &live->stop_signal);
        } catch (const std::exception& e) {
            next = std::move(st);
            trained = std::move(model);
            next.status = SessionStatus::aborted;
            next.abort_cause = e.what();
        }

        std::lock_guard lock(live->mu);
        if (live->stop_signal && next.status == SessionStatus::awaiting_labels) next = request_stop(next);
        live->state = std::move(next);
        live->model = std::move(trained);
        try {
            persist_session(live->state, *live->model, live->dir);
        } catch (const std::exception& e) {
            std::cerr << "session " << live->state.session_id << ": persist failed: " << e.what() << "\n";
        }
        log("session " + live->state.session_id + " -> " + std::string(to_string(live->state.status)));
        live->busy = false;
        live->cv.notify_all();
    }

    void load_store() {
        std::error_code ec;
        std::filesystem::create_directories(cfg.store, ec);
        if (ec) throw IoError("cannot create session store " + cfg.store.string());
        std::vector<std::filesystem::path> dirs;
        for (const auto& e : std::filesystem::directory_iterator(cfg.store)) {
            if (e.is_directory() && std::filesystem::exists(e.path() / "session.json")) dirs.push_back(e.path());
        }
        std::sort(dirs.begin(), dirs.end());
        for (const auto& dir : dirs) {
            try {
                auto live = attach(resume_session(dir), dir);
                std::lock_guard lock(live->mu);
                if (live->state.status == SessionStatus::training) schedule_step(live);
                std::lock_guard slock(sessions_mu);
                sessions[live->state.session_id] = live;
            } catch (const std::exception& e) {
                std::cerr << "skipping session at " << dir << ": " << e.what() << "\n";
            }
        }
    }

    SessionSummary create(std::string id, const std::string& manifest_path, const ALConfig& config,
                          const std::optional<ModelConfig>& model_config) {
        config.validate();
        const ModelConfig mc = model_config.value_or(cfg.default_model);
        mc.validate();
        if (id.empty()) {
            std::lock_guard lock(sessions_mu);
            do {
                id = "s" + sha256_hex(manifest_path + "|" + std::to_string(created++) + "|" + WallClock().now_iso())
                               .substr(0, 10);
            } while (sessions.count(id));
        }
        if (id.find_first_of("/\\") != std::string::npos || id == "." || id == "..") {
            throw RangeError("session id must not contain path separators");
        }
        {
            std::lock_guard lock(sessions_mu);
            if (sessions.count(id)) throw ConflictError("session '" + id + "' already exists");
        }
        const auto dir = cfg.store / id;
        if (std::filesystem::exists(dir / "session.json")) throw ConflictError("session '" + id + "' already exists");
        const auto manifest = load_manifest(manifest_path);
        ALSessionState state = create_session(id, config, mc, manifest, manifest_path);
        save_session(state, dir);
        auto live = attach(std::move(state), dir);
        std::lock_guard lock(live->mu);
        {
            std::lock_guard slock(sessions_mu);
            if (sessions.count(id)) throw ConflictError("session '" + id + "' already exists");
            sessions[id] = live;
        }
        schedule_step(live);
        return summarize_session(live->state);
    }

    json pending(const std::string& id) {
        auto live = find(id);
        std::lock_guard lock(live->mu);
        const auto& s = live->state;
        json items = json::array();
        if (s.status == SessionStatus::awaiting_labels && s.pending_batch) {
            const auto& b = *s.pending_batch;
            for (std::size_t i = 0; i < b.sample_ids.size(); ++i) {
                items.push_back({{"sample_id", b.sample_ids[i]},
                                 {"image_url", "/images/" + url_encode_path(b.sample_ids[i])},
                                 {"score", std::isnan(b.scores[i]) ? json(nullptr) : json(b.scores[i])}});
            }
        }
        return {{"session_id", s.session_id},
                {"status", to_string(s.status)},
                {"iteration", s.iteration},
                {"truncated", s.pending_batch ? s.pending_batch->truncated : false},
                {"items", items}};
    }

    std::string post_labels(const std::string& id, const json& body, std::string key) {
        if (!body.is_object() || !body.contains("labels") || !body["labels"].is_object()) {
            throw RangeError("body must be an object with a 'labels' map");
        }
        if (key.empty() && body.contains("idempotency_key") && body["idempotency_key"].is_string()) {
            key = body["idempotency_key"].get<std::string>();
        }
        std::map<std::string, Label> labels;
        for (const auto& [sid, v] : body["labels"].items()) {
            if (!v.is_number_integer()) throw RangeError("label for '" + sid + "' must be 0 or 1");
            labels[sid] = v.get<int>();
        }
        auto live = find(id);
        std::lock_guard lock(live->mu);
        if (!key.empty()) {
            if (auto it = live->state.idempotency.find(key); it != live->state.idempotency.end()) return it->second;
        }
        ALSessionState next = submit_labels(live->state, labels, AnnotatorKind::human);
        const std::string response = json{{"session_id", next.session_id},
                                          {"status", to_string(next.status)},
                                          {"iteration", next.iteration},
                                          {"labeled_count", next.pool.labeled_ids.size()}}
                                         .dump();
        if (!key.empty()) next.idempotency[key] = response;
        save_session(next, live->dir);
        live->state = std::move(next);
        schedule_step(live);
        return response;
    }

    json history(const std::string& id) {
        auto live = find(id);
        std::lock_guard lock(live->mu);
        json rows = json::array();
        for (const auto& h : live->state.history) {
            rows.push_back({{"iteration", h.iteration},
                            {"val_accuracy", h.val_accuracy},
                            {"labeled_count", h.labeled_count},
                            {"timestamp", h.timestamp}});
        }
        return rows;
    }

    SessionSummary stop_session(const std::string& id) {
        auto live = find(id);
        std::lock_guard lock(live->mu);
        ALSessionState next = request_stop(live->state);
        if (next.stop_requested) live->stop_signal = true;
        save_session(next, live->dir);
        live->state = std::move(next);
        return summarize_session(live->state);
    }

    std::pair<std::string, std::string> image(const std::string& sample_id) {
        std::vector<std::shared_ptr<Live>> all;
        {
            std::lock_guard lock(sessions_mu);
            for (const auto& [_, l] : sessions) all.push_back(l);
        }
        for (const auto& live : all) {
            const Sample* s = live->manifest.find(sample_id);
            if (!s) continue;
            if (!within(live->image_root, s->image_ref)) {
                throw NotFoundError("image for '" + sample_id + "' lies outside the dataset root");
            }
            return {read_file(s->image_ref), content_type_for(s->image_ref)};
        }
        throw NotFoundError("no sample '" + sample_id + "'");
    }

    void routes() {
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
        server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, X-Auth-Token, Idempotency-Key");
            res.status = 204;
        });
        server.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            if (!cfg.token || req.method == "OPTIONS") return httplib::Server::HandlerResponse::Unhandled;
            const std::string given =
                req.has_header("X-Auth-Token") ? req.get_header_value("X-Auth-Token") : req.get_param_value("token");
            if (given == *cfg.token) return httplib::Server::HandlerResponse::Unhandled;
            send_error(res, 401, "Unauthorized", "missing or wrong X-Auth-Token");
            return httplib::Server::HandlerResponse::Handled;
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const BatchMismatchError& e) {
                send_error(res, 422, e.code(), e.what(), {{"missing", e.missing()}, {"extra", e.extra()}});
            } catch (const Error& e) {
                send_error(res, http_status_for(e), e.code(), e.what());
            } catch (const json::exception& e) {
                send_error(res, 400, "BadRequest", e.what());
            } catch (const std::invalid_argument& e) {
                send_error(res, 422, "RangeError", e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "InternalError", e.what());
            }
        });
        if (cfg.log_requests) {
            server.set_logger([this](const httplib::Request& req, const httplib::Response& res) {
                log(req.method + " " + req.path + " " + std::to_string(res.status));
            });
        }

        server.Get("/api/v1/sessions", [this](const httplib::Request&, httplib::Response& res) {
            std::vector<std::shared_ptr<Live>> all;
            {
                std::lock_guard lock(sessions_mu);
                for (const auto& [_, l] : sessions) all.push_back(l);
            }
            json out = json::array();
            for (const auto& l : all) {
                std::lock_guard lock(l->mu);
                out.push_back(to_json(summarize_session(l->state)));
            }
            send_json(res, 200, out);
        });
        server.Post("/api/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            const json body = json::parse(req.body);
            if (!body.contains("manifest_path")) throw RangeError("'manifest_path' is required");
            const ALConfig config = al_config_from_json(body.value("config", json::object()));
            std::optional<ModelConfig> mc;
            if (body.contains("model_config")) mc = model_config_from_json(body["model_config"]);
            const auto summary =
                create(body.value("session_id", std::string()), body["manifest_path"].get<std::string>(), config, mc);
            send_json(res, 201, to_json(summary));
        });
        server.Get(R"(/api/v1/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            auto live = find(req.matches[1]);
            std::lock_guard lock(live->mu);
            send_json(res, 200, to_json(summarize_session(live->state)));
        });
        server.Get(R"(/api/v1/sessions/([^/]+)/pending)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, pending(req.matches[1]));
        });
        server.Post(R"(/api/v1/sessions/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) {
            const json body = json::parse(req.body);
            res.status = 200;
            res.set_content(post_labels(req.matches[1], body, req.get_header_value("Idempotency-Key")),
                            "application/json");
        });
        server.Get(R"(/api/v1/sessions/([^/]+)/history)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, history(req.matches[1]));
        });
        server.Post(R"(/api/v1/sessions/([^/]+)/stop)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, to_json(stop_session(req.matches[1])));
        });
        server.Get(R"(/images/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
            auto [bytes, type] = image(req.matches[1]);
            res.status = 200;
            res.set_content(std::move(bytes), type);
        });
    }
};

SessionService::SessionService(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

SessionService::~SessionService() {
    try {
        stop();
    } catch (...) {
    }
}

int SessionService::start() {
    {
        std::lock_guard lock(impl_->run_mu);
        if (impl_->running) throw ConflictError("service already started");
    }
    impl_->routes();
    impl_->load_store();
    auto& srv = impl_->server;
    srv.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    if (impl_->cfg.port == 0) {
        impl_->bound_port = srv.bind_to_any_port(impl_->cfg.host);
    } else {
        impl_->bound_port = srv.bind_to_port(impl_->cfg.host, impl_->cfg.port) ? impl_->cfg.port : -1;
    }
    if (impl_->bound_port < 0) {
        throw BindError("cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
    }
    {
        std::lock_guard lock(impl_->run_mu);
        impl_->running = true;
    }
    impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
    srv.wait_until_ready();
    return impl_->bound_port;
}

void SessionService::stop() {
    {
        std::lock_guard lock(impl_->run_mu);
        if (impl_->stopped) return;
        impl_->stopped = true;
    }
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
    std::vector<std::shared_ptr<Live>> all;
    {
        std::lock_guard lock(impl_->sessions_mu);
        for (const auto& [_, l] : impl_->sessions) all.push_back(l);
    }
    for (const auto& live : all) {
        std::unique_lock lock(live->mu);
        live->cv.wait(lock, [&] { return !live->busy; });
        if (live->worker.joinable()) live->worker.join();
        try {
            save_session(live->state, live->dir);
        } catch (const std::exception& e) {
            std::cerr << "session " << live->state.session_id << ": save failed: " << e.what() << "\n";
        }
    }
    std::lock_guard lock(impl_->run_mu);
    impl_->running = false;
    impl_->run_cv.notify_all();
}

void SessionService::wait() {
    std::unique_lock lock(impl_->run_mu);
    impl_->run_cv.wait(lock, [&] { return impl_->stopped && !impl_->running; });
}

SessionSummary SessionService::create(const std::string& session_id, const std::string& manifest_path,
                                      const ALConfig& config, const std::optional<ModelConfig>& model_config) {
    return impl_->create(session_id, manifest_path, config, model_config);
}

void SessionService::wait_idle(const std::string& session_id) {
    auto live = impl_->find(session_id);
    std::unique_lock lock(live->mu);
    live->cv.wait(lock, [&] { return !live->busy; });
}

SessionSummary SessionService::wait_settled(const std::string& session_id) {
    auto live = impl_->find(session_id);
    std::unique_lock lock(live->mu);
    live->cv.wait(lock, [&] { return !live->busy && live->state.status != SessionStatus::training; });
    return summarize_session(live->state);
}

ALSessionState SessionService::snapshot(const std::string& session_id) {
    auto live = impl_->find(session_id);
    std::lock_guard lock(live->mu);
    return live->state;
}

int SessionService::port() const { return impl_->bound_port; }

}  // namespace amal
