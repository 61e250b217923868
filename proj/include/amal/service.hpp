#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "amal/active_learning.hpp"

namespace amal {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    /// One subdirectory per session.
    std::filesystem::path store;
    /// When set, requests must send it as `X-Auth-Token` or `?token=`.
    std::optional<std::string> token;
    /// Used for sessions created without a model_config.
    ModelConfig default_model;
    /// Preloaded backbone; otherwise loaded from each model's weights path.
    std::shared_ptr<const Backbone> backbone;
    bool log_requests = false;
};

struct SessionSummary {
    std::string session_id;
    SessionStatus status = SessionStatus::training;
    int iteration = 0;
    std::size_t labeled_count = 0;
    std::size_t pool_remaining = 0;
    std::optional<double> latest_val_accuracy;
};

SessionSummary summarize_session(const ALSessionState& s);
nlohmann::json to_json(const SessionSummary& s);

/// JSON-over-HTTP front end for active-learning sessions. Label
/// submissions return at once; the next training step runs on a worker
/// thread and the client polls.
class SessionService {
public:
    explicit SessionService(ServiceConfig config);
    ~SessionService();
    SessionService(const SessionService&) = delete;
    SessionService& operator=(const SessionService&) = delete;

    /// Loads the store (resuming interrupted steps), binds and starts
    /// serving in the background. Returns the bound port. BindError.
    int start();
    /// Stops accepting requests, lets running steps finish and persists
    /// every session.
    void stop();
    /// Blocks until stop() is called from elsewhere.
    void wait();

    /// Creates and persists a session, then schedules its first step.
    SessionSummary create(const std::string& session_id, const std::string& manifest_path, const ALConfig& config,
                          const std::optional<ModelConfig>& model_config);
    /// Blocks until the session has no step in flight.
    void wait_idle(const std::string& session_id);
    /// Blocks until the session is awaiting labels or terminal.
    SessionSummary wait_settled(const std::string& session_id);
    ALSessionState snapshot(const std::string& session_id);

    int port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace amal
