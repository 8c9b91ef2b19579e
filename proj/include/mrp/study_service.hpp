#pragma once

// JSON-over-HTTP front of StudyStore.
//
//   POST /studies                          register a study            201
//   GET  /studies/{id}                     definition and counts
//   POST /studies/{id}/close               stop accepting sessions
//   POST /studies/{id}/sessions            new session                 201
//   GET  /studies/{id}/results[?allow_empty=1]
//   GET  /sessions/{id}                    status and step cursor
//   GET  /sessions/{id}/steps/{k}
//   POST /sessions/{id}/steps/{k}/answer   {"choice": "left"|"right"|"control"}
//   POST /sessions/{id}/complete
//
// Errors are {"code": ..., "message": ...}. Clips under clip_dir are served
// at clip_url_prefix.

#include <charconv>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

// Eigen first: the resolver headers pulled in by httplib define `_res`.
#include "mrp/study_store.hpp"

#include <httplib.h>

namespace mrp {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send_json(res, status, {{"code", code}, {"message", message}});
}

inline nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded()) throw ServiceError(400, "bad_request", "request body is not valid JSON");
    return j;
}

inline std::size_t parse_step(const std::string& s) {
    std::size_t k = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), k);
    if (ec != std::errc() || end != s.data() + s.size()) throw not_found("step '" + s + "' is not a step index");
    return k;
}

template <class F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ServiceError& e) {
            send_error(res, e.status, e.code, e.what());
        }
    };
}

}  // namespace detail

/// Installs the study routes on `server`. The store must outlive it.
inline void install_study_routes(httplib::Server& server, StudyStore& store) {
    using detail::guarded;
    using detail::send_json;
    using Req = httplib::Request;
    using Res = httplib::Response;

    server.Post("/studies", guarded([&store](const Req& req, Res& res) {
                    send_json(res, 201, store.create_study(detail::parse_body(req)));
                }));
    server.Get("/studies/:id", guarded([&store](const Req& req, Res& res) {
                   send_json(res, 200, store.study_info(req.path_params.at("id")));
               }));
    server.Post("/studies/:id/close", guarded([&store](const Req& req, Res& res) {
                    store.close_study(req.path_params.at("id"));
                    send_json(res, 200, {{"closed", true}});
                }));
    server.Post("/studies/:id/sessions", guarded([&store](const Req& req, Res& res) {
                    const auto body = detail::parse_body(req);
                    std::string user;
                    if (body.is_object() && body.contains("user_id")) {
                        if (!body.at("user_id").is_string()) throw invalid("user_id must be a string");
                        user = body.at("user_id").get<std::string>();
                    }
                    send_json(res, 201, store.create_session(req.path_params.at("id"), user));
                }));
    server.Get("/studies/:id/results", guarded([&store](const Req& req, Res& res) {
                   const auto flag = req.get_param_value("allow_empty");
                   const bool allow = flag == "1" || flag == "true";
                   send_json(res, 200, store.results(req.path_params.at("id"), allow));
               }));
    server.Get("/sessions/:id", guarded([&store](const Req& req, Res& res) {
                   send_json(res, 200, store.session_info(req.path_params.at("id")));
               }));
    server.Get("/sessions/:id/steps/:k", guarded([&store](const Req& req, Res& res) {
                   send_json(res, 200,
                             store.step(req.path_params.at("id"), detail::parse_step(req.path_params.at("k"))));
               }));
    server.Post("/sessions/:id/steps/:k/answer", guarded([&store](const Req& req, Res& res) {
                    const auto k = detail::parse_step(req.path_params.at("k"));
                    store.answer(req.path_params.at("id"), k, detail::parse_body(req));
                    send_json(res, 200, {{"accepted", true}, {"step", k}});
                }));
    server.Post("/sessions/:id/complete", guarded([&store](const Req& req, Res& res) {
                    send_json(res, 200, store.complete(req.path_params.at("id")));
                }));

    const auto& cfg = store.config();
    if (!cfg.clip_dir.empty()) server.set_mount_point(cfg.clip_url_prefix, cfg.clip_dir.string());

    server.set_exception_handler([](const Req&, Res& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            detail::send_error(res, 500, "internal_error", e.what());
        } catch (...) {
            detail::send_error(res, 500, "internal_error", "unknown error");
        }
    });
    server.set_error_handler([](const Req&, Res& res) {
        if (!res.body.empty()) return;
        detail::send_error(res, res.status, res.status == 404 ? "not_found" : "http_error",
                           "HTTP " + std::to_string(res.status));
    });
}

/// Store plus server on a background thread, for the CLI and tests.
class StudyService {
public:
    explicit StudyService(ServiceConfig cfg) : store_(std::move(cfg)) { install_study_routes(server_, store_); }
    StudyService(const StudyService&) = delete;
    StudyService& operator=(const StudyService&) = delete;
    ~StudyService() { stop(); }

    /// Binds (port 0 picks a free port) and starts serving; returns the port.
    int start() {
        const auto& c = store_.config();
        port_ = c.port == 0 ? server_.bind_to_any_port(c.host) : (server_.bind_to_port(c.host, c.port) ? c.port : -1);
        if (port_ < 0) throw Error("cannot bind " + c.host + ":" + std::to_string(c.port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    void stop() {
        if (thread_.joinable()) {
            server_.stop();
            thread_.join();
        }
    }

    StudyStore& store() { return store_; }
    int port() const { return port_; }

private:
    StudyStore store_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

}  // namespace mrp
