#include "kgcot/study_server.hpp"

#include "kgcot/common.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace kgcot {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void reply(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
    reply(res, status, ordered_json{{"error", message}});
}

} // namespace

struct StudyServer::Impl {
    StudyState& state;
    StudyServerOptions options;
    httplib::Server server;
    int port = 0;

    Impl(StudyState& s, StudyServerOptions o) : state(s), options(std::move(o)) { routes(); }

    void routes() {
        // SO_REUSEADDR only, so a port that is already in use fails to bind.
        server.set_socket_options([](socket_t sock) {
            int yes = 1;
            ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
        });

        server.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}});
        });

        server.Get("/api/study/next", [this](const httplib::Request& req, httplib::Response& res) {
            const auto annotator = trim(req.get_param_value("annotator"));
            if (annotator.empty()) return reply_error(res, 400, "annotator query parameter is required");
            if (auto payload = state.next_case(annotator)) return reply(res, 200, *payload);
            reply(res, 200, state.done_payload(annotator));
        });

        server.Post("/api/study/preference", [this](const httplib::Request& req, httplib::Response& res) {
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::exception& e) {
                return reply_error(res, 400, std::string("malformed JSON: ") + e.what());
            }
            const auto items = body.is_array() ? body : json::array({body});
            if (items.empty()) return reply_error(res, 400, "no preference records");
            std::vector<PreferenceRecord> records;
            try {
                for (const auto& item : items) {
                    auto r = preference_from_json(item, state.study());
                    if (r.timestamp.empty()) r.timestamp = utc_timestamp();
                    records.push_back(std::move(r));
                }
                state.record(records);
            } catch (const InputError& e) {
                return reply_error(res, 400, e.what());
            }
            reply(res, 200, {{"ok", true}, {"recorded", records.size()}});
        });

        server.Get("/api/study/report", [this](const httplib::Request& req, httplib::Response& res) {
            if (options.admin_token.empty()) return reply_error(res, 403, "report access is disabled");
            const auto header = req.get_header_value("Authorization");
            if (header != "Bearer " + options.admin_token) return reply_error(res, 403, "admin token required");
            reply(res, 200, report_to_json(state.report(), state.study()));
        });

        server.Get("/api/study/export", [this](const httplib::Request&, httplib::Response& res) {
            res.status = 200;
            res.set_content(state.export_log(), "application/x-ndjson");
        });

        if (!options.static_dir.empty()) {
            if (!server.set_mount_point("/", options.static_dir.string()))
                throw InputError("static directory not found: " + options.static_dir.string());
        }

        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                spdlog::error("study request failed: {}", e.what());
            } catch (...) {
            }
            reply_error(res, 500, "internal error");
        });
    }
};

StudyServer::StudyServer(StudyState& state, StudyServerOptions options)
    : impl_(std::make_unique<Impl>(state, std::move(options))) {}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind() {
    auto& o = impl_->options;
    if (o.port == 0) {
        impl_->port = impl_->server.bind_to_any_port(o.host);
        if (impl_->port < 0) throw InputError("cannot bind " + o.host);
    } else {
        if (!impl_->server.bind_to_port(o.host, o.port))
            throw InputError("cannot bind " + o.host + ":" + std::to_string(o.port) + " (port in use?)");
        impl_->port = o.port;
    }
    return impl_->port;
}

void StudyServer::serve() {
    spdlog::info("study service listening on {}:{}", impl_->options.host, impl_->port);
    impl_->server.listen_after_bind();
}

void StudyServer::stop() {
    if (impl_) impl_->server.stop();
}

} // namespace kgcot
