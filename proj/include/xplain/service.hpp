#pragma once

#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "xplain/error.hpp"
#include "xplain/pipeline.hpp"

namespace xplain {

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::UnknownKey: return 404;
    case ErrorCode::InvalidArgument:
    case ErrorCode::EmptyQuestion:
    case ErrorCode::GrammarError:
    case ErrorCode::UnknownFeature: return 400;
    default: return 500;
  }
}

// JSON API over a read-only pipeline context. Handlers run concurrently;
// the only shared mutable state is the run store.
class Service {
 public:
  Service(const PipelineContext& ctx, RunStore& store) : ctx_(ctx), store_(store) {
    // SO_REUSEADDR only: the default also sets SO_REUSEPORT, which would let
    // a second server silently share a busy port.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
    });
    routes();
  }

  // Binds without serving; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
      bound = server_.bind_to_any_port(host);
      if (bound < 0) throw Error(ErrorCode::PortInUse, "cannot bind " + host);
    } else if (!server_.bind_to_port(host, port)) {
      throw Error(ErrorCode::PortInUse, "port " + std::to_string(port) + " is unavailable");
    }
    port_ = bound;
    return bound;
  }

  // Blocks until stop().
  void serve() { server_.listen_after_bind(); }

  void start_background() {
    worker_ = std::thread([this] { serve(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (worker_.joinable()) worker_.join();
  }

  int port() const { return port_; }

  ~Service() { stop(); }

 private:
  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(2) + "\n", "application/json");
  }

  static void send_error(httplib::Response& res, const Error& e) {
    send_json(res, http_status(e.code()), {{"error", to_string(e.code())}, {"message", e.what()}});
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", "InvalidArgument"}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "Internal"}, {"message", e.what()}});
    }
  }

  void routes() {
    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200,
                {{"status", "ok"}, {"pipeline_version", kPipelineVersion}, {"model", to_string(ctx_.model.kind)}});
    });

    server_.Post("/ask", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        if (!body.is_object() || !body.contains("question") || !body.at("question").is_string())
          throw Error(ErrorCode::InvalidArgument, "body must be {\"question\": string, \"seed\"?: integer}");
        std::optional<std::uint64_t> seed;
        if (body.contains("seed") && !body.at("seed").is_null()) seed = body.at("seed").get<std::uint64_t>();
        send_json(res, 200, json(ask(body.at("question").get<std::string>(), ctx_, store_, seed)));
      });
    });

    server_.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, index_to_json(store_.index())); });
    });

    server_.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, json(store_.load(req.matches[1].str(), ctx_.schema))); });
    });

    server_.Get("/registry", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, registry_to_json(ctx_.registry)); });
    });

    server_.Get(R"(/eval/([a-z]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, run_stage_eval(stage_from_string(req.matches[1].str()), ctx_)); });
    });
  }

  const PipelineContext& ctx_;
  RunStore& store_;
  httplib::Server server_;
  std::thread worker_;
  int port_ = -1;
};

}  // namespace xplain
