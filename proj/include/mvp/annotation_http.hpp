#pragma once
// HTTP front end for the annotation store. JSON bodies; failures are
// {code, message} objects with a matching status.

#include <httplib.h>

#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "mvp/annotation.hpp"
#include "mvp/image.hpp"

namespace mvp {

inline int status_for(const std::string& code) {
  static const std::map<std::string, int> table{{"bad_request", 400},        {"validation_error", 422},
                                                {"unknown_annotator", 404},  {"unknown_list", 404},
                                                {"not_found", 404},          {"duplicate_submission", 409},
                                                {"conflict", 409},           {"cap_exceeded", 403},
                                                {"no_researcher_record", 409}, {"no_annotator_record", 409}};
  auto it = table.find(code);
  return it == table.end() ? 500 : it->second;
}

class AnnotationServer {
 public:
  /// `assets` may be null, in which case view requests return not_found.
  AnnotationServer(AnnotationStore& store, const std::map<std::string, MultiViewAsset>* assets = nullptr)
      : store_(store), assets_(assets) {
    routes();
  }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_to_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void wait_until_ready() { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

 private:
  static void send_error(httplib::Response& res, const std::string& code, const std::string& message) {
    res.status = status_for(code);
    res.set_content(nlohmann::json{{"code", code}, {"message", message}}.dump(), "application/json");
  }

  static void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const AnnotationError& e) {
      send_error(res, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, "bad_request", std::string("malformed JSON body: ") + e.what());
    } catch (const ValidationError& e) {
      send_error(res, "validation_error", e.what());
    } catch (const std::exception& e) {
      send_error(res, "internal", e.what());
    }
  }

  void routes() {
    // browser clients may be served from another origin
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Post("/annotators", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const auto id = body.at("annotator_id").get<std::string>();
        store_.register_annotator(id, parse_role(body.value("role", std::string("annotator"))));
        const auto a = store_.annotator(id);
        send_json(res, {{"annotator_id", a.id}, {"role", a.role}, {"completed_lists", a.completed_lists}}, 201);
      });
    });

    server_.Get("/tasks/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.has_param("annotator")) throw AnnotationError("bad_request", "missing query parameter 'annotator'");
        const auto id = req.get_param_value("annotator");
        const auto task = store_.next_task(id);
        if (task)
          send_json(res, {{"task", *task}});
        else
          send_json(res, {{"task", nullptr}, {"reason", store_.idle_reason(id)}});
      });
    });

    server_.Post("/rankings", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const auto record = body.get<RankingRecord>();
        send_json(res, store_.submit_ranking(record.annotator_id, record), 201);
      });
    });

    server_.Get("/rankings/export", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::optional<Role> role = Role::annotator;
        if (req.has_param("role")) {
          const auto r = req.get_param_value("role");
          role = r == "all" ? std::nullopt : std::optional<Role>(parse_role(r));
        }
        std::string out;
        for (const auto& rec : store_.export_rankings(role)) out += nlohmann::json(rec).dump() + "\n";
        res.set_content(out, "application/x-ndjson");
      });
    });

    server_.Get(R"(/conflicts/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, store_.flag_conflicts(req.matches[1])); });
    });

    server_.Get(R"(/assets/([^/]+)/views/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        const std::size_t k = std::stoul(req.matches[2]);
        const auto it = assets_ ? assets_->find(id) : decltype(assets_->find(id)){};
        if (!assets_ || it == assets_->end()) throw AnnotationError("not_found", "unknown asset '" + id + "'");
        if (k >= it->second.views.size())
          throw AnnotationError("not_found", "asset " + id + " has " + std::to_string(it->second.views.size()) +
                                                 " views; no view " + std::to_string(k));
        const auto png = encode_png(it->second.views[k].image);
        res.set_content(std::string(png.begin(), png.end()), "image/png");
      });
    });

    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status == 404 ? "not_found" : "bad_request", "no such route");
    });
  }

  AnnotationStore& store_;
  const std::map<std::string, MultiViewAsset>* assets_;
  httplib::Server server_;
};

}  // namespace mvp
