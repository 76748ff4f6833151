#pragma once

// Action-serving HTTP endpoint. Request handling is split from the socket
// layer so that handlers can be exercised directly.
//
//   POST /act     {"instruction": str,
//                  "history": [{"image": [[int]], "prev_actions": [[float]]}, ...]}
//              -> {"actions": [[float] x horizon], "tokens": [int], "warning"?: str}
//   GET  /health  {"status": "ok", "model_hash", "codec_hash", "config_hash", ...}
//
// `prev_actions` lists the actions executed since the previous history entry;
// the last one is the action that led to this frame.

#include <cstdlib>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "keyplan/policy.hpp"

#include "httplib.h"
#include "json.hpp"

namespace keyplan {

/// A malformed request; `path` names the offending field, e.g. `history[1].image`.
class RequestError : public InvalidInput {
 public:
  RequestError(std::string path, const std::string& msg)
      : InvalidInput(path + ": " + msg), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct ServeLimits {
  int max_image_side = 256;
  int max_history = 16;
};

struct ActRequest {
  std::string instruction;
  std::vector<sim::HistoryStep> history;
};

inline Image parse_request_image(const nlohmann::json& j, const std::string& path, const ServeLimits& lim) {
  if (!j.is_array() || j.empty()) throw RequestError(path, "expected a non-empty array of pixel rows");
  if (static_cast<long>(j.size()) > lim.max_image_side)
    throw RequestError(path, "image height " + std::to_string(j.size()) + " exceeds the limit of " +
                                 std::to_string(lim.max_image_side));
  Image img;
  img.height = static_cast<int>(j.size());
  for (std::size_t r = 0; r < j.size(); ++r) {
    const auto& row = j[r];
    const std::string rp = path + "[" + std::to_string(r) + "]";
    if (!row.is_array()) throw RequestError(rp, "expected an array of pixels");
    if (static_cast<long>(row.size()) > lim.max_image_side)
      throw RequestError(rp, "image width " + std::to_string(row.size()) + " exceeds the limit of " +
                                 std::to_string(lim.max_image_side));
    if (r == 0) img.width = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != img.width) throw RequestError(rp, "row length differs from row 0");
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!row[c].is_number_integer() || row[c].get<long>() < 0 || row[c].get<long>() > 255)
        throw RequestError(rp + "[" + std::to_string(c) + "]", "pixel must be an integer in [0,255]");
      img.pixels.push_back(static_cast<std::uint8_t>(row[c].get<int>()));
    }
  }
  if (img.width == 0) throw RequestError(path, "image has no columns");
  return img;
}

inline std::vector<double> parse_action_vector(const nlohmann::json& j, const std::string& path, int dims) {
  if (!j.is_array()) throw RequestError(path, "expected an array of numbers");
  if (static_cast<int>(j.size()) != dims)
    throw RequestError(path, "expected " + std::to_string(dims) + " values, got " + std::to_string(j.size()));
  std::vector<double> v;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number() || !std::isfinite(j[i].get<double>()))
      throw RequestError(path + "[" + std::to_string(i) + "]", "expected a finite number");
    v.push_back(j[i].get<double>());
  }
  return v;
}

inline ActRequest parse_act_request(const std::string& body, int action_dims, const ServeLimits& lim) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const std::exception& e) {
    throw RequestError("$", std::string("body is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw RequestError("$", "body must be a JSON object");
  ActRequest req;
  if (!j.contains("instruction") || !j["instruction"].is_string())
    throw RequestError("instruction", "required string field");
  req.instruction = j["instruction"].get<std::string>();
  if (!j.contains("history") || !j["history"].is_array() || j["history"].empty())
    throw RequestError("history", "required non-empty array");
  const auto& hist = j["history"];
  if (static_cast<int>(hist.size()) > lim.max_history)
    throw RequestError("history", "at most " + std::to_string(lim.max_history) + " entries are accepted");
  for (std::size_t i = 0; i < hist.size(); ++i) {
    const std::string hp = "history[" + std::to_string(i) + "]";
    const auto& e = hist[i];
    if (!e.is_object()) throw RequestError(hp, "expected an object");
    if (!e.contains("image")) throw RequestError(hp + ".image", "required field");
    sim::HistoryStep step;
    step.image = parse_request_image(e["image"], hp + ".image", lim);
    if (i > 0 && (step.image.height != req.history[0].image.height || step.image.width != req.history[0].image.width))
      throw RequestError(hp + ".image", "image size differs from history[0]");
    if (e.contains("prev_actions") && !e["prev_actions"].is_null()) {
      const auto& pa = e["prev_actions"];
      if (!pa.is_array()) throw RequestError(hp + ".prev_actions", "expected an array of action vectors");
      for (std::size_t k = 0; k < pa.size(); ++k) {
        auto v = parse_action_vector(pa[k], hp + ".prev_actions[" + std::to_string(k) + "]", action_dims);
        step.prev_action = unflatten_action(v);
      }
    }
    req.history.push_back(std::move(step));
  }
  return req;
}

inline nlohmann::json actions_json(const std::vector<Action>& actions) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : actions) out.push_back(flatten_action(a));
  return out;
}

struct HttpReply {
  int status = 200;
  std::string body;
};

inline HttpReply error_reply(int status, const std::string& path, const std::string& message) {
  return {status, nlohmann::json{{"error", message}, {"path", path}}.dump()};
}

/// One model instance; requests are handled one at a time.
class PolicyService {
 public:
  PolicyService(Model<float> model, TokenSpace ts, int history, std::string config_hash = {}, ServeLimits lim = {})
      : model_(std::move(model)), ts_(std::move(ts)), history_(history), config_hash_(std::move(config_hash)),
        lim_(lim), model_hash_(hex64(model_.hash())), codec_hash_(ts_.hash()) {
    if (history_ < 1) throw InvalidInput("serve history must be >= 1");
  }

  const std::string& model_hash() const { return model_hash_; }

  HttpReply health() const {
    return {200, nlohmann::json{{"status", "ok"},
                                {"model_hash", model_hash_},
                                {"codec_hash", codec_hash_},
                                {"config_hash", config_hash_},
                                {"history", history_},
                                {"horizon", ts_.action().horizon()}}
                     .dump()};
  }

  HttpReply act(const std::string& body) {
    std::lock_guard lock(mu_);
    ActRequest req;
    try {
      req = parse_act_request(body, ts_.action().dims(), lim_);
    } catch (const RequestError& e) {
      return error_reply(400, e.path(), e.what());
    }
    PolicyOutput out;
    try {
      out = policy_step<float>(model_, ts_, req.instruction, req.history, history_);
    } catch (const InvalidInput& e) {
      return error_reply(400, "history", e.what());
    }
    nlohmann::json j{{"actions", actions_json(out.actions)}, {"tokens", out.tokens}};
    if (out.warning) j["warning"] = *out.warning;
    return {200, j.dump()};
  }

 private:
  Model<float> model_;
  TokenSpace ts_;
  int history_;
  std::string config_hash_;
  ServeLimits lim_;
  std::string model_hash_;
  std::string codec_hash_;
  std::mutex mu_;
};

/// Binds the endpoints; `queue` bounds pending requests behind the single worker.
inline void install_routes(httplib::Server& svr, PolicyService& svc, std::size_t queue) {
  svr.new_task_queue = [queue] { return new httplib::ThreadPool(1, queue); };
  svr.Get("/health", [&svc](const httplib::Request&, httplib::Response& res) {
    auto r = svc.health();
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  svr.Post("/act", [&svc](const httplib::Request& req, httplib::Response& res) {
    auto r = svc.act(req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
}

/// KEYPLAN_SERVE_PORT overrides the configured port.
inline int resolve_port(int configured) {
  if (const char* p = std::getenv("KEYPLAN_SERVE_PORT"); p && *p) {
    char* end = nullptr;
    const long v = std::strtol(p, &end, 10);
    if (*end != '\0' || v < 0 || v > 65535) throw InvalidInput("KEYPLAN_SERVE_PORT is not a valid port");
    return static_cast<int>(v);
  }
  return configured;
}

}  // namespace keyplan
