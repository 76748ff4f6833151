#pragma once

// Offline curation of keystep CSVs: prompt template, remote vision-language
// client, deterministic near-duplicate stub, and schema-preserving rewrite.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "keyplan/common.hpp"
#include "keyplan/keystep.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan {

inline constexpr const char* kFilterPrompt = R"PROMPT(You are filtering candidate structured frames for a robot manipulation episode using images as the primary source of truth.

The input is an ordered list of candidate keysteps from the original CSV file, extracted from robot-centric kinematic cues. Each candidate is identified by its row index in the original CSV file, together with its image and the task instruction.

Your task is only to perform a conservative filtering of the candidates. Do not rewrite the instruction, do not add new events, and do not reconstruct the sequence.

Filtering goals:
1) Remove clearly unstable perturbation points caused by control noise, hardware jitter, or transient fluctuations.
2) Remove temporary false positives that clearly do not reflect a reasonable task progression.
3) Remove candidates that are visually too close to nearby neighbors and provide almost no additional information.

Important principles:
- Be conservative in filtering. Prefer keeping a candidate unless it is clearly abnormal or clearly redundant.
- When in doubt, keep the candidate rather than remove it.
- Preserve sufficient temporal coverage of the episode. The remaining candidates should still reflect the main progression of the manipulation process.
- Do not over-prune the sequence. In most normal cases, the filtered sequence should still contain multiple keyframes rather than collapsing to a single frame.
- Only remove a candidate when there is clear visual evidence that it is a noise point, a brief disturbance, or nearly duplicate with a nearby retained frame.
- If several nearby candidates correspond to essentially the same stable state, keep the earlier one.
- Preserve the original temporal order of the remaining candidates.
- Only delete candidates; do not add new ones.
- Use the images as the primary evidence.
- The task instruction is provided only as global context.
- Do not apply extra semantic rules beyond visible task coherence and local temporal consistency.

Return a JSON object with:
- filtered_ok: bool
- problems: [str, ...]
- kept_rows: [int, ...])PROMPT";

struct FilterCandidate {
  int row_index = 0;
  Image image;
};

struct FilterRequest {
  std::string instruction;
  std::vector<FilterCandidate> candidates;
  std::string prompt = kFilterPrompt;

  void validate() const {
    if (prompt != kFilterPrompt) throw InvalidInput("filter request prompt differs from the bundled template");
    for (std::size_t i = 1; i < candidates.size(); ++i)
      if (candidates[i].row_index <= candidates[i - 1].row_index)
        throw InvalidInput("filter request row indices are not strictly increasing");
  }
};

struct FilterResponse {
  bool filtered_ok = false;
  std::vector<std::string> problems;
  std::vector<int> kept_rows;
};

/// Transport failure or server-side error; worth retrying.
class FilterTransportError : public Error {
 public:
  using Error::Error;
};

/// The service answered but the payload breaks the response contract.
class FilterValidationError : public Error {
 public:
  FilterValidationError(const std::string& what, std::string payload)
      : Error(what), payload_(std::move(payload)) {}
  const std::string& payload() const { return payload_; }

 private:
  std::string payload_;
};

/// Binary PGM (P5); carries its own dimensions so the service needs no side channel.
inline std::string encode_pgm(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline nlohmann::json filter_request_json(const FilterRequest& req) {
  nlohmann::json j;
  j["prompt"] = req.prompt;
  j["instruction"] = req.instruction;
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : req.candidates)
    j["candidates"].push_back({{"row_index", c.row_index}, {"image_b64", base64_encode(encode_pgm(c.image))}});
  return j;
}

/// Parses and checks a service reply against the request it answers.
inline FilterResponse parse_filter_response(const std::string& payload, const FilterRequest& req) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(payload);
  } catch (const nlohmann::json::exception& e) {
    throw FilterValidationError(std::string("filter response is not JSON: ") + e.what(), payload);
  }
  FilterResponse resp;
  if (!j.is_object()) throw FilterValidationError("filter response is not a JSON object", payload);
  if (!j.contains("filtered_ok") || !j["filtered_ok"].is_boolean())
    throw FilterValidationError("filter response field 'filtered_ok' missing or not a bool", payload);
  if (!j.contains("problems") || !j["problems"].is_array())
    throw FilterValidationError("filter response field 'problems' missing or not an array", payload);
  if (!j.contains("kept_rows") || !j["kept_rows"].is_array())
    throw FilterValidationError("filter response field 'kept_rows' missing or not an array", payload);
  resp.filtered_ok = j["filtered_ok"].get<bool>();
  for (const auto& p : j["problems"]) {
    if (!p.is_string()) throw FilterValidationError("filter response 'problems' holds a non-string", payload);
    resp.problems.push_back(p.get<std::string>());
  }
  for (const auto& k : j["kept_rows"]) {
    if (!k.is_number_integer()) throw FilterValidationError("filter response 'kept_rows' holds a non-integer", payload);
    resp.kept_rows.push_back(k.get<int>());
  }
  std::set<int> allowed;
  for (const auto& c : req.candidates) allowed.insert(c.row_index);
  for (std::size_t i = 0; i < resp.kept_rows.size(); ++i) {
    if (!allowed.count(resp.kept_rows[i]))
      throw FilterValidationError("kept row " + std::to_string(resp.kept_rows[i]) + " is not a candidate", payload);
    if (i > 0 && resp.kept_rows[i] <= resp.kept_rows[i - 1])
      throw FilterValidationError("kept_rows are not strictly increasing", payload);
  }
  return resp;
}

struct RemoteFilterConfig {
  std::string endpoint;
  std::string api_key;
  double timeout_seconds = 60.0;
  int retries = 2;
  double backoff_seconds = 0.5;

  /// KEYPLAN_FILTER_ENDPOINT (required) and KEYPLAN_FILTER_API_KEY (optional).
  static RemoteFilterConfig from_env() {
    RemoteFilterConfig cfg;
    if (const char* e = std::getenv("KEYPLAN_FILTER_ENDPOINT")) cfg.endpoint = e;
    if (const char* k = std::getenv("KEYPLAN_FILTER_API_KEY")) cfg.api_key = k;
    if (cfg.endpoint.empty()) throw InvalidInput("KEYPLAN_FILTER_ENDPOINT is not set");
    return cfg;
  }
};

/// Splits "http://host:port/path" into the origin and the path.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw InvalidInput("endpoint is not an absolute URL: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

inline FilterResponse filter_remote(const FilterRequest& req, const RemoteFilterConfig& cfg) {
  req.validate();
  const std::string body = filter_request_json(req).dump();
  const auto [origin, path] = split_url(cfg.endpoint);
  std::string last_error;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::duration<double>(cfg.backoff_seconds * std::pow(2.0, attempt - 1)));
    httplib::Client cli(origin);
    const auto secs = static_cast<time_t>(cfg.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
    auto res = cli.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429) {
      last_error = "server returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw FilterValidationError("filter service returned HTTP " + std::to_string(res->status), res->body);
    return parse_filter_response(res->body, req);
  }
  throw FilterTransportError("filter service unreachable after " + std::to_string(cfg.retries + 1) +
                             " attempts: " + last_error);
}

/// Mean absolute pixel difference as a fraction of the 0..255 range.
inline double mean_abs_diff(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw InvalidInput("cannot compare images of different dimensions");
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(static_cast<int>(a.pixels[i]) - b.pixels[i]);
  return a.pixels.empty() ? 0.0 : s / (255.0 * static_cast<double>(a.pixels.size()));
}

/// Drops a candidate when it is within `near_dup_threshold` of the previously
/// kept one; the first candidate is always kept.
inline FilterResponse filter_stub(const FilterRequest& req, double near_dup_threshold) {
  req.validate();
  FilterResponse resp;
  resp.filtered_ok = true;
  const Image* last = nullptr;
  for (const auto& c : req.candidates) {
    if (last && mean_abs_diff(*last, c.image) < near_dup_threshold) {
      resp.problems.push_back("row " + std::to_string(c.row_index) + ": near-duplicate of previous kept frame");
      continue;
    }
    resp.kept_rows.push_back(c.row_index);
    last = &c.image;
  }
  return resp;
}

/// One request per episode, candidates in CSV order.
inline std::vector<FilterRequest> filter_requests(const std::vector<Episode>& episodes,
                                                  const std::vector<KeystepRow>& rows) {
  std::vector<FilterRequest> out;
  for (const auto& ep : episodes) {
    FilterRequest req;
    req.instruction = ep.instruction;
    for (const auto& r : rows) {
      if (r.episode_id != ep.id) continue;
      if (r.timestep < 0 || r.timestep > ep.T)
        throw InvalidInput("keystep row " + std::to_string(r.row_index) + " timestep out of range");
      req.candidates.push_back({r.row_index, ep.observations[static_cast<std::size_t>(r.timestep)].image});
    }
    if (!req.candidates.empty()) out.push_back(std::move(req));
  }
  return out;
}

/// Concatenates per-episode responses into one response for the whole file.
inline FilterResponse merge_responses(const std::vector<FilterResponse>& parts) {
  FilterResponse all;
  all.filtered_ok = true;
  for (const auto& p : parts) {
    all.filtered_ok = all.filtered_ok && p.filtered_ok;
    all.problems.insert(all.problems.end(), p.problems.begin(), p.problems.end());
    all.kept_rows.insert(all.kept_rows.end(), p.kept_rows.begin(), p.kept_rows.end());
  }
  std::sort(all.kept_rows.begin(), all.kept_rows.end());
  return all;
}

/// Copies the header and the rows whose row_index is kept, byte for byte.
inline void rewrite_csv(const std::string& original, const FilterResponse& resp, const std::string& out_path) {
  std::ifstream in(original, std::ios::binary);
  if (!in) throw InvalidInput("cannot open keystep CSV: " + original);
  std::string header;
  if (!std::getline(in, header)) throw InvalidInput("keystep CSV is empty: " + original);
  std::string bare = header;
  if (!bare.empty() && bare.back() == '\r') bare.pop_back();
  if (bare != kKeystepCsvHeader) throw InvalidInput("keystep CSV header mismatch in " + original);

  std::vector<std::pair<int, std::string>> rows;
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    rows.emplace_back(parse_keystep_row(line, lineno).row_index, line);
  }
  const std::set<int> kept(resp.kept_rows.begin(), resp.kept_rows.end());
  std::set<int> present;
  for (const auto& [idx, _] : rows) present.insert(idx);
  for (int k : kept)
    if (!present.count(k)) throw InvalidInput("kept row " + std::to_string(k) + " is not in " + original);

  std::ostringstream buf;
  buf << header << '\n';
  for (const auto& [idx, raw] : rows)
    if (kept.count(idx)) buf << raw << '\n';
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw Error("cannot write " + out_path);
  out << buf.str();
}

}  // namespace keyplan
