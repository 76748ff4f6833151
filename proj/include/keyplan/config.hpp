#pragma once

// Plain-text run configuration. Every key has a registered default; a file
// of `key = value` lines overrides defaults and `--set key=value` flags
// override the file. Unknown keys are rejected at every layer.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "keyplan/common.hpp"
#include "keyplan/keystep.hpp"
#include "keyplan/model.hpp"
#include "keyplan/sequence.hpp"
#include "keyplan/sim.hpp"
#include "keyplan/token_space.hpp"
#include "keyplan/train.hpp"

namespace keyplan {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class RunConfig {
 public:
  RunConfig() {
    const ExtractorConfig ex;
    const ActionCodecConfig ac;
    const CodecFitConfig cf;
    const BuildConfig bc;
    const ModelConfig mc;
    const TrainConfig tc;
    const sim::SimConfig sc;

    def("run.seed", "0");

    def("data.episodes", "500");
    def("data.placements", "1");
    def("data.sigma", "0");
    def("data.seed", "1000");

    def("sim.pause_steps", num(sc.pause_steps));
    def("sim.dwell_steps", num(sc.dwell_steps));
    def("sim.lateral_speed", num(sc.lateral_speed));
    def("sim.descend_speed", num(sc.descend_speed));
    def("sim.step_budget_per_placement", num(sc.step_budget_per_placement));
    def("sim.clean_labels", sc.clean_labels ? "true" : "false");

    def("extract.alpha", num(ex.alpha));
    def("extract.q_high", num(ex.q_high));
    def("extract.q_low", num(ex.q_low));
    def("extract.settle", num(ex.settle));
    def("extract.window", num(ex.window));
    def("extract.min_gap", num(ex.min_gap));
    def("extract.max_gap", num(ex.max_gap));
    def("extract.gripper_threshold", num(ex.gripper_threshold));

    def("filter.mode", "stub");
    def("filter.threshold", "0.01");

    def("codec.vision_k", num(cf.vision_k));
    def("codec.vision_iterations", num(cf.vision_iterations));
    def("codec.frame_stride", num(cf.frame_stride));
    def("codec.seed", num(cf.seed));
    def("codec.horizon", num(ac.horizon));
    def("codec.dct_keep", num(ac.dct_keep));
    def("codec.quant_levels", num(ac.quant_levels));
    def("codec.clip_margin", num(ac.clip_margin));
    def("codec.low_percentile", num(ac.low_percentile));
    def("codec.high_percentile", num(ac.high_percentile));

    def("build.history", num(bc.history));
    def("build.interval", num(bc.interval));
    def("build.slide", num(bc.slide));
    def("build.horizon", num(bc.horizon));
    def("build.stride", "1");
    def("build.shift_target", bc.shift_target ? "true" : "false");
    def("build.replay_exec", "2");

    def("model.d_model", num(mc.d_model));
    def("model.n_layers", num(mc.n_layers));
    def("model.n_heads", num(mc.n_heads));
    def("model.maxlen", "256");
    def("model.ffn_mult", num(mc.ffn_mult));
    def("model.tied", mc.tied ? "true" : "false");

    def("train.lr", num(tc.lr));
    def("train.min_lr_ratio", num(tc.min_lr_ratio));
    def("train.beta1", num(tc.beta1));
    def("train.beta2", num(tc.beta2));
    def("train.eps", num(tc.eps));
    def("train.weight_decay", num(tc.weight_decay));
    def("train.grad_clip", num(tc.grad_clip));
    def("train.warmup", num(tc.warmup));
    def("train.batch", "128");
    def("train.stage1_steps", "2000");
    def("train.stage2_steps", "2000");
    def("train.aux_context_weight", num(tc.aux_context_weight));
    def("train.log_every", num(tc.log_every));
    def("train.from_scratch", "false");

    def("eval.trials", "50");
    def("eval.placements", "1");
    def("eval.exec_k", "2");
    def("eval.seed", "900000");

    def("serve.port", "8080");
    def("serve.max_image_side", "256");
    def("serve.max_history", "16");
    def("serve.queue", "16");

    def("experiment.threshold", "0.6");
    def("experiment.history_values", "2,3,4");
    def("experiment.eval_every", "500");
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidInput("unknown config key '" + key + "'");
    it->second = trim(value);
  }

  /// Parses a single `key=value` assignment.
  void assign(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidInput("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }

  /// `key = value` lines; blank lines and lines starting with '#' are skipped.
  void merge_stream(std::istream& in, const std::string& origin) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      try {
        assign(t);
      } catch (const InvalidInput& e) {
        throw InvalidInput(origin + " line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open config file " + path);
    merge_stream(in, path);
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidInput("unknown config key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    const auto& v = str(key);
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw InvalidInput("config key '" + key + "' expects an integer, got '" + v + "'");
    return out;
  }

  int i32(const std::string& key) const {
    const auto v = integer(key);
    if (v < INT32_MIN || v > INT32_MAX) throw InvalidInput("config key '" + key + "' is out of range");
    return static_cast<int>(v);
  }

  std::uint64_t u64(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw InvalidInput("config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  double real(const std::string& key) const {
    const auto& v = str(key);
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw InvalidInput("config key '" + key + "' expects a finite number, got '" + v + "'");
    return out;
  }

  bool boolean(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InvalidInput("config key '" + key + "' expects true or false, got '" + v + "'");
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      int v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size())
        throw InvalidInput("config key '" + key + "' expects a comma-separated integer list");
      out.push_back(v);
    }
    if (out.empty()) throw InvalidInput("config key '" + key + "' is empty");
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted `key=value` lines; reloading the echo reproduces the config.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  std::string hash() const { return hex64(fnv1a(echo())); }

  void write_echo(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << echo();
  }

  // Module configs assembled from the dotted keys.

  ExtractorConfig extractor() const {
    ExtractorConfig c;
    c.alpha = real("extract.alpha");
    c.q_high = real("extract.q_high");
    c.q_low = real("extract.q_low");
    c.settle = i32("extract.settle");
    c.window = i32("extract.window");
    c.min_gap = i32("extract.min_gap");
    c.max_gap = i32("extract.max_gap");
    c.gripper_threshold = real("extract.gripper_threshold");
    c.validate();
    return c;
  }

  sim::SimConfig sim() const {
    sim::SimConfig c;
    c.pause_steps = i32("sim.pause_steps");
    c.dwell_steps = i32("sim.dwell_steps");
    c.lateral_speed = real("sim.lateral_speed");
    c.descend_speed = real("sim.descend_speed");
    c.step_budget_per_placement = i32("sim.step_budget_per_placement");
    c.clean_labels = boolean("sim.clean_labels");
    if (c.pause_steps < 1 || c.dwell_steps < 1) throw InvalidInput("sim pause and dwell steps must be >= 1");
    if (!(c.lateral_speed > 0.0 && c.lateral_speed <= c.max_step && c.descend_speed > 0.0 &&
          c.descend_speed <= c.max_step))
      throw InvalidInput("sim speeds must lie in (0, max_step]");
    if (c.step_budget_per_placement < 1) throw InvalidInput("sim.step_budget_per_placement must be >= 1");
    return c;
  }

  CodecFitConfig codecs() const {
    CodecFitConfig c;
    c.vision_k = i32("codec.vision_k");
    c.vision_iterations = i32("codec.vision_iterations");
    c.frame_stride = i32("codec.frame_stride");
    c.seed = u64("codec.seed");
    c.action.horizon = i32("codec.horizon");
    c.action.dct_keep = i32("codec.dct_keep");
    c.action.quant_levels = i32("codec.quant_levels");
    c.action.clip_margin = real("codec.clip_margin");
    c.action.low_percentile = real("codec.low_percentile");
    c.action.high_percentile = real("codec.high_percentile");
    return c;
  }

  BuildConfig build() const {
    BuildConfig c;
    c.history = i32("build.history");
    c.interval = i32("build.interval");
    c.slide = i32("build.slide");
    c.horizon = i32("build.horizon");
    c.stride = i32("build.stride");
    c.shift_target = boolean("build.shift_target");
    c.replay_exec = i32("build.replay_exec");
    c.validate();
    return c;
  }

  ModelConfig model(int vocab) const {
    ModelConfig c;
    c.vocab = vocab;
    c.d_model = i32("model.d_model");
    c.n_layers = i32("model.n_layers");
    c.n_heads = i32("model.n_heads");
    c.maxlen = i32("model.maxlen");
    c.ffn_mult = i32("model.ffn_mult");
    c.tied = boolean("model.tied");
    c.validate();
    return c;
  }

  TrainConfig train(Stage stage) const {
    TrainConfig c;
    c.lr = real("train.lr");
    c.min_lr_ratio = real("train.min_lr_ratio");
    c.beta1 = real("train.beta1");
    c.beta2 = real("train.beta2");
    c.eps = real("train.eps");
    c.weight_decay = real("train.weight_decay");
    c.grad_clip = real("train.grad_clip");
    c.warmup = i32("train.warmup");
    c.batch = i32("train.batch");
    c.steps = i32(stage == Stage::Planner ? "train.stage1_steps" : "train.stage2_steps");
    c.seed = u64("run.seed");
    c.aux_context_weight = real("train.aux_context_weight");
    c.log_every = i32("train.log_every");
    c.validate();
    return c;
  }

 private:
  template <typename T>
  static std::string num(T v) {
    std::ostringstream s;
    s << v;
    return s.str();
  }

  void def(const std::string& key, const std::string& value) { values_[key] = value; }

  std::map<std::string, std::string> values_;
};

}  // namespace keyplan
