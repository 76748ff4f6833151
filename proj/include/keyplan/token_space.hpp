#pragma once

// Unified vocabulary: [language | vision | specials | action]. The action
// region is always the final 1024 ids.

#include <fstream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "keyplan/action_codec.hpp"
#include "keyplan/binary_io.hpp"
#include "keyplan/language.hpp"
#include "keyplan/vision_codec.hpp"

namespace keyplan {

struct Region {
  int begin = 0;
  int end = 0;
  bool contains(int id) const { return id >= begin && id < end; }
  int size() const { return end - begin; }
};

enum class Modality { Language, Vision, Special, Action, None };

inline constexpr const char* kBundleMagic = "KSTK1";
inline constexpr std::uint32_t kBundleVersion = 1;

class TokenSpace {
 public:
  static constexpr int kLangSize = 512;
  static constexpr int kNumSpecials = 4;

  TokenSpace() = default;
  TokenSpace(LanguageCodec lang, VisionCodec vision, ActionCodec action)
      : lang_(std::move(lang)), vision_(std::move(vision)), action_(std::move(action)) {
    if (lang_.size() > kLangSize) throw InvalidInput("language word list exceeds the language region");
    if (action_.config().vocab != 1024) throw InvalidInput("action codec vocabulary must be exactly 1024");
  }

  Region lang_region() const { return {0, kLangSize}; }
  Region vision_region() const { return {kLangSize, kLangSize + vision_.k()}; }
  Region special_region() const { return {vision_region().end, vision_region().end + kNumSpecials}; }
  Region action_region() const { return {special_region().end, special_region().end + action_.config().vocab}; }
  int vocab_size() const { return action_region().end; }

  int bos() const { return special_region().begin; }
  int eos() const { return special_region().begin + 1; }
  int sep() const { return special_region().begin + 2; }
  int pad() const { return special_region().begin + 3; }

  Modality modality(int id) const {
    if (lang_region().contains(id)) return Modality::Language;
    if (vision_region().contains(id)) return Modality::Vision;
    if (special_region().contains(id)) return Modality::Special;
    if (action_region().contains(id)) return Modality::Action;
    return Modality::None;
  }

  const LanguageCodec& language() const { return lang_; }
  const VisionCodec& vision() const { return vision_; }
  const ActionCodec& action() const { return action_; }

  std::vector<int> encode_text(const std::string& text) const { return lang_.encode(text); }

  std::vector<int> encode_image(const Image& img) const {
    auto ids = vision_.encode(img);
    for (int& id : ids) id += vision_region().begin;
    return ids;
  }
  Image decode_image(std::span<const int> ids, int height, int width) const {
    std::vector<int> local(ids.begin(), ids.end());
    for (int& id : local) {
      if (!vision_region().contains(id)) throw InvalidInput("token " + std::to_string(id) + " is not a vision token");
      id -= vision_region().begin;
    }
    return vision_.decode(local, height, width);
  }

  std::vector<int> encode_action(const ActionChunk& chunk) const {
    auto ids = action_.encode(chunk);
    for (int& id : ids) id += action_region().begin;
    return ids;
  }
  ActionChunk decode_action(std::span<const int> ids) const {
    std::vector<int> local(ids.begin(), ids.end());
    for (int& id : local) {
      if (!action_region().contains(id)) throw DecodeError("token " + std::to_string(id) + " is not an action token");
      id -= action_region().begin;
    }
    return action_.decode(local);
  }

  void save(std::ostream& out) const {
    BinaryWriter w(out);
    w.raw(kBundleMagic, 5);
    w.u32(kBundleVersion);
    w.u32(static_cast<std::uint32_t>(lang_.words().size()));
    for (const auto& word : lang_.words()) w.str(word);
    vision_.save(w);
    action_.save(w);
  }
  static TokenSpace load(std::istream& in) {
    BinaryReader r(in);
    r.expect_magic(kBundleMagic);
    if (const auto v = r.u32(); v != kBundleVersion)
      throw InvalidInput("unsupported codec bundle version " + std::to_string(v));
    std::vector<std::string> words(r.u32());
    for (auto& w : words) w = r.str();
    auto vision = VisionCodec::load(r);
    auto action = ActionCodec::load(r);
    return TokenSpace(LanguageCodec(std::move(words)), std::move(vision), std::move(action));
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write codec bundle " + path);
    save(out);
  }
  static TokenSpace load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open codec bundle " + path);
    return load(in);
  }

  /// Stable fingerprint of the serialized bundle.
  std::string hash() const {
    std::ostringstream s;
    save(s);
    return hex64(fnv1a(s.str()));
  }

 private:
  LanguageCodec lang_;
  VisionCodec vision_;
  ActionCodec action_;
};

/// Chunks used to fit the action codec: every stride-1 window of `horizon`
/// actions plus, for every action, the chunk repeating it (history entries
/// are encoded that way).
inline std::vector<ActionChunk> training_chunks(const std::vector<Episode>& episodes, int horizon) {
  std::vector<ActionChunk> out;
  for (const auto& ep : episodes) {
    for (int t = 0; t + horizon <= ep.T; ++t) {
      ActionChunk c;
      for (int i = 0; i < horizon; ++i) c.push_back(flatten_action(ep.actions[static_cast<std::size_t>(t + i)]));
      out.push_back(std::move(c));
    }
    for (int t = 0; t < ep.T; ++t)
      out.emplace_back(static_cast<std::size_t>(horizon), flatten_action(ep.actions[static_cast<std::size_t>(t)]));
  }
  return out;
}

struct CodecFitConfig {
  int vision_k = 256;
  int vision_iterations = 15;
  std::uint64_t seed = 0;
  /// Frames sampled per episode for the codebook (every n-th observation).
  int frame_stride = 1;
  ActionCodecConfig action;
};

inline TokenSpace fit_token_space(const std::vector<Episode>& episodes, const CodecFitConfig& cfg) {
  std::vector<Image> frames;
  for (const auto& ep : episodes)
    for (std::size_t t = 0; t < ep.observations.size(); t += static_cast<std::size_t>(std::max(1, cfg.frame_stride)))
      frames.push_back(ep.observations[t].image);
  auto vision = fit_vision_codebook(frames, cfg.vision_k, cfg.seed, cfg.vision_iterations);
  auto action = fit_action_codec(training_chunks(episodes, cfg.action.horizon), cfg.action);
  return TokenSpace(LanguageCodec(), std::move(vision), std::move(action));
}

}  // namespace keyplan
