#pragma once

// Action-chunk tokenizer: per-dimension percentile normalization, orthonormal
// DCT along time, uniform scalar quantization, then byte-pair encoding over
// the quantized symbols into a fixed 1024-entry vocabulary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "keyplan/binary_io.hpp"
#include "keyplan/common.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan {

/// horizon rows, each row one flattened action (delta components then gripper).
using ActionChunk = std::vector<std::vector<double>>;

inline std::vector<double> flatten_action(const Action& a) {
  std::vector<double> v = a.delta;
  v.push_back(a.gripper);
  return v;
}

inline Action unflatten_action(const std::vector<double>& v) {
  Action a;
  a.delta.assign(v.begin(), v.end() - 1);
  a.gripper = std::clamp(v.back(), 0.0, 1.0);
  return a;
}

/// Raised when a token sequence cannot be turned back into a chunk.
class DecodeError : public Error {
 public:
  using Error::Error;
};

struct ActionCodecConfig {
  int horizon = 4;
  int dct_keep = 4;
  int quant_levels = 255;
  int vocab = 1024;
  /// Normalized values are clipped to [-1 - margin, 1 + margin].
  double clip_margin = 0.05;
  double low_percentile = 0.01;
  double high_percentile = 0.99;
};

class ActionCodec {
 public:
  ActionCodec() = default;

  const ActionCodecConfig& config() const { return cfg_; }
  int dims() const { return dims_; }
  int horizon() const { return cfg_.horizon; }
  const std::vector<double>& p1() const { return p1_; }
  const std::vector<double>& p99() const { return p99_; }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  int symbols_per_chunk() const { return cfg_.dct_keep * dims_; }
  /// Tokens past the trained merges are reserved and never produced.
  int used_vocab() const { return cfg_.quant_levels + static_cast<int>(merges_.size()); }

  double coef_range() const { return std::sqrt(static_cast<double>(cfg_.horizon)) * (1.0 + cfg_.clip_margin); }
  double quant_step() const { return 2.0 * coef_range() / (cfg_.quant_levels - 1); }

  static double dct_scale(int k, int n) { return std::sqrt((k == 0 ? 1.0 : 2.0) / n); }
  static double dct_basis(int k, int t, int n) {
    return std::cos(std::numbers::pi * (2.0 * t + 1.0) * k / (2.0 * n));
  }

  bool degenerate(int d) const { return !(p99_[d] > p1_[d]); }

  double normalize(int d, double v) const {
    if (degenerate(d)) return 0.0;
    const double x = 2.0 * (v - p1_[d]) / (p99_[d] - p1_[d]) - 1.0;
    return std::clamp(x, -1.0 - cfg_.clip_margin, 1.0 + cfg_.clip_margin);
  }
  double denormalize(int d, double x) const {
    if (degenerate(d)) return p1_[d];
    return (x + 1.0) * 0.5 * (p99_[d] - p1_[d]) + p1_[d];
  }

  void check_chunk(const ActionChunk& chunk) const {
    if (static_cast<int>(chunk.size()) != cfg_.horizon)
      throw InvalidInput("action chunk has " + std::to_string(chunk.size()) + " steps, codec horizon is " +
                         std::to_string(cfg_.horizon));
    for (const auto& row : chunk)
      if (static_cast<int>(row.size()) != dims_) throw InvalidInput("action chunk row has wrong dimension");
  }

  /// Quantized DCT symbols, low frequencies first, interleaved across dims.
  std::vector<int> symbols(const ActionChunk& chunk) const {
    check_chunk(chunk);
    const int n = cfg_.horizon;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(symbols_per_chunk()));
    for (int k = 0; k < cfg_.dct_keep; ++k)
      for (int d = 0; d < dims_; ++d) {
        double c = 0.0;
        for (int t = 0; t < n; ++t) c += normalize(d, chunk[t][d]) * dct_basis(k, t, n);
        c *= dct_scale(k, n);
        const long q = std::lround((c + coef_range()) / quant_step());
        out.push_back(static_cast<int>(std::clamp(q, 0L, static_cast<long>(cfg_.quant_levels - 1))));
      }
    return out;
  }

  ActionChunk from_symbols(const std::vector<int>& syms) const {
    if (static_cast<int>(syms.size()) != symbols_per_chunk())
      throw DecodeError("action decode: expected " + std::to_string(symbols_per_chunk()) + " symbols, got " +
                        std::to_string(syms.size()));
    const int n = cfg_.horizon;
    std::vector<double> coef(static_cast<std::size_t>(n * dims_), 0.0);
    for (int k = 0; k < cfg_.dct_keep; ++k)
      for (int d = 0; d < dims_; ++d) coef[k * dims_ + d] = syms[k * dims_ + d] * quant_step() - coef_range();
    ActionChunk chunk(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(dims_)));
    for (int t = 0; t < n; ++t)
      for (int d = 0; d < dims_; ++d) {
        double x = 0.0;
        for (int k = 0; k < cfg_.dct_keep; ++k) x += dct_scale(k, n) * coef[k * dims_ + d] * dct_basis(k, t, n);
        chunk[t][d] = denormalize(d, x);
      }
    return chunk;
  }

  /// Local token ids in [0, vocab).
  std::vector<int> encode(const ActionChunk& chunk) const { return bpe_encode(symbols(chunk)); }

  ActionChunk decode(const std::vector<int>& tokens) const {
    std::vector<int> syms;
    for (int tok : tokens) {
      if (tok < 0 || tok >= used_vocab())
        throw DecodeError("action decode: token " + std::to_string(tok) + " is not an assigned action token");
      const auto& e = expansion_[static_cast<std::size_t>(tok)];
      syms.insert(syms.end(), e.begin(), e.end());
    }
    return from_symbols(syms);
  }

  /// Number of symbols a token expands to; 0 for reserved ids.
  int expansion_length(int tok) const {
    if (tok < 0 || tok >= used_vocab()) return 0;
    return static_cast<int>(expansion_[static_cast<std::size_t>(tok)].size());
  }

  std::vector<int> bpe_encode(std::vector<int> seq) const {
    for (;;) {
      int best_rank = -1;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        auto it = rank_.find(pair_key(seq[i], seq[i + 1]));
        if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
      }
      if (best_rank < 0) return seq;
      const auto [a, b] = merges_[static_cast<std::size_t>(best_rank)];
      const int merged = cfg_.quant_levels + best_rank;
      std::vector<int> next;
      next.reserve(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(seq[i]);
        }
      }
      seq = std::move(next);
    }
  }

  /// Worst-case max-abs reconstruction error in normalized units for an
  /// in-range chunk, from quantization alone (dct_keep == horizon).
  double quantization_error_bound() const {
    const int n = cfg_.horizon;
    double worst = 0.0;
    for (int t = 0; t < n; ++t) {
      double s = 0.0;
      for (int k = 0; k < cfg_.dct_keep; ++k) s += dct_scale(k, n) * std::abs(dct_basis(k, t, n));
      worst = std::max(worst, s);
    }
    return 0.5 * quant_step() * worst;
  }

  void save(BinaryWriter& w) const {
    w.i32(cfg_.horizon);
    w.i32(cfg_.dct_keep);
    w.i32(cfg_.quant_levels);
    w.i32(cfg_.vocab);
    w.f64(cfg_.clip_margin);
    w.f64(cfg_.low_percentile);
    w.f64(cfg_.high_percentile);
    w.i32(dims_);
    w.vec(p1_);
    w.vec(p99_);
    std::vector<std::int32_t> flat;
    for (auto [a, b] : merges_) {
      flat.push_back(a);
      flat.push_back(b);
    }
    w.vec(flat);
  }

  static ActionCodec load(BinaryReader& r) {
    ActionCodecConfig cfg;
    cfg.horizon = r.i32();
    cfg.dct_keep = r.i32();
    cfg.quant_levels = r.i32();
    cfg.vocab = r.i32();
    cfg.clip_margin = r.f64();
    cfg.low_percentile = r.f64();
    cfg.high_percentile = r.f64();
    const int dims = r.i32();
    auto p1 = r.vec<double>();
    auto p99 = r.vec<double>();
    auto flat = r.vec<std::int32_t>();
    std::vector<std::pair<int, int>> merges;
    for (std::size_t i = 0; i + 1 < flat.size(); i += 2) merges.emplace_back(flat[i], flat[i + 1]);
    return ActionCodec(cfg, dims, std::move(p1), std::move(p99), std::move(merges), {});
  }

  ActionCodec(ActionCodecConfig cfg, int dims, std::vector<double> p1, std::vector<double> p99,
              std::vector<std::pair<int, int>> merges, std::vector<std::string> warnings)
      : cfg_(cfg), dims_(dims), p1_(std::move(p1)), p99_(std::move(p99)), merges_(std::move(merges)),
        warnings_(std::move(warnings)) {
    if (cfg_.horizon < 1 || cfg_.dct_keep < 1 || cfg_.dct_keep > cfg_.horizon)
      throw InvalidInput("action codec: require 1 <= dct_keep <= horizon");
    if (cfg_.quant_levels < 2 || cfg_.quant_levels > cfg_.vocab)
      throw InvalidInput("action codec: quant_levels must lie in [2, vocab]");
    if (static_cast<int>(p1_.size()) != dims_ || static_cast<int>(p99_.size()) != dims_)
      throw InvalidInput("action codec: percentile bounds do not match dims");
    if (cfg_.quant_levels + static_cast<int>(merges_.size()) > cfg_.vocab)
      throw InvalidInput("action codec: merge table exceeds vocabulary");
    expansion_.resize(static_cast<std::size_t>(used_vocab()));
    for (int s = 0; s < cfg_.quant_levels; ++s) expansion_[static_cast<std::size_t>(s)] = {s};
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      const auto [a, b] = merges_[i];
      const int id = cfg_.quant_levels + static_cast<int>(i);
      if (a < 0 || b < 0 || a >= id || b >= id) throw InvalidInput("action codec: malformed merge table");
      auto& e = expansion_[static_cast<std::size_t>(id)];
      e = expansion_[static_cast<std::size_t>(a)];
      e.insert(e.end(), expansion_[static_cast<std::size_t>(b)].begin(), expansion_[static_cast<std::size_t>(b)].end());
      rank_.emplace(pair_key(a, b), static_cast<int>(i));
    }
  }

 private:
  static std::uint64_t pair_key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  ActionCodecConfig cfg_;
  int dims_ = 0;
  std::vector<double> p1_, p99_;
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> warnings_;
  std::vector<std::vector<int>> expansion_;
  std::unordered_map<std::uint64_t, int> rank_;
};

/// Trains merges greedily on weighted symbol sequences: most frequent
/// adjacent pair first, ties to the smallest (a, b). Stops at the vocabulary
/// size or when no pair occurs at least twice.
inline std::vector<std::pair<int, int>> train_bpe(std::map<std::vector<int>, double> corpus, int base, int vocab) {
  std::vector<std::pair<int, int>> merges;
  std::vector<double> counts(static_cast<std::size_t>(vocab) * vocab, 0.0);
  std::vector<std::pair<std::vector<int>, double>> seqs(corpus.begin(), corpus.end());
  while (base + static_cast<int>(merges.size()) < vocab) {
    std::fill(counts.begin(), counts.end(), 0.0);
    for (const auto& [s, w] : seqs)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[static_cast<std::size_t>(s[i]) * vocab + s[i + 1]] += w;
    std::size_t best = 0;
    for (std::size_t i = 1; i < counts.size(); ++i)
      if (counts[i] > counts[best]) best = i;
    if (counts[best] < 2.0) break;
    const int a = static_cast<int>(best / vocab), b = static_cast<int>(best % vocab);
    const int id = base + static_cast<int>(merges.size());
    merges.emplace_back(a, b);
    for (auto& [s, w] : seqs) {
      std::vector<int> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == a && s[i + 1] == b) {
          next.push_back(id);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
    }
  }
  return merges;
}

inline ActionCodec fit_action_codec(const std::vector<ActionChunk>& chunks, const ActionCodecConfig& cfg) {
  if (chunks.empty()) throw InvalidInput("fit_action_codec: no training chunks");
  const int dims = static_cast<int>(chunks.front().front().size());
  std::vector<double> p1(static_cast<std::size_t>(dims)), p99(static_cast<std::size_t>(dims));
  std::vector<std::string> warnings;
  for (int d = 0; d < dims; ++d) {
    std::vector<double> vals;
    for (const auto& c : chunks)
      for (const auto& row : c) vals.push_back(row.at(static_cast<std::size_t>(d)));
    p1[d] = quantile(vals, cfg.low_percentile);
    p99[d] = quantile(vals, cfg.high_percentile);
    if (!(p99[d] > p1[d]))
      warnings.push_back("action dim " + std::to_string(d) + " is degenerate (p1 == p99); encoded as constant 0");
  }
  ActionCodec base(cfg, dims, p1, p99, {}, warnings);
  std::map<std::vector<int>, double> corpus;
  for (const auto& c : chunks) corpus[base.symbols(c)] += 1.0;
  auto merges = train_bpe(std::move(corpus), cfg.quant_levels, cfg.vocab);
  return ActionCodec(cfg, dims, std::move(p1), std::move(p99), std::move(merges), std::move(warnings));
}

}  // namespace keyplan
