#pragma once

// Decoder-only transformer with a hand-written backward pass. Pre-LN blocks,
// tanh-GELU MLP, learned positions. Sequences in a batch are packed row-wise
// so the dense layers run as one GEMM; attention is per sequence.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "keyplan/binary_io.hpp"
#include "keyplan/common.hpp"
#include "keyplan/token_space.hpp"

namespace keyplan {

struct ModelConfig {
  int vocab = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int maxlen = 512;
  int ffn_mult = 4;
  bool tied = false;

  void validate() const {
    if (vocab < 1) throw InvalidInput("model vocab must be >= 1");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || maxlen < 1 || ffn_mult < 1)
      throw InvalidInput("model dimensions must be positive");
    if (d_model % n_heads != 0) throw InvalidInput("d_model must be divisible by n_heads");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, pos_emb = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0, wout = 0, bout = 0;
  std::size_t total = 0;
  /// [begin, end) ranges that receive weight decay (the matrices).
  std::vector<std::pair<std::size_t, std::size_t>> decayed;

  explicit ParamLayout(const ModelConfig& c) {
    const std::size_t d = static_cast<std::size_t>(c.d_model), v = static_cast<std::size_t>(c.vocab);
    const std::size_t f = d * static_cast<std::size_t>(c.ffn_mult);
    std::size_t at = 0;
    auto take = [&](std::size_t n, bool decay) {
      const std::size_t o = at;
      at += n;
      if (decay) decayed.emplace_back(o, at);
      return o;
    };
    tok_emb = take(v * d, true);
    pos_emb = take(static_cast<std::size_t>(c.maxlen) * d, true);
    for (int l = 0; l < c.n_layers; ++l) {
      Layer L{};
      L.ln1_g = take(d, false);
      L.ln1_b = take(d, false);
      L.wqkv = take(d * 3 * d, true);
      L.bqkv = take(3 * d, false);
      L.wo = take(d * d, true);
      L.bo = take(d, false);
      L.ln2_g = take(d, false);
      L.ln2_b = take(d, false);
      L.w1 = take(d * f, true);
      L.b1 = take(f, false);
      L.w2 = take(f * d, true);
      L.b2 = take(d, false);
      layers.push_back(L);
    }
    lnf_g = take(d, false);
    lnf_b = take(d, false);
    wout = c.tied ? tok_emb : take(d * v, true);
    bout = take(v, false);
    total = at;
  }
};

template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowV = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using ColV = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
class Model {
 public:
  using Mat = MatR<S>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using MapR = Eigen::Map<RowV<S>>;
  using CMapR = Eigen::Map<const RowV<S>>;

  Model() : layout_(ModelConfig{1, 1, 1, 1, 1, 1, false}) {}
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), layout_((cfg.validate(), cfg)), w_(layout_.total, S(0)) {}

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<S>& params() { return w_; }
  const std::vector<S>& params() const { return w_; }
  int d() const { return cfg_.d_model; }
  int ffn() const { return cfg_.d_model * cfg_.ffn_mult; }

  /// N(0, 0.02) matrices, residual projections scaled by 1/sqrt(2 L), unit
  /// LayerNorm gains, zero biases.
  void init(std::uint64_t seed) {
    Rng rng(seed);
    std::fill(w_.begin(), w_.end(), S(0));
    const double resid = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
      for (std::size_t i = 0; i < n; ++i) w_[off + i] = static_cast<S>(rng.normal(0.0, sd));
    };
    auto ones = [&](std::size_t off) { std::fill_n(w_.begin() + static_cast<std::ptrdiff_t>(off), d(), S(1)); };
    const auto D = static_cast<std::size_t>(d()), F = static_cast<std::size_t>(ffn());
    fill(layout_.tok_emb, static_cast<std::size_t>(cfg_.vocab) * D, 0.02);
    fill(layout_.pos_emb, static_cast<std::size_t>(cfg_.maxlen) * D, 0.02);
    for (const auto& L : layout_.layers) {
      ones(L.ln1_g);
      ones(L.ln2_g);
      fill(L.wqkv, D * 3 * D, 0.02);
      fill(L.wo, D * D, resid);
      fill(L.w1, D * F, 0.02);
      fill(L.w2, F * D, resid);
    }
    ones(layout_.lnf_g);
    if (!cfg_.tied) fill(layout_.wout, D * static_cast<std::size_t>(cfg_.vocab), 0.02);
  }

  CMapM mat(std::size_t off, int rows, int cols) const { return CMapM(w_.data() + off, rows, cols); }
  CMapR row(std::size_t off, int n) const { return CMapR(w_.data() + off, n); }

  template <typename T>
  Model<T> cast() const {
    Model<T> out(cfg_);
    for (std::size_t i = 0; i < w_.size(); ++i) out.params()[i] = static_cast<T>(w_[i]);
    return out;
  }

  std::uint64_t hash() const {
    std::vector<double> tmp(w_.begin(), w_.end());
    return fnv1a({reinterpret_cast<const char*>(tmp.data()), tmp.size() * sizeof(double)});
  }

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<S> w_;
};

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename S>
void layer_norm(const MatR<S>& x, const RowV<S>& g, const RowV<S>& b, MatR<S>& xhat, ColV<S>& rstd, MatR<S>& out) {
  const auto n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    rstd(r) = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    xhat.row(r) = (x.row(r).array() - mu) * rstd(r);
  }
  out = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
}

/// Returns dx; accumulates dg and db.
template <typename S>
MatR<S> layer_norm_backward(const MatR<S>& dy, const MatR<S>& xhat, const ColV<S>& rstd, const RowV<S>& g,
                            Eigen::Map<RowV<S>> dg, Eigen::Map<RowV<S>> db) {
  dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  MatR<S> dxhat = dy.array().rowwise() * g.array();
  MatR<S> dx(dy.rows(), dy.cols());
  const S invd = S(1) / static_cast<S>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const S m1 = dxhat.row(r).sum() * invd;
    const S m2 = dxhat.row(r).dot(xhat.row(r)) * invd;
    dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

template <typename S>
S gelu(S x) {
  const S c = static_cast<S>(kGeluC);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  const S c = static_cast<S>(kGeluC);
  const S t = std::tanh(c * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3 * 0.044715) * x * x);
}

/// In-place causal softmax of a square score block.
template <typename S>
void causal_softmax(MatR<S>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const S mx = s.row(i).head(i + 1).maxCoeff();
    S sum = 0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      s(i, j) = std::exp(s(i, j) - mx);
      sum += s(i, j);
    }
    for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
    for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = 0;
  }
}

}  // namespace detail

/// Activations of one packed forward pass, kept for the backward pass.
template <typename S>
struct ForwardPass {
  struct LayerCache {
    MatR<S> x_in, xhat1, a, qkv, o, x1, xhat2, b, h1, g;
    ColV<S> rstd1, rstd2;
    std::vector<MatR<S>> probs;  // [seq * heads + head]
  };
  std::vector<std::size_t> offsets;  // packed row offsets, size B + 1
  std::vector<int> tokens;
  std::vector<std::size_t> rows;  // packed rows whose logits were computed
  std::vector<LayerCache> layers;
  MatR<S> xhatf, z;
  ColV<S> rstdf;
  MatR<S> logits;  // rows.size() x vocab
};

/// Packed forward over `seqs`; logits are produced only for the rows listed in
/// `select[s]` (positions within sequence s).
template <typename S>
ForwardPass<S> forward(const Model<S>& m, const std::vector<std::span<const int>>& seqs,
                       const std::vector<std::vector<int>>& select) {
  const auto& cfg = m.config();
  const auto& L = m.layout();
  const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, F = m.ffn();
  ForwardPass<S> fp;
  fp.offsets.push_back(0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (seqs[s].empty()) throw InvalidInput("forward: empty sequence");
    if (static_cast<int>(seqs[s].size()) > cfg.maxlen)
      throw InvalidInput("forward: sequence length " + std::to_string(seqs[s].size()) + " exceeds maxlen " +
                         std::to_string(cfg.maxlen));
    fp.tokens.insert(fp.tokens.end(), seqs[s].begin(), seqs[s].end());
    fp.offsets.push_back(fp.tokens.size());
    for (int p : select.at(s)) {
      if (p < 0 || p >= static_cast<int>(seqs[s].size())) throw InvalidInput("forward: selected position out of range");
      fp.rows.push_back(fp.offsets[s] + static_cast<std::size_t>(p));
    }
  }
  const auto N = static_cast<Eigen::Index>(fp.tokens.size());
  const auto tok = m.mat(L.tok_emb, cfg.vocab, d);
  const auto pos = m.mat(L.pos_emb, cfg.maxlen, d);
  MatR<S> x(N, d);
  for (std::size_t s = 0; s + 1 < fp.offsets.size(); ++s)
    for (std::size_t r = fp.offsets[s]; r < fp.offsets[s + 1]; ++r) {
      const int t = fp.tokens[r];
      if (t < 0 || t >= cfg.vocab) throw InvalidInput("forward: token " + std::to_string(t) + " outside vocabulary");
      x.row(static_cast<Eigen::Index>(r)) = tok.row(t) + pos.row(static_cast<Eigen::Index>(r - fp.offsets[s]));
    }

  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  fp.layers.resize(L.layers.size());
  for (std::size_t l = 0; l < L.layers.size(); ++l) {
    const auto& P = L.layers[l];
    auto& c = fp.layers[l];
    c.x_in = x;
    detail::layer_norm<S>(x, m.row(P.ln1_g, d), m.row(P.ln1_b, d), c.xhat1, c.rstd1, c.a);
    c.qkv.noalias() = c.a * m.mat(P.wqkv, d, 3 * d);
    c.qkv.rowwise() += m.row(P.bqkv, 3 * d);
    c.o.resize(N, d);
    for (std::size_t s = 0; s + 1 < fp.offsets.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(fp.offsets[s]);
      const auto n = static_cast<Eigen::Index>(fp.offsets[s + 1] - fp.offsets[s]);
      for (int h = 0; h < H; ++h) {
        MatR<S> sc = (c.qkv.block(off, h * dh, n, dh) * c.qkv.block(off, d + h * dh, n, dh).transpose()) * scale;
        detail::causal_softmax(sc);
        c.o.block(off, h * dh, n, dh).noalias() = sc * c.qkv.block(off, 2 * d + h * dh, n, dh);
        c.probs.push_back(std::move(sc));
      }
    }
    c.x1 = x;
    c.x1.noalias() += c.o * m.mat(P.wo, d, d);
    c.x1.rowwise() += m.row(P.bo, d);
    detail::layer_norm<S>(c.x1, m.row(P.ln2_g, d), m.row(P.ln2_b, d), c.xhat2, c.rstd2, c.b);
    c.h1.noalias() = c.b * m.mat(P.w1, d, F);
    c.h1.rowwise() += m.row(P.b1, F);
    c.g = c.h1.unaryExpr([](S v) { return detail::gelu(v); });
    x = c.x1;
    x.noalias() += c.g * m.mat(P.w2, F, d);
    x.rowwise() += m.row(P.b2, d);
  }
  MatR<S> zfull;
  detail::layer_norm<S>(x, m.row(L.lnf_g, d), m.row(L.lnf_b, d), fp.xhatf, fp.rstdf, zfull);
  fp.z = std::move(zfull);
  MatR<S> zsel(static_cast<Eigen::Index>(fp.rows.size()), d);
  for (std::size_t i = 0; i < fp.rows.size(); ++i) zsel.row(static_cast<Eigen::Index>(i)) = fp.z.row(static_cast<Eigen::Index>(fp.rows[i]));
  if (cfg.tied)
    fp.logits.noalias() = zsel * m.mat(L.wout, cfg.vocab, d).transpose();
  else
    fp.logits.noalias() = zsel * m.mat(L.wout, d, cfg.vocab);
  fp.logits.rowwise() += m.row(L.bout, cfg.vocab);
  return fp;
}

/// Accumulates parameter gradients into `grad` given dL/dlogits.
template <typename S>
void backward(const Model<S>& m, const ForwardPass<S>& fp, const MatR<S>& dlogits, std::vector<S>& grad) {
  const auto& cfg = m.config();
  const auto& L = m.layout();
  const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, F = m.ffn();
  const auto N = static_cast<Eigen::Index>(fp.tokens.size());
  grad.resize(L.total, S(0));
  auto gmat = [&](std::size_t off, int r, int c) { return Eigen::Map<MatR<S>>(grad.data() + off, r, c); };
  auto grow = [&](std::size_t off, int n) { return Eigen::Map<RowV<S>>(grad.data() + off, n); };

  MatR<S> zsel(static_cast<Eigen::Index>(fp.rows.size()), d);
  for (std::size_t i = 0; i < fp.rows.size(); ++i) zsel.row(static_cast<Eigen::Index>(i)) = fp.z.row(static_cast<Eigen::Index>(fp.rows[i]));
  MatR<S> dzsel;
  if (cfg.tied) {
    gmat(L.wout, cfg.vocab, d).noalias() += dlogits.transpose() * zsel;
    dzsel.noalias() = dlogits * m.mat(L.wout, cfg.vocab, d);
  } else {
    gmat(L.wout, d, cfg.vocab).noalias() += zsel.transpose() * dlogits;
    dzsel.noalias() = dlogits * m.mat(L.wout, d, cfg.vocab).transpose();
  }
  grow(L.bout, cfg.vocab) += dlogits.colwise().sum();
  MatR<S> dz = MatR<S>::Zero(N, d);
  for (std::size_t i = 0; i < fp.rows.size(); ++i)
    dz.row(static_cast<Eigen::Index>(fp.rows[i])) += dzsel.row(static_cast<Eigen::Index>(i));
  MatR<S> dx = detail::layer_norm_backward<S>(dz, fp.xhatf, fp.rstdf, m.row(L.lnf_g, d), grow(L.lnf_g, d),
                                              grow(L.lnf_b, d));

  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  for (std::size_t li = L.layers.size(); li-- > 0;) {
    const auto& P = L.layers[li];
    const auto& c = fp.layers[li];
    // MLP branch.
    gmat(P.w2, F, d).noalias() += c.g.transpose() * dx;
    grow(P.b2, d) += dx.colwise().sum();
    MatR<S> dh1 = dx * m.mat(P.w2, F, d).transpose();
    dh1.array() *= c.h1.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
    gmat(P.w1, d, F).noalias() += c.b.transpose() * dh1;
    grow(P.b1, F) += dh1.colwise().sum();
    MatR<S> db = dh1 * m.mat(P.w1, d, F).transpose();
    MatR<S> dx1 = dx + detail::layer_norm_backward<S>(db, c.xhat2, c.rstd2, m.row(P.ln2_g, d), grow(P.ln2_g, d),
                                                      grow(P.ln2_b, d));
    // Attention branch.
    gmat(P.wo, d, d).noalias() += c.o.transpose() * dx1;
    grow(P.bo, d) += dx1.colwise().sum();
    MatR<S> dout = dx1 * m.mat(P.wo, d, d).transpose();
    MatR<S> dqkv(N, 3 * d);
    std::size_t pi = 0;
    for (std::size_t s = 0; s + 1 < fp.offsets.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(fp.offsets[s]);
      const auto n = static_cast<Eigen::Index>(fp.offsets[s + 1] - fp.offsets[s]);
      for (int h = 0; h < H; ++h, ++pi) {
        const MatR<S>& p = c.probs[pi];
        const auto q = c.qkv.block(off, h * dh, n, dh);
        const auto k = c.qkv.block(off, d + h * dh, n, dh);
        const auto v = c.qkv.block(off, 2 * d + h * dh, n, dh);
        const auto dO = dout.block(off, h * dh, n, dh);
        MatR<S> dp = dO * v.transpose();
        dqkv.block(off, 2 * d + h * dh, n, dh).noalias() = p.transpose() * dO;
        const ColV<S> rs = (dp.array() * p.array()).rowwise().sum();
        MatR<S> ds = (p.array() * (dp.array().colwise() - rs.array())) * scale;
        dqkv.block(off, h * dh, n, dh).noalias() = ds * k;
        dqkv.block(off, d + h * dh, n, dh).noalias() = ds.transpose() * q;
      }
    }
    gmat(P.wqkv, d, 3 * d).noalias() += c.a.transpose() * dqkv;
    grow(P.bqkv, 3 * d) += dqkv.colwise().sum();
    MatR<S> da = dqkv * m.mat(P.wqkv, d, 3 * d).transpose();
    dx = dx1 + detail::layer_norm_backward<S>(da, c.xhat1, c.rstd1, m.row(P.ln1_g, d), grow(P.ln1_g, d),
                                              grow(P.ln1_b, d));
  }
  auto dtok = gmat(L.tok_emb, cfg.vocab, d);
  auto dpos = gmat(L.pos_emb, cfg.maxlen, d);
  for (std::size_t s = 0; s + 1 < fp.offsets.size(); ++s)
    for (std::size_t r = fp.offsets[s]; r < fp.offsets[s + 1]; ++r) {
      dtok.row(fp.tokens[r]) += dx.row(static_cast<Eigen::Index>(r));
      dpos.row(static_cast<Eigen::Index>(r - fp.offsets[s])) += dx.row(static_cast<Eigen::Index>(r));
    }
}

/// Logits for every position of one sequence.
template <typename S>
MatR<S> forward_logits(const Model<S>& m, std::span<const int> tokens) {
  std::vector<int> all(tokens.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return forward(m, {tokens}, {all}).logits;
}

/// Per-position loss weights: the weight at index i scales the negative
/// log-likelihood of token i given tokens [0, i). `norm` divides the sum.
struct LossExample {
  std::vector<int> tokens;
  std::vector<double> weight;
  double norm = 1.0;
};

/// Masked targets carry weight 1; with aux_weight > 0 the other vision tokens
/// also contribute at that weight. The normaliser stays the masked count.
inline LossExample make_loss_example(std::span<const int> tokens, std::span<const std::uint8_t> mask,
                                     double aux_weight = 0.0, std::optional<Region> aux_region = std::nullopt) {
  if (tokens.size() != mask.size()) throw InvalidInput("mask and tokens differ in length");
  LossExample ex;
  ex.tokens.assign(tokens.begin(), tokens.end());
  ex.weight.assign(tokens.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mask[i]) {
      if (i == 0) throw InvalidInput("the first token has no context and cannot be supervised");
      ex.weight[i] = 1.0;
      ++count;
    } else if (aux_weight > 0.0 && aux_region && i > 0 && aux_region->contains(tokens[i])) {
      ex.weight[i] = aux_weight;
    }
  }
  if (count == 0) throw InvalidInput("loss mask is empty");
  ex.norm = static_cast<double>(count);
  return ex;
}

/// Mean over examples of each example's normalised weighted NLL. When `grad`
/// is non-null the gradient of that value is accumulated into it.
template <typename S>
double loss_and_grad(const Model<S>& m, std::span<const LossExample> batch, std::vector<S>* grad) {
  if (batch.empty()) throw InvalidInput("loss over an empty batch");
  std::vector<std::span<const int>> seqs;
  std::vector<std::vector<int>> select;
  std::vector<std::pair<int, double>> targets;  // (token, coefficient) per selected row
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    seqs.emplace_back(ex.tokens);
    std::vector<int> sel;
    for (std::size_t i = 1; i < ex.tokens.size(); ++i)
      if (ex.weight[i] != 0.0) {
        sel.push_back(static_cast<int>(i - 1));
        targets.emplace_back(ex.tokens[i], ex.weight[i] / ex.norm * inv_b);
      }
    select.push_back(std::move(sel));
  }
  auto fp = forward(m, seqs, select);
  double loss = 0.0;
  MatR<S> dlogits(fp.logits.rows(), fp.logits.cols());
  for (Eigen::Index r = 0; r < fp.logits.rows(); ++r) {
    const auto [tok, coef] = targets[static_cast<std::size_t>(r)];
    const S mx = fp.logits.row(r).maxCoeff();
    RowV<S> e = (fp.logits.row(r).array() - mx).exp();
    const S sum = e.sum();
    const double lse = static_cast<double>(mx) + std::log(static_cast<double>(sum));
    loss += coef * (lse - static_cast<double>(fp.logits(r, tok)));
    dlogits.row(r) = e / sum * static_cast<S>(coef);
    dlogits(r, tok) -= static_cast<S>(coef);
  }
  if (grad) backward(m, fp, dlogits, *grad);
  return loss;
}

/// Mean NLL over the masked positions of one sequence.
template <typename S>
double masked_ce_loss(const Model<S>& m, std::span<const int> tokens, std::span<const std::uint8_t> mask) {
  const auto ex = make_loss_example(tokens, mask);
  return loss_and_grad<S>(m, std::span<const LossExample>(&ex, 1), nullptr);
}

// ---------------------------------------------------------------------------
// Incremental inference
// ---------------------------------------------------------------------------

/// Key/value cache over one growing sequence.
template <typename S>
class Session {
 public:
  explicit Session(const Model<S>& m) : m_(m) {
    const int d = m.d();
    for (std::size_t l = 0; l < m.layout().layers.size(); ++l) {
      k_.emplace_back(m.config().maxlen, d);
      v_.emplace_back(m.config().maxlen, d);
    }
  }

  int length() const { return len_; }

  /// Appends one token; returns the next-token logits when asked.
  std::optional<RowV<S>> feed(int token, bool want_logits) {
    const auto& cfg = m_.config();
    const auto& L = m_.layout();
    if (len_ >= cfg.maxlen) throw InvalidInput("sequence exceeds maxlen " + std::to_string(cfg.maxlen));
    if (token < 0 || token >= cfg.vocab) throw InvalidInput("token " + std::to_string(token) + " outside vocabulary");
    const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, F = m_.ffn();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    MatR<S> x = m_.mat(L.tok_emb, cfg.vocab, d).row(token) + m_.mat(L.pos_emb, cfg.maxlen, d).row(len_);
    MatR<S> xhat, a, tmp;
    ColV<S> rstd;
    for (std::size_t l = 0; l < L.layers.size(); ++l) {
      const auto& P = L.layers[l];
      detail::layer_norm<S>(x, m_.row(P.ln1_g, d), m_.row(P.ln1_b, d), xhat, rstd, a);
      RowV<S> qkv = a * m_.mat(P.wqkv, d, 3 * d) + m_.row(P.bqkv, 3 * d);
      k_[l].row(len_) = qkv.segment(d, d);
      v_[l].row(len_) = qkv.segment(2 * d, d);
      RowV<S> o(d);
      for (int h = 0; h < H; ++h) {
        RowV<S> sc = (qkv.segment(h * dh, dh) * k_[l].block(0, h * dh, len_ + 1, dh).transpose()) * scale;
        const S mx = sc.maxCoeff();
        sc = (sc.array() - mx).exp();
        sc /= sc.sum();
        o.segment(h * dh, dh) = sc * v_[l].block(0, h * dh, len_ + 1, dh);
      }
      x += o * m_.mat(P.wo, d, d) + m_.row(P.bo, d);
      detail::layer_norm<S>(x, m_.row(P.ln2_g, d), m_.row(P.ln2_b, d), xhat, rstd, a);
      RowV<S> h1 = a * m_.mat(P.w1, d, F) + m_.row(P.b1, F);
      h1 = h1.unaryExpr([](S v) { return detail::gelu(v); });
      x += h1 * m_.mat(P.w2, F, d) + m_.row(P.b2, d);
    }
    ++len_;
    if (!want_logits) return std::nullopt;
    detail::layer_norm<S>(x, m_.row(L.lnf_g, d), m_.row(L.lnf_b, d), xhat, rstd, a);
    if (cfg.tied) return RowV<S>(a * m_.mat(L.wout, cfg.vocab, d).transpose() + m_.row(L.bout, cfg.vocab));
    return RowV<S>(a * m_.mat(L.wout, d, cfg.vocab) + m_.row(L.bout, cfg.vocab));
  }

 private:
  const Model<S>& m_;
  std::vector<MatR<S>> k_, v_;
  int len_ = 0;
};

struct GenerateOptions {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// When set, only ids inside the region can be emitted.
  std::optional<Region> allowed;
};

/// Picks the next id from a logit row: greedy takes the lowest id among the
/// maxima; sampling draws from softmax(logits / temperature).
template <typename S>
int pick_token(const RowV<S>& logits, const GenerateOptions& opt, Rng& rng) {
  const int lo = opt.allowed ? std::max(0, opt.allowed->begin) : 0;
  const int hi = opt.allowed ? std::min(static_cast<int>(logits.size()), opt.allowed->end) : static_cast<int>(logits.size());
  if (lo >= hi) throw InvalidInput("generate: allowed region is empty");
  if (opt.greedy) {
    int best = lo;
    for (int i = lo + 1; i < hi; ++i)
      if (logits(i) > logits(best)) best = i;
    return best;
  }
  if (!(opt.temperature > 0.0)) throw InvalidInput("generate: temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = lo; i < hi; ++i) mx = std::max(mx, static_cast<double>(logits(i)));
  std::vector<double> p(static_cast<std::size_t>(hi - lo));
  double sum = 0.0;
  for (int i = lo; i < hi; ++i) sum += p[static_cast<std::size_t>(i - lo)] = std::exp((logits(i) - mx) / opt.temperature);
  double u = rng.uniform() * sum;
  for (int i = lo; i < hi; ++i) {
    u -= p[static_cast<std::size_t>(i - lo)];
    if (u < 0.0) return i;
  }
  return hi - 1;
}

/// Generates up to n tokens after `prefix`. `stop`, when given, is consulted
/// after every emitted token with the tokens emitted so far.
template <typename S>
std::vector<int> generate(const Model<S>& m, std::span<const int> prefix, int n, const GenerateOptions& opt = {},
                          const std::function<bool(const std::vector<int>&)>& stop = {}) {
  if (n < 0) throw InvalidInput("generate: n must be >= 0");
  if (static_cast<int>(prefix.size()) + n > m.config().maxlen)
    throw InvalidInput("generate: prefix plus " + std::to_string(n) + " new tokens exceeds maxlen " +
                       std::to_string(m.config().maxlen));
  std::vector<int> out;
  if (n == 0) return out;
  if (prefix.empty()) throw InvalidInput("generate: prefix must not be empty");
  Session<S> sess(m);
  Rng rng(opt.seed);
  std::optional<RowV<S>> logits;
  for (std::size_t i = 0; i < prefix.size(); ++i) logits = sess.feed(prefix[i], i + 1 == prefix.size());
  for (int k = 0; k < n; ++k) {
    const int tok = pick_token<S>(*logits, opt, rng);
    out.push_back(tok);
    if ((stop && stop(out)) || k + 1 == n) break;
    logits = sess.feed(tok, true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "KPCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  int stage = 0;
  std::int64_t steps = 0;
};

template <typename S>
void save_checkpoint(const std::string& path, const Model<S>& m, const CheckpointInfo& info) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  BinaryWriter w(out);
  const auto& c = m.config();
  w.raw(kCheckpointMagic, 5);
  w.u32(kCheckpointVersion);
  for (int v : {c.vocab, c.d_model, c.n_layers, c.n_heads, c.maxlen, c.ffn_mult, c.tied ? 1 : 0}) w.i32(v);
  w.i32(info.stage);
  w.pod(info.steps);
  w.vec(std::vector<double>(m.params().begin(), m.params().end()));
}

template <typename S>
Model<S> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open checkpoint " + path);
  BinaryReader r(in);
  r.expect_magic(kCheckpointMagic);
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw InvalidInput("unsupported checkpoint version " + std::to_string(v));
  ModelConfig c;
  c.vocab = r.i32();
  c.d_model = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.maxlen = r.i32();
  c.ffn_mult = r.i32();
  c.tied = r.i32() != 0;
  CheckpointInfo ci;
  ci.stage = r.i32();
  ci.steps = r.pod<std::int64_t>();
  auto params = r.vec<double>();
  Model<S> m(c);
  if (params.size() != m.params().size())
    throw InvalidInput("checkpoint payload has " + std::to_string(params.size()) + " values, config implies " +
                       std::to_string(m.params().size()));
  for (std::size_t i = 0; i < params.size(); ++i) m.params()[i] = static_cast<S>(params[i]);
  if (info) *info = ci;
  return m;
}

}  // namespace keyplan
