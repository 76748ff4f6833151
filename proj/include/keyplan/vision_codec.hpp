#pragma once

// Patch codebook image tokenizer: each 8x8 patch maps to its nearest
// prototype, row-major over the patch grid.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "keyplan/binary_io.hpp"
#include "keyplan/common.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan {

class VisionCodec {
 public:
  VisionCodec() = default;
  VisionCodec(int patch, int k, std::vector<double> codebook)
      : patch_(patch), k_(k), codebook_(std::move(codebook)) {
    if (codebook_.size() != static_cast<std::size_t>(k_) * dim())
      throw InvalidInput("vision codebook size does not match K * patch^2");
  }

  int patch() const { return patch_; }
  int k() const { return k_; }
  int dim() const { return patch_ * patch_; }
  const std::vector<double>& codebook() const { return codebook_; }
  std::span<const double> prototype(int i) const {
    return {codebook_.data() + static_cast<std::size_t>(i) * dim(), static_cast<std::size_t>(dim())};
  }

  int tokens_per_image(int height, int width) const { return (height / patch_) * (width / patch_); }

  void check_dims(const Image& img) const {
    if (img.height <= 0 || img.width <= 0 || img.height % patch_ != 0 || img.width % patch_ != 0)
      throw InvalidInput("image dimensions " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " are not multiples of the patch size " + std::to_string(patch_));
  }

  int nearest(std::span<const double> v) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k_; ++i) {
      auto p = prototype(i);
      double d = 0.0;
      // Partial sums only grow, so abandoning once d >= best_d never changes the winner.
      for (int j = 0; j < dim() && d < best_d; ++j) d += (v[j] - p[j]) * (v[j] - p[j]);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

  /// Local ids in [0, K).
  std::vector<int> encode(const Image& img) const {
    check_dims(img);
    std::vector<int> out;
    std::vector<double> v(static_cast<std::size_t>(dim()));
    for (int pr = 0; pr < img.height / patch_; ++pr)
      for (int pc = 0; pc < img.width / patch_; ++pc) {
        for (int r = 0; r < patch_; ++r)
          for (int c = 0; c < patch_; ++c) v[r * patch_ + c] = img.at(pr * patch_ + r, pc * patch_ + c);
        out.push_back(nearest(v));
      }
    return out;
  }

  Image decode(std::span<const int> tokens, int height, int width) const {
    Image img(height, width);
    check_dims(img);
    if (static_cast<int>(tokens.size()) != tokens_per_image(height, width))
      throw InvalidInput("vision token count does not match image dimensions");
    std::size_t i = 0;
    for (int pr = 0; pr < height / patch_; ++pr)
      for (int pc = 0; pc < width / patch_; ++pc, ++i) {
        if (tokens[i] < 0 || tokens[i] >= k_) throw InvalidInput("vision token out of range");
        auto p = prototype(tokens[i]);
        for (int r = 0; r < patch_; ++r)
          for (int c = 0; c < patch_; ++c)
            img.at(pr * patch_ + r, pc * patch_ + c) =
                static_cast<std::uint8_t>(std::clamp(std::lround(p[r * patch_ + c]), 0L, 255L));
      }
    return img;
  }

  void save(BinaryWriter& w) const {
    w.i32(patch_);
    w.i32(k_);
    w.vec(codebook_);
  }
  static VisionCodec load(BinaryReader& r) {
    const int patch = r.i32();
    const int k = r.i32();
    return VisionCodec(patch, k, r.vec<double>());
  }

 private:
  int patch_ = kPatch;
  int k_ = 0;
  std::vector<double> codebook_;
};

/// Weighted k-means over the distinct patches of the sample, k-means++
/// seeding, fixed iteration count. Empty clusters are re-seeded from the
/// point currently farthest from its center.
inline VisionCodec fit_vision_codebook(std::span<const Image> images, int k, std::uint64_t seed, int iterations = 15,
                                       int patch = kPatch) {
  if (k < 1) throw InvalidInput("fit_vision_codebook: K must be >= 1");
  const int dim = patch * patch;
  std::map<std::vector<std::uint8_t>, double> counts;
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(dim));
  for (const auto& img : images) {
    if (img.height % patch != 0 || img.width % patch != 0)
      throw InvalidInput("fit_vision_codebook: image dimensions not divisible by patch size");
    for (int pr = 0; pr < img.height / patch; ++pr)
      for (int pc = 0; pc < img.width / patch; ++pc) {
        for (int r = 0; r < patch; ++r)
          for (int c = 0; c < patch; ++c) buf[r * patch + c] = img.at(pr * patch + r, pc * patch + c);
        counts[buf] += 1.0;
      }
  }
  const auto n = static_cast<Eigen::Index>(counts.size());
  if (n < k)
    throw InvalidInput("fit_vision_codebook: K = " + std::to_string(k) + " exceeds the " + std::to_string(n) +
                       " distinct patches in the sample");

  Eigen::MatrixXd X(n, dim);
  Eigen::VectorXd wgt(n);
  {
    Eigen::Index i = 0;
    for (const auto& [p, c] : counts) {
      for (int j = 0; j < dim; ++j) X(i, j) = p[static_cast<std::size_t>(j)];
      wgt(i) = c;
      ++i;
    }
  }
  const Eigen::VectorXd xnorm = X.rowwise().squaredNorm();
  Rng rng(seed);

  auto weighted_pick = [&](const Eigen::VectorXd& score) {
    const double total = score.sum();
    if (!(total > 0.0)) return static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    double u = rng.uniform() * total;
    for (Eigen::Index i = 0; i < n; ++i) {
      u -= score(i);
      if (u < 0.0) return i;
    }
    for (Eigen::Index i = n - 1; i >= 0; --i)
      if (score(i) > 0.0) return i;
    return n - 1;
  };

  Eigen::MatrixXd C(k, dim);
  Eigen::VectorXd dmin = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = weighted_pick(wgt);
  C.row(0) = X.row(first);
  for (int c = 1; c < k; ++c) {
    dmin = dmin.cwiseMin((X.rowwise() - C.row(c - 1)).rowwise().squaredNorm());
    C.row(c) = X.row(weighted_pick(dmin.cwiseProduct(wgt)));
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  Eigen::VectorXd dist(n);
  for (int it = 0; it < iterations; ++it) {
    const Eigen::VectorXd cnorm = C.rowwise().squaredNorm();
    const Eigen::MatrixXd cross = X * C.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = xnorm(i) - 2.0 * cross(i, c) + cnorm(c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = best;
      dist(i) = std::max(bd, 0.0);
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += wgt(i) * X.row(i);
      mass(assign[static_cast<std::size_t>(i)]) += wgt(i);
    }
    for (int c = 0; c < k; ++c) {
      if (mass(c) > 0.0) {
        C.row(c) = sums.row(c) / mass(c);
        continue;
      }
      Eigen::Index far = 0;
      dist.maxCoeff(&far);
      C.row(c) = X.row(far);
      dist(far) = 0.0;
    }
  }

  std::vector<double> book(static_cast<std::size_t>(k) * dim);
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < dim; ++j) book[static_cast<std::size_t>(c) * dim + j] = C(c, j);
  return VisionCodec(patch, k, std::move(book));
}

}  // namespace keyplan
