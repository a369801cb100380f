#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "clothret/error.hpp"
#include "clothret/parallel.hpp"

namespace clothret {

enum class Source { query, gallery };

inline const char* to_string(Source s) { return s == Source::query ? "query" : "gallery"; }

/// Binds one matrix row to a retrieval item.
struct ItemRecord {
  std::string item_id;
  std::string image_id;
  std::string box_id;
  int category_id = 1;
  Source source = Source::gallery;

  friend bool operator==(const ItemRecord&, const ItemRecord&) = default;
};

using IdMap = std::vector<ItemRecord>;

/// Dense row-major N x D feature matrix with one ItemRecord per row.
/// Immutable once built; all transforms return a new matrix.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t dim, std::vector<double> data, IdMap ids)
      : dim_(dim), data_(std::move(data)), ids_(std::move(ids)) {
    if (dim_ == 0) throw Error(Errc::dimension, "embedding dimension must be positive");
    if (data_.size() != ids_.size() * dim_) {
      throw Error(Errc::count_mismatch, "embedding payload holds " + std::to_string(data_.size()) +
                                            " values for " + std::to_string(ids_.size()) + " rows of dim " +
                                            std::to_string(dim_));
    }
    std::unordered_set<std::string> seen;
    for (std::size_t r = 0; r < ids_.size(); ++r) {
      if (!seen.insert(ids_[r].item_id).second) {
        throw Error(Errc::data, "duplicate item_id '" + ids_[r].item_id + "'");
      }
      for (const double v : row(r)) {
        if (!std::isfinite(v)) {
          throw Error(Errc::data, "non-finite value in row of item '" + ids_[r].item_id + "'");
        }
      }
    }
  }

  std::size_t rows() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return ids_.empty(); }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * dim_, dim_);
  }

  const ItemRecord& id(std::size_t r) const { return ids_[r]; }
  const IdMap& ids() const { return ids_; }
  const std::vector<double>& data() const { return data_; }

  /// Rows whose source matches, in original order.
  EmbeddingMatrix select(Source source) const {
    std::vector<double> data;
    IdMap ids;
    for (std::size_t r = 0; r < rows(); ++r) {
      if (ids_[r].source != source) continue;
      data.insert(data.end(), row(r).begin(), row(r).end());
      ids.push_back(ids_[r]);
    }
    return EmbeddingMatrix(dim_, std::move(data), std::move(ids));
  }

  /// Rows at the given indices, in the given order.
  EmbeddingMatrix select(std::span<const std::size_t> rows_to_keep) const {
    std::vector<double> data;
    IdMap ids;
    data.reserve(rows_to_keep.size() * dim_);
    for (const std::size_t r : rows_to_keep) {
      data.insert(data.end(), row(r).begin(), row(r).end());
      ids.push_back(ids_[r]);
    }
    return EmbeddingMatrix(dim_, std::move(data), std::move(ids));
  }

 private:
  std::size_t dim_ = 1;
  std::vector<double> data_;
  IdMap ids_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// True when every row has unit L2 norm within `tol`.
inline bool is_unit_normalized(const EmbeddingMatrix& m, double tol = 1e-5) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(norm(m.row(r)) - 1.0) > tol) return false;
  }
  return true;
}

inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  std::vector<double> out(m.data());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = norm(m.row(r));
    if (!(n > 0.0)) {
      throw Error(Errc::degenerate, "cannot normalize zero-norm row of item '" + m.id(r).item_id + "'");
    }
    for (std::size_t c = 0; c < m.dim(); ++c) out[r * m.dim() + c] /= n;
  }
  return EmbeddingMatrix(m.dim(), std::move(out), m.ids());
}

/// Concatenates per-model embeddings of the same items along the feature
/// axis. Every part must carry the same IdMap in the same order and be
/// L2-normalized. With `renormalize` the joined rows are rescaled to unit
/// norm, which makes the joined cosine the mean of the per-part cosines.
inline EmbeddingMatrix concat_features(const std::vector<EmbeddingMatrix>& parts, bool renormalize = true) {
  if (parts.empty()) throw Error(Errc::precondition, "concat_features needs at least one part");
  const auto& ref = parts.front();
  std::size_t total_dim = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& part = parts[p];
    if (part.rows() != ref.rows()) {
      throw Error(Errc::alignment, "part " + std::to_string(p) + " has " + std::to_string(part.rows()) +
                                       " rows, part 0 has " + std::to_string(ref.rows()));
    }
    for (std::size_t r = 0; r < ref.rows(); ++r) {
      if (!(part.id(r) == ref.id(r))) {
        throw Error(Errc::alignment, "part " + std::to_string(p) + " diverges at row " + std::to_string(r) +
                                         ": item '" + part.id(r).item_id + "' vs '" + ref.id(r).item_id + "'");
      }
    }
    if (!is_unit_normalized(part, 1e-6)) {
      throw Error(Errc::precondition, "part " + std::to_string(p) + " is not L2-normalized");
    }
    total_dim += part.dim();
  }

  std::vector<double> out;
  out.reserve(ref.rows() * total_dim);
  for (std::size_t r = 0; r < ref.rows(); ++r) {
    for (const auto& part : parts) {
      const auto row = part.row(r);
      out.insert(out.end(), row.begin(), row.end());
    }
  }
  EmbeddingMatrix joined(total_dim, std::move(out), ref.ids());
  return renormalize ? l2_normalize(joined) : joined;
}

/// Principal component model: rows of `components` are orthonormal
/// eigenvectors of the training covariance, strongest first.
struct PcaModel {
  std::vector<double> mean;
  std::vector<double> components;  // out_dim x in_dim, row-major
  std::vector<double> eigenvalues;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  bool whiten = false;
  double epsilon = 1e-8;

  std::span<const double> component(std::size_t k) const {
    return std::span<const double>(components).subspan(k * in_dim, in_dim);
  }
};

/// Fits PCA on the rows of `m` via the eigendecomposition of the sample
/// covariance (divisor N - 1). Each component is sign-fixed so that its entry
/// of largest magnitude is positive.
inline PcaModel pca_fit(const EmbeddingMatrix& m, std::size_t out_dim, bool whiten, double epsilon = 1e-8) {
  const std::size_t n = m.rows();
  const std::size_t d = m.dim();
  if (n < 2) throw Error(Errc::precondition, "pca_fit needs at least two rows");
  if (out_dim == 0 || out_dim > d) {
    throw Error(Errc::parameter, "pca_fit: out_dim must be in [1, " + std::to_string(d) + "]");
  }
  if (n < out_dim) throw Error(Errc::precondition, "pca_fit: fewer rows than requested components");
  if (!(epsilon > 0.0)) throw Error(Errc::parameter, "pca_fit: epsilon must be positive");

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMatrix> x(m.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const RowMatrix centered = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw Error(Errc::data, "pca_fit: covariance eigendecomposition failed");
  }

  PcaModel model;
  model.in_dim = d;
  model.out_dim = out_dim;
  model.whiten = whiten;
  model.epsilon = epsilon;
  model.mean.assign(mu.data(), mu.data() + d);
  model.components.resize(out_dim * d);
  model.eigenvalues.resize(out_dim);

  // Eigen sorts ascending; walk from the back.
  for (std::size_t k = 0; k < out_dim; ++k) {
    const auto src = static_cast<Eigen::Index>(d - 1 - k);
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v(pivot) < 0.0) v = -v;
    std::copy(v.data(), v.data() + d, model.components.begin() + static_cast<std::ptrdiff_t>(k * d));

    double lambda = solver.eigenvalues()(src);
    if (lambda < epsilon) {
      spdlog::warn("pca_fit: component {} has eigenvalue {:.3g} below epsilon, flooring to {:.3g}", k, lambda,
                   epsilon);
      lambda = epsilon;
    }
    model.eigenvalues[k] = lambda;
  }
  return model;
}

/// Projects rows onto the model components: (x - mean) * components^T, then
/// with whitening each output dimension is divided by sqrt(eigenvalue + eps).
inline EmbeddingMatrix pca_transform(const PcaModel& model, const EmbeddingMatrix& m, std::size_t threads = 1) {
  if (m.dim() != model.in_dim) {
    throw Error(Errc::dimension, "pca_transform: input dim " + std::to_string(m.dim()) + " != model dim " +
                                     std::to_string(model.in_dim));
  }
  std::vector<double> out(m.rows() * model.out_dim);
  parallel_for(m.rows(), threads, [&](std::size_t r) {
    std::vector<double> centered(model.in_dim);
    const auto row = m.row(r);
    for (std::size_t c = 0; c < model.in_dim; ++c) centered[c] = row[c] - model.mean[c];
    for (std::size_t k = 0; k < model.out_dim; ++k) {
      double v = dot(centered, model.component(k));
      if (model.whiten) v /= std::sqrt(model.eigenvalues[k] + model.epsilon);
      out[r * model.out_dim + k] = v;
    }
  });
  return EmbeddingMatrix(model.out_dim, std::move(out), m.ids());
}

/// Maps projected rows back to the input space (y * components + mean),
/// undoing the whitening scale first when the model whitens.
inline EmbeddingMatrix pca_inverse_transform(const PcaModel& model, const EmbeddingMatrix& m) {
  if (m.dim() != model.out_dim) {
    throw Error(Errc::dimension, "pca_inverse_transform: input dim does not match model output dim");
  }
  std::vector<double> out(m.rows() * model.in_dim);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < model.in_dim; ++c) out[r * model.in_dim + c] = model.mean[c];
    for (std::size_t k = 0; k < model.out_dim; ++k) {
      double y = row[k];
      if (model.whiten) y *= std::sqrt(model.eigenvalues[k] + model.epsilon);
      const auto comp = model.component(k);
      for (std::size_t c = 0; c < model.in_dim; ++c) out[r * model.in_dim + c] += y * comp[c];
    }
  }
  return EmbeddingMatrix(model.in_dim, std::move(out), m.ids());
}

}  // namespace clothret
