#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/parallel.hpp"
#include "clothret/search.hpp"

namespace clothret {

struct QeParams {
  std::size_t k = 10;
  double alpha = 0.0;  // 0 gives the plain average
  bool include_self = true;
};

struct RerankParams {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda = 0.3;
};

namespace detail {

inline void check_qe(const QeParams& p) {
  if (!(p.alpha >= 0.0) || !std::isfinite(p.alpha)) {
    throw Error(Errc::parameter, "query expansion: alpha must be a finite value >= 0");
  }
}

// normalize(w_self * x + sum_i max(cos_i, 0)^alpha * n_i)
inline std::vector<double> expand_row(std::span<const double> x, const EmbeddingMatrix& pool,
                                      const std::vector<std::pair<double, std::size_t>>& neighbors,
                                      const QeParams& p, const std::string& item_id) {
  std::vector<double> acc(x.size(), 0.0);
  if (p.include_self) {
    for (std::size_t c = 0; c < x.size(); ++c) acc[c] = x[c];
  }
  for (const auto& [cosine, row] : neighbors) {
    const double w = std::pow(std::max(cosine, 0.0), p.alpha);
    const auto n = pool.row(row);
    for (std::size_t c = 0; c < x.size(); ++c) acc[c] += w * n[c];
  }
  const double len = norm(acc);
  if (!(len > 0.0)) {
    throw Error(Errc::degenerate, "query expansion produced a zero vector for item '" + item_id + "'");
  }
  for (double& v : acc) v /= len;
  return acc;
}

}  // namespace detail

/// Replaces each query by the normalized weighted sum of itself and its top-k
/// gallery neighbors, weighting neighbor i by max(cos, 0)^alpha.
inline EmbeddingMatrix query_expansion(const EmbeddingMatrix& queries, const RetrievalIndex& index,
                                       const QeParams& params, std::size_t threads = 1) {
  detail::check_qe(params);
  if (queries.dim() != index.dim()) throw Error(Errc::dimension, "query_expansion: dimension mismatch");
  if (!is_unit_normalized(queries, 1e-5)) {
    throw Error(Errc::precondition, "query_expansion: queries must be unit-normalized");
  }
  if (params.k == 0 && params.include_self) return queries;

  std::vector<double> out(queries.rows() * queries.dim());
  parallel_for(queries.rows(), threads, [&](std::size_t q) {
    const auto neighbors = detail::top_rows(index, queries.row(q), params.k);
    const auto v = detail::expand_row(queries.row(q), index.gallery(), neighbors, params, queries.id(q).item_id);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(q * queries.dim()));
  });
  return EmbeddingMatrix(queries.dim(), std::move(out), queries.ids());
}

/// Database-side augmentation: the query expansion formula applied to every
/// gallery row, with neighbors drawn from the other gallery rows. The row's
/// own vector enters the sum only when include_self is set. All rows are
/// expanded from the original gallery, not from already augmented rows.
inline EmbeddingMatrix database_augmentation(const EmbeddingMatrix& gallery, const QeParams& params,
                                             std::size_t threads = 1) {
  detail::check_qe(params);
  const RetrievalIndex index(gallery, false);
  if (params.k == 0 && params.include_self) return gallery;

  std::vector<double> out(gallery.rows() * gallery.dim());
  parallel_for(gallery.rows(), threads, [&](std::size_t r) {
    const auto neighbors = detail::top_rows(index, gallery.row(r), params.k, std::nullopt, r);
    const auto v = detail::expand_row(gallery.row(r), gallery, neighbors, params, gallery.id(r).item_id);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(r * gallery.dim()));
  });
  return EmbeddingMatrix(gallery.dim(), std::move(out), gallery.ids());
}

/// k-reciprocal encoding over the joint set of queries and gallery rows.
///
/// Points are indexed queries first, then gallery. Pairwise distance is
/// d = 1 - cosine. Neighbor lists include the point itself at rank 0, so the
/// "top-k" list of a point holds k + 1 entries. Each point is encoded as a
/// sparse vector holding exp(-d) over its expanded reciprocal set, smoothed
/// by averaging over its k2 nearest points, and pairs are compared with the
/// generalized Jaccard distance.
class KReciprocalEncoder {
 public:
  using SparseVec = std::vector<std::pair<std::size_t, double>>;  // sorted by index

  KReciprocalEncoder(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery, const RerankParams& params,
                     std::size_t threads = 1)
      : queries_(queries), gallery_(gallery), params_(params) {
    if (params.k1 == 0 || params.k2 == 0) throw Error(Errc::parameter, "rerank: k1 and k2 must be positive");
    if (params.k2 > params.k1) throw Error(Errc::parameter, "rerank: k2 must not exceed k1");
    if (!(params.lambda >= 0.0 && params.lambda <= 1.0)) {
      throw Error(Errc::parameter, "rerank: lambda must lie in [0, 1]");
    }
    if (params.k1 > gallery.rows()) {
      throw Error(Errc::parameter, "rerank: k1 = " + std::to_string(params.k1) + " exceeds gallery size " +
                                       std::to_string(gallery.rows()));
    }
    if (!queries.empty() && queries.dim() != gallery.dim()) {
      throw Error(Errc::dimension, "rerank: query and gallery dimensions differ");
    }
    if (!is_unit_normalized(queries, 1e-5) || !is_unit_normalized(gallery, 1e-5)) {
      throw Error(Errc::precondition, "rerank: queries and gallery must be unit-normalized");
    }

    n_ = queries.rows() + gallery.rows();
    const std::size_t half = static_cast<std::size_t>(std::nearbyint(static_cast<double>(params.k1) / 2.0));
    const std::size_t list_len = std::min(n_, params.k1 + 1);

    dist_.assign(n_ * n_, 0.0);
    parallel_for(n_, threads, [&](std::size_t i) {
      for (std::size_t j = 0; j < n_; ++j) dist_[i * n_ + j] = i == j ? 0.0 : 1.0 - dot(point(i), point(j));
    });

    neighbors_.resize(n_);
    parallel_for(n_, threads, [&](std::size_t i) { neighbors_[i] = nearest(i, list_len); });

    std::vector<std::vector<std::size_t>> recip_k1(n_);
    std::vector<std::vector<std::size_t>> recip_half(n_);
    parallel_for(n_, threads, [&](std::size_t i) {
      recip_k1[i] = reciprocal(i, params.k1);
      recip_half[i] = reciprocal(i, half);
    });

    std::vector<SparseVec> encoded(n_);
    parallel_for(n_, threads, [&](std::size_t p) {
      std::vector<std::size_t> expanded = recip_k1[p];
      for (const std::size_t c : recip_k1[p]) {
        const auto& rc = recip_half[c];
        std::size_t shared = 0;
        for (const std::size_t x : rc) {
          if (std::binary_search(recip_k1[p].begin(), recip_k1[p].end(), x)) ++shared;
        }
        if (3 * shared >= 2 * rc.size()) expanded.insert(expanded.end(), rc.begin(), rc.end());
      }
      std::sort(expanded.begin(), expanded.end());
      expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
      SparseVec v;
      v.reserve(expanded.size());
      for (const std::size_t g : expanded) v.emplace_back(g, std::exp(-distance(p, g)));
      encoded[p] = std::move(v);
    });

    encoded_.resize(n_);
    parallel_for(n_, threads, [&](std::size_t p) {
      const std::size_t take = std::min(params.k2, neighbors_[p].size());
      if (take <= 1) {
        encoded_[p] = encoded[p];
        return;
      }
      std::unordered_map<std::size_t, double> acc;
      for (std::size_t t = 0; t < take; ++t) {
        for (const auto& [idx, w] : encoded[neighbors_[p][t]]) acc[idx] += w;
      }
      SparseVec v(acc.begin(), acc.end());
      std::sort(v.begin(), v.end());
      for (auto& e : v) e.second /= static_cast<double>(take);
      encoded_[p] = std::move(v);
    });
  }

  std::size_t num_points() const { return n_; }

  /// Point index of a query row / gallery row.
  std::size_t query_point(std::size_t q) const { return q; }
  std::size_t gallery_point(std::size_t g) const { return queries_.rows() + g; }

  double distance(std::size_t a, std::size_t b) const { return dist_[a * n_ + b]; }

  /// Neighbor list of a point (itself first), k1 + 1 entries long.
  const std::vector<std::size_t>& neighbors(std::size_t p) const { return neighbors_[p]; }

  const SparseVec& encoding(std::size_t p) const { return encoded_[p]; }

  double jaccard(std::size_t a, std::size_t b) const {
    const auto& va = encoded_[a];
    const auto& vb = encoded_[b];
    double num = 0.0;
    double den = 0.0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < va.size() || j < vb.size()) {
      if (j == vb.size() || (i < va.size() && va[i].first < vb[j].first)) {
        den += va[i++].second;
      } else if (i == va.size() || vb[j].first < va[i].first) {
        den += vb[j++].second;
      } else {
        num += std::min(va[i].second, vb[j].second);
        den += std::max(va[i].second, vb[j].second);
        ++i;
        ++j;
      }
    }
    return den > 0.0 ? 1.0 - num / den : 1.0;
  }

  /// Final distance (1 - lambda) * jaccard + lambda * (1 - cosine) between a
  /// query row and a gallery row.
  double final_distance(std::size_t q, std::size_t g) const {
    const double original = 1.0 - dot(queries_.row(q), gallery_.row(g));
    return (1.0 - params_.lambda) * jaccard(query_point(q), gallery_point(g)) + params_.lambda * original;
  }

 private:
  std::span<const double> point(std::size_t i) const {
    return i < queries_.rows() ? queries_.row(i) : gallery_.row(i - queries_.rows());
  }

  // The `count` closest points to i: ascending distance, i itself first,
  // then ascending point index.
  std::vector<std::size_t> nearest(std::size_t i, std::size_t count) const {
    std::vector<std::size_t> idx(n_);
    for (std::size_t j = 0; j < n_; ++j) idx[j] = j;
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = distance(i, a);
                        const double db = distance(i, b);
                        if (da != db) return da < db;
                        if ((a == i) != (b == i)) return a == i;
                        return a < b;
                      });
    idx.resize(count);
    return idx;
  }

  // Sorted reciprocal set: members of p's top-k list whose own top-k list
  // contains p.
  std::vector<std::size_t> reciprocal(std::size_t p, std::size_t k) const {
    const std::size_t len = std::min(k + 1, neighbors_[p].size());
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t c = neighbors_[p][t];
      const auto& back = neighbors_[c];
      const auto end = back.begin() + static_cast<std::ptrdiff_t>(std::min(k + 1, back.size()));
      if (std::find(back.begin(), end, p) != end) out.push_back(c);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  const EmbeddingMatrix& queries_;
  const EmbeddingMatrix& gallery_;
  RerankParams params_;
  std::size_t n_ = 0;
  std::vector<double> dist_;
  std::vector<std::vector<std::size_t>> neighbors_;
  std::vector<SparseVec> encoded_;
};

/// Re-orders every initial ranking by the k-reciprocal final distance. The
/// candidate set of each query is its initial list; entries are sorted by
/// ascending distance, then descending original cosine, then item id, and
/// scored 1 - distance.
inline std::vector<RankingList> k_reciprocal_rerank(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                                                    const std::vector<RankingList>& initial,
                                                    const RerankParams& params, std::size_t threads = 1) {
  std::unordered_map<std::string, std::size_t> query_row;
  for (std::size_t q = 0; q < queries.rows(); ++q) query_row.emplace(queries.id(q).item_id, q);
  std::unordered_map<std::string, std::size_t> gallery_row;
  for (std::size_t g = 0; g < gallery.rows(); ++g) gallery_row.emplace(gallery.id(g).item_id, g);

  for (const auto& list : initial) {
    if (!query_row.contains(list.query_id)) {
      throw Error(Errc::input, "rerank: ranking for unknown query '" + list.query_id + "'");
    }
    if (list.entries.size() < params.k1) {
      throw Error(Errc::precondition, "rerank: ranking of query '" + list.query_id + "' has " +
                                          std::to_string(list.entries.size()) + " entries, k1 = " +
                                          std::to_string(params.k1) + " required");
    }
    for (const auto& e : list.entries) {
      if (!gallery_row.contains(e.item_id)) {
        throw Error(Errc::input, "rerank: ranking references unknown gallery item '" + e.item_id + "'");
      }
    }
  }

  const KReciprocalEncoder encoder(queries, gallery, params, threads);

  std::vector<RankingList> out(initial.size());
  parallel_for(initial.size(), threads, [&](std::size_t i) {
    const auto& list = initial[i];
    const std::size_t q = query_row.at(list.query_id);
    struct Scored {
      double distance;
      double cosine;
      const std::string* id;
    };
    std::vector<Scored> scored;
    scored.reserve(list.entries.size());
    for (const auto& e : list.entries) {
      const std::size_t g = gallery_row.at(e.item_id);
      scored.push_back({encoder.final_distance(q, g), dot(queries.row(q), gallery.row(g)), &e.item_id});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      if (a.distance != b.distance) return a.distance < b.distance;
      if (a.cosine != b.cosine) return a.cosine > b.cosine;
      return *a.id < *b.id;
    });
    out[i].query_id = list.query_id;
    out[i].entries.reserve(scored.size());
    for (const auto& s : scored) out[i].entries.push_back({*s.id, 1.0 - s.distance});
  });
  return out;
}

}  // namespace clothret
