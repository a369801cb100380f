#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/parallel.hpp"

namespace clothret {

struct RankingEntry {
  std::string item_id;
  double score = 0.0;

  friend bool operator==(const RankingEntry&, const RankingEntry&) = default;
};

/// Ranked gallery items for one query, best first.
struct RankingList {
  std::string query_id;
  std::vector<RankingEntry> entries;

  friend bool operator==(const RankingList&, const RankingList&) = default;
};

/// Total order used for every ranking in the library: higher score first,
/// equal scores by ascending item id.
inline bool ranks_before(double score_a, const std::string& id_a, double score_b, const std::string& id_b) {
  if (score_a != score_b) return score_a > score_b;
  return id_a < id_b;
}

/// Immutable gallery snapshot for exact cosine search. Copies share the
/// underlying matrix.
class RetrievalIndex {
 public:
  RetrievalIndex(EmbeddingMatrix gallery, bool partition_by_category)
      : gallery_(std::make_shared<const EmbeddingMatrix>(std::move(gallery))) {
    if (gallery_->empty()) throw Error(Errc::precondition, "build_index: gallery is empty");
    if (!is_unit_normalized(*gallery_, 1e-5)) {
      throw Error(Errc::precondition, "build_index: gallery rows must be unit-normalized");
    }
    if (partition_by_category) {
      std::map<int, std::vector<std::size_t>> parts;
      for (std::size_t r = 0; r < gallery_->rows(); ++r) parts[gallery_->id(r).category_id].push_back(r);
      partition_ = std::move(parts);
    }
  }

  const EmbeddingMatrix& gallery() const { return *gallery_; }
  std::size_t size() const { return gallery_->rows(); }
  std::size_t dim() const { return gallery_->dim(); }
  bool partitioned() const { return partition_.has_value(); }

  /// Gallery rows grouped by category; empty when not partitioned.
  const std::map<int, std::vector<std::size_t>>& partition() const {
    static const std::map<int, std::vector<std::size_t>> none;
    return partition_ ? *partition_ : none;
  }

 private:
  std::shared_ptr<const EmbeddingMatrix> gallery_;
  std::optional<std::map<int, std::vector<std::size_t>>> partition_;
};

inline RetrievalIndex build_index(EmbeddingMatrix gallery, bool partition_by_category = false) {
  return RetrievalIndex(std::move(gallery), partition_by_category);
}

namespace detail {

/// (cosine, gallery row) pairs of the best `k` candidates, best first.
/// `category` limits candidates to one category; `exclude_row` drops a row.
inline std::vector<std::pair<double, std::size_t>> top_rows(const RetrievalIndex& index,
                                                            std::span<const double> query, std::size_t k,
                                                            std::optional<int> category = std::nullopt,
                                                            std::optional<std::size_t> exclude_row = std::nullopt) {
  const auto& gallery = index.gallery();
  std::vector<std::pair<double, std::size_t>> scored;
  auto consider = [&](std::size_t r) {
    if (exclude_row && *exclude_row == r) return;
    scored.emplace_back(dot(query, gallery.row(r)), r);
  };
  if (category && index.partitioned()) {
    const auto it = index.partition().find(*category);
    if (it != index.partition().end()) {
      scored.reserve(it->second.size());
      for (const std::size_t r : it->second) consider(r);
    }
  } else {
    scored.reserve(gallery.rows());
    for (std::size_t r = 0; r < gallery.rows(); ++r) {
      if (!category || gallery.id(r).category_id == *category) consider(r);
    }
  }

  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [&](const auto& a, const auto& b) {
                      return ranks_before(a.first, gallery.id(a.second).item_id, b.first,
                                          gallery.id(b.second).item_id);
                    });
  scored.resize(keep);
  return scored;
}

inline RankingList search_one(const RetrievalIndex& index, std::span<const double> query, const ItemRecord& qid,
                              std::size_t k, bool restrict_to_category) {
  const auto top = top_rows(index, query, k, restrict_to_category ? std::optional<int>(qid.category_id) : std::nullopt);
  RankingList out{qid.item_id, {}};
  out.entries.reserve(top.size());
  for (const auto& [score, row] : top) out.entries.push_back({index.gallery().id(row).item_id, score});
  return out;
}

}  // namespace detail

/// Exact top-K cosine search. Rankings come back in query row order and are
/// identical for any thread count. With `restrict_to_query_category` only
/// gallery rows of the query's category are candidates; a query with no
/// candidates yields an empty list.
inline std::vector<RankingList> knn_search(const RetrievalIndex& index, const EmbeddingMatrix& queries, std::size_t k,
                                           bool restrict_to_query_category = false, std::size_t threads = 1) {
  if (k == 0) throw Error(Errc::parameter, "knn_search: K must be at least 1");
  if (!queries.empty() && queries.dim() != index.dim()) {
    throw Error(Errc::dimension, "knn_search: query dim " + std::to_string(queries.dim()) + " != gallery dim " +
                                     std::to_string(index.dim()));
  }
  std::vector<RankingList> out(queries.rows());
  parallel_for(queries.rows(), threads, [&](std::size_t q) {
    out[q] = detail::search_one(index, queries.row(q), queries.id(q), k, restrict_to_query_category);
  });
  return out;
}

}  // namespace clothret
