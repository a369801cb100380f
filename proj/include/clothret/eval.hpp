#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "clothret/boxes.hpp"
#include "clothret/error.hpp"
#include "clothret/search.hpp"

namespace clothret {

struct GtBox {
  BoundingBox box;
  int category_id = 1;
};

/// image_id -> ground-truth boxes of that image.
using GroundTruthDet = std::map<std::string, std::vector<GtBox>>;

/// query item_id -> matching gallery item_ids.
using GroundTruthRet = std::map<std::string, std::set<std::string>>;

/// The ten COCO-style thresholds 0.50, 0.55, ..., 0.95.
inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct CategoryAp {
  std::size_t num_gt = 0;
  std::size_t num_pred = 0;
  std::vector<double> ap_per_threshold;  // aligned with DetectionReport::iou_thresholds
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
};

struct DetectionReport {
  std::vector<double> iou_thresholds;
  double ap = 0.0;    // category mean of the mean over thresholds
  double ap50 = 0.0;  // category mean at IoU 0.5
  double ap75 = 0.0;  // category mean at IoU 0.75
  std::map<int, CategoryAp> per_category;
  // Matching counts at IoU 0.5 (or the lowest threshold when 0.5 is absent).
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t num_gt = 0;
};

struct RetrievalReport {
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> acc;
  std::size_t num_queries = 0;   // queries that were scored
  std::size_t num_excluded = 0;  // queries without a usable match set
  std::vector<std::string> excluded;
  /// Scored queries none of whose matches exist in the gallery.
  std::vector<std::string> unreachable;
  /// Per scored query: 1-based rank of the first hit, 0 when there is none.
  std::map<std::string, std::size_t> first_hit_rank;

  bool hit(const std::string& query_id, std::size_t k) const {
    const auto r = first_hit_rank.at(query_id);
    return r != 0 && r <= k;
  }
};

struct EvalReport {
  std::optional<DetectionReport> detection;
  std::optional<RetrievalReport> retrieval;
};

namespace detail {

// 101-point interpolated AP from TP flags in score order. The integer test
// tp * 100 >= i * num_gt is recall >= i / 100 without rounding.
inline double interpolated_ap(const std::vector<bool>& tp_flags, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n);
  std::vector<std::size_t> tp_cum(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp_flags[i]) ++tp;
    tp_cum[i] = tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Precision envelope: max precision at this or any later rank.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    while (pos < n && tp_cum[pos] * 100 < r * num_gt) ++pos;
    if (pos < n) sum += precision[pos];
  }
  return sum / 101.0;
}

// Content-based total order so results do not depend on input order.
inline bool prediction_before(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image_id, a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.model_id) <
         std::tie(b.image_id, b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.model_id);
}

// Greedy matching of score-ordered predictions of one category; each takes the
// unmatched ground-truth box of highest IoU >= threshold in its image.
inline std::vector<bool> match_category(const std::vector<const ScoredBox*>& preds, const GroundTruthDet& gt,
                                        int category, double threshold) {
  std::map<std::string, std::vector<bool>> used;
  std::vector<bool> flags(preds.size(), false);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const ScoredBox& p = *preds[i];
    const auto it = gt.find(p.image_id);
    if (it == gt.end()) continue;
    auto& taken = used[p.image_id];
    taken.resize(it->second.size(), false);
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < it->second.size(); ++j) {
      const GtBox& g = it->second[j];
      if (g.category_id != category || taken[j]) continue;
      const double o = iou(p.box, g.box);
      if (o >= threshold && o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= 0.0) {
      taken[best_j] = true;
      flags[i] = true;
    }
  }
  return flags;
}

}  // namespace detail

/// COCO-style detection AP. Every category that appears in the ground truth
/// or the predictions is scored; a category with predictions but no ground
/// truth scores 0. AP is the category mean of the per-category mean over
/// `iou_thresholds`; AP50 / AP75 are read at 0.5 / 0.75 when present.
inline DetectionReport detection_ap(const std::vector<ScoredBox>& preds, const GroundTruthDet& gt,
                                    std::vector<double> iou_thresholds = coco_iou_thresholds()) {
  if (iou_thresholds.empty()) throw Error(Errc::parameter, "detection_ap: no IoU thresholds");
  for (const double t : iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw Error(Errc::parameter, "detection_ap: IoU thresholds must lie in (0, 1]");
  }

  std::map<int, std::vector<const ScoredBox*>> by_category;
  std::map<int, std::size_t> gt_count;
  for (const auto& [image, boxes] : gt) {
    for (const auto& g : boxes) {
      ++gt_count[g.category_id];
      by_category[g.category_id];
    }
  }
  for (const auto& p : preds) by_category[p.category_id].push_back(&p);

  auto index_of = [&](double target) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
      if (std::abs(iou_thresholds[i] - target) < 1e-9) return i;
    }
    return std::nullopt;
  };
  const auto i50 = index_of(0.5);
  const auto i75 = index_of(0.75);
  const std::size_t count_idx =
      i50 ? *i50
          : static_cast<std::size_t>(std::min_element(iou_thresholds.begin(), iou_thresholds.end()) -
                                     iou_thresholds.begin());

  DetectionReport report;
  report.iou_thresholds = iou_thresholds;
  for (auto& [category, list] : by_category) {
    std::sort(list.begin(), list.end(),
              [](const ScoredBox* a, const ScoredBox* b) { return detail::prediction_before(*a, *b); });
    CategoryAp cat;
    cat.num_gt = gt_count.count(category) ? gt_count.at(category) : 0;
    cat.num_pred = list.size();
    for (std::size_t t = 0; t < iou_thresholds.size(); ++t) {
      const auto flags = detail::match_category(list, gt, category, iou_thresholds[t]);
      cat.ap_per_threshold.push_back(detail::interpolated_ap(flags, cat.num_gt));
      if (t == count_idx) {
        const auto tp = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
        report.tp += tp;
        report.fp += flags.size() - tp;
        report.fn += cat.num_gt - tp;
      }
    }
    cat.ap = std::accumulate(cat.ap_per_threshold.begin(), cat.ap_per_threshold.end(), 0.0) /
             static_cast<double>(iou_thresholds.size());
    cat.ap50 = i50 ? cat.ap_per_threshold[*i50] : 0.0;
    cat.ap75 = i75 ? cat.ap_per_threshold[*i75] : 0.0;
    report.num_gt += cat.num_gt;
    report.per_category.emplace(category, std::move(cat));
  }

  if (!report.per_category.empty()) {
    const double n = static_cast<double>(report.per_category.size());
    for (const auto& [category, cat] : report.per_category) {
      report.ap += cat.ap / n;
      report.ap50 += cat.ap50 / n;
      report.ap75 += cat.ap75 / n;
    }
  }
  return report;
}

/// Top-K retrieval accuracy. A query is scored when the ground truth gives it
/// a non-empty match set; other queries are excluded and listed. When
/// `gallery_ids` is given, scored queries with no match in the gallery are
/// flagged as unreachable (they still count as misses).
inline RetrievalReport acc_at_k(const std::vector<RankingList>& rankings, const GroundTruthRet& gt,
                                std::vector<std::size_t> ks,
                                const std::unordered_set<std::string>* gallery_ids = nullptr) {
  if (ks.empty()) throw Error(Errc::parameter, "acc_at_k: no K values requested");
  for (const auto k : ks) {
    if (k == 0) throw Error(Errc::parameter, "acc_at_k: K must be at least 1");
  }
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  RetrievalReport report;
  report.ks = ks;
  std::unordered_set<std::string> seen;
  std::map<std::size_t, std::size_t> hits;
  for (const auto& list : rankings) {
    if (!seen.insert(list.query_id).second) {
      throw Error(Errc::input, "acc_at_k: duplicate ranking for query '" + list.query_id + "'");
    }
    std::unordered_set<std::string> listed;
    for (const auto& e : list.entries) {
      if (!listed.insert(e.item_id).second) {
        throw Error(Errc::input, "acc_at_k: gallery item '" + e.item_id + "' listed twice for query '" +
                                     list.query_id + "'");
      }
    }

    const auto it = gt.find(list.query_id);
    if (it == gt.end() || it->second.empty()) {
      report.excluded.push_back(list.query_id);
      continue;
    }
    const auto& matches = it->second;
    if (gallery_ids != nullptr &&
        std::none_of(matches.begin(), matches.end(), [&](const std::string& m) { return gallery_ids->contains(m); })) {
      report.unreachable.push_back(list.query_id);
    }

    std::size_t first = 0;
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      if (matches.contains(list.entries[r].item_id)) {
        first = r + 1;
        break;
      }
    }
    report.first_hit_rank[list.query_id] = first;
    for (const auto k : ks) {
      if (first != 0 && first <= k) ++hits[k];
    }
  }

  report.num_queries = report.first_hit_rank.size();
  report.num_excluded = report.excluded.size();
  std::sort(report.excluded.begin(), report.excluded.end());
  std::sort(report.unreachable.begin(), report.unreachable.end());
  for (const auto k : ks) {
    report.acc[k] = report.num_queries == 0 ? 0.0
                                            : static_cast<double>(hits[k]) / static_cast<double>(report.num_queries);
  }
  return report;
}

}  // namespace clothret
