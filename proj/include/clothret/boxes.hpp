#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clothret/error.hpp"
#include "clothret/parallel.hpp"

namespace clothret {

/// Axis-aligned rectangle in absolute pixel coordinates. Construct through
/// BoundingBox::make to get the x1 < x2, y1 < y2 and finiteness checks.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  static BoundingBox make(double x1, double y1, double x2, double y2) {
    if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
      throw Error(Errc::data, "bounding box has a non-finite coordinate");
    }
    if (!(x1 < x2) || !(y1 < y2)) {
      throw Error(Errc::data, "bounding box has zero or negative area");
    }
    return BoundingBox{x1, y1, x2, y2};
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ScoredBox {
  BoundingBox box;
  double score = 0.0;
  int category_id = 1;
  std::string image_id;
  std::string model_id;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace detail {

// Indices of `boxes` ordered by descending key, ties by (model_id, input order).
template <typename KeyFn>
std::vector<std::size_t> ranked_order(const std::vector<ScoredBox>& boxes, KeyFn key) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ka = key(a);
    const double kb = key(b);
    if (ka != kb) return ka > kb;
    return boxes[a].model_id < boxes[b].model_id;
  });
  return order;
}

}  // namespace detail

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box reaches `iou_threshold`. With `per_category` set, only
/// boxes of the same category suppress each other.
inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes, double iou_threshold,
                                  bool per_category = true) {
  const auto order = detail::ranked_order(boxes, [&](std::size_t i) { return boxes[i].score; });
  std::vector<ScoredBox> kept;
  for (const std::size_t idx : order) {
    const ScoredBox& cand = boxes[idx];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const ScoredBox& k) {
      if (per_category && k.category_id != cand.category_id) return false;
      return iou(k.box, cand.box) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

enum class ScoreMode { rescale, mean };

struct WbfParams {
  double iou_threshold = 0.55;
  /// Empty means every model has weight 1. Otherwise every model present in
  /// the input must have an entry.
  std::map<std::string, double> model_weights;
  /// Defaults to the number of distinct model ids in the input.
  std::optional<std::size_t> num_models;
  ScoreMode score_mode = ScoreMode::rescale;
};

struct FusedBox {
  BoundingBox box;
  double score = 0.0;
  int category_id = 1;
  std::string image_id;
  std::size_t cluster_size = 0;
  std::set<std::string> model_ids;
};

namespace detail {

struct WbfCluster {
  double sum_w = 0.0;
  double sum_x1 = 0.0, sum_y1 = 0.0, sum_x2 = 0.0, sum_y2 = 0.0;
  // Plain coordinate sums, used only while every member score is zero.
  double raw_x1 = 0.0, raw_y1 = 0.0, raw_x2 = 0.0, raw_y2 = 0.0;
  std::size_t size = 0;
  BoundingBox fused;
  std::set<std::string> models;

  void add(const BoundingBox& b, double w, const std::string& model) {
    sum_w += w;
    sum_x1 += w * b.x1;
    sum_y1 += w * b.y1;
    sum_x2 += w * b.x2;
    sum_y2 += w * b.y2;
    raw_x1 += b.x1;
    raw_y1 += b.y1;
    raw_x2 += b.x2;
    raw_y2 += b.y2;
    ++size;
    models.insert(model);
    if (sum_w > 0.0) {
      fused = BoundingBox{sum_x1 / sum_w, sum_y1 / sum_w, sum_x2 / sum_w, sum_y2 / sum_w};
    } else {
      const double n = static_cast<double>(size);
      fused = BoundingBox{raw_x1 / n, raw_y1 / n, raw_x2 / n, raw_y2 / n};
    }
  }
};

inline std::size_t resolve_num_models(const std::vector<ScoredBox>& boxes, const WbfParams& params) {
  std::set<std::string> models;
  for (const auto& b : boxes) models.insert(b.model_id);
  if (!params.num_models) {
    return std::max<std::size_t>(models.size(), 1);
  }
  if (*params.num_models == 0) {
    throw Error(Errc::config, "wbf: num_models must be positive");
  }
  if (*params.num_models < models.size()) {
    throw Error(Errc::config, "wbf: num_models (" + std::to_string(*params.num_models) +
                                  ") is below the " + std::to_string(models.size()) +
                                  " distinct models in the input");
  }
  return *params.num_models;
}

inline double model_weight(const WbfParams& params, const std::string& model_id) {
  if (params.model_weights.empty()) return 1.0;
  const auto it = params.model_weights.find(model_id);
  if (it == params.model_weights.end()) {
    throw Error(Errc::config, "wbf: no weight configured for model '" + model_id + "'");
  }
  if (!(it->second > 0.0)) {
    throw Error(Errc::config, "wbf: weight for model '" + model_id + "' must be positive");
  }
  return it->second;
}

}  // namespace detail

/// Weighted boxes fusion for the boxes of a single image.
///
/// Boxes are processed per category in descending weighted score
/// (score x model weight, clamped to [0, 1]). Each box joins the first
/// cluster whose current fused box overlaps it with IoU above the threshold,
/// otherwise it opens a new cluster. A cluster's box is the score-weighted
/// mean of its members and its score the mean member weighted score; in
/// rescale mode that score is multiplied by min(T, N) / N where T is the
/// cluster size and N the number of models.
inline std::vector<FusedBox> wbf_fuse(const std::vector<ScoredBox>& boxes, const WbfParams& params) {
  if (params.iou_threshold < 0.0 || params.iou_threshold > 1.0) {
    throw Error(Errc::config, "wbf: iou_threshold must lie in [0, 1]");
  }
  const std::size_t n_models = detail::resolve_num_models(boxes, params);
  if (boxes.empty()) return {};

  std::vector<double> weighted(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (boxes[i].image_id != boxes.front().image_id) {
      throw Error(Errc::precondition, "wbf_fuse: boxes span more than one image");
    }
    weighted[i] = std::clamp(boxes[i].score * detail::model_weight(params, boxes[i].model_id), 0.0, 1.0);
  }

  const auto order = detail::ranked_order(boxes, [&](std::size_t i) { return weighted[i]; });

  // category -> clusters in creation order
  std::map<int, std::vector<detail::WbfCluster>> by_category;
  for (const std::size_t idx : order) {
    const ScoredBox& b = boxes[idx];
    auto& clusters = by_category[b.category_id];
    auto it = std::find_if(clusters.begin(), clusters.end(), [&](const detail::WbfCluster& c) {
      return iou(c.fused, b.box) > params.iou_threshold;
    });
    if (it == clusters.end()) {
      clusters.emplace_back();
      it = std::prev(clusters.end());
    }
    it->add(b.box, weighted[idx], b.model_id);
  }

  std::vector<FusedBox> out;
  for (const auto& [category, clusters] : by_category) {
    for (const auto& c : clusters) {
      FusedBox f;
      f.box = c.fused;
      f.category_id = category;
      f.image_id = boxes.front().image_id;
      f.cluster_size = c.size;
      f.model_ids = c.models;
      f.score = c.sum_w / static_cast<double>(c.size);
      if (params.score_mode == ScoreMode::rescale) {
        const double t = static_cast<double>(std::min(c.size, n_models));
        f.score = std::clamp(f.score * t / static_cast<double>(n_models), 0.0, 1.0);
      }
      out.push_back(std::move(f));
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FusedBox& a, const FusedBox& b) { return a.score > b.score; });
  return out;
}

/// Fuses a multi-image detection set image by image. The model count N is
/// taken over the whole input (or params.num_models) so that an image where a
/// detector fired nothing is still scored against all N models. Images are
/// emitted in ascending image_id order.
inline std::vector<FusedBox> wbf_fuse_all(const std::vector<ScoredBox>& boxes, WbfParams params,
                                          std::size_t threads = 1) {
  params.num_models = detail::resolve_num_models(boxes, params);
  std::map<std::string, std::vector<ScoredBox>> per_image;
  for (const auto& b : boxes) per_image[b.image_id].push_back(b);

  std::vector<const std::vector<ScoredBox>*> groups;
  groups.reserve(per_image.size());
  for (const auto& [id, group] : per_image) groups.push_back(&group);

  std::vector<std::vector<FusedBox>> fused(groups.size());
  parallel_for(groups.size(), threads, [&](std::size_t i) { fused[i] = wbf_fuse(*groups[i], params); });

  std::vector<FusedBox> out;
  for (auto& f : fused) {
    std::move(f.begin(), f.end(), std::back_inserter(out));
  }
  return out;
}

/// Drops the fusion bookkeeping so fused output can be scored or re-fused
/// like any detector output.
inline std::vector<ScoredBox> as_scored(const std::vector<FusedBox>& fused,
                                        const std::string& model_id = "wbf") {
  std::vector<ScoredBox> out;
  out.reserve(fused.size());
  for (const auto& f : fused) {
    out.push_back(ScoredBox{f.box, f.score, f.category_id, f.image_id, model_id});
  }
  return out;
}

}  // namespace clothret
