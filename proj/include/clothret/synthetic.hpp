#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "clothret/boxes.hpp"
#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/eval.hpp"
#include "clothret/io.hpp"
#include "clothret/parallel.hpp"
#include "clothret/rng.hpp"

namespace clothret {

struct DetectorNoise {
  double jitter_px = 4.0;    // sigma of per-coordinate Gaussian jitter
  double score_sigma = 0.1;  // sigma of the true-positive score around 0.8
  double miss_rate = 0.1;    // probability a ground-truth box is not detected
  double fp_rate = 0.1;      // probability of one spurious box per ground-truth box
};

/// Parameters of the desk-scale stand-in benchmark. Shop (gallery) images
/// show one product each; street (query) images hold several ground-truth
/// boxes, each showing one product.
struct SyntheticSpec {
  std::uint64_t seed = 0;

  std::size_t num_images = 100;
  int num_categories = 3;
  std::size_t gt_boxes_per_image = 3;
  double image_width = 640.0;
  double image_height = 480.0;
  double min_box_size = 40.0;
  double max_box_size = 200.0;
  double max_gt_overlap = 0.3;  // IoU cap between ground-truth boxes of one image
  std::vector<DetectorNoise> detectors = std::vector<DetectorNoise>(5);

  std::size_t dim = 64;
  std::size_t num_items = 200;
  std::size_t gallery_per_item = 4;
  double cluster_spread = 0.5;  // per-image appearance noise shared by all models
  std::vector<double> model_noise = {0.8, 0.8, 0.8};  // per-model feature noise sigma

  std::size_t num_models() const { return model_noise.size(); }
};

struct SyntheticData {
  GroundTruthDet gt_detections;
  std::vector<ScoredBox> gt_boxes;                   // same boxes, in detection-record form
  std::vector<std::vector<ScoredBox>> detections;    // one list per detector
  std::vector<EmbeddingMatrix> embeddings;           // one matrix per model: queries then gallery
  GroundTruthRet retrieval_gt;
};

inline std::string detector_id(std::size_t d) { return "det" + std::to_string(d); }

namespace detail {

inline void check_rate(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::config, std::string("synthetic: ") + name + " must lie in [0, 1]");
}

inline void validate(const SyntheticSpec& s) {
  if (s.num_categories < 1) throw Error(Errc::config, "synthetic: num_categories must be >= 1");
  if (s.dim == 0 || s.num_items == 0 || s.gallery_per_item == 0) {
    throw Error(Errc::config, "synthetic: dim, num_items and gallery_per_item must be positive");
  }
  if (s.model_noise.empty()) throw Error(Errc::config, "synthetic: at least one embedding model is required");
  if (!(s.min_box_size > 0.0 && s.min_box_size <= s.max_box_size && s.max_box_size < s.image_width &&
        s.max_box_size < s.image_height)) {
    throw Error(Errc::config, "synthetic: box sizes must satisfy 0 < min <= max < image size");
  }
  check_rate(s.max_gt_overlap, "max_gt_overlap");
  for (const auto& d : s.detectors) {
    check_rate(d.miss_rate, "miss_rate");
    check_rate(d.fp_rate, "fp_rate");
    if (!(d.jitter_px >= 0.0 && d.score_sigma >= 0.0)) {
      throw Error(Errc::config, "synthetic: noise sigmas must be non-negative");
    }
  }
  if (!(s.cluster_spread >= 0.0)) throw Error(Errc::config, "synthetic: cluster_spread must be non-negative");
  for (const double m : s.model_noise) {
    if (!(m >= 0.0)) throw Error(Errc::config, "synthetic: model noise must be non-negative");
  }
}

// Stream keys; each names one independent family of draws.
enum : std::uint64_t {
  kGtStream = 1,
  kDetectorStream = 2,
  kCenterStream = 3,
  kItemCategoryStream = 4,
  kAppearanceStream = 5,
  kModelStream = 6,
  kAssignStream = 7,
};

inline BoundingBox clip_box(double x1, double y1, double x2, double y2, double w, double h) {
  x1 = std::clamp(x1, 0.0, w - 1.0);
  y1 = std::clamp(y1, 0.0, h - 1.0);
  x2 = std::clamp(x2, x1 + 1.0, w);
  y2 = std::clamp(y2, y1 + 1.0, h);
  return BoundingBox::make(x1, y1, x2, y2);
}

inline std::vector<double> gaussian_vector(CounterRng rng, std::size_t dim, double sigma) {
  std::vector<double> v(dim);
  const double scale = sigma / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace detail

inline std::string image_name(std::size_t i) { return "street" + std::to_string(i); }

/// Builds the whole benchmark in memory. Every value is a pure function of
/// the spec; entity-level random streams make the result independent of
/// the thread count.
inline SyntheticData make_synthetic(const SyntheticSpec& spec, std::size_t threads = 1) {
  detail::validate(spec);
  const CounterRng root(spec.seed, 0);
  SyntheticData out;

  // Products: category and embedding center.
  std::vector<int> item_category(spec.num_items);
  std::vector<std::vector<double>> centers(spec.num_items);
  parallel_for(spec.num_items, threads, [&](std::size_t item) {
    auto rng = root.fork(detail::kItemCategoryStream).fork(item);
    item_category[item] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_categories)));
    auto c = detail::gaussian_vector(root.fork(detail::kCenterStream).fork(item), spec.dim, 1.0);
    const double n = norm(c);
    for (auto& x : c) x /= n;
    centers[item] = std::move(c);
  });

  // Street images: ground-truth boxes, each showing one product.
  struct GtEntry {
    std::string image_id;
    std::size_t index;
    std::size_t item;
    BoundingBox box;
  };
  std::vector<GtEntry> gt_entries;
  for (std::size_t i = 0; i < spec.num_images; ++i) {
    auto rng = root.fork(detail::kGtStream).fork(i);
    const std::size_t first = gt_entries.size();
    for (std::size_t j = 0; j < spec.gt_boxes_per_image; ++j) {
      // Redraw placements that overlap an earlier box beyond max_gt_overlap;
      // the last attempt is kept regardless.
      BoundingBox box;
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double bw = rng.uniform(spec.min_box_size, spec.max_box_size);
        const double bh = rng.uniform(spec.min_box_size, spec.max_box_size);
        const double x1 = rng.uniform(0.0, spec.image_width - bw);
        const double y1 = rng.uniform(0.0, spec.image_height - bh);
        box = BoundingBox::make(x1, y1, x1 + bw, y1 + bh);
        bool clear = true;
        for (std::size_t e = first; clear && e < gt_entries.size(); ++e) clear = iou(box, gt_entries[e].box) <= spec.max_gt_overlap;
        if (clear) break;
      }
      const std::size_t item = rng.below(spec.num_items);
      gt_entries.push_back({image_name(i), j, item, box});
    }
  }
  for (const auto& g : gt_entries) {
    const int category = item_category[g.item];
    out.gt_detections[g.image_id].push_back(GtBox{g.box, category});
    out.gt_boxes.push_back(ScoredBox{g.box, 1.0, category, g.image_id, "gt"});
  }

  // Detectors: jittered copies of the ground truth plus spurious boxes.
  out.detections.resize(spec.detectors.size());
  for (std::size_t d = 0; d < spec.detectors.size(); ++d) {
    const auto& noise = spec.detectors[d];
    std::vector<std::vector<ScoredBox>> per_image(spec.num_images);
    parallel_for(spec.num_images, threads, [&](std::size_t i) {
      auto rng = root.fork(detail::kDetectorStream).fork(d).fork(i);
      for (std::size_t j = 0; j < spec.gt_boxes_per_image; ++j) {
        const auto& g = gt_entries[i * spec.gt_boxes_per_image + j];
        const bool missed = rng.bernoulli(noise.miss_rate);
        const double jx1 = rng.normal(0.0, noise.jitter_px);
        const double jy1 = rng.normal(0.0, noise.jitter_px);
        const double jx2 = rng.normal(0.0, noise.jitter_px);
        const double jy2 = rng.normal(0.0, noise.jitter_px);
        const double score = std::clamp(rng.normal(0.8, noise.score_sigma), 0.01, 1.0);
        if (!missed) {
          const auto box = noise.jitter_px == 0.0
                               ? g.box
                               : detail::clip_box(g.box.x1 + jx1, g.box.y1 + jy1, g.box.x2 + jx2, g.box.y2 + jy2,
                                                  spec.image_width, spec.image_height);
          per_image[i].push_back(ScoredBox{box, score, item_category[g.item], g.image_id, detector_id(d)});
        }
        if (rng.bernoulli(noise.fp_rate)) {
          const double bw = rng.uniform(spec.min_box_size, spec.max_box_size);
          const double bh = rng.uniform(spec.min_box_size, spec.max_box_size);
          const double x1 = rng.uniform(0.0, spec.image_width - bw);
          const double y1 = rng.uniform(0.0, spec.image_height - bh);
          const int category = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_categories)));
          per_image[i].push_back(ScoredBox{BoundingBox::make(x1, y1, x1 + bw, y1 + bh), rng.uniform(0.05, 0.6),
                                           category, g.image_id, detector_id(d)});
        }
      }
    });
    for (auto& boxes : per_image) {
      std::move(boxes.begin(), boxes.end(), std::back_inserter(out.detections[d]));
    }
  }

  // Embedding rows: one query per ground-truth box, then the shop gallery.
  IdMap ids;
  std::vector<std::size_t> row_item;
  for (const auto& g : gt_entries) {
    const std::string box_id = g.image_id + "#g" + std::to_string(g.index);
    ids.push_back(ItemRecord{"q:" + box_id, g.image_id, box_id, item_category[g.item], Source::query});
    row_item.push_back(g.item);
  }
  for (std::size_t item = 0; item < spec.num_items; ++item) {
    for (std::size_t s = 0; s < spec.gallery_per_item; ++s) {
      const std::string image = "shop" + std::to_string(item) + "_" + std::to_string(s);
      ids.push_back(ItemRecord{"g:" + image, image, image + "#0", item_category[item], Source::gallery});
      row_item.push_back(item);
    }
  }
  for (std::size_t r = 0; r < gt_entries.size(); ++r) {
    auto& matches = out.retrieval_gt[ids[r].item_id];
    for (std::size_t s = 0; s < spec.gallery_per_item; ++s) {
      matches.insert("g:shop" + std::to_string(gt_entries[r].item) + "_" + std::to_string(s));
    }
  }

  const std::size_t rows = ids.size();
  // Appearance: what the image shows, shared by every model.
  std::vector<std::vector<double>> appearance(rows);
  parallel_for(rows, threads, [&](std::size_t r) {
    auto a = detail::gaussian_vector(root.fork(detail::kAppearanceStream).fork(r), spec.dim, spec.cluster_spread);
    for (std::size_t c = 0; c < spec.dim; ++c) a[c] += centers[row_item[r]][c];
    appearance[r] = std::move(a);
  });

  for (std::size_t m = 0; m < spec.num_models(); ++m) {
    std::vector<double> data(rows * spec.dim);
    parallel_for(rows, threads, [&](std::size_t r) {
      auto e = detail::gaussian_vector(root.fork(detail::kModelStream).fork(m).fork(r), spec.dim, spec.model_noise[m]);
      for (std::size_t c = 0; c < spec.dim; ++c) e[c] += appearance[r][c];
      const double n = norm(e);
      for (std::size_t c = 0; c < spec.dim; ++c) data[r * spec.dim + c] = e[c] / n;
    });
    out.embeddings.emplace_back(spec.dim, std::move(data), ids);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON form of the spec, as read by `gen-synth --spec`.

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(Errc::config, "synthetic spec must be a JSON object");
  if (!j.contains("seed")) throw Error(Errc::config, "synthetic spec: 'seed' is mandatory");
  SyntheticSpec s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.num_images = j.value("num_images", s.num_images);
    s.num_categories = j.value("num_categories", s.num_categories);
    s.gt_boxes_per_image = j.value("gt_boxes_per_image", s.gt_boxes_per_image);
    s.image_width = j.value("image_width", s.image_width);
    s.image_height = j.value("image_height", s.image_height);
    s.min_box_size = j.value("min_box_size", s.min_box_size);
    s.max_box_size = j.value("max_box_size", s.max_box_size);
    s.max_gt_overlap = j.value("max_gt_overlap", s.max_gt_overlap);

    DetectorNoise base;
    if (j.contains("detector_noise")) {
      const auto& n = j.at("detector_noise");
      base.jitter_px = n.value("jitter_px", base.jitter_px);
      base.score_sigma = n.value("score_sigma", base.score_sigma);
      base.miss_rate = n.value("miss_rate", base.miss_rate);
      base.fp_rate = n.value("fp_rate", base.fp_rate);
    }
    if (j.contains("detectors")) {
      s.detectors.clear();
      for (const auto& n : j.at("detectors")) {
        DetectorNoise d = base;
        d.jitter_px = n.value("jitter_px", d.jitter_px);
        d.score_sigma = n.value("score_sigma", d.score_sigma);
        d.miss_rate = n.value("miss_rate", d.miss_rate);
        d.fp_rate = n.value("fp_rate", d.fp_rate);
        s.detectors.push_back(d);
      }
    } else {
      s.detectors.assign(j.value("detector_count", s.detectors.size()), base);
    }

    if (j.contains("embedding")) {
      const auto& e = j.at("embedding");
      s.dim = e.value("dim", s.dim);
      s.num_items = e.value("num_items", s.num_items);
      s.gallery_per_item = e.value("gallery_per_item", s.gallery_per_item);
      s.cluster_spread = e.value("cluster_spread", s.cluster_spread);
      if (e.contains("model_noise")) {
        s.model_noise = e.at("model_noise").get<std::vector<double>>();
      } else {
        s.model_noise.assign(e.value("num_models", s.model_noise.size()), e.value("noise", 0.8));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("synthetic spec: ") + e.what());
  }
  detail::validate(s);
  return s;
}

struct SyntheticFiles {
  std::filesystem::path gt_detections;
  std::vector<std::filesystem::path> detections;
  std::vector<std::pair<std::filesystem::path, std::filesystem::path>> embeddings;  // (data, ids)
  std::filesystem::path retrieval_gt;
  std::filesystem::path config;
};

/// Writes the benchmark in the interchange formats plus a ready-to-run
/// pipeline.json (paths relative to out_dir) that fuses every detector,
/// concatenates every embedding model and scores Acc@1 / Acc@10.
inline SyntheticFiles generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir,
                                         std::size_t threads = 1) {
  const auto data = make_synthetic(spec, threads);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw Error(Errc::io, "cannot create output directory '" + out_dir.string() + "'");
  }

  SyntheticFiles files;
  files.gt_detections = out_dir / "gt_detections.jsonl";
  io::save_detections(data.gt_boxes, files.gt_detections);
  nlohmann::json det_paths = nlohmann::json::array();
  for (std::size_t d = 0; d < data.detections.size(); ++d) {
    const auto name = std::filesystem::path("detections") / (detector_id(d) + ".jsonl");
    io::save_detections(data.detections[d], out_dir / name);
    files.detections.push_back(out_dir / name);
    det_paths.push_back(name.generic_string());
  }
  nlohmann::json emb_paths = nlohmann::json::array();
  for (std::size_t m = 0; m < data.embeddings.size(); ++m) {
    const auto base = std::filesystem::path("embeddings") / ("model" + std::to_string(m));
    const auto data_path = std::filesystem::path(base.string() + ".emb");
    const auto ids_path = std::filesystem::path(base.string() + ".ids.jsonl");
    io::save_embeddings(data.embeddings[m], out_dir / data_path, out_dir / ids_path);
    files.embeddings.emplace_back(out_dir / data_path, out_dir / ids_path);
    emb_paths.push_back({{"data", data_path.generic_string()}, {"ids", ids_path.generic_string()}});
  }
  files.retrieval_gt = out_dir / "retrieval_gt.jsonl";
  io::save_retrieval_gt(data.retrieval_gt, files.retrieval_gt);

  nlohmann::json post = nlohmann::json::array();
  if (data.embeddings.size() > 1) post.push_back({{"step", "concat"}, {"renormalize", true}});
  const nlohmann::json config = {
      {"detections", det_paths},
      {"wbf", {{"iou_threshold", 0.55}, {"score_mode", "rescale"}}},
      {"detection_gt", "gt_detections.jsonl"},
      {"embeddings", emb_paths},
      {"post", post},
      {"search", {{"k", 10}, {"restrict_category", false}}},
      {"eval", {{"retrieval_gt", "retrieval_gt.jsonl"}, {"ks", {1, 10}}}},
      {"output_dir", "out"},
  };
  files.config = out_dir / "pipeline.json";
  std::ofstream cfg(files.config);
  if (!cfg) throw Error(Errc::io, "cannot write '" + files.config.string() + "'");
  cfg << config.dump(2) << '\n';
  return files;
}

}  // namespace clothret
