#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <spdlog/spdlog.h>

#include "json.hpp"

#include "clothret/boxes.hpp"
#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/eval.hpp"
#include "clothret/io.hpp"
#include "clothret/rerank.hpp"
#include "clothret/search.hpp"

namespace clothret {

enum class StepKind { concat, pca, qe, dba, rerank };

inline const char* to_string(StepKind k) {
  switch (k) {
    case StepKind::concat: return "concat";
    case StepKind::pca: return "pca";
    case StepKind::qe: return "qe";
    case StepKind::dba: return "dba";
    case StepKind::rerank: return "rerank";
  }
  return "?";
}

struct PostStep {
  StepKind kind = StepKind::concat;
  bool renormalize = true;     // concat
  std::size_t out_dim = 0;     // pca; 0 keeps every dimension
  bool whiten = true;          // pca
  QeParams qe;                 // qe, dba
  RerankParams rerank;         // rerank
  std::size_t rerank_depth = 100;  // initial ranking length handed to rerank
};

struct EmbeddingInput {
  std::filesystem::path data;
  std::filesystem::path ids;
};

struct PipelineConfig {
  std::vector<std::filesystem::path> detections;
  WbfParams wbf;
  std::optional<std::filesystem::path> detection_gt;
  std::vector<double> detection_iou_thresholds = coco_iou_thresholds();
  /// Keep only query rows whose box_id names a box emitted by fusion.
  bool queries_from_fused = false;

  std::vector<EmbeddingInput> embeddings;
  std::vector<PostStep> post;

  std::size_t k = 10;
  bool restrict_category = false;

  std::optional<std::filesystem::path> retrieval_gt;
  std::vector<std::size_t> ks = {1, 10};

  std::filesystem::path output_dir = "out";
  std::size_t threads = 1;

  /// Canonical JSON of the document this config was read from.
  std::string source_json;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw Error(Errc::config, where + ": unknown key '" + key + "'");
  }
}

inline PostStep parse_step(const nlohmann::json& s) {
  if (!s.is_object() || !s.contains("step")) throw Error(Errc::config, "post step needs a 'step' name");
  const auto name = s.at("step").get<std::string>();
  PostStep step;
  if (name == "concat") {
    reject_unknown_keys(s, {"step", "renormalize"}, "post.concat");
    step.kind = StepKind::concat;
    step.renormalize = s.value("renormalize", true);
  } else if (name == "pca") {
    reject_unknown_keys(s, {"step", "out_dim", "whiten"}, "post.pca");
    step.kind = StepKind::pca;
    step.out_dim = s.value("out_dim", std::size_t{0});
    step.whiten = s.value("whiten", true);
  } else if (name == "qe" || name == "dba") {
    reject_unknown_keys(s, {"step", "k", "alpha", "include_self"}, "post." + name);
    step.kind = name == "qe" ? StepKind::qe : StepKind::dba;
    step.qe.k = s.value("k", step.qe.k);
    step.qe.alpha = s.value("alpha", step.qe.alpha);
    step.qe.include_self = s.value("include_self", step.qe.include_self);
  } else if (name == "rerank") {
    reject_unknown_keys(s, {"step", "k1", "k2", "lambda", "depth"}, "post.rerank");
    step.kind = StepKind::rerank;
    step.rerank.k1 = s.value("k1", step.rerank.k1);
    step.rerank.k2 = s.value("k2", step.rerank.k2);
    step.rerank.lambda = s.value("lambda", step.rerank.lambda);
    step.rerank_depth = s.value("depth", step.rerank_depth);
  } else {
    throw Error(Errc::config, "unknown post-processing step '" + name + "'");
  }
  return step;
}

}  // namespace detail

/// Reads a pipeline config document. Relative paths are resolved against
/// `base_dir` (normally the directory holding the config file).
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw Error(Errc::config, "pipeline config must be a JSON object");
  detail::reject_unknown_keys(j,
                              {"detections", "wbf", "detection_gt", "detection_iou_thresholds", "queries_from_fused",
                               "embeddings", "post", "search", "eval", "output_dir", "threads"},
                              "config");
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };

  PipelineConfig c;
  try {
    for (const auto& p : j.value("detections", nlohmann::json::array())) c.detections.push_back(resolve(p.get<std::string>()));
    if (j.contains("wbf")) {
      const auto& w = j.at("wbf");
      detail::reject_unknown_keys(w, {"iou_threshold", "model_weights", "num_models", "score_mode"}, "config.wbf");
      c.wbf.iou_threshold = w.value("iou_threshold", c.wbf.iou_threshold);
      if (w.contains("model_weights")) c.wbf.model_weights = w.at("model_weights").get<std::map<std::string, double>>();
      if (w.contains("num_models") && !w.at("num_models").is_null()) {
        const auto n = w.at("num_models").get<std::int64_t>();
        if (n < 0) throw Error(Errc::config, "config.wbf.num_models must not be negative");
        c.wbf.num_models = static_cast<std::size_t>(n);
      }
      const auto mode = w.value("score_mode", std::string("rescale"));
      if (mode == "rescale") {
        c.wbf.score_mode = ScoreMode::rescale;
      } else if (mode == "mean") {
        c.wbf.score_mode = ScoreMode::mean;
      } else {
        throw Error(Errc::config, "config.wbf.score_mode must be \"rescale\" or \"mean\"");
      }
    }
    if (j.contains("detection_gt") && !j.at("detection_gt").is_null()) {
      c.detection_gt = resolve(j.at("detection_gt").get<std::string>());
    }
    if (j.contains("detection_iou_thresholds")) {
      c.detection_iou_thresholds = j.at("detection_iou_thresholds").get<std::vector<double>>();
    }
    c.queries_from_fused = j.value("queries_from_fused", false);

    for (const auto& e : j.value("embeddings", nlohmann::json::array())) {
      detail::reject_unknown_keys(e, {"data", "ids"}, "config.embeddings[]");
      c.embeddings.push_back({resolve(e.at("data").get<std::string>()), resolve(e.at("ids").get<std::string>())});
    }
    for (const auto& s : j.value("post", nlohmann::json::array())) c.post.push_back(detail::parse_step(s));

    if (j.contains("search")) {
      const auto& s = j.at("search");
      detail::reject_unknown_keys(s, {"k", "restrict_category"}, "config.search");
      c.k = s.value("k", c.k);
      c.restrict_category = s.value("restrict_category", c.restrict_category);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::reject_unknown_keys(e, {"retrieval_gt", "ks"}, "config.eval");
      if (e.contains("retrieval_gt") && !e.at("retrieval_gt").is_null()) {
        c.retrieval_gt = resolve(e.at("retrieval_gt").get<std::string>());
      }
      if (e.contains("ks")) c.ks = e.at("ks").get<std::vector<std::size_t>>();
    }
    c.output_dir = resolve(j.value("output_dir", std::string("out")));
    c.threads = j.value("threads", std::size_t{1});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("config: ") + e.what());
  }
  c.source_json = j.dump();
  return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::config, std::string("config is not valid JSON: ") + e.what());
  }
  return pipeline_config_from_json(j, path.parent_path());
}

/// Checks step ordering before any work starts: concat at most once and
/// first, rerank at most once and last, several embedding inputs need concat.
inline void validate_pipeline_config(const PipelineConfig& c) {
  std::size_t concat = 0;
  std::size_t rerank = 0;
  for (std::size_t i = 0; i < c.post.size(); ++i) {
    const auto kind = c.post[i].kind;
    if (kind == StepKind::concat) {
      ++concat;
      if (i != 0) throw Error(Errc::config, "post: concat must be the first step");
    }
    if (kind == StepKind::rerank) {
      ++rerank;
      if (i + 1 != c.post.size()) throw Error(Errc::config, "post: rerank runs after search and must be the last step");
      if (c.post[i].rerank_depth < c.post[i].rerank.k1) {
        throw Error(Errc::config, "post: rerank depth must be at least k1");
      }
    }
    if (kind == StepKind::pca && c.embeddings.size() > 1 && concat == 0) {
      throw Error(Errc::config, "post: pca needs concat output or a single embedding input");
    }
  }
  if (concat > 1 || rerank > 1) throw Error(Errc::config, "post: concat and rerank may appear at most once");
  if (c.embeddings.size() > 1 && concat == 0) {
    throw Error(Errc::config, "post: " + std::to_string(c.embeddings.size()) +
                                  " embedding inputs require a concat step");
  }
  if (c.embeddings.empty() && (!c.post.empty() || c.retrieval_gt)) {
    throw Error(Errc::config, "post-processing and retrieval evaluation need embedding inputs");
  }
  if (c.queries_from_fused && c.detections.empty()) {
    throw Error(Errc::config, "queries_from_fused needs detection inputs");
  }
  if (c.k == 0) throw Error(Errc::config, "search.k must be at least 1");
}

struct PipelineResult {
  EvalReport report;
  std::vector<FusedBox> fused;
  std::vector<RankingList> rankings;
  std::filesystem::path rankings_path;
  std::filesystem::path fused_path;
  std::filesystem::path report_path;
  std::string config_digest;
  std::size_t num_queries = 0;
};

namespace detail {

struct SearchSides {
  EmbeddingMatrix queries;
  EmbeddingMatrix gallery;
};

inline SearchSides apply_pre_search(const PipelineConfig& c, std::vector<EmbeddingMatrix> parts) {
  std::size_t first = 0;
  EmbeddingMatrix joined;
  if (!c.post.empty() && c.post.front().kind == StepKind::concat) {
    joined = concat_features(parts, c.post.front().renormalize);
    spdlog::info("concat: {} parts -> {} rows x {} dims", parts.size(), joined.rows(), joined.dim());
    first = 1;
  } else {
    joined = std::move(parts.front());
  }

  SearchSides s{joined.select(Source::query), joined.select(Source::gallery)};
  for (std::size_t i = first; i < c.post.size(); ++i) {
    const auto& step = c.post[i];
    switch (step.kind) {
      case StepKind::pca: {
        const std::size_t out_dim = step.out_dim == 0 ? s.gallery.dim() : step.out_dim;
        const auto model = pca_fit(s.gallery, out_dim, step.whiten);
        s.gallery = l2_normalize(pca_transform(model, s.gallery, c.threads));
        if (!s.queries.empty()) s.queries = l2_normalize(pca_transform(model, s.queries, c.threads));
        spdlog::info("pca: {} dims -> {} (whiten {})", model.in_dim, model.out_dim, step.whiten);
        break;
      }
      case StepKind::dba:
        s.gallery = database_augmentation(s.gallery, step.qe, c.threads);
        spdlog::info("dba: {} gallery rows augmented with k={}", s.gallery.rows(), step.qe.k);
        break;
      case StepKind::qe:
        if (!s.queries.empty()) {
          s.queries = query_expansion(s.queries, build_index(s.gallery), step.qe, c.threads);
        }
        spdlog::info("qe: {} query rows expanded with k={}", s.queries.rows(), step.qe.k);
        break;
      case StepKind::concat:
      case StepKind::rerank:
        break;
    }
  }
  return s;
}

}  // namespace detail

/// Runs detection fusion, embedding post-processing, search, optional
/// re-ranking and evaluation, writing fused.jsonl, rankings.tsv and
/// report.json under the output directory.
inline PipelineResult run_pipeline(const PipelineConfig& config) {
  validate_pipeline_config(config);
  PipelineResult result;
  result.config_digest = io::fnv1a_hex(config.source_json);
  std::error_code ec;
  std::filesystem::create_directories(config.output_dir, ec);

  auto stage = [](const char* name, auto&& body) {
    try {
      body();
    } catch (const Error& e) {
      throw Error(e.code(), std::string("stage '") + name + "' failed: " + e.what());
    }
  };

  // Detection.
  std::unordered_set<std::string> fused_box_ids;
  if (!config.detections.empty()) {
    stage("fuse", [&] {
      std::vector<ScoredBox> boxes;
      for (const auto& path : config.detections) {
        auto part = io::load_detections(path);
        spdlog::info("fuse: {} boxes from {}", part.size(), path.string());
        std::move(part.begin(), part.end(), std::back_inserter(boxes));
      }
      result.fused = wbf_fuse_all(boxes, config.wbf, config.threads);
      spdlog::info("fuse: {} boxes in -> {} fused boxes out", boxes.size(), result.fused.size());
      result.fused_path = config.output_dir / "fused.jsonl";
      io::save_fused(result.fused, result.fused_path);
      std::map<std::string, std::size_t> counter;
      for (const auto& f : result.fused) fused_box_ids.insert(io::fused_box_id(f.image_id, counter[f.image_id]++));
    });
    if (config.detection_gt) {
      stage("eval-det", [&] {
        const auto gt = io::load_detection_gt(*config.detection_gt);
        result.report.detection = detection_ap(as_scored(result.fused), gt, config.detection_iou_thresholds);
        spdlog::info("eval-det: {} fused boxes vs {} ground-truth boxes", result.fused.size(),
                     result.report.detection->num_gt);
      });
    }
  }

  // Retrieval.
  if (!config.embeddings.empty()) {
    detail::SearchSides sides;
    stage("embed", [&] {
      std::vector<EmbeddingMatrix> parts;
      for (const auto& in : config.embeddings) {
        parts.push_back(io::load_embeddings(in.data, in.ids));
        spdlog::info("embed: {} rows x {} dims from {}", parts.back().rows(), parts.back().dim(), in.data.string());
      }
      sides = detail::apply_pre_search(config, std::move(parts));
      if (config.queries_from_fused) {
        std::vector<std::size_t> keep;
        for (std::size_t r = 0; r < sides.queries.rows(); ++r) {
          if (fused_box_ids.contains(sides.queries.id(r).box_id)) keep.push_back(r);
        }
        spdlog::info("embed: {} of {} query rows match fused boxes", keep.size(), sides.queries.rows());
        sides.queries = sides.queries.select(keep);
      }
    });

    const PostStep* rerank = nullptr;
    if (!config.post.empty() && config.post.back().kind == StepKind::rerank) rerank = &config.post.back();

    stage("search", [&] {
      const auto index = build_index(sides.gallery, config.restrict_category);
      const std::size_t depth = rerank ? std::max(config.k, rerank->rerank_depth) : config.k;
      result.rankings = knn_search(index, sides.queries, depth, config.restrict_category, config.threads);
      result.num_queries = sides.queries.rows();
      spdlog::info("search: {} queries x {} gallery rows -> {} rankings (depth {})", sides.queries.rows(),
                   sides.gallery.rows(), result.rankings.size(), depth);
    });

    if (rerank) {
      stage("rerank", [&] {
        result.rankings =
            k_reciprocal_rerank(sides.queries, sides.gallery, result.rankings, rerank->rerank, config.threads);
        spdlog::info("rerank: {} rankings re-ordered (k1={}, k2={}, lambda={})", result.rankings.size(),
                     rerank->rerank.k1, rerank->rerank.k2, rerank->rerank.lambda);
      });
    }
    for (auto& list : result.rankings) {
      if (list.entries.size() > config.k) list.entries.resize(config.k);
    }

    result.rankings_path = config.output_dir / "rankings.tsv";
    io::save_rankings(result.rankings, result.rankings_path);

    if (config.retrieval_gt) {
      stage("eval-ret", [&] {
        const auto gt = io::load_retrieval_gt(*config.retrieval_gt);
        std::unordered_set<std::string> gallery_ids;
        for (const auto& id : sides.gallery.ids()) gallery_ids.insert(id.item_id);
        result.report.retrieval = acc_at_k(result.rankings, gt, config.ks, &gallery_ids);
        const auto& r = *result.report.retrieval;
        spdlog::info("eval-ret: {} rankings -> {} scored + {} excluded", result.rankings.size(), r.num_queries,
                     r.num_excluded);
      });
    }
  }

  result.report_path = config.output_dir / "report.json";
  io::save_report(result.report, result.config_digest, result.report_path);
  return result;
}

}  // namespace clothret
