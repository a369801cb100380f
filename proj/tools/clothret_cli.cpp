#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "clothret/clothret.hpp"

namespace {

using namespace clothret;

struct Globals {
  std::size_t threads = 0;
  std::optional<std::uint64_t> seed;
  std::string log_level = "info";
};

std::map<std::string, double> parse_weights(const std::vector<std::string>& specs) {
  std::map<std::string, double> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error(Errc::config, "--weight expects MODEL=WEIGHT, got '" + s + "'");
    try {
      out[s.substr(0, eq)] = std::stod(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw Error(Errc::config, "--weight value is not a number in '" + s + "'");
    }
  }
  return out;
}

void print_report(const EvalReport& report, const std::string& out_path) {
  std::cout << io::format_report(report);
  if (!out_path.empty()) io::save_report(report, "", out_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clothret: detection fusion, embedding retrieval, post-processing and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "worker threads (0 = one per hardware thread)");
  app.add_option("--seed", g.seed, "64-bit seed (overrides the seed of a synthetic spec)");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  // fuse
  auto* fuse = app.add_subcommand("fuse", "fuse detections of several models per image (weighted boxes fusion)");
  std::vector<std::string> fuse_inputs;
  std::string fuse_out;
  double fuse_iou = 0.55;
  std::vector<std::string> fuse_weights;
  std::optional<std::size_t> fuse_num_models;
  std::string fuse_mode = "rescale";
  bool fuse_nms = false;
  fuse->add_option("-i,--input", fuse_inputs, "detections JSONL files")->required()->check(CLI::ExistingFile);
  fuse->add_option("-o,--out", fuse_out, "fused boxes JSONL")->required();
  fuse->add_option("--iou-thr", fuse_iou, "cluster IoU threshold")->check(CLI::Range(0.0, 1.0));
  fuse->add_option("--weight", fuse_weights, "per-model weight MODEL=WEIGHT (repeatable)");
  fuse->add_option("--num-models", fuse_num_models, "model count N used for score rescaling");
  fuse->add_option("--score-mode", fuse_mode, "rescale or mean")->check(CLI::IsMember({"rescale", "mean"}));
  fuse->add_flag("--nms", fuse_nms, "run per-category greedy NMS instead of fusion (baseline)");

  // eval-det
  auto* eval_det = app.add_subcommand("eval-det", "detection AP / AP50 / AP75 against ground truth");
  std::string det_pred, det_gt, det_out;
  eval_det->add_option("--pred", det_pred, "predictions JSONL")->required()->check(CLI::ExistingFile);
  eval_det->add_option("--gt", det_gt, "ground-truth JSONL")->required()->check(CLI::ExistingFile);
  eval_det->add_option("--out", det_out, "report JSON path");

  // search
  auto* search = app.add_subcommand("search", "exact top-K cosine search of query rows against gallery rows");
  std::string search_data, search_ids, search_out;
  std::size_t search_k = 10;
  bool search_restrict = false;
  search->add_option("--data", search_data, "EMB1 embedding file")->required()->check(CLI::ExistingFile);
  search->add_option("--ids", search_ids, "ids JSONL sidecar")->required()->check(CLI::ExistingFile);
  search->add_option("-k,--k", search_k, "ranking length")->check(CLI::PositiveNumber);
  search->add_flag("--restrict-category", search_restrict, "only rank gallery rows of the query category");
  search->add_option("-o,--out", search_out, "rankings TSV")->required();

  // rerank
  auto* rerank = app.add_subcommand("rerank", "k-reciprocal re-ranking of existing rankings");
  std::string rr_data, rr_ids, rr_rankings, rr_out;
  RerankParams rr_params;
  std::optional<std::size_t> rr_k;
  rerank->add_option("--data", rr_data, "EMB1 embedding file")->required()->check(CLI::ExistingFile);
  rerank->add_option("--ids", rr_ids, "ids JSONL sidecar")->required()->check(CLI::ExistingFile);
  rerank->add_option("--rankings", rr_rankings, "initial rankings TSV")->required()->check(CLI::ExistingFile);
  rerank->add_option("--k1", rr_params.k1, "reciprocal neighborhood size");
  rerank->add_option("--k2", rr_params.k2, "local expansion size");
  rerank->add_option("--lambda", rr_params.lambda, "weight of the original distance")->check(CLI::Range(0.0, 1.0));
  rerank->add_option("-k,--k", rr_k, "truncate output rankings to K entries");
  rerank->add_option("-o,--out", rr_out, "re-ranked TSV")->required();

  // eval-ret
  auto* eval_ret = app.add_subcommand("eval-ret", "retrieval Acc@K against ground-truth pairs");
  std::string ret_rankings, ret_gt, ret_out, ret_gallery_ids;
  std::vector<std::size_t> ret_ks = {1, 10};
  eval_ret->add_option("--rankings", ret_rankings, "rankings TSV")->required()->check(CLI::ExistingFile);
  eval_ret->add_option("--gt", ret_gt, "retrieval ground truth JSONL")->required()->check(CLI::ExistingFile);
  eval_ret->add_option("--ks", ret_ks, "K values")->delimiter(',');
  eval_ret->add_option("--gallery-ids", ret_gallery_ids, "ids sidecar; flags queries whose matches are absent")
      ->check(CLI::ExistingFile);
  eval_ret->add_option("--out", ret_out, "report JSON path");

  // run
  auto* run = app.add_subcommand("run", "run the configured pipeline end to end");
  std::string run_config;
  run->add_option("--config", run_config, "pipeline JSON")->required()->check(CLI::ExistingFile);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "write a seeded synthetic benchmark");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "synthetic spec JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_default_logger(spdlog::stderr_logger_mt("clothret"));
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*fuse) {
      std::vector<ScoredBox> boxes;
      for (const auto& path : fuse_inputs) {
        auto part = io::load_detections(path);
        boxes.insert(boxes.end(), part.begin(), part.end());
      }
      if (fuse_nms) {
        std::map<std::string, std::vector<ScoredBox>> per_image;
        for (const auto& b : boxes) per_image[b.image_id].push_back(b);
        std::vector<ScoredBox> kept;
        for (const auto& [image, group] : per_image) {
          auto k = nms(group, fuse_iou, true);
          kept.insert(kept.end(), k.begin(), k.end());
        }
        io::save_detections(kept, fuse_out);
        spdlog::info("nms: {} boxes in -> {} kept", boxes.size(), kept.size());
      } else {
        WbfParams params;
        params.iou_threshold = fuse_iou;
        params.model_weights = parse_weights(fuse_weights);
        params.num_models = fuse_num_models;
        params.score_mode = fuse_mode == "mean" ? ScoreMode::mean : ScoreMode::rescale;
        const auto fused = wbf_fuse_all(boxes, params, g.threads);
        io::save_fused(fused, fuse_out);
        spdlog::info("fuse: {} boxes in -> {} fused boxes out", boxes.size(), fused.size());
      }
    } else if (*eval_det) {
      EvalReport report;
      report.detection = detection_ap(io::load_detections(det_pred), io::load_detection_gt(det_gt));
      print_report(report, det_out);
    } else if (*search) {
      const auto m = io::load_embeddings(search_data, search_ids);
      const auto index = build_index(m.select(Source::gallery), search_restrict);
      const auto rankings = knn_search(index, m.select(Source::query), search_k, search_restrict, g.threads);
      io::save_rankings(rankings, search_out);
      spdlog::info("search: {} queries -> {} rankings", rankings.size(), rankings.size());
    } else if (*rerank) {
      const auto m = io::load_embeddings(rr_data, rr_ids);
      auto rankings = k_reciprocal_rerank(m.select(Source::query), m.select(Source::gallery),
                                          io::load_rankings(rr_rankings), rr_params, g.threads);
      if (rr_k) {
        for (auto& list : rankings) {
          if (list.entries.size() > *rr_k) list.entries.resize(*rr_k);
        }
      }
      io::save_rankings(rankings, rr_out);
    } else if (*eval_ret) {
      std::optional<std::unordered_set<std::string>> gallery;
      if (!ret_gallery_ids.empty()) {
        gallery.emplace();
        for (const auto& id : io::load_ids(ret_gallery_ids)) {
          if (id.source == Source::gallery) gallery->insert(id.item_id);
        }
      }
      EvalReport report;
      report.retrieval = acc_at_k(io::load_rankings(ret_rankings), io::load_retrieval_gt(ret_gt), ret_ks,
                                  gallery ? &*gallery : nullptr);
      print_report(report, ret_out);
    } else if (*run) {
      auto config = load_pipeline_config(run_config);
      if (app.get_option("--threads")->count() > 0) config.threads = g.threads;
      const auto result = run_pipeline(config);
      std::cout << io::format_report(result.report);
      std::cout << "report: " << result.report_path.string() << '\n';
    } else if (*gen) {
      std::ifstream in(gen_spec);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::config, std::string("spec is not valid JSON: ") + e.what());
      }
      if (g.seed) j["seed"] = *g.seed;
      const auto spec = synthetic_spec_from_json(j);
      const auto files = generate_synthetic(spec, gen_out, g.threads);
      std::cout << "wrote " << files.config.string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return e.code() == Errc::config || e.code() == Errc::parameter ? 2 : 1;
  }
  return 0;
}
