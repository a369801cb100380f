#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clothret/boxes.hpp"
#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/eval.hpp"
#include "clothret/search.hpp"

namespace clothret::io {

using nlohmann::json;

namespace detail {

inline std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
  return out;
}

inline bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

// Calls fn(json, line_number) for every non-blank line.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  auto in = open_in(path);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(Errc::parse, std::string("malformed JSON: ") + e.what(), number);
    }
    if (!record.is_object()) throw Error(Errc::parse, "record is not a JSON object", number);
    fn(record, number);
  }
}

inline const json& field(const json& record, const char* name, std::size_t line) {
  const auto it = record.find(name);
  if (it == record.end()) throw Error(Errc::parse, std::string("missing field '") + name + "'", line);
  return *it;
}

inline std::string string_field(const json& record, const char* name, std::size_t line) {
  const auto& v = field(record, name, line);
  if (!v.is_string()) throw Error(Errc::parse, std::string("field '") + name + "' must be a string", line);
  return v.get<std::string>();
}

inline std::int64_t int_field(const json& record, const char* name, std::size_t line) {
  const auto& v = field(record, name, line);
  if (!v.is_number_integer()) throw Error(Errc::parse, std::string("field '") + name + "' must be an integer", line);
  return v.get<std::int64_t>();
}

inline double number_field(const json& record, const char* name, std::size_t line) {
  const auto& v = field(record, name, line);
  if (!v.is_number()) throw Error(Errc::parse, std::string("field '") + name + "' must be a number", line);
  return v.get<double>();
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Detections JSONL
// {"image_id": str, "model_id": str, "category_id": int, "score": float,
//  "bbox": [x1, y1, x2, y2]}

inline ScoredBox parse_detection(const json& record, std::size_t line) {
  ScoredBox b;
  b.image_id = detail::string_field(record, "image_id", line);
  b.model_id = detail::string_field(record, "model_id", line);
  const auto category = detail::int_field(record, "category_id", line);
  if (category < 1 || category > std::numeric_limits<int>::max()) {
    throw Error(Errc::data, "field 'category_id' must be >= 1", line);
  }
  b.category_id = static_cast<int>(category);
  b.score = detail::number_field(record, "score", line);
  if (!(b.score >= 0.0 && b.score <= 1.0)) throw Error(Errc::data, "field 'score' must lie in [0, 1]", line);
  const auto& bbox = detail::field(record, "bbox", line);
  if (!bbox.is_array() || bbox.size() != 4 ||
      !std::all_of(bbox.begin(), bbox.end(), [](const json& v) { return v.is_number(); })) {
    throw Error(Errc::parse, "field 'bbox' must be an array of 4 numbers", line);
  }
  try {
    b.box = BoundingBox::make(bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
                              bbox[3].get<double>());
  } catch (const Error& e) {
    throw Error(Errc::data, std::string("field 'bbox': ") + e.what(), line);
  }
  return b;
}

inline json detection_json(const ScoredBox& b) {
  return json{{"image_id", b.image_id},
              {"model_id", b.model_id},
              {"category_id", b.category_id},
              {"score", b.score},
              {"bbox", {b.box.x1, b.box.y1, b.box.x2, b.box.y2}}};
}

inline std::vector<ScoredBox> load_detections(const std::filesystem::path& path) {
  std::vector<ScoredBox> out;
  detail::for_each_jsonl(path, [&](const json& r, std::size_t line) { out.push_back(parse_detection(r, line)); });
  return out;
}

inline void save_detections(const std::vector<ScoredBox>& boxes, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  for (const auto& b : boxes) out << detection_json(b).dump() << '\n';
  if (!out) throw Error(Errc::io, "write to '" + path.string() + "' failed");
}

/// Ground truth uses the detection format; score and model_id are ignored.
inline GroundTruthDet load_detection_gt(const std::filesystem::path& path) {
  GroundTruthDet gt;
  for (const auto& b : load_detections(path)) gt[b.image_id].push_back(GtBox{b.box, b.category_id});
  return gt;
}

/// Stable id of the i-th fused box of an image; the key embedding producers
/// use in the ids sidecar `box_id` field.
inline std::string fused_box_id(const std::string& image_id, std::size_t i) {
  return image_id + "#" + std::to_string(i);
}

/// Fused boxes as detection records (model_id "wbf") plus box_id,
/// cluster_size and model_ids, so the file can be scored with eval-det.
inline void save_fused(const std::vector<FusedBox>& fused, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  std::map<std::string, std::size_t> counter;
  for (const auto& f : fused) {
    json r = detection_json(ScoredBox{f.box, f.score, f.category_id, f.image_id, "wbf"});
    r["box_id"] = fused_box_id(f.image_id, counter[f.image_id]++);
    r["cluster_size"] = f.cluster_size;
    r["model_ids"] = f.model_ids;
    out << r.dump() << '\n';
  }
  if (!out) throw Error(Errc::io, "write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------------------
// Embeddings: "EMB1" | u32 rows | u32 dim | rows*dim little-endian float32,
// plus an ids JSONL sidecar with one record per row.

inline void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& data_path,
                            const std::filesystem::path& ids_path) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() || m.dim() > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(Errc::data, "matrix too large for the EMB1 format");
  }
  auto out = detail::open_out(data_path, std::ios::binary);
  out.write("EMB1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (const double v : m.data()) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) throw Error(Errc::data, "value not representable as float32");
    detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw Error(Errc::io, "write to '" + data_path.string() + "' failed");

  auto ids = detail::open_out(ids_path);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto& id = m.id(r);
    ids << json{{"row", r},
                {"item_id", id.item_id},
                {"image_id", id.image_id},
                {"box_id", id.box_id},
                {"category_id", id.category_id},
                {"source", to_string(id.source)}}
               .dump()
        << '\n';
  }
  if (!ids) throw Error(Errc::io, "write to '" + ids_path.string() + "' failed");
}

inline IdMap load_ids(const std::filesystem::path& ids_path) {
  std::vector<std::pair<std::int64_t, ItemRecord>> rows;
  detail::for_each_jsonl(ids_path, [&](const json& r, std::size_t line) {
    ItemRecord rec;
    const auto row = detail::int_field(r, "row", line);
    rec.item_id = detail::string_field(r, "item_id", line);
    rec.image_id = detail::string_field(r, "image_id", line);
    rec.box_id = detail::string_field(r, "box_id", line);
    const auto category = detail::int_field(r, "category_id", line);
    if (category < 1 || category > std::numeric_limits<int>::max()) {
      throw Error(Errc::data, "field 'category_id' must be >= 1", line);
    }
    rec.category_id = static_cast<int>(category);
    const auto source = detail::string_field(r, "source", line);
    if (source == "query") {
      rec.source = Source::query;
    } else if (source == "gallery") {
      rec.source = Source::gallery;
    } else {
      throw Error(Errc::data, "field 'source' must be \"query\" or \"gallery\"", line);
    }
    rows.emplace_back(row, std::move(rec));
  });
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  IdMap ids;
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<std::int64_t>(i)) {
      throw Error(Errc::count_mismatch, "ids file '" + ids_path.string() + "' does not list rows 0.." +
                                            std::to_string(rows.size() - 1) + " exactly once");
    }
    ids.push_back(std::move(rows[i].second));
  }
  return ids;
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& data_path, const std::filesystem::path& ids_path) {
  auto in = detail::open_in(data_path, std::ios::binary);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "EMB1") {
    throw Error(Errc::bad_magic, "'" + data_path.string() + "' is not an EMB1 file");
  }
  if (bytes.size() < 12) throw Error(Errc::truncated, "'" + data_path.string() + "' has a truncated header");
  const std::uint32_t rows = detail::get_u32(bytes.data() + 4);
  const std::uint32_t dim = detail::get_u32(bytes.data() + 8);
  if (rows == 0) throw Error(Errc::empty_matrix, "empty matrix in '" + data_path.string() + "'");
  if (dim == 0) throw Error(Errc::dimension, "zero dimension in '" + data_path.string() + "'");
  const std::uint64_t expected = 12 + 4ULL * rows * dim;
  if (bytes.size() != expected) {
    throw Error(Errc::truncated, "'" + data_path.string() + "' payload is " + std::to_string(bytes.size() - 12) +
                                     " bytes, header implies " + std::to_string(expected - 12));
  }

  std::vector<double> data(static_cast<std::size_t>(rows) * dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes.data() + 12 + 4 * i)));
  }

  auto ids = load_ids(ids_path);
  if (ids.size() != rows) {
    throw Error(Errc::count_mismatch, "ids file lists " + std::to_string(ids.size()) + " rows, data file has " +
                                          std::to_string(rows));
  }
  return EmbeddingMatrix(dim, std::move(data), std::move(ids));
}

// ---------------------------------------------------------------------------
// Rankings TSV: query_id \t rank (1-based) \t gallery item_id \t score

inline std::string format_score(double score) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", score);
  return buf;
}

inline void write_rankings(const std::vector<RankingList>& rankings, std::ostream& out) {
  for (const auto& list : rankings) {
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      out << list.query_id << '\t' << (r + 1) << '\t' << list.entries[r].item_id << '\t'
          << format_score(list.entries[r].score) << '\n';
    }
  }
}

inline void save_rankings(const std::vector<RankingList>& rankings, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  write_rankings(rankings, out);
  if (!out) throw Error(Errc::io, "write to '" + path.string() + "' failed");
}

inline std::vector<RankingList> load_rankings(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::vector<RankingList> out;
  std::map<std::string, std::size_t> slot;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (detail::blank(line)) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 4) throw Error(Errc::parse, "expected 4 tab-separated columns", number);
    std::size_t rank = 0;
    double score = 0.0;
    try {
      std::size_t used = 0;
      rank = std::stoul(cols[1], &used);
      if (used != cols[1].size()) throw std::invalid_argument("rank");
      score = std::stod(cols[3], &used);
      if (used != cols[3].size()) throw std::invalid_argument("score");
    } catch (const std::exception&) {
      throw Error(Errc::parse, "rank or score column is not numeric", number);
    }
    auto [it, fresh] = slot.emplace(cols[0], out.size());
    if (fresh) out.push_back(RankingList{cols[0], {}});
    auto& list = out[it->second];
    if (rank != list.entries.size() + 1) {
      throw Error(Errc::parse, "rank " + std::to_string(rank) + " out of sequence for query '" + cols[0] + "'",
                  number);
    }
    list.entries.push_back({cols[2], score});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval ground truth JSONL: {"query_id": str, "matches": [str, ...]}

inline GroundTruthRet load_retrieval_gt(const std::filesystem::path& path) {
  GroundTruthRet gt;
  detail::for_each_jsonl(path, [&](const json& r, std::size_t line) {
    const auto query = detail::string_field(r, "query_id", line);
    const auto& matches = detail::field(r, "matches", line);
    if (!matches.is_array()) throw Error(Errc::parse, "field 'matches' must be an array", line);
    auto& set = gt[query];
    for (const auto& m : matches) {
      if (!m.is_string()) throw Error(Errc::parse, "field 'matches' must hold strings", line);
      set.insert(m.get<std::string>());
    }
  });
  return gt;
}

inline void save_retrieval_gt(const GroundTruthRet& gt, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  for (const auto& [query, matches] : gt) out << json{{"query_id", query}, {"matches", matches}}.dump() << '\n';
  if (!out) throw Error(Errc::io, "write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------------------
// Report JSON

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline json report_json(const EvalReport& report, const std::string& config_digest) {
  json out;
  if (report.detection) {
    const auto& d = *report.detection;
    json per_category = json::object();
    for (const auto& [category, c] : d.per_category) {
      per_category[std::to_string(category)] = {
          {"ap", c.ap}, {"ap50", c.ap50}, {"ap75", c.ap75}, {"num_gt", c.num_gt}, {"num_pred", c.num_pred}};
    }
    out["detection"] = {{"ap", d.ap},
                        {"ap50", d.ap50},
                        {"ap75", d.ap75},
                        {"iou_thresholds", d.iou_thresholds},
                        {"per_category", per_category},
                        {"tp", d.tp},
                        {"fp", d.fp},
                        {"fn", d.fn},
                        {"num_gt", d.num_gt}};
  } else {
    out["detection"] = nullptr;
  }
  if (report.retrieval) {
    const auto& r = *report.retrieval;
    json acc = json::object();
    for (const auto& [k, v] : r.acc) acc[std::to_string(k)] = v;
    out["retrieval"] = {{"acc", acc},
                        {"num_queries", r.num_queries},
                        {"num_excluded", r.num_excluded},
                        {"unreachable", r.unreachable}};
  } else {
    out["retrieval"] = nullptr;
  }
  out["config_digest"] = config_digest;
  return out;
}

inline void save_report(const EvalReport& report, const std::string& config_digest,
                        const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << report_json(report, config_digest).dump(2) << '\n';
  if (!out) throw Error(Errc::io, "write to '" + path.string() + "' failed");
}

/// Plain-text summary table for terminals.
inline std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  char buf[128];
  if (report.detection) {
    const auto& d = *report.detection;
    os << "detection\n";
    std::snprintf(buf, sizeof(buf), "  %-10s %8s %8s %8s %6s\n", "category", "AP", "AP50", "AP75", "#gt");
    os << buf;
    for (const auto& [category, c] : d.per_category) {
      std::snprintf(buf, sizeof(buf), "  %-10d %8.4f %8.4f %8.4f %6zu\n", category, c.ap, c.ap50, c.ap75, c.num_gt);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "  %-10s %8.4f %8.4f %8.4f %6zu\n", "mean", d.ap, d.ap50, d.ap75, d.num_gt);
    os << buf;
    std::snprintf(buf, sizeof(buf), "  TP %zu  FP %zu  FN %zu\n", d.tp, d.fp, d.fn);
    os << buf;
  }
  if (report.retrieval) {
    const auto& r = *report.retrieval;
    os << "retrieval\n";
    for (const auto& [k, v] : r.acc) {
      std::snprintf(buf, sizeof(buf), "  Acc@%-4zu %.6f\n", k, v);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "  queries %zu  excluded %zu  unreachable %zu\n", r.num_queries, r.num_excluded,
                  r.unreachable.size());
    os << buf;
  }
  return os.str();
}

}  // namespace clothret::io
