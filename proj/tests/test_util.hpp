#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "clothret/clothret.hpp"

namespace testutil {

using namespace clothret;

inline std::string pad(std::size_t i, int width = 5) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

/// N random unit rows of dimension `dim`; ids "<prefix><index>".
inline EmbeddingMatrix random_unit(CounterRng rng, std::size_t n, std::size_t dim, const std::string& prefix,
                                   Source source = Source::gallery, int categories = 1) {
  std::vector<double> data(n * dim);
  IdMap ids;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < dim; ++c) {
      data[r * dim + c] = rng.normal();
      s += data[r * dim + c] * data[r * dim + c];
    }
    for (std::size_t c = 0; c < dim; ++c) data[r * dim + c] /= std::sqrt(s);
    const int cat = 1 + static_cast<int>(r % static_cast<std::size_t>(categories));
    ids.push_back({prefix + pad(r), "img" + pad(r), "box" + pad(r), cat, source});
  }
  return EmbeddingMatrix(dim, std::move(data), std::move(ids));
}

inline EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows, const std::string& prefix,
                                 Source source = Source::gallery) {
  std::vector<double> data;
  IdMap ids;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    data.insert(data.end(), rows[r].begin(), rows[r].end());
    ids.push_back({prefix + pad(r), "img" + pad(r), "box" + pad(r), 1, source});
  }
  return EmbeddingMatrix(rows.front().size(), std::move(data), std::move(ids));
}

inline BoundingBox random_box(CounterRng& rng, double extent = 100.0) {
  const double x1 = rng.uniform(0, extent);
  const double y1 = rng.uniform(0, extent);
  return BoundingBox::make(x1, y1, x1 + rng.uniform(5, extent / 2), y1 + rng.uniform(5, extent / 2));
}

inline std::vector<ScoredBox> random_boxes(CounterRng& rng, std::size_t n, std::size_t models, int categories,
                                           const std::string& image = "img") {
  std::vector<ScoredBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({random_box(rng, 60.0), rng.uniform(0.05, 1.0), 1 + static_cast<int>(rng.below(categories)), image,
                   "m" + std::to_string(rng.below(models))});
  }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("clothret_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace testutil
