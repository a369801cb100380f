#pragma once

// Straight-from-definition reference implementations used only by tests.
// They favor obviousness over speed and share no code paths with the library
// beyond its plain data types.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "clothret/clothret.hpp"

namespace oracle {

using namespace clothret;

inline double area(double x1, double y1, double x2, double y2) {
  return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = area(std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2));
  const double uni = area(a.x1, a.y1, a.x2, a.y2) + area(b.x1, b.y1, b.x2, b.y2) - inter;
  return inter / uni;
}

// Processing order: descending key, ties by model id, then input position.
inline std::vector<std::size_t> order(const std::vector<ScoredBox>& boxes, const std::vector<double>& key) {
  std::vector<std::size_t> idx(boxes.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Insertion sort keeps it transparently stable.
  for (std::size_t i = 1; i < idx.size(); ++i) {
    for (std::size_t j = i; j > 0; --j) {
      const auto a = idx[j - 1];
      const auto b = idx[j];
      const bool swap = key[b] > key[a] || (key[b] == key[a] && boxes[b].model_id < boxes[a].model_id);
      if (!swap) break;
      std::swap(idx[j - 1], idx[j]);
    }
  }
  return idx;
}

inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes, double thr) {
  std::vector<double> key;
  for (const auto& b : boxes) key.push_back(b.score);
  const auto idx = order(boxes, key);
  std::vector<bool> removed(boxes.size(), false);
  std::vector<ScoredBox> kept;
  for (std::size_t a = 0; a < idx.size(); ++a) {
    if (removed[idx[a]]) continue;
    kept.push_back(boxes[idx[a]]);
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      if (boxes[idx[b]].category_id == boxes[idx[a]].category_id && oracle::iou(boxes[idx[a]].box, boxes[idx[b]].box) >= thr) {
        removed[idx[b]] = true;
      }
    }
  }
  return kept;
}

struct OracleCluster {
  std::vector<std::size_t> members;
  BoundingBox fused;
};

// Rebuilds each cluster's fused box from its full member list after every
// insertion instead of keeping running sums.
inline std::vector<FusedBox> wbf(const std::vector<ScoredBox>& boxes, double thr,
                                 const std::map<std::string, double>& weights, std::size_t n_models, bool rescale) {
  std::vector<double> w(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const double mw = weights.empty() ? 1.0 : weights.at(boxes[i].model_id);
    w[i] = std::min(1.0, std::max(0.0, boxes[i].score * mw));
  }
  const auto idx = order(boxes, w);

  auto rebuild = [&](OracleCluster& c) {
    double sw = 0, x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    for (const auto m : c.members) {
      sw += w[m];
      x1 += w[m] * boxes[m].box.x1;
      y1 += w[m] * boxes[m].box.y1;
      x2 += w[m] * boxes[m].box.x2;
      y2 += w[m] * boxes[m].box.y2;
    }
    c.fused = BoundingBox{x1 / sw, y1 / sw, x2 / sw, y2 / sw};
  };

  std::map<int, std::vector<OracleCluster>> cats;
  for (const auto i : idx) {
    auto& clusters = cats[boxes[i].category_id];
    bool placed = false;
    for (auto& c : clusters) {
      if (oracle::iou(c.fused, boxes[i].box) > thr) {
        c.members.push_back(i);
        rebuild(c);
        placed = true;
        break;
      }
    }
    if (!placed) {
      clusters.push_back({{i}, {}});
      rebuild(clusters.back());
    }
  }

  std::vector<FusedBox> out;
  for (const auto& [cat, clusters] : cats) {
    for (const auto& c : clusters) {
      FusedBox f;
      f.box = c.fused;
      f.category_id = cat;
      f.image_id = boxes[c.members.front()].image_id;
      f.cluster_size = c.members.size();
      double s = 0;
      for (const auto m : c.members) {
        s += w[m];
        f.model_ids.insert(boxes[m].model_id);
      }
      s /= static_cast<double>(c.members.size());
      if (rescale) {
        s = s * static_cast<double>(std::min(c.members.size(), n_models)) / static_cast<double>(n_models);
        s = std::min(1.0, std::max(0.0, s));
      }
      f.score = s;
      out.push_back(f);
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const FusedBox& a, const FusedBox& b) { return a.score > b.score; });
  return out;
}

inline std::vector<double> gem(const FeatureMap& m, double p) {
  std::vector<double> out;
  for (std::size_t c = 0; c < m.channels(); ++c) {
    double s = 0;
    for (const double x : m.channel(c)) s += std::pow(x, p);
    out.push_back(std::pow(s / static_cast<double>(m.cells()), 1.0 / p));
  }
  return out;
}

inline std::vector<double> mac(const FeatureMap& m) {
  std::vector<double> out;
  for (std::size_t c = 0; c < m.channels(); ++c) {
    double best = 0;
    for (const double x : m.channel(c)) best = std::max(best, x);
    out.push_back(best);
  }
  return out;
}

inline std::vector<double> unit(std::vector<double> v) {
  double s = 0;
  for (const double x : v) s += x * x;
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

// Full sort of every gallery row; no partial selection.
inline std::vector<RankingList> knn(const EmbeddingMatrix& gallery, const EmbeddingMatrix& queries, std::size_t k) {
  std::vector<RankingList> out;
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    std::vector<RankingEntry> all;
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      double s = 0;
      for (std::size_t c = 0; c < gallery.dim(); ++c) s += queries.row(q)[c] * gallery.row(g)[c];
      all.push_back({gallery.id(g).item_id, s});
    }
    std::sort(all.begin(), all.end(), [](const RankingEntry& a, const RankingEntry& b) {
      return a.score > b.score || (a.score == b.score && a.item_id < b.item_id);
    });
    all.resize(std::min(k, all.size()));
    out.push_back({queries.id(q).item_id, all});
  }
  return out;
}

// Dense k-reciprocal final distances, query x gallery.
inline std::vector<std::vector<double>> k_reciprocal(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                                                     std::size_t k1, std::size_t k2, double lambda) {
  const std::size_t nq = queries.rows();
  const std::size_t n = nq + gallery.rows();
  auto vec = [&](std::size_t i) { return i < nq ? queries.row(i) : gallery.row(i - nq); };
  std::vector<std::vector<double>> d(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < queries.dim(); ++c) s += vec(i)[c] * vec(j)[c];
      d[i][j] = i == j ? 0.0 : 1.0 - s;
    }
  }
  // Full ranking of all points for each point: self first, then distance, then index.
  std::vector<std::vector<std::size_t>> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), std::size_t{0});
    std::stable_sort(r.begin(), r.end(), [&](std::size_t a, std::size_t b) {
      if (d[i][a] != d[i][b]) return d[i][a] < d[i][b];
      if ((a == i) != (b == i)) return a == i;
      return a < b;
    });
    rank[i] = r;
  }
  auto top = [&](std::size_t p, std::size_t k) {
    return std::set<std::size_t>(rank[p].begin(), rank[p].begin() + static_cast<std::ptrdiff_t>(std::min(k + 1, n)));
  };
  auto recip = [&](std::size_t p, std::size_t k) {
    std::set<std::size_t> out;
    for (const auto c : top(p, k)) {
      if (top(c, k).count(p)) out.insert(c);
    }
    return out;
  };
  const auto half = static_cast<std::size_t>(std::nearbyint(static_cast<double>(k1) / 2.0));

  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < n; ++p) {
    const auto r = recip(p, k1);
    std::set<std::size_t> star = r;
    for (const auto c : r) {
      const auto rc = recip(c, half);
      std::size_t common = 0;
      for (const auto x : rc) common += r.count(x);
      if (static_cast<double>(common) >= 2.0 / 3.0 * static_cast<double>(rc.size()) - 1e-12) {
        star.insert(rc.begin(), rc.end());
      }
    }
    for (const auto g : star) v[p][g] = std::exp(-d[p][g]);
  }
  std::vector<std::vector<double>> vq(n, std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t take = std::min(k2, n);
    for (std::size_t t = 0; t < take; ++t) {
      for (std::size_t j = 0; j < n; ++j) vq[p][j] += v[rank[p][t]][j] / static_cast<double>(take);
    }
  }

  std::vector<std::vector<double>> out(nq, std::vector<double>(gallery.rows()));
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      double mn = 0, mx = 0;
      for (std::size_t j = 0; j < n; ++j) {
        mn += std::min(vq[q][j], vq[nq + g][j]);
        mx += std::max(vq[q][j], vq[nq + g][j]);
      }
      const double jac = 1.0 - mn / mx;
      out[q][g] = (1.0 - lambda) * jac + lambda * d[q][nq + g];
    }
  }
  return out;
}

// Expansion by brute force over every row; `pool_excludes_self` drops the
// row's own index from its neighbor candidates (database side).
inline std::vector<std::vector<double>> expand(const EmbeddingMatrix& rows, const EmbeddingMatrix& pool,
                                               std::size_t k, double alpha, bool include_self,
                                               bool pool_excludes_self) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t g = 0; g < pool.rows(); ++g) {
      if (pool_excludes_self && g == r) continue;
      double s = 0;
      for (std::size_t c = 0; c < pool.dim(); ++c) s += rows.row(r)[c] * pool.row(g)[c];
      cand.push_back({s, g});
    }
    std::sort(cand.begin(), cand.end(), [&](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && pool.id(a.second).item_id < pool.id(b.second).item_id);
    });
    std::vector<double> acc(pool.dim(), 0.0);
    if (include_self) {
      for (std::size_t c = 0; c < pool.dim(); ++c) acc[c] = rows.row(r)[c];
    }
    for (std::size_t i = 0; i < std::min(k, cand.size()); ++i) {
      const double w = std::pow(std::max(0.0, cand[i].first), alpha);
      for (std::size_t c = 0; c < pool.dim(); ++c) acc[c] += w * pool.row(cand[i].second)[c];
    }
    out.push_back(unit(acc));
  }
  return out;
}

// AP by explicit scan: for each recall level r, the best precision among all
// ranks whose recall reaches r.
inline double ap_101(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(hits) / static_cast<double>(num_gt));
  }
  double total = 0;
  for (int level = 0; level <= 100; ++level) {
    double best = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      if (rec[i] + 1e-12 >= level / 100.0) best = std::max(best, prec[i]);
    }
    total += best;
  }
  return total / 101.0;
}

// Mean over categories of AP at one threshold, exhaustive matching.
inline double detection_ap_at(const std::vector<ScoredBox>& preds, const GroundTruthDet& gt, double thr) {
  std::set<int> cats;
  for (const auto& [img, boxes] : gt) {
    for (const auto& g : boxes) cats.insert(g.category_id);
  }
  for (const auto& p : preds) cats.insert(p.category_id);
  double sum = 0;
  for (const int cat : cats) {
    std::vector<ScoredBox> ps;
    for (const auto& p : preds) {
      if (p.category_id == cat) ps.push_back(p);
    }
    std::sort(ps.begin(), ps.end(), [](const ScoredBox& a, const ScoredBox& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.image_id, a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.model_id) <
             std::tie(b.image_id, b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.model_id);
    });
    std::size_t num_gt = 0;
    std::set<std::pair<std::string, std::size_t>> used;
    for (const auto& [img, boxes] : gt) {
      for (const auto& g : boxes) num_gt += g.category_id == cat ? 1 : 0;
    }
    std::vector<bool> tp;
    for (const auto& p : ps) {
      double best = -1;
      std::size_t bj = 0;
      if (gt.count(p.image_id)) {
        const auto& boxes = gt.at(p.image_id);
        for (std::size_t j = 0; j < boxes.size(); ++j) {
          if (boxes[j].category_id != cat || used.count({p.image_id, j})) continue;
          const double o = oracle::iou(p.box, boxes[j].box);
          if (o >= thr && o > best) {
            best = o;
            bj = j;
          }
        }
      }
      if (best >= 0) used.insert({p.image_id, bj});
      tp.push_back(best >= 0);
    }
    sum += ap_101(tp, num_gt);
  }
  return cats.empty() ? 0.0 : sum / static_cast<double>(cats.size());
}

}  // namespace oracle
