#include <gtest/gtest.h>

#include <numbers>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace clothret;

namespace {

// Unit rows scattered around `clusters` random centers; ids carry the cluster.
EmbeddingMatrix clustered(CounterRng rng, std::size_t n, std::size_t dim, std::size_t clusters, double spread,
                          const std::string& prefix, Source source) {
  std::vector<std::vector<double>> centers(clusters, std::vector<double>(dim));
  CounterRng crng = rng.fork(0);
  for (auto& c : centers) {
    for (auto& v : c) v = crng.normal();
  }
  std::vector<double> data;
  IdMap ids;
  CounterRng prng = rng.fork(source == Source::query ? 1 : 2);
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> v = centers[r % clusters];
    for (auto& x : v) x += spread * prng.normal();
    v = oracle::unit(v);
    data.insert(data.end(), v.begin(), v.end());
    ids.push_back({prefix + testutil::pad(r), "img", "b", 1, source});
  }
  return EmbeddingMatrix(dim, std::move(data), std::move(ids));
}

std::vector<double> on_circle(double deg) {
  const double rad = deg * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad), 0.0};
}

void expect_rows_near(const EmbeddingMatrix& got, const std::vector<std::vector<double>>& want, double tol) {
  ASSERT_EQ(got.rows(), want.size());
  for (std::size_t r = 0; r < want.size(); ++r) {
    for (std::size_t c = 0; c < got.dim(); ++c) EXPECT_NEAR(got.row(r)[c], want[r][c], tol) << "row " << r;
  }
}

}  // namespace

TEST(QueryExpansion, ZeroNeighborsIsExactIdentity) {
  const CounterRng rng(41, 0);
  const auto gallery = testutil::random_unit(rng.fork(1), 50, 8, "g");
  const auto queries = testutil::random_unit(rng.fork(2), 10, 8, "q", Source::query);
  QeParams p;
  p.k = 0;
  EXPECT_EQ(query_expansion(queries, build_index(gallery), p).data(), queries.data());
  EXPECT_EQ(database_augmentation(gallery, p).data(), gallery.data());
}

TEST(QueryExpansion, MatchesBruteForceOracle) {
  const CounterRng rng(42, 0);
  const auto gallery = testutil::random_unit(rng.fork(1), 120, 12, "g");
  const auto queries = testutil::random_unit(rng.fork(2), 30, 12, "q", Source::query);
  const auto index = build_index(gallery);
  for (const double alpha : {0.0, 1.0, 3.0}) {
    for (const bool self : {true, false}) {
      QeParams p{5, alpha, self};
      expect_rows_near(query_expansion(queries, index, p, 3), oracle::expand(queries, gallery, 5, alpha, self, false),
                       1e-12);
      expect_rows_near(database_augmentation(gallery, p, 3), oracle::expand(gallery, gallery, 5, alpha, self, true),
                       1e-12);
    }
  }
}

TEST(QueryExpansion, DuplicateNeighborhoodIsFixedPoint) {
  // Five well separated directions, each repeated four times.
  std::vector<std::vector<double>> rows;
  for (int d = 0; d < 5; ++d) {
    for (int copy = 0; copy < 4; ++copy) {
      std::vector<double> v(5, 0.05);
      v[static_cast<std::size_t>(d)] = 1.0;
      rows.push_back(oracle::unit(v));
    }
  }
  const auto gallery = testutil::from_rows(rows, "g");
  for (const double alpha : {0.0, 2.0}) {
    const QeParams p{3, alpha, true};
    const auto once = database_augmentation(gallery, p);
    expect_rows_near(once, rows, 1e-12);
    expect_rows_near(database_augmentation(once, p), rows, 1e-12);
    const auto queries = testutil::from_rows({rows[0], rows[4]}, "q", Source::query);
    expect_rows_near(query_expansion(queries, build_index(gallery), p), {rows[0], rows[4]}, 1e-12);
  }
}

TEST(QueryExpansion, TwentyPointCircleFixture) {
  // Rows on a circle, alternately 14 and 22 degrees apart. With k = 2 each
  // row takes its two adjacent rows (the next ones sit 36 degrees away).
  // With alpha = 2 a neighbor at angle t weighs cos(t)^2, so for gaps a
  // (to the previous row) and b (to the next) the sum has components
  //   along x_i:  1 + cos(a)^3 + cos(b)^3
  //   across:     cos(b)^2 sin(b) - cos(a)^2 sin(a)
  std::vector<std::vector<double>> rows;
  std::vector<double> angle;
  for (int i = 0; i < 20; ++i) {
    angle.push_back(18.0 * i + (i % 2 == 1 ? 4.0 : 0.0));
    rows.push_back(on_circle(angle.back()));
  }
  const auto gallery = testutil::from_rows(rows, "g");
  const auto rad = [](double deg) { return deg * std::numbers::pi / 180.0; };
  std::vector<std::vector<double>> want;
  for (int i = 0; i < 20; ++i) {
    const double a = rad(i % 2 == 0 ? 14.0 : 22.0);
    const double b = rad(i % 2 == 0 ? 22.0 : 14.0);
    const double along = 1.0 + std::pow(std::cos(a), 3) + std::pow(std::cos(b), 3);
    const double across = std::pow(std::cos(b), 2) * std::sin(b) - std::pow(std::cos(a), 2) * std::sin(a);
    want.push_back(on_circle(angle[static_cast<std::size_t>(i)] + std::atan2(across, along) * 180.0 / std::numbers::pi));
  }
  expect_rows_near(database_augmentation(gallery, QeParams{2, 2.0, true}, 4), want, 1e-9);
}

TEST(QueryExpansion, ParameterAndPreconditionErrors) {
  const auto gallery = testutil::random_unit(CounterRng(43, 0), 10, 4, "g");
  EXPECT_THROW(database_augmentation(gallery, QeParams{2, -1.0, true}), Error);
  const auto raw = testutil::from_rows({{2.0, 0, 0, 0}}, "q", Source::query);
  EXPECT_THROW(query_expansion(raw, build_index(gallery), QeParams{}), Error);
}

TEST(KReciprocal, FinalDistanceMatchesDenseOracle) {
  const CounterRng rng(44, 0);
  const auto gallery = clustered(rng, 140, 16, 12, 0.35, "g", Source::gallery);
  const auto queries = clustered(rng, 40, 16, 12, 0.35, "q", Source::query);
  for (const auto& params : {RerankParams{20, 6, 0.3}, RerankParams{7, 3, 0.0}, RerankParams{5, 1, 0.5}}) {
    const KReciprocalEncoder enc(queries, gallery, params, 2);
    const auto want = oracle::k_reciprocal(queries, gallery, params.k1, params.k2, params.lambda);
    for (std::size_t q = 0; q < queries.rows(); ++q) {
      for (std::size_t g = 0; g < gallery.rows(); ++g) EXPECT_NEAR(enc.final_distance(q, g), want[q][g], 1e-6);
    }
  }
}

TEST(KReciprocal, NeighborListsStartWithSelf) {
  const CounterRng rng(45, 0);
  const auto gallery = clustered(rng, 60, 8, 5, 0.3, "g", Source::gallery);
  const auto queries = clustered(rng, 10, 8, 5, 0.3, "q", Source::query);
  const KReciprocalEncoder enc(queries, gallery, RerankParams{10, 4, 0.3});
  for (std::size_t p = 0; p < enc.num_points(); ++p) {
    ASSERT_EQ(enc.neighbors(p).size(), 11u);
    EXPECT_EQ(enc.neighbors(p)[0], p);
  }
}

TEST(KReciprocal, JaccardIsSymmetricAndBounded) {
  const CounterRng rng(46, 0);
  const auto gallery = clustered(rng, 80, 8, 6, 0.4, "g", Source::gallery);
  const auto queries = clustered(rng, 20, 8, 6, 0.4, "q", Source::query);
  const KReciprocalEncoder enc(queries, gallery, RerankParams{10, 4, 0.3});
  for (std::size_t a = 0; a < enc.num_points(); ++a) {
    EXPECT_NEAR(enc.jaccard(a, a), 0.0, 1e-15);
    for (std::size_t b = 0; b < enc.num_points(); ++b) {
      EXPECT_NEAR(enc.jaccard(a, b), enc.jaccard(b, a), 1e-15);
      EXPECT_GE(enc.jaccard(a, b), 0.0);
      EXPECT_LE(enc.jaccard(a, b), 1.0);
    }
  }
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      EXPECT_GE(enc.final_distance(q, g), 0.0);
      EXPECT_LE(enc.final_distance(q, g), 2.0);
    }
  }
}

TEST(KReciprocal, LambdaOneKeepsInitialOrder) {
  const CounterRng rng(47, 0);
  const auto gallery = clustered(rng, 150, 16, 10, 0.5, "g", Source::gallery);
  const auto queries = clustered(rng, 30, 16, 10, 0.5, "q", Source::query);
  const auto initial = knn_search(build_index(gallery), queries, 40);
  const auto out = k_reciprocal_rerank(queries, gallery, initial, RerankParams{20, 6, 1.0}, 3);
  for (std::size_t q = 0; q < out.size(); ++q) {
    ASSERT_EQ(out[q].entries.size(), initial[q].entries.size());
    for (std::size_t i = 0; i < out[q].entries.size(); ++i) {
      EXPECT_EQ(out[q].entries[i].item_id, initial[q].entries[i].item_id);
    }
  }
}

TEST(KReciprocal, RerankOrdersByFinalDistanceAndIsThreadInvariant) {
  const CounterRng rng(48, 0);
  const auto gallery = clustered(rng, 150, 16, 10, 0.5, "g", Source::gallery);
  const auto queries = clustered(rng, 30, 16, 10, 0.5, "q", Source::query);
  const auto initial = knn_search(build_index(gallery), queries, 60);
  const RerankParams params{20, 6, 0.3};
  const auto out = k_reciprocal_rerank(queries, gallery, initial, params, 1);
  EXPECT_EQ(k_reciprocal_rerank(queries, gallery, initial, params, 8), out);
  const auto want = oracle::k_reciprocal(queries, gallery, 20, 6, 0.3);
  for (std::size_t q = 0; q < out.size(); ++q) {
    std::set<std::string> before, after;
    for (const auto& e : initial[q].entries) before.insert(e.item_id);
    for (const auto& e : out[q].entries) after.insert(e.item_id);
    EXPECT_EQ(before, after);
    for (std::size_t i = 0; i < out[q].entries.size(); ++i) {
      const std::size_t g = std::stoul(out[q].entries[i].item_id.substr(1));
      EXPECT_NEAR(out[q].entries[i].score, 1.0 - want[q][g], 1e-6);
      if (i > 0) EXPECT_GE(out[q].entries[i - 1].score, out[q].entries[i].score);
    }
  }
}

TEST(KReciprocal, InputErrors) {
  const CounterRng rng(50, 0);
  const auto gallery = clustered(rng, 30, 8, 3, 0.3, "g", Source::gallery);
  const auto queries = clustered(rng, 5, 8, 3, 0.3, "q", Source::query);
  const auto initial = knn_search(build_index(gallery), queries, 10);
  try {
    k_reciprocal_rerank(queries, gallery, initial, RerankParams{20, 6, 0.3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::precondition);
  }
  EXPECT_THROW(k_reciprocal_rerank(queries, gallery, initial, RerankParams{5, 6, 0.3}), Error);
  EXPECT_THROW(k_reciprocal_rerank(queries, gallery, initial, RerankParams{5, 2, 1.5}), Error);
  EXPECT_THROW(KReciprocalEncoder(queries, gallery.select(std::vector<std::size_t>{0, 1}), RerankParams{5, 2, 0.3}),
               Error);
  auto bad = initial;
  bad[0].entries[0].item_id = "nope";
  try {
    k_reciprocal_rerank(queries, gallery, bad, RerankParams{5, 2, 0.3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::input);
  }
}
