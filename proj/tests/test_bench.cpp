#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "loopforge/bench.hpp"
#include "loopforge/codegen.hpp"
#include "test_util.hpp"

using namespace loopforge;
using namespace loopforge::test;

namespace {

BenchmarkConfig config(int64_t nq, int64_t ne, uint64_t seed = 1, int level = kMaxLevel) {
  BenchmarkConfig cfg;
  cfg.nq = nq;
  cfg.ne = ne;
  cfg.seed = seed;
  cfg.level = level;
  return cfg;
}

// Direct evaluation of the volume term, one output point at a time, with
// every flux recomputed where it is used.
std::vector<double> brute_force(const FieldState& s, const PhysicalConstants& c) {
  const int64_t nq = s.nq, pts = nq * nq * nq;
  auto q = [&](int64_t i, int64_t j, int64_t k, int64_t b, int64_t e) {
    return static_cast<double>(s.q[i + nq * (j + nq * k) + pts * (b + kFields * e)]);
  };
  auto g = [&](int64_t i, int64_t j, int64_t k, int64_t a, int64_t dir, int64_t e) {
    return static_cast<double>(s.g[i + nq * (j + nq * k) + pts * (a + 3 * (dir + 3 * e))]);
  };
  auto flux = [&](int64_t i, int64_t j, int64_t k, int64_t dir, int64_t b, int64_t e) {
    const double rho = q(i, j, k, 0, e);
    const double p = c.p0 * std::pow(c.R * q(i, j, k, 4, e) / c.p0, c.gamma);
    double total = 0.0;
    // Contract the flux columns with the metric of this direction.
    for (int a = 0; a < 3; ++a) {
      const double u = q(i, j, k, 1 + a, e) / rho;
      double f = 0.0;
      if (b == 0) {
        f = q(i, j, k, 1 + a, e);
      } else if (b <= 3) {
        f = q(i, j, k, b, e) * u + (b - 1 == a ? p : 0.0);
      } else {
        f = q(i, j, k, b, e) * u;
      }
      total += g(i, j, k, a, dir, e) * f;
    }
    return total;
  };
  auto d = [&](int64_t i, int64_t n) { return static_cast<double>(s.D[i + nq * n]); };
  std::vector<double> out(s.q.size());
  for (int64_t e = 0; e < s.ne; ++e) {
    for (int64_t b = 0; b < kFields; ++b) {
      for (int64_t k = 0; k < nq; ++k) {
        for (int64_t j = 0; j < nq; ++j) {
          for (int64_t i = 0; i < nq; ++i) {
            double acc = 0.0;
            for (int64_t n = 0; n < nq; ++n) {
              acc += d(i, n) * flux(n, j, k, 0, b, e) + d(j, n) * flux(i, n, k, 1, b, e) +
                     d(k, n) * flux(i, j, n, 2, b, e);
            }
            const int64_t x = i + nq * (j + nq * k) + pts * (b + kFields * e);
            out[x] = acc * s.Jinv[i + nq * (j + nq * k) + pts * e];
          }
        }
      }
    }
  }
  return out;
}

double max_abs(const std::vector<float>& v) {
  double m = 0.0;
  for (float x : v) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

}  // namespace

TEST(bench, reference_matches_brute_force) {
  for (auto [nq, ne] : {std::pair<int64_t, int64_t>{2, 1}, {3, 2}, {4, 1}}) {
    const FieldState s = make_inputs(config(nq, ne, 9));
    const PhysicalConstants c;
    const std::vector<float> got = reference_volume_term(s, c);
    const std::vector<double> want = brute_force(s, c);
    std::vector<float> want_f(want.begin(), want.end());
    EXPECT_LE(max_field_error(got, want_f, nq, ne), 1e-6) << nq << " " << ne;
  }
}

TEST(bench, zero_derivative_gives_zero) {
  FieldState s = make_inputs(config(3, 2));
  std::fill(s.D.begin(), s.D.end(), 0.0f);
  for (float x : reference_volume_term(s, {})) EXPECT_EQ(x, 0.0f);
}

TEST(bench, constant_fields_telescope) {
  FieldState s = make_inputs(config(4, 2, 3));
  const int64_t pts = 4 * 4 * 4;
  // Fields and metric constant inside each element; the zero row sums of D
  // cancel every line sum.
  for (int64_t e = 0; e < s.ne; ++e) {
    for (int64_t b = 0; b < kFields; ++b) {
      const std::size_t base = static_cast<std::size_t>(pts * (b + kFields * e));
      std::fill(s.q.begin() + base, s.q.begin() + base + pts, s.q[base]);
    }
    for (int64_t c = 0; c < 9; ++c) {
      const std::size_t base = static_cast<std::size_t>(pts * (c + 9 * e));
      std::fill(s.g.begin() + base, s.g.begin() + base + pts, s.g[base]);
    }
  }
  const std::vector<float> out = reference_volume_term(s, {});
  // Compare with the size of a single summand.
  const FieldState plain = make_inputs(config(4, 2, 3));
  const double scale = max_abs(reference_volume_term(plain, {}));
  EXPECT_LE(max_abs(out), 1e-6 * scale);
}

TEST(bench, golden_values) {
  std::ifstream in(std::string(LOOPFORGE_TEST_DATA) + "/reference_nq2_ne1_seed42.txt");
  ASSERT_TRUE(in.good());
  std::vector<float> golden;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line[0] != '#') golden.push_back(std::stof(line));
  }
  const FieldState s = make_inputs(config(2, 1, 42));
  const std::vector<float> got = reference_volume_term(s, {});
  ASSERT_EQ(golden.size(), got.size());
  EXPECT_LE(max_field_error(got, golden, 2, 1), 1e-6);
}

TEST(bench, inputs_are_deterministic_and_in_range) {
  const FieldState a = make_inputs(config(3, 2, 5));
  const FieldState b = make_inputs(config(3, 2, 5));
  EXPECT_EQ(a.q, b.q);
  EXPECT_EQ(a.g, b.g);
  EXPECT_EQ(a.Jinv, b.Jinv);
  EXPECT_EQ(a.rhsq, b.rhsq);
  EXPECT_NE(make_inputs(config(3, 2, 6)).q, a.q);
  const int64_t pts = 27;
  EXPECT_EQ(a.q.size(), static_cast<std::size_t>(pts * kFields * 2));
  EXPECT_EQ(a.rhsq.size(), a.q.size());
  EXPECT_EQ(a.g.size(), static_cast<std::size_t>(pts * 9 * 2));
  EXPECT_EQ(a.Jinv.size(), static_cast<std::size_t>(pts * 2));
  EXPECT_EQ(a.D.size(), 9u);
  for (int64_t e = 0; e < 2; ++e) {
    for (int64_t p = 0; p < pts; ++p) {
      const float rho = a.q[p + pts * kFields * e];
      const float theta = a.q[p + pts * (4 + kFields * e)];
      EXPECT_GE(rho, 0.5f);
      EXPECT_LE(rho, 1.5f);
      EXPECT_GT(theta, 0.0f);
    }
  }
  for (float x : a.Jinv) {
    EXPECT_GE(x, 0.5f);
    EXPECT_LE(x, 2.0f);
  }
  for (float x : a.g) EXPECT_LE(std::abs(x), 1.0f);
}

TEST(bench, empty_configs_are_rejected) {
  EXPECT_EQ(error_of([] { make_inputs(config(3, 0)); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_of([] { make_inputs(config(0, 3)); }), ErrorCode::InvalidConfig);
  BenchmarkConfig bad = config(2, 1);
  bad.constants.gamma = 1.0;
  EXPECT_EQ(error_of([&] { make_inputs(bad); }), ErrorCode::InvalidConfig);
}

TEST(bench, differentiation_matrix_rows_sum_to_zero) {
  for (int64_t nq : {1, 2, 5, 8}) {
    const std::vector<float> d = differentiation_matrix(nq);
    ASSERT_EQ(d.size(), static_cast<std::size_t>(nq * nq));
    for (int64_t i = 0; i < nq; ++i) {
      double sum = 0.0;
      for (int64_t n = 0; n < nq; ++n) {
        sum += d[i + nq * n];
        if (n != i) EXPECT_FLOAT_EQ(d[i + nq * n], static_cast<float>(n - i) / nq);
      }
      EXPECT_NEAR(sum, 0.0, 1e-6);
    }
  }
}

TEST(bench, table_configurations_share_grid_points) {
  const std::vector<std::pair<int64_t, int64_t>> configs = {{4, 55296}, {8, 6912}, {12, 2048}, {16, 864}};
  for (auto [nq, ne] : configs) EXPECT_EQ(nq * nq * nq * ne, 3538944);
}

TEST(bench, recipes_extend_each_other) {
  for (int64_t nq : {2, 3, 8}) {
    EXPECT_EQ(transform_recipe(0, nq), "");
    for (int level = 1; level < kMaxLevel; ++level) {
      const std::string a = transform_recipe(level, nq), b = transform_recipe(level + 1, nq);
      EXPECT_LT(a.size(), b.size());
      EXPECT_EQ(b.compare(0, a.size(), a), 0) << "level " << level;
    }
  }
}

TEST(bench, level_five_has_two_storage_areas) {
  const Kernel& k = corpus_level(5, 3).at(0);
  ASSERT_EQ(k.aliases.size(), 2u);
  for (const auto& group : k.aliases) EXPECT_EQ(group.size(), static_cast<std::size_t>(kFields));
}

TEST(bench, every_level_passes_small_benchmarks) {
  for (int level = 0; level <= kMaxLevel; ++level) {
    const BenchmarkReport r = run_benchmark(config(2, 1, 1, level));
    EXPECT_TRUE(r.checked);
    EXPECT_TRUE(r.passed()) << "level " << level << " error " << r.max_error;
    EXPECT_FALSE(r.source.empty());
  }
}

TEST(bench, every_level_matches_reference_on_more_shapes) {
  for (int level = 1; level <= kMaxLevel; ++level) {
    for (uint64_t seed : {1, 2}) {
      BenchmarkConfig cfg = config(3, 2, seed, level);
      Diagnostics hazards;
      EXPECT_LE(check_level(corpus_level(level, 3), cfg, &hazards), 1e-5) << "level " << level;
      EXPECT_TRUE(hazards.empty());
    }
  }
}

TEST(bench, buffering_divides_rhsq_traffic) {
  const int64_t nq = 4;
  const BenchmarkReport l1 = run_benchmark(config(nq, 3, 1, 1));
  const BenchmarkReport l7 = run_benchmark(config(nq, 3, 1, 7));
  const ArrayCost a = l1.cost.arrays.at("rhsq"), b = l7.cost.arrays.at("rhsq");
  // Three line sums each touch rhsq Nq times before buffering.
  EXPECT_EQ(a.bytes_read, 3 * nq * b.bytes_read);
  EXPECT_EQ(a.bytes_written, 3 * nq * b.bytes_written);
  EXPECT_EQ(b.bytes_read, 4 * kFields * nq * nq * nq * 3);
}

TEST(bench, jacobian_hoist_per_point) {
  const int64_t nq = 4, ne = 2, pts = nq * nq * nq * ne;
  const CostReport l7 = run_benchmark(config(nq, ne, 1, 7)).cost;
  const CostReport l8 = run_benchmark(config(nq, ne, 1, 8)).cost;
  EXPECT_EQ(l7.multiplies_by.at("Jinv"), 3 * nq * kFields * pts);
  EXPECT_EQ(l8.multiplies_by.at("Jinv"), kFields * pts);
  EXPECT_LT(l8.flops, l7.flops);
}

TEST(bench, q_is_read_once_from_level_six) {
  for (int64_t nq : {2, 4}) {
    for (int level = 6; level <= kMaxLevel; ++level) {
      const CostReport c = run_benchmark(config(nq, 3, 1, level)).cost;
      EXPECT_EQ(c.arrays.at("q").bytes_read, 4 * kFields * nq * nq * nq * 3) << "level " << level;
    }
  }
}

TEST(bench, csv_report_columns) {
  const BenchmarkReport r = run_benchmark(config(2, 1, 1, 8));
  const std::string header = r.csv_header(), row = r.csv_row();
  EXPECT_EQ(header.rfind("level,nq,ne,flops,bytes_read,bytes_written", 0), 0u);
  for (const char* a : {"q", "rhsq", "D", "g", "Jinv"}) {
    EXPECT_NE(header.find(std::string(",") + a + "_read," + a + "_written"), std::string::npos) << a;
  }
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(row.rfind("8,2,1," + std::to_string(r.cost.flops) + ",", 0), 0u) << row;
  EXPECT_NE(r.text().find("flops"), std::string::npos);
}

TEST(bench, benchmark_is_deterministic) {
  const BenchmarkReport a = run_benchmark(config(2, 2, 4, 8));
  const BenchmarkReport b = run_benchmark(config(2, 2, 4, 8));
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.csv_row(), b.csv_row());
  EXPECT_EQ(a.max_error, b.max_error);
}
