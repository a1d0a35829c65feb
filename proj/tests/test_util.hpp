#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "loopforge/bench.hpp"
#include "loopforge/exec.hpp"
#include "loopforge/frontend.hpp"
#include "loopforge/kernel.hpp"
#include "loopforge/schedule.hpp"
#include "loopforge/transforms.hpp"

namespace loopforge::test {

inline std::vector<Kernel> lower(const std::string& source) {
  return lower_to_kernels(parse_source(source));
}

inline Kernel lower_one(const std::string& source) {
  auto ks = lower(source);
  EXPECT_EQ(ks.size(), 1u);
  return ks.front();
}

// Code of the Error thrown by `fn`; records a failure when nothing throws.
inline ErrorCode error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidConfig;
}

inline std::vector<float> random_floats(std::size_t n, uint64_t seed, float lo = -1.0f,
                                        float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline double max_rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double err = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(a[i]) - b[i]));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  if (a.size() != b.size()) return 1e300;
  return scale > 0 ? err / scale : err;
}

// Random values for every global array (logical shape under `params`) and
// scalar argument of `k`.
ArgValues random_args(const Kernel& k, const std::map<std::string, int64_t>& params, uint64_t seed);

// Runs `kernels` in sequence on a copy of `args` and returns the arrays.
std::map<std::string, std::vector<float>> run_copy(const std::vector<Kernel>& kernels,
                                                   const ArgValues& args);

// Largest max_rel_diff over the arrays both maps contain.
double max_array_diff(const std::map<std::string, std::vector<float>>& a,
                      const std::map<std::string, std::vector<float>>& b);

// Corpus kernels after `level`, cached per (level, nq).
const std::vector<Kernel>& corpus_level(int level, int64_t nq);

// rhsq after running `kernels` on make_inputs(nq, ne, seed).
std::vector<float> corpus_output(const std::vector<Kernel>& kernels, int64_t nq, int64_t ne,
                                 uint64_t seed, ExecReport* report = nullptr);

}  // namespace loopforge::test
