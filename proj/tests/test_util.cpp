#include "test_util.hpp"

#include <map>
#include <mutex>

namespace loopforge::test {

const std::vector<Kernel>& corpus_level(int level, int64_t nq) {
  static std::mutex mu;
  static std::map<std::pair<int, int64_t>, std::vector<Kernel>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(level, nq);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build_level(level, nq)).first;
  return it->second;
}

std::vector<float> corpus_output(const std::vector<Kernel>& kernels, int64_t nq, int64_t ne,
                                 uint64_t seed, ExecReport* report) {
  BenchmarkConfig cfg;
  cfg.nq = nq;
  cfg.ne = ne;
  cfg.seed = seed;
  ArgValues values = volume_arguments(make_inputs(cfg), cfg.constants);
  ExecReport r = run_kernels(kernels, values);
  if (report) *report = r;
  return values.arrays.at("rhsq");
}

ArgValues random_args(const Kernel& k, const std::map<std::string, int64_t>& params,
                      uint64_t seed) {
  ArgValues v;
  v.params = params;
  uint64_t salt = 0;
  for (const auto& arg : k.args) {
    ++salt;
    if (const auto* s = std::get_if<ScalarParam>(&arg)) {
      v.scalars[s->name] = 0.5 + 0.25 * static_cast<double>(salt % 3);
      continue;
    }
    const auto& d = std::get<ArrayDescriptor>(arg);
    int64_t n = 1;
    for (auto e : concrete_shape(logical_shape(d), params)) n *= e;
    v.arrays[d.name] = random_floats(static_cast<std::size_t>(n), seed * 1000 + salt, 0.5f, 1.5f);
  }
  return v;
}

std::map<std::string, std::vector<float>> run_copy(const std::vector<Kernel>& kernels,
                                                   const ArgValues& args) {
  ArgValues v = args;
  for (const auto& k : kernels) run_kernel(k, v);
  return v.arrays;
}

double max_array_diff(const std::map<std::string, std::vector<float>>& a,
                      const std::map<std::string, std::vector<float>>& b) {
  double worst = 0.0;
  for (const auto& [name, data] : a) {
    if (auto it = b.find(name); it != b.end()) worst = std::max(worst, max_rel_diff(data, it->second));
  }
  return worst;
}

}  // namespace loopforge::test
