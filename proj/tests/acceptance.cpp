// Acceptance checks for the volume-term workload, one line per criterion.
// Usage: acceptance <loopforge-cli> <corpus-file> <scratch-dir>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loopforge/bench.hpp"
#include "loopforge/codegen.hpp"
#include "loopforge/error.hpp"
#include "loopforge/exec.hpp"
#include "loopforge/frontend.hpp"
#include "loopforge/schedule.hpp"
#include "loopforge/script.hpp"
#include "loopforge/transforms.hpp"

using namespace loopforge;

namespace {

constexpr double kTolerance = 1e-5;
constexpr int64_t kBigNq = 8;
constexpr int64_t kBigNe = 6912;

struct Result {
  bool pass = false;
  std::string detail;
};

BenchmarkConfig config(int64_t nq, int64_t ne, uint64_t seed) {
  BenchmarkConfig cfg;
  cfg.nq = nq;
  cfg.ne = ne;
  cfg.seed = seed;
  return cfg;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

CostReport level_cost(int level, int64_t nq, int64_t ne) {
  CostReport total;
  for (const Kernel& k : build_level(level, nq)) {
    const CostReport c = count_cost(k, linearize(k), {{"Nq", nq}, {"Ne", ne}});
    total.flops += c.flops;
    total.global_bytes_read += c.global_bytes_read;
    total.global_bytes_written += c.global_bytes_written;
    for (const auto& [name, a] : c.arrays) {
      total.arrays[name].bytes_read += a.bytes_read;
      total.arrays[name].bytes_written += a.bytes_written;
    }
    for (const auto& [name, n] : c.multiplies_by) total.multiplies_by[name] += n;
  }
  return total;
}

std::vector<float> run_rhsq(const std::vector<Kernel>& kernels, const BenchmarkConfig& cfg) {
  ArgValues v = volume_arguments(make_inputs(cfg), cfg.constants);
  run_kernels(kernels, v);
  return v.arrays.at("rhsq");
}

Result oracle_equivalence() {
  double worst = 0.0;
  int runs = 0;
  for (int64_t nq : {2, 3, 4}) {
    for (int level = 1; level <= kMaxLevel; ++level) {
      const std::vector<Kernel> kernels = build_level(level, nq);
      for (int64_t ne : {1, 2, 5}) {
        for (uint64_t seed : {1, 2, 3}) {
          worst = std::max(worst, check_level(kernels, config(nq, ne, seed)));
          ++runs;
        }
      }
    }
  }
  return {worst <= kTolerance, std::to_string(runs) + " runs, worst rel error " + fmt(worst)};
}

Result stepwise_preservation() {
  const BenchmarkConfig cfg = config(3, 2, 1);
  std::vector<float> previous = run_rhsq(lower_to_kernels(parse_source(volume_source())), cfg);
  double worst = 0.0;
  std::string worst_step;
  std::size_t steps = 0;
  apply_script(lower_to_kernels(parse_source(volume_source())),
               parse_transform_script(transform_recipe(kMaxLevel, cfg.nq)), nullptr,
               [&](std::size_t step, const TransformCommand& cmd, const std::vector<Kernel>& ks) {
                 const std::vector<float> now = run_rhsq(ks, cfg);
                 const double err = max_field_error(now, previous, cfg.nq, cfg.ne);
                 if (err > worst) {
                   worst = err;
                   worst_step = std::to_string(step) + " (" + std::string(command_name(cmd)) + ")";
                 }
                 previous = now;
                 ++steps;
               });
  std::string detail = std::to_string(steps) + " steps, worst rel error " + fmt(worst);
  if (!worst_step.empty()) detail += " at step " + worst_step;
  return {steps > 0 && worst <= kTolerance, detail};
}

Result static_flops(const CostReport& l8) {
  const double target = 1.111e9;
  const double ratio = static_cast<double>(l8.flops) / target;
  return {std::abs(ratio - 1.0) <= 0.2,
          "flops " + fmt(static_cast<double>(l8.flops)) + " vs 1.111e9 (ratio " + fmt(ratio) + ")"};
}

Result static_traffic(const CostReport& l8) {
  const double bytes = static_cast<double>(l8.global_bytes());
  const auto& q = l8.arrays.at("q");
  const auto& rhsq = l8.arrays.at("rhsq");
  const int64_t field_bytes = 4 * kFields * kBigNq * kBigNq * kBigNq * kBigNe;
  const bool q_once = q.bytes_read == field_bytes && q.bytes_written == 0;
  const bool rhsq_once = rhsq.bytes_read == field_bytes && rhsq.bytes_written == field_bytes;
  int64_t others = 0;
  for (const auto& [name, a] : l8.arrays) {
    if (name != "q" && name != "rhsq") others += a.bytes_read + a.bytes_written;
  }
  const int64_t g = l8.arrays.at("g").bytes_read;
  const bool g_dominates = 2 * g > others;
  std::string detail = "bytes " + fmt(bytes) + ", q " + fmt(static_cast<double>(q.bytes_read)) +
                       ", rhsq " + fmt(static_cast<double>(rhsq.bytes_read + rhsq.bytes_written)) +
                       ", g " + fmt(static_cast<double>(g)) + " of " + fmt(static_cast<double>(others));
  return {bytes >= 4.3e8 && bytes <= 6.5e8 && q_once && rhsq_once && g_dominates, detail};
}

Result buffering_effect(const CostReport& l6, const CostReport& l7) {
  const auto total = [](const ArrayCost& a) { return a.bytes_read + a.bytes_written; };
  const double before = static_cast<double>(total(l6.arrays.at("rhsq")));
  const double after = static_cast<double>(total(l7.arrays.at("rhsq")));
  const double factor = before / after;
  return {factor >= static_cast<double>(kBigNq), "rhsq traffic shrinks by " + fmt(factor)};
}

Result distributive_law(const CostReport& l7, const CostReport& l8) {
  const int64_t points = kBigNq * kBigNq * kBigNq * kBigNe;
  const auto per_point = [&](const CostReport& c) {
    auto it = c.multiplies_by.find("Jinv");
    return it == c.multiplies_by.end() ? 0.0 : static_cast<double>(it->second) / points;
  };
  const double a = per_point(l7), b = per_point(l8);
  const bool pass = l8.flops < l7.flops && a == 3.0 * kBigNq * kFields && b == kFields;
  return {pass, "flops " + fmt(static_cast<double>(l7.flops)) + " -> " +
                    fmt(static_cast<double>(l8.flops)) + ", Jinv products per point " + fmt(a) +
                    " -> " + fmt(b)};
}

Result single_read(const std::map<int, CostReport>& costs) {
  const int64_t want = 4 * kFields * kBigNq * kBigNq * kBigNq * kBigNe;
  bool pass = true;
  std::string detail = "q read bytes";
  for (int level = 6; level <= kMaxLevel; ++level) {
    const int64_t got = costs.at(level).arrays.at("q").bytes_read;
    pass = pass && got == want;
    detail += " L" + std::to_string(level) + "=" + std::to_string(got);
  }
  return {pass, detail + " (want " + std::to_string(want) + ")"};
}

Result schedule_validity() {
  const BenchmarkConfig cfg = config(3, 2, 1);
  const ArgValues args = volume_arguments(make_inputs(cfg), cfg.constants);
  std::size_t stages = 0, problems = 0;
  auto check = [&](const std::vector<Kernel>& ks) {
    ++stages;
    for (const Kernel& k : ks) {
      const Schedule s = linearize(k);
      problems += validate_schedule(k, s).size();
      problems += hazard_check(k, s, args).size();
    }
  };
  check(lower_to_kernels(parse_source(volume_source())));
  apply_script(lower_to_kernels(parse_source(volume_source())),
               parse_transform_script(transform_recipe(kMaxLevel, cfg.nq)), nullptr,
               [&](std::size_t, const TransformCommand&, const std::vector<Kernel>& ks) { check(ks); });
  std::size_t mutants = 0, caught = 0;
  for (int level = 3; level <= kMaxLevel; ++level) {
    for (const Kernel& k : build_level(level, cfg.nq)) {
      const Schedule s = linearize(k);
      for (std::size_t p = 0; p < s.items.size(); ++p) {
        if (s.items[p].kind != ScheduleItem::Kind::barrier) continue;
        Schedule cut = s;
        cut.items.erase(cut.items.begin() + static_cast<long>(p));
        ++mutants;
        caught += hazard_check(k, cut, args).empty() ? 0 : 1;
      }
    }
  }
  return {problems == 0 && mutants > 0 && caught == mutants,
          std::to_string(stages) + " stages, " + std::to_string(problems) + " problems; " +
              std::to_string(caught) + "/" + std::to_string(mutants) + " barrier deletions caught"};
}

Result fusion_precondition() {
  std::string source(volume_source());
  const std::size_t second = source.find("subroutine volume_s");
  const std::string loop = "do j = 1, Nq";
  const std::size_t at = source.find(loop, second);
  if (second == std::string::npos || at == std::string::npos) return {false, "loop not found"};
  source.replace(at, loop.size(), "do j = 1, Ne");
  try {
    apply_script(lower_to_kernels(parse_source(source)),
                 parse_transform_script(transform_recipe(1, 3)));
  } catch (const Error& e) {
    const std::string msg = e.what();
    const bool names_j = msg.find("'j'") != std::string::npos;
    return {e.code() == ErrorCode::DomainMismatch && names_j, msg};
  }
  return {false, "fusion succeeded"};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Runs a shell command, returning its stdout; `status` receives the exit code.
std::string capture(const std::string& cmd, int& status) {
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) {
    status = -1;
    return out;
  }
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  status = pclose(pipe);
  return out;
}

Result determinism(const std::string& cli, const std::string& corpus,
                   const std::filesystem::path& scratch) {
  std::filesystem::create_directories(scratch);
  std::string emitted[2], dumps[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = scratch / ("volume_" + std::to_string(run) + ".cl");
    int status = 0;
    dumps[run] = capture("\"" + cli + "\" build \"" + corpus + "\" --script embedded --emit \"" +
                             out.string() + "\" --dump-kernel --dump-schedule",
                         status);
    if (status != 0) return {false, "build exited with status " + std::to_string(status)};
    emitted[run] = read_file(out);
  }
  const bool pass = !emitted[0].empty() && !dumps[0].empty() && emitted[0] == emitted[1] &&
                    dumps[0] == dumps[1];
  return {pass, std::to_string(emitted[0].size()) + " source bytes, " +
                    std::to_string(dumps[0].size()) + " dump bytes"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: acceptance <loopforge-cli> <corpus-file> <scratch-dir>\n";
    return 2;
  }
  std::map<int, CostReport> costs;
  for (int level : {6, 7, 8}) costs[level] = level_cost(level, kBigNq, kBigNe);

  const std::vector<std::pair<int, std::function<Result()>>> criteria = {
      {1, oracle_equivalence},
      {2, stepwise_preservation},
      {3, [&] { return static_flops(costs.at(8)); }},
      {4, [&] { return static_traffic(costs.at(8)); }},
      {5, [&] { return buffering_effect(costs.at(6), costs.at(7)); }},
      {6, [&] { return distributive_law(costs.at(7), costs.at(8)); }},
      {7, [&] { return single_read(costs); }},
      {8, schedule_validity},
      {9, fusion_precondition},
      {10, [&] { return determinism(argv[1], argv[2], argv[3]); }},
  };
  int failed = 0;
  for (const auto& [id, check] : criteria) {
    Result r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    failed += r.pass ? 0 : 1;
    std::cout << "criterion " << id << ": " << (r.pass ? "PASS" : "FAIL") << " - " << r.detail
              << std::endl;
  }
  std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
