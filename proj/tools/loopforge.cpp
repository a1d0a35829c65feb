// Command-line driver: build, bench and check.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "loopforge/bench.hpp"
#include "loopforge/codegen.hpp"
#include "loopforge/frontend.hpp"
#include "loopforge/schedule.hpp"
#include "loopforge/script.hpp"
#include "loopforge/transforms.hpp"

using namespace loopforge;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

// "1..8", "3" or "1,4,6".
std::vector<int64_t> parse_list(const std::string& text) {
  std::vector<int64_t> out;
  if (auto dots = text.find(".."); dots != std::string::npos) {
    const int64_t lo = std::stoll(text.substr(0, dots));
    const int64_t hi = std::stoll(text.substr(dots + 2));
    for (int64_t v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  return out;
}

void print_diagnostics(const Diagnostics& diags) {
  for (const auto& d : diags) std::cerr << d.code << ": " << d.message << "\n";
}

struct BuildArgs {
  std::string source;
  std::string script = "embedded";
  std::string emit;
  bool dump_kernel = false;
  bool dump_schedule = false;
};

int run_build(const BuildArgs& a) {
  const std::string text = read_file(a.source);
  const SourceUnit unit = parse_source(text);
  std::string script;
  if (a.script == "embedded") {
    script = unit.transform_block.value_or("");
  } else {
    script = read_file(a.script);
  }
  Diagnostics diags;
  const std::vector<Kernel> kernels =
      apply_script(lower_to_kernels(unit), parse_transform_script(script), &diags);
  std::string source;
  for (const auto& k : kernels) {
    const Schedule s = linearize(k);
    for (auto& d : validate_schedule(k, s)) diags.push_back(std::move(d));
    if (a.dump_kernel) std::cout << dump_kernel(k);
    if (a.dump_schedule) std::cout << dump_schedule(s);
    source += emit_source(k, s);
  }
  if (!a.emit.empty()) write_output(a.emit, source);
  print_diagnostics(diags);
  return diags.empty() ? 0 : 1;
}

struct BenchArgs {
  BenchmarkConfig cfg;
  std::string report = "text";
  std::string emit;
};

int run_bench(const BenchArgs& a) {
  const BenchmarkReport r = run_benchmark(a.cfg);
  if (a.report == "csv") {
    std::cout << r.csv_header() << "\n" << r.csv_row() << "\n";
  } else {
    std::cout << r.text();
  }
  if (!a.emit.empty()) write_output(a.emit, r.source);
  print_diagnostics(r.diagnostics);
  if (r.checked && r.max_error > 1e-5) {
    std::cerr << "equivalence failure: max error " << r.max_error << "\n";
  }
  return r.passed() ? 0 : 1;
}

struct CheckArgs {
  std::string source;
  std::string levels = "1..8";
  std::string nq = "2,3,4";
  std::string ne = "1,2,5";
  std::string seeds = "1,2,3";
  double tolerance = 1e-5;
};

int run_check(const CheckArgs& a) {
  const std::string text = read_file(a.source);
  int failures = 0;
  for (int64_t nq : parse_list(a.nq)) {
    for (int64_t level : parse_list(a.levels)) {
      const auto kernels = build_level(static_cast<int>(level), nq, text);
      for (int64_t ne : parse_list(a.ne)) {
        for (int64_t seed : parse_list(a.seeds)) {
          BenchmarkConfig cfg;
          cfg.nq = nq;
          cfg.ne = ne;
          cfg.level = static_cast<int>(level);
          cfg.seed = static_cast<uint64_t>(seed);
          Diagnostics hazards;
          const double err = check_level(kernels, cfg, &hazards);
          const bool ok = err <= a.tolerance && hazards.empty();
          failures += ok ? 0 : 1;
          std::cout << (ok ? "PASS" : "FAIL") << " level=" << level << " nq=" << nq
                    << " ne=" << ne << " seed=" << seed << " max_error=" << err << "\n";
          print_diagnostics(hazards);
        }
      }
    }
  }
  std::cout << (failures ? "FAILED " + std::to_string(failures) : std::string("ALL PASSED"))
            << "\n";
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loopforge: user-guided array-program transformation"};
  app.require_subcommand(1);

  BuildArgs build;
  auto* b = app.add_subcommand("build", "transform, schedule and emit a source file");
  b->add_option("source", build.source, "Fortran-subset source")->required();
  b->add_option("--script", build.script, "transform script file or 'embedded'");
  b->add_option("--emit", build.emit, "write kernel source here ('-' for stdout)");
  b->add_flag("--dump-kernel", build.dump_kernel, "print the transformed kernel");
  b->add_flag("--dump-schedule", build.dump_schedule, "print the schedule");

  BenchArgs bench;
  auto* be = app.add_subcommand("bench", "cost report for one optimization level");
  be->add_option("--nq", bench.cfg.nq, "points per direction");
  be->add_option("--ne", bench.cfg.ne, "element count");
  be->add_option("--level", bench.cfg.level, "optimization level 0..8");
  be->add_option("--seed", bench.cfg.seed, "input seed");
  be->add_option("--check-ne", bench.cfg.check_ne, "elements used by the equivalence check");
  be->add_flag("--check", bench.cfg.check, "compare against the reference");
  be->add_option("--report", bench.report, "csv or text")->check(CLI::IsMember({"csv", "text"}));
  be->add_option("--emit", bench.emit, "write kernel source here ('-' for stdout)");

  CheckArgs check;
  auto* c = app.add_subcommand("check", "equivalence suite against the reference");
  c->add_option("source", check.source, "corpus source")->required();
  c->add_option("--levels", check.levels, "e.g. 1..8 or 1,3,8");
  c->add_option("--nq", check.nq, "comma list");
  c->add_option("--ne", check.ne, "comma list");
  c->add_option("--seeds", check.seeds, "comma list");
  c->add_option("--tolerance", check.tolerance, "max relative error");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*b) return run_build(build);
    if (*be) return run_bench(bench);
    if (*c) return run_check(check);
  } catch (const Error& e) {
    std::cerr << to_string(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
