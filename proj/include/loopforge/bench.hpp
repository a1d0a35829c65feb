#pragma once

// The volume-term workload: embedded source, inputs, an independent
// reference implementation, the staged optimization recipe and the
// benchmark driver.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "loopforge/codegen.hpp"
#include "loopforge/exec.hpp"
#include "loopforge/kernel.hpp"
#include "loopforge/schedule.hpp"

namespace loopforge {

/// The embedded corpus file (two subroutines plus a transform block).
std::string_view volume_source();

/// Cumulative transform script for optimization levels 1..8 (level 0 is
/// empty and leaves the two kernels unfused). Each level's script is a
/// prefix of the next one's.
std::string transform_recipe(int level, int64_t nq);

constexpr int kMaxLevel = 8;
constexpr int kFields = 8;

/// Dry-air defaults.
struct PhysicalConstants {
  double p0 = 1.0e5;
  double R = 287.0;
  double gamma = 1.4;
};

/// Logical column-major arrays: q and rhsq [Nq,Nq,Nq,8,Ne], D [Nq,Nq],
/// g [Nq,Nq,Nq,3,3,Ne] (component, direction), Jinv [Nq,Nq,Nq,Ne].
struct FieldState {
  int64_t nq = 0;
  int64_t ne = 0;
  std::vector<float> q, rhsq, D, g, Jinv;
};

struct BenchmarkConfig {
  int64_t nq = 8;
  int64_t ne = 6912;
  int level = kMaxLevel;
  uint64_t seed = 1;
  PhysicalConstants constants;
  /// Compare the interpreter against the reference. Always done when
  /// Nq <= 4. The comparison runs at min(ne, check_ne) elements since the
  /// recipes leave Ne symbolic.
  bool check = false;
  int64_t check_ne = 2;
};

/// Deterministic pseudo-random state; throws InvalidConfig for Nq < 1 or
/// Ne < 1.
FieldState make_inputs(const BenchmarkConfig& cfg);

/// Differentiation-like matrix with zero row sums: D(i,n) = (n-i)/Nq off
/// the diagonal.
std::vector<float> differentiation_matrix(int64_t nq);

/// The increment the volume term adds to rhsq, computed by direct loops in
/// double precision.
std::vector<float> reference_volume_term(const FieldState& state, const PhysicalConstants& c);

/// Interpreter arguments for the corpus kernels.
ArgValues volume_arguments(const FieldState& state, const PhysicalConstants& c);

/// Worst per-field error max|a-b| / max|b| (each field normalized by its
/// own magnitude).
double max_field_error(const std::vector<float>& got, const std::vector<float>& want, int64_t nq,
                       int64_t ne);

/// The corpus kernels after the recipe of `level` (two kernels at level 0).
std::vector<Kernel> build_level(int level, int64_t nq, std::string_view source = volume_source());

/// Runs the kernels of `level` on make_inputs(cfg) and compares rhsq with
/// the reference. Hazards found along the way go to `hazards`.
double check_level(const std::vector<Kernel>& kernels, const BenchmarkConfig& cfg,
                   Diagnostics* hazards = nullptr);

/// Runs every kernel in order, accumulating counters.
ExecReport run_kernels(const std::vector<Kernel>& kernels, ArgValues& values,
                       const ExecOptions& opts = {});

struct BenchmarkReport {
  int level = 0;
  int64_t nq = 0;
  int64_t ne = 0;
  CostReport cost;
  std::size_t barriers_in_schedule = 0;
  std::string source;
  bool checked = false;
  double max_error = 0.0;
  Diagnostics diagnostics;  // schedule validation and hazards

  bool passed(double tolerance = 1e-5) const;
  /// One row: level, flops, bytes_read, bytes_written, then per-array
  /// traffic as name_read/name_written pairs.
  std::string csv_header() const;
  std::string csv_row() const;
  std::string text() const;
};

BenchmarkReport run_benchmark(const BenchmarkConfig& cfg);

}  // namespace loopforge
