#include "loopforge/bench.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "loopforge/frontend.hpp"
#include "loopforge/script.hpp"
#include "loopforge/transforms.hpp"

namespace loopforge {

namespace {

class Uniform {
 public:
  explicit Uniform(uint64_t seed) : rng_(seed) {}
  double operator()(double lo, double hi) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1p-53;
    return lo + (hi - lo) * u;
  }

 private:
  std::mt19937_64 rng_;
};

struct Layout {
  int64_t nq, ne;
  int64_t q(int64_t i, int64_t j, int64_t k, int64_t b, int64_t e) const {
    return i + nq * (j + nq * (k + nq * (b + kFields * e)));
  }
  int64_t g(int64_t i, int64_t j, int64_t k, int64_t m, int64_t dir, int64_t e) const {
    return i + nq * (j + nq * (k + nq * (m + 3 * (dir + 3 * e))));
  }
  int64_t jinv(int64_t i, int64_t j, int64_t k, int64_t e) const {
    return i + nq * (j + nq * (k + nq * e));
  }
  int64_t d(int64_t i, int64_t n) const { return i + nq * n; }
};

}  // namespace

std::vector<float> differentiation_matrix(int64_t nq) {
  const Layout L{nq, 1};
  std::vector<float> D(static_cast<std::size_t>(nq * nq), 0.0f);
  for (int64_t i = 0; i < nq; ++i) {
    float diag = 0.0f;
    for (int64_t n = 0; n < nq; ++n) {
      if (n == i) continue;
      const float v = static_cast<float>(n - i) / static_cast<float>(nq);
      D[static_cast<std::size_t>(L.d(i, n))] = v;
      diag -= v;
    }
    D[static_cast<std::size_t>(L.d(i, i))] = diag;
  }
  return D;
}

FieldState make_inputs(const BenchmarkConfig& cfg) {
  if (cfg.nq < 1 || cfg.ne < 1) {
    fail(ErrorCode::InvalidConfig, "Nq and Ne must be positive");
  }
  const auto& c = cfg.constants;
  if (!(c.gamma > 1.0 && c.R > 0.0 && c.p0 > 0.0)) {
    fail(ErrorCode::InvalidConfig, "constants need gamma > 1, R > 0, p0 > 0");
  }
  FieldState s;
  s.nq = cfg.nq;
  s.ne = cfg.ne;
  const int64_t pts = cfg.nq * cfg.nq * cfg.nq;
  Uniform u(cfg.seed);
  s.q.resize(static_cast<std::size_t>(pts * kFields * cfg.ne));
  s.rhsq.resize(s.q.size());
  for (int64_t e = 0; e < cfg.ne; ++e) {
    for (int64_t b = 0; b < kFields; ++b) {
      for (int64_t p = 0; p < pts; ++p) {
        double v = 0.0;
        if (b == 0) {
          v = u(0.5, 1.5);
        } else if (b <= 3) {
          v = u(-0.1, 0.1);
        } else if (b == 4) {
          // Potential temperature near p0/R keeps the pressure O(p0).
          v = c.p0 / c.R * u(0.9, 1.1);
        } else {
          v = u(0.0, 1.0);
        }
        s.q[static_cast<std::size_t>(p + pts * (b + kFields * e))] = static_cast<float>(v);
      }
    }
  }
  for (auto& x : s.rhsq) x = static_cast<float>(u(-1.0, 1.0));
  s.D = differentiation_matrix(cfg.nq);
  s.g.resize(static_cast<std::size_t>(pts * 9 * cfg.ne));
  for (auto& x : s.g) x = static_cast<float>(u(-1.0, 1.0));
  s.Jinv.resize(static_cast<std::size_t>(pts * cfg.ne));
  for (auto& x : s.Jinv) x = static_cast<float>(u(0.5, 2.0));
  return s;
}

std::vector<float> reference_volume_term(const FieldState& s, const PhysicalConstants& c) {
  const Layout L{s.nq, s.ne};
  const int64_t nq = s.nq;
  // flux[dir][point][b] per element
  std::vector<double> flux(static_cast<std::size_t>(3 * nq * nq * nq * kFields));
  auto fidx = [&](int64_t dir, int64_t i, int64_t j, int64_t k, int64_t b) {
    return static_cast<std::size_t>(b + kFields * (i + nq * (j + nq * (k + nq * dir))));
  };
  std::vector<float> out(s.q.size(), 0.0f);
  for (int64_t e = 0; e < s.ne; ++e) {
    for (int64_t k = 0; k < nq; ++k) {
      for (int64_t j = 0; j < nq; ++j) {
        for (int64_t i = 0; i < nq; ++i) {
          double q[kFields];
          for (int b = 0; b < kFields; ++b) q[b] = s.q[static_cast<std::size_t>(L.q(i, j, k, b, e))];
          const double rho = q[0];
          const double p = c.p0 * std::pow(c.R * q[4] / c.p0, c.gamma);
          for (int dir = 0; dir < 3; ++dir) {
            double gm[3];
            for (int m = 0; m < 3; ++m) gm[m] = s.g[static_cast<std::size_t>(L.g(i, j, k, m, dir, e))];
            const double uc = gm[0] * q[1] + gm[1] * q[2] + gm[2] * q[3];
            flux[fidx(dir, i, j, k, 0)] = uc;
            for (int m = 0; m < 3; ++m) flux[fidx(dir, i, j, k, 1 + m)] = uc * q[1 + m] / rho + gm[m] * p;
            for (int b = 4; b < kFields; ++b) flux[fidx(dir, i, j, k, b)] = uc * q[b] / rho;
          }
        }
      }
    }
    for (int64_t k = 0; k < nq; ++k) {
      for (int64_t j = 0; j < nq; ++j) {
        for (int64_t i = 0; i < nq; ++i) {
          const double ji = s.Jinv[static_cast<std::size_t>(L.jinv(i, j, k, e))];
          for (int b = 0; b < kFields; ++b) {
            double acc = 0.0;
            for (int64_t n = 0; n < nq; ++n) {
              acc += s.D[static_cast<std::size_t>(L.d(i, n))] * flux[fidx(0, n, j, k, b)];
              acc += s.D[static_cast<std::size_t>(L.d(j, n))] * flux[fidx(1, i, n, k, b)];
              acc += s.D[static_cast<std::size_t>(L.d(k, n))] * flux[fidx(2, i, j, n, b)];
            }
            out[static_cast<std::size_t>(L.q(i, j, k, b, e))] = static_cast<float>(ji * acc);
          }
        }
      }
    }
  }
  return out;
}

ArgValues volume_arguments(const FieldState& s, const PhysicalConstants& c) {
  ArgValues v;
  v.params = {{"Nq", s.nq}, {"Ne", s.ne}};
  v.scalars = {{"p0", c.p0}, {"R", c.R}, {"gamma", c.gamma}};
  v.arrays = {{"q", s.q}, {"rhsq", s.rhsq}, {"D", s.D}, {"g", s.g}, {"Jinv", s.Jinv}};
  return v;
}

double max_field_error(const std::vector<float>& got, const std::vector<float>& want, int64_t nq,
                       int64_t ne) {
  if (got.size() != want.size()) return INFINITY;
  const int64_t pts = nq * nq * nq;
  double worst = 0.0;
  for (int64_t b = 0; b < kFields; ++b) {
    double err = 0.0;
    double scale = 0.0;
    for (int64_t e = 0; e < ne; ++e) {
      for (int64_t p = 0; p < pts; ++p) {
        const auto x = static_cast<std::size_t>(p + pts * (b + kFields * e));
        const double d = std::abs(static_cast<double>(got[x]) - want[x]);
        err = std::isnan(d) ? INFINITY : std::max(err, d);
        scale = std::max(scale, std::abs(static_cast<double>(want[x])));
      }
    }
    worst = std::max(worst, scale > 0.0 ? err / scale : err);
  }
  return worst;
}

std::vector<Kernel> build_level(int level, int64_t nq, std::string_view source) {
  const SourceUnit unit = parse_source(source);
  std::vector<Kernel> kernels = lower_to_kernels(unit);
  return apply_script(std::move(kernels), parse_transform_script(transform_recipe(level, nq)));
}

ExecReport run_kernels(const std::vector<Kernel>& kernels, ArgValues& values,
                       const ExecOptions& opts) {
  ExecReport total;
  for (const auto& k : kernels) {
    ExecReport r = run_kernel(k, values, opts);
    total.counters.flops += r.counters.flops;
    total.counters.instances += r.counters.instances;
    total.counters.barriers += r.counters.barriers;
    for (const auto& [name, t] : r.counters.traffic) {
      total.counters.traffic[name].loads += t.loads;
      total.counters.traffic[name].stores += t.stores;
    }
    total.hazards.insert(total.hazards.end(), r.hazards.begin(), r.hazards.end());
  }
  return total;
}

double check_level(const std::vector<Kernel>& kernels, const BenchmarkConfig& cfg,
                   Diagnostics* hazards) {
  const FieldState state = make_inputs(cfg);
  ArgValues values = volume_arguments(state, cfg.constants);
  const ExecReport r = run_kernels(kernels, values);
  if (hazards) hazards->insert(hazards->end(), r.hazards.begin(), r.hazards.end());
  const std::vector<float> incr = reference_volume_term(state, cfg.constants);
  std::vector<float> want(incr.size());
  for (std::size_t x = 0; x < want.size(); ++x) {
    want[x] = static_cast<float>(static_cast<double>(state.rhsq[x]) + incr[x]);
  }
  return max_field_error(values.arrays.at("rhsq"), want, cfg.nq, cfg.ne);
}

bool BenchmarkReport::passed(double tolerance) const {
  return diagnostics.empty() && (!checked || max_error <= tolerance);
}

std::string BenchmarkReport::csv_header() const {
  std::string out = "level,nq,ne,flops,bytes_read,bytes_written";
  for (const auto& [name, _] : cost.arrays) out += "," + name + "_read," + name + "_written";
  return out;
}

std::string BenchmarkReport::csv_row() const {
  std::ostringstream os;
  os << level << "," << nq << "," << ne << "," << cost.flops << "," << cost.global_bytes_read << ","
     << cost.global_bytes_written;
  for (const auto& [_, a] : cost.arrays) os << "," << a.bytes_read << "," << a.bytes_written;
  return os.str();
}

std::string BenchmarkReport::text() const {
  std::ostringstream os;
  os << "level=" << level << "\nnq=" << nq << "\nne=" << ne << "\n" << cost.text()
     << "schedule_barriers=" << barriers_in_schedule << "\n";
  if (checked) os << "max_error=" << max_error << "\n";
  for (const auto& d : diagnostics) os << "diagnostic=" << d.code << ": " << d.message << "\n";
  return os.str();
}

BenchmarkReport run_benchmark(const BenchmarkConfig& cfg) {
  if (cfg.level < 0 || cfg.level > kMaxLevel) {
    fail(ErrorCode::InvalidConfig, "level must be in 0.." + std::to_string(kMaxLevel));
  }
  if (cfg.nq < 1 || cfg.ne < 1) fail(ErrorCode::InvalidConfig, "Nq and Ne must be positive");
  BenchmarkReport rep;
  rep.level = cfg.level;
  rep.nq = cfg.nq;
  rep.ne = cfg.ne;
  const std::vector<Kernel> kernels = build_level(cfg.level, cfg.nq);
  const std::map<std::string, int64_t> params = {{"Nq", cfg.nq}, {"Ne", cfg.ne}};
  for (const auto& k : kernels) {
    const Schedule s = linearize(k);
    for (auto& d : validate_schedule(k, s)) rep.diagnostics.push_back(std::move(d));
    const CostReport c = count_cost(k, s, params);
    rep.cost.flops += c.flops;
    rep.cost.global_bytes_read += c.global_bytes_read;
    rep.cost.global_bytes_written += c.global_bytes_written;
    rep.cost.instances += c.instances;
    rep.cost.barriers += c.barriers;
    for (const auto& [name, a] : c.arrays) {
      rep.cost.arrays[name].bytes_read += a.bytes_read;
      rep.cost.arrays[name].bytes_written += a.bytes_written;
    }
    for (const auto& [name, n] : c.multiplies_by) rep.cost.multiplies_by[name] += n;
    rep.barriers_in_schedule += s.barrier_count();
    rep.source += emit_source(k, s);
  }
  if (cfg.check || cfg.nq <= 4) {
    BenchmarkConfig small = cfg;
    small.ne = std::min(cfg.ne, cfg.check_ne);
    rep.checked = true;
    rep.max_error = check_level(kernels, small, &rep.diagnostics);
  }
  return rep;
}

}  // namespace loopforge
