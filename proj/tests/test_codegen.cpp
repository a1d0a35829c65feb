#include <gtest/gtest.h>

#include <regex>

#include "loopforge/codegen.hpp"
#include "loopforge/script.hpp"
#include "test_util.hpp"

using namespace loopforge;
using namespace loopforge::test;

namespace {

const char* kAdd = R"(
subroutine add2(N, a, b, out)
  integer :: N
  real(kind=4), dimension(N) :: a, b, out
  integer :: i
  do i = 1, N
    out(i) = a(i) + b(i)
  end do
end subroutine add2
)";

Kernel scripted(const char* source, const std::string& script) {
  return apply_script(lower(source), parse_transform_script(script)).at(0);
}

std::string emit(const Kernel& k) { return emit_source(k, linearize(k)); }

std::size_t occurrences(const std::string& text, const std::string& word) {
  std::size_t n = 0;
  for (auto p = text.find(word); p != std::string::npos; p = text.find(word, p + 1)) ++n;
  return n;
}

// The statement lines of the kernel body, without comments or prelude.
std::vector<std::string> body_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text.substr(text.find("{")));
  for (std::string line; std::getline(in, line);) {
    const auto start = line.find_first_not_of(' ');
    if (start == std::string::npos || line.compare(start, 2, "//") == 0) continue;
    out.push_back(line.substr(start));
  }
  return out;
}

CostReport level_cost(int level, int64_t nq, int64_t ne) {
  const Kernel& k = corpus_level(level, nq).at(0);
  return count_cost(k, linearize(k), {{"Ne", ne}, {"Nq", nq}});
}

}  // namespace

TEST(codegen, elementwise_add_counts) {
  const Kernel k = scripted(kAdd, "fix_parameters N=10");
  const CostReport c = count_cost(k, linearize(k));
  EXPECT_EQ(c.flops, 10);
  EXPECT_EQ(c.global_bytes_read, 80);
  EXPECT_EQ(c.global_bytes_written, 40);
  EXPECT_EQ(c.arrays.at("a"), (ArrayCost{40, 0}));
  EXPECT_EQ(c.arrays.at("out"), (ArrayCost{0, 40}));
  EXPECT_EQ(c.instances, 10);
  EXPECT_EQ(c.barriers, 0);
}

TEST(codegen, elementwise_add_source) {
  const std::string src = emit(scripted(kAdd, "fix_parameters N=10"));
  EXPECT_EQ(occurrences(src, "for ("), 1u);
  EXPECT_NE(src.find("for (int i = 0; i < 10; ++i)"), std::string::npos) << src;
  EXPECT_NE(src.find("out[i] = a[i] + b[i];"), std::string::npos) << src;
  // Literal trip counts need no emptiness guard.
  EXPECT_EQ(src.find("if ("), std::string::npos) << src;
}

TEST(codegen, totals_equal_breakdown) {
  for (int level = 0; level <= kMaxLevel; ++level) {
    for (const Kernel& k : corpus_level(level, 2)) {
      const CostReport c = count_cost(k, linearize(k), {{"Ne", 3}, {"Nq", 2}});
      int64_t r = 0, w = 0;
      for (const auto& [_, a] : c.arrays) {
        r += a.bytes_read;
        w += a.bytes_written;
      }
      EXPECT_EQ(r, c.global_bytes_read) << "level " << level;
      EXPECT_EQ(w, c.global_bytes_written) << "level " << level;
    }
  }
}

TEST(codegen, symbolic_extents_are_guarded_unless_assumed) {
  const std::string plain = emit(lower_one(kAdd));
  EXPECT_NE(plain.find("if (N > 0)"), std::string::npos) << plain;
  EXPECT_NE(plain.find("const int N"), std::string::npos);
  const std::string assumed = emit(scripted(kAdd, "assume constraint=\"N > 0\""));
  EXPECT_EQ(assumed.find("if ("), std::string::npos) << assumed;
}

TEST(codegen, unresolved_extent_is_reported) {
  const Kernel k = lower_one(kAdd);
  EXPECT_EQ(error_of([&] { count_cost(k, linearize(k)); }), ErrorCode::UnresolvedExtent);
  EXPECT_EQ(count_cost(k, linearize(k), {{"N", 7}}).flops, 7);
}

TEST(codegen, integer_powers_are_strength_reduced) {
  const Kernel k = lower_one(R"(
subroutine pw(N, a, out)
  integer :: N
  real(kind=4), dimension(N) :: a, out
  integer :: i
  do i = 1, N
    out(i) = a(i)**2 + a(i)**4 + a(i)**5 + a(i)**1.4
  end do
end subroutine pw
)");
  const std::string src = emit(k);
  EXPECT_NE(src.find("(a[i] * a[i]) + "), std::string::npos) << src;
  EXPECT_NE(src.find("a[i] * a[i] * a[i] * a[i]"), std::string::npos) << src;
  EXPECT_NE(src.find("pow(a[i], 5"), std::string::npos) << src;
  EXPECT_NE(src.find("pow(a[i], 1.39999998f)"), std::string::npos) << src;
}

TEST(codegen, hardware_inames_read_builtins) {
  const std::string src = emit(corpus_level(1, 3).at(0));
  EXPECT_NE(src.find("const int e = GROUP_ID(0);"), std::string::npos);
  EXPECT_NE(src.find("= LOCAL_ID(0);"), std::string::npos);
  EXPECT_NE(src.find("= LOCAL_ID(1);"), std::string::npos);
  EXPECT_EQ(src.find("for (int e "), std::string::npos);
}

TEST(codegen, priority_puts_k_outside_the_sums) {
  const std::vector<std::string> lines = body_lines(emit(corpus_level(1, 3).at(0)));
  // Track loop depth by braces; every n loop opens while the k loop is open.
  int depth = 0, k_depth = -1, n_loops = 0;
  for (const auto& line : lines) {
    if (line.rfind("for (int k ", 0) == 0) k_depth = depth;
    if (line.rfind("for (int n", 0) == 0) {
      ++n_loops;
      EXPECT_GE(k_depth, 0) << line;
      EXPECT_GT(depth, k_depth) << line;
    }
    if (line == "{") ++depth;
    if (line == "}") {
      --depth;
      if (depth == k_depth) k_depth = -1;
    }
  }
  EXPECT_GT(n_loops, 0);
}

TEST(codegen, barriers_become_synchronization) {
  const Kernel& k = corpus_level(3, 3).at(0);
  const Schedule s = linearize(k);
  const std::string src = emit_source(k, s);
  EXPECT_EQ(occurrences(src, "BARRIER();"), s.barrier_count());
  EXPECT_NE(src.find("local float D_fetch["), std::string::npos);
}

TEST(codegen, vector_fetch_and_component_reads) {
  const std::string src = emit(corpus_level(kMaxLevel, 3).at(0));
  EXPECT_NE(src.find("global const vec4f *restrict q"), std::string::npos);
  EXPECT_NE(src.find("vec4f q_fetch["), std::string::npos);
  // The fetch moves whole vectors.
  EXPECT_TRUE(std::regex_search(src, std::regex(R"(q_fetch\[[^\]]*\] = q\[[^\]]*\];)"))) << src;
  // Field reads pick components of the fetched vectors.
  EXPECT_TRUE(std::regex_search(src, std::regex(R"(q_fetch\[[0-9]\]\.s[0-3])")));
}

TEST(codegen, scalar_reads_of_vector_layout_use_components) {
  const std::string src = emit(corpus_level(2, 3).at(0));
  EXPECT_NE(src.find("vec4f *restrict q"), std::string::npos);
  EXPECT_TRUE(std::regex_search(src, std::regex(R"(q\[[^\]]*\]\.s[0-3])"))) << src;
}

TEST(codegen, emission_is_deterministic) {
  for (int level = 0; level <= kMaxLevel; ++level) {
    const Kernel& k = corpus_level(level, 3).at(0);
    const std::string a = emit(k);
    EXPECT_EQ(emit(parse_kernel_dump(dump_kernel(k))), a) << "level " << level;
    EXPECT_EQ(emit(build_level(level, 3).at(0)), a) << "level " << level;
  }
}

TEST(codegen, scratchpad_shapes_must_be_literal) {
  Kernel k = corpus_level(3, 3).at(0);
  for (auto& t : k.temporaries) {
    if (t.name == "D_fetch") t.shape[0] = Expr::var("Ne");
  }
  EXPECT_EQ(error_of([&] { emit(k); }), ErrorCode::UnfixedParameterInShape);
}

TEST(codegen, unresolvable_vector_lane_is_rejected) {
  const Kernel k = scripted(R"(
subroutine v(N, a, out)
  integer :: N
  real(kind=4), dimension(4, N) :: a, out
  integer :: i, j
  do j = 1, N
    do i = 1, 4
      out(i, j) = a(i, j)*2.0
    end do
  end do
end subroutine v
)",
                            "tag_array_axes array=a tags=vec,N0\ntag_inames i=lane.0");
  EXPECT_EQ(error_of([&] { emit(k); }), ErrorCode::VecAccessMisaligned);
}

TEST(codegen, cost_follows_the_recipe) {
  const int64_t nq = 4, ne = 3;
  const CostReport l5 = level_cost(5, nq, ne), l6 = level_cost(6, nq, ne);
  const CostReport l7 = level_cost(7, nq, ne), l8 = level_cost(8, nq, ne);
  // Buffering rhsq removes its per-sum traffic.
  EXPECT_LT(l7.arrays.at("rhsq").bytes_read, l6.arrays.at("rhsq").bytes_read);
  EXPECT_LT(l7.arrays.at("rhsq").bytes_written, l6.arrays.at("rhsq").bytes_written);
  // Precomputed dofs already read q once; the prefetch keeps it there.
  EXPECT_LT(l6.arrays.at("q").bytes_read, l5.arrays.at("q").bytes_read);
  EXPECT_EQ(l7.arrays.at("q").bytes_read, l6.arrays.at("q").bytes_read);
  // The hoisted Jacobian saves multiplications.
  EXPECT_LT(l8.flops, l7.flops);
  EXPECT_LT(l8.multiplies_by.at("Jinv"), l7.multiplies_by.at("Jinv"));
}

TEST(codegen, report_text_lists_totals) {
  const Kernel k = scripted(kAdd, "fix_parameters N=10");
  const std::string t = count_cost(k, linearize(k)).text();
  EXPECT_NE(t.find("flops=10"), std::string::npos) << t;
  EXPECT_NE(t.find("\nbytes_read=80"), std::string::npos) << t;
  EXPECT_NE(t.find("\nbytes_written=40"), std::string::npos) << t;
}
