#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "loopforge/bench.hpp"
#include "loopforge/exec.hpp"
#include "loopforge/frontend.hpp"
#include "loopforge/script.hpp"
#include "test_util.hpp"

using namespace loopforge;
using namespace loopforge::test;

namespace {

std::string corpus_text() { return std::string(volume_source()); }

int line_of(const std::string& text, const std::string& needle, int from = 1) {
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (n >= from && line.find(needle) != std::string::npos) return n;
  }
  return -1;
}

std::string wrap(const std::string& body, const std::string& decls = "") {
  return "subroutine t(N, a, b)\n  integer :: N\n  real(kind=4), dimension(N) :: a, b\n"
         "  integer :: i, j\n" + decls + body + "end subroutine t\n";
}

// Direct execution of the parsed statements (1-based subscripts).
class AstRunner {
 public:
  AstRunner(const Subroutine& sub, std::map<std::string, int64_t> params) : sub_(sub) {
    for (auto& [name, v] : params) b_.scalars[name] = Value::i32(v);
    for (const auto& d : sub.decls) {
      if (d.dims.empty()) continue;
      DenseArray a;
      for (const auto& dim : d.dims) a.shape.push_back(evaluate(dim, b_, {}).as_int());
      int64_t n = 1;
      for (auto s : a.shape) n *= s;
      a.data.assign(n, 0.0);
      arrays_[d.name] = a;
    }
  }

  std::map<std::string, DenseArray>& arrays() { return arrays_; }

  void run() { run_block(sub_.body); }

 private:
  class Bound : public Bindings {
   public:
    Bound(const MapBindings& s, const std::map<std::string, DenseArray>& a) : s_(s), a_(a) {}
    std::optional<Value> lookup(const std::string& name) const override { return s_.lookup(name); }
    Value load(const std::string& array, std::span<const int64_t> index) const override {
      const DenseArray& arr = a_.at(array);
      std::vector<int64_t> zero(index.begin(), index.end());
      for (auto& i : zero) --i;
      return Value::f32(static_cast<float>(arr.data.at(arr.offset(zero))));
    }

   private:
    const MapBindings& s_;
    const std::map<std::string, DenseArray>& a_;
  };

  void run_block(const std::vector<Statement>& body) {
    for (const auto& st : body) {
      if (const auto* loop = std::get_if<DoLoop>(&st.node)) {
        const int64_t hi = evaluate(loop->upper, b_, {}).as_int();
        for (int64_t v = 1; v <= hi; ++v) {
          b_.scalars[loop->var] = Value::i32(v);
          run_block(loop->body);
        }
      } else {
        const auto& asg = std::get<Assignment>(st.node);
        const Bound bound(b_, arrays_);
        const Value v = evaluate(asg.value, bound, {});
        if (asg.indices.empty()) {
          b_.scalars[asg.target] = Value::f32(v.as_float());
        } else {
          std::vector<int64_t> idx;
          for (const auto& e : asg.indices) idx.push_back(evaluate(e, b_, {}).as_int() - 1);
          DenseArray& a = arrays_.at(asg.target);
          a.data[a.offset(idx)] = v.as_float();
        }
      }
    }
  }

  const Subroutine& sub_;
  MapBindings b_;
  std::map<std::string, DenseArray> arrays_;
};

}  // namespace

TEST(frontend, corpus_has_two_subroutines_and_regions) {
  const std::string text = corpus_text();
  const SourceUnit u = parse_source(text);
  ASSERT_EQ(u.subroutines.size(), 2u);
  EXPECT_EQ(u.subroutines[0].name, "volume_r");
  EXPECT_EQ(u.subroutines[1].name, "volume_s");
  const auto& prep = u.tagged_regions.at("local_prep");
  ASSERT_EQ(prep.size(), 2u);
  const int first_load = line_of(text, "rho = q(n, j, k, 1, e)");
  const int last_load = line_of(text, "ji = Jinv(i, j, k, e)");
  EXPECT_LT(prep[0].begin, first_load);
  EXPECT_GT(prep[0].end, last_load);
  EXPECT_LT(prep[0].end, line_of(text, "f1 = uc"));
}

TEST(frontend, corpus_transform_block_is_the_full_recipe) {
  const SourceUnit u = parse_source(corpus_text());
  ASSERT_TRUE(u.transform_block.has_value());
  EXPECT_EQ(*u.transform_block, transform_recipe(kMaxLevel, 8));
}

TEST(frontend, empty_file) {
  const SourceUnit u = parse_source("");
  EXPECT_TRUE(u.subroutines.empty());
  EXPECT_FALSE(u.transform_block.has_value());
  EXPECT_TRUE(lower_to_kernels(u).empty());
}

TEST(frontend, unsupported_constructs) {
  EXPECT_EQ(error_of([] { parse_source(wrap("  do i = 2, N\n    a(i) = 1.0\n  end do\n")); }),
            ErrorCode::UnsupportedConstruct);
  EXPECT_EQ(error_of([] { parse_source(wrap("  do i = 1, N, 2\n    a(i) = 1.0\n  end do\n")); }),
            ErrorCode::UnsupportedConstruct);
  EXPECT_EQ(error_of([] { parse_source(wrap("  if (N > 1) a(1) = 1.0\n")); }),
            ErrorCode::UnsupportedConstruct);
  EXPECT_EQ(error_of([] { parse_source(wrap("  if (N .gt. 1) then\n  end if\n")); }),
            ErrorCode::UnsupportedConstruct);
  EXPECT_EQ(error_of([] { parse_source(wrap("  a(1) = b(1) > 2.0\n")); }), ErrorCode::SyntaxError);
}

TEST(frontend, syntax_errors_carry_position) {
  try {
    parse_source(wrap("  do i = 1, N\n    a(i) = (1.0 + \n  end do\n"));
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SyntaxError);
    EXPECT_NE(std::string(e.what()).find("line 6"), std::string::npos) << e.what();
  }
}

TEST(frontend, lowering_errors) {
  EXPECT_EQ(error_of([] {
              lower(wrap("  do i = 1, N\n    do i = 1, N\n      a(i) = 1.0\n    end do\n  end do\n"));
            }),
            ErrorCode::ShadowedName);
  EXPECT_EQ(error_of([] {
              lower(wrap("  do i = 1, N\n    do j = 1, i\n      a(j) = 1.0\n    end do\n  end do\n"));
            }),
            ErrorCode::NonRectangularLoop);
}

TEST(frontend, lowering_simple_nest) {
  const Kernel k = lower_one(R"(
subroutine inc(Ne, Nq, a, out)
  integer :: Ne, Nq
  real(kind=4), dimension(Nq, Ne) :: a, out
  integer :: e, i
  do e = 1, Ne
    do i = 1, Nq
      out(i, e) = a(i, e) + 1
    end do
  end do
end subroutine inc
)");
  ASSERT_EQ(k.domain.inames.size(), 2u);
  EXPECT_EQ(domain_projection(k, {"e", "i"}),
            (std::map<std::string, Expr>{{"e", Expr::var("Ne")}, {"i", Expr::var("Nq")}}));
  ASSERT_EQ(k.instructions.size(), 1u);
  const Instruction& insn = k.instructions[0];
  EXPECT_EQ(insn.assignee, "out");
  EXPECT_EQ(insn.indices, (std::vector<Expr>{Expr::var("i"), Expr::var("e")}));
  EXPECT_EQ(insn.within, (std::set<std::string>{"e", "i"}));
  EXPECT_FALSE(insn.is_update);
  EXPECT_EQ(k.domain.parameters, (std::set<std::string>{"Ne", "Nq"}));
}

TEST(frontend, corpus_r_kernel_domain) {
  const Kernel k = lower(corpus_text()).at(0);
  const auto p = domain_projection(k, {"e", "i", "j", "k", "n"});
  EXPECT_EQ(p.at("e"), Expr::var("Ne"));
  for (const char* name : {"i", "j", "k", "n"}) EXPECT_EQ(p.at(name), Expr::var("Nq")) << name;
}

TEST(frontend, self_reference_sets_update) {
  const Kernel k = lower_one(wrap("  do i = 1, N\n    b(i) = b(i) + a(i)*2.0\n"
                                  "    a(i) = 3.0*a(i)\n  end do\n"));
  ASSERT_EQ(k.instructions.size(), 2u);
  EXPECT_TRUE(k.instructions[0].is_update);
  EXPECT_EQ(k.instructions[0].rhs, parse_expr("a[i]*2.0"));
  EXPECT_FALSE(k.instructions[1].is_update);
}

TEST(frontend, region_tags_mark_exactly_enclosed_instructions) {
  const std::string text = corpus_text();
  const SourceUnit u = parse_source(text);
  const auto kernels = lower_to_kernels(u);
  for (const auto& k : kernels) {
    for (const auto& insn : k.instructions) {
      const bool field_load = insn.rhs.as<Subscript>() && insn.rhs.as<Subscript>()->array == "q";
      if (field_load) EXPECT_TRUE(insn.tags.count("local_prep")) << insn.id;
      const bool accumulates = insn.assignee == "rhsq";
      if (accumulates) {
        EXPECT_FALSE(insn.tags.count("local_prep")) << insn.id;
        EXPECT_FALSE(insn.tags.count("flux")) << insn.id;
      }
    }
  }
  std::size_t prep = 0, flux = 0;
  for (const auto& insn : kernels[0].instructions) {
    prep += insn.tags.count("local_prep");
    flux += insn.tags.count("flux");
  }
  EXPECT_EQ(prep, 14u);
  EXPECT_EQ(flux, 8u);
}

TEST(frontend, lowering_matches_direct_execution) {
  const std::string src = R"(
subroutine mix(N, M, a, b, c)
  integer :: N, M
  real(kind=4), dimension(N, M) :: a, c
  real(kind=4), dimension(M) :: b
  integer :: i, j, l
  real(kind=4) :: s, t
  do j = 1, M
    do i = 1, N
      s = a(i, j)*b(j)
      t = s*s - 0.5
      c(i, j) = c(i, j) + t/(1.0 + s*s)
      do l = 1, M
        c(i, j) = c(i, j) + a(i, l)*b(l)
      end do
      c(i, j) = 0.5*c(i, j)
    end do
  end do
end subroutine mix
)";
  const SourceUnit u = parse_source(src);
  const Kernel k = lower_subroutine(u.subroutines[0]);
  for (uint64_t seed : {1u, 2u, 3u}) {
    const int64_t n = 3 + static_cast<int64_t>(seed), m = 2 + static_cast<int64_t>(seed);
    AstRunner direct(u.subroutines[0], {{"N", n}, {"M", m}});
    ArgValues values;
    values.params = {{"N", n}, {"M", m}};
    for (const char* name : {"a", "b", "c"}) {
      auto& arr = direct.arrays().at(name);
      const auto data = random_floats(arr.data.size(), seed * 10 + name[0]);
      std::copy(data.begin(), data.end(), arr.data.begin());
      values.arrays[name] = data;
    }
    direct.run();
    run_kernel(k, values);
    const auto& want = direct.arrays().at("c").data;
    EXPECT_LE(max_rel_diff(values.arrays.at("c"), std::vector<float>(want.begin(), want.end())), 1e-6);
  }
}

TEST(frontend, script_examples) {
  const auto fuse = parse_transform_script("fuse suffixes=_r,_s");
  ASSERT_EQ(fuse.size(), 1u);
  const auto& f = std::get<FuseCommand>(fuse[0]);
  EXPECT_EQ(f.suffixes, (std::vector<std::string>{"_r", "_s"}));
  EXPECT_FALSE(f.name.has_value());

  EXPECT_TRUE(parse_transform_script("").empty());
  EXPECT_TRUE(parse_transform_script("  # only a comment\n\n").empty());

  const auto tags = parse_transform_script("tag_inames e=core.0 i=lane.0 j=lane.1");
  const auto& t = std::get<TagInamesCommand>(tags.at(0));
  ASSERT_EQ(t.tags.size(), 3u);
  EXPECT_EQ(t.tags[0], std::make_pair(std::string("e"), InameTag::core(0)));
  EXPECT_EQ(t.tags[1], std::make_pair(std::string("i"), InameTag::lane(0)));
  EXPECT_EQ(t.tags[2], std::make_pair(std::string("j"), InameTag::lane(1)));

  const auto ren = parse_transform_script("rename_iname old=n new=n_f0 within=\"reads:flux_f0\"");
  const auto& r = std::get<RenameInameCommand>(ren.at(0));
  EXPECT_EQ(r.old_name, "n");
  EXPECT_EQ(r.new_name, "n_f0");
  EXPECT_EQ(r.within.kind, MatchPredicate::Kind::reads);
  EXPECT_EQ(r.within.name, "flux_f0");
}

TEST(frontend, script_errors) {
  EXPECT_EQ(error_of([] { parse_transform_script("frobnicate x=1"); }), ErrorCode::UnknownCommand);
  EXPECT_EQ(error_of([] { parse_transform_script("fuse suffixes"); }), ErrorCode::ScriptSyntaxError);
  EXPECT_EQ(error_of([] { parse_transform_script("rename_iname old=n new=m within=\"tag:x"); }),
            ErrorCode::ScriptSyntaxError);
  EXPECT_EQ(error_of([] { parse_transform_script("tag_inames e=banana.3"); }), ErrorCode::BadArgument);
  EXPECT_EQ(error_of([] { parse_transform_script("split_array_axis array=q axis=0 factor=x"); }),
            ErrorCode::BadArgument);
  EXPECT_EQ(error_of([] { parse_transform_script("fix_parameters Nq=8 Nq=9 bogus"); }),
            ErrorCode::ScriptSyntaxError);
  try {
    parse_transform_script("fuse suffixes=_r,_s\n\nfuse suffixes");
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(frontend, script_round_trip_every_level) {
  for (int level = 0; level <= kMaxLevel; ++level) {
    const auto cmds = parse_transform_script(transform_recipe(level, 8));
    for (const auto& cmd : cmds) {
      const std::string line = to_string(cmd);
      const auto again = parse_transform_script(line);
      ASSERT_EQ(again.size(), 1u) << line;
      EXPECT_EQ(to_string(again[0]), line);
      EXPECT_EQ(command_name(again[0]), command_name(cmd));
    }
  }
}
