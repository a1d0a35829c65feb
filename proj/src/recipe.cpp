#include <vector>

#include "loopforge/bench.hpp"
#include "loopforge/error.hpp"

namespace loopforge {

namespace {

std::string fields(const std::string& prefix, const std::string& suffix) {
  std::string out;
  for (int b = 1; b <= 8; ++b) {
    if (b > 1) out += ",";
    out += prefix + std::to_string(b) + suffix;
  }
  return out;
}

void level1(std::vector<std::string>& s, int64_t nq) {
  s.push_back("fuse suffixes=_r,_s name=volume");
  s.push_back("fix_parameters Nq=" + std::to_string(nq));
  s.push_back("assume constraint=\"Ne > 0\"");
  s.push_back("prioritize_loops order=k,n");
  s.push_back("tag_inames e=core.0 i=lane.0 j=lane.1");
}

void level2(std::vector<std::string>& s) {
  for (const char* a : {"q", "rhsq"}) {
    const std::string name(a);
    s.push_back("set_array_axis_names array=" + name + " names=i,j,k,field,e");
    s.push_back("split_array_axis array=" + name + " axis=field factor=4");
    s.push_back("tag_array_axes array=" + name + " tags=N0,N1,N2,vec,N3,N4");
  }
}

void level3(std::vector<std::string>& s) {
  s.push_back("add_prefetch var=D sweep=i,j,k,n space=scratchpad tags=lane.0,lane.1");
}

void level4(std::vector<std::string>& s) {
  s.push_back("assignment_to_subst within=\"tag:local_prep\"");
}

void level5(std::vector<std::string>& s) {
  s.push_back("assignment_to_subst within=\"tag:flux\"");
  s.push_back("rename_iname old=k new=k_t within=\"tag:t_update\"");
  // The compute inames become lanes in the step that creates them, so no
  // stage has every lane write the whole flux slice.
  for (int b = 1; b <= 8; ++b) {
    const std::string f = "f" + std::to_string(b);
    s.push_back("precompute rule=" + f + "_r_subst sweep=n,j compute_inames=ii,jj space=scratchpad" +
                (b == 1 ? " tags=lane.0,lane.1" : ""));
  }
  for (int b = 1; b <= 8; ++b) {
    const std::string f = "f" + std::to_string(b);
    s.push_back("precompute rule=" + f + "_s_subst sweep=i,n compute_inames=ii,jj space=scratchpad");
  }
  for (int b = 1; b <= 8; ++b) {
    const std::string f = "tf" + std::to_string(b);
    s.push_back("precompute rule=" + f +
                "_s_subst sweep=i,j,n compute_inames=ii,jj,k storage_axes=n space=private");
  }
  for (const char* dir : {"_r", "_s"}) {
    for (int b = 1; b <= 8; ++b) {
      const std::string tmp = "f" + std::to_string(b) + dir;
      s.push_back("rename_iname old=n new=n_" + tmp + " within=\"reads:" + tmp + "_tmp\"");
    }
  }
  for (int b = 1; b <= 8; ++b) {
    const std::string tmp = "tf" + std::to_string(b) + "_s";
    s.push_back("rename_iname old=n new=n_" + tmp + " within=\"reads:" + tmp + "_tmp\"");
  }
  s.push_back("alias_temporaries names=" + fields("f", "_r_tmp"));
  s.push_back("alias_temporaries names=" + fields("f", "_s_tmp"));
}

void level6(std::vector<std::string>& s) {
  std::vector<std::string> rules = {"uc_r_subst", "uc_s_subst", "tuc_s_subst", "p_r_subst"};
  for (const char* dir : {"g%_r_subst", "g%_s_subst", "tg%_s_subst"}) {
    for (int a = 1; a <= 3; ++a) {
      std::string r(dir);
      r.replace(r.find('%'), 1, std::to_string(a));
      rules.push_back(r);
    }
  }
  for (const char* dof : {"rho", "u1", "u2", "u3", "th", "c1", "c2", "c3"}) {
    rules.push_back(std::string(dof) + "_r_subst");
  }
  for (const auto& r : rules) s.push_back("precompute rule=" + r + " space=private");
}

void level7(std::vector<std::string>& s) {
  s.push_back("add_prefetch var=q space=private");
  s.push_back("buffer_array var=rhsq buffer_inames=k,k_t init=zero store=accumulate");
}

void level8(std::vector<std::string>& s) {
  s.push_back("tag_array_axes array=q_fetch tags=vec,N0");
  s.push_back("tag_array_axes array=rhsq_buf tags=N0,vec,N1");
  s.push_back("tag_array_axes array=D_fetch tags=N1,N0");
  s.push_back("tag_inames q_field_inner=vec rhsq_field_inner_init=vec rhsq_field_inner_store=vec");
  s.push_back("collect_common_factors var=rhsq_buf");
}

}  // namespace

std::string transform_recipe(int level, int64_t nq) {
  if (level < 0 || level > kMaxLevel) {
    fail(ErrorCode::BadArgument, "optimization level must be in 0.." + std::to_string(kMaxLevel));
  }
  std::vector<std::string> s;
  if (level >= 1) level1(s, nq);
  if (level >= 2) level2(s);
  if (level >= 3) level3(s);
  if (level >= 4) level4(s);
  if (level >= 5) level5(s);
  if (level >= 6) level6(s);
  if (level >= 7) level7(s);
  if (level >= 8) level8(s);
  std::string out;
  for (const auto& line : s) out += line + "\n";
  return out;
}

}  // namespace loopforge
