#pragma once

// The transformation catalog. Every operation takes a consistent kernel and
// returns a new consistent kernel (or throws); inputs are never modified.
// Operations that find nothing to do append a NoMatch diagnostic and return
// the kernel unchanged.

#include <functional>
#include <string>
#include <vector>

#include "loopforge/kernel.hpp"
#include "loopforge/script.hpp"

namespace loopforge {

Kernel fuse_kernels(const std::vector<Kernel>& kernels, const std::vector<std::string>& suffixes,
                    const std::optional<std::string>& name = std::nullopt);
Kernel fix_parameters(const Kernel& k, const std::vector<std::pair<std::string, int64_t>>& values);
Kernel assume(const Kernel& k, std::string_view constraint);
Kernel prioritize_loops(const Kernel& k, const std::vector<std::string>& order);
Kernel tag_inames(const Kernel& k, const std::vector<std::pair<std::string, InameTag>>& tags);
Kernel rename_iname(const Kernel& k, const RenameInameCommand& cmd, Diagnostics* diags = nullptr);
Kernel set_array_axis_names(const Kernel& k, const std::string& array,
                            const std::vector<std::string>& names);
Kernel split_array_axis(const Kernel& k, const std::string& array, const std::string& axis,
                        int64_t factor);
Kernel tag_array_axes(const Kernel& k, const std::string& array, const std::vector<DimTag>& tags);
Kernel assignment_to_subst(const Kernel& k, const AssignmentToSubstCommand& cmd,
                           Diagnostics* diags = nullptr);
Kernel precompute(const Kernel& k, const PrecomputeCommand& cmd, Diagnostics* diags = nullptr);
Kernel add_prefetch(const Kernel& k, const AddPrefetchCommand& cmd, Diagnostics* diags = nullptr);
Kernel alias_temporaries(const Kernel& k, const std::vector<std::string>& names);
Kernel buffer_array(const Kernel& k, const BufferArrayCommand& cmd, Diagnostics* diags = nullptr);
Kernel collect_common_factors(const Kernel& k, const std::string& var,
                              Diagnostics* diags = nullptr);

/// Merges rules with identical bodies and drops rules no instruction can
/// reach. Run after every transformation.
Kernel normalize_rules(Kernel k);

/// Applies one command. `fuse` consumes every kernel; all other commands
/// need exactly one.
std::vector<Kernel> apply_command(const std::vector<Kernel>& kernels, const TransformCommand& cmd,
                                  Diagnostics* diags = nullptr);

using StepObserver = std::function<void(std::size_t step, const TransformCommand& cmd,
                                        const std::vector<Kernel>& result)>;

std::vector<Kernel> apply_script(std::vector<Kernel> kernels,
                                 const std::vector<TransformCommand>& script,
                                 Diagnostics* diags = nullptr, const StepObserver& observer = {});

}  // namespace loopforge
