#pragma once

// Finite-difference gradient checks over every differentiable operation, a
// conv block, a small full network and the losses.
//
// Each case builds random inputs, projects the output onto a fixed random
// tensor R (L = sum(out * R)), and compares the reverse-mode gradient of L
// against central differences. The error per input tensor is normwise:
// |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|).

#include <optional>
#include <string>
#include <vector>

namespace strokeseg {

struct GradcheckOptions {
    bool f64 = false;
    int seeds = 5;
    std::uint64_t base_seed = 0;
    /// 0 selects the default: 1e-3 in f32, 1e-6 in f64.
    double tolerance = 0.0;
    /// Only cases whose name contains this substring run (empty = all).
    std::string filter;
    /// Test hook: negate the analytic gradient of the named case.
    std::optional<std::string> inject_wrong_sign;
};

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    int seeds = 0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckResult> results;
    double seconds = 0.0;

    bool all_passed() const;
};

GradcheckReport run_gradcheck(const GradcheckOptions& opts);

/// Names of every case in the suite, in execution order.
std::vector<std::string> gradcheck_case_names();

} // namespace strokeseg
