#pragma once

#include <functional>
#include <string>
#include <vector>

namespace cascn {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

/// Gradient checks, adjoint identities, loss/metric oracles, factorization,
/// FLOP ratios and attention/ASPP invariants. Each check reports as it finishes.
std::vector<CheckResult> run_verify(const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace cascn
