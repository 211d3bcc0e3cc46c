#pragma once

// Self-check suites run by `cmle check`: gradients, sinkhorn, gumbel,
// reinforce and decomposition.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cmle::checks {

struct CheckOptions {
  std::size_t max_size = 6;         // sinkhorn: largest n1, n2
  std::size_t instances = 200;      // sinkhorn: random instances
  std::size_t draws = 100000;       // gumbel, reinforce: Monte-Carlo draws
  std::size_t records = 20000;      // decomposition: counterfactual records
  std::size_t trained_epochs = 3;   // decomposition: MLE epochs for the trained model
  std::uint64_t seed = 2024;
};

struct Assertion {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double bound = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Assertion> assertions;
  bool passed() const;
};

const std::vector<std::string>& suite_names();
// Throws std::invalid_argument for unknown suite names.
SuiteReport run_suite(const std::string& name, const CheckOptions& options = {});

std::string format_report(const SuiteReport& report);
nlohmann::json report_json(const SuiteReport& report);

}  // namespace cmle::checks
