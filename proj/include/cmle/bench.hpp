#pragma once

// Configuration documents, per-run metrics documents and the seeded
// multi-method benchmark with its aggregated table.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmle/trainer.hpp"

namespace cmle::bench {

using nlohmann::json;

// Unknown keys or ill-typed values throw std::invalid_argument. Keys absent
// from the document keep the values of base.
train::TrainConfig config_from_json(const json& doc, train::TrainConfig base = {});
json config_to_json(const train::TrainConfig& config);

inline constexpr const char* kCounterfactualMseDefinition =
    "mean over all (record, non-factual treatment) pairs of the squared error summed over both outcome coordinates";

// Stable fields: method, seed, mse.{observational,counterfactual,ood1,ood2,ood3}.
json metrics_document(const std::string& method, const train::RunResult& result,
                      const std::optional<train::ClassifierResult>& classifier = std::nullopt);

struct Method {
  std::string name;  // mle | implicit | explicit | explicit_star
  obj::ObjectiveConfig objective;
};
const std::vector<std::string>& method_names();
Method make_method(const std::string& name, double alpha_implicit, double alpha_explicit);

std::vector<std::uint64_t> default_seeds();

struct BenchConfig {
  std::vector<std::uint64_t> seeds = default_seeds();
  std::vector<std::string> methods = method_names();
  double alpha_implicit = 0.01;
  double alpha_explicit = 0.1;
  // Shared training settings; seed and objective are set per cell.
  train::TrainConfig base;
  std::filesystem::path output_dir = "bench-out";
  std::size_t jobs = 1;

  void validate() const;
};
json bench_config_to_json(const BenchConfig& config);
// Keys: seeds, methods, alpha_implicit, alpha_explicit, jobs, output_dir and
// base (a training config document).
BenchConfig bench_config_from_json(const json& doc, BenchConfig base = {});

struct CellResult {
  std::string method;
  std::uint64_t seed = 0;
  std::optional<std::array<double, train::kTestSets.size()>> mse;  // empty on failure
  std::string error;
  json metrics;  // full metrics document, null on failure
};

struct TableCell {
  std::size_t runs = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over seeds
  bool missing = false;  // some run of this column failed
};
struct BenchTable {
  std::vector<std::string> methods;
  // cells[test set][method]
  std::array<std::vector<TableCell>, train::kTestSets.size()> cells;
  const TableCell& at(train::TestSet s, const std::string& method) const;
};

// Order-independent reduce over the cells of each method.
BenchTable aggregate(const std::vector<CellResult>& cells, const std::vector<std::string>& methods,
                     std::size_t seeds);
std::string table_csv(const BenchTable& table);
json table_json(const BenchTable& table);

struct BenchReport {
  std::vector<CellResult> cells;  // sorted by (method order, seed order)
  BenchTable table;
  bool all_succeeded() const;
};

using Progress = std::function<void(const std::string&)>;
// Runs every (method, seed) cell, one pretrained classifier per
// (seed, phi_source), up to config.jobs seeds in parallel. Writes per-cell
// directories plus bench_table.csv and bench_report.json under output_dir.
BenchReport run_bench(const BenchConfig& config, const Progress& progress = {});

// Writes checkpoint.txt, metrics.json, config.json and loss_trace.csv.
void write_run_directory(const std::filesystem::path& dir, const std::string& method, const train::RunResult& result,
                         const std::optional<train::ClassifierResult>& classifier = std::nullopt);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace cmle::bench
