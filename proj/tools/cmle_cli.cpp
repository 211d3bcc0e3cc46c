// cmle: dataset generation, single training runs, the multi-seed benchmark
// and the self-check suites.
//
// Exit codes: 0 success, 1 check or bench failure, 2 usage or config error,
// 3 missing input, 4 numerical divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cmle/bench.hpp"
#include "cmle/checks.hpp"
#include "cmle/scm.hpp"
#include "cmle/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmle;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kMissing = 3, kDivergence = 4 };

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  if (!fs::exists(path)) throw MissingInput(path);
  std::ifstream is(path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void require_inputs(const train::DatasetPaths& paths) {
  auto check = [](const std::optional<std::string>& p) {
    if (p && !fs::exists(*p)) throw MissingInput(*p);
  };
  check(paths.train);
  check(paths.validation);
  for (const auto& p : paths.test) check(p);
}

// Command-line values that override the config document; set only when given.
struct TrainFlags {
  std::optional<std::string> objective, estimator, phi_source, wass_marginals;
  std::optional<double> alpha, gumbel_tau, learning_rate;
  std::optional<std::uint64_t> seed, data_seed;
  std::optional<std::size_t> epochs, batch_size, n_train, n_val, n_test, classifier_epochs;
  std::optional<std::string> train_data, val_data;
  std::array<std::optional<std::string>, train::kTestSets.size()> test_data;

  void add_to(CLI::App& app, bool per_run) {
    if (per_run) {
      app.add_option("--objective", objective, "mle | implicit | explicit");
      app.add_option("--alpha", alpha, "regularizer weight");
      app.add_option("--gumbel-tau", gumbel_tau, "Gumbel-softmax temperature");
      app.add_option("--estimator", estimator, "reparam | gumbel | reinforce");
      app.add_option("--phi-source", phi_source, "observational | interventional");
      app.add_option("--wass-marginals", wass_marginals, "batch | global");
      app.add_option("--seed", seed, "run seed");
      app.add_option("--train-data", train_data, "training CSV");
      app.add_option("--val-data", val_data, "validation CSV");
      for (std::size_t i = 0; i < train::kTestSets.size(); ++i) {
        const std::string name(train::to_string(train::kTestSets[i]));
        app.add_option("--test-" + name, test_data[i], name + " test CSV");
      }
    }
    app.add_option("--lr", learning_rate, "Adam learning rate");
    app.add_option("--epochs", epochs, "training epochs");
    app.add_option("--batch-size", batch_size, "mini-batch size");
    app.add_option("--n-train", n_train, "generated training records");
    app.add_option("--n-val", n_val, "generated validation records");
    app.add_option("--n-test", n_test, "generated records per test set");
    app.add_option("--classifier-epochs", classifier_epochs, "p(t | x, y) pretraining epochs");
    app.add_option("--data-seed", data_seed, "fixed data seed (disables per-run resampling)");
  }

  json overrides() const {
    json o = json::object();
    json objective_doc = json::object();
    if (objective) objective_doc["kind"] = *objective;
    if (alpha) objective_doc["alpha"] = *alpha;
    if (gumbel_tau) objective_doc["gumbel_tau"] = *gumbel_tau;
    if (estimator) objective_doc["estimator"] = *estimator;
    if (phi_source) objective_doc["phi_source"] = *phi_source;
    if (wass_marginals) objective_doc["wass_marginals"] = *wass_marginals;
    if (!objective_doc.empty()) o["objective"] = objective_doc;
    if (learning_rate) o["learning_rate"] = *learning_rate;
    if (seed) o["seed"] = *seed;
    if (data_seed) {
      o["data_seed"] = *data_seed;
      o["resample_data"] = false;
    }
    if (epochs) o["epochs"] = *epochs;
    if (batch_size) o["batch_size"] = *batch_size;
    if (n_train) o["n_train"] = *n_train;
    if (n_val) o["n_val"] = *n_val;
    if (n_test) o["n_test"] = *n_test;
    if (classifier_epochs) o["classifier_epochs"] = *classifier_epochs;
    json datasets = json::object();
    if (train_data) datasets["train"] = *train_data;
    if (val_data) datasets["validation"] = *val_data;
    for (std::size_t i = 0; i < test_data.size(); ++i)
      if (test_data[i]) datasets[std::string(train::to_string(train::kTestSets[i]))] = *test_data[i];
    if (!datasets.empty()) o["datasets"] = datasets;
    return o;
  }
};

int cmd_gen(const std::string& variant_name, std::size_t n, std::uint64_t seed, const std::string& out) {
  const auto variant = scm::parse_variant(variant_name);
  const auto data = scm::sample_dataset({n, seed, variant});
  scm::write_dataset(data, out);
  std::cout << "wrote " << data.size() << " " << scm::to_string(variant) << " records to " << out << "\n";
  return kOk;
}

int cmd_train(const std::optional<std::string>& config_path, const TrainFlags& flags, const fs::path& out) {
  train::TrainConfig config;
  if (config_path) config = bench::config_from_json(read_json_file(*config_path));
  config = bench::config_from_json(flags.overrides(), config);
  config.validate();
  require_inputs(config.datasets);

  const auto data = train::prepare_data(config);
  std::optional<train::ClassifierResult> classifier;
  if (config.objective.kind == obj::Kind::explicit_) {
    classifier = train::pretrain_classifier(config, config.objective.phi_source, data);
    std::ostringstream os;
    nn::save_checkpoint(os, classifier->classifier);
    bench::write_text(out / "classifier.txt", os.str());
    std::cerr << "classifier (" << obj::to_string(config.objective.phi_source) << ") held-out accuracy "
              << classifier->heldout_accuracy << "\n";
  }
  const auto result = train::train_run(config, data, classifier ? &classifier->classifier : nullptr);
  std::string method(obj::to_string(config.objective.kind));
  if (config.objective.kind == obj::Kind::explicit_ && config.objective.phi_source == obj::PhiSource::interventional)
    method = "explicit_star";
  bench::write_run_directory(out, method, result, classifier);
  std::cout << bench::metrics_document(method, result, classifier)["mse"].dump(2) << "\n";
  return kOk;
}

int cmd_bench(const std::optional<std::string>& config_path, const TrainFlags& flags,
              const std::optional<std::size_t>& seed_count, const std::optional<std::vector<std::uint64_t>>& seed_list,
              const std::optional<std::vector<std::string>>& methods, const std::optional<double>& alpha_implicit,
              const std::optional<double>& alpha_explicit, const std::optional<std::size_t>& jobs,
              const std::optional<std::string>& out) {
  bench::BenchConfig config;
  if (config_path) config = bench::bench_config_from_json(read_json_file(*config_path));
  config.base = bench::config_from_json(flags.overrides(), config.base);
  if (seed_count && seed_list) throw std::invalid_argument("use either --seeds or --seed-list");
  if (seed_count) {
    const auto all = bench::default_seeds();
    if (*seed_count == 0 || *seed_count > all.size())
      throw std::invalid_argument("--seeds must be in 1.." + std::to_string(all.size()) + "; use --seed-list for others");
    config.seeds.assign(all.begin(), all.begin() + static_cast<long>(*seed_count));
  }
  if (seed_list) config.seeds = *seed_list;
  if (methods) config.methods = *methods;
  if (alpha_implicit) config.alpha_implicit = *alpha_implicit;
  if (alpha_explicit) config.alpha_explicit = *alpha_explicit;
  if (jobs) config.jobs = *jobs;
  if (out) config.output_dir = *out;
  config.validate();
  require_inputs(config.base.datasets);

  const auto report = bench::run_bench(config, [](const std::string& msg) { std::cerr << msg << "\n"; });
  std::cout << bench::table_csv(report.table);
  if (!report.all_succeeded()) {
    for (const auto& c : report.cells)
      if (!c.mse) std::cerr << "failed: " << c.method << " seed " << c.seed << ": " << c.error << "\n";
    return kFailure;
  }
  return kOk;
}

int cmd_check(const std::vector<std::string>& suites, const checks::CheckOptions& options,
              const std::optional<std::string>& json_path) {
  std::vector<std::string> selected = suites;
  if (selected.empty() || (selected.size() == 1 && selected[0] == "all")) selected = checks::suite_names();
  for (const auto& s : selected)
    if (std::find(checks::suite_names().begin(), checks::suite_names().end(), s) == checks::suite_names().end())
      throw std::invalid_argument("unknown suite '" + s + "'");

  bool ok = true;
  json doc = json::array();
  for (const auto& s : selected) {
    const auto r = checks::run_suite(s, options);
    std::cout << checks::format_report(r) << std::flush;
    doc.push_back(checks::report_json(r));
    ok = ok && r.passed();
  }
  if (json_path) bench::write_text(*json_path, doc.dump(2) + "\n");
  if (!ok) {
    std::cout << "failing assertions:\n";
    for (const auto& suite : doc)
      for (const auto& a : suite["assertions"])
        if (!a["passed"].get<bool>())
          std::cout << "  " << suite["suite"].get<std::string>() << ": " << a["name"].get<std::string>() << "\n";
  }
  return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual MLE benchmark tools"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Generate a dataset CSV from the structural causal model");
  std::string variant, gen_out;
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--variant", variant,
                  "observational | counterfactual | interventional | ood1 | ood2 | ood3 | discrete_toy")
      ->required();
  gen->add_option("--n", gen_n, "record count")->required();
  gen->add_option("--seed", gen_seed, "rng seed")->required();
  gen->add_option("--out", gen_out, "output CSV path")->required();

  auto* tr = app.add_subcommand("train", "Train one outcome model and write a run directory");
  std::optional<std::string> train_config;
  std::string train_out;
  TrainFlags train_flags;
  tr->add_option("--config", train_config, "JSON training config");
  tr->add_option("--out", train_out, "run directory")->required();
  train_flags.add_to(*tr, true);

  auto* be = app.add_subcommand("bench", "Run every (method, seed) cell and aggregate the table");
  std::optional<std::string> bench_config, bench_out;
  std::optional<std::size_t> seed_count, jobs;
  std::optional<std::vector<std::uint64_t>> seed_list;
  std::optional<std::vector<std::string>> methods;
  std::optional<double> alpha_implicit, alpha_explicit;
  TrainFlags bench_flags;
  be->add_option("--config", bench_config, "JSON bench config");
  be->add_option("--seeds", seed_count, "use the first N default seeds");
  be->add_option("--seed-list", seed_list, "explicit comma-separated seeds")->delimiter(',');
  be->add_option("--methods", methods, "comma-separated subset of mle,implicit,explicit,explicit_star")
      ->delimiter(',');
  be->add_option("--alpha-implicit", alpha_implicit, "alpha for the implicit objective");
  be->add_option("--alpha-explicit", alpha_explicit, "alpha for both explicit objectives");
  be->add_option("--jobs", jobs, "seeds run in parallel");
  be->add_option("--out", bench_out, "output directory");
  bench_flags.add_to(*be, false);

  auto* ch = app.add_subcommand("check", "Run self-check suites");
  std::vector<std::string> suites;
  std::optional<std::string> check_json;
  checks::CheckOptions check_options;
  ch->add_option("--suite", suites, "gradients | sinkhorn | gumbel | reinforce | decomposition | all")
      ->delimiter(',');
  ch->add_option("--max-size", check_options.max_size, "sinkhorn: largest side of a random instance");
  ch->add_option("--instances", check_options.instances, "sinkhorn: random instances");
  ch->add_option("--draws", check_options.draws, "gumbel/reinforce: Monte-Carlo draws");
  ch->add_option("--records", check_options.records, "decomposition: counterfactual records");
  ch->add_option("--seed", check_options.seed, "rng seed");
  ch->add_option("--json", check_json, "write a machine-readable report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(variant, gen_n, gen_seed, gen_out);
    if (*tr) return cmd_train(train_config, train_flags, train_out);
    if (*be)
      return cmd_bench(bench_config, bench_flags, seed_count, seed_list, methods, alpha_implicit, alpha_explicit,
                       jobs, bench_out);
    if (*ch) return cmd_check(suites, check_options, check_json);
  } catch (const MissingInput& e) {
    std::cerr << "error: missing input: " << e.what() << "\n";
    return kMissing;
  } catch (const train::DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\nrecent losses:";
    for (double v : e.trace()) std::cerr << " " << v;
    std::cerr << "\n";
    return kDivergence;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const scm::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
