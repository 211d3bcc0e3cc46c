#include "cmle/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace cmle::bench {

namespace {

namespace fs = std::filesystem;

constexpr std::array<const char*, train::kTestSets.size()> kTestKeys{"observational", "counterfactual", "ood1",
                                                                      "ood2", "ood3"};

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config: wrong type for '" + key + "'");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw std::invalid_argument("config: '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::optional<std::string> get_path(const json& v, const std::string& key) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_string()) throw std::invalid_argument("config: '" + key + "' must be a path string or null");
  return v.get<std::string>();
}

std::vector<std::size_t> get_sizes(const json& v, const std::string& key) {
  if (!v.is_array()) throw std::invalid_argument("config: '" + key + "' must be an array of layer sizes");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(get_count(e, key));
  return out;
}

json path_json(const std::optional<std::string>& p) { return p ? json(*p) : json(nullptr); }

void apply_objective(const json& doc, obj::ObjectiveConfig& o) {
  if (!doc.is_object()) throw std::invalid_argument("config: 'objective' must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "kind") o.kind = obj::parse_kind(get_as<std::string>(v, key));
    else if (key == "alpha") o.alpha = get_as<double>(v, key);
    else if (key == "gumbel_tau") o.gumbel_tau = get_as<double>(v, key);
    else if (key == "estimator") o.estimator = obj::parse_estimator(get_as<std::string>(v, key));
    else if (key == "phi_source") o.phi_source = obj::parse_phi_source(get_as<std::string>(v, key));
    else if (key == "wass_marginals") o.wass_marginals = obj::parse_wass_marginals(get_as<std::string>(v, key));
    else throw std::invalid_argument("config: unknown key 'objective." + key + "'");
  }
}

void apply_architecture(const json& doc, nn::Architecture& a) {
  if (!doc.is_object()) throw std::invalid_argument("config: 'architecture' must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "encoder") a.encoder = get_sizes(v, key);
    else if (key == "head_hidden") a.head_hidden = get_sizes(v, key);
    else if (key == "classifier_hidden") a.classifier_hidden = get_sizes(v, key);
    else throw std::invalid_argument("config: unknown key 'architecture." + key + "'");
  }
}

void apply_datasets(const json& doc, train::DatasetPaths& d) {
  if (!doc.is_object()) throw std::invalid_argument("config: 'datasets' must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "train") {
      d.train = get_path(v, key);
      continue;
    }
    if (key == "validation") {
      d.validation = get_path(v, key);
      continue;
    }
    const auto it = std::find(kTestKeys.begin(), kTestKeys.end(), key);
    if (it == kTestKeys.end()) throw std::invalid_argument("config: unknown key 'datasets." + key + "'");
    d.test[static_cast<std::size_t>(it - kTestKeys.begin())] = get_path(v, key);
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json mse_json(const std::array<double, train::kTestSets.size()>& mse) {
  json out = json::object();
  for (std::size_t i = 0; i < mse.size(); ++i) out[kTestKeys[i]] = mse[i];
  return out;
}

}  // namespace

train::TrainConfig config_from_json(const json& doc, train::TrainConfig c) {
  if (!doc.is_object()) throw std::invalid_argument("config: top level must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "objective") apply_objective(v, c.objective);
    else if (key == "learning_rate") c.learning_rate = get_as<double>(v, key);
    else if (key == "batch_size") c.batch_size = get_count(v, key);
    else if (key == "epochs") c.epochs = get_count(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "architecture") apply_architecture(v, c.architecture);
    else if (key == "n_train") c.n_train = get_count(v, key);
    else if (key == "n_val") c.n_val = get_count(v, key);
    else if (key == "n_test") c.n_test = get_count(v, key);
    else if (key == "resample_data") c.resample_data = get_as<bool>(v, key);
    else if (key == "data_seed") c.data_seed = get_as<std::uint64_t>(v, key);
    else if (key == "classifier_epochs") c.classifier_epochs = get_count(v, key);
    else if (key == "datasets") apply_datasets(v, c.datasets);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return c;
}

json config_to_json(const train::TrainConfig& c) {
  json datasets = {{"train", path_json(c.datasets.train)}, {"validation", path_json(c.datasets.validation)}};
  for (std::size_t i = 0; i < kTestKeys.size(); ++i) datasets[kTestKeys[i]] = path_json(c.datasets.test[i]);
  return {
      {"objective",
       {{"kind", obj::to_string(c.objective.kind)},
        {"alpha", c.objective.alpha},
        {"gumbel_tau", c.objective.gumbel_tau},
        {"estimator", obj::to_string(c.objective.estimator)},
        {"phi_source", obj::to_string(c.objective.phi_source)},
        {"wass_marginals", obj::to_string(c.objective.wass_marginals)}}},
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"architecture",
       {{"encoder", c.architecture.encoder},
        {"head_hidden", c.architecture.head_hidden},
        {"classifier_hidden", c.architecture.classifier_hidden}}},
      {"n_train", c.n_train},
      {"n_val", c.n_val},
      {"n_test", c.n_test},
      {"resample_data", c.resample_data},
      {"data_seed", c.data_seed},
      {"classifier_epochs", c.classifier_epochs},
      {"datasets", datasets},
  };
}

json metrics_document(const std::string& method, const train::RunResult& r,
                      const std::optional<train::ClassifierResult>& classifier) {
  json doc = {
      {"method", method},
      {"seed", r.seed},
      {"mse", mse_json(r.mse)},
      {"counterfactual_mse_definition", kCounterfactualMseDefinition},
      {"best_epoch", r.best_epoch},
      {"best_validation_mse", r.best_validation_mse},
      {"steps", r.loss_trace.size()},
      {"final_loss", r.loss_trace.empty() ? json(nullptr) : json(r.loss_trace.back())},
      {"sinkhorn_floor_hits", r.sinkhorn_floor_hits},
      {"config", config_to_json(r.config)},
  };
  if (classifier) {
    doc["classifier"] = {{"source", obj::to_string(r.config.objective.phi_source)},
                         {"heldout_accuracy", classifier->heldout_accuracy},
                         {"train_size", classifier->train_size}};
  } else {
    doc["classifier"] = nullptr;
  }
  return doc;
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"mle", "implicit", "explicit", "explicit_star"};
  return names;
}

Method make_method(const std::string& name, double alpha_implicit, double alpha_explicit) {
  obj::ObjectiveConfig o;
  if (name == "mle") {
  } else if (name == "implicit") {
    o.kind = obj::Kind::implicit;
    o.alpha = alpha_implicit;
  } else if (name == "explicit" || name == "explicit_star") {
    o.kind = obj::Kind::explicit_;
    o.alpha = alpha_explicit;
    o.phi_source = name == "explicit" ? obj::PhiSource::observational : obj::PhiSource::interventional;
  } else {
    throw std::invalid_argument("unknown method '" + name + "' (expected mle, implicit, explicit, explicit_star)");
  }
  o.validate();
  return {name, o};
}

std::vector<std::uint64_t> default_seeds() { return {11, 17, 23, 29, 31, 37, 41, 43, 47, 53}; }

void BenchConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("bench: seed list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw std::invalid_argument("bench: seeds must be distinct");
  if (methods.empty()) throw std::invalid_argument("bench: method list is empty");
  if (std::set<std::string>(methods.begin(), methods.end()).size() != methods.size())
    throw std::invalid_argument("bench: methods must be distinct");
  for (const auto& m : methods) make_method(m, alpha_implicit, alpha_explicit);
  if (jobs == 0) throw std::invalid_argument("bench: jobs must be at least 1");
  auto probe = base;
  probe.objective = {};
  probe.validate();
}

json bench_config_to_json(const BenchConfig& c) {
  return {{"seeds", c.seeds},
          {"methods", c.methods},
          {"alpha_implicit", c.alpha_implicit},
          {"alpha_explicit", c.alpha_explicit},
          {"base", config_to_json(c.base)}};
}

BenchConfig bench_config_from_json(const json& doc, BenchConfig c) {
  if (!doc.is_object()) throw std::invalid_argument("bench config: top level must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "seeds") {
      if (!v.is_array()) throw std::invalid_argument("bench config: 'seeds' must be an array");
      c.seeds.clear();
      for (const auto& s : v) c.seeds.push_back(get_as<std::uint64_t>(s, key));
    } else if (key == "methods") {
      c.methods = get_as<std::vector<std::string>>(v, key);
    } else if (key == "alpha_implicit") {
      c.alpha_implicit = get_as<double>(v, key);
    } else if (key == "alpha_explicit") {
      c.alpha_explicit = get_as<double>(v, key);
    } else if (key == "jobs") {
      c.jobs = get_count(v, key);
    } else if (key == "output_dir") {
      c.output_dir = get_as<std::string>(v, key);
    } else if (key == "base") {
      c.base = config_from_json(v, c.base);
    } else {
      throw std::invalid_argument("bench config: unknown key '" + key + "'");
    }
  }
  return c;
}

const TableCell& BenchTable::at(train::TestSet s, const std::string& method) const {
  const auto it = std::find(methods.begin(), methods.end(), method);
  if (it == methods.end()) throw std::out_of_range("bench table has no method '" + method + "'");
  return cells[static_cast<std::size_t>(s)][static_cast<std::size_t>(it - methods.begin())];
}

BenchTable aggregate(const std::vector<CellResult>& cells, const std::vector<std::string>& methods,
                     std::size_t seeds) {
  BenchTable table;
  table.methods = methods;
  for (auto& row : table.cells) row.assign(methods.size(), {});
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<const CellResult*> mine;
    for (const auto& c : cells)
      if (c.method == methods[m]) mine.push_back(&c);
    std::sort(mine.begin(), mine.end(), [](auto* a, auto* b) { return a->seed < b->seed; });
    std::vector<const CellResult*> ok;
    for (auto* c : mine)
      if (c->mse) ok.push_back(c);
    for (std::size_t s = 0; s < train::kTestSets.size(); ++s) {
      TableCell& cell = table.cells[s][m];
      cell.runs = ok.size();
      cell.missing = ok.size() != seeds;
      if (ok.empty()) continue;
      double sum = 0.0;
      for (auto* c : ok) sum += (*c->mse)[s];
      cell.mean = sum / static_cast<double>(ok.size());
      double ss = 0.0;
      for (auto* c : ok) ss += ((*c->mse)[s] - cell.mean) * ((*c->mse)[s] - cell.mean);
      cell.std = ok.size() > 1 ? std::sqrt(ss / static_cast<double>(ok.size() - 1)) : 0.0;
    }
  }
  return table;
}

std::string table_csv(const BenchTable& table) {
  std::ostringstream os;
  os << "testset,method,mean_mse,std_mse,runs\n";
  for (std::size_t s = 0; s < train::kTestSets.size(); ++s) {
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
      const auto& c = table.cells[s][m];
      os << kTestKeys[s] << ',' << table.methods[m] << ',';
      if (c.missing) os << "NA,NA,";
      else os << format_double(c.mean) << ',' << format_double(c.std) << ',';
      os << c.runs << '\n';
    }
  }
  return os.str();
}

json table_json(const BenchTable& table) {
  json rows = json::object();
  for (std::size_t s = 0; s < train::kTestSets.size(); ++s) {
    json row = json::object();
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
      const auto& c = table.cells[s][m];
      row[table.methods[m]] = {{"runs", c.runs},
                               {"missing", c.missing},
                               {"mean_mse", c.missing ? json(nullptr) : json(c.mean)},
                               {"std_mse", c.missing ? json(nullptr) : json(c.std)}};
    }
    rows[kTestKeys[s]] = row;
  }
  return rows;
}

bool BenchReport::all_succeeded() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.mse.has_value(); });
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

void write_run_directory(const fs::path& dir, const std::string& method, const train::RunResult& r,
                         const std::optional<train::ClassifierResult>& classifier) {
  fs::create_directories(dir);
  std::ostringstream ckpt;
  nn::save_checkpoint(ckpt, r.model);
  write_text(dir / "checkpoint.txt", ckpt.str());
  write_text(dir / "metrics.json", metrics_document(method, r, classifier).dump(2) + "\n");
  write_text(dir / "config.json", config_to_json(r.config).dump(2) + "\n");
  std::ostringstream trace;
  trace << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, r.loss_trace[i]);
    trace << buf;
  }
  write_text(dir / "loss_trace.csv", trace.str());
}

BenchReport run_bench(const BenchConfig& config, const Progress& progress) {
  config.validate();
  std::vector<Method> methods;
  for (const auto& m : config.methods) methods.push_back(make_method(m, config.alpha_implicit, config.alpha_explicit));

  const std::size_t nm = methods.size();
  std::vector<CellResult> cells(config.seeds.size() * nm);
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(log_mutex);
    progress(msg);
  };

  auto run_seed = [&](std::size_t si) {
    const std::uint64_t seed = config.seeds[si];
    const std::string tag = "seed-" + std::to_string(seed);
    auto cfg = config.base;
    cfg.seed = seed;
    for (std::size_t m = 0; m < nm; ++m) cells[si * nm + m] = {methods[m].name, seed, std::nullopt, {}, nullptr};

    train::RunData data;
    try {
      data = train::prepare_data(cfg);
    } catch (const std::exception& e) {
      for (std::size_t m = 0; m < nm; ++m) cells[si * nm + m].error = std::string("data: ") + e.what();
      log(tag + ": data preparation failed: " + e.what());
      return;
    }
    std::map<obj::PhiSource, train::ClassifierResult> classifiers;
    std::map<obj::PhiSource, std::string> classifier_errors;

    for (std::size_t m = 0; m < nm; ++m) {
      CellResult& cell = cells[si * nm + m];
      const Method& method = methods[m];
      cfg.objective = method.objective;
      std::optional<train::ClassifierResult> cls;
      try {
        if (method.objective.kind == obj::Kind::explicit_) {
          const auto source = method.objective.phi_source;
          if (classifier_errors.contains(source)) throw std::runtime_error(classifier_errors[source]);
          if (!classifiers.contains(source)) {
            try {
              auto c = train::pretrain_classifier(cfg, source, data);
              std::ostringstream os;
              nn::save_checkpoint(os, c.classifier);
              write_text(config.output_dir / "classifiers" / (tag + "-" + std::string(obj::to_string(source)) + ".txt"),
                         os.str());
              log(tag + ": " + std::string(obj::to_string(source)) + " classifier accuracy " +
                  std::to_string(c.heldout_accuracy));
              classifiers.emplace(source, std::move(c));
            } catch (const std::exception& e) {
              classifier_errors[source] = std::string("classifier: ") + e.what();
              throw std::runtime_error(classifier_errors[source]);
            }
          }
          cls = classifiers.at(source);
        }
        const auto result = train::train_run(cfg, data, cls ? &cls->classifier : nullptr);
        write_run_directory(config.output_dir / "runs" / method.name / tag, method.name, result, cls);
        cell.mse = result.mse;
        cell.metrics = metrics_document(method.name, result, cls);
        log(tag + " " + method.name + ": counterfactual MSE " + std::to_string(result.mse_of(train::TestSet::counterfactual)));
      } catch (const std::exception& e) {
        cell.error = e.what();
        log(tag + " " + method.name + " failed: " + e.what());
      }
    }
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) run_seed(i);
  };
  const std::size_t jobs = std::min(config.jobs, config.seeds.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  // Report order follows the configured method and seed order.
  std::vector<CellResult> ordered;
  ordered.reserve(cells.size());
  for (std::size_t m = 0; m < nm; ++m)
    for (std::size_t s = 0; s < config.seeds.size(); ++s) ordered.push_back(std::move(cells[s * nm + m]));

  BenchReport report{std::move(ordered), {}};
  report.table = aggregate(report.cells, config.methods, config.seeds.size());

  json runs = json::array();
  for (const auto& c : report.cells) {
    runs.push_back({{"method", c.method},
                    {"seed", c.seed},
                    {"ok", c.mse.has_value()},
                    {"error", c.mse ? json(nullptr) : json(c.error)},
                    {"mse", c.mse ? mse_json(*c.mse) : json(nullptr)},
                    {"metrics", c.metrics}});
  }
  const json doc = {{"config", bench_config_to_json(config)},
                    {"counterfactual_mse_definition", kCounterfactualMseDefinition},
                    {"table", table_json(report.table)},
                    {"runs", runs}};
  write_text(config.output_dir / "bench_table.csv", table_csv(report.table));
  write_text(config.output_dir / "bench_report.json", doc.dump(2) + "\n");
  return report;
}

}  // namespace cmle::bench
