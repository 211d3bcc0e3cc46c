#include "cmle/scm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cmle/rng.hpp"

namespace cmle::scm {

namespace {

constexpr std::uint64_t kToyMechanismSeed = 0x70E5C0DEULL;
constexpr const char* kGeneratorTag = "cmle-scm/1 mt19937_64 box-muller per-record-stream";

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::observational: return "observational";
    case Variant::counterfactual: return "counterfactual";
    case Variant::interventional: return "interventional";
    case Variant::ood1: return "ood1";
    case Variant::ood2: return "ood2";
    case Variant::ood3: return "ood3";
    case Variant::discrete_toy: return "discrete-toy";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  std::string s(name);
  std::replace(s.begin(), s.end(), '_', '-');
  for (Variant v : {Variant::observational, Variant::counterfactual, Variant::interventional, Variant::ood1,
                    Variant::ood2, Variant::ood3, Variant::discrete_toy}) {
    if (s == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown dataset variant '" + std::string(name) + "'");
}

std::size_t Dataset::size() const {
  switch (variant) {
    case Variant::counterfactual: return counterfactuals.size();
    case Variant::discrete_toy: return toy.size();
    default: return examples.size();
  }
}

bool Dataset::same_records(const Dataset& other) const {
  return examples == other.examples && counterfactuals == other.counterfactuals && toy == other.toy;
}

double eval_g(int k, double x, std::optional<int> t) {
  const bool needs_t = k >= 11 && k <= 13;
  if (k < 1 || k > 13) throw std::out_of_range("eval_g: index " + std::to_string(k) + " not in 1..13");
  if (needs_t && !t) throw std::invalid_argument("eval_g: g" + std::to_string(k) + " requires a treatment");
  if (!needs_t && t) throw std::invalid_argument("eval_g: g" + std::to_string(k) + " takes no treatment");
  switch (k) {
    case 1: return x - 0.5;
    case 2: return (x - 0.5) * (x - 0.5) + 2.0;
    case 3: return x * x - 1.0 / 3.0;
    case 4: return -2.0 * std::sin(2.0 * x);
    case 5: return std::exp(-x) - std::exp(-1.0) - 1.0;
    case 6: return std::exp(-x);
    case 7: return x * x;
    case 8: return x;
    case 9: return x > 0.0 ? 1.0 : 0.0;
    case 10: return std::cos(x);
    case 11: return std::log(*t + x * x);  // t >= 1, so the argument is >= 1
    case 12: return std::exp(*t + x);
    default: return std::sin(*t + x);
  }
}

double treatment_score(std::span<const double> x, Mechanism mechanism) {
  if (x.size() < 5 || (mechanism == Mechanism::ood2 && x.size() < 10)) {
    throw std::invalid_argument("treatment_score: x has only " + std::to_string(x.size()) + " entries");
  }
  switch (mechanism) {
    case Mechanism::observational:
      return eval_g(1, x[0]) + eval_g(2, x[1]) + eval_g(3, x[2]) + eval_g(4, x[3]) + eval_g(5, x[4]);
    case Mechanism::ood2:
      return eval_g(1, x[5]) + eval_g(2, x[6]) + eval_g(3, x[7]) + eval_g(4, x[8]) + eval_g(5, x[9]);
    case Mechanism::ood3:
      return eval_g(6, x[0]) + eval_g(7, x[1]) + eval_g(8, x[2]) + eval_g(9, x[3]) + eval_g(10, x[4]);
  }
  return 0.0;
}

int threshold_treatment(double s) {
  if (s <= 4.0) return 1;
  if (s <= 5.0) return 2;
  return 3;
}

int assign_treatment(std::span<const double> x, Mechanism mechanism) {
  return threshold_treatment(treatment_score(x, mechanism));
}

Outcome outcome_mean(std::span<const double> x, int t) {
  if (t < 1 || t > kTreatments) throw std::invalid_argument("outcome_mean: treatment " + std::to_string(t));
  if (x.size() < 9) throw std::invalid_argument("outcome_mean: x too short");
  const double mu1 = eval_g(6, x[0]) + eval_g(7, x[1]) + eval_g(8, x[2]) + eval_g(11, x[5], t) + eval_g(12, x[6], t);
  // g11 is applied to x8 with the treatment argument.
  const double mu2 = eval_g(9, x[3]) + eval_g(10, x[4]) + eval_g(11, x[7], t) + eval_g(13, x[8], t);
  return {mu1, mu2};
}

std::array<double, kTreatments> treatment_marginal(std::size_t draws, std::uint64_t seed) {
  if (draws == 0) throw std::invalid_argument("treatment_marginal: draws must be positive");
  Rng rng(seed);
  std::array<std::size_t, kTreatments> counts{};
  std::array<double, 5> x{};
  for (std::size_t i = 0; i < draws; ++i) {
    for (double& v : x) v = rng.normal();
    ++counts[static_cast<std::size_t>(assign_treatment(x, Mechanism::observational) - 1)];
  }
  std::array<double, kTreatments> p{};
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<double>(counts[k]) / static_cast<double>(draws);
  return p;
}

namespace {

std::vector<double> draw_features(Rng& rng, std::size_t d) {
  std::vector<double> x(d);
  for (double& v : x) v = rng.normal();
  return x;
}

Outcome draw_outcome(Rng& rng, std::span<const double> x, int t) {
  Outcome mu = outcome_mean(x, t);
  mu[0] += rng.normal();
  mu[1] += rng.normal();
  return mu;
}

}  // namespace

Dataset sample_dataset(const ScmConfig& config) {
  if (config.n < 1) throw std::invalid_argument("sample_dataset: n must be at least 1");
  if (config.variant == Variant::discrete_toy) return sample_discrete_toy(config);

  Dataset out;
  out.variant = config.variant;
  out.seed = config.seed;
  out.generator = kGeneratorTag;

  // Record i draws from its own stream: x first, then the treatment (if
  // random), then outcome noise. Matched seeds therefore give identical x
  // across variants, and the factual arm of a counterfactual record reuses
  // the noise an observational record would draw.
  for (std::size_t i = 0; i < config.n; ++i) {
    Rng rng(mix_seed(config.seed, i));
    std::vector<double> x = draw_features(rng, kFeatures);
    switch (config.variant) {
      case Variant::counterfactual: {
        CounterfactualExample r;
        r.factual_t = assign_treatment(x, Mechanism::observational);
        r.outcomes[static_cast<std::size_t>(r.factual_t - 1)] = draw_outcome(rng, x, r.factual_t);
        for (int t = 1; t <= kTreatments; ++t) {
          if (t != r.factual_t) r.outcomes[static_cast<std::size_t>(t - 1)] = draw_outcome(rng, x, t);
        }
        r.x = std::move(x);
        out.counterfactuals.push_back(std::move(r));
        break;
      }
      default: {
        Example e;
        switch (config.variant) {
          case Variant::interventional:
          case Variant::ood1: e.t = 1 + static_cast<int>(rng.below(kTreatments)); break;
          case Variant::ood2: e.t = assign_treatment(x, Mechanism::ood2); break;
          case Variant::ood3: e.t = assign_treatment(x, Mechanism::ood3); break;
          default: e.t = assign_treatment(x, Mechanism::observational); break;
        }
        e.y = draw_outcome(rng, x, e.t);
        e.x = std::move(x);
        out.examples.push_back(std::move(e));
        break;
      }
    }
  }
  return out;
}

namespace {

struct ToyMechanism {
  // weights[t - 1][class][feature], biases[t - 1][class]
  std::array<std::array<std::array<double, kToyFeatures>, kToyClasses>, kToyTreatments> weights{};
  std::array<std::array<double, kToyClasses>, kToyTreatments> biases{};
};

const ToyMechanism& toy_mechanism() {
  static const ToyMechanism m = [] {
    ToyMechanism out;
    Rng rng(kToyMechanismSeed);
    for (auto& w : out.weights)
      for (auto& row : w)
        for (double& v : row) v = 0.5 * rng.normal();
    for (auto& b : out.biases)
      for (double& v : b) v = 0.5 * rng.normal();
    return out;
  }();
  return m;
}

}  // namespace

int toy_treatment(std::span<const double> x) {
  if (x.size() < 3) throw std::invalid_argument("toy_treatment: x too short");
  return x[0] + x[1] + x[2] > 0.0 ? 1 : 2;
}

std::array<double, kToyClasses> toy_probabilities(std::span<const double> x, int t) {
  if (t < 1 || t > kToyTreatments) throw std::invalid_argument("toy_probabilities: treatment " + std::to_string(t));
  if (x.size() != kToyFeatures) throw std::invalid_argument("toy_probabilities: x must have 10 entries");
  const ToyMechanism& m = toy_mechanism();
  const auto ti = static_cast<std::size_t>(t - 1);
  std::array<double, kToyClasses> logits{};
  for (std::size_t c = 0; c < kToyClasses; ++c) {
    double z = m.biases[ti][c];
    for (std::size_t j = 0; j < kToyFeatures; ++j) z += m.weights[ti][c][j] * x[j];
    logits[c] = z;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double& z : logits) s += (z = std::exp(z - mx));
  for (double& z : logits) z /= s;
  return logits;
}

int sample_toy_class(std::span<const double> x, int t, Rng& rng) {
  const auto p = toy_probabilities(x, t);
  const double u = rng.uniform();
  double acc = 0.0;
  for (int c = 0; c < kToyClasses; ++c) {
    acc += p[static_cast<std::size_t>(c)];
    if (u < acc) return c;
  }
  return kToyClasses - 1;
}

Dataset sample_discrete_toy(const ScmConfig& config) {
  if (config.variant != Variant::discrete_toy) {
    throw std::invalid_argument("sample_discrete_toy: variant must be discrete-toy");
  }
  if (config.n < 1) throw std::invalid_argument("sample_discrete_toy: n must be at least 1");
  Dataset out;
  out.variant = Variant::discrete_toy;
  out.seed = config.seed;
  out.generator = kGeneratorTag;
  for (std::size_t i = 0; i < config.n; ++i) {
    Rng rng(mix_seed(config.seed, i));
    ToyExample e;
    e.x = draw_features(rng, kToyFeatures);
    e.t = toy_treatment(e.x);
    e.y = sample_toy_class(e.x, e.t, rng);
    out.toy.push_back(std::move(e));
  }
  return out;
}

namespace {

void put_real(std::string& out, double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

void put_features(std::string& out, std::span<const double> x) {
  for (double v : x) {
    put_real(out, v);
    out.push_back(',');
  }
}

std::string feature_header(std::size_t d) {
  std::string h;
  for (std::size_t i = 0; i < d; ++i) h += "x" + std::to_string(i) + ",";
  return h;
}

std::string plain_header() { return feature_header(kFeatures) + "t,y0,y1"; }
std::string counterfactual_header() {
  return feature_header(kFeatures) + "factual_t,y1_0,y1_1,y2_0,y2_1,y3_0,y3_1";
}
std::string toy_header() { return feature_header(kToyFeatures) + "t,y"; }

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      f.push_back(line.substr(start));
      break;
    }
    f.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return f;
}

double parse_real(std::string_view s, std::size_t line_no, std::size_t col) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(col + 1) +
                     ": cannot parse '" + std::string(s) + "' as a real");
  }
  return v;
}

int parse_int(std::string_view s, std::size_t line_no, std::size_t col) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(col + 1) +
                     ": cannot parse '" + std::string(s) + "' as an integer");
  }
  return v;
}

int parse_treatment(std::string_view s, std::size_t line_no, std::size_t col, int max_t) {
  const int t = parse_int(s, line_no, col);
  if (t < 1 || t > max_t) {
    throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(col + 1) + ": treatment " +
                     std::to_string(t) + " out of range");
  }
  return t;
}

}  // namespace

std::string dataset_csv(const Dataset& d) {
  std::string out;
  switch (d.variant) {
    case Variant::counterfactual:
      out += counterfactual_header() + "\n";
      for (const auto& r : d.counterfactuals) {
        put_features(out, r.x);
        out += std::to_string(r.factual_t);
        for (const auto& o : r.outcomes) {
          out.push_back(',');
          put_real(out, o[0]);
          out.push_back(',');
          put_real(out, o[1]);
        }
        out.push_back('\n');
      }
      break;
    case Variant::discrete_toy:
      out += toy_header() + "\n";
      for (const auto& r : d.toy) {
        put_features(out, r.x);
        out += std::to_string(r.t) + "," + std::to_string(r.y) + "\n";
      }
      break;
    default:
      out += plain_header() + "\n";
      for (const auto& r : d.examples) {
        put_features(out, r.x);
        out += std::to_string(r.t);
        out.push_back(',');
        put_real(out, r.y[0]);
        out.push_back(',');
        put_real(out, r.y[1]);
        out.push_back('\n');
      }
      break;
  }
  return out;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_dataset: cannot open " + path.string());
  const std::string text = dataset_csv(dataset);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("write_dataset: write failed for " + path.string());
}

Dataset parse_dataset_csv(std::string_view text, std::optional<Variant> variant_hint) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw ParseError("line 1: empty dataset file (missing header)");

  Dataset d;
  const std::string_view header = lines[0];
  std::size_t width = 0;
  if (header == plain_header()) {
    d.variant = variant_hint.value_or(Variant::observational);
    if (d.variant == Variant::counterfactual || d.variant == Variant::discrete_toy) {
      throw ParseError("line 1: header describes plain records but variant hint is " +
                       std::string(to_string(d.variant)));
    }
    width = kFeatures + 3;
  } else if (header == counterfactual_header()) {
    d.variant = Variant::counterfactual;
    width = kFeatures + 7;
  } else if (header == toy_header()) {
    d.variant = Variant::discrete_toy;
    width = kToyFeatures + 2;
  } else {
    throw ParseError("line 1: unrecognized header with " + std::to_string(split_fields(header).size()) +
                     " columns");
  }

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t line_no = li + 1;
    const auto f = split_fields(lines[li]);
    if (f.size() != width) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                       " columns, found " + std::to_string(f.size()));
    }
    const std::size_t nx = d.variant == Variant::discrete_toy ? kToyFeatures : kFeatures;
    std::vector<double> x(nx);
    for (std::size_t c = 0; c < nx; ++c) x[c] = parse_real(f[c], line_no, c);
    if (d.variant == Variant::counterfactual) {
      CounterfactualExample r;
      r.x = std::move(x);
      r.factual_t = parse_treatment(f[nx], line_no, nx, kTreatments);
      for (std::size_t t = 0; t < kTreatments; ++t) {
        r.outcomes[t][0] = parse_real(f[nx + 1 + 2 * t], line_no, nx + 1 + 2 * t);
        r.outcomes[t][1] = parse_real(f[nx + 2 + 2 * t], line_no, nx + 2 + 2 * t);
      }
      d.counterfactuals.push_back(std::move(r));
    } else if (d.variant == Variant::discrete_toy) {
      ToyExample r;
      r.x = std::move(x);
      r.t = parse_treatment(f[nx], line_no, nx, kToyTreatments);
      r.y = parse_int(f[nx + 1], line_no, nx + 1);
      if (r.y < 0 || r.y >= kToyClasses) {
        throw ParseError("line " + std::to_string(line_no) + ": class " + std::to_string(r.y) + " out of range");
      }
      d.toy.push_back(std::move(r));
    } else {
      Example e;
      e.x = std::move(x);
      e.t = parse_treatment(f[nx], line_no, nx, kTreatments);
      e.y = {parse_real(f[nx + 1], line_no, nx + 1), parse_real(f[nx + 2], line_no, nx + 2)};
      d.examples.push_back(std::move(e));
    }
  }
  return d;
}

Dataset read_dataset(const std::filesystem::path& path, std::optional<Variant> variant_hint) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_dataset: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_dataset_csv(ss.str(), variant_hint);
}

}  // namespace cmle::scm
