#pragma once

// Experiment driver: flat sectioned key=value configs with named dataset
// presets, a canonical training-identity hash, deterministic output layout
// <outdir>/<hash>/<seed>/..., and the train / eval / uncertainty / prune /
// distcheck commands.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "data.hpp"
#include "distributions.hpp"
#include "eval.hpp"
#include "network.hpp"
#include "pruning.hpp"
#include "serialize.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace advdrop {

// A required input file is absent (distinct from malformed content).
struct DataMissing : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An artifact was produced under a different configuration.
struct HashMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kError = 1;        // config/training/format errors
inline constexpr int kMissingData = 2;  // input path does not exist
inline constexpr int kQuadrature = 3;   // divergence integration failed
inline constexpr int kHashMismatch = 4; // artifact/config hash disagree
}  // namespace exit_code

// ---- configuration -------------------------------------------------------

struct DatasetSpec {
  std::string name = "two_gaussians";
  std::string kind = "synthetic";  // idx | csv | synthetic
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // csv
  std::string file;
  std::size_t target_column = 0;
  double split = 0.8;  // train fraction
  std::uint64_t split_seed = 7;
  bool normalize = true;
  // Standardize regression targets to train mean/sd (csv regression only).
  // Raw-scale targets (e.g. house prices) make MSE gradients explode at any
  // common learning rate; reported rmse is then in standardized units.
  bool normalize_target = true;
  // subset caps, 0 = all (first-n, deterministic)
  std::size_t limit_train = 0, limit_test = 0;
  // synthetic sizes
  std::size_t n_train = 256, n_test = 128;
  bool classification = true;
};

struct ExperimentConfig {
  DatasetSpec data;
  std::vector<std::size_t> dims;
  std::string dropout = "advanced";
  double keep = 0.5;      // bernoulli keep probability
  double variance = 1.0;  // gaussian noise variance
  bool mask_input = false;
  bool scalar_prior = false;
  bool eval_running_avg = false;
  double init_mu = 0.0;
  double init_sigma = 3.0;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1};
  std::string outdir = "runs";
  std::size_t T = 50;  // stochastic forward passes for uncertainty
  double q = 10.0;
  std::size_t rounds = 6;
  Granularity granularity = Granularity::kNode;
  PruneMethod method = PruneMethod::kRateGuided;
};

namespace detail {

struct Preset {
  std::string kind;
  std::string train_images, train_labels, test_images, test_labels;
  std::string file;
  std::size_t target_column = 0;
  std::vector<std::size_t> dims;
  bool classification = true;
};

inline const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> table = {
      {"mnist",
       {"idx", "mnist/train-images-idx3-ubyte", "mnist/train-labels-idx1-ubyte",
        "mnist/t10k-images-idx3-ubyte", "mnist/t10k-labels-idx1-ubyte", "", 0,
        {784, 800, 800, 10}, true}},
      {"digits",
       {"idx", "digits/train-images-idx3-ubyte",
        "digits/train-labels-idx1-ubyte", "digits/test-images-idx3-ubyte",
        "digits/test-labels-idx1-ubyte", "", 0, {784, 800, 800, 10}, true}},
      {"boston",
       {"csv", "", "", "", "", "uci/boston.csv", 13, {13, 50, 50, 1}, false}},
      {"concrete",
       {"csv", "", "", "", "", "uci/concrete.csv", 8, {8, 50, 50, 1}, false}},
      {"wine",
       {"csv", "", "", "", "", "uci/winequality-red.csv", 11, {11, 50, 50, 1},
        false}},
      {"yacht",
       {"csv", "", "", "", "", "uci/yacht.csv", 6, {6, 50, 50, 1}, false}},
      {"diabetes",
       {"csv", "", "", "", "", "uci/diabetes.csv", 10, {10, 50, 50, 1},
        false}},
      {"two_gaussians", {"synthetic", "", "", "", "", "", 0, {2, 32, 2}, true}},
      {"linear_regression",
       {"synthetic", "", "", "", "", "", 0, {2, 32, 1}, false}},
      {"xor", {"synthetic", "", "", "", "", "", 0, {2, 32, 2}, true}},
  };
  return table;
}

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "dataset.name",        "dataset.kind",         "dataset.train_images",
      "dataset.train_labels", "dataset.test_images", "dataset.test_labels",
      "dataset.file",        "dataset.target_column", "dataset.split",
      "dataset.split_seed",  "dataset.normalize",    "dataset.normalize_target",
      "dataset.limit_train",
      "dataset.limit_test",  "dataset.n_train",      "dataset.n_test",
      "model.dims",          "model.dropout",        "model.keep",
      "model.variance",      "model.mask_input",     "model.scalar_prior",
      "model.eval_running_avg", "model.init_mu",     "model.init_sigma",
      "train.epochs",        "train.batch_size",     "train.lr",
      "train.milestones",    "train.factor",         "train.momentum",
      "train.weight_decay",  "train.loss",           "train.clip_norm",
      "train.eval_batch",    "experiment.seeds",     "experiment.outdir",
      "experiment.T",        "experiment.q",         "experiment.rounds",
      "experiment.granularity", "experiment.method",
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_num(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    while (used < v.size() &&
           (v[used] == ' ' || v[used] == '\t' || v[used] == '\r'))
      ++used;
    if (used != v.size()) throw std::invalid_argument("trailing text");
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  double x = parse_num(key, v);
  if (x < 0 || x != std::floor(x))
    throw std::invalid_argument(key + ": expected a nonnegative integer");
  return static_cast<std::size_t>(x);
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<T>(parse_size(key, item)));
  }
  return out;
}

}  // namespace detail

using ConfigMap = std::map<std::string, std::string>;

// Flat key = value lines grouped under [section] headers; '#' comments.
inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataMissing("config file not found: " + path);
  ConfigMap kv;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw FormatError(path + ":" + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    kv[key] = value;
  }
  return kv;
}

// Materialize the typed config: preset defaults by dataset name, then any
// explicit keys on top. Unknown keys are rejected.
inline ExperimentConfig resolve_config(const ConfigMap& kv) {
  const auto& known = detail::known_keys();
  for (const auto& [key, value] : kv) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown config key: " + key);
  }
  auto has = [&](const std::string& k) { return kv.count(k) != 0; };
  auto str = [&](const std::string& k, const std::string& def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  };
  auto num = [&](const std::string& k, double def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : detail::parse_num(k, it->second);
  };
  auto size = [&](const std::string& k, std::size_t def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : detail::parse_size(k, it->second);
  };
  auto flag = [&](const std::string& k, bool def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : detail::parse_bool(k, it->second);
  };

  ExperimentConfig cfg;
  cfg.data.name = str("dataset.name", cfg.data.name);
  auto pit = detail::presets().find(cfg.data.name);
  if (pit == detail::presets().end())
    throw std::invalid_argument("unknown dataset: " + cfg.data.name);
  const detail::Preset& preset = pit->second;

  cfg.data.kind = str("dataset.kind", preset.kind);
  cfg.data.train_images = str("dataset.train_images", preset.train_images);
  cfg.data.train_labels = str("dataset.train_labels", preset.train_labels);
  cfg.data.test_images = str("dataset.test_images", preset.test_images);
  cfg.data.test_labels = str("dataset.test_labels", preset.test_labels);
  cfg.data.file = str("dataset.file", preset.file);
  cfg.data.target_column = size("dataset.target_column", preset.target_column);
  cfg.data.split = num("dataset.split", cfg.data.split);
  cfg.data.split_seed = size("dataset.split_seed", cfg.data.split_seed);
  cfg.data.normalize = flag("dataset.normalize", cfg.data.normalize);
  cfg.data.normalize_target =
      flag("dataset.normalize_target", cfg.data.normalize_target);
  cfg.data.limit_train = size("dataset.limit_train", 0);
  cfg.data.limit_test = size("dataset.limit_test", 0);
  cfg.data.n_train = size("dataset.n_train", cfg.data.n_train);
  cfg.data.n_test = size("dataset.n_test", cfg.data.n_test);
  cfg.data.classification = preset.classification;

  cfg.dims = has("model.dims") ? detail::parse_list<std::size_t>(
                                     "model.dims", kv.at("model.dims"))
                               : preset.dims;
  cfg.dropout = str("model.dropout", cfg.dropout);
  parse_policy(cfg.dropout);  // reject unknown names early
  cfg.keep = num("model.keep", cfg.keep);
  cfg.variance = num("model.variance", cfg.variance);
  cfg.mask_input = flag("model.mask_input",
                        cfg.data.kind == "idx" && cfg.data.classification);
  cfg.scalar_prior = flag("model.scalar_prior", cfg.scalar_prior);
  cfg.eval_running_avg = flag("model.eval_running_avg", cfg.eval_running_avg);
  cfg.init_mu = num("model.init_mu", cfg.init_mu);
  cfg.init_sigma = num("model.init_sigma", cfg.init_sigma);

  cfg.train.epochs = size("train.epochs", cfg.train.epochs);
  cfg.train.batch_size = size("train.batch_size", cfg.train.batch_size);
  cfg.train.lr = num("train.lr", cfg.train.lr);
  if (has("train.milestones"))
    cfg.train.schedule.milestones = detail::parse_list<std::size_t>(
        "train.milestones", kv.at("train.milestones"));
  cfg.train.schedule.factor = num("train.factor", cfg.train.schedule.factor);
  cfg.train.momentum = num("train.momentum", cfg.train.momentum);
  cfg.train.weight_decay = num("train.weight_decay", cfg.train.weight_decay);
  const std::string loss =
      str("train.loss", cfg.data.classification ? "cross_entropy" : "mse");
  if (loss == "cross_entropy")
    cfg.train.loss = LossKind::kCrossEntropy;
  else if (loss == "mse")
    cfg.train.loss = LossKind::kMse;
  else
    throw std::invalid_argument("train.loss: unknown loss '" + loss + "'");
  cfg.train.clip_norm = num("train.clip_norm", cfg.train.clip_norm);
  cfg.train.eval_batch = size("train.eval_batch", cfg.train.eval_batch);
  cfg.train.init_mu = cfg.init_mu;
  cfg.train.init_sigma = cfg.init_sigma;

  if (has("experiment.seeds")) {
    cfg.seeds = detail::parse_list<std::uint64_t>("experiment.seeds",
                                                  kv.at("experiment.seeds"));
    if (cfg.seeds.empty())
      throw std::invalid_argument("experiment.seeds: need at least one seed");
  }
  cfg.outdir = str("experiment.outdir", cfg.outdir);
  cfg.T = size("experiment.T", cfg.T);
  cfg.q = num("experiment.q", cfg.q);
  cfg.rounds = size("experiment.rounds", cfg.rounds);
  const std::string gran = str("experiment.granularity", "node");
  if (gran == "node")
    cfg.granularity = Granularity::kNode;
  else if (gran == "parameter")
    cfg.granularity = Granularity::kParameter;
  else
    throw std::invalid_argument("experiment.granularity: 'node' or 'parameter'");
  const std::string method = str("experiment.method", "rate_guided");
  if (method == "rate_guided")
    cfg.method = PruneMethod::kRateGuided;
  else if (method == "random")
    cfg.method = PruneMethod::kRandom;
  else
    throw std::invalid_argument("experiment.method: 'rate_guided' or 'random'");
  return cfg;
}

// ---- canonical identity ---------------------------------------------------

// Canonical text over everything that shapes the trained artifact. The
// output directory, the seed list, and the post-training knobs (T, q,
// rounds, granularity, method) are excluded so later analysis commands can
// locate a training run from the same config.
inline std::string canonical_text(const ExperimentConfig& cfg) {
  std::vector<std::string> lines;
  auto put = [&](const std::string& k, const std::string& v) {
    lines.push_back(k + "=" + v);
  };
  auto put_num = [&](const std::string& k, double v) { put(k, num_str(v)); };
  auto put_size = [&](const std::string& k, std::size_t v) {
    put(k, std::to_string(v));
  };
  auto put_bool = [&](const std::string& k, bool v) {
    put(k, v ? "true" : "false");
  };
  auto put_list = [&](const std::string& k,
                      const std::vector<std::size_t>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i)
      s += (i ? "," : "") + std::to_string(xs[i]);
    put(k, s);
  };

  put("dataset.name", cfg.data.name);
  put("dataset.kind", cfg.data.kind);
  put("dataset.train_images", cfg.data.train_images);
  put("dataset.train_labels", cfg.data.train_labels);
  put("dataset.test_images", cfg.data.test_images);
  put("dataset.test_labels", cfg.data.test_labels);
  put("dataset.file", cfg.data.file);
  put_size("dataset.target_column", cfg.data.target_column);
  put_num("dataset.split", cfg.data.split);
  put_size("dataset.split_seed", cfg.data.split_seed);
  put_bool("dataset.normalize", cfg.data.normalize);
  put_bool("dataset.normalize_target", cfg.data.normalize_target);
  put_size("dataset.limit_train", cfg.data.limit_train);
  put_size("dataset.limit_test", cfg.data.limit_test);
  put_size("dataset.n_train", cfg.data.n_train);
  put_size("dataset.n_test", cfg.data.n_test);
  put_list("model.dims", cfg.dims);
  put("model.dropout", cfg.dropout);
  put_num("model.keep", cfg.keep);
  put_num("model.variance", cfg.variance);
  put_bool("model.mask_input", cfg.mask_input);
  put_bool("model.scalar_prior", cfg.scalar_prior);
  put_bool("model.eval_running_avg", cfg.eval_running_avg);
  put_num("model.init_mu", cfg.init_mu);
  put_num("model.init_sigma", cfg.init_sigma);
  put_size("train.epochs", cfg.train.epochs);
  put_size("train.batch_size", cfg.train.batch_size);
  put_num("train.lr", cfg.train.lr);
  put_list("train.milestones", cfg.train.schedule.milestones);
  put_num("train.factor", cfg.train.schedule.factor);
  put_num("train.momentum", cfg.train.momentum);
  put_num("train.weight_decay", cfg.train.weight_decay);
  put(
      "train.loss",
      cfg.train.loss == LossKind::kCrossEntropy ? "cross_entropy" : "mse");
  put_num("train.clip_norm", cfg.train.clip_norm);
  put_size("train.eval_batch", cfg.train.eval_batch);

  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const std::string& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  return hash_hex(fnv1a(canonical_text(cfg)));
}

// ---- dataset loading -------------------------------------------------------

namespace detail {

inline std::string resolve_path(const std::string& p) {
  if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
  return data_dir() + "/" + p;
}

inline void require_exists(const std::string& p) {
  if (!std::filesystem::exists(p)) throw DataMissing("missing data: " + p);
}

inline Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset out;
  const std::size_t d = ds.dim();
  out.X = Tensor<double>::zeros({n, d});
  out.num_classes = ds.num_classes;
  out.norm = ds.norm;
  if (ds.classification()) out.labels.resize(n);
  if (ds.targets.numel() > 0)
    out.targets = Tensor<double>::zeros({n, ds.targets.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.X(i, j) = ds.X(i, j);
    if (ds.classification()) out.labels[i] = ds.labels[i];
    if (ds.targets.numel() > 0)
      for (std::size_t j = 0; j < ds.targets.cols(); ++j)
        out.targets(i, j) = ds.targets(i, j);
  }
  return out;
}

}  // namespace detail

struct LoadedData {
  Dataset train, test;
};

inline LoadedData load_data(const DatasetSpec& spec) {
  LoadedData out;
  if (spec.kind == "idx") {
    const std::string ti = detail::resolve_path(spec.train_images);
    const std::string tl = detail::resolve_path(spec.train_labels);
    const std::string vi = detail::resolve_path(spec.test_images);
    const std::string vl = detail::resolve_path(spec.test_labels);
    for (const std::string& p : {ti, tl, vi, vl}) detail::require_exists(p);
    out.train = load_idx(ti, tl);
    out.test = load_idx(vi, vl);
  } else if (spec.kind == "csv") {
    const std::string f = detail::resolve_path(spec.file);
    detail::require_exists(f);
    Dataset all = load_csv(f, spec.target_column);
    auto [tr, te] = split(all, spec.split, spec.split_seed, spec.normalize);
    out.train = std::move(tr);
    out.test = std::move(te);
    if (!out.train.classification() && spec.normalize_target &&
        out.train.targets.numel() > 0) {
      double mean = 0.0;
      for (double y : out.train.targets.data) mean += y;
      mean /= static_cast<double>(out.train.targets.numel());
      double ss = 0.0;
      for (double y : out.train.targets.data) ss += (y - mean) * (y - mean);
      const double sd =
          std::sqrt(ss / static_cast<double>(out.train.targets.numel()));
      if (sd > 0.0) {
        for (double& y : out.train.targets.data) y = (y - mean) / sd;
        for (double& y : out.test.targets.data) y = (y - mean) / sd;
      }
    }
  } else if (spec.kind == "synthetic") {
    SyntheticKind kind;
    if (spec.name == "two_gaussians")
      kind = SyntheticKind::kTwoGaussians;
    else if (spec.name == "linear_regression")
      kind = SyntheticKind::kLinearRegression;
    else if (spec.name == "xor")
      kind = SyntheticKind::kXor;
    else
      throw std::invalid_argument("unknown synthetic dataset: " + spec.name);
    out.train = synthetic(kind, spec.n_train, spec.split_seed);
    out.test = synthetic(kind, spec.n_test, spec.split_seed + 1);
  } else {
    throw std::invalid_argument("unknown dataset kind: " + spec.kind);
  }
  out.train = detail::take_first(out.train, spec.limit_train);
  out.test = detail::take_first(out.test, spec.limit_test);
  return out;
}

// ---- commands --------------------------------------------------------------

namespace detail {

inline FcSpec make_spec(const ExperimentConfig& cfg) {
  FcSpec spec;
  spec.dims = cfg.dims;
  switch (parse_policy(cfg.dropout)) {
    case DropKind::kNone: spec.policy = DropoutPolicy::none(); break;
    case DropKind::kBernoulli:
      spec.policy = DropoutPolicy::bernoulli(cfg.keep);
      break;
    case DropKind::kGaussian:
      spec.policy = DropoutPolicy::gaussian(cfg.variance);
      break;
    case DropKind::kAdvanced:
      spec.policy = DropoutPolicy::advanced();
      break;
  }
  spec.mask_input = cfg.mask_input;
  spec.classification = cfg.data.classification;
  spec.scalar_prior = cfg.scalar_prior;
  spec.eval_running_avg = cfg.eval_running_avg;
  spec.init_mu = cfg.init_mu;
  spec.init_sigma = cfg.init_sigma;
  return spec;
}

inline std::string seed_dir(const ExperimentConfig& cfg,
                            const std::string& hash, std::uint64_t seed) {
  return cfg.outdir + "/" + hash + "/" + std::to_string(seed);
}

struct MeanStd {
  double mean = 0.0, sd = 0.0;
};

// Sample standard deviation (n-1); zero for a single value.
inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return out;
}

inline std::string metric_summary(const ExperimentConfig& cfg,
                                  const std::vector<double>& metrics) {
  const MeanStd ms = mean_std(metrics);
  std::ostringstream os;
  if (cfg.data.classification)
    os << "test accuracy (%): " << std::fixed << std::setprecision(2)
       << 100.0 * ms.mean << " ± " << 100.0 * ms.sd;
  else
    os << "test rmse: " << std::fixed << std::setprecision(4) << ms.mean
       << " ± " << ms.sd;
  return os.str();
}

template <class F>
int guarded(std::ostream& err, F f) {
  try {
    return f();
  } catch (const DataMissing& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kMissingData;
  } catch (const HashMismatch& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kHashMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kError;
  }
}

}  // namespace detail

// Trains one model per seed and writes, under <outdir>/<hash>/<seed>/:
// metrics.jsonl, rates.csv, checkpoint, summary.json, timing.log. Prints the
// final test metric as mean +/- std over seeds.
inline int cmd_train(const ExperimentConfig& cfg, std::ostream& out,
                     std::ostream& err) {
  return detail::guarded(err, [&]() {
    const std::string hash = config_hash(cfg);
    LoadedData data = load_data(cfg.data);
    const FcSpec spec = detail::make_spec(cfg);
    std::vector<double> finals;
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      Rng model_rng(seed);
      Model<double> model(spec, model_rng);
      RunRecord rec = fit(model, data.train, data.test, tc);
      rec.config_hash = hash;
      const std::string dir = detail::seed_dir(cfg, hash, seed);
      std::filesystem::create_directories(dir);
      write_metrics_jsonl(dir + "/metrics.jsonl", rec, hash, seed);
      write_rates_csv(dir + "/rates.csv", rec, hash, seed);
      save_checkpoint(dir + "/checkpoint", model, hash, seed);
      nlohmann::json summary;
      summary["dataset"] = cfg.data.name;
      summary["dropout"] = cfg.dropout;
      summary["epochs"] = cfg.train.epochs;
      summary["final_train_loss"] = rec.final_train_loss;
      summary["final_train_metric"] = rec.final_train_metric;
      summary["final_test_metric"] = rec.final_test_metric;
      write_summary_json(dir + "/summary.json", summary, hash, seed);
      write_timing_log(dir + "/timing.log", rec);
      finals.push_back(rec.final_test_metric);
      out << "seed " << seed << ": final test metric "
          << num_str(rec.final_test_metric) << '\n';
    }
    out << detail::metric_summary(cfg, finals) << '\n';
    return exit_code::kOk;
  });
}

// Loads each seed's checkpoint (verifying its recorded hash against this
// config) and evaluates the stored model on the test split.
inline int cmd_eval(const ExperimentConfig& cfg, std::ostream& out,
                    std::ostream& err) {
  return detail::guarded(err, [&]() {
    const std::string hash = config_hash(cfg);
    LoadedData data = load_data(cfg.data);
    std::vector<double> metrics;
    for (std::uint64_t seed : cfg.seeds) {
      const std::string dir = detail::seed_dir(cfg, hash, seed);
      const std::string ckpt = dir + "/checkpoint";
      detail::require_exists(ckpt);
      CheckpointInfo info;
      Model<double> model = load_checkpoint<double>(ckpt, &info);
      if (info.config_hash != hash)
        throw HashMismatch("checkpoint " + ckpt + " was trained under config " +
                           info.config_hash + ", not " + hash);
      EvalResult res =
          evaluate(model, data.test, cfg.train.loss, cfg.train.eval_batch);
      nlohmann::json report;
      report["test_loss"] = res.loss;
      report["test_metric"] = res.metric;
      write_summary_json(dir + "/eval.json", report, hash, seed);
      metrics.push_back(res.metric);
      out << "seed " << seed << ": test metric " << num_str(res.metric)
          << '\n';
    }
    out << detail::metric_summary(cfg, metrics) << '\n';
    return exit_code::kOk;
  });
}

// Monte Carlo uncertainty over T stochastic passes per checkpoint; writes
// uncertainty_T<T>.json with correctness-detection AUROCs.
inline int cmd_uncertainty(const ExperimentConfig& cfg, std::ostream& out,
                           std::ostream& err) {
  return detail::guarded(err, [&]() {
    if (!cfg.data.classification)
      throw std::invalid_argument(
          "uncertainty analysis needs a classification dataset");
    const std::string hash = config_hash(cfg);
    LoadedData data = load_data(cfg.data);
    std::vector<double> auroc_p, auroc_h;
    for (std::uint64_t seed : cfg.seeds) {
      const std::string dir = detail::seed_dir(cfg, hash, seed);
      const std::string ckpt = dir + "/checkpoint";
      detail::require_exists(ckpt);
      CheckpointInfo info;
      Model<double> model = load_checkpoint<double>(ckpt, &info);
      if (info.config_hash != hash)
        throw HashMismatch("checkpoint " + ckpt + " was trained under config " +
                           info.config_hash + ", not " + hash);
      Rng rng(seed ^ 0xda3e39cb94b95bdbull);  // decoupled from training noise
      UncertaintySummary s = uncertainty_eval(model, data.test, cfg.T, rng);
      nlohmann::json report;
      report["T"] = cfg.T;
      report["accuracy"] = s.accuracy;
      report["auroc_maxP"] = s.auroc_max_prob;
      report["auroc_entropy"] = s.auroc_entropy;
      std::vector<std::vector<double>> confusion(s.confusion.rows());
      for (std::size_t i = 0; i < s.confusion.rows(); ++i)
        for (std::size_t j = 0; j < s.confusion.cols(); ++j)
          confusion[i].push_back(s.confusion(i, j));
      report["confusion"] = confusion;
      write_summary_json(dir + "/uncertainty_T" + std::to_string(cfg.T) +
                             ".json",
                         report, hash, seed);
      auroc_p.push_back(s.auroc_max_prob);
      auroc_h.push_back(s.auroc_entropy);
      out << "seed " << seed << ": auroc_maxP " << num_str(s.auroc_max_prob)
          << ", auroc_entropy " << num_str(s.auroc_entropy) << ", accuracy "
          << num_str(s.accuracy) << '\n';
    }
    const auto mp = detail::mean_std(auroc_p);
    const auto mh = detail::mean_std(auroc_h);
    out << "auroc_maxP mean " << num_str(mp.mean) << " ± "
        << num_str(mp.sd) << "; auroc_entropy mean " << num_str(mh.mean)
        << " ± " << num_str(mh.sd) << '\n';
    return exit_code::kOk;
  });
}

// Full lottery-style cycle per seed: train, prune by the configured
// granularity/method, reset survivors, retrain. Writes one CSV per seed with
// a row per preservation level (round 0 = unpruned).
inline int cmd_prune(const ExperimentConfig& cfg, std::ostream& out,
                     std::ostream& err) {
  return detail::guarded(err, [&]() {
    const std::string hash = config_hash(cfg);
    LoadedData data = load_data(cfg.data);
    const FcSpec spec = detail::make_spec(cfg);
    const char* gname =
        cfg.granularity == Granularity::kNode ? "node" : "parameter";
    const char* mname =
        cfg.method == PruneMethod::kRateGuided ? "rate_guided" : "random";
    const std::string q_tag =
        cfg.q == std::floor(cfg.q)
            ? std::to_string(static_cast<long long>(cfg.q))
            : num_str(cfg.q);
    std::ostringstream tag;
    tag << "prune_" << gname << "_q" << q_tag << "_r" << cfg.rounds << "_"
        << mname << ".csv";
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      auto points = lottery_cycle<double>(spec, data.train, data.test, tc,
                                          cfg.rounds, cfg.q, cfg.granularity,
                                          cfg.method);
      const std::string dir = detail::seed_dir(cfg, hash, seed);
      std::filesystem::create_directories(dir);
      write_prune_csv(dir + "/" + tag.str(), points, cfg.granularity,
                      cfg.method, hash, seed);
      out << "seed " << seed << ":";
      for (const LotteryPoint& p : points)
        out << " (" << num_str(p.kept_fraction) << ", " << num_str(p.accuracy)
            << ")";
      out << '\n';
    }
    return exit_code::kOk;
  });
}

// Distribution diagnostics: density curves of the sigmoid-of-Gaussian mask
// law for five (mu, sigma) settings, and a table comparing softplus-Gaussian
// vs log-normal approximations of inverse-gamma targets by forward KL.
// Exit 0 iff softplus-Gaussian wins every case with defined moments.
inline int cmd_distcheck(const ExperimentConfig& cfg, std::ostream& out,
                         std::ostream& err) {
  return detail::guarded(err, [&]() {
    const std::string hash = config_hash(cfg);
    const std::string dir = cfg.outdir + "/distcheck";
    std::filesystem::create_directories(dir);

    const std::vector<std::pair<double, double>> curve_settings = {
        {0.0, 3.0}, {0.0, 1.6}, {0.0, 150.0}, {0.0, 1.0}, {-1.0, 1.0}};
    for (const auto& [mu, sigma] : curve_settings) {
      std::ostringstream name;
      name << dir << "/pdf_mu" << num_str(mu) << "_sigma" << num_str(sigma)
           << ".csv";
      std::ofstream f(name.str(), std::ios::trunc);
      if (!f) throw FormatError("cannot write " + name.str());
      f << "# config_hash=" << hash << '\n';
      f << "m,density\n";
      LogitNormal dist(mu, sigma);
      const std::size_t n = 512;
      for (std::size_t i = 1; i < n; ++i) {
        const double m = static_cast<double>(i) / static_cast<double>(n);
        f << num_str(m) << ',' << num_str(dist.pdf(m)) << '\n';
      }
    }

    const std::vector<std::pair<double, double>> ig_settings = {
        {5.0, 0.1}, {8.0, 0.1}, {2.0, 0.5}, {0.5, 3.0}};
    bool all_defined_won = true;
    std::ofstream table(dir + "/kl_table.csv", std::ios::trunc);
    if (!table) throw FormatError("cannot write kl_table.csv");
    table << "# config_hash=" << hash << '\n';
    table << "shape,scale,kl_softplus_gaussian,kl_lognormal,fit,note\n";
    for (const auto& [k, theta] : ig_settings) {
      ApproxComparison cmp;
      try {
        cmp = compare_approximations(InverseGamma(k, theta));
      } catch (const std::exception& e) {
        err << "error: divergence quadrature failed for shape "
            << num_str(k) << ", scale " << num_str(theta) << ": " << e.what()
            << '\n';
        return exit_code::kQuadrature;
      }
      const char* fit = cmp.used_moments ? "moments" : "mode_peak";
      const char* note =
          cmp.used_moments ? "" : "moments undefined, mode-matched";
      table << num_str(k) << ',' << num_str(theta) << ','
            << num_str(cmp.kl_spg) << ',' << num_str(cmp.kl_ln) << ',' << fit
            << ',' << note << '\n';
      out << "inverse-gamma(" << num_str(k) << ", " << num_str(theta)
          << "): KL softplus-gaussian " << num_str(cmp.kl_spg)
          << " vs log-normal " << num_str(cmp.kl_ln) << " [" << fit << "]\n";
      if (cmp.used_moments && !(cmp.kl_spg < cmp.kl_ln))
        all_defined_won = false;
    }
    if (!table) throw FormatError("cannot write kl_table.csv");
    if (!all_defined_won) {
      err << "error: softplus-Gaussian did not win every moment-defined case\n";
      return exit_code::kError;
    }
    return exit_code::kOk;
  });
}

}  // namespace advdrop
