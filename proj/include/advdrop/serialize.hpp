#pragma once

// Artifact serialization: a versioned binary checkpoint container holding
// the network spec, every parameter tensor (with pruning masks), and the
// per-site noise telemetry; JSON-lines / CSV writers for training records;
// and the canonical configuration hash embedded in every artifact.
//
// Checkpoint layout (all integers little-endian):
//   bytes 0..7   magic "ADVDCKP1"
//   bytes 8..11  u32 header length H
//   bytes 12..12+H-1  UTF-8 JSON header: {version, config_hash, seed, spec,
//                     params: [{name, shape, prior, mask}...], telemetry}
//   remainder    raw f64 payload: for each param in header order, the value
//                tensor, then (if mask) the mask tensor, row-major.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "network.hpp"
#include "pruning.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace advdrop {

// ---- dropout policy names ------------------------------------------------

inline std::string policy_name(DropKind k) {
  switch (k) {
    case DropKind::kNone: return "none";
    case DropKind::kBernoulli: return "bernoulli";
    case DropKind::kGaussian: return "gaussian";
    case DropKind::kAdvanced: return "advanced";
  }
  throw std::logic_error("unknown dropout policy");
}

inline DropKind parse_policy(const std::string& name) {
  if (name == "none") return DropKind::kNone;
  if (name == "bernoulli") return DropKind::kBernoulli;
  if (name == "gaussian") return DropKind::kGaussian;
  if (name == "advanced") return DropKind::kAdvanced;
  throw std::invalid_argument("unknown dropout policy: " + name);
}

// ---- checkpoint container ------------------------------------------------

namespace detail {

inline constexpr char kCkptMagic[8] = {'A', 'D', 'V', 'D', 'C', 'K', 'P', '1'};

inline nlohmann::json spec_to_json(const FcSpec& spec) {
  return {{"dims", spec.dims},
          {"dropout", policy_name(spec.policy.kind)},
          {"keep", spec.policy.p},
          {"variance", spec.policy.v},
          {"mask_input", spec.mask_input},
          {"classification", spec.classification},
          {"scalar_prior", spec.scalar_prior},
          {"eval_running_avg", spec.eval_running_avg},
          {"init_mu", spec.init_mu},
          {"init_sigma", spec.init_sigma}};
}

inline FcSpec spec_from_json(const nlohmann::json& j) {
  FcSpec spec;
  spec.dims = j.at("dims").get<std::vector<std::size_t>>();
  spec.policy.kind = parse_policy(j.at("dropout").get<std::string>());
  spec.policy.p = j.at("keep").get<double>();
  spec.policy.v = j.at("variance").get<double>();
  spec.mask_input = j.at("mask_input").get<bool>();
  spec.classification = j.at("classification").get<bool>();
  spec.scalar_prior = j.at("scalar_prior").get<bool>();
  spec.eval_running_avg = j.at("eval_running_avg").get<bool>();
  spec.init_mu = j.at("init_mu").get<double>();
  spec.init_sigma = j.at("init_sigma").get<double>();
  return spec;
}

inline void put_f64s(std::string& out, const std::vector<double>& xs) {
  const std::size_t at = out.size();
  out.resize(at + xs.size() * sizeof(double));
  std::memcpy(out.data() + at, xs.data(), xs.size() * sizeof(double));
}

}  // namespace detail

struct CheckpointInfo {
  std::string config_hash;
  std::uint64_t seed = 0;
  FcSpec spec;
};

template <class R>
void save_checkpoint(const std::string& path, const Model<R>& model,
                     const std::string& config_hash, std::uint64_t seed) {
  nlohmann::json header;
  header["version"] = 1;
  header["config_hash"] = config_hash;
  header["seed"] = seed;
  header["spec"] = detail::spec_to_json(model.spec);

  auto params = const_cast<Model<R>&>(model).params();
  nlohmann::json plist = nlohmann::json::array();
  std::string payload;
  for (const Param<R>* p : params) {
    plist.push_back({{"name", p->name},
                     {"shape", p->value.shape},
                     {"prior", p->is_prior},
                     {"mask", p->pruned()}});
    std::vector<double> vals(p->value.data.begin(), p->value.data.end());
    detail::put_f64s(payload, vals);
    if (p->pruned()) {
      std::vector<double> mask(p->mask.data.begin(), p->mask.data.end());
      detail::put_f64s(payload, mask);
    }
  }
  header["params"] = plist;

  nlohmann::json sites = nlohmann::json::array();
  for (const auto& site : model.sites)
    sites.push_back({{"last_mu", site.last_mu},
                     {"last_sigma", site.last_sigma},
                     {"ema_mu", site.ema_mu},
                     {"ema_sigma", site.ema_sigma},
                     {"ema_ready", site.ema_ready}});
  header["telemetry"] = sites;

  const std::string head = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  const std::uint32_t hlen = static_cast<std::uint32_t>(head.size());
  char lenbuf[4];
  std::memcpy(lenbuf, &hlen, 4);
  out.write(lenbuf, 4);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("cannot write checkpoint: " + path);
}

template <class R>
Model<R> load_checkpoint(const std::string& path,
                         CheckpointInfo* info = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) ||
      std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw FormatError("not a checkpoint file: " + path);
  char lenbuf[4];
  if (!in.read(lenbuf, 4)) throw FormatError("checkpoint truncated: " + path);
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, lenbuf, 4);
  std::string head(hlen, '\0');
  if (!in.read(head.data(), hlen))
    throw FormatError("checkpoint truncated: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  if (header.at("version").get<int>() != 1)
    throw FormatError("unsupported checkpoint version");

  FcSpec spec = detail::spec_from_json(header.at("spec"));
  if (info) {
    info->config_hash = header.at("config_hash").get<std::string>();
    info->seed = header.at("seed").get<std::uint64_t>();
    info->spec = spec;
  }

  Rng scratch(0);  // every value below is overwritten from the payload
  Model<R> model(spec, scratch);
  auto params = model.params();
  const auto& plist = header.at("params");
  if (plist.size() != params.size())
    throw FormatError("checkpoint parameter registry mismatch");

  auto read_f64s = [&](std::size_t n) {
    std::vector<double> xs(n);
    if (!in.read(reinterpret_cast<char*>(xs.data()),
                 static_cast<std::streamsize>(n * sizeof(double))))
      throw FormatError("checkpoint truncated: " + path);
    return xs;
  };

  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& pj = plist[i];
    Param<R>* p = params[i];
    if (pj.at("name").get<std::string>() != p->name)
      throw FormatError("checkpoint parameter registry mismatch at " +
                        p->name);
    const auto shape = pj.at("shape").get<std::vector<std::size_t>>();
    if (shape != p->value.shape)
      throw FormatError("checkpoint shape mismatch at " + p->name);
    std::vector<double> vals = read_f64s(p->value.numel());
    for (std::size_t j = 0; j < vals.size(); ++j)
      p->value.data[j] = static_cast<R>(vals[j]);
    if (pj.at("mask").get<bool>()) {
      p->ensure_mask();
      std::vector<double> mask = read_f64s(p->value.numel());
      for (std::size_t j = 0; j < mask.size(); ++j)
        p->mask.data[j] = static_cast<R>(mask[j]);
    }
    p->vel.fill(R{0});
    p->zero_grad();
  }

  const auto& sites = header.at("telemetry");
  if (sites.size() != model.sites.size())
    throw FormatError("checkpoint telemetry mismatch");
  for (std::size_t s = 0; s < model.sites.size(); ++s) {
    auto& site = model.sites[s];
    const auto& sj = sites[s];
    site.last_mu = sj.at("last_mu").get<std::vector<double>>();
    site.last_sigma = sj.at("last_sigma").get<std::vector<double>>();
    site.ema_mu = sj.at("ema_mu").get<std::vector<double>>();
    site.ema_sigma = sj.at("ema_sigma").get<std::vector<double>>();
    site.ema_ready = sj.at("ema_ready").get<bool>();
  }
  return model;
}

// ---- run-record artifacts --------------------------------------------------

// Shortest representation that round-trips exactly; keeps artifacts
// byte-stable across runs.
inline std::string num_str(double v) { return nlohmann::json(v).dump(); }

inline void write_metrics_jsonl(const std::string& path,
                                const RunRecord& record,
                                const std::string& config_hash,
                                std::uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  for (const EpochRow& row : record.rows) {
    nlohmann::json j;
    j["epoch"] = row.epoch;
    j["hash"] = config_hash;
    j["seed"] = seed;
    j["train_loss"] = row.train_loss;
    j["train_metric"] = row.train_metric;
    j["test_metric"] = row.test_metric;
    std::vector<double> rates;
    for (const SiteStat& s : row.sites) rates.push_back(s.rate);
    j["rates"] = rates;
    out << j.dump() << '\n';
  }
  if (!out) throw FormatError("cannot write " + path);
}

inline void write_rates_csv(const std::string& path, const RunRecord& record,
                            const std::string& config_hash,
                            std::uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out << "epoch,site,rate,mu_mean,sigma_mean,config_hash,seed\n";
  for (const EpochRow& row : record.rows)
    for (const SiteStat& s : row.sites)
      out << row.epoch << ',' << s.site << ',' << num_str(s.rate) << ','
          << num_str(s.mu_mean) << ',' << num_str(s.sigma_mean) << ','
          << config_hash << ',' << seed << '\n';
  if (!out) throw FormatError("cannot write " + path);
}

inline void write_prune_csv(const std::string& path,
                            const std::vector<LotteryPoint>& points,
                            Granularity g, PruneMethod method,
                            const std::string& config_hash,
                            std::uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out << "round,kept_fraction,granularity,method,accuracy,config_hash,seed\n";
  const char* gname = g == Granularity::kNode ? "node" : "parameter";
  const char* mname =
      method == PruneMethod::kRateGuided ? "rate_guided" : "random";
  for (const LotteryPoint& p : points)
    out << p.round << ',' << num_str(p.kept_fraction) << ',' << gname << ','
        << mname << ',' << num_str(p.accuracy) << ',' << config_hash << ','
        << seed << '\n';
  if (!out) throw FormatError("cannot write " + path);
}

// `extra` carries the subcommand's fields; hash and seed are stamped in.
inline void write_summary_json(const std::string& path, nlohmann::json extra,
                               const std::string& config_hash,
                               std::uint64_t seed) {
  extra["hash"] = config_hash;
  extra["seed"] = seed;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out << extra.dump(2) << '\n';
  if (!out) throw FormatError("cannot write " + path);
}

// Wall-clock sidecar: the one artifact allowed to differ between reruns.
inline void write_timing_log(const std::string& path,
                             const RunRecord& record) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  for (const EpochRow& row : record.rows)
    out << "epoch " << row.epoch << ": " << num_str(row.seconds) << " s\n";
}

}  // namespace advdrop
