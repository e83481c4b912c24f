// Command-line experiment driver. Subcommands: train, eval, uncertainty,
// prune, distcheck. Values come from --config (flat sectioned key=value
// file); individual flags override file values.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "advdrop/advdrop.hpp"

namespace {

struct Flags {
  std::string config, dataset, dropout, seeds, granularity, outdir;
  std::string mask_input;
  double lr = 0.0, init_mu = 0.0, init_sigma = 0.0, q = 0.0;
  std::size_t epochs = 0, rounds = 0, T = 0;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "configuration file");
  sub->add_option("--dataset", f.dataset,
                  "dataset preset (mnist, digits, boston, concrete, wine, "
                  "yacht, diabetes, two_gaussians, linear_regression, xor)");
  sub->add_option("--dropout", f.dropout,
                  "dropout policy: advanced, bernoulli, gaussian, none");
  sub->add_option("--epochs", f.epochs, "training epochs");
  sub->add_option("--lr", f.lr, "learning rate");
  sub->add_option("--seeds", f.seeds, "comma-separated seed list");
  sub->add_option("--init-mu", f.init_mu, "initial mask-seed mean");
  sub->add_option("--init-sigma", f.init_sigma, "initial mask-seed spread");
  sub->add_option("--mask-input", f.mask_input,
                  "also mask input features (true/false)");
  sub->add_option("--granularity", f.granularity,
                  "pruning granularity: node or parameter");
  sub->add_option("--q", f.q, "percent pruned per round");
  sub->add_option("--rounds", f.rounds, "pruning rounds");
  sub->add_option("--T", f.T, "stochastic forward passes");
  sub->add_option("--outdir", f.outdir, "output directory");
}

advdrop::ExperimentConfig build_config(const CLI::App* sub, const Flags& f) {
  advdrop::ConfigMap kv;
  if (!f.config.empty()) kv = advdrop::parse_config_file(f.config);
  auto given = [&](const std::string& flag) {
    return sub->count(flag) > 0;
  };
  if (given("--dataset")) kv["dataset.name"] = f.dataset;
  if (given("--dropout")) kv["model.dropout"] = f.dropout;
  if (given("--epochs")) kv["train.epochs"] = std::to_string(f.epochs);
  if (given("--lr")) kv["train.lr"] = advdrop::num_str(f.lr);
  if (given("--seeds")) kv["experiment.seeds"] = f.seeds;
  if (given("--init-mu")) kv["model.init_mu"] = advdrop::num_str(f.init_mu);
  if (given("--init-sigma"))
    kv["model.init_sigma"] = advdrop::num_str(f.init_sigma);
  if (given("--mask-input")) kv["model.mask_input"] = f.mask_input;
  if (given("--granularity")) kv["experiment.granularity"] = f.granularity;
  if (given("--q")) kv["experiment.q"] = advdrop::num_str(f.q);
  if (given("--rounds")) kv["experiment.rounds"] = std::to_string(f.rounds);
  if (given("--T")) kv["experiment.T"] = std::to_string(f.T);
  if (given("--outdir")) kv["experiment.outdir"] = f.outdir;
  return advdrop::resolve_config(kv);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learned-noise dropout experiments"};
  app.require_subcommand(1);

  Flags f;
  CLI::App* train = app.add_subcommand("train", "train one model per seed");
  CLI::App* eval = app.add_subcommand("eval", "evaluate saved checkpoints");
  CLI::App* uncertainty = app.add_subcommand(
      "uncertainty", "Monte Carlo uncertainty from saved checkpoints");
  CLI::App* prune =
      app.add_subcommand("prune", "iterative prune/reset/retrain cycles");
  CLI::App* distcheck = app.add_subcommand(
      "distcheck", "mask-distribution curves and approximation KL table");
  for (CLI::App* sub : {train, eval, uncertainty, prune, distcheck})
    add_common(sub, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : advdrop::exit_code::kError;
  }

  CLI::App* sub = app.get_subcommands().front();
  advdrop::ExperimentConfig cfg;
  try {
    cfg = build_config(sub, f);
  } catch (const advdrop::DataMissing& e) {
    std::cerr << "error: " << e.what() << '\n';
    return advdrop::exit_code::kMissingData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return advdrop::exit_code::kError;
  }

  if (sub == train) return advdrop::cmd_train(cfg, std::cout, std::cerr);
  if (sub == eval) return advdrop::cmd_eval(cfg, std::cout, std::cerr);
  if (sub == uncertainty)
    return advdrop::cmd_uncertainty(cfg, std::cout, std::cerr);
  if (sub == prune) return advdrop::cmd_prune(cfg, std::cout, std::cerr);
  return advdrop::cmd_distcheck(cfg, std::cout, std::cerr);
}
