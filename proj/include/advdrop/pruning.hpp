#pragma once

// Iterative magnitude-of-dropout-rate pruning with reset-to-initialization:
// rank still-kept hidden nodes (or their incoming weights) by learned
// dropout rate, freeze the largest-rate fraction at exactly zero, reset the
// surviving weights to their initial values, and retrain. A random-selection
// baseline replaces the ranking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "common.hpp"
#include "data.hpp"
#include "network.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace advdrop {

enum class Granularity { kNode, kParameter };
enum class PruneMethod { kRateGuided, kRandom };

struct PruneExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class R>
struct PruneState {
  std::size_t round = 0;
  std::vector<Tensor<R>> initial;      // value snapshots, registry order
  std::vector<double> kept_fractions;  // pool fraction after each round
};

template <class R>
PruneState<R> snapshot_initial(Model<R>& model) {
  PruneState<R> st;
  for (auto* p : model.params()) st.initial.push_back(p->value);
  return st;
}

namespace detail {

// Hidden layers only: input features are data columns, not prunable network
// nodes, and the unmasked output layer has no dropout rate to rank by.
template <class R>
std::vector<std::size_t> hidden_layer_indices(const Model<R>& model) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l + 1 < model.spec.dims.size(); ++l)
    out.push_back(l);
  return out;
}

template <class R>
bool node_kept(const Model<R>& model, std::size_t linear, std::size_t node) {
  const Param<R>& b = model.linears[linear].b;
  return !b.pruned() || b.mask.data[node] != R{0};
}

template <class R>
void freeze_node(Model<R>& model, std::size_t linear, std::size_t node) {
  Param<R>& W = model.linears[linear].W;
  Param<R>& b = model.linears[linear].b;
  Param<R>& Wout = model.linears[linear + 1].W;
  W.ensure_mask();
  b.ensure_mask();
  Wout.ensure_mask();
  for (std::size_t j = 0; j < W.value.cols(); ++j) {
    W.mask(node, j) = R{0};
    W.value(node, j) = R{0};
    W.vel(node, j) = R{0};
  }
  b.mask.data[node] = R{0};
  b.value.data[node] = R{0};
  b.vel.data[node] = R{0};
  for (std::size_t r = 0; r < Wout.value.rows(); ++r) {
    Wout.mask(r, node) = R{0};
    Wout.value(r, node) = R{0};
    Wout.vel(r, node) = R{0};
  }
}

}  // namespace detail

// Fraction of the prunable pool still kept (nodes, or hidden-layer weight
// entries, by granularity).
template <class R>
double kept_fraction(const Model<R>& model, Granularity g) {
  std::size_t kept = 0, total = 0;
  for (std::size_t l : detail::hidden_layer_indices(model)) {
    const std::size_t li = l - 1;
    if (g == Granularity::kNode) {
      for (std::size_t k = 0; k < model.spec.dims[l]; ++k) {
        ++total;
        if (detail::node_kept(model, li, k)) ++kept;
      }
    } else {
      const Param<R>& W = model.linears[li].W;
      total += W.value.numel();
      if (!W.pruned())
        kept += W.value.numel();
      else
        for (R m : W.mask.data)
          if (m != R{0}) ++kept;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(kept) /
                                static_cast<double>(total);
}

// One pruning round: freeze ceil(q% of the still-kept pool), chosen by the
// largest per-node dropout rates (node granularity), or by the output node's
// rate with smaller-magnitude weights pruned first (parameter granularity).
// The random method draws uniformly from the kept pool instead. Frozen
// entries are exact zeros in the forward pass and receive no updates.
template <class R>
void prune_round(Model<R>& model, PruneState<R>& state, double q,
                 Granularity g, PruneMethod method = PruneMethod::kRateGuided,
                 Rng* rng = nullptr) {
  if (!(q > 0.0) || !(q < 100.0))
    throw std::invalid_argument("prune fraction must be inside (0,100)");
  if (method == PruneMethod::kRandom && rng == nullptr)
    throw std::invalid_argument("random pruning needs a generator");
  if (method == PruneMethod::kRateGuided && model.sites.empty())
    throw std::logic_error(
        "rate-guided pruning needs learned dropout telemetry");

  struct Candidate {
    double rate;
    double magnitude;
    std::size_t linear;
    std::size_t row;
    std::size_t col;  // only for parameter granularity
  };
  std::vector<Candidate> pool;
  std::size_t total = 0;

  const std::size_t site_base = model.spec.mask_input ? 1 : 0;
  for (std::size_t l : detail::hidden_layer_indices(model)) {
    const std::size_t li = l - 1;
    std::vector<double> rates;
    if (method == PruneMethod::kRateGuided)
      rates = model.sites[site_base + li].dropout_rate().first;
    if (g == Granularity::kNode) {
      total += model.spec.dims[l];
      for (std::size_t k = 0; k < model.spec.dims[l]; ++k) {
        if (!detail::node_kept(model, li, k)) continue;
        pool.push_back({rates.empty() ? 0.0 : rates[k], 0.0, li, k, 0});
      }
    } else {
      const Param<R>& W = model.linears[li].W;
      total += W.value.numel();
      for (std::size_t k = 0; k < W.value.rows(); ++k)
        for (std::size_t j = 0; j < W.value.cols(); ++j) {
          if (W.pruned() && W.mask(k, j) == R{0}) continue;
          pool.push_back({rates.empty() ? 0.0 : rates[k],
                          std::abs(static_cast<double>(W.value(k, j))), li, k,
                          j});
        }
    }
  }
  if (pool.empty())
    throw PruneExhausted("round " + std::to_string(state.round + 1) +
                         ": nothing left to prune");

  // q*size first: exact for integer q (q/100 alone rounds, and e.g.
  // ceil(0.1000..0001 * 800) would prune 81 nodes instead of 80).
  std::size_t n_prune = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(pool.size()) / 100.0));
  n_prune = std::min(n_prune, pool.size());

  if (method == PruneMethod::kRateGuided) {
    std::stable_sort(pool.begin(), pool.end(),
                     [](const Candidate& a, const Candidate& b) {
                       if (a.rate != b.rate) return a.rate > b.rate;
                       return a.magnitude < b.magnitude;
                     });
  } else {
    rng->shuffle(pool.begin(), pool.end());
  }

  for (std::size_t i = 0; i < n_prune; ++i) {
    const Candidate& c = pool[i];
    if (g == Granularity::kNode) {
      detail::freeze_node(model, c.linear, c.row);
    } else {
      Param<R>& W = model.linears[c.linear].W;
      W.ensure_mask();
      W.mask(c.row, c.col) = R{0};
      W.value(c.row, c.col) = R{0};
      W.vel(c.row, c.col) = R{0};
    }
  }

  state.round += 1;
  state.kept_fractions.push_back(static_cast<double>(pool.size() - n_prune) /
                                 static_cast<double>(total));
}

// Surviving network weights return to their initial values bitwise; frozen
// entries stay zero; the noise encoders are fully restored (they are never
// pruned); optimizer state and recorded mask statistics are cleared.
template <class R>
void reset_to_initial(Model<R>& model, const PruneState<R>& state) {
  auto params = model.params();
  if (params.size() != state.initial.size())
    throw std::invalid_argument("snapshot does not match this model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<R>* p = params[i];
    p->value = state.initial[i];
    if (p->pruned())
      for (std::size_t j = 0; j < p->value.numel(); ++j)
        p->value.data[j] *= p->mask.data[j];
    p->vel.fill(R{0});
    p->zero_grad();
  }
  for (auto& site : model.sites) {
    site.last_mu.clear();
    site.last_sigma.clear();
    site.ema_mu.clear();
    site.ema_sigma.clear();
    site.ema_ready = false;
  }
}

struct LotteryPoint {
  std::size_t round = 0;
  double kept_fraction = 1.0;
  double accuracy = 0.0;  // final test metric of that round's retraining
};

// Train, then repeat (prune -> reset survivors to initialization -> retrain)
// for the requested number of rounds, recording the test metric at each
// preservation level. Round 0 is the unpruned baseline. Every round uses the
// same epoch budget. The random method's draws derive from the run seed.
template <class R>
std::vector<LotteryPoint> lottery_cycle(
    const FcSpec& spec, const Dataset& train, const Dataset& test,
    const TrainConfig& cfg, std::size_t rounds, double q, Granularity g,
    PruneMethod method = PruneMethod::kRateGuided) {
  Rng model_rng(cfg.seed);
  Model<R> model(spec, model_rng);
  PruneState<R> state = snapshot_initial(model);
  std::vector<LotteryPoint> out;
  RunRecord base = fit(model, train, test, cfg);
  out.push_back({0, 1.0, base.final_test_metric});
  Rng prune_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  for (std::size_t j = 1; j <= rounds; ++j) {
    prune_round(model, state, q, g, method, &prune_rng);
    reset_to_initial(model, state);
    RunRecord rec = fit(model, train, test, cfg);
    out.push_back({j, state.kept_fractions.back(), rec.final_test_metric});
  }
  return out;
}

}  // namespace advdrop
