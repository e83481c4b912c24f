#pragma once

// Fully connected classifiers/regressors with a multiplicative-noise site
// after every hidden linear layer (and optionally on the input features).
// Masking follows mask-then-activation ordering; the output layer's logits
// are never masked.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "common.hpp"
#include "dropout.hpp"
#include "tensor.hpp"

namespace advdrop {

struct FcSpec {
  std::vector<std::size_t> dims;  // input, hidden..., output
  DropoutPolicy policy;           // applied at every maskable site
  bool mask_input = false;        // also mask the raw input features
  bool classification = true;     // softmax head vs linear regression head
  bool scalar_prior = false;               // advanced: one (mu, sigma) per layer
  bool eval_running_avg = false;           // advanced: eval from running averages
  double init_mu = 0.0;                    // advanced: initial seed mean
  double init_sigma = 3.0;                 // advanced: initial seed spread

  std::size_t maskable_sites() const {
    return (mask_input ? 1 : 0) + (dims.size() >= 2 ? dims.size() - 2 : 0);
  }
};

template <class R>
struct LinearLayer {
  Param<R> W;  // out x in
  Param<R> b;  // out
};

// A model owns its linear layers and, for the learned policy, one noise
// layer per maskable site. Parameters split into the network weights
// (is_prior = false) and the noise encoders (is_prior = true).
template <class R>
struct Model {
  FcSpec spec;
  std::vector<LinearLayer<R>> linears;
  std::vector<AdvancedDropoutLayer<R>> sites;  // learned policy only
  BaselineDropout<R> baseline{DropoutPolicy::none()};

  Model() = default;

  Model(FcSpec s, Rng& rng) : spec(std::move(s)) {
    if (spec.dims.size() < 3)
      throw std::invalid_argument(
          "network needs input, at least one hidden, and output dims");
    for (std::size_t d : spec.dims)
      if (d == 0) throw std::invalid_argument("network dims must be positive");
    // He-style init, weights first so layer draws are independent of the
    // dropout policy
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
      const std::size_t in = spec.dims[l], out = spec.dims[l + 1];
      const double scale = std::sqrt(2.0 / static_cast<double>(in));
      LinearLayer<R> layer;
      layer.W = Param<R>("fc" + std::to_string(l) + ".W",
                         Tensor<R>::randn({out, in}, rng, scale));
      layer.b = Param<R>("fc" + std::to_string(l) + ".b",
                         Tensor<R>::zeros({out}));
      linears.push_back(std::move(layer));
    }
    if (spec.policy.kind == DropKind::kAdvanced) {
      std::size_t idx = 0;
      for (std::size_t k : site_widths())
        sites.emplace_back(k, rng, spec.init_mu, spec.init_sigma,
                           spec.scalar_prior, spec.eval_running_avg,
                           "site" + std::to_string(idx++));
    } else {
      baseline = BaselineDropout<R>(spec.policy);
    }
  }

  // widths of the masked tensors, in forward order
  std::vector<std::size_t> site_widths() const {
    std::vector<std::size_t> w;
    if (spec.mask_input) w.push_back(spec.dims.front());
    for (std::size_t l = 1; l + 1 < spec.dims.size(); ++l)
      w.push_back(spec.dims[l]);
    return w;
  }

  Var<R> forward(Tape<R>& tape, Var<R> x, Mode mode, Rng& rng) {
    if (x.value().shape.size() != 2 ||
        x.value().shape[1] != spec.dims.front())
      throw std::invalid_argument("input must be batch x " +
                                  std::to_string(spec.dims.front()));
    std::size_t site = 0;
    Var<R> cur = x;
    if (spec.mask_input) cur = mask(site++, tape, cur, mode, rng);
    for (std::size_t l = 0; l + 1 < linears.size(); ++l) {
      Var<R> pre = tape.add_row(
          tape.matmul_bt(cur, tape.leaf_of(linears[l].W)),
          tape.leaf_of(linears[l].b));
      pre = mask(site++, tape, pre, mode, rng);  // mask, then activation
      cur = tape.relu(pre);
    }
    return tape.add_row(
        tape.matmul_bt(cur, tape.leaf_of(linears.back().W)),
        tape.leaf_of(linears.back().b));
  }

  // every trainable tensor exactly once: network weights, then encoders
  std::vector<Param<R>*> params() {
    std::vector<Param<R>*> out;
    for (auto& l : linears) {
      out.push_back(&l.W);
      out.push_back(&l.b);
    }
    for (auto& s : sites)
      for (auto* p : s.params()) out.push_back(p);
    return out;
  }

  std::size_t theta_count() {
    std::size_t n = 0;
    for (auto* p : params())
      if (!p->is_prior) n += p->value.numel();
    return n;
  }

  std::size_t lambda_count() {
    std::size_t n = 0;
    for (auto* p : params())
      if (p->is_prior) n += p->value.numel();
    return n;
  }

 private:
  Var<R> mask(std::size_t site, Tape<R>& tape, Var<R> pre, Mode mode,
              Rng& rng) {
    if (spec.policy.kind == DropKind::kAdvanced)
      return sites[site].forward(tape, pre, mode, rng);
    return baseline.forward(tape, pre, mode, rng);
  }
};

}  // namespace advdrop
