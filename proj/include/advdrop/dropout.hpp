#pragma once

// Multiplicative-noise layers. The advanced layer draws its mask from
// sigmoid(mu + sigma * eps) with per-node mu, sigma produced by a small
// feature-conditioned encoder that trains end-to-end through the
// reparameterized noise; baselines cover none / Bernoulli / Gaussian noise.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "distributions.hpp"
#include "tensor.hpp"

namespace advdrop {

enum class Mode { kTrain, kEval };

enum class DropKind { kNone, kBernoulli, kGaussian, kAdvanced };

struct DropoutPolicy {
  DropKind kind = DropKind::kNone;
  double p = 0.5;  // Bernoulli keep probability
  double v = 1.0;  // Gaussian multiplicative variance

  static DropoutPolicy none() { return {}; }
  static DropoutPolicy bernoulli(double keep) {
    if (!(keep > 0.0) || !(keep < 1.0))
      throw std::invalid_argument("bernoulli keep probability outside (0,1)");
    return {DropKind::kBernoulli, keep, 1.0};
  }
  static DropoutPolicy gaussian(double var) {
    if (!(var > 0.0))
      throw std::invalid_argument("gaussian noise variance must be positive");
    return {DropKind::kGaussian, 0.5, var};
  }
  static DropoutPolicy advanced() { return {DropKind::kAdvanced, 0.5, 1.0}; }
};

// Expected mask value under seed N(mu, sigma^2) pushed through sigmoid.
inline double mean_mask(double mu, double sigma) {
  return LogitNormal(mu, sigma).mean();
}

// The noise layer with learned, feature-conditioned mask statistics.
//
// Encoder: h_i = W_h x_i + b_h per sample, then mu = batch-mean of
// (W_mu h_i + b_mu) and sigma = batch-mean of softplus(W_sigma h_i + b_sigma)
// clamped to >= 1e-4. Train mode multiplies by sigmoid(mu + sigma * eps) with
// eps drawn per (sample, node); eval mode multiplies by the closed-form mask
// mean, deterministically. Gradients flow through mu and sigma into the
// encoder and back into the features (nothing is detached).
template <class R>
struct AdvancedDropoutLayer {
  std::size_t in_dim = 0;  // nodes masked
  std::size_t hidden = 0;  // encoder width, min(64, in_dim)

  Param<R> W_h, b_h;          // feature -> hidden
  Param<R> W_mu, b_mu;        // hidden -> per-node seed mean
  Param<R> W_sigma, b_sigma;  // hidden -> per-node seed spread (pre-softplus)

  bool scalar_prior = false;     // collapse mu, sigma to one value per layer
  bool eval_running_avg = false; // eval from train-time running averages
  double ema_decay = 0.99;

  // telemetry: the (mu, sigma) of the most recent train-mode batch
  std::vector<double> last_mu, last_sigma;
  std::vector<double> ema_mu, ema_sigma;
  bool ema_ready = false;

  // tests may pin the reparameterization noise; shape must be batch x in_dim
  const Tensor<R>* frozen_eps = nullptr;

  static constexpr double kSigmaFloor = 1e-4;

  AdvancedDropoutLayer() = default;

  AdvancedDropoutLayer(std::size_t k, Rng& rng, double init_mu = 0.0,
                       double init_sigma = 3.0, bool scalar_prior_ = false,
                       bool eval_running_avg_ = false,
                       const std::string& name = "site")
      : in_dim(k),
        hidden(std::min<std::size_t>(64, k)),
        scalar_prior(scalar_prior_),
        eval_running_avg(eval_running_avg_) {
    if (k == 0) throw std::invalid_argument("dropout layer needs nodes");
    if (!(init_sigma > 0.0))
      throw std::invalid_argument("initial sigma must be positive");
    W_h = Param<R>(name + ".W_h",
                   Tensor<R>::randn({hidden, in_dim}, rng, R(0.01)), true);
    b_h = Param<R>(name + ".b_h", Tensor<R>::zeros({hidden}), true);
    W_mu = Param<R>(name + ".W_mu",
                    Tensor<R>::randn({in_dim, hidden}, rng, R(0.01)), true);
    b_mu = Param<R>(name + ".b_mu",
                    Tensor<R>::full({in_dim}, static_cast<R>(init_mu)), true);
    W_sigma = Param<R>(name + ".W_sigma",
                       Tensor<R>::randn({in_dim, hidden}, rng, R(0.01)), true);
    b_sigma = Param<R>(
        name + ".b_sigma",
        Tensor<R>::full({in_dim}, static_cast<R>(softplus_inv(init_sigma))),
        true);
  }

  std::vector<Param<R>*> params() {
    return {&W_h, &b_h, &W_mu, &b_mu, &W_sigma, &b_sigma};
  }

  // Mask statistics for a batch, on the caller's tape (differentiable).
  std::pair<Var<R>, Var<R>> prior_params(Tape<R>& tape, Var<R> x) {
    const Tensor<R>& X = x.value();
    if (X.shape.size() != 2 || X.shape[1] != in_dim)
      throw std::invalid_argument("prior encoder input must be batch x " +
                                  std::to_string(in_dim));
    if (X.shape[0] == 0)
      throw std::invalid_argument("prior encoder got an empty batch");
    Var<R> h = tape.add_row(tape.matmul_bt(x, tape.leaf_of(W_h)),
                            tape.leaf_of(b_h));
    Var<R> mu_rows =
        tape.add_row(tape.matmul_bt(h, tape.leaf_of(W_mu)), tape.leaf_of(b_mu));
    Var<R> sig_rows = tape.softplus(tape.add_row(
        tape.matmul_bt(h, tape.leaf_of(W_sigma)), tape.leaf_of(b_sigma)));
    Var<R> mu, sigma;
    if (scalar_prior) {
      mu = tape.broadcast_k(tape.mean_all(mu_rows), in_dim);
      sigma = tape.clamp_min(tape.broadcast_k(tape.mean_all(sig_rows), in_dim),
                             static_cast<R>(kSigmaFloor));
    } else {
      mu = tape.mean_axis0(mu_rows);
      sigma = tape.clamp_min(tape.mean_axis0(sig_rows),
                             static_cast<R>(kSigmaFloor));
    }
    record_telemetry(mu.value(), sigma.value());
    return {mu, sigma};
  }

  Var<R> forward(Tape<R>& tape, Var<R> pre, Mode mode, Rng& rng) {
    // copy, not reference: building nodes below may reallocate the tape
    const std::vector<std::size_t> shape = pre.value().shape;
    if (shape.size() != 2 || shape[1] != in_dim)
      throw std::invalid_argument("dropout input must be batch x " +
                                  std::to_string(in_dim));
    if (mode == Mode::kTrain) {
      Tensor<R> eps;
      if (frozen_eps != nullptr) {
        if (frozen_eps->shape != shape)
          throw std::invalid_argument("frozen noise shape mismatch");
        eps = *frozen_eps;
      } else {
        eps = Tensor<R>::randn(shape, rng, R(1));
      }
      auto [mu, sigma] = prior_params(tape, pre);
      Var<R> seeds = tape.add_row(tape.mul_row(tape.leaf(std::move(eps)), sigma), mu);
      return tape.mul(tape.sigmoid(seeds), pre);
    }
    // eval: deterministic scaling by the expected mask
    std::vector<double> mu, sigma;
    if (eval_running_avg && ema_ready) {
      mu = ema_mu;
      sigma = ema_sigma;
    } else {
      numeric_prior(pre.value(), mu, sigma);
    }
    Tensor<R> scale = Tensor<R>::zeros({in_dim});
    for (std::size_t j = 0; j < in_dim; ++j)
      scale[j] = static_cast<R>(mean_mask(mu[j], sigma[j]));
    return tape.mul_row(pre, tape.leaf(std::move(scale)));
  }

  // Per-node dropout rates and their mean, from the latest train-mode batch.
  std::pair<std::vector<double>, double> dropout_rate() const {
    if (last_mu.empty())
      throw std::logic_error(
          "dropout_rate: no batch has flowed through this layer yet");
    std::vector<double> per_node(in_dim);
    double acc = 0.0;
    for (std::size_t j = 0; j < in_dim; ++j) {
      per_node[j] = 1.0 - mean_mask(last_mu[j], last_sigma[j]);
      acc += per_node[j];
    }
    return {std::move(per_node), acc / static_cast<double>(in_dim)};
  }

  // The same encoder arithmetic as prior_params, off-tape (for eval mode).
  void numeric_prior(const Tensor<R>& X, std::vector<double>& mu,
                     std::vector<double>& sigma) const {
    const std::size_t N = X.shape[0];
    if (N == 0)
      throw std::invalid_argument("prior encoder got an empty batch");
    Tensor<R> h = Tensor<R>::zeros({N, hidden});
    gemm<R>(false, true, N, hidden, in_dim, R(1), X.data.data(), in_dim,
            W_h.value.data.data(), in_dim, R(0), h.data.data(), hidden);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < hidden; ++j) h(i, j) += b_h.value[j];
    Tensor<R> mu_rows = Tensor<R>::zeros({N, in_dim});
    Tensor<R> sig_rows = Tensor<R>::zeros({N, in_dim});
    gemm<R>(false, true, N, in_dim, hidden, R(1), h.data.data(), hidden,
            W_mu.value.data.data(), hidden, R(0), mu_rows.data.data(), in_dim);
    gemm<R>(false, true, N, in_dim, hidden, R(1), h.data.data(), hidden,
            W_sigma.value.data.data(), hidden, R(0), sig_rows.data.data(),
            in_dim);
    mu.assign(in_dim, 0.0);
    sigma.assign(in_dim, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < in_dim; ++j) {
        mu[j] += static_cast<double>(mu_rows(i, j)) +
                 static_cast<double>(b_mu.value[j]);
        sigma[j] += softplus(static_cast<double>(sig_rows(i, j)) +
                             static_cast<double>(b_sigma.value[j]));
      }
    for (std::size_t j = 0; j < in_dim; ++j) {
      mu[j] /= static_cast<double>(N);
      sigma[j] = std::max(sigma[j] / static_cast<double>(N), kSigmaFloor);
    }
    if (scalar_prior) {
      double mu_all = 0.0, sig_all = 0.0;
      for (std::size_t j = 0; j < in_dim; ++j) {
        mu_all += mu[j];
        sig_all += sigma[j];
      }
      mu.assign(in_dim, mu_all / static_cast<double>(in_dim));
      sigma.assign(in_dim,
                   std::max(sig_all / static_cast<double>(in_dim), kSigmaFloor));
    }
  }

 private:
  void record_telemetry(const Tensor<R>& mu, const Tensor<R>& sigma) {
    last_mu.assign(mu.data.begin(), mu.data.end());
    last_sigma.assign(sigma.data.begin(), sigma.data.end());
    if (!ema_ready) {
      ema_mu = last_mu;
      ema_sigma = last_sigma;
      ema_ready = true;
      return;
    }
    for (std::size_t j = 0; j < in_dim; ++j) {
      ema_mu[j] = ema_decay * ema_mu[j] + (1.0 - ema_decay) * last_mu[j];
      ema_sigma[j] =
          ema_decay * ema_sigma[j] + (1.0 - ema_decay) * last_sigma[j];
    }
  }
};

// Parameter-free noise baselines.
template <class R>
struct BaselineDropout {
  DropoutPolicy policy;

  explicit BaselineDropout(DropoutPolicy p = DropoutPolicy::none())
      : policy(p) {}

  Var<R> forward(Tape<R>& tape, Var<R> pre, Mode mode, Rng& rng) const {
    switch (policy.kind) {
      case DropKind::kNone:
        return pre;
      case DropKind::kBernoulli: {
        if (mode == Mode::kEval)
          return tape.mul_scalar(pre, static_cast<R>(policy.p));
        const Tensor<R>& P = pre.value();
        Tensor<R> mask = Tensor<R>::zeros(P.shape);
        for (auto& v : mask.data)
          v = rng.uniform() < policy.p ? R(1) : R(0);
        return tape.mul(tape.leaf(std::move(mask)), pre);
      }
      case DropKind::kGaussian: {
        if (mode == Mode::kEval) return pre;  // unit mean
        const Tensor<R>& P = pre.value();
        Tensor<R> noise = Tensor<R>::zeros(P.shape);
        const double sd = std::sqrt(policy.v);
        for (auto& v : noise.data)
          v = static_cast<R>(1.0 + sd * rng.normal());
        return tape.mul(tape.leaf(std::move(noise)), pre);
      }
      case DropKind::kAdvanced:
        throw std::logic_error(
            "advanced noise lives in AdvancedDropoutLayer, not the baseline");
    }
    throw std::logic_error("unknown dropout kind");
  }
};

}  // namespace advdrop
