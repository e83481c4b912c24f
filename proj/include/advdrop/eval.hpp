#pragma once

// Uncertainty-aware evaluation: Monte Carlo mask-sampling inference with
// per-class predictive moments, max-probability/entropy confidence scores,
// rank-based AUROC, Student's t-test helper, and accuracy-vs-time
// effectiveness ratios.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "common.hpp"
#include "data.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace advdrop {

struct UncertaintyReport {
  Tensor<double> mean;           // N x C predictive mean, rows sum to 1
  Tensor<double> variance;       // N x C per-class MC variance (divide by T)
  std::vector<double> max_prob;  // per sample, in (0,1]
  std::vector<double> entropy;   // per sample, natural log, in [0, ln C]
  std::size_t passes = 0;
};

// T mask-sampling forward passes with softmax applied per pass; predictive
// mean and per-class variance by moment matching. Deterministic models
// (no stochastic sites) give zero variance for any T. The sampling passes
// save and restore the sites' recorded statistics, so a later
// running-average evaluation is unaffected.
template <class R>
UncertaintyReport mc_infer(Model<R>& model, const Tensor<R>& X, std::size_t T,
                           Rng& rng) {
  if (T < 1) throw std::invalid_argument("mc_infer: need at least one pass");
  const std::size_t N = X.rows(), C = model.spec.dims.back();
  struct Snapshot {
    std::vector<double> last_mu, last_sigma, ema_mu, ema_sigma;
    bool ema_ready;
  };
  std::vector<Snapshot> saved;
  for (const auto& s : model.sites)
    saved.push_back(
        {s.last_mu, s.last_sigma, s.ema_mu, s.ema_sigma, s.ema_ready});

  // Streaming moments (Welford): repeated identical passes accumulate no
  // rounding, so a deterministic model reports exactly zero variance.
  Tensor<double> run_mean = Tensor<double>::zeros({N, C});
  Tensor<double> run_m2 = Tensor<double>::zeros({N, C});
  std::vector<double> prob(C);
  for (std::size_t t = 0; t < T; ++t) {
    Tape<R> tape;
    Var<R> out = model.forward(tape, tape.leaf(X), Mode::kTrain, rng);
    const Tensor<R>& logits = out.value();
    const double inv_n = 1.0 / static_cast<double>(t + 1);
    for (std::size_t i = 0; i < N; ++i) {
      double mx = logits(i, 0);
      for (std::size_t c = 1; c < C; ++c)
        mx = std::max(mx, static_cast<double>(logits(i, c)));
      double denom = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        prob[c] = std::exp(static_cast<double>(logits(i, c)) - mx);
        denom += prob[c];
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double p = prob[c] / denom;
        const double delta = p - run_mean(i, c);
        run_mean(i, c) += delta * inv_n;
        run_m2(i, c) += delta * (p - run_mean(i, c));
      }
    }
  }

  for (std::size_t s = 0; s < model.sites.size(); ++s) {
    auto& site = model.sites[s];
    site.last_mu = saved[s].last_mu;
    site.last_sigma = saved[s].last_sigma;
    site.ema_mu = saved[s].ema_mu;
    site.ema_sigma = saved[s].ema_sigma;
    site.ema_ready = saved[s].ema_ready;
  }

  UncertaintyReport rep;
  rep.passes = T;
  rep.mean = Tensor<double>::zeros({N, C});
  rep.variance = Tensor<double>::zeros({N, C});
  rep.max_prob.resize(N);
  rep.entropy.resize(N);
  const double invT = 1.0 / static_cast<double>(T);
  for (std::size_t i = 0; i < N; ++i) {
    double mp = 0.0, ent = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double m = run_mean(i, c);
      rep.mean(i, c) = m;
      rep.variance(i, c) = std::max(0.0, run_m2(i, c) * invT);
      mp = std::max(mp, m);
      if (m > 0.0) ent -= m * std::log(m);
    }
    rep.max_prob[i] = mp;
    rep.entropy[i] = ent;
  }
  return rep;
}

// Probability that a uniformly random positive outranks a uniformly random
// negative; ties count one half (rank-sum with midranks).
inline double auroc(const std::vector<double>& scores,
                    const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auroc: score/label count mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        rank_sum_pos += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auroc: both classes must be present");
  const double u = rank_sum_pos -
                   0.5 * static_cast<double>(n_pos) *
                       static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct UncertaintySummary {
  double auroc_max_prob = 0.0;
  double auroc_entropy = 0.0;
  double accuracy = 0.0;
  Tensor<double> confusion;  // C x C counts, row = true, column = predicted
  UncertaintyReport report;
};

// MC inference over a labeled set; detection task = "was the prediction
// correct", scored by max probability and by negated entropy (so that a
// higher score means more confidence).
template <class R>
UncertaintySummary uncertainty_eval(Model<R>& model, const Dataset& test,
                                    std::size_t T, Rng& rng) {
  if (!test.classification())
    throw std::invalid_argument("uncertainty_eval: needs labeled data");
  UncertaintySummary out;
  out.report = mc_infer(model, test.X, T, rng);
  const std::size_t N = test.size(), C = model.spec.dims.back();
  out.confusion = Tensor<double>::zeros({C, C});
  std::vector<int> correct(N);
  std::vector<double> neg_entropy(N);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t pred = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (out.report.mean(i, c) > out.report.mean(i, pred)) pred = c;
    const std::size_t truth = static_cast<std::size_t>(test.labels[i]);
    if (truth >= C)
      throw std::invalid_argument("uncertainty_eval: label outside model");
    out.confusion(truth, pred) += 1.0;
    correct[i] = pred == truth ? 1 : 0;
    hits += correct[i];
    neg_entropy[i] = -out.report.entropy[i];
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(N);
  out.auroc_max_prob = auroc(out.report.max_prob, correct);
  out.auroc_entropy = auroc(neg_entropy, correct);
  return out;
}

// Rows scaled to sum to one (zero rows stay zero); for reporting.
inline Tensor<double> row_normalize(const Tensor<double>& counts) {
  Tensor<double> out = counts;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < out.cols(); ++j) total += out(i, j);
    if (total > 0.0)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) /= total;
  }
  return out;
}

struct Effectiveness {
  double s1 = 0.0;
  double s2 = 0.0;
  bool s2_defined = false;  // false when the epoch times are equal
};

// Accuracy-improvement-per-extra-training-time ratios. Accuracies in
// percent, times in seconds per epoch.
inline Effectiveness effectiveness_ratios(double acc, double time_s,
                                          double base_acc, double base_time) {
  if (!(base_time > 0.0))
    throw std::invalid_argument("effectiveness_ratios: base time must be > 0");
  Effectiveness e;
  const double dt = (time_s - base_time) / base_time;
  e.s1 = sigmoid(acc - base_acc) / sigmoid(dt);
  if (dt != 0.0) {
    e.s2 = ((acc - base_acc) / base_acc) / dt;
    e.s2_defined = true;
  }
  return e;
}

// Map a set of ratios onto [0,1] by min-max; a constant set maps to 0.5.
inline std::vector<double> min_max_normalize(const std::vector<double>& v) {
  if (v.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(v.size(), 0.5);
  if (hi > lo)
    for (std::size_t i = 0; i < v.size(); ++i)
      out[i] = (v[i] - lo) / (hi - lo);
  return out;
}

// Two-sample Student's t-test with pooled variance; two-sided p-value.
// Degenerate zero-variance samples give p = 1 on equal means, else p = 0.
inline double t_test(const std::vector<double>& a,
                     const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("t_test: each sample needs >= 2 values");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / na;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / nb;
  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= na - 1.0;
  vb /= nb - 1.0;
  const double df = na + nb - 2.0;
  const double sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
  if (sp2 == 0.0) return ma == mb ? 1.0 : 0.0;
  const double t = (ma - mb) / std::sqrt(sp2 * (1.0 / na + 1.0 / nb));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(dist, -std::abs(t));
}

}  // namespace advdrop
