#pragma once

// Mini-batch training loop: likelihood objective through reparameterized
// masks, classical-momentum SGD with coupled weight decay, step learning-rate
// schedules, and per-epoch telemetry (metrics + per-site dropout rates).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "data.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace advdrop {

enum class LossKind { kCrossEntropy, kMse };

// Empty milestones = constant learning rate.
struct StepSchedule {
  std::vector<std::size_t> milestones;  // ascending, 1-based epochs
  double factor = 0.1;
};

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  double lr = 0.01;
  StepSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::kCrossEntropy;
  // Initial mask-seed statistics. Consumed when the experiment driver
  // constructs the model spec; carried here so run hashes capture them.
  double init_mu = 0.0;
  double init_sigma = 3.0;
  double clip_norm = 0.0;        // 0 = off; else clip global gradient norm
  std::size_t eval_batch = 256;  // evaluation chunk size

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size == 0)
      throw std::invalid_argument("batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(momentum >= 0.0) || !(momentum < 1.0))
      throw std::invalid_argument("momentum outside [0,1)");
    if (!(weight_decay >= 0.0))
      throw std::invalid_argument("weight_decay must be nonnegative");
    if (!(schedule.factor > 0.0))
      throw std::invalid_argument("schedule factor must be positive");
    if (!(init_sigma > 0.0))
      throw std::invalid_argument("init_sigma must be positive");
    for (std::size_t i = 1; i < schedule.milestones.size(); ++i)
      if (schedule.milestones[i] <= schedule.milestones[i - 1])
        throw std::invalid_argument("schedule milestones must be ascending");
  }

  // Learning rate for a 1-based epoch: decayed once per milestone reached.
  double lr_at(std::size_t epoch) const {
    double out = lr;
    for (std::size_t m : schedule.milestones)
      if (m <= epoch) out *= schedule.factor;
    return out;
  }
};

struct SiteStat {
  std::size_t site = 0;
  double rate = 0.0;        // mean dropout rate over the site's nodes
  double mu_mean = 0.0;     // mean seed mean
  double sigma_mean = 0.0;  // mean seed spread
};

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_metric = 0.0;  // accuracy (classification) or rmse
  double test_metric = 0.0;
  std::vector<SiteStat> sites;
  double seconds = 0.0;
};

struct RunRecord {
  std::vector<EpochRow> rows;
  std::string config_hash;  // filled by the experiment driver
  double final_train_loss = 0.0;
  double final_train_metric = 0.0;
  double final_test_metric = 0.0;
};

// Batch-mean negative log-likelihood through a train- or eval-mode forward
// pass. Cross-entropy reads labels; squared error reads targets. Also hands
// back the logits so callers can score predictions without a second pass.
template <class R>
std::pair<Var<R>, Var<R>> loss_and_logits(Model<R>& model, Tape<R>& tape,
                                          const Tensor<R>& X,
                                          const std::vector<int>& labels,
                                          const Tensor<R>& targets,
                                          LossKind kind, Mode mode, Rng& rng) {
  if (X.rows() == 0) throw std::invalid_argument("empty batch");
  Var<R> out = model.forward(tape, tape.leaf(X), mode, rng);
  if (kind == LossKind::kCrossEntropy)
    return {tape.softmax_xent(out, labels), out};
  Var<R> d = tape.add(out, tape.neg(tape.leaf(targets)));
  return {tape.mean_all(tape.mul(d, d)), out};
}

template <class R>
Var<R> sgvb_loss(Model<R>& model, Tape<R>& tape, const Tensor<R>& X,
                 const std::vector<int>& labels, const Tensor<R>& targets,
                 LossKind kind, Mode mode, Rng& rng) {
  return loss_and_logits(model, tape, X, labels, targets, kind, mode, rng)
      .first;
}

// v <- momentum*v + (g + weight_decay*w); w <- w - lr*v. Pruned entries are
// re-zeroed so masked weights stay exactly zero through training. Gradients
// are consumed (reset to zero).
template <class R>
void sgd_step(const std::vector<Param<R>*>& params, double lr, double momentum,
              double weight_decay) {
  for (Param<R>* p : params) {
    const std::size_t n = p->value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(p->grad.data[i]) +
                       weight_decay * static_cast<double>(p->value.data[i]);
      p->vel.data[i] =
          static_cast<R>(momentum * static_cast<double>(p->vel.data[i]) + g);
      p->value.data[i] -= static_cast<R>(lr) * p->vel.data[i];
    }
    if (p->pruned())
      for (std::size_t i = 0; i < n; ++i) {
        p->value.data[i] *= p->mask.data[i];
        p->vel.data[i] *= p->mask.data[i];
      }
    p->zero_grad();
  }
}

// Scale all gradients so their joint Euclidean norm is at most `clip`.
template <class R>
double clip_gradients(const std::vector<Param<R>*>& params, double clip) {
  double sq = 0.0;
  for (Param<R>* p : params)
    for (R g : p->grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > clip && norm > 0.0) {
    const R scale = static_cast<R>(clip / norm);
    for (Param<R>* p : params)
      for (R& g : p->grad.data) g *= scale;
  }
  return norm;
}

namespace detail {

template <class R>
Tensor<R> gather_rows(const Tensor<R>& X, const std::vector<std::size_t>& idx,
                      std::size_t begin, std::size_t end) {
  const std::size_t d = X.cols();
  Tensor<R> out = Tensor<R>::zeros({end - begin, d});
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i - begin, j) = X(idx[i], j);
  return out;
}

inline std::size_t argmax_row(const Tensor<double>& M, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < M.cols(); ++j)
    if (M(i, j) > M(i, best)) best = j;
  return best;
}

}  // namespace detail

struct EvalResult {
  double loss = 0.0;
  double metric = 0.0;  // accuracy or rmse
};

// Deterministic eval-mode metrics over a dataset, in chunks.
template <class R>
EvalResult evaluate(Model<R>& model, const Dataset& ds, LossKind kind,
                    std::size_t chunk = 256) {
  if (ds.size() == 0) throw std::invalid_argument("empty dataset");
  Rng unused(0);  // eval-mode forwards draw nothing
  double loss_sum = 0.0, metric_sum = 0.0;
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    Tensor<R> X = detail::gather_rows(ds.X, idx, start, end);
    std::vector<int> labels;
    Tensor<R> targets;
    if (kind == LossKind::kCrossEntropy)
      labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                    ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
    else
      targets = detail::gather_rows(ds.targets, idx, start, end);
    Tape<R> tape;
    auto [loss, out] = loss_and_logits(model, tape, X, labels, targets, kind,
                                       Mode::kEval, unused);
    const double n = static_cast<double>(end - start);
    loss_sum += loss.value().data[0] * n;
    const Tensor<R> logits = out.value();  // copy: later reads stay valid
    if (kind == LossKind::kCrossEntropy) {
      for (std::size_t i = 0; i < end - start; ++i)
        if (detail::argmax_row(logits, i) ==
            static_cast<std::size_t>(labels[i]))
          metric_sum += 1.0;
    } else {
      for (std::size_t i = 0; i < end - start; ++i) {
        const double d = logits(i, 0) - targets(i, 0);
        metric_sum += d * d;
      }
    }
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(ds.size());
  r.metric = kind == LossKind::kCrossEntropy
                 ? metric_sum / static_cast<double>(ds.size())
                 : std::sqrt(metric_sum / static_cast<double>(ds.size()));
  return r;
}

// Full training loop. Shuffles with a fresh permutation each epoch, steps
// per mini-batch (last batch may be short), scores the test set in eval mode
// once per epoch, and snapshots per-site dropout rates from the last train
// batch. Deterministic given config + seed (single-threaded). A non-finite
// loss aborts with epoch/batch/site diagnostics.
template <class R>
RunRecord fit(Model<R>& model, const Dataset& train, const Dataset& test,
              const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("empty training set");
  const bool cls = cfg.loss == LossKind::kCrossEntropy;
  if (cls && !train.classification())
    throw std::invalid_argument("cross-entropy needs labeled data");
  if (!cls && train.targets.numel() == 0)
    throw std::invalid_argument("squared error needs regression targets");

  Rng rng(cfg.seed);
  auto params = model.params();
  RunRecord rec;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(epoch);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0, metric_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < train.size();
         start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(train.size(), start + cfg.batch_size);
      Tensor<R> X = detail::gather_rows(train.X, order, start, end);
      std::vector<int> labels;
      Tensor<R> targets;
      if (cls) {
        labels.resize(end - start);
        for (std::size_t i = start; i < end; ++i)
          labels[i - start] = train.labels[order[i]];
      } else {
        targets = detail::gather_rows(train.targets, order, start, end);
      }
      Tape<R> tape;
      auto [loss, out] = loss_and_logits(model, tape, X, labels, targets,
                                         cfg.loss, Mode::kTrain, rng);
      const double loss_value = static_cast<double>(loss.value().data[0]);
      if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "training diverged: non-finite loss at epoch " << epoch
           << ", batch " << batch_index;
        for (std::size_t s = 0; s < model.sites.size(); ++s) {
          const auto& site = model.sites[s];
          const double huge = std::numeric_limits<double>::infinity();
          double mu_lo = huge, mu_hi = -huge, sg_hi = 0.0;
          for (double m : site.last_mu) {
            mu_lo = std::min(mu_lo, m);
            mu_hi = std::max(mu_hi, m);
          }
          for (double v : site.last_sigma) sg_hi = std::max(sg_hi, v);
          os << "; site " << s << " mu in [" << mu_lo << "," << mu_hi
             << "], max sigma " << sg_hi;
        }
        throw TrainingDiverged(os.str());
      }
      const double n = static_cast<double>(end - start);
      loss_sum += loss_value * n;
      const Tensor<R> logits = out.value();  // copy: tape mutates no further
      if (cls) {
        for (std::size_t i = 0; i < end - start; ++i)
          if (detail::argmax_row(logits, i) ==
              static_cast<std::size_t>(labels[i]))
            metric_sum += 1.0;
      } else {
        for (std::size_t i = 0; i < end - start; ++i) {
          const double d = logits(i, 0) - targets(i, 0);
          metric_sum += d * d;
        }
      }
      for (Param<R>* p : params) p->zero_grad();
      tape.backward(loss);
      if (cfg.clip_norm > 0.0) clip_gradients(params, cfg.clip_norm);
      sgd_step(params, lr, cfg.momentum, cfg.weight_decay);
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.train_metric =
        cls ? metric_sum / static_cast<double>(train.size())
            : std::sqrt(metric_sum / static_cast<double>(train.size()));
    for (std::size_t s = 0; s < model.sites.size(); ++s) {
      const auto& site = model.sites[s];
      for (std::size_t j = 0; j < site.last_mu.size(); ++j)
        if (!std::isfinite(site.last_mu[j]) ||
            !std::isfinite(site.last_sigma[j]))
          throw TrainingDiverged(
              "training diverged: non-finite mask statistics at epoch " +
              std::to_string(epoch) + ", site " + std::to_string(s));
      auto rate = model.sites[s].dropout_rate();
      SiteStat st;
      st.site = s;
      st.rate = rate.second;
      double mu = 0.0, sg = 0.0;
      for (double v : site.last_mu) mu += v;
      for (double v : site.last_sigma) sg += v;
      st.mu_mean = mu / static_cast<double>(site.last_mu.size());
      st.sigma_mean = sg / static_cast<double>(site.last_sigma.size());
      row.sites.push_back(st);
    }
    if (test.size() > 0)
      row.test_metric = evaluate(model, test, cfg.loss, cfg.eval_batch).metric;
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    rec.rows.push_back(std::move(row));
  }
  rec.final_train_loss = rec.rows.back().train_loss;
  rec.final_train_metric = rec.rows.back().train_metric;
  rec.final_test_metric = rec.rows.back().test_metric;
  return rec;
}

}  // namespace advdrop
