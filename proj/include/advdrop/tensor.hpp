#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <type_traits>
#include <vector>

#include <cblas.h>

#include "common.hpp"

namespace advdrop {

// Dense row-major tensor. Rank 1 or 2 in practice (vectors, matrices,
// 1-element scalars); ops validate the shapes they need.
template <class R>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<R> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<R> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("Tensor: data length does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    Tensor t;
    t.data.assign(numel_of(s), R{0});
    t.shape = std::move(s);
    return t;
  }

  static Tensor full(std::vector<std::size_t> s, R v) {
    Tensor t;
    t.data.assign(numel_of(s), v);
    t.shape = std::move(s);
    return t;
  }

  static Tensor scalar(R v) { return full({1}, v); }

  // N(0, stddev^2) entries, in row-major order, one rng draw per entry.
  static Tensor randn(std::vector<std::size_t> s, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<R>(stddev * rng.normal());
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  R& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  R operator()(std::size_t i, std::size_t j) const {
    return data[i * cols() + j];
  }
  R& operator[](std::size_t i) { return data[i]; }
  R operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(R v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (R v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }
};

// C = alpha * op(A) * op(B) + beta * C for row-major dense matrices.
// Double/float dispatch to BLAS; other scalar types fall back to loops.
template <class R>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, R alpha, const R* a, std::size_t lda, const R* b,
          std::size_t ldb, R beta, R* c, std::size_t ldc) {
  if constexpr (std::is_same_v<R, double>) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
                static_cast<int>(ldc));
  } else if constexpr (std::is_same_v<R, float>) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
                static_cast<int>(ldc));
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        R acc{0};
        for (std::size_t p = 0; p < k; ++p) {
          R av = trans_a ? a[p * lda + i] : a[i * lda + p];
          R bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
          acc += av * bv;
        }
        c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
      }
  }
}

// Trainable tensor with optimizer state. `mask`, when non-empty, marks
// entries frozen at exactly zero (pruning); `is_prior` separates the prior
// encoders (Lambda) from network weights (Theta).
template <class R>
struct Param {
  std::string name;
  Tensor<R> value;
  Tensor<R> grad;
  Tensor<R> vel;
  Tensor<R> mask;  // empty => dense
  bool is_prior = false;

  Param() = default;
  Param(std::string n, Tensor<R> v, bool prior = false)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Tensor<R>::zeros(value.shape)),
        vel(Tensor<R>::zeros(value.shape)),
        is_prior(prior) {}

  void zero_grad() { grad.fill(R{0}); }

  bool pruned() const { return !mask.data.empty(); }

  void ensure_mask() {
    if (!pruned()) mask = Tensor<R>::full(value.shape, R{1});
  }
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,
  kMatmulBT,
  kAdd,
  kAddScalar,
  kMul,
  kMulScalar,
  kRelu,
  kSigmoid,
  kSoftplus,
  kLn,
  kExp,
  kAddRow,
  kMulRow,
  kBroadcastK,
  kClampMin,
  kSumAll,
  kMeanAll,
  kSumAxis0,
  kMeanAxis0,
  kSoftmaxXent,
};

template <class R>
class Tape;

// Handle into a tape; cheap to copy.
template <class R>
struct Var {
  Tape<R>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<R>& value() const;
  const Tensor<R>& grad() const;
};

// Append-only op record list. Topological order is append order; backward
// walks it once in reverse.
template <class R>
class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    std::array<std::size_t, 2> in{};
    unsigned n_in = 0;
    Tensor<R> value;
    Tensor<R> grad;       // lazily sized; leaf grads persist across backwards
    Tensor<R> aux;        // op-specific saved state (softmax probabilities)
    std::vector<int> labels;
    R scalar{};
    bool requires_grad = false;
    Tensor<R>* grad_sink = nullptr;  // leaves only: external accumulator
    unsigned visits = 0;
  };

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  // Leaves. Parameters pass their grad tensor as sink; inputs and sampled
  // noise pass nothing and get requires_grad only if `needs_grad`.
  Var<R> leaf(Tensor<R> value, Tensor<R>* grad_sink = nullptr,
              bool needs_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(value);
    n.grad_sink = grad_sink;
    n.requires_grad = grad_sink != nullptr || needs_grad;
    return push(std::move(n));
  }

  Var<R> leaf_of(Param<R>& p) { return leaf(p.value, &p.grad); }

  Var<R> matmul(Var<R> a, Var<R> b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
      throw std::invalid_argument("matmul shape mismatch: " + A.shape_str() +
                                  " x " + B.shape_str());
    Node n = interior(Op::kMatmul, a, b);
    n.value = Tensor<R>::zeros({A.shape[0], B.shape[1]});
    gemm<R>(false, false, A.shape[0], B.shape[1], A.shape[1], R{1},
            A.data.data(), A.shape[1], B.data.data(), B.shape[1], R{0},
            n.value.data.data(), B.shape[1]);
    return push(std::move(n));
  }

  // a[N x K] * b[M x K]^T -> [N x M]. Lets weight matrices keep their
  // (out_dim x in_dim) orientation while batches stay row-major.
  Var<R> matmul_bt(Var<R> a, Var<R> b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
      throw std::invalid_argument("matmul_bt shape mismatch: " +
                                  A.shape_str() + " x " + B.shape_str() + "^T");
    Node n = interior(Op::kMatmulBT, a, b);
    n.value = Tensor<R>::zeros({A.shape[0], B.shape[0]});
    gemm<R>(false, true, A.shape[0], B.shape[0], A.shape[1], R{1},
            A.data.data(), A.shape[1], B.data.data(), B.shape[1], R{0},
            n.value.data.data(), B.shape[0]);
    return push(std::move(n));
  }

  Var<R> add(Var<R> a, Var<R> b) {
    check_same(a, b, "add");
    Node n = interior(Op::kAdd, a, b);
    n.value = val(a);
    const auto& B = val(b);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] += B[i];
    return push(std::move(n));
  }

  Var<R> add_scalar(Var<R> a, R s) {
    Node n = interior(Op::kAddScalar, a);
    n.scalar = s;
    n.value = val(a);
    for (auto& v : n.value.data) v += s;
    return push(std::move(n));
  }

  Var<R> mul(Var<R> a, Var<R> b) {
    check_same(a, b, "mul");
    Node n = interior(Op::kMul, a, b);
    n.value = val(a);
    const auto& B = val(b);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= B[i];
    return push(std::move(n));
  }

  Var<R> mul_scalar(Var<R> a, R s) {
    Node n = interior(Op::kMulScalar, a);
    n.scalar = s;
    n.value = val(a);
    for (auto& v : n.value.data) v *= s;
    return push(std::move(n));
  }

  Var<R> neg(Var<R> a) { return mul_scalar(a, R{-1}); }

  Var<R> relu(Var<R> a) {
    Node n = interior(Op::kRelu, a);
    n.value = val(a);
    for (auto& v : n.value.data) v = v > R{0} ? v : R{0};
    return push(std::move(n));
  }

  Var<R> sigmoid(Var<R> a) {
    Node n = interior(Op::kSigmoid, a);
    n.value = val(a);
    for (auto& v : n.value.data)
      v = static_cast<R>(advdrop::sigmoid(static_cast<double>(v)));
    return push(std::move(n));
  }

  Var<R> softplus(Var<R> a) {
    Node n = interior(Op::kSoftplus, a);
    n.value = val(a);
    for (auto& v : n.value.data)
      v = static_cast<R>(advdrop::softplus(static_cast<double>(v)));
    return push(std::move(n));
  }

  Var<R> ln(Var<R> a) {
    Node n = interior(Op::kLn, a);
    n.value = val(a);
    for (auto& v : n.value.data) {
      if (!(v > R{0}))
        throw std::domain_error("ln: non-positive input " +
                                std::to_string(static_cast<double>(v)));
      v = std::log(v);
    }
    return push(std::move(n));
  }

  Var<R> exp(Var<R> a) {
    Node n = interior(Op::kExp, a);
    n.value = val(a);
    for (auto& v : n.value.data) v = std::exp(v);
    return push(std::move(n));
  }

  // matrix[N x K] + row[K], broadcast over rows (bias application).
  Var<R> add_row(Var<R> m, Var<R> v) {
    check_row(m, v, "add_row");
    Node n = interior(Op::kAddRow, m, v);
    n.value = val(m);
    const auto& V = val(v);
    const std::size_t K = V.numel();
    for (std::size_t i = 0; i < n.value.rows(); ++i)
      for (std::size_t j = 0; j < K; ++j) n.value.data[i * K + j] += V[j];
    return push(std::move(n));
  }

  // matrix[N x K] * row[K] elementwise per row (mask/scale application).
  Var<R> mul_row(Var<R> m, Var<R> v) {
    check_row(m, v, "mul_row");
    Node n = interior(Op::kMulRow, m, v);
    n.value = val(m);
    const auto& V = val(v);
    const std::size_t K = V.numel();
    for (std::size_t i = 0; i < n.value.rows(); ++i)
      for (std::size_t j = 0; j < K; ++j) n.value.data[i * K + j] *= V[j];
    return push(std::move(n));
  }

  // scalar -> constant vector of length k (backward sums).
  Var<R> broadcast_k(Var<R> s, std::size_t k) {
    if (val(s).numel() != 1)
      throw std::invalid_argument("broadcast_k: input must be scalar");
    Node n = interior(Op::kBroadcastK, s);
    n.value = Tensor<R>::full({k}, val(s)[0]);
    return push(std::move(n));
  }

  // max(a, floor); subgradient passes only where a > floor.
  Var<R> clamp_min(Var<R> a, R floor) {
    Node n = interior(Op::kClampMin, a);
    n.scalar = floor;
    n.value = val(a);
    for (auto& v : n.value.data) v = v > floor ? v : floor;
    return push(std::move(n));
  }

  Var<R> sum_all(Var<R> a) {
    Node n = interior(Op::kSumAll, a);
    R acc{0};
    for (R v : val(a).data) acc += v;
    n.value = Tensor<R>::scalar(acc);
    return push(std::move(n));
  }

  Var<R> mean_all(Var<R> a) {
    Node n = interior(Op::kMeanAll, a);
    R acc{0};
    for (R v : val(a).data) acc += v;
    n.value = Tensor<R>::scalar(acc / static_cast<R>(val(a).numel()));
    return push(std::move(n));
  }

  Var<R> sum_axis0(Var<R> a) { return reduce0(a, Op::kSumAxis0); }
  Var<R> mean_axis0(Var<R> a) { return reduce0(a, Op::kMeanAxis0); }

  // Mean over the batch of -log softmax(logits)[label]; max-stabilized.
  // Saves the softmax matrix for backward.
  Var<R> softmax_xent(Var<R> logits, const std::vector<int>& labels) {
    const auto& L = val(logits);
    if (L.shape.size() != 2)
      throw std::invalid_argument("softmax_xent: logits must be 2-D");
    const std::size_t N = L.shape[0], C = L.shape[1];
    if (labels.size() != N)
      throw std::invalid_argument("softmax_xent: batch/label count mismatch");
    Node n = interior(Op::kSoftmaxXent, logits);
    n.labels = labels;
    n.aux = Tensor<R>::zeros({N, C});
    double loss = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
        throw std::out_of_range("softmax_xent: label " +
                                std::to_string(labels[i]) + " outside [0," +
                                std::to_string(C) + ")");
      R mx = L(i, 0);
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, L(i, c));
      double denom = 0;
      for (std::size_t c = 0; c < C; ++c)
        denom += std::exp(static_cast<double>(L(i, c) - mx));
      for (std::size_t c = 0; c < C; ++c)
        n.aux(i, c) = static_cast<R>(
            std::exp(static_cast<double>(L(i, c) - mx)) / denom);
      loss += std::log(denom) -
              static_cast<double>(L(i, static_cast<std::size_t>(labels[i])) - mx);
    }
    n.value = Tensor<R>::scalar(static_cast<R>(loss / static_cast<double>(N)));
    return push(std::move(n));
  }

  // Reverse-mode sweep from a scalar loss. Interior grads are reset per
  // call; leaf grads persist and external sinks accumulate, so repeated
  // calls add another copy of dLoss/dLeaf.
  void backward(Var<R> loss) {
    if (loss.tape != this)
      throw std::invalid_argument("backward: loss from another tape");
    if (val(loss).numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) {
      n.visits = 0;
      if (n.op != Op::kLeaf)
        n.grad = Tensor<R>{};
      else if (n.requires_grad && n.grad.data.empty())
        n.grad = Tensor<R>::zeros(n.value.shape);
    }
    grad_of(loss.id)[0] += R{1};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      ++n.visits;
      if (!n.requires_grad || n.grad.data.empty()) continue;
      propagate(i);
    }
    for (auto& n : nodes_)
      if (n.op == Op::kLeaf && n.grad_sink && !n.grad.data.empty()) {
        for (std::size_t i = 0; i < n.grad.numel(); ++i)
          n.grad_sink->data[i] += n.grad[i];
        n.grad.fill(R{0});  // delivered; keep local accumulator clean
      }
  }

  // Every node is touched exactly once per backward; tests verify.
  bool visited_each_once() const {
    for (const auto& n : nodes_)
      if (n.visits != 1) return false;
    return true;
  }

 private:
  std::vector<Node> nodes_;

  const Tensor<R>& val(Var<R> v) const { return nodes_[v.id].value; }

  Tensor<R>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor<R>::zeros(n.value.shape);
    return n.grad;
  }

  Node interior(Op op, Var<R> a) {
    require_mine(a);
    Node n;
    n.op = op;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.requires_grad = nodes_[a.id].requires_grad;
    return n;
  }

  Node interior(Op op, Var<R> a, Var<R> b) {
    require_mine(a);
    require_mine(b);
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    n.n_in = 2;
    n.requires_grad =
        nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    return n;
  }

  void require_mine(Var<R> v) {
    if (v.tape != this)
      throw std::invalid_argument("op: input from another tape");
  }

  void check_same(Var<R> a, Var<R> b, const char* what) {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(what) + " shape mismatch: " +
                                  val(a).shape_str() + " vs " +
                                  val(b).shape_str());
  }

  void check_row(Var<R> m, Var<R> v, const char* what) {
    if (val(m).shape.size() != 2 || val(v).shape.size() != 1 ||
        val(m).shape[1] != val(v).shape[0])
      throw std::invalid_argument(std::string(what) + " shape mismatch: " +
                                  val(m).shape_str() + " vs " +
                                  val(v).shape_str());
  }

  Var<R> reduce0(Var<R> a, Op op) {
    if (val(a).shape.size() != 2)
      throw std::invalid_argument("axis-0 reduce: input must be 2-D");
    Node n = interior(op, a);
    const auto& A = val(a);
    const std::size_t N = A.shape[0], K = A.shape[1];
    n.value = Tensor<R>::zeros({K});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < K; ++j) n.value[j] += A(i, j);
    if (op == Op::kMeanAxis0)
      for (auto& v : n.value.data) v /= static_cast<R>(N);
    return push(std::move(n));
  }

  Var<R> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<R>{this, nodes_.size() - 1};
  }

  void accum(std::size_t id, const Tensor<R>& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor<R>& dst = grad_of(id);
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
  }

  void propagate(std::size_t i) {
    Node& n = nodes_[i];
    const Tensor<R>& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        Node& a = nodes_[n.in[0]];
        Node& b = nodes_[n.in[1]];
        const std::size_t M = a.value.shape[0], K = a.value.shape[1],
                          N = b.value.shape[1];
        if (a.requires_grad) {
          Tensor<R>& ga = grad_of(n.in[0]);
          gemm<R>(false, true, M, K, N, R{1}, g.data.data(), N,
                  b.value.data.data(), N, R{1}, ga.data.data(), K);
        }
        if (b.requires_grad) {
          Tensor<R>& gb = grad_of(n.in[1]);
          gemm<R>(true, false, K, N, M, R{1}, a.value.data.data(), K,
                  g.data.data(), N, R{1}, gb.data.data(), N);
        }
        break;
      }
      case Op::kMatmulBT: {
        Node& a = nodes_[n.in[0]];
        Node& b = nodes_[n.in[1]];
        const std::size_t N = a.value.shape[0], K = a.value.shape[1],
                          M = b.value.shape[0];
        if (a.requires_grad) {
          Tensor<R>& ga = grad_of(n.in[0]);
          gemm<R>(false, false, N, K, M, R{1}, g.data.data(), M,
                  b.value.data.data(), K, R{1}, ga.data.data(), K);
        }
        if (b.requires_grad) {
          Tensor<R>& gb = grad_of(n.in[1]);
          gemm<R>(true, false, M, K, N, R{1}, g.data.data(), M,
                  a.value.data.data(), K, R{1}, gb.data.data(), K);
        }
        break;
      }
      case Op::kAdd:
        accum(n.in[0], g);
        accum(n.in[1], g);
        break;
      case Op::kAddScalar:
        accum(n.in[0], g);
        break;
      case Op::kMul: {
        const Tensor<R>& A = nodes_[n.in[0]].value;
        const Tensor<R>& B = nodes_[n.in[1]].value;
        if (nodes_[n.in[0]].requires_grad) {
          Tensor<R>& ga = grad_of(n.in[0]);
          for (std::size_t j = 0; j < g.numel(); ++j) ga[j] += g[j] * B[j];
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor<R>& gb = grad_of(n.in[1]);
          for (std::size_t j = 0; j < g.numel(); ++j) gb[j] += g[j] * A[j];
        }
        break;
      }
      case Op::kMulScalar: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j) ga[j] += g[j] * n.scalar;
        break;
      }
      case Op::kRelu: {
        if (!nodes_[n.in[0]].requires_grad) break;
        const Tensor<R>& x = nodes_[n.in[0]].value;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j)
          if (x[j] > R{0}) ga[j] += g[j];
        break;
      }
      case Op::kSigmoid: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j) {
          const R s = n.value[j];
          ga[j] += g[j] * s * (R{1} - s);
        }
        break;
      }
      case Op::kSoftplus: {
        if (!nodes_[n.in[0]].requires_grad) break;
        const Tensor<R>& x = nodes_[n.in[0]].value;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j)
          ga[j] += g[j] * static_cast<R>(advdrop::sigmoid(
                              static_cast<double>(x[j])));
        break;
      }
      case Op::kLn: {
        if (!nodes_[n.in[0]].requires_grad) break;
        const Tensor<R>& x = nodes_[n.in[0]].value;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j) ga[j] += g[j] / x[j];
        break;
      }
      case Op::kExp: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j)
          ga[j] += g[j] * n.value[j];
        break;
      }
      case Op::kAddRow: {
        accum(n.in[0], g);
        if (!nodes_[n.in[1]].requires_grad) break;
        Tensor<R>& gv = grad_of(n.in[1]);
        const std::size_t K = gv.numel();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < K; ++j) gv[j] += g.data[r * K + j];
        break;
      }
      case Op::kMulRow: {
        const Tensor<R>& M = nodes_[n.in[0]].value;
        const Tensor<R>& V = nodes_[n.in[1]].value;
        const std::size_t K = V.numel();
        if (nodes_[n.in[0]].requires_grad) {
          Tensor<R>& gm = grad_of(n.in[0]);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < K; ++j)
              gm.data[r * K + j] += g.data[r * K + j] * V[j];
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor<R>& gv = grad_of(n.in[1]);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < K; ++j)
              gv[j] += g.data[r * K + j] * M.data[r * K + j];
        }
        break;
      }
      case Op::kBroadcastK: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& gs = grad_of(n.in[0]);
        R acc{0};
        for (R v : g.data) acc += v;
        gs[0] += acc;
        break;
      }
      case Op::kClampMin: {
        if (!nodes_[n.in[0]].requires_grad) break;
        const Tensor<R>& x = nodes_[n.in[0]].value;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (std::size_t j = 0; j < g.numel(); ++j)
          if (x[j] > n.scalar) ga[j] += g[j];
        break;
      }
      case Op::kSumAll: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        for (auto& v : ga.data) v += g[0];
        break;
      }
      case Op::kMeanAll: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        const R w = g[0] / static_cast<R>(ga.numel());
        for (auto& v : ga.data) v += w;
        break;
      }
      case Op::kSumAxis0:
      case Op::kMeanAxis0: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& ga = grad_of(n.in[0]);
        const std::size_t N = ga.rows(), K = ga.cols();
        const R w = n.op == Op::kMeanAxis0
                        ? R{1} / static_cast<R>(N)
                        : R{1};
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t j = 0; j < K; ++j)
            ga.data[r * K + j] += g[j] * w;
        break;
      }
      case Op::kSoftmaxXent: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<R>& gl = grad_of(n.in[0]);
        const std::size_t N = gl.rows(), C = gl.cols();
        const R w = g[0] / static_cast<R>(N);
        for (std::size_t r = 0; r < N; ++r) {
          for (std::size_t c = 0; c < C; ++c)
            gl(r, c) += w * n.aux(r, c);
          gl(r, static_cast<std::size_t>(n.labels[r])) -= w;
        }
        break;
      }
    }
  }

  friend struct Var<R>;
};

template <class R>
const Tensor<R>& Var<R>::value() const {
  return tape->node(id).value;
}

template <class R>
const Tensor<R>& Var<R>::grad() const {
  return tape->node(id).grad;
}

}  // namespace advdrop
