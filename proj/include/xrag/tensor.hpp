#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "xrag/errors.hpp"

namespace xrag {

// ---------------------------------------------------------------------------
// Operation counters.
//
// Every matrix product reports its multiply count into a thread-local set of
// counters, bucketed by what kind of work it is. Elementwise work (layer
// norm, softmax, activations) is not counted; matrix products dominate and
// the analytic cost model is calibrated against the same convention, so the
// convention only has to be consistent. Counting happens when an op is first
// built, never during tape replay or backward, so gradient checking does not
// disturb measurements.
// ---------------------------------------------------------------------------

enum class CostCategory { Dense, Attention, Expert, Search };

struct OpCounters {
  std::uint64_t dense_mults = 0;
  std::uint64_t attention_mults = 0;
  std::uint64_t expert_mults = 0;
  std::uint64_t search_mults = 0;
  // Parameter elements touched by forward ops; with a single input token this
  // equals the active parameter count of the model.
  std::uint64_t param_elements = 0;

  void reset() { *this = OpCounters{}; }

  std::uint64_t& mults(CostCategory c) {
    switch (c) {
      case CostCategory::Dense: return dense_mults;
      case CostCategory::Attention: return attention_mults;
      case CostCategory::Expert: return expert_mults;
      case CostCategory::Search: return search_mults;
    }
    return dense_mults;
  }

  std::uint64_t generator_mults() const {
    return dense_mults + attention_mults + expert_mults;
  }
  std::uint64_t total_mults() const { return generator_mults() + search_mults; }
};

inline OpCounters& counters() {
  thread_local OpCounters c;
  return c;
}

inline CostCategory& current_category() {
  thread_local CostCategory cat = CostCategory::Dense;
  return cat;
}

// Scoped category switch: work recorded inside the scope lands in `c`.
class CategoryScope {
 public:
  explicit CategoryScope(CostCategory c) : prev_(current_category()) {
    current_category() = c;
  }
  ~CategoryScope() { current_category() = prev_; }
  CategoryScope(const CategoryScope&) = delete;
  CategoryScope& operator=(const CategoryScope&) = delete;

 private:
  CostCategory prev_;
};

// ---------------------------------------------------------------------------
// Tensors: 2-D row-major f64 matrices with a gradient buffer.
// ---------------------------------------------------------------------------

struct TensorNode {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_param = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols) {
    return filled(rows, cols, 0.0);
  }

  static Tensor filled(int rows, int cols, double v) {
    check_dims(rows, cols);
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->rows = rows;
    t.node_->cols = cols;
    t.node_->value.assign(static_cast<std::size_t>(rows) * cols, v);
    t.node_->grad.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    return t;
  }

  static Tensor from(int rows, int cols, std::vector<double> v) {
    check_dims(rows, cols);
    if (v.size() != static_cast<std::size_t>(rows) * cols)
      throw ShapeError("tensor init: " + std::to_string(v.size()) +
                       " values for " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    Tensor t = zeros(rows, cols);
    t.node_->value = std::move(v);
    return t;
  }

  // A trainable leaf: gradients accumulate here and checkpoints persist it.
  static Tensor param(int rows, int cols, std::vector<double> v) {
    Tensor t = from(rows, cols, std::move(v));
    t.node_->requires_grad = true;
    t.node_->is_param = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  double at(int r, int c) const {
    return node_->value[static_cast<std::size_t>(r) * node_->cols + c];
  }
  double& at(int r, int c) {
    return node_->value[static_cast<std::size_t>(r) * node_->cols + c];
  }
  double item() const {
    if (rows() != 1 || cols() != 1)
      throw ContractError("item() on non-scalar tensor");
    return node_->value[0];
  }

  std::vector<double>& value() { return node_->value; }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  bool is_param() const { return node_->is_param; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  static void check_dims(int rows, int cols) {
    if (rows <= 0 || cols <= 0)
      throw ShapeError("tensor dims must be positive, got " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }

  std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape: records each differentiable op as a pair of closures.
//
// backward() runs the recorded ops in reverse, accumulating into grad
// buffers. replay() reruns the forward kernels in order against the current
// leaf values, which is what finite-difference checking perturbs; every op
// that can change under a leaf perturbation is on the tape, and ops that are
// not recorded have constant inputs, so replay reproduces the full forward.
// ---------------------------------------------------------------------------

class Tape {
 public:
  void record(std::function<void()> forward, std::function<void()> backward) {
    ops_.push_back({std::move(forward), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    if (backward_done_)
      throw ContractError("tape backward called twice");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw ContractError("backward root must be 1x1, got " +
                          std::to_string(loss.rows()) + "x" +
                          std::to_string(loss.cols()));
    backward_done_ = true;
    loss.node()->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  void replay() {
    for (auto& op : ops_) op.forward();
  }

  std::size_t size() const { return ops_.size(); }

 private:
  struct Op {
    std::function<void()> forward;
    std::function<void()> backward;
  };
  std::vector<Op> ops_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Op helpers.
// ---------------------------------------------------------------------------

namespace detail {

using NodePtr = std::shared_ptr<TensorNode>;

inline std::string shape_str(const NodePtr& n) {
  return std::to_string(n->rows) + "x" + std::to_string(n->cols);
}

inline void touch_param(const NodePtr& n) {
  if (n->is_param) counters().param_elements += n->value.size();
}

inline bool wants_grad(std::initializer_list<NodePtr> inputs) {
  for (const auto& n : inputs)
    if (n->requires_grad) return true;
  return false;
}

// out(m,n) = op_a(A) * op_b(B); transposed inputs are read in place.
inline void matmul_kernel(const NodePtr& a, const NodePtr& b,
                          const NodePtr& out, bool trans_a, bool trans_b) {
  const int m = out->rows, n = out->cols;
  const int k = trans_a ? a->rows : a->cols;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a->value[static_cast<std::size_t>(p) * a->cols + i]
                                  : a->value[static_cast<std::size_t>(i) * a->cols + p];
        const double bv = trans_b ? b->value[static_cast<std::size_t>(j) * b->cols + p]
                                  : b->value[static_cast<std::size_t>(p) * b->cols + j];
        acc += av * bv;
      }
      out->value[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
}

// grad(target) += op_a(A) * op_b(B), reading value or grad per operand.
// Used to express the eight matmul backward cases with one kernel.
inline void matmul_accum(const std::vector<double>& a, int a_rows, int a_cols,
                         const std::vector<double>& b, int b_rows, int b_cols,
                         bool trans_a, bool trans_b, std::vector<double>& out,
                         int m, int n) {
  (void)a_rows;
  (void)b_rows;
  const int k = trans_a ? a_rows : a_cols;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[static_cast<std::size_t>(p) * a_cols + i]
                                  : a[static_cast<std::size_t>(i) * a_cols + p];
        const double bv = trans_b ? b[static_cast<std::size_t>(j) * b_cols + p]
                                  : b[static_cast<std::size_t>(p) * b_cols + j];
        acc += av * bv;
      }
      out[static_cast<std::size_t>(i) * n + j] += acc;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op set. Each op validates shapes, computes its result, reports its work,
// and (when a tape is given and an input carries gradient) records replay and
// backward closures. Ops never mutate their inputs.
// ---------------------------------------------------------------------------

// C = op_a(A) * op_b(B). The transpose flags read the operand transposed in
// place; this is also how weight tying shares one matrix between embedding
// lookup and output projection.
inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr,
                     bool trans_a = false, bool trans_b = false) {
  const int m = trans_a ? a.cols() : a.rows();
  const int ka = trans_a ? a.rows() : a.cols();
  const int kb = trans_b ? b.cols() : b.rows();
  const int n = trans_b ? b.rows() : b.cols();
  if (ka != kb)
    throw ShapeError("matmul inner dims: " + detail::shape_str(a.node()) +
                     (trans_a ? "^T" : "") + " * " +
                     detail::shape_str(b.node()) + (trans_b ? "^T" : ""));
  Tensor out = Tensor::zeros(m, n);
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::matmul_kernel(an, bn, on, trans_a, trans_b);

  counters().mults(current_category()) +=
      static_cast<std::uint64_t>(m) * ka * n;
  detail::touch_param(an);
  detail::touch_param(bn);

  on->requires_grad = detail::wants_grad({an, bn});
  if (tape && on->requires_grad) {
    tape->record(
        [an, bn, on, trans_a, trans_b] {
          detail::matmul_kernel(an, bn, on, trans_a, trans_b);
        },
        [an, bn, on, trans_a, trans_b, m, n, ka] {
          if (an->requires_grad) {
            if (!trans_a)
              detail::matmul_accum(on->grad, m, n, bn->value, bn->rows,
                                   bn->cols, false, !trans_b, an->grad, m, ka);
            else
              detail::matmul_accum(bn->value, bn->rows, bn->cols, on->grad, m,
                                   n, trans_b, true, an->grad, ka, m);
          }
          if (bn->requires_grad) {
            if (!trans_b)
              detail::matmul_accum(an->value, an->rows, an->cols, on->grad, m,
                                   n, !trans_a, false, bn->grad, ka, n);
            else
              detail::matmul_accum(on->grad, m, n, an->value, an->rows,
                                   an->cols, true, trans_a, bn->grad, n, ka);
          }
        });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add shapes: " + detail::shape_str(a.node()) + " vs " +
                     detail::shape_str(b.node()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), bn = b.node(), on = out.node();
  auto kernel = [an, bn, on] {
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = an->value[i] + bn->value[i];
  };
  kernel();
  detail::touch_param(an);
  detail::touch_param(bn);
  on->requires_grad = detail::wants_grad({an, bn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// Broadcasts a 1xN row over every row of a. Bias application.
inline Tensor add_row(const Tensor& a, const Tensor& row,
                      Tape* tape = nullptr) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: " + detail::shape_str(a.node()) + " + " +
                     detail::shape_str(row.node()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), rn = row.node(), on = out.node();
  auto kernel = [an, rn, on] {
    const int n = on->cols;
    for (int i = 0; i < on->rows; ++i)
      for (int j = 0; j < n; ++j)
        on->value[static_cast<std::size_t>(i) * n + j] =
            an->value[static_cast<std::size_t>(i) * n + j] + rn->value[j];
  };
  kernel();
  detail::touch_param(an);
  detail::touch_param(rn);
  on->requires_grad = detail::wants_grad({an, rn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, rn, on] {
      const int n = on->cols;
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      if (rn->requires_grad)
        for (int i = 0; i < on->rows; ++i)
          for (int j = 0; j < n; ++j)
            rn->grad[j] += on->grad[static_cast<std::size_t>(i) * n + j];
    });
  }
  return out;
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul shapes: " + detail::shape_str(a.node()) + " vs " +
                     detail::shape_str(b.node()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), bn = b.node(), on = out.node();
  auto kernel = [an, bn, on] {
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = an->value[i] * bn->value[i];
  };
  kernel();
  on->requires_grad = detail::wants_grad({an, bn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

// Multiplies every element of a by the 1x1 tensor s.
inline Tensor scale(const Tensor& a, const Tensor& s, Tape* tape = nullptr) {
  if (s.rows() != 1 || s.cols() != 1)
    throw ShapeError("scale factor must be 1x1, got " +
                     detail::shape_str(s.node()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), sn = s.node(), on = out.node();
  auto kernel = [an, sn, on] {
    const double f = sn->value[0];
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = an->value[i] * f;
  };
  kernel();
  on->requires_grad = detail::wants_grad({an, sn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, sn, on] {
      if (an->requires_grad) {
        const double f = sn->value[0];
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * f;
      }
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          acc += on->grad[i] * an->value[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

// Row i of a is multiplied by w(i, 0).
inline Tensor scale_rows(const Tensor& a, const Tensor& w,
                         Tape* tape = nullptr) {
  if (w.cols() != 1 || w.rows() != a.rows())
    throw ShapeError("scale_rows: " + detail::shape_str(a.node()) +
                     " scaled by " + detail::shape_str(w.node()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), wn = w.node(), on = out.node();
  auto kernel = [an, wn, on] {
    const int n = on->cols;
    for (int i = 0; i < on->rows; ++i) {
      const double f = wn->value[i];
      for (int j = 0; j < n; ++j)
        on->value[static_cast<std::size_t>(i) * n + j] =
            an->value[static_cast<std::size_t>(i) * n + j] * f;
    }
  };
  kernel();
  on->requires_grad = detail::wants_grad({an, wn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, wn, on] {
      const int n = on->cols;
      for (int i = 0; i < on->rows; ++i) {
        const double f = wn->value[i];
        double acc = 0.0;
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          if (an->requires_grad) an->grad[idx] += on->grad[idx] * f;
          acc += on->grad[idx] * an->value[idx];
        }
        if (wn->requires_grad) wn->grad[i] += acc;
      }
    });
  }
  return out;
}

// Multiplies by a compile-time-known constant.
inline Tensor cmul(const Tensor& a, double c, Tape* tape = nullptr) {
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), on = out.node();
  auto kernel = [an, on, c] {
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = an->value[i] * c;
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on, c] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& a, Tape* tape = nullptr) {
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), on = out.node();
  auto kernel = [an, on] {
    const int n = on->cols;
    for (int i = 0; i < on->rows; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * n;
      double mx = an->value[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, an->value[base + j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        const double e = std::exp(an->value[base + j] - mx);
        on->value[base + j] = e;
        sum += e;
      }
      for (int j = 0; j < n; ++j) on->value[base + j] /= sum;
    }
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on] {
      const int n = on->cols;
      for (int i = 0; i < on->rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j)
          dot += on->grad[base + j] * on->value[base + j];
        for (int j = 0; j < n; ++j)
          an->grad[base + j] +=
              on->value[base + j] * (on->grad[base + j] - dot);
      }
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a, Tape* tape = nullptr) {
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), on = out.node();
  auto kernel = [an, on] {
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = 1.0 / (1.0 + std::exp(-an->value[i]));
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double s = on->value[i];
        an->grad[i] += on->grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a, Tape* tape = nullptr) {
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), on = out.node();
  auto kernel = [an, on] {
    for (std::size_t i = 0; i < on->value.size(); ++i)
      on->value[i] = an->value[i] > 0.0 ? an->value[i] : 0.0;
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// Per-row normalization to zero mean and unit variance, then a learned
// elementwise gain and bias. Variance uses the population convention.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain,
                         const Tensor& bias, Tape* tape = nullptr,
                         double eps = 1e-5) {
  if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 ||
      bias.cols() != a.cols())
    throw ShapeError("layer_norm params must be 1x" + std::to_string(a.cols()));
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  auto an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node();
  auto kernel = [an, gn, bn, on, eps] {
    const int n = on->cols;
    for (int i = 0; i < on->rows; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * n;
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += an->value[base + j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        const double d = an->value[base + j] - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < n; ++j)
        on->value[base + j] =
            (an->value[base + j] - mean) * inv * gn->value[j] + bn->value[j];
    }
  };
  kernel();
  detail::touch_param(gn);
  detail::touch_param(bn);
  on->requires_grad = detail::wants_grad({an, gn, bn});
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, gn, bn, on, eps] {
      const int n = on->cols;
      for (int i = 0; i < on->rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += an->value[base + j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
          const double d = an->value[base + j] - mean;
          var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        // dxhat carries the gain; the two means remove the components that
        // would shift the row mean or variance.
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xhat = (an->value[base + j] - mean) * inv;
          const double dxhat = on->grad[base + j] * gn->value[j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
          if (gn->requires_grad) gn->grad[j] += on->grad[base + j] * xhat;
          if (bn->requires_grad) bn->grad[j] += on->grad[base + j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        if (an->requires_grad) {
          for (int j = 0; j < n; ++j) {
            const double xhat = (an->value[base + j] - mean) * inv;
            const double dxhat = on->grad[base + j] * gn->value[j];
            an->grad[base + j] +=
                (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
          }
        }
      }
    });
  }
  return out;
}

// Stacks the table rows named by ids.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids,
                             Tape* tape = nullptr) {
  if (ids.empty()) throw ContractError("embedding_rows with no ids");
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw ContractError("embedding id " + std::to_string(id) +
                          " outside table of " + std::to_string(table.rows()) +
                          " rows");
  Tensor out = Tensor::zeros(static_cast<int>(ids.size()), table.cols());
  auto tn = table.node(), on = out.node();
  auto kernel = [tn, on, ids] {
    const int n = on->cols;
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(tn->value.begin() + static_cast<std::size_t>(ids[i]) * n, n,
                  on->value.begin() + i * n);
  };
  kernel();
  if (tn->is_param)
    counters().param_elements +=
        static_cast<std::uint64_t>(ids.size()) * table.cols();
  on->requires_grad = tn->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [tn, on, ids] {
      const int n = on->cols;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < n; ++j)
          tn->grad[static_cast<std::size_t>(ids[i]) * n + j] +=
              on->grad[i * n + j];
    });
  }
  return out;
}

// Mean negative log-likelihood of the target class per row, over rows whose
// target is not -1. A target of -1 marks the row as unscored.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int>& targets,
                            Tape* tape = nullptr) {
  if (static_cast<int>(targets.size()) != logits.rows())
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(logits.rows()) +
                     " rows");
  int scored = 0;
  for (int t : targets) {
    if (t < -1 || t >= logits.cols())
      throw ContractError("cross_entropy target " + std::to_string(t) +
                          " outside [0, " + std::to_string(logits.cols()) +
                          ")");
    if (t >= 0) ++scored;
  }
  if (scored == 0) throw ContractError("cross_entropy with no scored rows");
  Tensor out = Tensor::zeros(1, 1);
  auto ln = logits.node(), on = out.node();
  auto kernel = [ln, on, targets, scored] {
    const int n = ln->cols;
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] < 0) continue;
      const std::size_t base = i * n;
      double mx = ln->value[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, ln->value[base + j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) sum += std::exp(ln->value[base + j] - mx);
      total -= ln->value[base + targets[i]] - mx - std::log(sum);
    }
    on->value[0] = total / scored;
  };
  kernel();
  on->requires_grad = ln->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [ln, on, targets, scored] {
      const int n = ln->cols;
      const double g = on->grad[0] / scored;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0) continue;
        const std::size_t base = i * n;
        double mx = ln->value[base];
        for (int j = 1; j < n; ++j) mx = std::max(mx, ln->value[base + j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(ln->value[base + j] - mx);
        for (int j = 0; j < n; ++j) {
          const double p = std::exp(ln->value[base + j] - mx) / sum;
          ln->grad[base + j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// Contiguous block [r0, r1) x [c0, c1).
inline Tensor slice(const Tensor& a, int r0, int r1, int c0, int c1,
                    Tape* tape = nullptr) {
  if (r0 < 0 || c0 < 0 || r1 > a.rows() || c1 > a.cols() || r0 >= r1 ||
      c0 >= c1)
    throw ShapeError("slice [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") of " +
                     detail::shape_str(a.node()));
  Tensor out = Tensor::zeros(r1 - r0, c1 - c0);
  auto an = a.node(), on = out.node();
  auto kernel = [an, on, r0, c0] {
    for (int i = 0; i < on->rows; ++i)
      for (int j = 0; j < on->cols; ++j)
        on->value[static_cast<std::size_t>(i) * on->cols + j] =
            an->value[static_cast<std::size_t>(i + r0) * an->cols + (j + c0)];
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on, r0, c0] {
      for (int i = 0; i < on->rows; ++i)
        for (int j = 0; j < on->cols; ++j)
          an->grad[static_cast<std::size_t>(i + r0) * an->cols + (j + c0)] +=
              on->grad[static_cast<std::size_t>(i) * on->cols + j];
    });
  }
  return out;
}

// Vertical stack; all inputs share a column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts,
                          Tape* tape = nullptr) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  int rows = 0;
  const int cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw ShapeError("concat_rows column mismatch: " +
                       std::to_string(p.cols()) + " vs " +
                       std::to_string(cols));
    rows += p.rows();
  }
  Tensor out = Tensor::zeros(rows, cols);
  auto on = out.node();
  std::vector<detail::NodePtr> nodes;
  nodes.reserve(parts.size());
  bool grad = false;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    grad = grad || p.node()->requires_grad;
  }
  auto kernel = [nodes, on] {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      std::copy(n->value.begin(), n->value.end(), on->value.begin() + off);
      off += n->value.size();
    }
  };
  kernel();
  on->requires_grad = grad;
  if (tape && grad) {
    tape->record(kernel, [nodes, on] {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad)
          for (std::size_t i = 0; i < n->value.size(); ++i)
            n->grad[i] += on->grad[off + i];
        off += n->value.size();
      }
    });
  }
  return out;
}

// Horizontal stack; all inputs share a row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts,
                          Tape* tape = nullptr) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  int cols = 0;
  const int rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat_cols row mismatch: " + std::to_string(p.rows()) +
                       " vs " + std::to_string(rows));
    cols += p.cols();
  }
  Tensor out = Tensor::zeros(rows, cols);
  auto on = out.node();
  std::vector<detail::NodePtr> nodes;
  nodes.reserve(parts.size());
  bool grad = false;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    grad = grad || p.node()->requires_grad;
  }
  auto kernel = [nodes, on, rows] {
    int coff = 0;
    for (const auto& n : nodes) {
      for (int i = 0; i < rows; ++i)
        std::copy_n(n->value.begin() + static_cast<std::size_t>(i) * n->cols,
                    n->cols,
                    on->value.begin() + static_cast<std::size_t>(i) * on->cols +
                        coff);
      coff += n->cols;
    }
  };
  kernel();
  on->requires_grad = grad;
  if (tape && grad) {
    tape->record(kernel, [nodes, on, rows] {
      int coff = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad)
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < n->cols; ++j)
              n->grad[static_cast<std::size_t>(i) * n->cols + j] +=
                  on->grad[static_cast<std::size_t>(i) * on->cols + coff + j];
        coff += n->cols;
      }
    });
  }
  return out;
}

// Gathers rows of a at idx (repeats allowed). Expert dispatch.
inline Tensor take_rows(const Tensor& a, const std::vector<int>& idx,
                        Tape* tape = nullptr) {
  if (idx.empty()) throw ContractError("take_rows with no indices");
  for (int i : idx)
    if (i < 0 || i >= a.rows())
      throw ContractError("take_rows index " + std::to_string(i) +
                          " outside " + detail::shape_str(a.node()));
  Tensor out = Tensor::zeros(static_cast<int>(idx.size()), a.cols());
  auto an = a.node(), on = out.node();
  auto kernel = [an, on, idx] {
    const int n = on->cols;
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(an->value.begin() + static_cast<std::size_t>(idx[i]) * n, n,
                  on->value.begin() + i * n);
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on, idx] {
      const int n = on->cols;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<std::size_t>(idx[i]) * n + j] +=
              on->grad[i * n + j];
    });
  }
  return out;
}

// Places src row i at position idx[i] of a total_rows-tall zero matrix,
// accumulating on repeats. Inverse of take_rows for expert combine.
inline Tensor scatter_rows(const Tensor& src, const std::vector<int>& idx,
                           int total_rows, Tape* tape = nullptr) {
  if (static_cast<int>(idx.size()) != src.rows())
    throw ShapeError("scatter_rows: " + std::to_string(idx.size()) +
                     " indices for " + std::to_string(src.rows()) + " rows");
  for (int i : idx)
    if (i < 0 || i >= total_rows)
      throw ContractError("scatter_rows index " + std::to_string(i) +
                          " outside " + std::to_string(total_rows) + " rows");
  Tensor out = Tensor::zeros(total_rows, src.cols());
  auto sn = src.node(), on = out.node();
  auto kernel = [sn, on, idx] {
    std::fill(on->value.begin(), on->value.end(), 0.0);
    const int n = on->cols;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < n; ++j)
        on->value[static_cast<std::size_t>(idx[i]) * n + j] +=
            sn->value[i * n + j];
  };
  kernel();
  on->requires_grad = sn->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [sn, on, idx] {
      const int n = on->cols;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < n; ++j)
          sn->grad[i * n + j] +=
              on->grad[static_cast<std::size_t>(idx[i]) * n + j];
    });
  }
  return out;
}

// Picks single entries a(row_idx[i], col_idx[i]) into an Nx1 column.
// Pulls each token's selected router scores out for the combine softmax.
inline Tensor gather_entries(const Tensor& a, const std::vector<int>& row_idx,
                             const std::vector<int>& col_idx,
                             Tape* tape = nullptr) {
  if (row_idx.size() != col_idx.size() || row_idx.empty())
    throw ContractError("gather_entries needs matching nonempty index lists");
  for (std::size_t i = 0; i < row_idx.size(); ++i)
    if (row_idx[i] < 0 || row_idx[i] >= a.rows() || col_idx[i] < 0 ||
        col_idx[i] >= a.cols())
      throw ContractError("gather_entries index (" +
                          std::to_string(row_idx[i]) + "," +
                          std::to_string(col_idx[i]) + ") outside " +
                          detail::shape_str(a.node()));
  Tensor out = Tensor::zeros(static_cast<int>(row_idx.size()), 1);
  auto an = a.node(), on = out.node();
  auto kernel = [an, on, row_idx, col_idx] {
    for (std::size_t i = 0; i < row_idx.size(); ++i)
      on->value[i] =
          an->value[static_cast<std::size_t>(row_idx[i]) * an->cols +
                    col_idx[i]];
  };
  kernel();
  on->requires_grad = an->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(kernel, [an, on, row_idx, col_idx] {
      for (std::size_t i = 0; i < row_idx.size(); ++i)
        an->grad[static_cast<std::size_t>(row_idx[i]) * an->cols +
                 col_idx[i]] += on->grad[i];
    });
  }
  return out;
}

// Hard gate with a straight-through backward: the forward value is the fixed
// 0/1 decision, the gradient passes to p unchanged. On replay the output
// tracks p's movement around the recorded point, so a finite difference of
// the replayed graph sees exactly the identity Jacobian the backward uses.
inline Tensor straight_through(const Tensor& p, double hard,
                               Tape* tape = nullptr) {
  if (p.rows() != 1 || p.cols() != 1)
    throw ContractError("straight_through input must be 1x1");
  if (hard != 0.0 && hard != 1.0)
    throw ContractError("straight_through hard value must be 0 or 1");
  Tensor out = Tensor::zeros(1, 1);
  auto pn = p.node(), on = out.node();
  const double p_at_record = pn->value[0];
  on->value[0] = hard;
  on->requires_grad = pn->requires_grad;
  if (tape && on->requires_grad) {
    tape->record(
        [pn, on, hard, p_at_record] {
          on->value[0] = hard + (pn->value[0] - p_at_record);
        },
        [pn, on] { pn->grad[0] += on->grad[0]; });
  }
  return out;
}

}  // namespace xrag
