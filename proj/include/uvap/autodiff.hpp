#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "uvap/tensor.hpp"

namespace uvap::ad {

// Reverse-mode autodiff over a dynamically built graph. Node granularity is
// one layer-ish op (a whole convolution, a softmax, ...), so graph overhead is
// negligible next to the math.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_ref() {
    if (!grad_alloc) {
      grad = Tensor::zeros(value.shape);
      grad_alloc = true;
    }
    return grad;
  }
};

inline Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Var leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

inline Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->value = std::move(out);
  bool need = false;
  for (const auto& p : parents)
    if (p->requires_grad) need = true;
  n->requires_grad = need;
  if (need) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return n;
}

// Backpropagate from a scalar root. Iterative topological order.
inline void backward(const Var& root) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i].get();
      ++i;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_ref()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad_alloc) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * a->value[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i)
        gb[i] -= g[i] * a->value[i] / (b->value[i] * b->value[i]);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data) v *= s;
  return make_op(std::move(out), {a}, [a, s](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i] * s;
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.data) v += s;
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i];
  });
}

inline Var silu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = v / (1.0 + std::exp(-v));
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = a->value[i];
      double s = 1.0 / (1.0 + std::exp(-x));
      ga[i] += self.grad[i] * (s * (1.0 + x * (1.0 - s)));
    }
  });
}

// x * sigmoid(gain * x): a steeper gate than plain silu for gain > 1.
inline Var silu_gain(const Var& a, double gain) {
  Tensor out = a->value;
  for (double& v : out.data) v = v / (1.0 + std::exp(-gain * v));
  return make_op(std::move(out), {a, }, [a, gain](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = a->value[i];
      double s = 1.0 / (1.0 + std::exp(-gain * x));
      ga[i] += self.grad[i] * (s + gain * x * s * (1.0 - s));
    }
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double s = self.value[i];
      ga[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// log(1 + e^x), numerically stable. d/dx = sigmoid(x).
inline Var softplus(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v)));
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      ga[i] += self.grad[i] / (1.0 + std::exp(-a->value[i]));
  });
}

inline Var tanh_el(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = std::tanh(v);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double t = self.value[i];
      ga[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

inline Var sqrt_el(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = std::sqrt(v);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      ga[i] += self.grad[i] * 0.5 / self.value[i];
  });
}

// Clamp to [0,1]; gradient passes where the input is strictly inside.
inline Var clamp01(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = std::min(std::max(v, 0.0), 1.0);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = a->value[i];
      if (x > 0.0 && x < 1.0) ga[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and scalar plumbing
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return make_op(Tensor::scalar(s), {a}, [a](Node& self) {
    double g = self.grad[0];
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

inline Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

inline Var dot_all(const Var& a, const Var& b) {
  if (a->value.numel() != b->value.numel())
    throw std::invalid_argument("dot_all: element count mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i] * b->value[i];
  return make_op(Tensor::scalar(s), {a, b}, [a, b](Node& self) {
    double g = self.grad[0];
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += g * a->value[i];
    }
  });
}

// [c,h,w] -> [c] spatial mean per channel.
inline Var spatial_mean(const Var& a) {
  const Tensor& X = a->value;
  if (X.shape.size() != 3) throw std::invalid_argument("spatial_mean: need 3-D input");
  int c = X.shape[0];
  int64_t n = static_cast<int64_t>(X.shape[1]) * X.shape[2];
  Tensor out = Tensor::zeros({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += X.data[static_cast<size_t>(ch) * n + i];
    out[ch] = s / static_cast<double>(n);
  }
  return make_op(std::move(out), {a}, [a, c, n](Node& self) {
    Tensor& ga = a->grad_ref();
    for (int ch = 0; ch < c; ++ch) {
      double g = self.grad[ch] / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) ga.data[static_cast<size_t>(ch) * n + i] += g;
    }
  });
}

// x[c,h,w] * s[c], each channel scaled by its own factor.
inline Var mul_channel_vec(const Var& x, const Var& s) {
  const Tensor& X = x->value;
  if (X.shape.size() != 3 || s->value.shape != std::vector<int>{X.shape[0]})
    throw std::invalid_argument("mul_channel_vec: bad shapes");
  int c = X.shape[0];
  int64_t n = static_cast<int64_t>(X.shape[1]) * X.shape[2];
  Tensor out = X;
  for (int ch = 0; ch < c; ++ch) {
    double sv = s->value[ch];
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(ch) * n + i] *= sv;
  }
  return make_op(std::move(out), {x, s}, [x, s, c, n](Node& self) {
    const Tensor& g = self.grad;
    if (x->requires_grad) {
      Tensor& gx = x->grad_ref();
      for (int ch = 0; ch < c; ++ch) {
        double sv = s->value[ch];
        for (int64_t i = 0; i < n; ++i)
          gx.data[static_cast<size_t>(ch) * n + i] += g.data[static_cast<size_t>(ch) * n + i] * sv;
      }
    }
    if (s->requires_grad) {
      Tensor& gs = s->grad_ref();
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int64_t i = 0; i < n; ++i)
          acc += g.data[static_cast<size_t>(ch) * n + i] * x->value.data[static_cast<size_t>(ch) * n + i];
        gs[ch] += acc;
      }
    }
  });
}

// x * s with a scalar [1] variable, broadcast over all elements.
inline Var mul_scalar_var(const Var& x, const Var& s) {
  if (s->value.numel() != 1) throw std::invalid_argument("mul_scalar_var: s must be scalar");
  double sv = s->value[0];
  Tensor out = x->value;
  for (double& v : out.data) v *= sv;
  return make_op(std::move(out), {x, s}, [x, s](Node& self) {
    const Tensor& g = self.grad;
    if (x->requires_grad) {
      Tensor& gx = x->grad_ref();
      double sv = s->value[0];
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * sv;
    }
    if (s->requires_grad) {
      double acc = 0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * x->value[i];
      s->grad_ref()[0] += acc;
    }
  });
}

inline Var stack_scalars(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_scalars: empty");
  Tensor out = Tensor::zeros({static_cast<int>(xs.size())});
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->value.numel() != 1) throw std::invalid_argument("stack_scalars: non-scalar input");
    out[static_cast<int64_t>(i)] = xs[i]->value[0];
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return make_op(std::move(out), std::move(parents), [xs](Node& self) {
    for (size_t i = 0; i < xs.size(); ++i)
      if (xs[i]->requires_grad) xs[i]->grad_ref()[0] += self.grad[static_cast<int64_t>(i)];
  });
}

// log(sum_i exp(x_i)) over a 1-D tensor, max-shifted.
inline Var logsumexp(const Var& a) {
  double m = max_val(a->value);
  double s = 0.0;
  for (double v : a->value.data) s += std::exp(v - m);
  double val = m + std::log(s);
  return make_op(Tensor::scalar(val), {a}, [a, m, s](Node& self) {
    double g = self.grad[0];
    Tensor& ga = a->grad_ref();
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * std::exp(a->value[i] - m) / s;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: bad shapes " + A.shape_str() + " x " + B.shape_str());
  int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &A.data[static_cast<size_t>(i) * k];
    double* orow = &out.data[static_cast<size_t>(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = &B.data[static_cast<size_t>(kk) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      const Tensor& B = b->value;
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double s = 0.0;
          const double* grow = &g.data[static_cast<size_t>(i) * n];
          const double* brow = &B.data[static_cast<size_t>(kk) * n];
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga.data[static_cast<size_t>(i) * k + kk] += s;
        }
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      const Tensor& A = a->value;
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          double av = A.data[static_cast<size_t>(i) * k + kk];
          const double* grow = &g.data[static_cast<size_t>(i) * n];
          double* gbrow = &gb.data[static_cast<size_t>(kk) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
    throw std::invalid_argument("matmul_nt: bad shapes " + A.shape_str() + " x " + B.shape_str());
  int m = A.shape[0], k = A.shape[1], n = B.shape[0];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const double* arow = &A.data[static_cast<size_t>(i) * k];
      const double* brow = &B.data[static_cast<size_t>(j) * k];
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      out.at2(i, j) = s;
    }
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    const Tensor& g = self.grad;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double gv = g.at2(i, j);
          const double* brow = &b->value.data[static_cast<size_t>(j) * k];
          double* garow = &ga.data[static_cast<size_t>(i) * k];
          for (int kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
        }
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) {
          double gv = g.at2(i, j);
          const double* arow = &a->value.data[static_cast<size_t>(i) * k];
          double* gbrow = &gb.data[static_cast<size_t>(j) * k];
          for (int kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
        }
    }
  });
}

// x[m,n] + b[n] broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
  const Tensor& X = x->value;
  if (X.shape.size() != 2 || b->value.shape.size() != 1 || b->value.shape[0] != X.shape[1])
    throw std::invalid_argument("add_rowvec: bad shapes");
  int m = X.shape[0], n = X.shape[1];
  Tensor out = X;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(i, j) += b->value[j];
  return make_op(std::move(out), {x, b}, [x, b, m, n](Node& self) {
    const Tensor& g = self.grad;
    if (x->requires_grad) {
      Tensor& gx = x->grad_ref();
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[j] += g.at2(i, j);
    }
  });
}

inline Var softmax_rows(const Var& x) {
  const Tensor& X = x->value;
  if (X.shape.size() != 2) throw std::invalid_argument("softmax_rows: need 2-D input");
  int m = X.shape[0], n = X.shape[1];
  Tensor out = X;
  for (int i = 0; i < m; ++i) {
    double* row = &out.data[static_cast<size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= s;
  }
  return make_op(std::move(out), {x}, [x, m, n](Node& self) {
    Tensor& gx = x->grad_ref();
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (int i = 0; i < m; ++i) {
      const double* yrow = &y.data[static_cast<size_t>(i) * n];
      const double* grow = &g.data[static_cast<size_t>(i) * n];
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += yrow[j] * grow[j];
      double* gxrow = &gx.data[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

// [c,h,w] -> [h*w, c]
inline Var chw_to_rows(const Var& x) {
  const Tensor& X = x->value;
  if (X.shape.size() != 3) throw std::invalid_argument("chw_to_rows: need 3-D input");
  int c = X.shape[0], h = X.shape[1], w = X.shape[2];
  Tensor out = Tensor::zeros({h * w, c});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at2(y * w + xx, ch) = X.at3(ch, y, xx);
  return make_op(std::move(out), {x}, [x, c, h, w](Node& self) {
    Tensor& gx = x->grad_ref();
    const Tensor& g = self.grad;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) gx.at3(ch, y, xx) += g.at2(y * w + xx, ch);
  });
}

// [h*w, c] -> [c,h,w]
inline Var rows_to_chw(const Var& x, int c, int h, int w) {
  const Tensor& X = x->value;
  if (X.shape.size() != 2 || X.shape[0] != h * w || X.shape[1] != c)
    throw std::invalid_argument("rows_to_chw: bad shapes");
  Tensor out = Tensor::zeros({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at3(ch, y, xx) = X.at2(y * w + xx, ch);
  return make_op(std::move(out), {x}, [x, c, h, w](Node& self) {
    Tensor& gx = x->grad_ref();
    const Tensor& g = self.grad;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) gx.at2(y * w + xx, ch) += g.at3(ch, y, xx);
  });
}

inline Var reshape(const Var& x, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != x->value.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), x->value.data);
  return make_op(std::move(out), {x}, [x](Node& self) {
    Tensor& gx = x->grad_ref();
    for (int64_t i = 0; i < self.grad.numel(); ++i) gx[i] += self.grad[i];
  });
}

inline Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty list");
  int cols = xs[0]->value.shape[1];
  int rows = 0;
  for (const auto& v : xs) {
    if (v->value.shape.size() != 2 || v->value.shape[1] != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += v->value.shape[0];
  }
  Tensor out = Tensor::zeros({rows, cols});
  int64_t off = 0;
  for (const auto& v : xs) {
    std::copy(v->value.data.begin(), v->value.data.end(), out.data.begin() + off);
    off += v->value.numel();
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return make_op(std::move(out), std::move(parents), [xs](Node& self) {
    int64_t off = 0;
    for (const auto& v : xs) {
      int64_t n = v->value.numel();
      if (v->requires_grad) {
        Tensor& gv = v->grad_ref();
        for (int64_t i = 0; i < n; ++i) gv[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions / pooling
// ---------------------------------------------------------------------------

// x[ic,h,w], w[oc,ic,kh,kw], b[oc]; zero padding.
inline Var conv2d(const Var& x, const Var& wt, const Var& bias, int stride, int pad) {
  const Tensor& X = x->value;
  const Tensor& W = wt->value;
  if (X.shape.size() != 3 || W.shape.size() != 4 || X.shape[0] != W.shape[1])
    throw std::invalid_argument("conv2d: bad shapes " + X.shape_str() + " w " + W.shape_str());
  int ic = X.shape[0], h = X.shape[1], w = X.shape[2];
  int oc = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor out = Tensor::zeros({oc, oh, ow});
  for (int o = 0; o < oc; ++o) {
    double bv = bias->value[o];
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = bv;
        for (int c = 0; c < ic; ++c)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              s += X.at3(c, iy, ix) * W.data[((static_cast<size_t>(o) * ic + c) * kh + ky) * kw + kx];
            }
          }
        out.at3(o, oy, ox) = s;
      }
  }
  return make_op(std::move(out), {x, wt, bias},
                 [x, wt, bias, ic, h, w, oc, kh, kw, oh, ow, stride, pad](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& X = x->value;
    const Tensor& W = wt->value;
    if (bias->requires_grad) {
      Tensor& gb = bias->grad_ref();
      for (int o = 0; o < oc; ++o) {
        double s = 0.0;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) s += g.at3(o, oy, ox);
        gb[o] += s;
      }
    }
    if (wt->requires_grad) {
      Tensor& gw = wt->grad_ref();
      for (int o = 0; o < oc; ++o)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            double gv = g.at3(o, oy, ox);
            if (gv == 0.0) continue;
            for (int c = 0; c < ic; ++c)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  gw.data[((static_cast<size_t>(o) * ic + c) * kh + ky) * kw + kx] +=
                      gv * X.at3(c, iy, ix);
                }
              }
          }
    }
    if (x->requires_grad) {
      Tensor& gx = x->grad_ref();
      for (int o = 0; o < oc; ++o)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            double gv = g.at3(o, oy, ox);
            if (gv == 0.0) continue;
            for (int c = 0; c < ic; ++c)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  gx.at3(c, iy, ix) +=
                      gv * W.data[((static_cast<size_t>(o) * ic + c) * kh + ky) * kw + kx];
                }
              }
          }
    }
  });
}

// Transposed convolution. x[ic,h,w], w[ic,oc,kh,kw], b[oc].
// out size = (h-1)*stride - 2*pad + kh.
inline Var deconv2d(const Var& x, const Var& wt, const Var& bias, int stride, int pad) {
  const Tensor& X = x->value;
  const Tensor& W = wt->value;
  if (X.shape.size() != 3 || W.shape.size() != 4 || X.shape[0] != W.shape[0])
    throw std::invalid_argument("deconv2d: bad shapes " + X.shape_str() + " w " + W.shape_str());
  int ic = X.shape[0], h = X.shape[1], w = X.shape[2];
  int oc = W.shape[1], kh = W.shape[2], kw = W.shape[3];
  int oh = (h - 1) * stride - 2 * pad + kh;
  int ow = (w - 1) * stride - 2 * pad + kw;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("deconv2d: empty output");
  Tensor out = Tensor::zeros({oc, oh, ow});
  for (int o = 0; o < oc; ++o) {
    double bv = bias->value[o];
    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i)
      out.data[static_cast<size_t>(o) * oh * ow + i] = bv;
  }
  for (int c = 0; c < ic; ++c)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        double xv = X.at3(c, iy, ix);
        for (int o = 0; o < oc; ++o)
          for (int ky = 0; ky < kh; ++ky) {
            int oy = iy * stride - pad + ky;
            if (oy < 0 || oy >= oh) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ox = ix * stride - pad + kx;
              if (ox < 0 || ox >= ow) continue;
              out.at3(o, oy, ox) +=
                  xv * W.data[((static_cast<size_t>(c) * oc + o) * kh + ky) * kw + kx];
            }
          }
      }
  return make_op(std::move(out), {x, wt, bias},
                 [x, wt, bias, ic, h, w, oc, kh, kw, oh, ow, stride, pad](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& X = x->value;
    const Tensor& W = wt->value;
    if (bias->requires_grad) {
      Tensor& gb = bias->grad_ref();
      for (int o = 0; o < oc; ++o) {
        double s = 0.0;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) s += g.at3(o, oy, ox);
        gb[o] += s;
      }
    }
    if (wt->requires_grad) {
      Tensor& gw = wt->grad_ref();
      for (int c = 0; c < ic; ++c)
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix) {
            double xv = X.at3(c, iy, ix);
            if (xv == 0.0) continue;
            for (int o = 0; o < oc; ++o)
              for (int ky = 0; ky < kh; ++ky) {
                int oy = iy * stride - pad + ky;
                if (oy < 0 || oy >= oh) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ox = ix * stride - pad + kx;
                  if (ox < 0 || ox >= ow) continue;
                  gw.data[((static_cast<size_t>(c) * oc + o) * kh + ky) * kw + kx] +=
                      xv * g.at3(o, oy, ox);
                }
              }
          }
    }
    if (x->requires_grad) {
      Tensor& gx = x->grad_ref();
      for (int c = 0; c < ic; ++c)
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix) {
            double s = 0.0;
            for (int o = 0; o < oc; ++o)
              for (int ky = 0; ky < kh; ++ky) {
                int oy = iy * stride - pad + ky;
                if (oy < 0 || oy >= oh) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ox = ix * stride - pad + kx;
                  if (ox < 0 || ox >= ow) continue;
                  s += g.at3(o, oy, ox) *
                       W.data[((static_cast<size_t>(c) * oc + o) * kh + ky) * kw + kx];
                }
              }
            gx.at3(c, iy, ix) += s;
          }
    }
  });
}

// Per-channel standardization over the spatial extent, with learnable scale
// and shift: y = gamma * (x - mean) / sqrt(var + eps) + beta.
inline Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Tensor& X = x->value;
  if (X.shape.size() != 3 || gamma->value.shape != std::vector<int>{X.shape[0]} ||
      beta->value.shape != std::vector<int>{X.shape[0]})
    throw std::invalid_argument("channel_norm: bad shapes");
  int c = X.shape[0], h = X.shape[1], w = X.shape[2];
  int64_t n = static_cast<int64_t>(h) * w;
  Tensor out = Tensor::zeros(X.shape);
  Tensor xhat = Tensor::zeros(X.shape);
  std::vector<double> inv_sigma(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = &X.data[static_cast<size_t>(ch) * n];
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += xc[i];
    mu /= static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (xc[i] - mu) * (xc[i] - mu);
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(ch)] = is;
    double g = gamma->value[ch], bb = beta->value[ch];
    for (int64_t i = 0; i < n; ++i) {
      double xh = (xc[i] - mu) * is;
      xhat.data[static_cast<size_t>(ch) * n + i] = xh;
      out.data[static_cast<size_t>(ch) * n + i] = g * xh + bb;
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), c,
                  n](Node& self) {
    const Tensor& g = self.grad;
    for (int ch = 0; ch < c; ++ch) {
      const double* grow = &g.data[static_cast<size_t>(ch) * n];
      const double* xh = &xhat.data[static_cast<size_t>(ch) * n];
      if (gamma->requires_grad) {
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += grow[i] * xh[i];
        gamma->grad_ref()[ch] += s;
      }
      if (beta->requires_grad) {
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += grow[i];
        beta->grad_ref()[ch] += s;
      }
      if (x->requires_grad) {
        double gm = gamma->value[ch];
        double mean_g = 0, mean_gx = 0;
        for (int64_t i = 0; i < n; ++i) {
          mean_g += grow[i];
          mean_gx += grow[i] * xh[i];
        }
        mean_g /= static_cast<double>(n);
        mean_gx /= static_cast<double>(n);
        Tensor& gx = x->grad_ref();
        double* gxrow = &gx.data[static_cast<size_t>(ch) * n];
        double is = inv_sigma[static_cast<size_t>(ch)];
        for (int64_t i = 0; i < n; ++i)
          gxrow[i] += gm * is * (grow[i] - mean_g - xh[i] * mean_gx);
      }
    }
  });
}

// 2x2 average pooling, stride 2. Requires even h,w.
inline Var avgpool2(const Var& x) {
  const Tensor& X = x->value;
  if (X.shape.size() != 3 || X.shape[1] % 2 != 0 || X.shape[2] % 2 != 0)
    throw std::invalid_argument("avgpool2: need 3-D input with even h,w");
  int c = X.shape[0], h = X.shape[1], w = X.shape[2];
  Tensor out = Tensor::zeros({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx)
        out.at3(ch, y, xx) = 0.25 * (X.at3(ch, 2 * y, 2 * xx) + X.at3(ch, 2 * y, 2 * xx + 1) +
                                     X.at3(ch, 2 * y + 1, 2 * xx) + X.at3(ch, 2 * y + 1, 2 * xx + 1));
  return make_op(std::move(out), {x}, [x, c, h, w](Node& self) {
    Tensor& gx = x->grad_ref();
    const Tensor& g = self.grad;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h / 2; ++y)
        for (int xx = 0; xx < w / 2; ++xx) {
          double gv = 0.25 * g.at3(ch, y, xx);
          gx.at3(ch, 2 * y, 2 * xx) += gv;
          gx.at3(ch, 2 * y, 2 * xx + 1) += gv;
          gx.at3(ch, 2 * y + 1, 2 * xx) += gv;
          gx.at3(ch, 2 * y + 1, 2 * xx + 1) += gv;
        }
  });
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

// Cosine similarity of two tensors viewed flat. Errors on (near-)zero norms.
inline Var cosine(const Var& a, const Var& b) {
  double na = 0.0, nb = 0.0;
  for (double v : a->value.data) na += v * v;
  for (double v : b->value.data) nb += v * v;
  if (na < 1e-24 || nb < 1e-24)
    throw std::invalid_argument("cosine: zero-norm feature vector");
  Var num = dot_all(a, b);
  Var den = mul(sqrt_el(dot_all(a, a)), sqrt_el(dot_all(b, b)));
  return div(num, den);
}

}  // namespace uvap::ad
