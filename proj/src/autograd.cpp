#include "synthehr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "synthehr/error.hpp"

namespace synthehr::ag {

namespace {
thread_local bool t_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::kDimensionMismatch, what);
}

Tensor make(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!t_grad_enabled) return n;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return n;
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward_fn = std::move(fn);
  return n;
}

void axpy(Matrix& dst, const Matrix& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}
}  // namespace

Matrix& Node::grad_buffer() {
  if (grad.rows != value.rows || grad.cols != value.cols) grad = Matrix(value.rows, value.cols);
  return grad;
}

Tensor parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Tensor constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

void backward(const Tensor& loss) {
  require(loss->value.rows == 1 && loss->value.cols == 1, "backward expects a scalar loss");
  if (!loss->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.rows == n->value.rows && n->grad.cols == n->value.cols) n->backward_fn(*n);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a->value.cols == b->value.rows, "matmul inner dimensions");
  return make(synthehr::matmul(a->value, b->value), {a, b}, [a, b](Node& n) {
    const int m = a->value.rows, k = a->value.cols, c = b->value.cols;
    if (a->requires_grad)
      kernels::gemm_nt(m, k, c, n.grad.data.data(), b->value.data.data(), a->grad_buffer().data.data(), true);
    if (b->requires_grad)
      kernels::gemm_tn(k, c, m, a->value.data.data(), n.grad.data.data(), b->grad_buffer().data.data(), true);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a->value.cols == b->value.cols, "matmul_nt inner dimensions");
  return make(synthehr::matmul_nt(a->value, b->value), {a, b}, [a, b](Node& n) {
    const int m = a->value.rows, k = a->value.cols, r = b->value.rows;
    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
    if (a->requires_grad)
      kernels::gemm(m, k, r, n.grad.data.data(), b->value.data.data(), a->grad_buffer().data.data(), true);
    if (b->requires_grad)
      kernels::gemm_tn(r, k, m, n.grad.data.data(), a->value.data.data(), b->grad_buffer().data.data(), true);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a->value.rows == b->value.rows && a->value.cols == b->value.cols, "add shapes");
  Matrix v = a->value;
  axpy(v, b->value);
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) axpy(a->grad_buffer(), n.grad);
    if (b->requires_grad) axpy(b->grad_buffer(), n.grad);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row->value.rows == 1 && row->value.cols == a->value.cols, "add_row shapes");
  Matrix v = a->value;
  for (int r = 0; r < v.rows; ++r)
    for (int c = 0; c < v.cols; ++c) v(r, c) += row->value.data[c];
  return make(std::move(v), {a, row}, [a, row](Node& n) {
    if (a->requires_grad) axpy(a->grad_buffer(), n.grad);
    if (row->requires_grad) {
      auto& g = row->grad_buffer();
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c) g.data[c] += n.grad(r, c);
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix v = a->value;
  for (auto& x : v.data) x *= s;
  return make(std::move(v), {a}, [a, s](Node& n) { axpy(a->grad_buffer(), n.grad, s); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a->value.rows == b->value.rows && a->value.cols == b->value.cols, "mul shapes");
  Matrix v = a->value;
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] *= b->value.data[i];
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * a->value.data[i];
    }
  });
}

namespace {
template <class F, class D>
Tensor unary(const Tensor& a, F f, D df) {
  Matrix v = a->value;
  for (auto& x : v.data) x = f(x);
  return make(std::move(v), {a}, [a, df](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * df(a->value.data[i], n.value.data[i]);
  });
}
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int R = x->value.rows, C = x->value.cols;
  require(gamma->value.cols == C && beta->value.cols == C, "layer_norm shapes");
  Matrix out(R, C), xhat(R, C);
  std::vector<double> inv(R);
  for (int r = 0; r < R; ++r) {
    const double* xr = x->value.row(r);
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xr[c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= C;
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < C; ++c) {
      xhat(r, c) = (xr[c] - mu) * inv[r];
      out(r, c) = xhat(r, c) * gamma->value.data[c] + beta->value.data[c];
    }
  }
  return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat = std::move(xhat), inv](Node& n) {
    const int R = n.value.rows, C = n.value.cols;
    if (gamma->requires_grad || beta->requires_grad) {
      auto& gg = gamma->grad_buffer();
      auto& gb = beta->grad_buffer();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          gg.data[c] += n.grad(r, c) * xhat(r, c);
          gb.data[c] += n.grad(r, c);
        }
    }
    if (x->requires_grad) {
      auto& gx = x->grad_buffer();
      std::vector<double> dxh(C);
      for (int r = 0; r < R; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < C; ++c) {
          dxh[c] = n.grad(r, c) * gamma->value.data[c];
          s1 += dxh[c];
          s2 += dxh[c] * xhat(r, c);
        }
        for (int c = 0; c < C; ++c) gx(r, c) += inv[r] / C * (C * dxh[c] - s1 - xhat(r, c) * s2);
      }
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const int C = parts.front()->value.cols;
  int R = 0;
  for (const auto& p : parts) {
    require(p->value.cols == C, "concat_rows column mismatch");
    R += p->value.rows;
  }
  Matrix v(R, C);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data.begin(), p->value.data.end(), v.data.begin() + off);
    off += p->value.data.size();
  }
  std::vector<Tensor> ps(parts.begin(), parts.end());
  return make(std::move(v), ps, [ps](Node& n) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[off + i];
      }
      off += p->value.data.size();
    }
  });
}

Tensor slice_rows(const Tensor& a, int begin, int count) {
  require(begin >= 0 && count >= 0 && begin + count <= a->value.rows, "slice_rows range");
  const int C = a->value.cols;
  Matrix v(count, C);
  std::copy(a->value.row(begin), a->value.row(begin) + static_cast<std::size_t>(count) * C, v.data.begin());
  return make(std::move(v), {a}, [a, begin](Node& n) {
    auto& g = a->grad_buffer();
    double* dst = g.row(begin);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) dst[i] += n.grad.data[i];
  });
}

Tensor slice_cols(const Tensor& a, int begin, int count) {
  require(begin >= 0 && count >= 0 && begin + count <= a->value.cols, "slice_cols range");
  const int R = a->value.rows;
  Matrix v(R, count);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < count; ++c) v(r, c) = a->value(r, begin + c);
  return make(std::move(v), {a}, [a, begin, count](Node& n) {
    auto& g = a->grad_buffer();
    for (int r = 0; r < n.grad.rows; ++r)
      for (int c = 0; c < count; ++c) g(r, begin + c) += n.grad(r, c);
  });
}

Tensor reshape(const Tensor& a, int rows, int cols) {
  require(static_cast<std::size_t>(rows) * cols == a->value.size(), "reshape size");
  Matrix v = a->value;
  v.rows = rows;
  v.cols = cols;
  return make(std::move(v), {a}, [a](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const int C = table->value.cols;
  Matrix v(static_cast<int>(ids.size()), C);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->value.rows) throw Error(ErrorCode::kUnknownToken, "row id " + std::to_string(ids[i]));
    std::copy(table->value.row(ids[i]), table->value.row(ids[i]) + C, v.row(static_cast<int>(i)));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make(std::move(v), {table}, [table, idv = std::move(idv)](Node& n) {
    auto& g = table->grad_buffer();
    const int C = n.grad.cols;
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* dst = g.row(idv[i]);
      const double* src = n.grad.row(static_cast<int>(i));
      for (int c = 0; c < C; ++c) dst[c] += src[c];
    }
  });
}

Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  for (double x : a->value.data) v.data[0] += x;
  return make(std::move(v), {a}, [a](Node& n) {
    auto& g = a->grad_buffer();
    for (auto& x : g.data) x += n.grad.data[0];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal) {
  const int Lq = q->value.rows, Lk = k->value.rows, D = q->value.cols;
  require(k->value.cols == D && v->value.cols == D && v->value.rows == Lk, "attention shapes");
  require(heads >= 1 && D % heads == 0, "attention heads must divide the width");
  const int dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h] is Lq×Lk
  std::vector<Matrix> probs(heads, Matrix(Lq, Lk));
  Matrix out(Lq, D);
  for (int h = 0; h < heads; ++h) {
    Matrix& P = probs[h];
    const int off = h * dh;
    for (int i = 0; i < Lq; ++i) {
      const int limit = causal ? std::min(i + 1, Lk) : Lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < limit; ++j) {
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += q->value(i, off + c) * k->value(j, off + c);
        P(i, j) = s * sc;
        mx = std::max(mx, P(i, j));
      }
      double z = 0.0;
      for (int j = 0; j < limit; ++j) {
        P(i, j) = std::exp(P(i, j) - mx);
        z += P(i, j);
      }
      for (int j = 0; j < limit; ++j) P(i, j) /= z;
      for (int j = limit; j < Lk; ++j) P(i, j) = 0.0;
      for (int j = 0; j < limit; ++j) {
        const double p = P(i, j);
        for (int c = 0; c < dh; ++c) out(i, off + c) += p * v->value(j, off + c);
      }
    }
  }
  return make(std::move(out), {q, k, v}, [q, k, v, heads, dh, sc, probs = std::move(probs)](Node& n) {
    const int Lq = q->value.rows, Lk = k->value.rows;
    Matrix* gq = q->requires_grad ? &q->grad_buffer() : nullptr;
    Matrix* gk = k->requires_grad ? &k->grad_buffer() : nullptr;
    Matrix* gv = v->requires_grad ? &v->grad_buffer() : nullptr;
    std::vector<double> dp(Lk);
    for (int h = 0; h < heads; ++h) {
      const Matrix& P = probs[h];
      const int off = h * dh;
      for (int i = 0; i < Lq; ++i) {
        double dot = 0.0;
        for (int j = 0; j < Lk; ++j) {
          if (P(i, j) == 0.0) {
            dp[j] = 0.0;
            continue;
          }
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += n.grad(i, off + c) * v->value(j, off + c);
          dp[j] = s;
          dot += s * P(i, j);
          if (gv)
            for (int c = 0; c < dh; ++c) (*gv)(j, off + c) += P(i, j) * n.grad(i, off + c);
        }
        for (int j = 0; j < Lk; ++j) {
          if (P(i, j) == 0.0) continue;
          const double ds = P(i, j) * (dp[j] - dot) * sc;
          if (gq)
            for (int c = 0; c < dh; ++c) (*gq)(i, off + c) += ds * k->value(j, off + c);
          if (gk)
            for (int c = 0; c < dh; ++c) (*gk)(j, off + c) += ds * q->value(i, off + c);
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  const int R = logits->value.rows, C = logits->value.cols;
  require(static_cast<int>(targets.size()) == R, "cross_entropy target count");
  require(weights.empty() || weights.size() == targets.size(), "cross_entropy weight count");
  Matrix lp = logits->value;
  kernels::log_softmax_rows(lp);
  Matrix v(1, 1);
  std::vector<double> w(R, 0.0);
  for (int r = 0; r < R; ++r) {
    if (targets[r] < 0) continue;
    if (targets[r] >= C) throw Error(ErrorCode::kUnknownToken, "target id " + std::to_string(targets[r]));
    w[r] = weights.empty() ? 1.0 : weights[r];
    v.data[0] -= w[r] * lp(r, targets[r]);
  }
  std::vector<int> t(targets.begin(), targets.end());
  return make(std::move(v), {logits}, [logits, lp = std::move(lp), w = std::move(w), t = std::move(t)](Node& n) {
    auto& g = logits->grad_buffer();
    const double up = n.grad.data[0];
    for (int r = 0; r < lp.rows; ++r) {
      if (t[r] < 0 || w[r] == 0.0) continue;
      for (int c = 0; c < lp.cols; ++c) g(r, c) += up * w[r] * std::exp(lp(r, c));
      g(r, t[r]) -= up * w[r];
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Matrix& targets) {
  require(targets.rows == logits->value.rows && targets.cols == logits->value.cols, "bce shapes");
  const double n_el = static_cast<double>(targets.size());
  Matrix v(1, 1);
  for (std::size_t i = 0; i < targets.data.size(); ++i) {
    const double x = logits->value.data[i], y = targets.data[i];
    v.data[0] += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  v.data[0] /= n_el;
  return make(std::move(v), {logits}, [logits, targets, n_el](Node& n) {
    auto& g = logits->grad_buffer();
    const double up = n.grad.data[0] / n_el;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-logits->value.data[i]));
      g.data[i] += up * (s - targets.data[i]);
    }
  });
}

}  // namespace synthehr::ag
