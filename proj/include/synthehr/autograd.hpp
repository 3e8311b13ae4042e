#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "synthehr/kernels.hpp"

namespace synthehr::ag {

// Minimal reverse-mode automatic differentiation over dense matrices.
struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Matrix& grad_buffer();
};

using Tensor = std::shared_ptr<Node>;

Tensor parameter(Matrix value);
Tensor constant(Matrix value);

// Seeds d(loss)/d(loss) = 1 for a 1×1 loss and accumulates into every
// reachable node that requires a gradient.
void backward(const Tensor& loss);

// While alive on the current thread, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1×n over rows
Tensor scale(const Tensor& a, double s);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, int begin, int count);
Tensor slice_cols(const Tensor& a, int begin, int count);
Tensor reshape(const Tensor& a, int rows, int cols);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor sum(const Tensor& a);

// Multi-head scaled dot-product attention on already projected q, k, v.
// With `causal`, query i attends to keys 0..i only.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal);

// Σ_i weight_i · (−log softmax(logits_i)[target_i]); rows with target < 0 are skipped.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights = {});

// Mean binary cross-entropy with logits against 0/1 targets of the same shape.
Tensor bce_with_logits(const Tensor& logits, const Matrix& targets);

}  // namespace synthehr::ag
