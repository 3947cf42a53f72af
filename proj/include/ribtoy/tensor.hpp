#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ribtoy/errors.hpp"

namespace ribtoy {

class Tape;

namespace detail {
struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched by backward()
  bool requires_grad = false;
  int node = -1;  // index of the producing tape node, -1 for leaves
  const Tape* tape = nullptr;
};
}  // namespace detail

// Dense row-major tensor of doubles. Copies share storage (shared_ptr
// semantics); deep_copy() detaches. Gradients accumulate into `grad`
// for leaves; intermediate grads are rewritten by each backward pass.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<double> data();
  std::span<const double> data() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  // Throws UsageError when no gradient has been produced yet.
  std::span<double> grad();
  std::span<const double> grad() const;
  void ensure_grad();  // allocate a zero grad buffer if absent
  void zero_grad();

  double item() const;  // scalar tensors only
  Tensor deep_copy() const;

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  detail::TensorImpl* req() const;
  std::shared_ptr<detail::TensorImpl> impl_;
};

enum class ActKind { Relu, Sigmoid, Tanh01, Softsign01 };

// Logit-to-probability squash used by the cross-entropy loss.
enum class ProbKind { Sigmoid, Tanh01, Softsign01 };

struct GndrpResult {
  Tensor pooled;                        // [N, F]
  std::vector<std::uint8_t> fallback;   // 1 where the selection set was empty
  int fallback_count = 0;
};

// Records forward ops in creation order and replays exact reverse rules.
// One tape per forward graph; not thread-safe (use one tape per thread).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // input [N,C,H,W] (*) kernel [F,C,3,3] + bias [F] -> [N,F,H,W].
  // Cross-correlation, stride 1, zero padding 1 (same-size output).
  Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

  Tensor activation(ActKind kind, const Tensor& input);
  Tensor relu(const Tensor& t) { return activation(ActKind::Relu, t); }

  // Global average pool: [N,F,H,W] -> [N,F].
  Tensor gap(const Tensor& feature);

  // Pool only positions whose cam value is <= tau. cam is [N,H,W] and acts
  // as a constant selector: no gradient flows into it, and the selection
  // mask is fixed at forward time. An empty selection falls back to the
  // positions attaining min(cam) and is flagged in the result.
  GndrpResult gndrp(const Tensor& feature, const Tensor& cam, double tau);

  // input [N,F] x weight [C,F] + bias [C] -> [N,C].
  Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

  // Mean over batch of -sum_c [t log p + (1-t) log(1-p)], p = squash(logit)
  // clamped to [1e-7, 1-1e-7]. labels must be exactly 0 or 1.
  Tensor bce_loss(const Tensor& logits, const Tensor& labels, ProbKind prob_kind);

  // Mean over batch of -sum_c t_c * min(margin, logit). Gradient w.r.t. a
  // labeled logit is exactly -1/N below the margin and exactly 0 at or
  // above it, so parameters stop moving bit-exactly once every labeled
  // logit reaches the margin.
  Tensor rib_loss(const Tensor& logits, const Tensor& labels, double margin);

  Tensor sum(const Tensor& t);                      // -> scalar
  Tensor add(const Tensor& a, const Tensor& b);     // same shape, elementwise
  Tensor mul(const Tensor& a, const Tensor& b);     // same shape, elementwise
  Tensor select(const Tensor& t, std::size_t flat_index);  // -> scalar

  // Reverse sweep from `loss` (a scalar produced by this tape). Leaf grads
  // accumulate across calls; intermediate grads are reset per call.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void()> back;
  };

  Tensor fresh(std::vector<std::size_t> shape, bool track);
  void record(const Tensor& out, std::function<void()> back);

  std::vector<Node> nodes_;
};

// Numerically stable scalar squashes, shared by ops and analysis code.
double sigmoid(double z);
double tanh01(double z);      // (tanh z + 1) / 2
double softsign01(double z);  // (z / (1 + |z|) + 1) / 2
double apply_prob(ProbKind kind, double z);

// Throws NumericError naming `what` and the offending flat index.
void check_finite(std::span<const double> values, const char* what);

}  // namespace ribtoy
