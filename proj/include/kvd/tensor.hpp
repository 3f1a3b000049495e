#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace kvd {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

// Label value excluded from every loss and from the normalization count.
constexpr int kIgnoreIndex = -100;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same length as data once touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backprop;  // reads this->grad, accumulates into parents

  void ensure_grad();
};

/// Dense n-d array participating in a reverse-mode graph. Value-semantic
/// handle over a shared node; copying a Tensor aliases the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int numel() const { return static_cast<int>(impl_->data.size()); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void zero_grad();

  double item() const;

  /// Copy of the values as a fresh leaf with no graph linkage.
  Tensor detach() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Elementwise / structural primitives. Each checks shapes and registers an
// exact analytic backward rule when any input requires grad.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor gelu(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor slice_cols(const Tensor& a, int begin, int end);
Tensor sum(const Tensor& a);

Tensor softmax_lastdim(const Tensor& z);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor rms_norm(const Tensor& x, const Tensor& gain);

struct MaskedLoss {
  Tensor loss_sum;  // scalar, graph-linked
  int count = 0;
};

MaskedLoss cross_entropy_masked(const Tensor& logits,
                                const std::vector<int>& labels,
                                int ignore_index = kIgnoreIndex);

// z_teacher participates by value only: no gradient flows into it.
MaskedLoss kl_divergence_masked(const Tensor& z_teacher,
                                const Tensor& z_student,
                                const std::vector<uint8_t>& mask,
                                double temperature);

/// Reverse pass from a scalar root. Deterministic: fixed topological order.
void backward(const Tensor& root);

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued closure over the given inputs. Step 1e-5.
double grad_check(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                  std::vector<Tensor>& inputs, double step = 1e-5);

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t seed = 1469598103934665603ull);
uint64_t hash_tensor(const Tensor& t);

}  // namespace kvd
