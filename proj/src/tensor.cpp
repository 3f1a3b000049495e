#include "kvd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace kvd {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

void require_matrix(const std::string& op, const Tensor& t) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(op + ": expected a 2-d tensor, got " +
                                shape_str(t.shape()));
  }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data,
                                      bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

// Result node wiring: requires_grad propagates from parents; parents and the
// backprop closure are only attached when a gradient can actually flow.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  auto impl = make_impl(std::move(shape), std::move(data), rg);
  if (rg) {
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    TensorImpl* self = impl.get();
    impl->backprop = [self, fn = std::move(backprop)]() { fn(*self); };
  }
  return Tensor(impl);
}

void accumulate(const std::shared_ptr<TensorImpl>& p,
                const std::vector<double>& delta) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (size_t i = 0; i < delta.size(); ++i) p->grad[i] += delta[i];
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

void TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape),
                          std::vector<double>(static_cast<size_t>(n), value),
                          requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<size_t>(shape_numel(shape)) != data.size()) {
    throw std::invalid_argument("from_data: " + shape_str(shape) + " does not hold " +
                                std::to_string(data.size()) + " values");
  }
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  int n = shape_numel(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = dist(rng);
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

std::vector<double>& Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  return Tensor(make_impl(impl_->shape, impl_->data, false));
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return make_result(a.shape(), std::move(out), {a}, [c](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += c * self.grad[i];
  });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = p->data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      p->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  std::vector<double> out(static_cast<size_t>(m) * n);
  {
    ECMap ma(a.data().data(), m, k);
    ECMap mb(b.data().data(), k, n);
    EMap mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    ECMap g(self.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      ECMap mb(pb->data.data(), k, n);
      EMap ga(pa->grad.data(), m, k);
      ga.noalias() += g * mb.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      ECMap ma(pa->data.data(), m, k);
      EMap gb(pb->grad.data(), k, n);
      gb.noalias() += ma.transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p->grad[static_cast<size_t>(i) * n + j] +=
            self.grad[static_cast<size_t>(j) * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  return make_result(std::move(shape), a.data(), {a}, [](TensorImpl& self) {
    accumulate(self.parents[0], self.grad);
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_matrix("concat", p);
  int other = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    int po = axis == 0 ? p.dim(1) : p.dim(0);
    if (po != other) shape_error("concat", parts[0].shape(), p.shape());
    total += p.dim(axis);
  }
  int rows = axis == 0 ? total : other;
  int cols = axis == 0 ? other : total;
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  int off = 0;
  for (const auto& p : parts) {
    int pr = p.dim(0), pc = p.dim(1);
    for (int i = 0; i < pr; ++i)
      for (int j = 0; j < pc; ++j) {
        int r = axis == 0 ? off + i : i;
        int c = axis == 0 ? j : off + j;
        out[static_cast<size_t>(r) * cols + c] = p.data()[static_cast<size_t>(i) * pc + j];
      }
    off += p.dim(axis);
  }
  std::vector<int> sizes;
  for (const auto& p : parts) sizes.push_back(p.dim(axis));
  return make_result({rows, cols}, std::move(out), parts,
                     [axis, cols, sizes](TensorImpl& self) {
    int off = 0;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      int pr = p->shape[0], pc = p->shape[1];
      if (p->requires_grad) {
        p->ensure_grad();
        for (int i = 0; i < pr; ++i)
          for (int j = 0; j < pc; ++j) {
            int r = axis == 0 ? off + i : i;
            int c = axis == 0 ? j : off + j;
            p->grad[static_cast<size_t>(i) * pc + j] +=
                self.grad[static_cast<size_t>(r) * cols + c];
          }
      }
      off += sizes[k];
    }
  });
}

namespace {

Tensor slice_impl(const Tensor& a, int begin, int end, bool rows) {
  require_matrix("slice", a);
  int limit = rows ? a.dim(0) : a.dim(1);
  if (begin < 0 || end > limit || begin >= end) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") invalid for " +
                                shape_str(a.shape()));
  }
  int m = a.dim(0), n = a.dim(1);
  int om = rows ? end - begin : m;
  int on = rows ? n : end - begin;
  std::vector<double> out(static_cast<size_t>(om) * on);
  for (int i = 0; i < om; ++i)
    for (int j = 0; j < on; ++j) {
      int si = rows ? begin + i : i;
      int sj = rows ? j : begin + j;
      out[static_cast<size_t>(i) * on + j] = a.data()[static_cast<size_t>(si) * n + sj];
    }
  return make_result({om, on}, std::move(out), {a},
                     [begin, rows, n, om, on](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < om; ++i)
      for (int j = 0; j < on; ++j) {
        int si = rows ? begin + i : i;
        int sj = rows ? j : begin + j;
        p->grad[static_cast<size_t>(si) * n + sj] +=
            self.grad[static_cast<size_t>(i) * on + j];
      }
  });
}

}  // namespace

Tensor slice_rows(const Tensor& a, int begin, int end) {
  return slice_impl(a, begin, end, true);
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  return slice_impl(a, begin, end, false);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  });
}

Tensor softmax_lastdim(const Tensor& z) {
  if (z.ndim() < 1) throw std::invalid_argument("softmax_lastdim: rank-0 input");
  int cols = z.shape().back();
  int rows = z.numel() / cols;
  for (double v : z.data()) {
    if (!std::isfinite(v)) {
      throw std::domain_error("softmax_lastdim: non-finite input value");
    }
  }
  std::vector<double> out(z.data().size());
  for (int r = 0; r < rows; ++r) {
    const double* row = z.data().data() + static_cast<size_t>(r) * cols;
    double* orow = out.data() + static_cast<size_t>(r) * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      denom += orow[c];
    }
    for (int c = 0; c < cols; ++c) orow[c] /= denom;
  }
  return make_result(z.shape(), std::move(out), {z}, [rows, cols](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const double* pr = self.data.data() + static_cast<size_t>(r) * cols;
      const double* gr = self.grad.data() + static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += pr[c] * gr[c];
      double* pg = p->grad.data() + static_cast<size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) pg[c] += pr[c] * (gr[c] - dot);
    }
  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_matrix("embedding_lookup", table);
  int v = table.dim(0), d = table.dim(1);
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= v) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[t]) +
                              " at position " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(v));
    }
  }
  int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int t = 0; t < n; ++t) {
    const double* src = table.data().data() + static_cast<size_t>(ids[t]) * d;
    std::copy(src, src + d, out.data() + static_cast<size_t>(t) * d);
  }
  return make_result({n, d}, std::move(out), {table}, [ids, d](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t t = 0; t < ids.size(); ++t) {
      double* dst = p->grad.data() + static_cast<size_t>(ids[t]) * d;
      const double* src = self.grad.data() + t * static_cast<size_t>(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  constexpr double kEps = 1e-5;
  if (x.ndim() < 1 || gain.ndim() != 1 || gain.dim(0) != x.shape().back()) {
    shape_error("rms_norm", x.shape(), gain.shape());
  }
  int cols = x.shape().back();
  int rows = x.numel() / cols;
  std::vector<double> out(x.data().size());
  std::vector<double> inv_rms(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* row = x.data().data() + static_cast<size_t>(r) * cols;
    double ms = 0.0;
    for (int c = 0; c < cols; ++c) ms += row[c] * row[c];
    double ir = 1.0 / std::sqrt(ms / cols + kEps);
    inv_rms[static_cast<size_t>(r)] = ir;
    double* orow = out.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) orow[c] = row[c] * ir * gain.data()[static_cast<size_t>(c)];
  }
  return make_result(x.shape(), std::move(out), {x, gain},
                     [rows, cols, inv_rms](TensorImpl& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    for (int r = 0; r < rows; ++r) {
      const double* xr = px->data.data() + static_cast<size_t>(r) * cols;
      const double* gr = self.grad.data() + static_cast<size_t>(r) * cols;
      double ir = inv_rms[static_cast<size_t>(r)];
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (int c = 0; c < cols; ++c) pg->grad[static_cast<size_t>(c)] += gr[c] * xr[c] * ir;
      }
      if (px->requires_grad) {
        px->ensure_grad();
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += gr[c] * pg->data[static_cast<size_t>(c)] * xr[c];
        double coef = dot * ir * ir * ir / cols;
        double* xg = px->grad.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) {
          xg[c] += gr[c] * pg->data[static_cast<size_t>(c)] * ir - coef * xr[c];
        }
      }
    }
  });
}

MaskedLoss cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                                int ignore_index) {
  require_matrix("cross_entropy_masked", logits);
  int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("cross_entropy_masked: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  }
  double total = 0.0;
  int count = 0;
  std::vector<double> log_probs(logits.data().size());
  for (int r = 0; r < n; ++r) {
    const double* row = logits.data().data() + static_cast<size_t>(r) * v;
    double* lp = log_probs.data() + static_cast<size_t>(r) * v;
    double mx = row[0];
    for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
    double lse = mx + std::log(denom);
    for (int c = 0; c < v; ++c) lp[c] = row[c] - lse;
    if (labels[static_cast<size_t>(r)] == ignore_index) continue;
    int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= v) {
      throw std::out_of_range("cross_entropy_masked: label " + std::to_string(y) +
                              " at row " + std::to_string(r) + " outside vocab " +
                              std::to_string(v));
    }
    total += -lp[y];
    ++count;
  }
  Tensor loss = make_result({1}, {total}, {logits},
                            [n, v, labels, ignore_index,
                             log_probs = std::move(log_probs)](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0];
    for (int r = 0; r < n; ++r) {
      if (labels[static_cast<size_t>(r)] == ignore_index) continue;
      const double* lp = log_probs.data() + static_cast<size_t>(r) * v;
      double* pg = p->grad.data() + static_cast<size_t>(r) * v;
      int y = labels[static_cast<size_t>(r)];
      for (int c = 0; c < v; ++c) pg[c] += g * (std::exp(lp[c]) - (c == y ? 1.0 : 0.0));
    }
  });
  return {loss, count};
}

MaskedLoss kl_divergence_masked(const Tensor& z_teacher, const Tensor& z_student,
                                const std::vector<uint8_t>& mask, double temperature) {
  require_matrix("kl_divergence_masked", z_teacher);
  require_matrix("kl_divergence_masked", z_student);
  if (z_teacher.shape() != z_student.shape()) {
    shape_error("kl_divergence_masked", z_teacher.shape(), z_student.shape());
  }
  if (temperature <= 0.0) {
    throw std::invalid_argument("kl_divergence_masked: temperature must be > 0, got " +
                                std::to_string(temperature));
  }
  int n = z_teacher.dim(0), v = z_teacher.dim(1);
  if (static_cast<int>(mask.size()) != n) {
    throw std::invalid_argument("kl_divergence_masked: mask length " +
                                std::to_string(mask.size()) + " for " +
                                std::to_string(n) + " rows");
  }
  auto log_softmax_row = [v](const double* row, double t, double* out) {
    double mx = row[0] / t;
    for (int c = 1; c < v; ++c) mx = std::max(mx, row[c] / t);
    double denom = 0.0;
    for (int c = 0; c < v; ++c) denom += std::exp(row[c] / t - mx);
    double lse = mx + std::log(denom);
    for (int c = 0; c < v; ++c) out[c] = row[c] / t - lse;
  };
  double total = 0.0;
  int count = 0;
  // Teacher probabilities and student probabilities on counted rows, kept for
  // the backward rule.
  std::vector<double> pt(z_teacher.data().size(), 0.0);
  std::vector<double> ps(z_teacher.data().size(), 0.0);
  std::vector<double> lt(static_cast<size_t>(v)), ls(static_cast<size_t>(v));
  for (int r = 0; r < n; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    log_softmax_row(z_teacher.data().data() + static_cast<size_t>(r) * v, temperature,
                    lt.data());
    log_softmax_row(z_student.data().data() + static_cast<size_t>(r) * v, temperature,
                    ls.data());
    double kl = 0.0;
    for (int c = 0; c < v; ++c) {
      double p = std::exp(lt[static_cast<size_t>(c)]);
      pt[static_cast<size_t>(r) * v + c] = p;
      ps[static_cast<size_t>(r) * v + c] = std::exp(ls[static_cast<size_t>(c)]);
      kl += p * (lt[static_cast<size_t>(c)] - ls[static_cast<size_t>(c)]);
    }
    total += kl;
    ++count;
  }
  Tensor loss = make_result({1}, {total}, {z_student},
                            [n, v, mask, temperature, pt = std::move(pt),
                             ps = std::move(ps)](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0] / temperature;
    for (int r = 0; r < n; ++r) {
      if (!mask[static_cast<size_t>(r)]) continue;
      double* pg = p->grad.data() + static_cast<size_t>(r) * v;
      const double* prow = ps.data() + static_cast<size_t>(r) * v;
      const double* trow = pt.data() + static_cast<size_t>(r) * v;
      for (int c = 0; c < v; ++c) pg[c] += g * (prow[c] - trow[c]);
    }
  });
  return {loss, count};
}

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root.shape()));
  }
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  // Iterative post-order DFS; children appear before parents are finished.
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* next = node->parents[idx].get();
      ++idx;
      if (seen.insert(next).second) stack.emplace_back(next, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.impl()->ensure_grad();
  root.impl()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

double grad_check(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                  std::vector<Tensor>& inputs, double step) {
  Tensor out = fn(inputs);
  for (auto& in : inputs) in.zero_grad();
  backward(out);
  double max_rel = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    for (int i = 0; i < in.numel(); ++i) {
      double orig = in.data()[static_cast<size_t>(i)];
      in.data()[static_cast<size_t>(i)] = orig + step;
      double up = fn(inputs).item();
      in.data()[static_cast<size_t>(i)] = orig - step;
      double dn = fn(inputs).item();
      in.data()[static_cast<size_t>(i)] = orig;
      double numeric = (up - dn) / (2.0 * step);
      double analytic = in.grad()[static_cast<size_t>(i)];
      double denom = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
    }
  }
  return max_rel;
}

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t hash_tensor(const Tensor& t) {
  return fnv1a64(t.data().data(), t.data().size() * sizeof(double));
}

}  // namespace kvd
