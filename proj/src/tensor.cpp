#include "ribtoy/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace ribtoy {

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void need_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << what << ": expected rank " << rank << ", got shape "
       << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

void need_axis(const Tensor& t, std::size_t axis, std::size_t extent,
               const char* what) {
  if (t.shape()[axis] != extent) {
    std::ostringstream os;
    os << what << ": axis " << axis << " must be " << extent << ", got "
       << t.shape()[axis] << " (shape " << shape_str(t.shape()) << ")";
    throw ShapeError(os.str());
  }
}

std::vector<double>& grad_buf(detail::TensorImpl* impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

// Fills cols[(c*3+dy)*3+dx][y*W+x] = input[c][y+dy-1][x+dx-1], zero outside.
void im2col_3x3(const double* in, std::size_t C, std::size_t H, std::size_t W,
                double* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = in + c * HW;
    for (std::size_t dy = 0; dy < 3; ++dy) {
      for (std::size_t dx = 0; dx < 3; ++dx) {
        double* row = cols + ((c * 3 + dy) * 3 + dx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
          double* dst = row + y * W;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + W, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(sy) * W;
          if (dx == 1) {
            std::memcpy(dst, src, W * sizeof(double));
          } else if (dx == 0) {
            dst[0] = 0.0;
            std::memcpy(dst + 1, src, (W - 1) * sizeof(double));
          } else {  // dx == 2
            std::memcpy(dst, src + 1, (W - 1) * sizeof(double));
            dst[W - 1] = 0.0;
          }
        }
      }
    }
  }
}

// Scatter of gcols (the im2col layout) back onto the input gradient.
void col2im_3x3(const double* gcols, std::size_t C, std::size_t H,
                std::size_t W, double* gin) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = gin + c * HW;
    for (std::size_t dy = 0; dy < 3; ++dy) {
      for (std::size_t dx = 0; dx < 3; ++dx) {
        const double* row = gcols + ((c * 3 + dy) * 3 + dx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = plane + static_cast<std::size_t>(sy) * W;
          const double* src = row + y * W;
          if (dx == 1) {
            for (std::size_t x = 0; x < W; ++x) dst[x] += src[x];
          } else if (dx == 0) {
            for (std::size_t x = 1; x < W; ++x) dst[x - 1] += src[x];
          } else {
            for (std::size_t x = 0; x + 1 < W; ++x) dst[x + 1] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double tanh01(double z) { return (std::tanh(z) + 1.0) * 0.5; }

double softsign01(double z) { return (z / (1.0 + std::abs(z)) + 1.0) * 0.5; }

double apply_prob(ProbKind kind, double z) {
  switch (kind) {
    case ProbKind::Sigmoid: return sigmoid(z);
    case ProbKind::Tanh01: return tanh01(z);
    case ProbKind::Softsign01: return softsign01(z);
  }
  throw ValueError("unknown probability squash");
}

void check_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << what << ": non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

// ---------------------------------------------------------------- Tensor

detail::TensorImpl* Tensor::req() const {
  if (!impl_) throw UsageError("operation on a default-constructed tensor");
  return impl_.get();
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_size(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    std::ostringstream os;
    os << "from_data: shape " << shape_str(shape) << " needs "
       << shape_size(shape) << " values, got " << values.size();
    throw ShapeError(os.str());
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const { return req()->shape; }
std::size_t Tensor::size() const { return req()->data.size(); }

std::span<double> Tensor::data() { return {req()->data}; }
std::span<const double> Tensor::data() const { return {req()->data}; }

bool Tensor::requires_grad() const { return req()->requires_grad; }
void Tensor::set_requires_grad(bool value) { req()->requires_grad = value; }

bool Tensor::has_grad() const { return !req()->grad.empty(); }

std::span<double> Tensor::grad() {
  auto* impl = req();
  if (impl->grad.empty())
    throw UsageError("grad(): no gradient has been produced for this tensor");
  return {impl->grad};
}

std::span<const double> Tensor::grad() const {
  return const_cast<Tensor*>(this)->grad();
}

void Tensor::ensure_grad() { grad_buf(req()); }

void Tensor::zero_grad() {
  auto* impl = req();
  std::fill(impl->grad.begin(), impl->grad.end(), 0.0);
}

double Tensor::item() const {
  auto* impl = req();
  if (impl->data.size() != 1)
    throw UsageError("item(): tensor is not scalar, shape " +
                     shape_str(impl->shape));
  return impl->data[0];
}

Tensor Tensor::deep_copy() const {
  auto* impl = req();
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = impl->shape;
  copy->data = impl->data;
  copy->requires_grad = impl->requires_grad;
  return Tensor(std::move(copy));
}

// ------------------------------------------------------------------ Tape

Tensor Tape::fresh(std::vector<std::size_t> shape, bool track) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_size(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = track;
  return Tensor(std::move(impl));
}

void Tape::record(const Tensor& out, std::function<void()> back) {
  out.impl_->node = static_cast<int>(nodes_.size());
  out.impl_->tape = this;
  nodes_.push_back({out.impl_, std::move(back)});
}

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernel,
                    const Tensor& bias) {
  need_rank(input, 4, "conv2d input");
  need_rank(kernel, 4, "conv2d kernel");
  need_rank(bias, 1, "conv2d bias");
  need_axis(kernel, 2, 3, "conv2d kernel");
  need_axis(kernel, 3, 3, "conv2d kernel");
  const std::size_t N = input.shape()[0], C = input.shape()[1];
  const std::size_t H = input.shape()[2], W = input.shape()[3];
  const std::size_t F = kernel.shape()[0];
  need_axis(kernel, 1, C, "conv2d kernel");
  need_axis(bias, 0, F, "conv2d bias");

  const std::size_t HW = H * W, K = C * 9;
  const bool track = input.requires_grad() || kernel.requires_grad() ||
                     bias.requires_grad();
  Tensor out = fresh({N, F, H, W}, track);

  {
    std::vector<double> cols(K * HW);
    ConstMatMap km(kernel.data().data(), static_cast<Eigen::Index>(F),
                   static_cast<Eigen::Index>(K));
    const double* bp = bias.data().data();
    for (std::size_t n = 0; n < N; ++n) {
      im2col_3x3(input.data().data() + n * C * HW, C, H, W, cols.data());
      ConstMatMap cm(cols.data(), static_cast<Eigen::Index>(K),
                     static_cast<Eigen::Index>(HW));
      MatMap om(out.data().data() + n * F * HW, static_cast<Eigen::Index>(F),
                static_cast<Eigen::Index>(HW));
      om.noalias() = km * cm;
      for (std::size_t f = 0; f < F; ++f) {
        double* row = out.data().data() + (n * F + f) * HW;
        const double b = bp[f];
        for (std::size_t u = 0; u < HW; ++u) row[u] += b;
      }
    }
  }
  check_finite(out.data(), "conv2d output");

  if (track) {
    auto in_i = input.impl_, k_i = kernel.impl_, b_i = bias.impl_,
         out_i = out.impl_;
    record(out, [in_i, k_i, b_i, out_i, N, C, F, H, W]() {
      const std::size_t HW = H * W, K = C * 9;
      std::vector<double> cols(K * HW), gcols;
      ConstMatMap km(k_i->data.data(), static_cast<Eigen::Index>(F),
                     static_cast<Eigen::Index>(K));
      const bool want_in = in_i->requires_grad;
      const bool want_k = k_i->requires_grad;
      const bool want_b = b_i->requires_grad;
      if (want_in) {
        gcols.resize(K * HW);
        grad_buf(in_i.get());
      }
      if (want_k) grad_buf(k_i.get());
      if (want_b) grad_buf(b_i.get());
      for (std::size_t n = 0; n < N; ++n) {
        const double* go = out_i->grad.data() + n * F * HW;
        ConstMatMap gom(go, static_cast<Eigen::Index>(F),
                        static_cast<Eigen::Index>(HW));
        if (want_k || want_in)
          im2col_3x3(in_i->data.data() + n * C * HW, C, H, W, cols.data());
        if (want_k) {
          ConstMatMap cm(cols.data(), static_cast<Eigen::Index>(K),
                         static_cast<Eigen::Index>(HW));
          MatMap gkm(k_i->grad.data(), static_cast<Eigen::Index>(F),
                     static_cast<Eigen::Index>(K));
          gkm.noalias() += gom * cm.transpose();
        }
        if (want_in) {
          MatMap gcm(gcols.data(), static_cast<Eigen::Index>(K),
                     static_cast<Eigen::Index>(HW));
          gcm.noalias() = km.transpose() * gom;
          col2im_3x3(gcols.data(), C, H, W, in_i->grad.data() + n * C * HW);
        }
        if (want_b) {
          for (std::size_t f = 0; f < F; ++f) {
            double s = 0.0;
            const double* row = go + f * HW;
            for (std::size_t u = 0; u < HW; ++u) s += row[u];
            b_i->grad[f] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::activation(ActKind kind, const Tensor& input) {
  const std::size_t n = input.size();
  const bool track = input.requires_grad();
  Tensor out = fresh(input.shape(), track);
  const double* x = input.data().data();
  double* y = out.data().data();
  switch (kind) {
    case ActKind::Relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case ActKind::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = sigmoid(x[i]);
      break;
    case ActKind::Tanh01:
      for (std::size_t i = 0; i < n; ++i) y[i] = tanh01(x[i]);
      break;
    case ActKind::Softsign01:
      for (std::size_t i = 0; i < n; ++i) y[i] = softsign01(x[i]);
      break;
  }
  check_finite(out.data(), "activation output");

  if (track) {
    auto in_i = input.impl_, out_i = out.impl_;
    record(out, [kind, in_i, out_i, n]() {
      auto& gin = grad_buf(in_i.get());
      const double* x = in_i->data.data();
      const double* y = out_i->data.data();
      const double* go = out_i->grad.data();
      switch (kind) {
        case ActKind::Relu:
          for (std::size_t i = 0; i < n; ++i)
            if (x[i] > 0.0) gin[i] += go[i];
          break;
        case ActKind::Sigmoid:
          for (std::size_t i = 0; i < n; ++i)
            gin[i] += go[i] * y[i] * (1.0 - y[i]);
          break;
        case ActKind::Tanh01:
          // p = (tanh+1)/2 so dp/dz = 2 p (1-p)
          for (std::size_t i = 0; i < n; ++i)
            gin[i] += go[i] * 2.0 * y[i] * (1.0 - y[i]);
          break;
        case ActKind::Softsign01: {
          for (std::size_t i = 0; i < n; ++i) {
            const double d = 1.0 + std::abs(x[i]);
            gin[i] += go[i] * 0.5 / (d * d);
          }
          break;
        }
      }
    });
  }
  return out;
}

Tensor Tape::gap(const Tensor& feature) {
  need_rank(feature, 4, "gap input");
  const std::size_t N = feature.shape()[0], F = feature.shape()[1];
  const std::size_t HW = feature.shape()[2] * feature.shape()[3];
  const bool track = feature.requires_grad();
  Tensor out = fresh({N, F}, track);
  const double* x = feature.data().data();
  double* y = out.data().data();
  for (std::size_t nf = 0; nf < N * F; ++nf) {
    double s = 0.0;
    const double* row = x + nf * HW;
    for (std::size_t u = 0; u < HW; ++u) s += row[u];
    y[nf] = s / static_cast<double>(HW);
  }
  check_finite(out.data(), "gap output");

  if (track) {
    auto in_i = feature.impl_, out_i = out.impl_;
    record(out, [in_i, out_i, N, F, HW]() {
      auto& gin = grad_buf(in_i.get());
      const double* go = out_i->grad.data();
      for (std::size_t nf = 0; nf < N * F; ++nf) {
        const double g = go[nf] / static_cast<double>(HW);
        double* row = gin.data() + nf * HW;
        for (std::size_t u = 0; u < HW; ++u) row[u] += g;
      }
    });
  }
  return out;
}

GndrpResult Tape::gndrp(const Tensor& feature, const Tensor& cam, double tau) {
  need_rank(feature, 4, "gndrp feature");
  need_rank(cam, 3, "gndrp cam");
  const std::size_t N = feature.shape()[0], F = feature.shape()[1];
  const std::size_t H = feature.shape()[2], W = feature.shape()[3];
  need_axis(cam, 0, N, "gndrp cam");
  need_axis(cam, 1, H, "gndrp cam");
  need_axis(cam, 2, W, "gndrp cam");
  const std::size_t HW = H * W;

  GndrpResult res;
  res.fallback.assign(N, 0);
  // Selection sets are fixed here; backward reuses them verbatim.
  auto sel = std::make_shared<std::vector<std::vector<std::uint32_t>>>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double* cm = cam.data().data() + n * HW;
    auto& s = (*sel)[n];
    for (std::size_t u = 0; u < HW; ++u)
      if (cm[u] <= tau) s.push_back(static_cast<std::uint32_t>(u));
    if (s.empty()) {
      double mn = cm[0];
      for (std::size_t u = 1; u < HW; ++u) mn = std::min(mn, cm[u]);
      for (std::size_t u = 0; u < HW; ++u)
        if (cm[u] == mn) s.push_back(static_cast<std::uint32_t>(u));
      res.fallback[n] = 1;
      ++res.fallback_count;
    }
  }

  const bool track = feature.requires_grad();
  Tensor out = fresh({N, F}, track);
  const double* x = feature.data().data();
  double* y = out.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const auto& s = (*sel)[n];
    const double cnt = static_cast<double>(s.size());
    for (std::size_t f = 0; f < F; ++f) {
      const double* row = x + (n * F + f) * HW;
      double acc = 0.0;
      for (std::uint32_t u : s) acc += row[u];
      y[n * F + f] = acc / cnt;
    }
  }
  check_finite(out.data(), "gndrp output");

  if (track) {
    auto in_i = feature.impl_, out_i = out.impl_;
    record(out, [in_i, out_i, sel, N, F, HW]() {
      auto& gin = grad_buf(in_i.get());
      const double* go = out_i->grad.data();
      for (std::size_t n = 0; n < N; ++n) {
        const auto& s = (*sel)[n];
        const double cnt = static_cast<double>(s.size());
        for (std::size_t f = 0; f < F; ++f) {
          const double g = go[n * F + f] / cnt;
          double* row = gin.data() + (n * F + f) * HW;
          for (std::uint32_t u : s) row[u] += g;
        }
      }
    });
  }
  res.pooled = out;
  return res;
}

Tensor Tape::linear(const Tensor& input, const Tensor& weight,
                    const Tensor& bias) {
  need_rank(input, 2, "linear input");
  need_rank(weight, 2, "linear weight");
  need_rank(bias, 1, "linear bias");
  const std::size_t N = input.shape()[0], F = input.shape()[1];
  const std::size_t C = weight.shape()[0];
  need_axis(weight, 1, F, "linear weight");
  need_axis(bias, 0, C, "linear bias");

  const bool track = input.requires_grad() || weight.requires_grad() ||
                     bias.requires_grad();
  Tensor out = fresh({N, C}, track);
  const double* x = input.data().data();
  const double* w = weight.data().data();
  const double* b = bias.data().data();
  double* y = out.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double s = b[c];
      for (std::size_t f = 0; f < F; ++f) s += x[n * F + f] * w[c * F + f];
      y[n * C + c] = s;
    }
  check_finite(out.data(), "linear output");

  if (track) {
    auto in_i = input.impl_, w_i = weight.impl_, b_i = bias.impl_,
         out_i = out.impl_;
    record(out, [in_i, w_i, b_i, out_i, N, F, C]() {
      const double* go = out_i->grad.data();
      if (in_i->requires_grad) {
        auto& gx = grad_buf(in_i.get());
        const double* w = w_i->data.data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const double g = go[n * C + c];
            for (std::size_t f = 0; f < F; ++f)
              gx[n * F + f] += g * w[c * F + f];
          }
      }
      if (w_i->requires_grad) {
        auto& gw = grad_buf(w_i.get());
        const double* x = in_i->data.data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const double g = go[n * C + c];
            for (std::size_t f = 0; f < F; ++f)
              gw[c * F + f] += g * x[n * F + f];
          }
      }
      if (b_i->requires_grad) {
        auto& gb = grad_buf(b_i.get());
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) gb[c] += go[n * C + c];
      }
    });
  }
  return out;
}

namespace {
void need_binary_labels(const Tensor& labels) {
  const double* t = labels.data().data();
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (t[i] != 0.0 && t[i] != 1.0) {
      std::ostringstream os;
      os << "labels must be exactly 0 or 1, got " << t[i] << " at flat index "
         << i;
      throw ValueError(os.str());
    }
}
}  // namespace

Tensor Tape::bce_loss(const Tensor& logits, const Tensor& labels,
                      ProbKind prob_kind) {
  need_rank(logits, 2, "bce_loss logits");
  if (labels.shape() != logits.shape())
    throw ShapeError("bce_loss: labels shape " + shape_str(labels.shape()) +
                     " does not match logits shape " +
                     shape_str(logits.shape()));
  need_binary_labels(labels);
  constexpr double kEps = 1e-7;
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  const double* y = logits.data().data();
  const double* t = labels.data().data();

  // d(loss)/d(logit) is fixed at forward time and replayed in backward.
  auto dldy = std::make_shared<std::vector<double>>(N * C, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < N * C; ++i) {
    const double p = apply_prob(prob_kind, y[i]);
    const double pc = std::clamp(p, kEps, 1.0 - kEps);
    total -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
    if (p > kEps && p < 1.0 - kEps) {
      double dp;  // derivative of the squash at this logit
      switch (prob_kind) {
        case ProbKind::Sigmoid: dp = p * (1.0 - p); break;
        case ProbKind::Tanh01: dp = 2.0 * p * (1.0 - p); break;
        case ProbKind::Softsign01: {
          const double d = 1.0 + std::abs(y[i]);
          dp = 0.5 / (d * d);
          break;
        }
        default: dp = 0.0;
      }
      (*dldy)[i] = (-t[i] / pc + (1.0 - t[i]) / (1.0 - pc)) * dp /
                   static_cast<double>(N);
    }
  }
  const double value = total / static_cast<double>(N);
  if (!std::isfinite(value)) throw NumericError("bce_loss: non-finite loss");

  const bool track = logits.requires_grad();
  Tensor out = fresh({1}, track);
  out.data()[0] = value;
  if (track) {
    auto in_i = logits.impl_, out_i = out.impl_;
    record(out, [in_i, out_i, dldy]() {
      auto& gin = grad_buf(in_i.get());
      const double g = out_i->grad[0];
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += g * (*dldy)[i];
    });
  }
  return out;
}

Tensor Tape::rib_loss(const Tensor& logits, const Tensor& labels,
                      double margin) {
  need_rank(logits, 2, "rib_loss logits");
  if (labels.shape() != logits.shape())
    throw ShapeError("rib_loss: labels shape " + shape_str(labels.shape()) +
                     " does not match logits shape " +
                     shape_str(logits.shape()));
  if (!(margin > 0.0))
    throw ValueError("rib_loss: margin must be positive");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  const double* y = logits.data().data();
  const double* t = labels.data().data();

  double total = 0.0;
  for (std::size_t i = 0; i < N * C; ++i)
    total -= t[i] * std::min(margin, y[i]);
  const double value = total / static_cast<double>(N);
  if (!std::isfinite(value)) throw NumericError("rib_loss: non-finite loss");

  const bool track = logits.requires_grad();
  Tensor out = fresh({1}, track);
  out.data()[0] = value;
  if (track) {
    auto in_i = logits.impl_, lab_i = labels.impl_, out_i = out.impl_;
    record(out, [in_i, lab_i, out_i, margin, N, C]() {
      auto& gin = grad_buf(in_i.get());
      const double g = out_i->grad[0];
      const double* y = in_i->data.data();
      const double* t = lab_i->data.data();
      // Exactly -t/N below the margin, exactly 0 at or above it.
      for (std::size_t i = 0; i < N * C; ++i)
        if (y[i] < margin)
          gin[i] += g * (-t[i] / static_cast<double>(N));
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& t) {
  const bool track = t.requires_grad();
  Tensor out = fresh({1}, track);
  double s = 0.0;
  const double* x = t.data().data();
  for (std::size_t i = 0; i < t.size(); ++i) s += x[i];
  out.data()[0] = s;
  check_finite(out.data(), "sum output");
  if (track) {
    auto in_i = t.impl_, out_i = out.impl_;
    record(out, [in_i, out_i]() {
      auto& gin = grad_buf(in_i.get());
      const double g = out_i->grad[0];
      for (double& v : gin) v += g;
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const bool track = a.requires_grad() || b.requires_grad();
  Tensor out = fresh(a.shape(), track);
  const double* xa = a.data().data();
  const double* xb = b.data().data();
  double* y = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = xa[i] + xb[i];
  check_finite(out.data(), "add output");
  if (track) {
    auto a_i = a.impl_, b_i = b.impl_, out_i = out.impl_;
    record(out, [a_i, b_i, out_i]() {
      const double* go = out_i->grad.data();
      if (a_i->requires_grad) {
        auto& ga = grad_buf(a_i.get());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (b_i->requires_grad) {
        auto& gb = grad_buf(b_i.get());
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const bool track = a.requires_grad() || b.requires_grad();
  Tensor out = fresh(a.shape(), track);
  const double* xa = a.data().data();
  const double* xb = b.data().data();
  double* y = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = xa[i] * xb[i];
  check_finite(out.data(), "mul output");
  if (track) {
    auto a_i = a.impl_, b_i = b.impl_, out_i = out.impl_;
    record(out, [a_i, b_i, out_i]() {
      const double* go = out_i->grad.data();
      if (a_i->requires_grad) {
        auto& ga = grad_buf(a_i.get());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] += go[i] * b_i->data[i];
      }
      if (b_i->requires_grad) {
        auto& gb = grad_buf(b_i.get());
        for (std::size_t i = 0; i < gb.size(); ++i)
          gb[i] += go[i] * a_i->data[i];
      }
    });
  }
  return out;
}

Tensor Tape::select(const Tensor& t, std::size_t flat_index) {
  if (flat_index >= t.size())
    throw ShapeError("select: flat index out of range");
  const bool track = t.requires_grad();
  Tensor out = fresh({1}, track);
  out.data()[0] = t.data()[flat_index];
  if (track) {
    auto in_i = t.impl_, out_i = out.impl_;
    record(out, [in_i, out_i, flat_index]() {
      grad_buf(in_i.get())[flat_index] += out_i->grad[0];
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  auto* impl = loss.req();
  if (impl->node < 0 || impl->tape != this)
    throw UsageError(
        "backward: loss is detached from this tape (no recorded op produced "
        "it here)");
  if (impl->data.size() != 1)
    throw UsageError("backward: loss must be scalar");
  const int root = impl->node;
  // Intermediate grads are per-pass scratch; leaf grads persist and
  // accumulate across calls.
  for (int i = 0; i <= root; ++i) {
    auto& out = nodes_[static_cast<std::size_t>(i)].out;
    if (!out->grad.empty())
      std::fill(out->grad.begin(), out->grad.end(), 0.0);
  }
  grad_buf(impl)[0] = 1.0;
  for (int i = root; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.out->grad.empty()) continue;  // not reached from the root
    node.back();
  }
}

}  // namespace ribtoy
