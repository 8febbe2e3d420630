#include "mixtrain/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mixtrain/errors.hpp"

namespace mixtrain {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using Entry = typename GradientTape<T>::Entry;
template <typename T>
using StoragePtr = typename GradientTape<T>::StoragePtr;

// Records `out` on the active tape when any defined input requires grad.
// The rule sees inputs in the order given here (undefined inputs skipped).
template <typename T, typename Rule>
Tensor<T> finish(Tensor<T> out, OpKind kind, std::initializer_list<const Tensor<T>*> inputs, Rule&& rule) {
  auto* tape = GradientTape<T>::active();
  if (!tape) return out;
  bool any = false;
  std::vector<StoragePtr<T>> stored;
  for (const auto* t : inputs) {
    if (!t->defined()) continue;
    any = any || t->requires_grad();
    stored.push_back(t->storage());
  }
  if (!any) return out;
  tape->record(kind, std::move(stored), out.storage(), std::forward<Rule>(rule));
  return out;
}

void require_defined(bool defined, const char* op) {
  if (!defined) throw ValidationError(std::string(op) + ": undefined tensor operand");
}

// Equal shapes, or one side holds a single element.
enum class Broadcast { equal, left_scalar, right_scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_defined(a.defined() && b.defined(), op);
  if (a.shape() == b.shape()) return Broadcast::equal;
  if (b.numel() == 1) return Broadcast::right_scalar;
  if (a.numel() == 1) return Broadcast::left_scalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

// Adds `factor * g` into `target`, reducing to a single element when the
// target is the broadcast scalar side.
template <typename T>
void accumulate_broadcast(detail::TensorData<T>& target, std::span<const T> g, T factor) {
  if (!target.requires_grad) return;
  auto dst = target.ensure_grad();
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
  } else {
    T acc = 0;
    for (auto v : g) acc += v;
    dst[0] += factor * acc;
  }
}

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, OpKind kind, const char* name) {
  const Broadcast bc = broadcast_kind(a, b, name);
  const Shape shape = bc == Broadcast::left_scalar ? b.shape() : a.shape();
  Tensor<T> out(shape);
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  const std::size_t n = y.size();
  auto lhs = [&](std::size_t i) { return bc == Broadcast::left_scalar ? x0[0] : x0[i]; };
  auto rhs = [&](std::size_t i) { return bc == Broadcast::right_scalar ? x1[0] : x1[i]; };
  switch (kind) {
    case OpKind::add:
      for (std::size_t i = 0; i < n; ++i) y[i] = lhs(i) + rhs(i);
      break;
    case OpKind::sub:
      for (std::size_t i = 0; i < n; ++i) y[i] = lhs(i) - rhs(i);
      break;
    default:
      for (std::size_t i = 0; i < n; ++i) y[i] = lhs(i) * rhs(i);
      break;
  }
  return finish(std::move(out), kind, {&a, &b}, [kind, bc](const Entry<T>& e) {
    std::span<const T> g = e.output->grad;
    auto& ea = *e.inputs[0];
    auto& eb = *e.inputs[1];
    if (kind == OpKind::add || kind == OpKind::sub) {
      accumulate_broadcast(ea, g, T(1));
      accumulate_broadcast(eb, g, kind == OpKind::add ? T(1) : T(-1));
      return;
    }
    // mul: d/da = g * b, d/db = g * a
    const std::size_t n = g.size();
    std::vector<T> tmp(n);
    if (ea.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) tmp[i] = g[i] * (bc == Broadcast::right_scalar ? eb.data[0] : eb.data[i]);
      accumulate_broadcast(ea, std::span<const T>(tmp), T(1));
    }
    if (eb.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) tmp[i] = g[i] * (bc == Broadcast::left_scalar ? ea.data[0] : ea.data[i]);
      accumulate_broadcast(eb, std::span<const T>(tmp), T(1));
    }
  });
}

template <typename T>
constexpr T gelu_c() {
  return static_cast<T>(0.79788456080286535587989211986876);  // sqrt(2/pi)
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a.defined() && b.defined(), "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor<T> out(Shape{a.dim(0), b.dim(1)});
  MatMap<T>(out.data().data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return finish(std::move(out), OpKind::matmul, {&a, &b}, [m, k, n](const Entry<T>& e) {
    ConstMatMap<T> dc(e.output->grad.data(), m, n);
    auto& ea = *e.inputs[0];
    auto& eb = *e.inputs[1];
    if (ea.requires_grad)
      MatMap<T>(ea.ensure_grad().data(), m, k).noalias() += dc * ConstMatMap<T>(eb.data.data(), k, n).transpose();
    if (eb.requires_grad)
      MatMap<T>(eb.ensure_grad().data(), k, n).noalias() += ConstMatMap<T>(ea.data.data(), m, k).transpose() * dc;
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, OpKind::add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, OpKind::sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, OpKind::mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_defined(a.defined(), "scale");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  return finish(std::move(out), OpKind::scale, {&a}, [factor](const Entry<T>& e) {
    auto& in = *e.inputs[0];
    auto dx = in.ensure_grad();
    const auto& g = e.output->grad;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  require_defined(a.defined(), "relu");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return finish(std::move(out), OpKind::relu, {&a}, [](const Entry<T>& e) {
    auto& in = *e.inputs[0];
    auto dx = in.ensure_grad();
    const auto& g = e.output->grad;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in.data[i] > T(0)) dx[i] += g[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  require_defined(a.defined(), "gelu");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  constexpr T c = gelu_c<T>();
  constexpr T k = T(0.044715);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  return finish(std::move(out), OpKind::gelu, {&a}, [](const Entry<T>& e) {
    auto& in = *e.inputs[0];
    auto dx = in.ensure_grad();
    const auto& g = e.output->grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T v = in.data[i];
      const T th = std::tanh(c * (v + k * v * v * v));
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
      dx[i] += g[i] * d;
    }
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  require_defined(a.defined(), "exp");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(x[i]);
  return finish(std::move(out), OpKind::exp, {&a}, [](const Entry<T>& e) {
    auto dx = e.inputs[0]->ensure_grad();
    const auto& g = e.output->grad;
    const auto& y = e.output->data;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  require_defined(a.defined(), "log");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log(x[i]);
  return finish(std::move(out), OpKind::log, {&a}, [](const Entry<T>& e) {
    auto& in = *e.inputs[0];
    auto dx = in.ensure_grad();
    const auto& g = e.output->grad;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] / in.data[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require_defined(a.defined(), "sum");
  T acc = 0;
  for (auto v : a.data()) acc += v;
  return finish(Tensor<T>::scalar(acc), OpKind::sum, {&a}, [](const Entry<T>& e) {
    auto dx = e.inputs[0]->ensure_grad();
    const T g = e.output->grad[0];
    for (auto& d : dx) d += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require_defined(a.defined(), "mean");
  T acc = 0;
  for (auto v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return finish(Tensor<T>::scalar(acc * inv), OpKind::mean, {&a}, [inv](const Entry<T>& e) {
    auto dx = e.inputs[0]->ensure_grad();
    const T g = e.output->grad[0] * inv;
    for (auto& d : dx) d += g;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require_defined(a.defined(), "reshape");
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_string(a.shape()) + " cannot become " + shape_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  return finish(std::move(out), OpKind::reshape, {&a}, [](const Entry<T>& e) {
    e.inputs[0]->accumulate_grad(e.output->grad);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_defined(x.defined() && weight.defined(), "linear");
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(0))
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  const std::size_t in = weight.dim(0);
  const std::size_t outw = weight.dim(1);
  if (bias.defined() && bias.numel() != outw)
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " for " + std::to_string(outw) +
                         " outputs");
  const auto rows = static_cast<Eigen::Index>(x.numel() / in);
  const auto ei = static_cast<Eigen::Index>(in);
  const auto eo = static_cast<Eigen::Index>(outw);
  Shape shape = x.shape();
  shape.back() = outw;
  Tensor<T> out(std::move(shape));
  MatMap<T> y(out.data().data(), rows, eo);
  if (bias.defined())
    y.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), eo);
  else
    y.setZero();
  y.noalias() += ConstMatMap<T>(x.data().data(), rows, ei) * ConstMatMap<T>(weight.data().data(), ei, eo);
  const bool has_bias = bias.defined();
  return finish(std::move(out), OpKind::linear, {&x, &weight, &bias}, [rows, ei, eo, has_bias](const Entry<T>& e) {
    ConstMatMap<T> dy(e.output->grad.data(), rows, eo);
    auto& ex = *e.inputs[0];
    auto& ew = *e.inputs[1];
    if (ex.requires_grad)
      MatMap<T>(ex.ensure_grad().data(), rows, ei).noalias() += dy * ConstMatMap<T>(ew.data.data(), ei, eo).transpose();
    if (ew.requires_grad)
      MatMap<T>(ew.ensure_grad().data(), ei, eo).noalias() += ConstMatMap<T>(ex.data.data(), rows, ei).transpose() * dy;
    if (has_bias && e.inputs[2]->requires_grad) {
      auto db = e.inputs[2]->ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < eo; ++c) db[static_cast<std::size_t>(c)] += dy(r, c);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_defined(x.defined() && gamma.defined() && beta.defined(), "layer_norm");
  const std::size_t width = x.shape().back();
  if (gamma.numel() != width || beta.numel() != width)
    throw DimensionError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " for input " + shape_string(x.shape()));
  const std::size_t rows = x.numel() / width;
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  auto gs = gamma.data();
  auto bs = beta.data();
  // normalized values and 1/std are kept for the backward rule
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * width;
    T mu = 0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(width);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < width; ++c) {
      const T h = (row[c] - mu) * rs;
      (*xhat)[r * width + c] = h;
      ys[r * width + c] = h * gs[c] + bs[c];
    }
  }
  return finish(std::move(out), OpKind::layer_norm, {&x, &gamma, &beta}, [xhat, rstd, rows, width](const Entry<T>& e) {
    const auto& g = e.output->grad;
    auto& ex = *e.inputs[0];
    auto& eg = *e.inputs[1];
    auto& eb = *e.inputs[2];
    if (eg.requires_grad || eb.requires_grad) {
      std::vector<T> dgamma(width, T(0)), dbeta(width, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) {
          dgamma[c] += g[r * width + c] * (*xhat)[r * width + c];
          dbeta[c] += g[r * width + c];
        }
      if (eg.requires_grad) eg.accumulate_grad(dgamma);
      if (eb.requires_grad) eb.accumulate_grad(dbeta);
    }
    if (!ex.requires_grad) return;
    auto dx = ex.ensure_grad();
    std::vector<T> gh(width);
    const T inv_w = T(1) / static_cast<T>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      T mean_gh = 0, mean_ghx = 0;
      for (std::size_t c = 0; c < width; ++c) {
        gh[c] = g[r * width + c] * eg.data[c];
        mean_gh += gh[c];
        mean_ghx += gh[c] * (*xhat)[r * width + c];
      }
      mean_gh *= inv_w;
      mean_ghx *= inv_w;
      const T rs = (*rstd)[r];
      for (std::size_t c = 0; c < width; ++c)
        dx[r * width + c] += rs * (gh[c] - mean_gh - (*xhat)[r * width + c] * mean_ghx);
    }
  });
}

template <typename T>
Tensor<T> add_position(const Tensor<T>& x, const Tensor<T>& pos) {
  require_defined(x.defined() && pos.defined(), "add_position");
  if (x.rank() != 3 || pos.rank() != 2 || x.dim(1) != pos.dim(0) || x.dim(2) != pos.dim(1))
    throw DimensionError("add_position: " + shape_string(x.shape()) + " vs " + shape_string(pos.shape()));
  const std::size_t block = pos.numel();
  const std::size_t batch = x.dim(0);
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ps = pos.data();
  auto ys = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < block; ++i) ys[b * block + i] = xs[b * block + i] + ps[i];
  return finish(std::move(out), OpKind::add_position, {&x, &pos}, [block, batch](const Entry<T>& e) {
    const auto& g = e.output->grad;
    if (e.inputs[0]->requires_grad) e.inputs[0]->accumulate_grad(g);
    if (e.inputs[1]->requires_grad) {
      auto dp = e.inputs[1]->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < block; ++i) dp[i] += g[b * block + i];
    }
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t heads) {
  require_defined(qkv.defined(), "attention");
  if (qkv.rank() != 3 || heads == 0 || qkv.dim(2) % (3 * heads) != 0)
    throw DimensionError("attention: packed projections " + shape_string(qkv.shape()) + " with " +
                         std::to_string(heads) + " heads");
  const std::size_t batch = qkv.dim(0);
  const std::size_t tokens = qkv.dim(1);
  const std::size_t width = qkv.dim(2) / 3;
  const std::size_t head_dim = width / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(head_dim));
  const auto t = static_cast<Eigen::Index>(tokens);
  const auto dh = static_cast<Eigen::Index>(head_dim);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * width));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(width));

  Tensor<T> out(Shape{batch, tokens, width});
  // softmax probabilities per (batch, head), kept for backward
  auto probs = std::make_shared<std::vector<T>>(batch * heads * tokens * tokens);
  const T* src = qkv.data().data();
  T* dst = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = src + b * tokens * 3 * width;
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> q(base + h * head_dim, t, dh, in_stride);
      ConstStridedMap<T> k(base + width + h * head_dim, t, dh, in_stride);
      ConstStridedMap<T> v(base + 2 * width + h * head_dim, t, dh, in_stride);
      MatMap<T> p(probs->data() + (b * heads + h) * tokens * tokens, t, t);
      p.noalias() = q * k.transpose();
      for (Eigen::Index r = 0; r < t; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < t; ++c) mx = std::max(mx, p(r, c));
        T z = 0;
        for (Eigen::Index c = 0; c < t; ++c) {
          p(r, c) = std::exp((p(r, c) - mx) * sc);
          z += p(r, c);
        }
        const T inv = T(1) / z;
        for (Eigen::Index c = 0; c < t; ++c) p(r, c) *= inv;
      }
      StridedMap<T> o(dst + b * tokens * width + h * head_dim, t, dh, out_stride);
      o.noalias() = p * v;
    }
  }
  return finish(std::move(out), OpKind::attention, {&qkv},
                [probs, batch, tokens, width, heads, head_dim, sc, t, dh](const Entry<T>& e) {
                  auto& in = *e.inputs[0];
                  const T* src = in.data.data();
                  T* dsrc = in.ensure_grad().data();
                  const T* gout = e.output->grad.data();
                  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * width));
                  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(width));
                  RowMat<T> dp(t, t);
                  for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t off = b * tokens * 3 * width;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t col = h * head_dim;
                      ConstStridedMap<T> q(src + off + col, t, dh, in_stride);
                      ConstStridedMap<T> k(src + off + width + col, t, dh, in_stride);
                      ConstStridedMap<T> v(src + off + 2 * width + col, t, dh, in_stride);
                      StridedMap<T> dq(dsrc + off + col, t, dh, in_stride);
                      StridedMap<T> dk(dsrc + off + width + col, t, dh, in_stride);
                      StridedMap<T> dv(dsrc + off + 2 * width + col, t, dh, in_stride);
                      ConstStridedMap<T> go(gout + b * tokens * width + col, t, dh, out_stride);
                      ConstMatMap<T> p(probs->data() + (b * heads + h) * tokens * tokens, t, t);
                      dv.noalias() += p.transpose() * go;
                      dp.noalias() = go * v.transpose();
                      for (Eigen::Index r = 0; r < t; ++r) {
                        T dot = 0;
                        for (Eigen::Index c = 0; c < t; ++c) dot += dp(r, c) * p(r, c);
                        for (Eigen::Index c = 0; c < t; ++c) dp(r, c) = p(r, c) * (dp(r, c) - dot) * sc;
                      }
                      dq.noalias() += dp * k;
                      dk.noalias() += dp.transpose() * q;
                    }
                  }
                });
}

template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  require_defined(x.defined(), "mean_tokens");
  if (x.rank() != 3) throw DimensionError("mean_tokens: expected [b,t,e], got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
  Tensor<T> out(Shape{batch, width});
  auto xs = x.data();
  auto ys = out.data();
  const T inv = T(1) / static_cast<T>(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t c = 0; c < width; ++c) ys[b * width + c] += xs[(b * tokens + i) * width + c];
    for (std::size_t c = 0; c < width; ++c) ys[b * width + c] *= inv;
  }
  return finish(std::move(out), OpKind::mean_tokens, {&x}, [batch, tokens, width, inv](const Entry<T>& e) {
    auto dx = e.inputs[0]->ensure_grad();
    const auto& g = e.output->grad;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t c = 0; c < width; ++c) dx[(b * tokens + i) * width + c] += g[b * width + c] * inv;
  });
}

template <typename T>
Tensor<T> replace_tokens(const Tensor<T>& x, const Tensor<T>& token, std::span<const std::size_t> indices) {
  require_defined(x.defined() && token.defined(), "replace_tokens");
  if (x.rank() != 3 || token.numel() != x.dim(2))
    throw DimensionError("replace_tokens: token " + shape_string(token.shape()) + " for features " +
                         shape_string(x.shape()));
  const std::size_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
  std::vector<std::uint8_t> replaced(tokens, 0);
  for (auto i : indices) {
    if (i >= tokens) throw ValidationError("replace_tokens: index " + std::to_string(i) + " out of range");
    replaced[i] = 1;
  }
  Tensor<T> out(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  auto ys = out.data();
  auto tk = token.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (auto i : indices) std::copy(tk.begin(), tk.end(), ys.begin() + static_cast<std::ptrdiff_t>((b * tokens + i) * width));
  return finish(std::move(out), OpKind::replace_tokens, {&x, &token},
                [replaced = std::move(replaced), batch, tokens, width](const Entry<T>& e) {
                  const auto& g = e.output->grad;
                  auto& ex = *e.inputs[0];
                  auto& et = *e.inputs[1];
                  std::span<T> dx = ex.requires_grad ? ex.ensure_grad() : std::span<T>();
                  std::span<T> dt = et.requires_grad ? et.ensure_grad() : std::span<T>();
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < tokens; ++i) {
                      const std::size_t row = (b * tokens + i) * width;
                      if (replaced[i]) {
                        if (!dt.empty())
                          for (std::size_t c = 0; c < width; ++c) dt[c] += g[row + c];
                      } else if (!dx.empty()) {
                        for (std::size_t c = 0; c < width; ++c) dx[row + c] += g[row + c];
                      }
                    }
                });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_defined(logits.defined(), "softmax_cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("softmax_cross_entropy: logits " + shape_string(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (auto y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  std::vector<int> ys(labels.begin(), labels.end());
  auto z = logits.data();
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z.data() + b * classes;
    T* p = probs->data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T s = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(row[c] - mx);
      s += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= s;
    total += std::log(s) + mx - row[ys[b]];
  }
  const T inv_b = T(1) / static_cast<T>(batch);
  return finish(Tensor<T>::scalar(total * inv_b), OpKind::softmax_cross_entropy, {&logits},
                [probs, ys = std::move(ys), batch, classes, inv_b](const Entry<T>& e) {
                  auto dz = e.inputs[0]->ensure_grad();
                  const T g = e.output->grad[0] * inv_b;
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t c = 0; c < classes; ++c) {
                      const T onehot = static_cast<std::size_t>(ys[b]) == c ? T(1) : T(0);
                      dz[b * classes + c] += g * ((*probs)[b * classes + c] - onehot);
                    }
                });
}

namespace {

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Mask* mask) {
  require_defined(pred.defined() && target.defined(), "mse");
  if (pred.shape() != target.shape())
    throw DimensionError("mse: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
  const std::size_t n = pred.numel();
  if (mask && mask->size() != n)
    throw DimensionError("mse: mask has " + std::to_string(mask->size()) + " entries for " + std::to_string(n));
  std::size_t count = n;
  if (mask) {
    count = static_cast<std::size_t>(std::count_if(mask->begin(), mask->end(), [](auto m) { return m != 0; }));
    if (count == 0) throw ValidationError("mse: mask selects no positions");
  }
  auto ps = pred.data();
  auto ts = target.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    const T d = ps[i] - ts[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(count);
  std::shared_ptr<const Mask> saved = mask ? std::make_shared<const Mask>(*mask) : nullptr;
  return finish(Tensor<T>::scalar(acc * inv), OpKind::mse, {&pred, &target}, [saved, inv, n](const Entry<T>& e) {
    auto& ep = *e.inputs[0];
    auto& et = *e.inputs[1];
    const T g = e.output->grad[0] * T(2) * inv;
    std::span<T> dp = ep.requires_grad ? ep.ensure_grad() : std::span<T>();
    std::span<T> dt = et.requires_grad ? et.ensure_grad() : std::span<T>();
    for (std::size_t i = 0; i < n; ++i) {
      if (saved && !(*saved)[i]) continue;
      const T d = g * (ep.data[i] - et.data[i]);
      if (!dp.empty()) dp[i] += d;
      if (!dt.empty()) dt[i] -= d;
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  return masked_mse(pred, target, nullptr);
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, const Mask& mask) {
  return masked_mse(pred, target, &mask);
}

#define MIXTRAIN_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                            \
  template Tensor<T> exp(const Tensor<T>&);                                                             \
  template Tensor<T> log(const Tensor<T>&);                                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> add_position(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> attention(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> mean_tokens(const Tensor<T>&);                                                     \
  template Tensor<T> replace_tokens(const Tensor<T>&, const Tensor<T>&, std::span<const std::size_t>);  \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&, const Mask&);

MIXTRAIN_INSTANTIATE_OPS(float)
MIXTRAIN_INSTANTIATE_OPS(double)

#undef MIXTRAIN_INSTANTIATE_OPS

}  // namespace mixtrain
