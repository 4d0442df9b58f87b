#include "pointnorm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pointnorm/kernels.hpp"

namespace pointnorm {

namespace {

constexpr std::size_t kParallelMin = 1 << 14;

// Runs f(c0, c1) over contiguous column ranges of a rows x cols matrix, one
// range per thread. Per-column loops inside f stay in row order.
template <typename F>
void for_column_ranges(std::size_t rows, std::size_t cols, F&& f) {
  const std::size_t ranges = rows * cols > kParallelMin
                                 ? std::max<std::size_t>(1, std::min<std::size_t>(kernels::max_threads(), cols / 16))
                                 : 1;
#pragma omp parallel for schedule(static) if (ranges > 1)
  for (std::size_t part = 0; part < ranges; ++part) f(cols * part / ranges, cols * (part + 1) / ranges);
}

// Strides of `small` viewed inside `big` (right-aligned); broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& small, const Shape& big) {
  std::vector<std::size_t> out(big.size(), 0);
  const auto natural = strides_of(small);
  const std::size_t offset = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    out[offset + i] = small[i] == 1 ? 0 : natural[i];
  }
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Calls f(flat_big, flat_a, flat_b) for every element of `big`, rows in
// parallel. Only safe when f writes to flat_big exclusively.
template <typename F>
void for_each_broadcast(const Shape& big, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(big);
  if (total == 0) return;
  if (big.empty()) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = big.back();
  const std::size_t rows = total / inner;
  const std::size_t ia = sa.back();
  const std::size_t ib = sb.back();
  const std::size_t rank = big.size();
#pragma omp parallel for schedule(static) if (total > kParallelMin)
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t rem = r;
    std::size_t base_a = 0;
    std::size_t base_b = 0;
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      const std::size_t idx = rem % big[axis];
      rem /= big[axis];
      base_a += idx * sa[axis];
      base_b += idx * sb[axis];
    }
    for (std::size_t j = 0; j < inner; ++j) f(r * inner + j, base_a + j * ia, base_b + j * ib);
  }
}

// Serial variant for scatter-style accumulation where several big elements
// map to the same small element.
template <typename F>
void for_each_broadcast_serial(const Shape& big, const std::vector<std::size_t>& sa, F&& f) {
  const std::size_t total = numel(big);
  if (total == 0) return;
  if (big.empty()) {
    f(0, 0);
    return;
  }
  const std::size_t rank = big.size();
  const std::size_t inner = big.back();
  const std::size_t ia = sa.back();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t base = 0;
  for (std::size_t r = 0, rows = total / inner; r < rows; ++r) {
    for (std::size_t j = 0; j < inner; ++j) f(r * inner + j, base + j * ia);
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      base += sa[axis];
      if (++counter[axis] < big[axis]) break;
      base -= sa[axis] * big[axis];
      counter[axis] = 0;
    }
  }
}

bool is_full(const std::vector<std::size_t>& strides, const Shape& big) {
  return strides == strides_of(big);
}

// Accumulates g[big] into grad[small] via the broadcast map, with optional
// per-element factor.
template <typename T, typename Factor>
void accumulate_broadcast(const Shape& big, const std::vector<std::size_t>& strides,
                          std::span<const T> g, std::span<T> grad, Factor&& factor) {
  if (is_full(strides, big)) {
    const std::size_t n = g.size();
#pragma omp parallel for schedule(static) if (n > kParallelMin)
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i] * factor(i);
  } else {
    for_each_broadcast_serial(big, strides, [&](std::size_t o, std::size_t s) { grad[s] += g[o] * factor(o); });
  }
}

enum class BinaryKind { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, std::string_view name) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<T> value(numel(out));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = value.data();
  switch (kind) {
    case BinaryKind::Add:
      for_each_broadcast(out, sa, sb, [=](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] + bv[j]; });
      break;
    case BinaryKind::Sub:
      for_each_broadcast(out, sa, sb, [=](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] - bv[j]; });
      break;
    case BinaryKind::Mul:
      for_each_broadcast(out, sa, sb, [=](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] * bv[j]; });
      break;
    case BinaryKind::Div:
      for_each_broadcast(out, sa, sb, [=](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] / bv[j]; });
      break;
  }
  return make_result<T>(out, std::move(value), {a, b}, name, [out, sa, sb, kind](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    std::span<const T> g = self.grad;
    // Broadcast view of each operand's values for the product rules.
    auto gather = [&](const std::vector<std::size_t>& strides, const std::vector<T>& src) {
      std::vector<T> full(numel(out));
      for_each_broadcast(out, strides, strides, [&](std::size_t o, std::size_t i, std::size_t) { full[o] = src[i]; });
      return full;
    };
    if (na.requires_grad) {
      auto ga = na.ensure_grad();
      switch (kind) {
        case BinaryKind::Add:
        case BinaryKind::Sub:
          accumulate_broadcast<T>(out, sa, g, ga, [](std::size_t) { return T(1); });
          break;
        case BinaryKind::Mul: {
          auto bfull = gather(sb, nb.value);
          accumulate_broadcast<T>(out, sa, g, ga, [&](std::size_t o) { return bfull[o]; });
          break;
        }
        case BinaryKind::Div: {
          auto bfull = gather(sb, nb.value);
          accumulate_broadcast<T>(out, sa, g, ga, [&](std::size_t o) { return T(1) / bfull[o]; });
          break;
        }
      }
    }
    if (nb.requires_grad) {
      auto gb = nb.ensure_grad();
      switch (kind) {
        case BinaryKind::Add:
          accumulate_broadcast<T>(out, sb, g, gb, [](std::size_t) { return T(1); });
          break;
        case BinaryKind::Sub:
          accumulate_broadcast<T>(out, sb, g, gb, [](std::size_t) { return T(-1); });
          break;
        case BinaryKind::Mul: {
          auto afull = gather(sa, na.value);
          accumulate_broadcast<T>(out, sb, g, gb, [&](std::size_t o) { return afull[o]; });
          break;
        }
        case BinaryKind::Div: {
          auto afull = gather(sa, na.value);
          auto bfull = gather(sb, nb.value);
          accumulate_broadcast<T>(out, sb, g, gb,
                                  [&](std::size_t o) { return -afull[o] / (bfull[o] * bfull[o]); });
          break;
        }
      }
    }
  });
}

// Unary elementwise op given forward f(x) and derivative df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, std::string_view name, F f, DF df) {
  const std::size_t n = x.numel();
  std::vector<T> value(n);
  const T* xv = x.values().data();
#pragma omp parallel for schedule(static) if (n > kParallelMin)
  for (std::size_t i = 0; i < n; ++i) value[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(value), {x}, name, [df](TensorNode<T>& self) {
    auto& in = *self.inputs[0];
    auto gx = in.ensure_grad();
    const std::size_t count = self.grad.size();
#pragma omp parallel for schedule(static) if (count > kParallelMin)
    for (std::size_t i = 0; i < count; ++i) gx[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

std::vector<std::size_t> check_axes(const std::vector<std::size_t>& axes, std::size_t rank, std::string_view op) {
  if (axes.empty()) throw ArgumentError(std::string(op) + ": empty axis set");
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.back() >= rank) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(sorted.back()) + " out of range for rank " +
                     std::to_string(rank));
  }
  return sorted;
}

Shape reduced_shape(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out = shape;
  for (std::size_t a : axes) out[a] = 1;
  return out;
}

Shape squeeze_axes(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!std::binary_search(axes.begin(), axes.end(), i)) out.push_back(shape[i]);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Mul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Div, "div");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return unary(x, "mul_scalar", [s](T v) { return v * s; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  return make_result<T>({}, {total}, {x}, "sum", [](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  T total = 0;
  for (T v : x.values()) total += v;
  return make_result<T>({}, {total / n}, {x}, "mean", [n](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    const T g = self.grad[0] / n;
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes_in, bool keepdims) {
  const auto axes = check_axes(axes_in, x.rank(), "reduce_sum");
  const Shape kept = reduced_shape(x.shape(), axes);
  const auto so = broadcast_strides(kept, x.shape());
  std::vector<T> value(numel(kept), T(0));
  const T* xv = x.values().data();
  for_each_broadcast_serial(x.shape(), so, [&](std::size_t i, std::size_t o) { value[o] += xv[i]; });
  const Shape in_shape = x.shape();
  Shape out_shape = keepdims ? kept : squeeze_axes(x.shape(), axes);
  return make_result<T>(out_shape, std::move(value), {x}, "reduce_sum", [in_shape, so](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    const T* g = self.grad.data();
    for_each_broadcast(in_shape, so, so, [&](std::size_t i, std::size_t o, std::size_t) { gx[i] += g[o]; });
  });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<std::size_t>& axes_in, bool keepdims) {
  const auto axes = check_axes(axes_in, x.rank(), "reduce_mean");
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.dim(a);
  const Shape kept = reduced_shape(x.shape(), axes);
  const auto so = broadcast_strides(kept, x.shape());
  std::vector<T> value(numel(kept), T(0));
  const T* xv = x.values().data();
  for_each_broadcast_serial(x.shape(), so, [&](std::size_t i, std::size_t o) { value[o] += xv[i]; });
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : value) v *= inv;
  const Shape in_shape = x.shape();
  Shape out_shape = keepdims ? kept : squeeze_axes(x.shape(), axes);
  return make_result<T>(out_shape, std::move(value), {x}, "reduce_mean", [in_shape, so, inv](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    const T* g = self.grad.data();
    for_each_broadcast(in_shape, so, so, [&](std::size_t i, std::size_t o, std::size_t) { gx[i] += g[o] * inv; });
  });
}

template <typename T>
Tensor<T> reduce_rms(const Tensor<T>& x, const std::vector<std::size_t>& axes_in, bool keepdims) {
  const auto axes = check_axes(axes_in, x.rank(), "reduce_rms");
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.dim(a);
  const Shape kept = reduced_shape(x.shape(), axes);
  const auto so = broadcast_strides(kept, x.shape());
  std::vector<T> value(numel(kept), T(0));
  const T* xv = x.values().data();
  for_each_broadcast_serial(x.shape(), so, [&](std::size_t i, std::size_t o) { value[o] += xv[i] * xv[i]; });
  const T n = static_cast<T>(count);
  for (auto& v : value) v = std::sqrt(v / n);
  const Shape in_shape = x.shape();
  Shape out_shape = keepdims ? kept : squeeze_axes(x.shape(), axes);
  return make_result<T>(out_shape, std::move(value), {x}, "reduce_rms", [in_shape, so, n](TensorNode<T>& self) {
    auto& in = *self.inputs[0];
    auto gx = in.ensure_grad();
    const T* g = self.grad.data();
    const T* rms = self.value.data();
    const T* xv = in.value.data();
    for_each_broadcast(in_shape, so, so, [&](std::size_t i, std::size_t o, std::size_t) {
      if (rms[o] > T(0)) gx[i] += g[o] * xv[i] / (n * rms[o]);
    });
  });
}

template <typename T>
MeanStd<T> reduce_mean_std(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdims) {
  auto mu = reduce_mean(x, axes, true);
  auto sd = reduce_rms(sub(x, mu), axes, true);
  if (!keepdims) {
    const auto sorted = check_axes(axes, x.rank(), "reduce_mean_std");
    const Shape out = squeeze_axes(x.shape(), sorted);
    return {reshape(mu, out), reshape(sd, out)};
  }
  return {mu, sd};
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<T> value(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(value), {x}, "reshape", [](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  const Shape out = broadcast_shape(x.shape(), shape, "broadcast_to");
  if (out != shape) {
    throw DimensionError("broadcast_to: " + to_string(x.shape()) + " cannot expand to " + to_string(shape));
  }
  const auto sx = broadcast_strides(x.shape(), shape);
  std::vector<T> value(numel(shape));
  const T* xv = x.values().data();
  for_each_broadcast(shape, sx, sx, [&](std::size_t o, std::size_t i, std::size_t) { value[o] = xv[i]; });
  return make_result<T>(shape, std::move(value), {x}, "broadcast_to", [shape, sx](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    accumulate_broadcast<T>(shape, sx, self.grad, gx, [](std::size_t) { return T(1); });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw IndexError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw DimensionError("concat: rank mismatch " + to_string(probe));
    for (std::size_t i = 0; i < probe.size(); ++i) {
      if (i != axis && probe[i] != first[i]) {
        throw DimensionError("concat: shapes " + to_string(first) + " and " + to_string(probe) + " differ off-axis");
      }
    }
    out[axis] += probe[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> chunk;
  for (const auto& p : parts) chunk.push_back(p.dim(axis) * inner);
  const std::size_t row = out[axis] * inner;
  std::vector<T> value(numel(out));
#pragma omp parallel for schedule(static) if (value.size() > kParallelMin)
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = o * row;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const T* src = parts[p].values().data() + o * chunk[p];
      std::copy(src, src + chunk[p], value.data() + offset);
      offset += chunk[p];
    }
  }
  return make_result<T>(out, std::move(value), parts, "concat", [outer, row, chunk](TensorNode<T>& self) {
    std::size_t start = 0;
    for (std::size_t p = 0; p < chunk.size(); ++p) {
      auto& in = *self.inputs[p];
      if (in.requires_grad) {
        auto g = in.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * row + start;
          T* dst = g.data() + o * chunk[p];
          for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += src[i];
        }
      }
      start += chunk[p];
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices, const Shape& index_shape) {
  if (x.rank() != 3) throw DimensionError("gather_rows: expected [B, N, d], got " + to_string(x.shape()));
  if (index_shape.empty() || index_shape[0] != x.dim(0) || numel(index_shape) != indices.size()) {
    throw DimensionError("gather_rows: index shape " + to_string(index_shape) + " does not match " +
                         to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t d = x.dim(2);
  const std::size_t per_batch = indices.size() / batch;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " >= " + std::to_string(n) +
                       " at position " + std::to_string(i));
    }
  }
  Shape out = index_shape;
  out.push_back(d);
  std::vector<T> value(indices.size() * d);
  const T* xv = x.values().data();
#pragma omp parallel for schedule(static) if (value.size() > kParallelMin)
  for (std::size_t q = 0; q < indices.size(); ++q) {
    const std::size_t b = q / per_batch;
    const T* src = xv + (b * n + indices[q]) * d;
    std::copy(src, src + d, value.data() + q * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>(out, std::move(value), {x}, "gather_rows",
                        [idx = std::move(idx), batch, n, d, per_batch](TensorNode<T>& self) {
                          auto gx = self.inputs[0]->ensure_grad();
#pragma omp parallel for schedule(static) if (batch > 1)
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t q = b * per_batch; q < (b + 1) * per_batch; ++q) {
                              T* dst = gx.data() + (b * n + idx[q]) * d;
                              const T* src = self.grad.data() + q * d;
                              for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("fully_connected: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t d_in = weight.dim(0);
  const std::size_t d_out = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
    throw DimensionError("fully_connected: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / d_in;
  Shape out = x.shape();
  out.back() = d_out;
  std::vector<T> value(rows * d_out);
  kernels::gemm<T>(false, false, rows, d_out, d_in, T(1), x.values(), weight.values(), T(0), value);
  if (bias.defined()) kernels::add_row_bias<T>(rows, d_out, bias.values(), value);
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out, std::move(value), inputs, "fully_connected", [rows, d_in, d_out](TensorNode<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    std::span<const T> g = self.grad;
    if (nx.requires_grad) {
      kernels::gemm<T>(false, true, rows, d_in, d_out, T(1), g, nw.value, T(1), nx.ensure_grad());
    }
    if (nw.requires_grad) {
      kernels::gemm<T>(true, false, d_in, d_out, rows, T(1), nx.value, g, T(1), nw.ensure_grad());
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      std::vector<T> sums(d_out);
      kernels::column_sums<T>(rows, d_out, g, sums);
      auto gb = self.inputs[2]->ensure_grad();
      for (std::size_t j = 0; j < d_out; ++j) gb[j] += sums[j];
    }
  });
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  if (x.rank() == 0) throw DimensionError("channel_affine: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t ds = scale.numel();
  if ((ds != d && ds != 1) || shift.numel() != ds) {
    throw DimensionError("channel_affine: input " + to_string(x.shape()) + " with scale " + to_string(scale.shape()) +
                         " and shift " + to_string(shift.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> value(x.numel());
  const T* xv = x.values().data();
  const T* sv = scale.values().data();
  const T* bv = shift.values().data();
#pragma omp parallel for schedule(static) if (value.size() > kParallelMin)
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t p = ds == 1 ? 0 : c;
      value[r * d + c] = xv[r * d + c] * sv[p] + bv[p];
    }
  }
  return make_result<T>(x.shape(), std::move(value), {x, scale, shift}, "channel_affine",
                        [rows, d, ds](TensorNode<T>& self) {
                          auto& nx = *self.inputs[0];
                          auto& ns = *self.inputs[1];
                          auto& nb = *self.inputs[2];
                          const T* g = self.grad.data();
                          if (nx.requires_grad) {
                            auto gx = nx.ensure_grad();
#pragma omp parallel for schedule(static) if (rows * d > kParallelMin)
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < d; ++c) {
                                gx[r * d + c] += g[r * d + c] * ns.value[ds == 1 ? 0 : c];
                              }
                            }
                          }
                          if (ns.requires_grad || nb.requires_grad) {
                            std::vector<T> prod(rows * d);
                            for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = g[i] * nx.value[i];
                            std::vector<T> gs(d), gb(d);
                            kernels::column_sums<T>(rows, d, prod, gs);
                            kernels::column_sums<T>(rows, d, self.grad, gb);
                            if (ds == 1) {
                              gs[0] = std::accumulate(gs.begin(), gs.end(), T(0));
                              gb[0] = std::accumulate(gb.begin(), gb.end(), T(0));
                            }
                            if (ns.requires_grad) {
                              auto dst = ns.ensure_grad();
                              for (std::size_t c = 0; c < ds; ++c) dst[c] += gs[c];
                            }
                            if (nb.requires_grad) {
                              auto dst = nb.ensure_grad();
                              for (std::size_t c = 0; c < ds; ++c) dst[c] += gb[c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, BatchNormOptions options) {
  if (x.rank() == 0) throw DimensionError("batch_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d || running_mean.numel() != d || running_var.numel() != d) {
    throw DimensionError("batch_norm: input " + to_string(x.shape()) + " with " + std::to_string(gamma.numel()) +
                         " channels of parameters");
  }
  const std::size_t rows = x.numel() / d;
  const T eps = static_cast<T>(options.eps);
  std::vector<T> mu(d), invstd(d);
  if (options.training) {
    std::vector<T> s(d), s2(d);
    kernels::column_sums<T>(rows, d, x.values(), s);
    for (std::size_t c = 0; c < d; ++c) mu[c] = s[c] / static_cast<T>(rows);
    // Second pass on centered values keeps the variance non-negative.
    const T* xv = x.values().data();
    for_column_ranges(rows, d, [&](std::size_t c0, std::size_t c1) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        for (std::size_t c = c0; c < c1; ++c) {
          const T v = row[c] - mu[c];
          s2[c] += v * v;
        }
      }
    });
    auto rm = running_mean.mutable_values();
    auto rv = running_var.mutable_values();
    const T mom = static_cast<T>(options.momentum);
    for (std::size_t c = 0; c < d; ++c) {
      const T var = s2[c] / static_cast<T>(rows);
      invstd[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = rows > 1 ? s2[c] / static_cast<T>(rows - 1) : var;
      rm[c] = (T(1) - mom) * rm[c] + mom * mu[c];
      rv[c] = (T(1) - mom) * rv[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      mu[c] = running_mean.values()[c];
      invstd[c] = T(1) / std::sqrt(running_var.values()[c] + eps);
    }
  }
  std::vector<T> value(x.numel());
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
#pragma omp parallel for schedule(static) if (value.size() > kParallelMin)
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      value[r * d + c] = (xv[r * d + c] - mu[c]) * invstd[c] * gv[c] + bv[c];
    }
  }
  const bool training = options.training;
  return make_result<T>(x.shape(), std::move(value), {x, gamma, beta}, "batch_norm",
                        [rows, d, mu, invstd, training](TensorNode<T>& self) {
                          auto& nx = *self.inputs[0];
                          auto& ng = *self.inputs[1];
                          auto& nb = *self.inputs[2];
                          const T* g = self.grad.data();
                          const T* xv = nx.value.data();
                          std::vector<T> sum_g(d), sum_gx(d);
                          for_column_ranges(rows, d, [&](std::size_t c0, std::size_t c1) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = c0; c < c1; ++c) {
                                const T gi = g[r * d + c];
                                sum_g[c] += gi;
                                sum_gx[c] += gi * (xv[r * d + c] - mu[c]) * invstd[c];
                              }
                            }
                          });
                          if (ng.requires_grad) {
                            auto dst = ng.ensure_grad();
                            for (std::size_t c = 0; c < d; ++c) dst[c] += sum_gx[c];
                          }
                          if (nb.requires_grad) {
                            auto dst = nb.ensure_grad();
                            for (std::size_t c = 0; c < d; ++c) dst[c] += sum_g[c];
                          }
                          if (!nx.requires_grad) return;
                          auto gx = nx.ensure_grad();
                          const T n = static_cast<T>(rows);
#pragma omp parallel for schedule(static) if (rows * d > kParallelMin)
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < d; ++c) {
                              const std::size_t i = r * d + c;
                              const T scale = ng.value[c] * invstd[c];
                              if (training) {
                                const T xhat = (xv[i] - mu[c]) * invstd[c];
                                gx[i] += scale * (g[i] - sum_g[c] / n - xhat * sum_gx[c] / n);
                              } else {
                                gx[i] += scale * g[i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> max_pool_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw IndexError("max_pool_axis: axis " + std::to_string(axis) + " out of range for shape " + to_string(x.shape()));
  }
  const std::size_t extent = x.dim(axis);
  if (extent == 0) throw ArgumentError("max_pool_axis: empty axis");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> value(outer * inner);
  std::vector<std::size_t> argmax(outer * inner);
  kernels::max_middle_axis<T>(outer, extent, inner, x.values(), value, argmax);
  return make_result<T>(out, std::move(value), {x}, "max_pool_axis",
                        [argmax = std::move(argmax), extent, inner](TensorNode<T>& self) {
                          auto gx = self.inputs[0]->ensure_grad();
                          for (std::size_t q = 0; q < argmax.size(); ++q) {
                            const std::size_t o = q / inner;
                            const std::size_t i = q % inner;
                            gx[(o * extent + argmax[q]) * inner + i] += self.grad[q];
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ArgumentError("dropout: p must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) {
    // 53-bit uniform from raw engine output; distribution objects are not
    // portable across standard libraries.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < p ? T(0) : keep_scale;
  }
  std::vector<T> value(x.numel());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = x.values()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(value), {x}, "dropout", [mask = std::move(mask)](TensorNode<T>& self) {
    auto gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, std::span<const std::int64_t> labels, double smoothing) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("label_smoothed_ce: logits " + to_string(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ArgumentError("label_smoothed_ce: smoothing must be in [0, 1)");
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw IndexError("label_smoothed_ce: label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
  }
  const T s = static_cast<T>(smoothing);
  const T off = s / static_cast<T>(classes);
  const T on = T(1) - s + off;
  std::vector<T> probs(batch * classes);
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = logits.values().data() + b * classes;
    const T zmax = *std::max_element(z, z + classes);
    T denom = 0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const T log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      const T log_p = z[c] - zmax - log_denom;
      probs[b * classes + c] = std::exp(log_p);
      const T target = static_cast<std::size_t>(labels[b]) == c ? on : off;
      total -= target * log_p;
    }
  }
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  return make_result<T>({}, {total / static_cast<T>(batch)}, {logits}, "label_smoothed_ce",
                        [probs = std::move(probs), lab = std::move(lab), batch, classes, on, off](TensorNode<T>& self) {
                          auto gx = self.inputs[0]->ensure_grad();
                          const T scale = self.grad[0] / static_cast<T>(batch);
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T target = static_cast<std::size_t>(lab[b]) == c ? on : off;
                              gx[b * classes + c] += scale * (probs[b * classes + c] - target);
                            }
                          }
                        });
}

template <typename T>
void check_finite(const Tensor<T>& x, std::string_view what) {
  const auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

#define POINTNORM_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                     \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                                     \
  template Tensor<T> neg<T>(const Tensor<T>&);                                                               \
  template Tensor<T> square<T>(const Tensor<T>&);                                                            \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                                                              \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                               \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                              \
  template Tensor<T> reduce_sum<T>(const Tensor<T>&, const std::vector<std::size_t>&, bool);                 \
  template Tensor<T> reduce_mean<T>(const Tensor<T>&, const std::vector<std::size_t>&, bool);                \
  template Tensor<T> reduce_rms<T>(const Tensor<T>&, const std::vector<std::size_t>&, bool);                 \
  template MeanStd<T> reduce_mean_std<T>(const Tensor<T>&, const std::vector<std::size_t>&, bool);           \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> broadcast_to<T>(const Tensor<T>&, const Shape&);                                        \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                                  \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>, const Shape&);           \
  template Tensor<T> fully_connected<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> channel_affine<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,         \
                                   Tensor<T>&, BatchNormOptions);                                            \
  template Tensor<T> max_pool_axis<T>(const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, std::mt19937_64&);                           \
  template Tensor<T> label_smoothed_ce<T>(const Tensor<T>&, std::span<const std::int64_t>, double);          \
  template void check_finite<T>(const Tensor<T>&, std::string_view);

POINTNORM_INSTANTIATE_OPS(float)
POINTNORM_INSTANTIATE_OPS(double)

#undef POINTNORM_INSTANTIATE_OPS

}  // namespace pointnorm
