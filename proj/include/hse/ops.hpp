#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "hse/tensor.hpp"

// Differentiable op set. Every op takes an optional tape; with tape == nullptr
// (or when no input is tracked) it is a pure computation. Broadcasting is
// deliberately narrow: equal shapes, a scalar, or a channel vector [C] /
// [C,1,1] stretched across a [C,H,W] map.

namespace hse {

namespace detail {

// ---- raw matmul kernels (accumulate into C) --------------------------------

template <typename T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void mm_acc_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void mm_acc_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
bool tracked(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins)
    if (t->node >= 0) return true;
  return false;
}

// Broadcast pattern of operand `small` against the full shape.
struct BcastPattern {
  enum Kind { kSame, kScalar, kChannel } kind = kSame;
  std::size_t inner = 1;  // H*W for kChannel
};

inline bool channel_vec_matches(const std::vector<int>& full, const std::vector<int>& small) {
  if (full.size() != 3) return false;
  if (small.size() == 1) return small[0] == full[0];
  if (small.size() == 3) return small[0] == full[0] && small[1] == 1 && small[2] == 1;
  return false;
}

inline BcastPattern classify_bcast(const std::vector<int>& full, const std::vector<int>& small,
                                   const char* op) {
  BcastPattern p;
  if (full == small) {
    p.kind = BcastPattern::kSame;
  } else if (checked_numel(small) == 1) {
    p.kind = BcastPattern::kScalar;
  } else if (channel_vec_matches(full, small)) {
    p.kind = BcastPattern::kChannel;
    p.inner = static_cast<std::size_t>(full[1]) * static_cast<std::size_t>(full[2]);
  } else {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(full) + " and " + shape_str(small) +
                         " are not broadcastable");
  }
  return p;
}

inline std::size_t bcast_index(const BcastPattern& p, std::size_t i) {
  switch (p.kind) {
    case BcastPattern::kSame: return i;
    case BcastPattern::kScalar: return 0;
    case BcastPattern::kChannel: return i / p.inner;
  }
  return 0;
}

// Reduce a full-shape gradient onto the broadcast operand.
template <typename T>
std::vector<T> bcast_reduce(const BcastPattern& p, const std::vector<T>& g, std::size_t small_numel) {
  if (p.kind == BcastPattern::kSame) return g;
  std::vector<T> out(small_numel, T(0));
  for (std::size_t i = 0; i < g.size(); ++i) out[bcast_index(p, i)] += g[i];
  return out;
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

enum class BinOp { add, sub, mul };

template <typename T>
Tensor<T> binary_elementwise(Tape<T>* tape, BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
  using detail::BcastPattern;
  const char* name = op == BinOp::add ? "add" : op == BinOp::sub ? "sub" : "mul";
  // decide which side (if any) broadcasts
  bool b_small = true;
  if (a.shape == b.shape) {
    b_small = true;  // kSame either way
  } else if (a.numel() < b.numel()) {
    b_small = false;
  }
  const Tensor<T>& full = b_small ? a : b;
  const Tensor<T>& small = b_small ? b : a;
  BcastPattern p = detail::classify_bcast(full.shape, small.shape, name);

  Tensor<T> out(full.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T av = b_small ? a.data[i] : a.data[detail::bcast_index(p, i)];
    const T bv = b_small ? b.data[detail::bcast_index(p, i)] : b.data[i];
    switch (op) {
      case BinOp::add: out.data[i] = av + bv; break;
      case BinOp::sub: out.data[i] = av - bv; break;
      case BinOp::mul: out.data[i] = av * bv; break;
    }
  }

  if (detail::tracked(tape, {&a, &b})) {
    const int an = a.node, bn = b.node;
    std::vector<T> adata, bdata;
    if (op == BinOp::mul) {
      adata = a.data;
      bdata = b.data;
    }
    const std::size_t a_numel = a.numel(), b_numel = b.numel();
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      auto expand = [&](const std::vector<T>& v, bool is_small, std::size_t i) {
        return is_small ? v[detail::bcast_index(p, i)] : v[i];
      };
      if (an >= 0) {
        std::vector<T> g(og.size());
        for (std::size_t i = 0; i < og.size(); ++i)
          g[i] = op == BinOp::mul ? og[i] * expand(bdata, b_small, i) : og[i];
        if (!b_small)
          t.accumulate(an, detail::bcast_reduce(p, g, a_numel));
        else
          t.accumulate(an, g);
      }
      if (bn >= 0) {
        std::vector<T> g(og.size());
        for (std::size_t i = 0; i < og.size(); ++i) {
          T v = op == BinOp::mul ? og[i] * expand(adata, !b_small, i) : og[i];
          g[i] = op == BinOp::sub ? -v : v;
        }
        if (b_small)
          t.accumulate(bn, detail::bcast_reduce(p, g, b_numel));
        else
          t.accumulate(bn, g);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(tape, BinOp::add, a, b);
}
template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(tape, BinOp::sub, a, b);
}
template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(tape, BinOp::mul, a, b);
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, double s) {
  return mul(tape, a, Tensor<T>::scalar(static_cast<T>(s)));
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    std::vector<T> xdata = x.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(og.size());
      for (std::size_t i = 0; i < og.size(); ++i) g[i] = xdata[i] > T(0) ? og[i] : T(0);
      t.accumulate(xn, g);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x.data[i];
    out.data[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    std::vector<T> y = out.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(og.size());
      for (std::size_t i = 0; i < og.size(); ++i) g[i] = og[i] * y[i] * (T(1) - y[i]);
      t.accumulate(xn, g);
    });
  }
  return out;
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, std::vector<int> new_shape) {
  if (checked_numel(new_shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape) + " -> " + shape_str(new_shape));
  Tensor<T> out(std::move(new_shape), x.data);
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) { t.accumulate(xn, og); });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d expects a matrix, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor<T> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out(j, i) = x(i, j);
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(og.size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          g[static_cast<std::size_t>(i) * n + j] = og[static_cast<std::size_t>(j) * m + i];
      t.accumulate(xn, g);
    });
  }
  return out;
}

// Concatenate along `dim`; all other extents must agree.
template <typename T>
Tensor<T> concat(Tape<T>* tape, const std::vector<Tensor<T>>& parts, int dim) {
  if (parts.empty()) throw ArgumentError("concat of zero tensors");
  const int rank = parts[0].rank();
  if (dim < 0 || dim >= rank) throw DimensionError("concat dim out of range");
  std::vector<int> out_shape = parts[0].shape;
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != dim && p.shape[d] != out_shape[d])
        throw DimensionError("concat extent mismatch: " + shape_str(p.shape) + " vs " + shape_str(out_shape));
    total += p.shape[dim];
  }
  out_shape[dim] = total;

  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= static_cast<std::size_t>(out_shape[d]);
  for (int d = dim + 1; d < rank; ++d) inner *= static_cast<std::size_t>(out_shape[d]);

  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;  // span offset per part, in units of dim extent
  {
    std::size_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const std::size_t span = static_cast<std::size_t>(p.shape[dim]);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = p.data.data() + o * span * inner;
        T* dst = out.data.data() + (o * static_cast<std::size_t>(total) + off) * inner;
        std::copy(src, src + span * inner, dst);
      }
      off += span;
    }
  }

  bool any = false;
  for (const auto& p : parts) any = any || p.node >= 0;
  if (tape && any) {
    std::vector<int> nodes;
    std::vector<int> spans;
    for (const auto& p : parts) {
      nodes.push_back(p.node);
      spans.push_back(p.shape[dim]);
    }
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const std::size_t span = static_cast<std::size_t>(spans[pi]);
        if (nodes[pi] >= 0) {
          std::vector<T> g(outer * span * inner);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = og.data() + (o * static_cast<std::size_t>(total) + off) * inner;
            std::copy(src, src + span * inner, g.data() + o * span * inner);
          }
          t.accumulate(nodes[pi], g);
        }
        off += span;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(Tape<T>* tape, const Tensor<T>& x, int dim, int start, int len) {
  const int rank = x.rank();
  if (dim < 0 || dim >= rank) throw DimensionError("slice dim out of range");
  if (start < 0 || len <= 0 || start + len > x.shape[dim])
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(x.shape));
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= static_cast<std::size_t>(x.shape[d]);
  for (int d = dim + 1; d < rank; ++d) inner *= static_cast<std::size_t>(x.shape[d]);
  const std::size_t span = static_cast<std::size_t>(x.shape[dim]);

  std::vector<int> out_shape = x.shape;
  out_shape[dim] = len;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x.data.data() + (o * span + static_cast<std::size_t>(start)) * inner;
    std::copy(src, src + static_cast<std::size_t>(len) * inner, out.data.data() + o * static_cast<std::size_t>(len) * inner);
  }
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    const std::size_t xnumel = x.numel();
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(xnumel, T(0));
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = og.data() + o * static_cast<std::size_t>(len) * inner;
        std::copy(src, src + static_cast<std::size_t>(len) * inner,
                  g.data() + (o * span + static_cast<std::size_t>(start)) * inner);
      }
      t.accumulate(xn, g);
    });
  }
  return out;
}

// Tile a channel vector v[C] to shape [C, tail...].
template <typename T>
Tensor<T> tile_channel(Tape<T>* tape, const Tensor<T>& v, std::vector<int> tail) {
  if (v.rank() != 1) throw DimensionError("tile_channel expects a vector, got " + shape_str(v.shape));
  const int c = v.shape[0];
  std::vector<int> out_shape;
  out_shape.push_back(c);
  for (int e : tail) out_shape.push_back(e);
  const std::size_t inner = checked_numel(tail);
  Tensor<T> out(out_shape);
  for (int ci = 0; ci < c; ++ci)
    std::fill_n(out.data.begin() + static_cast<std::size_t>(ci) * inner, inner, v.data[static_cast<std::size_t>(ci)]);
  if (detail::tracked(tape, {&v})) {
    const int vn = v.node;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(static_cast<std::size_t>(c), T(0));
      for (int ci = 0; ci < c; ++ci) {
        T acc = T(0);
        const T* src = og.data() + static_cast<std::size_t>(ci) * inner;
        for (std::size_t j = 0; j < inner; ++j) acc += src[j];
        g[static_cast<std::size_t>(ci)] = acc;
      }
      t.accumulate(vn, g);
    });
  }
  return out;
}

// ---- matmul -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw DimensionError("matmul " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out({m, n});
  detail::mm_acc(a.data.data(), b.data.data(), out.data.data(), m, k, n);
  if (detail::tracked(tape, {&a, &b})) {
    const int an = a.node, bn = b.node;
    std::vector<T> adata = a.data, bdata = b.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      if (an >= 0) {
        std::vector<T> ga(static_cast<std::size_t>(m) * k, T(0));
        detail::mm_acc_nt(og.data(), bdata.data(), ga.data(), m, n, k);  // og[m,n] * b[k,n]^T
        t.accumulate(an, ga);
      }
      if (bn >= 0) {
        std::vector<T> gb(static_cast<std::size_t>(k) * n, T(0));
        detail::mm_acc_tn(adata.data(), og.data(), gb.data(), m, k, n);  // a[m,k]^T * og[m,n]
        t.accumulate(bn, gb);
      }
    });
  }
  return out;
}

// W[m,n] * x[n] + b[m]
template <typename T>
Tensor<T> affine(Tape<T>* tape, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& x) {
  Tensor<T> col = reshape(tape, x, {x.shape[0], 1});
  Tensor<T> y = matmul(tape, w, col);
  y = reshape(tape, y, {w.shape[0]});
  return add(tape, y, b);
}

// ---- softmax ----------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_lastdim on rank-0 tensor");
  const int n = x.shape.back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Tensor<T> out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data.data() + r * n;
    T* yr = out.data.data() + r * n;
    T mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= s;
  }
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    std::vector<T> y = out.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(og.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * n;
        const T* gr = og.data() + r * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
        T* out_g = g.data() + r * n;
        for (int j = 0; j < n; ++j) out_g[j] = yr[j] * (gr[j] - dot);
      }
      t.accumulate(xn, g);
    });
  }
  return out;
}

// ---- conv2d -----------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation, kernels [C_out, C_in, k, k], odd k.
template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kern, int stride, int pad) {
  if (x.rank() != 3 || kern.rank() != 4 || kern.shape[1] != x.shape[0])
    throw DimensionError("conv2d " + shape_str(x.shape) + " with kernels " + shape_str(kern.shape));
  if (kern.shape[2] != kern.shape[3] || kern.shape[2] % 2 == 0)
    throw DimensionError("conv2d kernel must be square with odd extent, got " + shape_str(kern.shape));
  if (stride < 1 || pad < 0) throw ArgumentError("conv2d stride/padding");
  const int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int cout = kern.shape[0], ks = kern.shape[2];
  const int h2 = conv_out_extent(h, ks, stride, pad);
  const int w2 = conv_out_extent(w, ks, stride, pad);
  if (h2 < 1 || w2 < 1)
    throw DimensionError("conv2d output extent " + std::to_string(h2) + "x" + std::to_string(w2) +
                         " for input " + shape_str(x.shape));

  Tensor<T> out({cout, h2, w2});
  auto forward = [&](const T* xd, const T* kd, T* od) {
    for (int oc = 0; oc < cout; ++oc) {
      T* oplane = od + static_cast<std::size_t>(oc) * h2 * w2;
      for (int ic = 0; ic < cin; ++ic) {
        const T* xplane = xd + static_cast<std::size_t>(ic) * h * w;
        const T* kplane = kd + (static_cast<std::size_t>(oc) * cin + ic) * ks * ks;
        for (int ki = 0; ki < ks; ++ki) {
          for (int kj = 0; kj < ks; ++kj) {
            const T kv = kplane[ki * ks + kj];
            if (kv == T(0)) continue;
            for (int oh = 0; oh < h2; ++oh) {
              const int ih = oh * stride + ki - pad;
              if (ih < 0 || ih >= h) continue;
              const T* xrow = xplane + static_cast<std::size_t>(ih) * w;
              T* orow = oplane + static_cast<std::size_t>(oh) * w2;
              for (int ow = 0; ow < w2; ++ow) {
                const int iw = ow * stride + kj - pad;
                if (iw < 0 || iw >= w) continue;
                orow[ow] += kv * xrow[iw];
              }
            }
          }
        }
      }
    }
  };
  forward(x.data.data(), kern.data.data(), out.data.data());

  if (detail::tracked(tape, {&x, &kern})) {
    const int xn = x.node, kn = kern.node;
    std::vector<T> xdata = x.data, kdata = kern.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> gx, gk;
      if (xn >= 0) gx.assign(xdata.size(), T(0));
      if (kn >= 0) gk.assign(kdata.size(), T(0));
      for (int oc = 0; oc < cout; ++oc) {
        const T* oplane = og.data() + static_cast<std::size_t>(oc) * h2 * w2;
        for (int ic = 0; ic < cin; ++ic) {
          const std::size_t xoff = static_cast<std::size_t>(ic) * h * w;
          const std::size_t koff = (static_cast<std::size_t>(oc) * cin + ic) * ks * ks;
          for (int ki = 0; ki < ks; ++ki) {
            for (int kj = 0; kj < ks; ++kj) {
              const T kv = kdata[koff + ki * ks + kj];
              T kacc = T(0);
              for (int oh = 0; oh < h2; ++oh) {
                const int ih = oh * stride + ki - pad;
                if (ih < 0 || ih >= h) continue;
                const T* orow = oplane + static_cast<std::size_t>(oh) * w2;
                for (int ow = 0; ow < w2; ++ow) {
                  const int iw = ow * stride + kj - pad;
                  if (iw < 0 || iw >= w) continue;
                  const std::size_t xi = xoff + static_cast<std::size_t>(ih) * w + iw;
                  if (xn >= 0) gx[xi] += orow[ow] * kv;
                  if (kn >= 0) kacc += orow[ow] * xdata[xi];
                }
              }
              if (kn >= 0) gk[koff + ki * ks + kj] += kacc;
            }
          }
        }
      }
      if (xn >= 0) t.accumulate(xn, gx);
      if (kn >= 0) t.accumulate(kn, gk);
    });
  }
  return out;
}

// ---- bilinear resize --------------------------------------------------------

struct LinTap {
  int i0 = 0, i1 = 0;
  double w0 = 1.0, w1 = 0.0;
};

// Half-pixel-center sampling, clamped at the borders.
inline std::vector<LinTap> bilinear_taps(int src, int dst) {
  std::vector<LinTap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (int d = 0; d < dst; ++d) {
    double c = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (c < 0.0) c = 0.0;
    if (c > static_cast<double>(src - 1)) c = static_cast<double>(src - 1);
    LinTap t;
    t.i0 = static_cast<int>(std::floor(c));
    t.i1 = std::min(t.i0 + 1, src - 1);
    t.w1 = c - static_cast<double>(t.i0);
    t.w0 = 1.0 - t.w1;
    taps[static_cast<std::size_t>(d)] = t;
  }
  return taps;
}

template <typename T>
Tensor<T> bilinear_resize(Tape<T>* tape, const Tensor<T>& x, int h2, int w2) {
  if (x.rank() != 3) throw DimensionError("bilinear_resize expects [C,H,W], got " + shape_str(x.shape));
  if (h2 < 1 || w2 < 1) throw DimensionError("bilinear_resize target extent < 1");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const auto ty = bilinear_taps(h, h2);
  const auto tx = bilinear_taps(w, w2);
  Tensor<T> out({c, h2, w2});
  for (int ci = 0; ci < c; ++ci) {
    const T* xp = x.data.data() + static_cast<std::size_t>(ci) * h * w;
    T* op = out.data.data() + static_cast<std::size_t>(ci) * h2 * w2;
    for (int y = 0; y < h2; ++y) {
      const LinTap& a = ty[static_cast<std::size_t>(y)];
      for (int z = 0; z < w2; ++z) {
        const LinTap& b = tx[static_cast<std::size_t>(z)];
        const double v = a.w0 * (b.w0 * xp[a.i0 * w + b.i0] + b.w1 * xp[a.i0 * w + b.i1]) +
                         a.w1 * (b.w0 * xp[a.i1 * w + b.i0] + b.w1 * xp[a.i1 * w + b.i1]);
        op[y * w2 + z] = static_cast<T>(v);
      }
    }
  }
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    const std::size_t xnumel = x.numel();
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(xnumel, T(0));
      for (int ci = 0; ci < c; ++ci) {
        T* gp = g.data() + static_cast<std::size_t>(ci) * h * w;
        const T* op = og.data() + static_cast<std::size_t>(ci) * h2 * w2;
        for (int y = 0; y < h2; ++y) {
          const LinTap& a = ty[static_cast<std::size_t>(y)];
          for (int z = 0; z < w2; ++z) {
            const LinTap& b = tx[static_cast<std::size_t>(z)];
            const T go = op[y * w2 + z];
            gp[a.i0 * w + b.i0] += static_cast<T>(a.w0 * b.w0) * go;
            gp[a.i0 * w + b.i1] += static_cast<T>(a.w0 * b.w1) * go;
            gp[a.i1 * w + b.i0] += static_cast<T>(a.w1 * b.w0) * go;
            gp[a.i1 * w + b.i1] += static_cast<T>(a.w1 * b.w1) * go;
          }
        }
      }
      t.accumulate(xn, g);
    });
  }
  return out;
}

// ---- masked pooling ---------------------------------------------------------

// p[c] = sum_hw f[c,h,w] * mask[h,w] / max(sum mask, 1). The mask is data, not
// a differentiable input; gradient flows into f only.
template <typename T>
Tensor<T> masked_mean_hw(Tape<T>* tape, const Tensor<T>& f, const Tensor<T>& mask) {
  if (f.rank() != 3 || mask.rank() != 2 || f.shape[1] != mask.shape[0] || f.shape[2] != mask.shape[1])
    throw DimensionError("masked_mean_hw " + shape_str(f.shape) + " with mask " + shape_str(mask.shape));
  const int c = f.shape[0];
  const std::size_t hw = static_cast<std::size_t>(f.shape[1]) * f.shape[2];
  T msum = T(0);
  for (std::size_t i = 0; i < hw; ++i) msum += mask.data[i];
  const T denom = std::max(msum, T(1));
  Tensor<T> out({c});
  for (int ci = 0; ci < c; ++ci) {
    const T* fp = f.data.data() + static_cast<std::size_t>(ci) * hw;
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += fp[i] * mask.data[i];
    out.data[static_cast<std::size_t>(ci)] = acc / denom;
  }
  if (detail::tracked(tape, {&f})) {
    const int fn = f.node;
    std::vector<T> mdata = mask.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(static_cast<std::size_t>(c) * hw);
      for (int ci = 0; ci < c; ++ci) {
        const T go = og[static_cast<std::size_t>(ci)] / denom;
        T* gp = g.data() + static_cast<std::size_t>(ci) * hw;
        for (std::size_t i = 0; i < hw; ++i) gp[i] = go * mdata[i];
      }
      t.accumulate(fn, g);
    });
  }
  return out;
}

// ---- two-class cross-entropy -------------------------------------------------

// Softmax over the two channels per pixel, then -mean log p(true class), with
// probabilities clamped to [1e-7, 1 - 1e-7]. Target is a {0,1} mask and is not
// differentiable.
template <typename T>
Tensor<T> bce2(Tape<T>* tape, const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.rank() != 3 || logits.shape[0] != 2 || target.rank() != 2 ||
      logits.shape[1] != target.shape[0] || logits.shape[2] != target.shape[1])
    throw DimensionError("bce2 logits " + shape_str(logits.shape) + " with target " + shape_str(target.shape));
  const std::size_t hw = static_cast<std::size_t>(target.numel());
  const T lo = static_cast<T>(1e-7), hi = static_cast<T>(1.0 - 1e-7);
  std::vector<T> p1(hw);       // foreground probability per pixel
  std::vector<char> clamped(hw, 0);
  double loss_acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const T l0 = logits.data[i], l1 = logits.data[hw + i];
    const T m = std::max(l0, l1);
    const T e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    const T pfg = e1 / (e0 + e1);
    p1[i] = pfg;
    const bool fg = target.data[i] > T(0.5);
    T ptrue = fg ? pfg : T(1) - pfg;
    if (ptrue < lo) {
      ptrue = lo;
      clamped[i] = 1;
    } else if (ptrue > hi) {
      ptrue = hi;
      clamped[i] = 1;
    }
    loss_acc -= std::log(static_cast<double>(ptrue));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss_acc / static_cast<double>(hw)));

  if (detail::tracked(tape, {&logits})) {
    const int ln = logits.node;
    std::vector<T> tdata = target.data;
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      const T go = og[0] / static_cast<T>(hw);
      std::vector<T> g(2 * hw);
      for (std::size_t i = 0; i < hw; ++i) {
        if (clamped[i]) {
          g[i] = g[hw + i] = T(0);
          continue;
        }
        const bool fg = tdata[i] > T(0.5);
        // d/dl1 of -log softmax = p1 - [fg]; channels sum to zero
        const T d1 = p1[i] - (fg ? T(1) : T(0));
        g[hw + i] = go * d1;
        g[i] = -go * d1;
      }
      t.accumulate(ln, g);
    });
  }
  return out;
}

// ---- small conveniences -----------------------------------------------------

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::tracked(tape, {&x})) {
    const int xn = x.node;
    const std::size_t n = x.numel();
    out.node = tape->push([=](const std::vector<T>& og, Tape<T>& t) {
      std::vector<T> g(n, og[0]);
      t.accumulate(xn, g);
    });
  }
  return out;
}

// Elementwise arithmetic mean of a non-empty list of same-shape tensors.
template <typename T>
Tensor<T> mean_tensors(Tape<T>* tape, const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ArgumentError("mean of zero tensors");
  Tensor<T> acc = items[0];
  for (std::size_t i = 1; i < items.size(); ++i) acc = add(tape, acc, items[i]);
  if (items.size() == 1) return acc;
  return scale(tape, acc, 1.0 / static_cast<double>(items.size()));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace hse
