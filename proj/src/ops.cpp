#include "hmode/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hmode::ops {
namespace {

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active().recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (!x.defined() || x.rank() != rank) {
    throw InvalidShape(std::string(op) + ": expected rank " + std::to_string(rank) + " input");
  }
}

// Views a rank-2 or rank-3 tensor as (channels, height, width).
struct Planes {
  std::size_t c, h, w;
};

template <typename T>
Planes planes_of(const Tensor<T>& x, const char* op) {
  if (!x.defined()) throw InvalidShape(std::string(op) + ": undefined input");
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw InvalidShape(std::string(op) + ": expected [C,H,W] or [H,W], got " +
                     shape_string(x.shape()));
}

Shape planes_shape(std::size_t rank, const Planes& p) {
  if (rank == 2) return {p.h, p.w};
  return {p.c, p.h, p.w};
}

enum class Broadcast { kSame, kScalarA, kScalarB };

template <typename T>
Broadcast classify(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.numel() == 1) return Broadcast::kScalarA;
  if (b.numel() == 1) return Broadcast::kScalarB;
  throw InvalidShape(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
}

// Applies f(a_i, b_i) with scalar broadcasting. df returns the pair of
// partials (d/da, d/db) evaluated at (a_i, b_i).
template <typename T, typename F, typename DF>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DF df) {
  const Broadcast mode = classify(a, b, op);
  const Shape shape = mode == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.values();
  auto bv = b.values();
  auto ai = [&, mode](std::size_t i) { return mode == Broadcast::kScalarA ? av[0] : av[i]; };
  auto bi = [&, mode](std::size_t i) { return mode == Broadcast::kScalarB ? bv[0] : bv[i]; };

  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));

  const bool track = tracking<T>({&a, &b});
  Tensor<T> result = make_op_output(shape, std::move(out), track);
  if (track) {
    StoragePtr<T> as = a.shared_storage(), bs = b.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [as, bs, os, mode, df, n] {
      const auto& g = os->grad;
      auto& av = as->values;
      auto& bv = bs->values;
      std::span<T> ga, gb;
      if (as->requires_grad) ga = grad_slot(*as);
      if (bs->requires_grad) gb = grad_slot(*bs);
      for (std::size_t i = 0; i < n; ++i) {
        const T x = mode == Broadcast::kScalarA ? av[0] : av[i];
        const T y = mode == Broadcast::kScalarB ? bv[0] : bv[i];
        const auto [dx, dy] = df(x, y);
        if (!ga.empty()) ga[mode == Broadcast::kScalarA ? 0 : i] += g[i] * dx;
        if (!gb.empty()) gb[mode == Broadcast::kScalarB ? 0 : i] += g[i] * dy;
      }
    });
  }
  return result;
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const bool track = tracking<T>({&x});
  Tensor<T> result = make_op_output(x.shape(), std::move(out), track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, os, df] {
      auto gx = grad_slot(*xs);
      const auto& g = os->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs->values[i], os->values[i]);
    });
  }
  return result;
}

// Few output pixels: gather each output's receptive field into a row
// (zero where padded) and use dot products over cin*k*k.
template <typename T>
Tensor<T> conv2d_small(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::size_t padding, std::size_t oh, std::size_t ow) {
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t r = cin * k * k, np = oh * ow;
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  // Flat input index per (pixel, tap), or -1 where the tap falls in padding.
  auto src_index = std::make_shared<std::vector<std::ptrdiff_t>>(np * r);
  auto cols = std::make_shared<std::vector<T>>(np * r, T(0));
  const T* in = input.values().data();
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t pix = y * ow + x;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) - pad;
            const std::size_t slot = pix * r + (ci * k + ky) * k + kx;
            const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                                ix < static_cast<std::ptrdiff_t>(w);
            const std::ptrdiff_t idx = inside ? (static_cast<std::ptrdiff_t>(ci * h) + iy) *
                                                        static_cast<std::ptrdiff_t>(w) + ix
                                              : -1;
            (*src_index)[slot] = idx;
            if (inside) (*cols)[slot] = in[idx];
          }
        }
      }
    }
  }
  const T* ker = kernel.values().data();
  const T* b = bias.values().data();
  std::vector<T> out(cout * np);
  for (std::size_t co = 0; co < cout; ++co) {
    const T* wr = ker + co * r;
    for (std::size_t pix = 0; pix < np; ++pix) {
      const T* cr = cols->data() + pix * r;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t i = 0; i < r; ++i) acc += wr[i] * cr[i];
      out[co * np + pix] = b[co] + acc;
    }
  }

  const bool track = tracking<T>({&input, &kernel, &bias});
  Tensor<T> result = make_op_output(Shape{cout, oh, ow}, std::move(out), track);
  if (!track) return result;

  StoragePtr<T> is = input.shared_storage(), ks = kernel.shared_storage(),
                bs = bias.shared_storage(), os = result.shared_storage();
  Tape<T>::active().record(result, [=] {
    const T* g = os->grad.data();
    if (bs->requires_grad) {
      auto gb = grad_slot(*bs);
      for (std::size_t co = 0; co < cout; ++co) {
        T acc = 0;
        for (std::size_t pix = 0; pix < np; ++pix) acc += g[co * np + pix];
        gb[co] += acc;
      }
    }
    if (ks->requires_grad) {
      T* gk = grad_slot(*ks).data();
      for (std::size_t co = 0; co < cout; ++co) {
        T* gr = gk + co * r;
        for (std::size_t pix = 0; pix < np; ++pix) {
          const T gv = g[co * np + pix];
          const T* cr = cols->data() + pix * r;
#pragma omp simd
          for (std::size_t i = 0; i < r; ++i) gr[i] += gv * cr[i];
        }
      }
    }
    if (is->requires_grad) {
      T* gi = grad_slot(*is).data();
      const T* ker = ks->values.data();
      std::vector<T> gcol(r);
      for (std::size_t pix = 0; pix < np; ++pix) {
        std::fill(gcol.begin(), gcol.end(), T(0));
        for (std::size_t co = 0; co < cout; ++co) {
          const T gv = g[co * np + pix];
          const T* wr = ker + co * r;
#pragma omp simd
          for (std::size_t i = 0; i < r; ++i) gcol[i] += gv * wr[i];
        }
        const std::ptrdiff_t* idx = src_index->data() + pix * r;
        for (std::size_t i = 0; i < r; ++i) {
          if (idx[i] >= 0) gi[idx[i]] += gcol[i];
        }
      }
    }
  });
  return result;
}

constexpr std::size_t kSmallConvPixels = 16;

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t padding) {
  require_rank(input, 3, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw InvalidShape("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                       " input channels, input has " + std::to_string(cin));
  }
  if (kernel.dim(3) != k || k % 2 == 0) throw InvalidShape("conv2d: kernel must be square and odd");
  if (!bias.defined() || bias.numel() != cout) throw InvalidShape("conv2d: bias size mismatch");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw InvalidShape("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = h + 2 * padding - k + 1, ow = w + 2 * padding - k + 1;
  if (oh * ow <= kSmallConvPixels) return conv2d_small(input, kernel, bias, padding, oh, ow);
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Valid output column range for kernel column kx, and the matching input offset.
  auto col_range = [=](std::size_t kx) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - pad;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi =
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow), static_cast<std::ptrdiff_t>(w) - shift);
    return std::tuple{lo, hi, shift};
  };

  const T* in = input.values().data();
  const T* ker = kernel.values().data();
  std::vector<T> out(cout * oh * ow);
  for (std::size_t co = 0; co < cout; ++co) {
    T* o = out.data() + co * oh * ow;
    std::fill(o, o + oh * ow, bias.values()[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* src = in + ci * h * w;
      const T* kk = ker + (co * cin + ci) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          const T* srow = src + iy * w;
          T* orow = o + y * ow;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = kk[ky * k + kx];
            const auto [lo, hi, shift] = col_range(kx);
            const T* s = srow + shift;
#pragma omp simd
            for (std::ptrdiff_t x = lo; x < hi; ++x) orow[x] += wv * s[x];
          }
        }
      }
    }
  }

  const bool track = tracking<T>({&input, &kernel, &bias});
  Tensor<T> result = make_op_output(Shape{cout, oh, ow}, std::move(out), track);
  if (!track) return result;

  StoragePtr<T> is = input.shared_storage(), ks = kernel.shared_storage(),
                bs = bias.shared_storage(), os = result.shared_storage();
  Tape<T>::active().record(result, [=] {
    const T* g = os->grad.data();
    const T* in = is->values.data();
    const T* ker = ks->values.data();
    if (bs->requires_grad) {
      auto gb = grad_slot(*bs);
      for (std::size_t co = 0; co < cout; ++co) {
        T acc = 0;
        const T* go = g + co * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) acc += go[i];
        gb[co] += acc;
      }
    }
    if (ks->requires_grad) {
      T* gk = grad_slot(*ks).data();
      for (std::size_t co = 0; co < cout; ++co) {
        const T* go = g + co * oh * ow;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* src = in + ci * h * w;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto [lo, hi, shift] = col_range(kx);
              T acc = 0;
              for (std::size_t y = 0; y < oh; ++y) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                const T* s = src + iy * w + shift;
                const T* gr = go + y * ow;
#pragma omp simd reduction(+ : acc)
                for (std::ptrdiff_t x = lo; x < hi; ++x) acc += gr[x] * s[x];
              }
              gk[((co * cin + ci) * k + ky) * k + kx] += acc;
            }
          }
        }
      }
    }
    if (is->requires_grad) {
      T* gi = grad_slot(*is).data();
      for (std::size_t co = 0; co < cout; ++co) {
        const T* go = g + co * oh * ow;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          T* dst = gi + ci * h * w;
          const T* kk = ker + (co * cin + ci) * k * k;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t y = 0; y < oh; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              T* drow = dst + iy * w;
              const T* gr = go + y * ow;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T wv = kk[ky * k + kx];
                const auto [lo, hi, shift] = col_range(kx);
                T* d = drow + shift;
#pragma omp simd
                for (std::ptrdiff_t x = lo; x < hi; ++x) d[x] += wv * gr[x];
              }
            }
          }
        }
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>{T(1), T(1)}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>{T(1), T(-1)}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>{y, x}; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T x, T y) { return std::pair<T, T>{T(1) / y, -x / (y * y)}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const T lo = static_cast<T>(kSigmoidEpsilon);
  const T hi = T(1) - static_cast<T>(kSigmoidEpsilon);
  return unary(
      x,
      [lo, hi](T v) {
        const T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [lo, hi](T, T y) { return (y <= lo || y >= hi) ? T(0) : y * (T(1) - y); });
}

template <typename T>
std::vector<Tensor<T>> softmax_group(std::span<const Tensor<T>> maps) {
  if (maps.empty()) throw InvalidArgument("softmax_group: empty list");
  const Shape shape = maps.front().shape();
  for (const auto& m : maps) {
    if (m.shape() != shape) throw InvalidShape("softmax_group: maps differ in shape");
  }
  const std::size_t n = maps.size(), len = shape_numel(shape);
  std::vector<std::vector<T>> out(n, std::vector<T>(len));
  for (std::size_t p = 0; p < len; ++p) {
    T top = maps[0].values()[p];
    for (std::size_t j = 1; j < n; ++j) top = std::max(top, maps[j].values()[p]);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j][p] = std::exp(maps[j].values()[p] - top);
      total += out[j][p];
    }
    for (std::size_t j = 0; j < n; ++j) out[j][p] /= total;
  }

  bool track = false;
  if (Tape<T>::active().recording()) {
    track = std::any_of(maps.begin(), maps.end(), [](const auto& m) { return m.requires_grad(); });
  }
  std::vector<Tensor<T>> result;
  result.reserve(n);
  for (auto& o : out) result.push_back(make_op_output(shape, std::move(o), track));
  if (!track) return result;

  std::vector<StoragePtr<T>> ins, outs;
  for (std::size_t j = 0; j < n; ++j) {
    ins.push_back(maps[j].shared_storage());
    outs.push_back(result[j].shared_storage());
  }
  Tape<T>::active().record(std::span<const Tensor<T>>(result), [ins, outs, n, len] {
    for (std::size_t p = 0; p < len; ++p) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += outs[j]->values[p] * outs[j]->grad[p];
      for (std::size_t j = 0; j < n; ++j) {
        if (!ins[j]->requires_grad) continue;
        grad_slot(*ins[j])[p] += outs[j]->values[p] * (outs[j]->grad[p] - dot);
      }
    }
  });
  return result;
}

namespace {

// Source sampling positions for one axis under half-pixel alignment.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  const Planes p = planes_of(input, "upsample_bilinear");
  if (out_h == 0 || out_w == 0) throw InvalidArgument("upsample_bilinear: zero target extent");
  if (out_h < p.h || out_w < p.w) {
    throw InvalidArgument("upsample_bilinear: target smaller than input");
  }
  const Shape shape = planes_shape(input.rank(), {p.c, out_h, out_w});
  if (out_h == p.h && out_w == p.w) {
    // Half-pixel sampling at equal size lands exactly on source pixels.
    std::vector<T> copy(input.values().begin(), input.values().end());
    const bool track = tracking<T>({&input});
    Tensor<T> result = make_op_output(shape, std::move(copy), track);
    if (track) {
      StoragePtr<T> is = input.shared_storage(), os = result.shared_storage();
      Tape<T>::active().record(result, [is, os] { accumulate_grad<T>(*is, os->grad); });
    }
    return result;
  }

  const Taps ty = bilinear_taps(p.h, out_h), tx = bilinear_taps(p.w, out_w);
  auto iv = input.values();
  std::vector<T> out(p.c * out_h * out_w);
  for (std::size_t c = 0; c < p.c; ++c) {
    const T* src = iv.data() + c * p.h * p.w;
    T* dst = out.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty.frac[y]);
      const T* r0 = src + ty.lo[y] * p.w;
      const T* r1 = src + ty.hi[y] * p.w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx.frac[x]);
        const T top = r0[tx.lo[x]] * (T(1) - fx) + r0[tx.hi[x]] * fx;
        const T bot = r1[tx.lo[x]] * (T(1) - fx) + r1[tx.hi[x]] * fx;
        dst[y * out_w + x] = top * (T(1) - fy) + bot * fy;
      }
    }
  }

  const bool track = tracking<T>({&input});
  Tensor<T> result = make_op_output(shape, std::move(out), track);
  if (track) {
    StoragePtr<T> is = input.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [is, os, p, ty, tx, out_h, out_w] {
      T* gi = grad_slot(*is).data();
      const T* g = os->grad.data();
      for (std::size_t c = 0; c < p.c; ++c) {
        T* dst = gi + c * p.h * p.w;
        const T* go = g + c * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
          const T fy = static_cast<T>(ty.frac[y]);
          T* r0 = dst + ty.lo[y] * p.w;
          T* r1 = dst + ty.hi[y] * p.w;
          for (std::size_t x = 0; x < out_w; ++x) {
            const T fx = static_cast<T>(tx.frac[x]);
            const T v = go[y * out_w + x];
            r0[tx.lo[x]] += v * (T(1) - fy) * (T(1) - fx);
            r0[tx.hi[x]] += v * (T(1) - fy) * fx;
            r1[tx.lo[x]] += v * fy * (T(1) - fx);
            r1[tx.hi[x]] += v * fy * fx;
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& input) {
  const Planes p = planes_of(input, "max_pool2x2");
  if (p.h % 2 != 0 || p.w % 2 != 0) {
    throw InvalidShape("max_pool2x2: extents must be even, got " + shape_string(input.shape()));
  }
  const std::size_t oh = p.h / 2, ow = p.w / 2;
  auto iv = input.values();
  std::vector<T> out(p.c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < p.c; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (c * p.h + 2 * y) * p.w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (c * p.h + 2 * y + dy) * p.w + 2 * x + dx;
            if (iv[idx] > iv[best]) best = idx;
          }
        }
        const std::size_t o = (c * oh + y) * ow + x;
        out[o] = iv[best];
        argmax[o] = best;
      }
    }
  }
  const bool track = tracking<T>({&input});
  Tensor<T> result =
      make_op_output(planes_shape(input.rank(), {p.c, oh, ow}), std::move(out), track);
  if (track) {
    StoragePtr<T> is = input.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [is, os, argmax = std::move(argmax)] {
      auto gi = grad_slot(*is);
      for (std::size_t o = 0; o < argmax.size(); ++o) gi[argmax[o]] += os->grad[o];
    });
  }
  return result;
}

template <typename T>
Tensor<T> block_sum(const Tensor<T>& input, std::size_t block) {
  const Planes p = planes_of(input, "block_sum");
  if (block == 0) throw InvalidArgument("block_sum: block size must be positive");
  if (p.h % block != 0 || p.w % block != 0) {
    throw InvalidShape("block_sum: extents " + shape_string(input.shape()) +
                       " not divisible by block " + std::to_string(block));
  }
  const std::size_t oh = p.h / block, ow = p.w / block;
  auto iv = input.values();
  std::vector<T> out(p.c * oh * ow, T(0));
  for (std::size_t c = 0; c < p.c; ++c) {
    for (std::size_t y = 0; y < p.h; ++y) {
      T* orow = out.data() + (c * oh + y / block) * ow;
      const T* irow = iv.data() + (c * p.h + y) * p.w;
      for (std::size_t x = 0; x < p.w; ++x) orow[x / block] += irow[x];
    }
  }
  const bool track = tracking<T>({&input});
  Tensor<T> result =
      make_op_output(planes_shape(input.rank(), {p.c, oh, ow}), std::move(out), track);
  if (track) {
    StoragePtr<T> is = input.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [is, os, p, block, oh, ow] {
      auto gi = grad_slot(*is);
      for (std::size_t c = 0; c < p.c; ++c) {
        for (std::size_t y = 0; y < p.h; ++y) {
          for (std::size_t x = 0; x < p.w; ++x) {
            gi[(c * p.h + y) * p.w + x] += os->grad[(c * oh + y / block) * ow + x / block];
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  if (!x.defined()) throw InvalidArgument("sum: undefined tensor");
  T total = 0;
  for (T v : x.values()) total += v;
  const bool track = tracking<T>({&x});
  Tensor<T> result = make_op_output(Shape{1}, std::vector<T>{total}, track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, os] {
      const T g = os->grad[0];
      for (T& v : grad_slot(*xs)) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (!x.defined()) throw InvalidArgument("mean: undefined tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw InvalidShape("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<T> copy(x.values().begin(), x.values().end());
  const bool track = tracking<T>({&x});
  Tensor<T> result = make_op_output(std::move(shape), std::move(copy), track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, os] { accumulate_grad<T>(*xs, os->grad); });
  }
  return result;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw InvalidShape("concat_channels: spatial mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const bool track = tracking<T>({&a, &b});
  Tensor<T> result =
      make_op_output(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), track);
  if (track) {
    StoragePtr<T> as = a.shared_storage(), bs = b.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [as, bs, os] {
      const std::size_t na = as->values.size();
      std::span<const T> g = os->grad;
      if (as->requires_grad) accumulate_grad<T>(*as, g.subspan(0, na));
      if (bs->requires_grad) accumulate_grad<T>(*bs, g.subspan(na));
    });
  }
  return result;
}

template <typename T>
Tensor<T> channel(const Tensor<T>& x, std::size_t c) {
  require_rank(x, 3, "channel");
  if (c >= x.dim(0)) throw InvalidArgument("channel: index out of range");
  const std::size_t plane = x.dim(1) * x.dim(2);
  auto src = x.values().subspan(c * plane, plane);
  std::vector<T> out(src.begin(), src.end());
  const bool track = tracking<T>({&x});
  Tensor<T> result = make_op_output(Shape{x.dim(1), x.dim(2)}, std::move(out), track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, os, c, plane] {
      auto g = grad_slot(*xs).subspan(c * plane, plane);
      for (std::size_t i = 0; i < plane; ++i) g[i] += os->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& m) {
  require_rank(x, 3, "mul_channels");
  const std::size_t plane = x.dim(1) * x.dim(2);
  const bool map_ok = (m.rank() == 3 && m.dim(0) == 1 && m.dim(1) == x.dim(1) &&
                       m.dim(2) == x.dim(2)) ||
                      (m.rank() == 2 && m.dim(0) == x.dim(1) && m.dim(1) == x.dim(2));
  if (!map_ok) {
    throw InvalidShape("mul_channels: map " + shape_string(m.shape()) + " does not match " +
                       shape_string(x.shape()));
  }
  const std::size_t channels = x.dim(0);
  auto xv = x.values();
  auto mv = m.values();
  std::vector<T> out(xv.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = xv[c * plane + i] * mv[i];
  }
  const bool track = tracking<T>({&x, &m});
  Tensor<T> result = make_op_output(x.shape(), std::move(out), track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), ms = m.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, ms, os, channels, plane] {
      const auto& g = os->grad;
      if (xs->requires_grad) {
        auto gx = grad_slot(*xs);
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t i = 0; i < plane; ++i) gx[c * plane + i] += g[c * plane + i] * ms->values[i];
        }
      }
      if (ms->requires_grad) {
        auto gm = grad_slot(*ms);
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t i = 0; i < plane; ++i) {
            gm[i] += g[c * plane + i] * xs->values[c * plane + i];
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw InvalidArgument("gather: no indices");
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel()) throw InvalidArgument("gather: index out of range");
    out[i] = x.values()[idx[i]];
  }
  const bool track = tracking<T>({&x});
  Tensor<T> result = make_op_output(Shape{idx.size()}, std::move(out), track);
  if (track) {
    StoragePtr<T> xs = x.shared_storage(), os = result.shared_storage();
    Tape<T>::active().record(result, [xs, os, idx = std::move(idx)] {
      auto g = grad_slot(*xs);
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += os->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw InvalidArgument("stack: empty list");
  std::vector<T> out;
  bool track = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    track = track || p.requires_grad();
  }
  track = track && Tape<T>::active().recording();
  const std::size_t n = out.size();
  Tensor<T> result = make_op_output(Shape{n}, std::move(out), track);
  if (track) {
    std::vector<StoragePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.shared_storage());
    StoragePtr<T> os = result.shared_storage();
    Tape<T>::active().record(result, [ins, os] {
      std::size_t offset = 0;
      for (const auto& in : ins) {
        const std::size_t len = in->values.size();
        if (in->requires_grad) accumulate_grad<T>(*in, std::span<const T>(os->grad).subspan(offset, len));
        offset += len;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw InvalidShape("binary_cross_entropy: " + shape_string(pred.shape()) + " vs " +
                       shape_string(target.shape()));
  }
  const std::size_t z = pred.numel();
  auto pv = pred.values();
  auto tv = target.values();
  T total = 0;
  for (std::size_t i = 0; i < z; ++i) {
    total -= tv[i] * std::log(pv[i]) + (T(1) - tv[i]) * std::log(T(1) - pv[i]);
  }
  const bool track = tracking<T>({&pred});
  Tensor<T> result =
      make_op_output(Shape{1}, std::vector<T>{total / static_cast<T>(z)}, track);
  if (track) {
    StoragePtr<T> ps = pred.shared_storage(), ts = target.shared_storage(),
                  os = result.shared_storage();
    Tape<T>::active().record(result, [ps, ts, os, z] {
      auto g = grad_slot(*ps);
      const T scale = os->grad[0] / static_cast<T>(z);
      for (std::size_t i = 0; i < z; ++i) {
        const T p = ps->values[i], t = ts->values[i];
        g[i] += scale * (-t / p + (T(1) - t) / (T(1) - p));
      }
    });
  }
  return result;
}

#define HMODE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template std::vector<Tensor<T>> softmax_group(std::span<const Tensor<T>>);                   \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> max_pool2x2(const Tensor<T>&);                                            \
  template Tensor<T> block_sum(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> channel(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> mul_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::size_t>);                   \
  template Tensor<T> stack(std::span<const Tensor<T>>);                                        \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, const Tensor<T>&);

HMODE_INSTANTIATE_OPS(float)
HMODE_INSTANTIATE_OPS(double)

}  // namespace hmode::ops
