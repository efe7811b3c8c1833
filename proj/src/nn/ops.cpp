#include "promptseg/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace promptseg::nn {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out = a.value();
  auto& o = out.vec();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_op<T>("add", std::move(out), {a, b}, [](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    for (auto* dst : pg) {
      if (!dst) continue;
      auto& d = dst->vec();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out = a.value();
  auto& o = out.vec();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return make_op<T>("mul", std::move(out), {a, b},
                    [av = a.value(), bv = b.value()](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
                      if (pg[0]) {
                        auto& d = pg[0]->vec();
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
                      }
                      if (pg[1]) {
                        auto& d = pg[1]->vec();
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
                      }
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  TensorT<T> out = a.value();
  for (auto& v : out.vec()) v = static_cast<T>(v * s);
  return make_op<T>("scale", std::move(out), {a}, [s](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    auto& d = pg[0]->vec();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(g[i] * s);
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().vec()) acc += v;
  TensorT<T> out(Shape{}, static_cast<T>(acc));
  return make_op<T>("sum", std::move(out), {a}, [](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    for (auto& d : pg[0]->vec()) d += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const double n = static_cast<double>(a.value().numel());
  require(n > 0, "mean: empty tensor");
  double acc = 0.0;
  for (T v : a.value().vec()) acc += v;
  TensorT<T> out(Shape{}, static_cast<T>(acc / n));
  return make_op<T>("mean", std::move(out), {a}, [n](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    const T share = static_cast<T>(g[0] / n);
    for (auto& d : pg[0]->vec()) d += share;
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  TensorT<T> out = a.value().reshaped(std::move(shape));
  return make_op<T>("reshape", std::move(out), {a}, [](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    auto& d = pg[0]->vec();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

namespace {

// Moves the channel axis between last (hwc) and first (chw) position.
template <typename T>
void permute3(const TensorT<T>& src, TensorT<T>& dst, bool to_chw, bool accumulate) {
  const auto& s = src.shape();
  const std::size_t h = to_chw ? s[0] : s[1];
  const std::size_t w = to_chw ? s[1] : s[2];
  const std::size_t c = to_chw ? s[2] : s[0];
  const auto& in = src.vec();
  auto& out = dst.vec();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t hwc = (y * w + x) * c + k;
        const std::size_t chw = (k * h + y) * w + x;
        const std::size_t from = to_chw ? hwc : chw;
        const std::size_t to = to_chw ? chw : hwc;
        if (accumulate) {
          out[to] += in[from];
        } else {
          out[to] = in[from];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> hwc_to_chw(const Var<T>& a) {
  require_rank(a.shape(), 3, "hwc_to_chw", "input");
  const auto& s = a.shape();
  TensorT<T> out(Shape{s[2], s[0], s[1]});
  permute3(a.value(), out, true, false);
  return make_op<T>("hwc_to_chw", std::move(out), {a}, [](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    permute3(g, *pg[0], false, true);
  });
}

template <typename T>
Var<T> chw_to_hwc(const Var<T>& a) {
  require_rank(a.shape(), 3, "chw_to_hwc", "input");
  const auto& s = a.shape();
  TensorT<T> out(Shape{s[1], s[2], s[0]});
  permute3(a.value(), out, false, false);
  return make_op<T>("chw_to_hwc", std::move(out), {a}, [](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
    permute3(g, *pg[0], true, true);
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, std::size_t begin, std::size_t end) {
  require_rank(a.shape(), 3, "slice_channels", "input");
  require(begin < end && end <= a.dim(0), "slice_channels: bad range [" + std::to_string(begin) + "," +
                                              std::to_string(end) + ") for " + shape_str(a.shape()));
  const std::size_t plane = a.dim(1) * a.dim(2);
  const auto& in = a.value().vec();
  std::vector<T> data(in.begin() + begin * plane, in.begin() + end * plane);
  TensorT<T> out(Shape{end - begin, a.dim(1), a.dim(2)}, std::move(data));
  return make_op<T>("slice_channels", std::move(out), {a},
                    [begin, plane](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
                      auto& d = pg[0]->vec();
                      for (std::size_t i = 0; i < g.numel(); ++i) d[begin * plane + i] += g[i];
                    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 3, "concat_channels", "part");
    require(p.dim(1) == parts[0].dim(1) && p.dim(2) == parts[0].dim(2),
            "concat_channels: spatial mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    channels += p.dim(0);
  }
  std::vector<T> data;
  data.reserve(channels * parts[0].dim(1) * parts[0].dim(2));
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
    sizes.push_back(p.value().numel());
  }
  TensorT<T> out(Shape{channels, parts[0].dim(1), parts[0].dim(2)}, std::move(data));
  return make_op<T>("concat_channels", std::move(out), parts,
                    [sizes](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < pg.size(); ++k) {
                        if (pg[k]) {
                          auto& d = pg[k]->vec();
                          for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
                        }
                        off += sizes[k];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const OptVar<T>& b, int stride, int padding,
              int groups) {
  require_rank(x.shape(), 3, "conv2d", "input");
  require_rank(w.shape(), 4, "conv2d", "weight");
  require(stride >= 1 && padding >= 0 && groups >= 1, "conv2d: stride/padding/groups out of range");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const auto g = static_cast<std::size_t>(groups);
  if (cin % g != 0 || cout % g != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                     " not divisible by groups " + std::to_string(groups));
  }
  require(w.dim(3) == k, "conv2d: kernel must be square, got " + shape_str(w.shape()));
  require(w.dim(1) == cin / g, "conv2d: weight " + shape_str(w.shape()) + " expects " +
                                   std::to_string(w.dim(1) * g) + " input channels, input has " +
                                   std::to_string(cin));
  if (b) require(b->shape() == Shape{cout}, "conv2d: bias shape " + shape_str(b->shape()));
  const auto p = static_cast<std::size_t>(padding);
  const auto s = static_cast<std::size_t>(stride);
  require(h + 2 * p >= k && wd + 2 * p >= k, "conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * p - k) / s + 1;
  const std::size_t ow = (wd + 2 * p - k) / s + 1;
  const std::size_t cin_g = cin / g, cout_g = cout / g;

  // Visits every (output, input, weight) index triple; out-of-bounds taps are
  // the zero padding and are skipped.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const std::size_t grp = oc / cout_g;
      for (std::size_t icl = 0; icl < cin_g; ++icl) {
        const std::size_t ic = grp * cin_g + icl;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t wi = ((oc * cin_g + icl) * k + ky) * k + kx;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              const std::size_t orow = (oc * oh + oy) * ow;
              const std::size_t irow = (ic * h + static_cast<std::size_t>(iy)) * wd;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                fn(orow + ox, irow + static_cast<std::size_t>(ix), wi);
              }
            }
          }
        }
      }
    }
  };

  TensorT<T> out(Shape{cout, oh, ow});
  {
    auto& o = out.vec();
    const auto& xv = x.value().vec();
    const auto& wv = w.value().vec();
    if (b) {
      for (std::size_t oc = 0; oc < cout; ++oc) {
        std::fill(o.begin() + oc * oh * ow, o.begin() + (oc + 1) * oh * ow, b->value()[oc]);
      }
    }
    for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { o[oi] += wv[wi] * xv[ii]; });
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return make_op<T>("conv2d", std::move(out), parents,
                    [for_taps, xv = x.value(), wv = w.value(), cout, plane = oh * ow](
                        const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
                      if (pg[0]) {
                        auto& gx = pg[0]->vec();
                        for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { gx[ii] += wv[wi] * go[oi]; });
                      }
                      if (pg[1]) {
                        auto& gw = pg[1]->vec();
                        for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { gw[wi] += xv[ii] * go[oi]; });
                      }
                      if (pg.size() > 2 && pg[2]) {
                        auto& gb = pg[2]->vec();
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                          T acc = 0;
                          for (std::size_t i = 0; i < plane; ++i) acc += go[oc * plane + i];
                          gb[oc] += acc;
                        }
                      }
                    });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const OptVar<T>& b, int stride) {
  require_rank(x.shape(), 3, "conv_transpose2d", "input");
  require_rank(w.shape(), 4, "conv_transpose2d", "weight");
  if (stride != 2 || w.dim(2) != 2 || w.dim(3) != 2) {
    throw ShapeError("conv_transpose2d: only kernel 2x2 with stride 2 is supported, got kernel " +
                     shape_str(w.shape()) + " stride " + std::to_string(stride));
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  require(w.dim(0) == cin, "conv_transpose2d: weight " + shape_str(w.shape()) + " vs input channels " +
                               std::to_string(cin));
  const std::size_t cout = w.dim(1);
  if (b) require(b->shape() == Shape{cout}, "conv_transpose2d: bias shape " + shape_str(b->shape()));
  const std::size_t oh = 2 * h, ow = 2 * wd;

  auto for_taps = [=](auto&& fn) {
    for (std::size_t ic = 0; ic < cin; ++ic) {
      for (std::size_t oc = 0; oc < cout; ++oc) {
        for (std::size_t ky = 0; ky < 2; ++ky) {
          for (std::size_t kx = 0; kx < 2; ++kx) {
            const std::size_t wi = ((ic * cout + oc) * 2 + ky) * 2 + kx;
            for (std::size_t y = 0; y < h; ++y) {
              const std::size_t irow = (ic * h + y) * wd;
              const std::size_t orow = (oc * oh + 2 * y + ky) * ow;
              for (std::size_t xx = 0; xx < wd; ++xx) fn(orow + 2 * xx + kx, irow + xx, wi);
            }
          }
        }
      }
    }
  };

  TensorT<T> out(Shape{cout, oh, ow});
  {
    auto& o = out.vec();
    const auto& xv = x.value().vec();
    const auto& wv = w.value().vec();
    if (b) {
      for (std::size_t oc = 0; oc < cout; ++oc) {
        std::fill(o.begin() + oc * oh * ow, o.begin() + (oc + 1) * oh * ow, b->value()[oc]);
      }
    }
    for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { o[oi] += wv[wi] * xv[ii]; });
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return make_op<T>("conv_transpose2d", std::move(out), parents,
                    [for_taps, xv = x.value(), wv = w.value(), cout, plane = oh * ow](
                        const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
                      if (pg[0]) {
                        auto& gx = pg[0]->vec();
                        for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { gx[ii] += wv[wi] * go[oi]; });
                      }
                      if (pg[1]) {
                        auto& gw = pg[1]->vec();
                        for_taps([&](std::size_t oi, std::size_t ii, std::size_t wi) { gw[wi] += xv[ii] * go[oi]; });
                      }
                      if (pg.size() > 2 && pg[2]) {
                        auto& gb = pg[2]->vec();
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                          T acc = 0;
                          for (std::size_t i = 0; i < plane; ++i) acc += go[oc * plane + i];
                          gb[oc] += acc;
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Normalization and activation

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  require(x.value().rank() >= 1, "layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match channel count " + std::to_string(c));
  require(eps > 0.0, "layer_norm: eps must be positive");
  const std::size_t rows = x.value().numel() / c;
  const auto& xv = x.value().vec();
  const auto& gv = gamma.value().vec();
  const auto& bv = beta.value().vec();

  TensorT<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  TensorT<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * c;
    T mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += in[i];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const T xh = (in[i] - mu) * is;
      xhat[r * c + i] = xh;
      out[r * c + i] = gv[i] * xh + bv[i];
    }
  }
  return make_op<T>("layer_norm", std::move(out), {x, gamma, beta},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std), gv, rows, c](
                        const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const std::size_t off = r * c;
                        if (pg[0]) {
                          T m1 = 0, m2 = 0;
                          for (std::size_t i = 0; i < c; ++i) {
                            const T gx = go[off + i] * gv[i];
                            m1 += gx;
                            m2 += gx * xhat[off + i];
                          }
                          m1 /= static_cast<T>(c);
                          m2 /= static_cast<T>(c);
                          auto& d = pg[0]->vec();
                          for (std::size_t i = 0; i < c; ++i) {
                            d[off + i] += inv_std[r] * (go[off + i] * gv[i] - m1 - xhat[off + i] * m2);
                          }
                        }
                        if (pg[1]) {
                          auto& d = pg[1]->vec();
                          for (std::size_t i = 0; i < c; ++i) d[i] += go[off + i] * xhat[off + i];
                        }
                        if (pg[2]) {
                          auto& d = pg[2]->vec();
                          for (std::size_t i = 0; i < c; ++i) d[i] += go[off + i];
                        }
                      }
                    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  TensorT<T> out = x.value();
  for (auto& v : out.vec()) v = v * T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
  return make_op<T>("gelu", std::move(out), {x}, [xv = x.value()](const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
    auto& d = pg[0]->vec();
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      d[i] += go[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const OptVar<T>& b) {
  require(x.value().rank() >= 1, "linear: scalar input");
  require_rank(w.shape(), 2, "linear", "weight");
  const std::size_t cin = x.shape().back();
  const std::size_t cout = w.dim(0);
  require(w.dim(1) == cin, "linear: input has " + std::to_string(cin) + " features, weight is " +
                               shape_str(w.shape()));
  if (b) require(b->shape() == Shape{cout}, "linear: bias shape " + shape_str(b->shape()));
  const std::size_t rows = x.value().numel() / cin;
  Shape oshape = x.shape();
  oshape.back() = cout;
  TensorT<T> out(oshape);
  const auto& xv = x.value().vec();
  const auto& wv = w.value().vec();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = b ? b->value()[o] : T(0);
      for (std::size_t i = 0; i < cin; ++i) acc += wv[o * cin + i] * xv[r * cin + i];
      out[r * cout + o] = acc;
    }
  }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return make_op<T>("linear", std::move(out), parents,
                    [xv = x.value(), wv = w.value(), rows, cin, cout](const TensorT<T>& go,
                                                                       std::vector<TensorT<T>*>& pg) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t o = 0; o < cout; ++o) {
                          const T g = go[r * cout + o];
                          if (pg[0]) {
                            auto& d = pg[0]->vec();
                            for (std::size_t i = 0; i < cin; ++i) d[r * cin + i] += g * wv[o * cin + i];
                          }
                          if (pg[1]) {
                            auto& d = pg[1]->vec();
                            for (std::size_t i = 0; i < cin; ++i) d[o * cin + i] += g * xv[r * cin + i];
                          }
                          if (pg.size() > 2 && pg[2]) (*pg[2])[o] += g;
                        }
                      }
                    });
}

namespace {

// y[l] = W x[l] for x [L,C], W [C,C].
template <typename T>
std::vector<T> project(const std::vector<T>& x, const std::vector<T>& w, std::size_t len, std::size_t c) {
  std::vector<T> y(len * c, T(0));
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t o = 0; o < c; ++o) {
      T acc = 0;
      for (std::size_t i = 0; i < c; ++i) acc += w[o * c + i] * x[l * c + i];
      y[l * c + o] = acc;
    }
  }
  return y;
}

// Given dy for y = W x: dx += W^T dy, dW += dy x^T.
template <typename T>
void project_backward(const std::vector<T>& dy, const std::vector<T>& x, const std::vector<T>& w,
                      std::size_t len, std::size_t c, std::vector<T>* dx, std::vector<T>* dw) {
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t o = 0; o < c; ++o) {
      const T g = dy[l * c + o];
      if (g == T(0)) continue;
      if (dx) {
        for (std::size_t i = 0; i < c; ++i) (*dx)[l * c + i] += g * w[o * c + i];
      }
      if (dw) {
        for (std::size_t i = 0; i < c; ++i) (*dw)[o * c + i] += g * x[l * c + i];
      }
    }
  }
}

// probs [heads, L, L] from projected q and k.
template <typename T>
std::vector<T> softmax_scores(const std::vector<T>& q, const std::vector<T>& k, std::size_t len, std::size_t c,
                              std::size_t heads) {
  const std::size_t d = c / heads;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<T> probs(heads * len * len);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < len; ++i) {
      T* row = probs.data() + (hd * len + i) * len;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        T acc = 0;
        for (std::size_t e = 0; e < d; ++e) acc += q[i * c + hd * d + e] * k[j * c + hd * d + e];
        row[j] = acc * inv_sqrt_d;
        mx = std::max(mx, row[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < len; ++j) row[j] /= z;
    }
  }
  return probs;
}

template <typename T>
void check_attention_shapes(const Shape& x, const Shape& wq, const Shape& wk, int heads) {
  require_rank(x, 2, "multi_head_attention", "input");
  const std::size_t c = x[1];
  require(heads >= 1, "multi_head_attention: heads must be >= 1");
  if (c % static_cast<std::size_t>(heads) != 0) {
    throw ShapeError("multi_head_attention: channels " + std::to_string(c) + " not divisible by heads " +
                     std::to_string(heads));
  }
  require(wq == Shape{c, c} && wk == Shape{c, c},
          "multi_head_attention: projections must be [" + std::to_string(c) + "," + std::to_string(c) + "]");
}

}  // namespace

template <typename T>
TensorT<T> attention_probs(const TensorT<T>& x, const TensorT<T>& wq, const TensorT<T>& wk, int heads) {
  check_attention_shapes<T>(x.shape(), wq.shape(), wk.shape(), heads);
  const std::size_t len = x.dim(0), c = x.dim(1);
  const auto h = static_cast<std::size_t>(heads);
  auto q = project(x.vec(), wq.vec(), len, c);
  auto k = project(x.vec(), wk.vec(), len, c);
  return TensorT<T>(Shape{h, len, len}, softmax_scores(q, k, len, c, h));
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv,
                            const Var<T>& wo, int heads) {
  check_attention_shapes<T>(x.shape(), wq.shape(), wk.shape(), heads);
  const std::size_t len = x.dim(0), c = x.dim(1);
  require(wv.shape() == Shape{c, c} && wo.shape() == Shape{c, c},
          "multi_head_attention: value/output projections must be square over channels");
  const auto h = static_cast<std::size_t>(heads);
  const std::size_t d = c / h;
  const auto& xv = x.value().vec();
  auto q = project(xv, wq.value().vec(), len, c);
  auto k = project(xv, wk.value().vec(), len, c);
  auto v = project(xv, wv.value().vec(), len, c);
  auto probs = softmax_scores(q, k, len, c, h);

  // Per-head context, concatenated over channels.
  std::vector<T> ctx(len * c, T(0));
  for (std::size_t hd = 0; hd < h; ++hd) {
    for (std::size_t i = 0; i < len; ++i) {
      const T* row = probs.data() + (hd * len + i) * len;
      for (std::size_t j = 0; j < len; ++j) {
        const T pij = row[j];
        for (std::size_t e = 0; e < d; ++e) ctx[i * c + hd * d + e] += pij * v[j * c + hd * d + e];
      }
    }
  }
  TensorT<T> out(Shape{len, c}, project(ctx, wo.value().vec(), len, c));

  return make_op<T>(
      "multi_head_attention", std::move(out), {x, wq, wk, wv, wo},
      [xv = x.value().vec(), wqv = wq.value().vec(), wkv = wk.value().vec(), wvv = wv.value().vec(),
       wov = wo.value().vec(), q = std::move(q), k = std::move(k), v = std::move(v), probs = std::move(probs),
       ctx = std::move(ctx), len, c, h, d](const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
        const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
        std::vector<T> dctx(len * c, T(0));
        project_backward(go.vec(), ctx, wov, len, c, &dctx, pg[4] ? &pg[4]->vec() : nullptr);

        std::vector<T> dq(len * c, T(0)), dk(len * c, T(0)), dv(len * c, T(0));
        std::vector<T> dp(len);
        for (std::size_t hd = 0; hd < h; ++hd) {
          for (std::size_t i = 0; i < len; ++i) {
            const T* row = probs.data() + (hd * len + i) * len;
            T dot = 0;
            for (std::size_t j = 0; j < len; ++j) {
              T acc = 0;
              for (std::size_t e = 0; e < d; ++e) acc += dctx[i * c + hd * d + e] * v[j * c + hd * d + e];
              dp[j] = acc;
              dot += row[j] * acc;
              for (std::size_t e = 0; e < d; ++e) dv[j * c + hd * d + e] += row[j] * dctx[i * c + hd * d + e];
            }
            for (std::size_t j = 0; j < len; ++j) {
              const T ds = row[j] * (dp[j] - dot) * inv_sqrt_d;
              for (std::size_t e = 0; e < d; ++e) {
                dq[i * c + hd * d + e] += ds * k[j * c + hd * d + e];
                dk[j * c + hd * d + e] += ds * q[i * c + hd * d + e];
              }
            }
          }
        }
        std::vector<T>* dx = pg[0] ? &pg[0]->vec() : nullptr;
        project_backward(dq, xv, wqv, len, c, dx, pg[1] ? &pg[1]->vec() : nullptr);
        project_backward(dk, xv, wkv, len, c, dx, pg[2] ? &pg[2]->vec() : nullptr);
        project_backward(dv, xv, wvv, len, c, dx, pg[3] ? &pg[3]->vec() : nullptr);
      });
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 3, "bilinear_upsample", "input");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h >= 1 && w >= 1 && out_h >= h && out_w >= w,
          "bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " smaller than input " + shape_str(x.shape()));
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  TensorT<T> out(Shape{c, out_h, out_w});
  const auto& xv = x.value().vec();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = xv.data() + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = (1.0 - b.w1) * plane[a.i0 * w + b.i0] + b.w1 * plane[a.i0 * w + b.i1];
        const double bot = (1.0 - b.w1) * plane[a.i1 * w + b.i0] + b.w1 * plane[a.i1 * w + b.i1];
        out[(ch * out_h + oy) * out_w + ox] = static_cast<T>((1.0 - a.w1) * top + a.w1 * bot);
      }
    }
  }
  return make_op<T>("bilinear_upsample", std::move(out), {x},
                    [ty = std::move(ty), tx = std::move(tx), c, h, w, out_h, out_w](
                        const TensorT<T>& go, std::vector<TensorT<T>*>& pg) {
                      auto& d = pg[0]->vec();
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        T* plane = d.data() + ch * h * w;
                        for (std::size_t oy = 0; oy < out_h; ++oy) {
                          const auto& a = ty[oy];
                          for (std::size_t ox = 0; ox < out_w; ++ox) {
                            const auto& b = tx[ox];
                            const double g = go[(ch * out_h + oy) * out_w + ox];
                            plane[a.i0 * w + b.i0] += static_cast<T>(g * (1.0 - a.w1) * (1.0 - b.w1));
                            plane[a.i0 * w + b.i1] += static_cast<T>(g * (1.0 - a.w1) * b.w1);
                            plane[a.i1 * w + b.i0] += static_cast<T>(g * a.w1 * (1.0 - b.w1));
                            plane[a.i1 * w + b.i1] += static_cast<T>(g * a.w1 * b.w1);
                          }
                        }
                      }
                    });
}

#define PROMPTSEG_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale<T>(const Var<T>&, double);                                                           \
  template Var<T> sum<T>(const Var<T>&);                                                                     \
  template Var<T> mean<T>(const Var<T>&);                                                                    \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                          \
  template Var<T> hwc_to_chw<T>(const Var<T>&);                                                              \
  template Var<T> chw_to_hwc<T>(const Var<T>&);                                                              \
  template Var<T> slice_channels<T>(const Var<T>&, std::size_t, std::size_t);                               \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                           \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const OptVar<T>&, int, int, int);      \
  template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&, const OptVar<T>&, int);      \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, double);                       \
  template Var<T> gelu<T>(const Var<T>&);                                                                    \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const OptVar<T>&);                    \
  template Var<T> multi_head_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,       \
                                          const Var<T>&, int);                                               \
  template TensorT<T> attention_probs<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int);     \
  template Var<T> bilinear_upsample<T>(const Var<T>&, std::size_t, std::size_t);

PROMPTSEG_INSTANTIATE_OPS(float)
PROMPTSEG_INSTANTIATE_OPS(double)

}  // namespace promptseg::nn
