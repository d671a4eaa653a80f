#include "wmhseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "wmhseg/objective.hpp"

namespace wmhseg::nets {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

template <typename Real>
void backward(const Var<Real>& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar, got " + root->dims().str());
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> visited;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Real>* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* node = *it;
    if (!node->backward || !node->has_grad()) continue;
    node->backward(*node);
    if (node != root.get()) node->grad = Tensor<Real>();  // intermediate; no longer needed
  }
}

namespace ops {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMapMat = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using MapRow = Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>;
template <typename Real>
using CMapRow = Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>;
template <typename Real>
using StridedMap = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using CStridedMap = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

struct ConvGeometry {
  int batch, in_h, in_w, in_c, k, stride, pad, out_h, out_w;
};

// Rows are output positions, columns (ky, kx, ci).
template <typename Real>
void im2col(const Real* x, const ConvGeometry& g, Real* cols) {
  const std::size_t row_len = static_cast<std::size_t>(g.k) * g.k * g.in_c;
  for (int b = 0; b < g.batch; ++b)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        Real* row = cols + ((static_cast<std::size_t>(b) * g.out_h + oy) * g.out_w + ox) * row_len;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            Real* dst = row + (static_cast<std::size_t>(ky) * g.k + kx) * g.in_c;
            if (iy < 0 || ix < 0 || iy >= g.in_h || ix >= g.in_w) {
              std::fill(dst, dst + g.in_c, Real(0));
            } else {
              const Real* src = x + ((static_cast<std::size_t>(b) * g.in_h + iy) * g.in_w + ix) * g.in_c;
              std::copy(src, src + g.in_c, dst);
            }
          }
        }
      }
}

template <typename Real>
void col2im_add(const Real* cols, const ConvGeometry& g, Real* dx) {
  const std::size_t row_len = static_cast<std::size_t>(g.k) * g.k * g.in_c;
  for (int b = 0; b < g.batch; ++b)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        const Real* row = cols + ((static_cast<std::size_t>(b) * g.out_h + oy) * g.out_w + ox) * row_len;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.in_w) continue;
            const Real* src = row + (static_cast<std::size_t>(ky) * g.k + kx) * g.in_c;
            Real* dst = dx + ((static_cast<std::size_t>(b) * g.in_h + iy) * g.in_w + ix) * g.in_c;
            for (int c = 0; c < g.in_c; ++c) dst[c] += src[c];
          }
        }
      }
}

template <typename Real>
Tensor<Real> scalar_tensor(Real v) {
  return Tensor<Real>(Dims{1, 1, 1, 1}, v);
}

}  // namespace

// ---- convolution ------------------------------------------------------

template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride, int pad) {
  const Dims xd = x->dims();
  const Dims wd = weight->dims();
  require(wd.n == wd.h && wd.w == xd.c,
          "conv2d: weight " + wd.str() + " incompatible with input " + xd.str());
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  if (bias) require(bias->value.size() == static_cast<std::size_t>(wd.c), "conv2d: bias size");
  ConvGeometry g{xd.n, xd.h, xd.w, xd.c, wd.n, stride, pad, 0, 0};
  g.out_h = (xd.h + 2 * pad - g.k) / stride + 1;
  g.out_w = (xd.w + 2 * pad - g.k) / stride + 1;
  require(g.out_h > 0 && g.out_w > 0, "conv2d: input smaller than kernel");
  const int cout = wd.c;
  const Eigen::Index rows = static_cast<Eigen::Index>(g.batch) * g.out_h * g.out_w;
  const Eigen::Index kdim = static_cast<Eigen::Index>(g.k) * g.k * g.in_c;
  const bool direct = g.k == 1 && stride == 1 && pad == 0;

  Tensor<Real> y(Dims{g.batch, g.out_h, g.out_w, cout});
  {
    std::vector<Real> cols;
    const Real* colp = x->value.data();
    if (!direct) {
      cols.resize(static_cast<std::size_t>(rows * kdim));
      im2col(x->value.data(), g, cols.data());
      colp = cols.data();
    }
    MapMat<Real> out(y.data(), rows, cout);
    out.noalias() = CMapMat<Real>(colp, rows, kdim) * CMapMat<Real>(weight->value.data(), kdim, cout);
    if (bias) out.rowwise() += CMapRow<Real>(bias->value.data(), cout);
  }

  return make_result<Real>(std::move(y), {x, weight, bias}, [g, rows, kdim, cout, direct](Node<Real>& self) {
    auto& xin = self.inputs[0];
    auto& w = self.inputs[1];
    auto& b = self.inputs[2];
    CMapMat<Real> dy(self.grad.data(), rows, cout);
    CMapMat<Real> wm(w->value.data(), kdim, cout);
    if (b && b->requires_grad) MapRow<Real>(b->grad_buffer().data(), cout) += dy.colwise().sum();
    if (w->requires_grad) {
      MapMat<Real> dw(w->grad_buffer().data(), kdim, cout);
      if (direct) {
        dw.noalias() += CMapMat<Real>(xin->value.data(), rows, kdim).transpose() * dy;
      } else {
        std::vector<Real> cols(static_cast<std::size_t>(rows * kdim));
        im2col(xin->value.data(), g, cols.data());
        dw.noalias() += CMapMat<Real>(cols.data(), rows, kdim).transpose() * dy;
      }
    }
    if (xin->requires_grad) {
      if (direct) {
        MapMat<Real>(xin->grad_buffer().data(), rows, kdim).noalias() += dy * wm.transpose();
      } else {
        RowMat<Real> dcols = dy * wm.transpose();
        col2im_add(dcols.data(), g, xin->grad_buffer().data());
      }
    }
  });
}

template <typename Real>
Var<Real> conv_transpose2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride) {
  const Dims xd = x->dims();
  const Dims wd = weight->dims();
  require(wd.n == xd.c && wd.h == wd.w,
          "conv_transpose2d: weight " + wd.str() + " incompatible with input " + xd.str());
  require(stride >= 1, "conv_transpose2d: bad stride");
  const int k = wd.h;
  const int cout = wd.c;
  if (bias) require(bias->value.size() == static_cast<std::size_t>(cout), "conv_transpose2d: bias size");
  const int out_h = (xd.h - 1) * stride + k;
  const int out_w = (xd.w - 1) * stride + k;
  const Eigen::Index rows = static_cast<Eigen::Index>(xd.n) * xd.h * xd.w;
  const Eigen::Index ncol = static_cast<Eigen::Index>(k) * k * cout;

  Tensor<Real> y(Dims{xd.n, out_h, out_w, cout});
  {
    RowMat<Real> cols = CMapMat<Real>(x->value.data(), rows, xd.c) * CMapMat<Real>(weight->value.data(), xd.c, ncol);
    for (int b = 0; b < xd.n; ++b)
      for (int iy = 0; iy < xd.h; ++iy)
        for (int ix = 0; ix < xd.w; ++ix) {
          const Real* row = cols.data() + ((static_cast<Eigen::Index>(b) * xd.h + iy) * xd.w + ix) * ncol;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              Real* dst = &y(b, iy * stride + ky, ix * stride + kx, 0);
              const Real* src = row + (static_cast<std::size_t>(ky) * k + kx) * cout;
              for (int c = 0; c < cout; ++c) dst[c] += src[c];
            }
        }
    if (bias) {
      MapMat<Real> out(y.data(), static_cast<Eigen::Index>(y.size() / cout), cout);
      out.rowwise() += CMapRow<Real>(bias->value.data(), cout);
    }
  }

  return make_result<Real>(std::move(y), {x, weight, bias}, [xd, k, stride, cout, rows, ncol](Node<Real>& self) {
    auto& xin = self.inputs[0];
    auto& w = self.inputs[1];
    auto& b = self.inputs[2];
    const Tensor<Real>& dy = self.grad;
    if (b && b->requires_grad)
      MapRow<Real>(b->grad_buffer().data(), cout) +=
          CMapMat<Real>(dy.data(), static_cast<Eigen::Index>(dy.size() / cout), cout).colwise().sum();
    RowMat<Real> dcols(rows, ncol);
    for (int bi = 0; bi < xd.n; ++bi)
      for (int iy = 0; iy < xd.h; ++iy)
        for (int ix = 0; ix < xd.w; ++ix) {
          Real* row = dcols.data() + ((static_cast<Eigen::Index>(bi) * xd.h + iy) * xd.w + ix) * ncol;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const Real* src = dy.data() + dy.offset(bi, iy * stride + ky, ix * stride + kx, 0);
              std::copy(src, src + cout, row + (static_cast<std::size_t>(ky) * k + kx) * cout);
            }
        }
    if (w->requires_grad)
      MapMat<Real>(w->grad_buffer().data(), xd.c, ncol).noalias() +=
          CMapMat<Real>(xin->value.data(), rows, xd.c).transpose() * dcols;
    if (xin->requires_grad)
      MapMat<Real>(xin->grad_buffer().data(), rows, xd.c).noalias() +=
          dcols * CMapMat<Real>(w->value.data(), xd.c, ncol).transpose();
  });
}

// ---- pointwise --------------------------------------------------------

template <typename Real>
Var<Real> relu(const Var<Real>& x) {
  Tensor<Real> y = x->value;
  for (auto& v : y.storage()) v = v > Real(0) ? v : Real(0);
  return make_result<Real>(std::move(y), {x}, [](Node<Real>& self) {
    auto& in = self.inputs[0];
    auto& dx = in->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in->value[i] > Real(0)) dx[i] += self.grad[i];
  });
}

template <typename Real>
Var<Real> gelu(const Var<Real>& x) {
  Tensor<Real> y = x->value;
  const Real inv_sqrt2 = Real(1) / std::sqrt(Real(2));
  for (auto& v : y.storage()) v = Real(0.5) * v * (Real(1) + std::erf(v * inv_sqrt2));
  return make_result<Real>(std::move(y), {x}, [inv_sqrt2](Node<Real>& self) {
    auto& in = self.inputs[0];
    auto& dx = in->grad_buffer();
    const Real inv_sqrt_2pi = Real(1) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const Real v = in->value[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
      const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * v * v);
      dx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  const Dims ad = a->dims(), bd = b->dims();
  const bool broadcast = ad != bd;
  require(!broadcast || (bd.n == 1 && bd.h == ad.h && bd.w == ad.w && bd.c == ad.c),
          "add: shapes " + ad.str() + " and " + bd.str() + " do not broadcast");
  Tensor<Real> y = a->value;
  const std::size_t per = bd.count();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[broadcast ? i % per : i];
  return make_result<Real>(std::move(y), {a, b}, [broadcast, per](Node<Real>& self) {
    auto& ia = self.inputs[0];
    auto& ib = self.inputs[1];
    if (ia->requires_grad) {
      auto& da = ia->grad_buffer();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i];
    }
    if (ib->requires_grad) {
      auto& db = ib->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) db[broadcast ? i % per : i] += self.grad[i];
    }
  });
}

template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  require(a->dims() == b->dims(), "mul: shapes " + a->dims().str() + " and " + b->dims().str() + " differ");
  Tensor<Real> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b->value[i];
  return make_result<Real>(std::move(y), {a, b}, [](Node<Real>& self) {
    auto& ia = self.inputs[0];
    auto& ib = self.inputs[1];
    if (ia->requires_grad) {
      auto& da = ia->grad_buffer();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i] * ib->value[i];
    }
    if (ib->requires_grad) {
      auto& db = ib->grad_buffer();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[i] * ia->value[i];
    }
  });
}

template <typename Real>
Var<Real> scale(const Var<Real>& x, Real factor) {
  Tensor<Real> y = x->value;
  for (auto& v : y.storage()) v *= factor;
  return make_result<Real>(std::move(y), {x}, [factor](Node<Real>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * self.grad[i];
  });
}

template <typename Real>
Var<Real> exp(const Var<Real>& x) {
  Tensor<Real> y = x->value;
  for (auto& v : y.storage()) v = std::exp(v);
  return make_result<Real>(std::move(y), {x}, [](Node<Real>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * self.value[i];
  });
}

template <typename Real>
Var<Real> clamp(const Var<Real>& x, Real lo, Real hi) {
  Tensor<Real> y = x->value;
  for (auto& v : y.storage()) v = std::clamp(v, lo, hi);
  return make_result<Real>(std::move(y), {x}, [lo, hi](Node<Real>& self) {
    auto& in = self.inputs[0];
    auto& dx = in->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in->value[i] >= lo && in->value[i] <= hi) dx[i] += self.grad[i];
  });
}

// ---- spatial / channel plumbing ------------------------------------------

template <typename Real>
Var<Real> max_pool2x2(const Var<Real>& x) {
  const Dims d = x->dims();
  require(d.h % 2 == 0 && d.w % 2 == 0, "max_pool2x2: odd spatial size " + d.str());
  Tensor<Real> y(Dims{d.n, d.h / 2, d.w / 2, d.c});
  std::vector<std::size_t> argmax(y.size());
  const Tensor<Real>& in = x->value;
  std::size_t o = 0;
  for (int b = 0; b < d.n; ++b)
    for (int oy = 0; oy < d.h / 2; ++oy)
      for (int ox = 0; ox < d.w / 2; ++ox)
        for (int c = 0; c < d.c; ++c, ++o) {
          std::size_t best = in.offset(b, 2 * oy, 2 * ox, c);
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = in.offset(b, 2 * oy + dy, 2 * ox + dx, c);
              if (in[idx] > in[best]) best = idx;
            }
          argmax[o] = best;
          y[o] = in[best];
        }
  return make_result<Real>(std::move(y), {x}, [argmax = std::move(argmax)](Node<Real>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad[i];
  });
}

template <typename Real>
Var<Real> upsample_nearest2x(const Var<Real>& x) {
  const Dims d = x->dims();
  Tensor<Real> y(Dims{d.n, d.h * 2, d.w * 2, d.c});
  for (int b = 0; b < d.n; ++b)
    for (int oy = 0; oy < 2 * d.h; ++oy)
      for (int ox = 0; ox < 2 * d.w; ++ox) {
        const Real* src = &x->value(b, oy / 2, ox / 2, 0);
        std::copy(src, src + d.c, &y(b, oy, ox, 0));
      }
  return make_result<Real>(std::move(y), {x}, [d](Node<Real>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (int b = 0; b < d.n; ++b)
      for (int oy = 0; oy < 2 * d.h; ++oy)
        for (int ox = 0; ox < 2 * d.w; ++ox) {
          const Real* src = &self.grad(b, oy, ox, 0);
          Real* dst = &dx(b, oy / 2, ox / 2, 0);
          for (int c = 0; c < d.c; ++c) dst[c] += src[c];
        }
  });
}

template <typename Real>
Var<Real> concat_channels(const Var<Real>& a, const Var<Real>& b) {
  const Dims ad = a->dims(), bd = b->dims();
  require(ad.n == bd.n && ad.h == bd.h && ad.w == bd.w,
          "concat_channels: " + ad.str() + " vs " + bd.str());
  const int ca = ad.c, cb = bd.c;
  Tensor<Real> y(Dims{ad.n, ad.h, ad.w, ca + cb});
  const std::size_t positions = static_cast<std::size_t>(ad.n) * ad.h * ad.w;
  for (std::size_t p = 0; p < positions; ++p) {
    std::copy_n(a->value.data() + p * ca, ca, y.data() + p * (ca + cb));
    std::copy_n(b->value.data() + p * cb, cb, y.data() + p * (ca + cb) + ca);
  }
  return make_result<Real>(std::move(y), {a, b}, [positions, ca, cb](Node<Real>& self) {
    auto& ia = self.inputs[0];
    auto& ib = self.inputs[1];
    for (std::size_t p = 0; p < positions; ++p) {
      const Real* g = self.grad.data() + p * (ca + cb);
      if (ia->requires_grad) {
        Real* da = ia->grad_buffer().data() + p * ca;
        for (int c = 0; c < ca; ++c) da[c] += g[c];
      }
      if (ib->requires_grad) {
        Real* db = ib->grad_buffer().data() + p * cb;
        for (int c = 0; c < cb; ++c) db[c] += g[ca + c];
      }
    }
  });
}

template <typename Real>
Var<Real> slice_channels(const Var<Real>& x, int start, int count) {
  const Dims d = x->dims();
  require(start >= 0 && count > 0 && start + count <= d.c, "slice_channels: range out of bounds");
  Tensor<Real> y(Dims{d.n, d.h, d.w, count});
  const std::size_t positions = static_cast<std::size_t>(d.n) * d.h * d.w;
  for (std::size_t p = 0; p < positions; ++p)
    std::copy_n(x->value.data() + p * d.c + start, count, y.data() + p * count);
  return make_result<Real>(std::move(y), {x}, [positions, start, count, total = d.c](Node<Real>& self) {
    Real* dx = self.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < positions; ++p)
      for (int c = 0; c < count; ++c) dx[p * total + start + c] += self.grad[p * count + c];
  });
}

template <typename Real>
Var<Real> global_avg_pool(const Var<Real>& x) {
  const Dims d = x->dims();
  Tensor<Real> y(Dims{d.n, 1, 1, d.c});
  const Real inv = Real(1) / static_cast<Real>(d.h * d.w);
  for (int b = 0; b < d.n; ++b)
    for (int yy = 0; yy < d.h; ++yy)
      for (int xx = 0; xx < d.w; ++xx)
        for (int c = 0; c < d.c; ++c) y(b, 0, 0, c) += x->value(b, yy, xx, c) * inv;
  return make_result<Real>(std::move(y), {x}, [d, inv](Node<Real>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (int b = 0; b < d.n; ++b)
      for (int yy = 0; yy < d.h; ++yy)
        for (int xx = 0; xx < d.w; ++xx)
          for (int c = 0; c < d.c; ++c) dx(b, yy, xx, c) += self.grad(b, 0, 0, c) * inv;
  });
}

template <typename Real>
Var<Real> tile_spatial(const Var<Real>& z, int height, int width) {
  const Dims d = z->dims();
  require(d.h == 1 && d.w == 1, "tile_spatial: expected (B,1,1,C), got " + d.str());
  Tensor<Real> y(Dims{d.n, height, width, d.c});
  for (int b = 0; b < d.n; ++b)
    for (int yy = 0; yy < height; ++yy)
      for (int xx = 0; xx < width; ++xx) std::copy_n(&z->value(b, 0, 0, 0), d.c, &y(b, yy, xx, 0));
  return make_result<Real>(std::move(y), {z}, [d, height, width](Node<Real>& self) {
    auto& dz = self.inputs[0]->grad_buffer();
    for (int b = 0; b < d.n; ++b)
      for (int yy = 0; yy < height; ++yy)
        for (int xx = 0; xx < width; ++xx)
          for (int c = 0; c < d.c; ++c) dz(b, 0, 0, c) += self.grad(b, yy, xx, c);
  });
}

// ---- normalisation ------------------------------------------------------

namespace {

template <typename Real>
struct NormCache {
  std::vector<Real> xhat;
  std::vector<Real> inv_std;
};

}  // namespace

template <typename Real>
Var<Real> group_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, int groups, Real eps) {
  const Dims d = x->dims();
  require(groups >= 1 && d.c % groups == 0, "group_norm: channels " + std::to_string(d.c) + " not divisible by " +
                                                std::to_string(groups));
  require(gamma->value.size() == static_cast<std::size_t>(d.c) && beta->value.size() == static_cast<std::size_t>(d.c),
          "group_norm: affine size");
  const int cg = d.c / groups;
  const std::size_t spatial = static_cast<std::size_t>(d.h) * d.w;
  const Real count = static_cast<Real>(spatial * cg);

  auto cache = std::make_shared<NormCache<Real>>();
  cache->xhat.resize(x->value.size());
  cache->inv_std.resize(static_cast<std::size_t>(d.n) * groups);
  Tensor<Real> y(d);
  for (int b = 0; b < d.n; ++b)
    for (int g = 0; g < groups; ++g) {
      Real mean = 0;
      for (std::size_t p = 0; p < spatial; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) mean += x->value[(b * spatial + p) * d.c + c];
      mean /= count;
      Real var = 0;
      for (std::size_t p = 0; p < spatial; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) {
          const Real t = x->value[(b * spatial + p) * d.c + c] - mean;
          var += t * t;
        }
      var /= count;
      const Real inv = Real(1) / std::sqrt(var + eps);
      cache->inv_std[static_cast<std::size_t>(b) * groups + g] = inv;
      for (std::size_t p = 0; p < spatial; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) {
          const std::size_t i = (b * spatial + p) * d.c + c;
          const Real xh = (x->value[i] - mean) * inv;
          cache->xhat[i] = xh;
          y[i] = xh * gamma->value[c] + beta->value[c];
        }
    }

  return make_result<Real>(std::move(y), {x, gamma, beta}, [d, groups, cg, spatial, count, cache](Node<Real>& self) {
    auto& xin = self.inputs[0];
    auto& gm = self.inputs[1];
    auto& bt = self.inputs[2];
    const auto& dy = self.grad;
    if (gm->requires_grad || bt->requires_grad) {
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const int c = static_cast<int>(i % d.c);
        if (gm->requires_grad) gm->grad_buffer()[c] += dy[i] * cache->xhat[i];
        if (bt->requires_grad) bt->grad_buffer()[c] += dy[i];
      }
    }
    if (!xin->requires_grad) return;
    auto& dx = xin->grad_buffer();
    for (int b = 0; b < d.n; ++b)
      for (int g = 0; g < groups; ++g) {
        Real sum1 = 0, sum2 = 0;
        for (std::size_t p = 0; p < spatial; ++p)
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            const std::size_t i = (b * spatial + p) * d.c + c;
            const Real dxh = dy[i] * gm->value[c];
            sum1 += dxh;
            sum2 += dxh * cache->xhat[i];
          }
        const Real inv = cache->inv_std[static_cast<std::size_t>(b) * groups + g];
        for (std::size_t p = 0; p < spatial; ++p)
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            const std::size_t i = (b * spatial + p) * d.c + c;
            const Real dxh = dy[i] * gm->value[c];
            dx[i] += inv / count * (count * dxh - sum1 - cache->xhat[i] * sum2);
          }
      }
  });
}

template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps) {
  const Dims d = x->dims();
  require(gamma->value.size() == static_cast<std::size_t>(d.c) && beta->value.size() == static_cast<std::size_t>(d.c),
          "layer_norm: affine size");
  const std::size_t positions = static_cast<std::size_t>(d.n) * d.h * d.w;
  const int ch = d.c;
  auto cache = std::make_shared<NormCache<Real>>();
  cache->xhat.resize(x->value.size());
  cache->inv_std.resize(positions);
  Tensor<Real> y(d);
  for (std::size_t p = 0; p < positions; ++p) {
    const Real* row = x->value.data() + p * ch;
    Real mean = 0;
    for (int c = 0; c < ch; ++c) mean += row[c];
    mean /= ch;
    Real var = 0;
    for (int c = 0; c < ch; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= ch;
    const Real inv = Real(1) / std::sqrt(var + eps);
    cache->inv_std[p] = inv;
    for (int c = 0; c < ch; ++c) {
      const Real xh = (row[c] - mean) * inv;
      cache->xhat[p * ch + c] = xh;
      y[p * ch + c] = xh * gamma->value[c] + beta->value[c];
    }
  }
  return make_result<Real>(std::move(y), {x, gamma, beta}, [positions, ch, cache](Node<Real>& self) {
    auto& xin = self.inputs[0];
    auto& gm = self.inputs[1];
    auto& bt = self.inputs[2];
    const auto& dy = self.grad;
    for (std::size_t p = 0; p < positions; ++p) {
      Real sum1 = 0, sum2 = 0;
      for (int c = 0; c < ch; ++c) {
        const std::size_t i = p * ch + c;
        if (gm->requires_grad) gm->grad_buffer()[c] += dy[i] * cache->xhat[i];
        if (bt->requires_grad) bt->grad_buffer()[c] += dy[i];
        const Real dxh = dy[i] * gm->value[c];
        sum1 += dxh;
        sum2 += dxh * cache->xhat[i];
      }
      if (!xin->requires_grad) continue;
      auto& dx = xin->grad_buffer();
      const Real inv = cache->inv_std[p];
      for (int c = 0; c < ch; ++c) {
        const std::size_t i = p * ch + c;
        const Real dxh = dy[i] * gm->value[c];
        dx[i] += inv / ch * (ch * dxh - sum1 - cache->xhat[i] * sum2);
      }
    }
  });
}

// ---- attention --------------------------------------------------------

template <typename Real>
Var<Real> multi_head_attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, int heads,
                               std::vector<Real>* weights_out) {
  const Dims d = q->dims();
  require(k->dims() == d && v->dims() == d, "multi_head_attention: q/k/v shapes differ");
  require(heads >= 1 && d.c % heads == 0, "multi_head_attention: channels not divisible by heads");
  const Eigen::Index tokens = static_cast<Eigen::Index>(d.h) * d.w;
  const Eigen::Index dh = d.c / heads;
  const Eigen::Index stride = d.c;
  const Real scale_factor = Real(1) / std::sqrt(static_cast<Real>(dh));
  const std::size_t block = static_cast<std::size_t>(tokens * tokens);

  auto probs = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(d.n) * heads * block);
  Tensor<Real> out(d);
  for (int b = 0; b < d.n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * tokens * stride;
    for (int h = 0; h < heads; ++h) {
      CStridedMap<Real> qm(q->value.data() + base + h * dh, tokens, dh, Eigen::OuterStride<>(stride));
      CStridedMap<Real> km(k->value.data() + base + h * dh, tokens, dh, Eigen::OuterStride<>(stride));
      CStridedMap<Real> vm(v->value.data() + base + h * dh, tokens, dh, Eigen::OuterStride<>(stride));
      MapMat<Real> p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * block, tokens, tokens);
      p.noalias() = (qm * km.transpose()) * scale_factor;
      for (Eigen::Index r = 0; r < tokens; ++r) {
        const Real mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      StridedMap<Real> om(out.data() + base + h * dh, tokens, dh, Eigen::OuterStride<>(stride));
      om.noalias() = p * vm;
    }
  }
  if (weights_out) *weights_out = *probs;

  return make_result<Real>(std::move(out), {q, k, v},
                           [d, heads, tokens, dh, stride, scale_factor, block, probs](Node<Real>& self) {
                             auto& iq = self.inputs[0];
                             auto& ik = self.inputs[1];
                             auto& iv = self.inputs[2];
                             for (int b = 0; b < d.n; ++b) {
                               const std::size_t base = static_cast<std::size_t>(b) * tokens * stride;
                               for (int h = 0; h < heads; ++h) {
                                 CStridedMap<Real> qm(iq->value.data() + base + h * dh, tokens, dh,
                                                      Eigen::OuterStride<>(stride));
                                 CStridedMap<Real> km(ik->value.data() + base + h * dh, tokens, dh,
                                                      Eigen::OuterStride<>(stride));
                                 CStridedMap<Real> vm(iv->value.data() + base + h * dh, tokens, dh,
                                                      Eigen::OuterStride<>(stride));
                                 CStridedMap<Real> dout(self.grad.data() + base + h * dh, tokens, dh,
                                                        Eigen::OuterStride<>(stride));
                                 CMapMat<Real> p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * block,
                                                 tokens, tokens);
                                 if (iv->requires_grad) {
                                   StridedMap<Real> dv(iv->grad_buffer().data() + base + h * dh, tokens, dh,
                                                       Eigen::OuterStride<>(stride));
                                   dv.noalias() += p.transpose() * dout;
                                 }
                                 RowMat<Real> dp = dout * vm.transpose();
                                 RowMat<Real> ds = p.cwiseProduct(dp);
                                 for (Eigen::Index r = 0; r < tokens; ++r) {
                                   const Real rs = ds.row(r).sum();
                                   ds.row(r) -= p.row(r) * rs;
                                 }
                                 if (iq->requires_grad) {
                                   StridedMap<Real> dq(iq->grad_buffer().data() + base + h * dh, tokens, dh,
                                                       Eigen::OuterStride<>(stride));
                                   dq.noalias() += (ds * km) * scale_factor;
                                 }
                                 if (ik->requires_grad) {
                                   StridedMap<Real> dk(ik->grad_buffer().data() + base + h * dh, tokens, dh,
                                                       Eigen::OuterStride<>(stride));
                                   dk.noalias() += (ds.transpose() * qm) * scale_factor;
                                 }
                               }
                             }
                           });
}

// ---- losses ---------------------------------------------------------------

template <typename Real>
Var<Real> bce_with_logits(const Var<Real>& logits, const Tensor<Real>& target) {
  require(logits->value.size() == target.size(), "bce_with_logits: logits " + logits->dims().str() +
                                                      " vs target " + target.dims().str());
  const Real value = objective::cross_entropy<Real>(logits->value.values(), target.values());
  return make_result<Real>(scalar_tensor(value), {logits}, [target](Node<Real>& self) {
    auto& in = self.inputs[0];
    auto& dx = in->grad_buffer();
    const Real g = self.grad[0] / static_cast<Real>(dx.size());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * (objective::sigmoid(in->value[i]) - target[i]);
  });
}

template <typename Real>
Var<Real> kl_diag_gaussian(const Var<Real>& mean_q, const Var<Real>& log_var_q, const Var<Real>& mean_p,
                           const Var<Real>& log_var_p) {
  const Dims d = mean_q->dims();
  require(log_var_q->dims() == d && mean_p->dims() == d && log_var_p->dims() == d,
          "kl_diag_gaussian: dimension mismatch");
  const int batch = d.n;
  const std::size_t dim = d.count() / static_cast<std::size_t>(batch);
  Real total = 0;
  for (int b = 0; b < batch; ++b) {
    const std::size_t o = static_cast<std::size_t>(b) * dim;
    total += objective::kl_divergence<Real>(mean_q->value.values().subspan(o, dim),
                                            log_var_q->value.values().subspan(o, dim),
                                            mean_p->value.values().subspan(o, dim),
                                            log_var_p->value.values().subspan(o, dim));
  }
  total /= static_cast<Real>(batch);
  return make_result<Real>(scalar_tensor(total), {mean_q, log_var_q, mean_p, log_var_p}, [batch](Node<Real>& self) {
    auto& mq = self.inputs[0];
    auto& lq = self.inputs[1];
    auto& mp = self.inputs[2];
    auto& lp = self.inputs[3];
    const Real g = self.grad[0] / static_cast<Real>(batch);
    for (std::size_t i = 0; i < mq->value.size(); ++i) {
      const Real var_p = std::exp(lp->value[i]);
      const Real ratio = std::exp(lq->value[i] - lp->value[i]);
      const Real diff = mp->value[i] - mq->value[i];
      if (mq->requires_grad) mq->grad_buffer()[i] += g * (-diff / var_p);
      if (mp->requires_grad) mp->grad_buffer()[i] += g * (diff / var_p);
      if (lq->requires_grad) lq->grad_buffer()[i] += g * Real(0.5) * (ratio - Real(1));
      if (lp->requires_grad) lp->grad_buffer()[i] += g * Real(0.5) * (-ratio - diff * diff / var_p + Real(1));
    }
  });
}

// ---- instantiation ------------------------------------------------------

#define WMHSEG_INSTANTIATE_OPS(R)                                                                          \
  template Var<R> conv2d<R>(const Var<R>&, const Var<R>&, const Var<R>&, int, int);                        \
  template Var<R> conv_transpose2d<R>(const Var<R>&, const Var<R>&, const Var<R>&, int);                   \
  template Var<R> relu<R>(const Var<R>&);                                                                  \
  template Var<R> gelu<R>(const Var<R>&);                                                                  \
  template Var<R> max_pool2x2<R>(const Var<R>&);                                                           \
  template Var<R> upsample_nearest2x<R>(const Var<R>&);                                                    \
  template Var<R> add<R>(const Var<R>&, const Var<R>&);                                                    \
  template Var<R> mul<R>(const Var<R>&, const Var<R>&);                                                    \
  template Var<R> scale<R>(const Var<R>&, R);                                                              \
  template Var<R> exp<R>(const Var<R>&);                                                                   \
  template Var<R> clamp<R>(const Var<R>&, R, R);                                                           \
  template Var<R> concat_channels<R>(const Var<R>&, const Var<R>&);                                        \
  template Var<R> slice_channels<R>(const Var<R>&, int, int);                                              \
  template Var<R> group_norm<R>(const Var<R>&, const Var<R>&, const Var<R>&, int, R);                      \
  template Var<R> layer_norm<R>(const Var<R>&, const Var<R>&, const Var<R>&, R);                           \
  template Var<R> multi_head_attention<R>(const Var<R>&, const Var<R>&, const Var<R>&, int, std::vector<R>*); \
  template Var<R> global_avg_pool<R>(const Var<R>&);                                                       \
  template Var<R> tile_spatial<R>(const Var<R>&, int, int);                                                \
  template Var<R> bce_with_logits<R>(const Var<R>&, const Tensor<R>&);                                     \
  template Var<R> kl_diag_gaussian<R>(const Var<R>&, const Var<R>&, const Var<R>&, const Var<R>&);

WMHSEG_INSTANTIATE_OPS(float)
WMHSEG_INSTANTIATE_OPS(double)

#undef WMHSEG_INSTANTIATE_OPS

}  // namespace ops

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace wmhseg::nets
