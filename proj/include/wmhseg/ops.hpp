#pragma once

// Differentiable tensor operations (NHWC). Each op computes its forward
// value and, when recording, registers a closure that accumulates input
// gradients. Instantiated for float and double.

#include <vector>

#include "wmhseg/tensor.hpp"

namespace wmhseg::nets::ops {

/// Weight dims (k, k, Cin, Cout); bias (1,1,1,Cout) or null.
template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride, int pad);

/// Weight dims (Cin, k, k, Cout); output side (in - 1) * stride + k.
template <typename Real>
Var<Real> conv_transpose2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride);

template <typename Real>
Var<Real> relu(const Var<Real>& x);

/// Exact (erf) GELU.
template <typename Real>
Var<Real> gelu(const Var<Real>& x);

template <typename Real>
Var<Real> max_pool2x2(const Var<Real>& x);

template <typename Real>
Var<Real> upsample_nearest2x(const Var<Real>& x);

/// a + b; b may have n == 1 and is then broadcast over the batch.
template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b);

template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b);

template <typename Real>
Var<Real> scale(const Var<Real>& x, Real factor);

template <typename Real>
Var<Real> exp(const Var<Real>& x);

/// Gradient passes only where lo <= x <= hi.
template <typename Real>
Var<Real> clamp(const Var<Real>& x, Real lo, Real hi);

template <typename Real>
Var<Real> concat_channels(const Var<Real>& a, const Var<Real>& b);

template <typename Real>
Var<Real> slice_channels(const Var<Real>& x, int start, int count);

/// Per-sample normalisation over (H, W, C/groups); gamma/beta (1,1,1,C).
template <typename Real>
Var<Real> group_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, int groups,
                     Real eps = Real(1e-5));

/// Normalisation over channels at every position; gamma/beta (1,1,1,C).
template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps = Real(1e-5));

/// Scaled dot-product attention over the H*W tokens of each batch item,
/// split into `heads` heads along channels. When `weights_out` is given it
/// receives the softmax weights laid out [batch][head][query][key].
template <typename Real>
Var<Real> multi_head_attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, int heads,
                               std::vector<Real>* weights_out = nullptr);

/// (B,H,W,C) -> (B,1,1,C).
template <typename Real>
Var<Real> global_avg_pool(const Var<Real>& x);

/// Broadcast (B,1,1,C) to (B,H,W,C).
template <typename Real>
Var<Real> tile_spatial(const Var<Real>& z, int height, int width);

/// Mean binary cross-entropy of logits against a same-shaped {0,1} target.
/// Returns a (1,1,1,1) scalar.
template <typename Real>
Var<Real> bce_with_logits(const Var<Real>& logits, const Tensor<Real>& target);

/// Batch mean of KL(q || p) between diagonal Gaussians given as (B,1,1,L)
/// means and log-variances. Returns a (1,1,1,1) scalar.
template <typename Real>
Var<Real> kl_diag_gaussian(const Var<Real>& mean_q, const Var<Real>& log_var_q, const Var<Real>& mean_p,
                           const Var<Real>& log_var_p);

}  // namespace wmhseg::nets::ops
