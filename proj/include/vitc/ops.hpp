#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitc/tensor.hpp"

namespace vitc {

// Dense matrix product of [m x k] and [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x [rows x in] * w [in x out] + bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Max-subtracted softmax along one axis; any rank.
Tensor softmax_axis(const Tensor& t, std::size_t axis);

// Normalizes every vector along the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& t);

enum class ElementwiseOp { add, sub, mul };

// b must have a's shape or a trailing suffix of it; b is then repeated over
// a's leading extents (a per-channel vector over an H x W x C map, say).
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }

Tensor scale(const Tensor& t, double factor);

// Sum of all elements, rank-0 result. Sequential row-major order.
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

// Mean over axis 0 of a tensor of rank >= 1, e.g. [P x C] -> [C].
Tensor mean_axis0(const Tensor& t);

Tensor reshape(const Tensor& t, Shape shape);

// Rows [begin, begin+count) along axis 0.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count);

// Concatenation along axis 0; trailing extents must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Concatenation along the last axis; leading extents must agree.
Tensor concat_last(const std::vector<Tensor>& parts);

// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);

// Bilinear resampling of an H x W x C map with half-pixel centers:
// src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
Tensor resample_bilinear(const Tensor& t, std::size_t out_h, std::size_t out_w);

// 2x2 stride-2 max pooling of an H x W x C map; odd extents round up and the
// border window only covers the pixels that exist.
Tensor max_pool2x2(const Tensor& t);

// H x W x C -> (H*W) x (9*C) patches of a zero-padded 3x3 neighbourhood,
// ordered (dy, dx, c).
Tensor im2col3x3(const Tensor& t);

// H x W x C -> ceil(H/2) x ceil(W/2) x 4C, zero padded; channel order (dy, dx, c).
Tensor space_to_depth2(const Tensor& t);

// H x W x 4C -> 2H x 2W x C; inverse layout of space_to_depth2.
Tensor depth_to_space2(const Tensor& t);

// Image H x W x Ch -> (H/p * W/p) x (p*p*Ch) row-major patches, each patch
// flattened as (py, px, ch).
Tensor patchify(const Tensor& image, std::size_t patch);

// Scaled dot-product self-attention over packed [T x 3C] projections laid out
// as [q | k | v]; each of `heads` heads owns a contiguous C/heads slice.
Tensor multi_head_attention(const Tensor& qkv, std::size_t heads);

// Central differences (f(x + h e_i) - f(x - h e_i)) / (2h) for every element.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-8);

}  // namespace vitc
