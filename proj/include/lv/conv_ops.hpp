#pragma once

#include <cstdint>

#include "lv/tensor.hpp"

namespace lv {

// Geometry shared by the three convolution kernels. "big" is the high
// resolution side [N, ci, h, w], "small" the low resolution side
// [N, co, ho, wo]; ho = (h + 2*pad - kh)/stride + 1.
struct ConvDims {
  std::int64_t n, ci, h, w;
  std::int64_t co, kh, kw;
  std::int64_t stride, pad;
  std::int64_t ho, wo;
};

// Validates divisibility and positivity; fills ho/wo.
ConvDims conv_dims(std::int64_t n, std::int64_t ci, std::int64_t h, std::int64_t w,
                   std::int64_t co, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                   std::int64_t pad, const char* op);

// Kernel element for pair (co, ci) is k[co, ci, a, b], or k[ci, co, a, b] when
// swap_k is set. A stored kernel therefore always has extents
// [own_out_channels, own_in_channels, kh, kw] regardless of direction.

// small[n,co,p,q] = sum_{ci,a,b} big[n, ci, p*stride-pad+a, q*stride-pad+b] * kelem
void conv_fwd(const ConvDims& d, const double* big, const double* k, bool swap_k, double* small);

// Adjoint of conv_fwd in its first argument:
// big[n,ci,h,w] = sum over (co,p,q,a,b) with p*stride-pad+a = h, q*stride-pad+b = w
// of small[n,co,p,q] * kelem
void conv_adj(const ConvDims& d, const double* small, const double* k, bool swap_k, double* big);

// Kernel gradient: dk[co, ci, a, b] = sum_{n,p,q} small[n,co,p,q] *
// big[n, ci, p*stride-pad+a, q*stride-pad+b]. With swap_result the output is
// laid out [ci, co, a, b] instead.
void conv_kgrad(const ConvDims& d, const double* big, const double* small, bool swap_result,
                double* dk);

// Dense matrix of the linear map for one sample, rows indexed by the output
// layout, columns by the input layout. forward maps [ci,h,w] -> [co,ho,wo];
// transposed maps [co,ho,wo] -> [ci,h,w] (the adjoint with swapped kernel
// slots, matching an upsampling layer whose kernel is [ci, co, kh, kw] in its
// own out/in terms). Guarded to 4096x4096.
enum class ConvDirection { forward, transposed };
Eigen::MatrixXd materialize_conv_matrix(const Tensor& kernel, ConvDirection direction,
                                        const Shape& input_shape, std::int64_t stride,
                                        std::int64_t pad);

}  // namespace lv
