#include "lv/conv_ops.hpp"

#include <string>

namespace lv {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::int64_t kidx(const ConvDims& d, bool swap_k, std::int64_t o, std::int64_t i,
                         std::int64_t a, std::int64_t b) {
  return swap_k ? ((i * d.co + o) * d.kh + a) * d.kw + b : ((o * d.ci + i) * d.kh + a) * d.kw + b;
}

// Km(o, (i*kh+a)*kw+b) = kernel element for output channel o, input channel i.
RowMat kernel_matrix(const ConvDims& d, const double* k, bool swap_k) {
  RowMat km(d.co, d.ci * d.kh * d.kw);
  for (std::int64_t o = 0; o < d.co; ++o)
    for (std::int64_t i = 0; i < d.ci; ++i)
      for (std::int64_t a = 0; a < d.kh; ++a)
        for (std::int64_t b = 0; b < d.kw; ++b)
          km(o, (i * d.kh + a) * d.kw + b) = k[kidx(d, swap_k, o, i, a, b)];
  return km;
}

// Patch matrix [n*ho*wo, ci*kh*kw]; out-of-range taps stay zero (zero padding).
RowMat im2col(const ConvDims& d, const double* big) {
  RowMat p = RowMat::Zero(d.n * d.ho * d.wo, d.ci * d.kh * d.kw);
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t pp = 0; pp < d.ho; ++pp)
      for (std::int64_t q = 0; q < d.wo; ++q) {
        const std::int64_t row = (n * d.ho + pp) * d.wo + q;
        for (std::int64_t i = 0; i < d.ci; ++i)
          for (std::int64_t a = 0; a < d.kh; ++a) {
            const std::int64_t h = pp * d.stride - d.pad + a;
            if (h < 0 || h >= d.h) continue;
            for (std::int64_t b = 0; b < d.kw; ++b) {
              const std::int64_t w = q * d.stride - d.pad + b;
              if (w < 0 || w >= d.w) continue;
              p(row, (i * d.kh + a) * d.kw + b) = big[((n * d.ci + i) * d.h + h) * d.w + w];
            }
          }
      }
  return p;
}

// [n*ho*wo, co] view of the small side.
RowMat small_matrix(const ConvDims& d, const double* small) {
  RowMat g2(d.n * d.ho * d.wo, d.co);
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t o = 0; o < d.co; ++o)
      for (std::int64_t pp = 0; pp < d.ho; ++pp)
        for (std::int64_t q = 0; q < d.wo; ++q)
          g2((n * d.ho + pp) * d.wo + q, o) = small[((n * d.co + o) * d.ho + pp) * d.wo + q];
  return g2;
}

}  // namespace

ConvDims conv_dims(std::int64_t n, std::int64_t ci, std::int64_t h, std::int64_t w, std::int64_t co,
                   std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                   const char* op) {
  if (n <= 0 || ci <= 0 || h <= 0 || w <= 0 || co <= 0 || kh <= 0 || kw <= 0)
    throw ShapeError(std::string(op) + ": non-positive extent");
  if (stride <= 0 || pad < 0)
    throw ShapeError(std::string(op) + ": stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  const std::int64_t eh = h + 2 * pad - kh;
  const std::int64_t ew = w + 2 * pad - kw;
  if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " stride " + std::to_string(stride) + " pad " + std::to_string(pad) +
                     " does not tile " + std::to_string(h) + "x" + std::to_string(w));
  ConvDims d{n, ci, h, w, co, kh, kw, stride, pad, eh / stride + 1, ew / stride + 1};
  return d;
}

void conv_fwd(const ConvDims& d, const double* big, const double* k, bool swap_k, double* small) {
  const RowMat km = kernel_matrix(d, k, swap_k);
  const RowMat p = im2col(d, big);
  RowMat s(d.n * d.ho * d.wo, d.co);
  s.noalias() = p * km.transpose();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t o = 0; o < d.co; ++o)
      for (std::int64_t pp = 0; pp < d.ho; ++pp)
        for (std::int64_t q = 0; q < d.wo; ++q)
          small[((n * d.co + o) * d.ho + pp) * d.wo + q] = s((n * d.ho + pp) * d.wo + q, o);
}

void conv_adj(const ConvDims& d, const double* small, const double* k, bool swap_k, double* big) {
  const RowMat km = kernel_matrix(d, k, swap_k);
  const RowMat g2 = small_matrix(d, small);
  RowMat m(d.n * d.ho * d.wo, d.ci * d.kh * d.kw);
  m.noalias() = g2 * km;
  const std::int64_t big_size = d.n * d.ci * d.h * d.w;
  for (std::int64_t i = 0; i < big_size; ++i) big[i] = 0.0;
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t pp = 0; pp < d.ho; ++pp)
      for (std::int64_t q = 0; q < d.wo; ++q) {
        const std::int64_t row = (n * d.ho + pp) * d.wo + q;
        for (std::int64_t i = 0; i < d.ci; ++i)
          for (std::int64_t a = 0; a < d.kh; ++a) {
            const std::int64_t h = pp * d.stride - d.pad + a;
            if (h < 0 || h >= d.h) continue;
            for (std::int64_t b = 0; b < d.kw; ++b) {
              const std::int64_t w = q * d.stride - d.pad + b;
              if (w < 0 || w >= d.w) continue;
              big[((n * d.ci + i) * d.h + h) * d.w + w] += m(row, (i * d.kh + a) * d.kw + b);
            }
          }
      }
}

void conv_kgrad(const ConvDims& d, const double* big, const double* small, bool swap_result,
                double* dk) {
  const RowMat p = im2col(d, big);
  const RowMat g2 = small_matrix(d, small);
  RowMat dkm(d.co, d.ci * d.kh * d.kw);
  dkm.noalias() = g2.transpose() * p;
  for (std::int64_t o = 0; o < d.co; ++o)
    for (std::int64_t i = 0; i < d.ci; ++i)
      for (std::int64_t a = 0; a < d.kh; ++a)
        for (std::int64_t b = 0; b < d.kw; ++b) {
          const std::int64_t at = swap_result ? ((i * d.co + o) * d.kh + a) * d.kw + b
                                              : ((o * d.ci + i) * d.kh + a) * d.kw + b;
          dk[at] = dkm(o, (i * d.kh + a) * d.kw + b);
        }
}

Eigen::MatrixXd materialize_conv_matrix(const Tensor& kernel, ConvDirection direction,
                                        const Shape& input_shape, std::int64_t stride,
                                        std::int64_t pad) {
  const Shape& sk = kernel.shape();
  if (sk.size() != 4) throw ShapeError("materialize_conv_matrix: kernel shape " + shape_str(sk));
  if (input_shape.size() != 3)
    throw ShapeError("materialize_conv_matrix: input shape " + shape_str(input_shape));
  if (input_shape[0] != sk[1])
    throw ShapeError("materialize_conv_matrix: input channels " + shape_str(input_shape) +
                     " do not match kernel " + shape_str(sk));
  const std::int64_t kout = sk[0], kin = sk[1], kh = sk[2], kw = sk[3];
  const auto k = kernel.data();

  std::int64_t rows, cols;
  Eigen::MatrixXd m;
  if (direction == ConvDirection::forward) {
    ConvDims d = conv_dims(1, kin, input_shape[1], input_shape[2], kout, kh, kw, stride, pad,
                           "materialize_conv_matrix");
    rows = d.co * d.ho * d.wo;
    cols = d.ci * d.h * d.w;
    if (rows > 4096 || cols > 4096)
      throw Error("materialize_conv_matrix: " + std::to_string(rows) + "x" + std::to_string(cols) +
                  " exceeds the 4096x4096 guard");
    m = Eigen::MatrixXd::Zero(rows, cols);
    for (std::int64_t o = 0; o < d.co; ++o)
      for (std::int64_t pp = 0; pp < d.ho; ++pp)
        for (std::int64_t q = 0; q < d.wo; ++q)
          for (std::int64_t i = 0; i < d.ci; ++i)
            for (std::int64_t a = 0; a < d.kh; ++a)
              for (std::int64_t b = 0; b < d.kw; ++b) {
                const std::int64_t h = pp * stride - pad + a;
                const std::int64_t w = q * stride - pad + b;
                if (h < 0 || h >= d.h || w < 0 || w >= d.w) continue;
                m((o * d.ho + pp) * d.wo + q, (i * d.h + h) * d.w + w) +=
                    k[static_cast<std::size_t>(((o * kin + i) * kh + a) * kw + b)];
              }
    return m;
  }

  // Transposed: input is the low resolution side, kernel slots are
  // [own_out, own_in, kh, kw] with own_in matching the input channels.
  const std::int64_t hi = input_shape[1], wi = input_shape[2];
  const std::int64_t h = (hi - 1) * stride - 2 * pad + kh;
  const std::int64_t w = (wi - 1) * stride - 2 * pad + kw;
  if (h <= 0 || w <= 0)
    throw ShapeError("materialize_conv_matrix: degenerate output for input " +
                     shape_str(input_shape));
  rows = kout * h * w;
  cols = kin * hi * wi;
  if (rows > 4096 || cols > 4096)
    throw Error("materialize_conv_matrix: " + std::to_string(rows) + "x" + std::to_string(cols) +
                " exceeds the 4096x4096 guard");
  m = Eigen::MatrixXd::Zero(rows, cols);
  for (std::int64_t o = 0; o < kout; ++o)
    for (std::int64_t i = 0; i < kin; ++i)
      for (std::int64_t pp = 0; pp < hi; ++pp)
        for (std::int64_t q = 0; q < wi; ++q)
          for (std::int64_t a = 0; a < kh; ++a)
            for (std::int64_t b = 0; b < kw; ++b) {
              const std::int64_t hh = pp * stride - pad + a;
              const std::int64_t ww = q * stride - pad + b;
              if (hh < 0 || hh >= h || ww < 0 || ww >= w) continue;
              m((o * h + hh) * w + ww, (i * hi + pp) * wi + q) +=
                  k[static_cast<std::size_t>(((o * kin + i) * kh + a) * kw + b)];
            }
  return m;
}

}  // namespace lv
