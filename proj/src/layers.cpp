#include "lv/layers.hpp"

#include <cmath>
#include <limits>

namespace lv {

namespace {

constexpr double kTiny = 1e-300;
constexpr double kDivGuard = 1e-12;

using CRowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Direction-aware conv applier for power iteration; state lives on the
// operator's input side.
struct ConvMap {
  ConvDims d{};
  const double* k = nullptr;
  bool transposed = false;

  std::int64_t in_size() const { return transposed ? d.co * d.ho * d.wo : d.ci * d.h * d.w; }
  std::int64_t out_size() const { return transposed ? d.ci * d.h * d.w : d.co * d.ho * d.wo; }
  void apply(const double* in, double* out) const {
    if (transposed)
      conv_adj(d, in, k, true, out);
    else
      conv_fwd(d, in, k, false, out);
  }
  void adjoint(const double* in, double* out) const {
    if (transposed)
      conv_fwd(d, in, k, true, out);
    else
      conv_adj(d, in, k, false, out);
  }
};

ConvMap make_conv_map(const Tensor& kernel, ConvDirection direction, const Shape& input_shape,
                      std::int64_t stride, std::int64_t pad) {
  const Shape& sk = kernel.shape();
  if (sk.size() != 4) throw ShapeError("conv_operator_norm: kernel shape " + shape_str(sk));
  if (input_shape.size() != 3)
    throw ShapeError("conv_operator_norm: input shape " + shape_str(input_shape));
  if (input_shape[0] != sk[1])
    throw ShapeError("conv_operator_norm: input channels " + shape_str(input_shape) +
                     " do not match kernel " + shape_str(sk));
  ConvMap m;
  m.k = kernel.data().data();
  if (direction == ConvDirection::forward) {
    m.d = conv_dims(1, input_shape[0], input_shape[1], input_shape[2], sk[0], sk[2], sk[3], stride,
                    pad, "conv_operator_norm");
    m.transposed = false;
  } else {
    const std::int64_t h = (input_shape[1] - 1) * stride - 2 * pad + sk[2];
    const std::int64_t w = (input_shape[2] - 1) * stride - 2 * pad + sk[3];
    if (h <= 0 || w <= 0)
      throw ShapeError("conv_operator_norm: degenerate output for input " + shape_str(input_shape));
    m.d = conv_dims(1, sk[0], h, w, input_shape[0], sk[2], sk[3], stride, pad, "conv_operator_norm");
    m.transposed = true;
  }
  return m;
}

double vec_norm(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())).norm();
}

// sigma reported for the pre-update state; the sequence is non-decreasing.
double conv_power_step(const ConvMap& m, std::vector<double>& u, std::vector<double>& t,
                       std::vector<double>& r) {
  m.apply(u.data(), t.data());
  const double sigma = vec_norm(t);
  if (sigma < kTiny) return 0.0;
  m.adjoint(t.data(), r.data());
  const double nr = vec_norm(r);
  if (nr < kTiny) return 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = r[i] / nr;
  return sigma;
}

// Stops once the Aitken-extrapolated tail of the (monotone) sigma sequence is
// below rel_tol * sigma twice in a row.
template <class Step>
double certify(Step step, double rel_tol, int max_iters) {
  double s_prev2 = 0.0, s_prev = 0.0, s = 0.0;
  int streak = 0;
  for (int k = 0; k < max_iters; ++k) {
    s_prev2 = s_prev;
    s_prev = s;
    s = step();
    if (s < kTiny) return 0.0;
    if (k >= 2) {
      const double d1 = s_prev - s_prev2;
      const double d2 = s - s_prev;
      double err = std::numeric_limits<double>::infinity();
      if (d2 <= 0.0)
        err = -d2;
      else if (d1 > 0.0 && d2 < d1) {
        const double rho = d2 / d1;
        err = d2 * rho / (1.0 - rho);
      }
      if (k >= 30 && err <= rel_tol * s) {
        if (++streak >= 2) return s;
      } else {
        streak = 0;
      }
    }
  }
  return s;
}

std::vector<double> fresh_power_seed(std::int64_t n) {
  CounterRng rng = CounterRng::keyed(0x6c76636f6e76ull, static_cast<std::uint64_t>(n));
  std::vector<double> u(static_cast<std::size_t>(n));
  for (auto& v : u) v = rng.next_normal();
  const double nn = vec_norm(u);
  for (auto& v : u) v /= nn;
  return u;
}

}  // namespace

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::reshape: return "reshape";
  }
  return "?";
}

const char* act_kind_name(ActKind k) {
  switch (k) {
    case ActKind::identity: return "identity";
    case ActKind::leaky_relu: return "leaky_relu";
    case ActKind::sigmoid: return "sigmoid";
  }
  return "?";
}

double activation_lipschitz(ActKind k, double alpha) {
  switch (k) {
    case ActKind::identity: return 1.0;
    case ActKind::leaky_relu: return std::max(1.0, std::fabs(alpha));
    case ActKind::sigmoid: return 0.25;
  }
  return 1.0;
}

SpectralEstimate dense_spectral_norm(const Eigen::MatrixXd& w, Eigen::VectorXd& u, int iters) {
  if (iters < 1) throw Error("dense_spectral_norm: iters must be >= 1");
  if (u.size() != w.rows())
    throw ShapeError("dense_spectral_norm: u length " + std::to_string(u.size()) + " for " +
                     std::to_string(w.rows()) + " rows");
  const double nu = u.norm();
  if (nu < kTiny) throw Error("dense_spectral_norm: zero u");
  u /= nu;
  SpectralEstimate est;
  for (int k = 0; k < iters; ++k) {
    Eigen::VectorXd v = w.transpose() * u;
    const double nv = v.norm();
    if (nv < kTiny) return {0.0, true};
    v /= nv;
    Eigen::VectorXd wv = w * v;
    est.sigma = wv.norm();
    if (est.sigma < kTiny) return {0.0, true};
    u = wv / est.sigma;
  }
  return est;
}

double dense_spectral_norm_certified(const Eigen::MatrixXd& w, Eigen::VectorXd u, double rel_tol,
                                     int max_iters) {
  const double nu = u.norm();
  if (nu < kTiny) throw Error("dense_spectral_norm_certified: zero u");
  u /= nu;
  return certify(
      [&]() {
        Eigen::VectorXd v = w.transpose() * u;
        const double nv = v.norm();
        if (nv < kTiny) return 0.0;
        v /= nv;
        Eigen::VectorXd wv = w * v;
        const double s = wv.norm();
        if (s >= kTiny) u = wv / s;
        return s;
      },
      rel_tol, max_iters);
}

double conv_operator_norm(const Tensor& kernel, ConvDirection direction, const Shape& input_shape,
                          std::int64_t stride, std::int64_t pad, int iters,
                          std::vector<double>* u_state) {
  if (iters < 1) throw Error("conv_operator_norm: iters must be >= 1");
  const ConvMap m = make_conv_map(kernel, direction, input_shape, stride, pad);
  std::vector<double> local;
  std::vector<double>& u = u_state ? *u_state : local;
  if (u.size() != static_cast<std::size_t>(m.in_size())) {
    if (u_state && !u.empty())
      throw ShapeError("conv_operator_norm: state length " + std::to_string(u.size()) + " for " +
                       std::to_string(m.in_size()) + " inputs");
    u = fresh_power_seed(m.in_size());
  }
  std::vector<double> t(static_cast<std::size_t>(m.out_size()));
  std::vector<double> r(u.size());
  double sigma = 0.0;
  for (int k = 0; k < iters; ++k) sigma = conv_power_step(m, u, t, r);
  return sigma;
}

double conv_operator_norm_certified(const Tensor& kernel, ConvDirection direction,
                                    const Shape& input_shape, std::int64_t stride, std::int64_t pad,
                                    double rel_tol, int max_iters, const std::vector<double>* u0) {
  const ConvMap m = make_conv_map(kernel, direction, input_shape, stride, pad);
  std::vector<double> u;
  if (u0 && u0->size() == static_cast<std::size_t>(m.in_size())) {
    u = *u0;
    const double nn = vec_norm(u);
    if (nn < kTiny)
      u = fresh_power_seed(m.in_size());
    else
      for (auto& v : u) v /= nn;
  } else {
    u = fresh_power_seed(m.in_size());
  }
  std::vector<double> t(static_cast<std::size_t>(m.out_size()));
  std::vector<double> r(u.size());
  return certify([&]() { return conv_power_step(m, u, t, r); }, rel_tol, max_iters);
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& in, const std::string& where) {
  switch (spec.kind) {
    case LayerKind::dense:
      if (in.size() != 1)
        throw ShapeError(where + ": dense layer needs rank-1 input, got " + shape_str(in));
      if (spec.out <= 0) throw ShapeError(where + ": non-positive width");
      return {spec.out};
    case LayerKind::conv: {
      if (in.size() != 3)
        throw ShapeError(where + ": conv layer needs rank-3 input, got " + shape_str(in));
      ConvDims d = conv_dims(1, in[0], in[1], in[2], spec.out, spec.kernel, spec.kernel, spec.stride,
                             spec.pad, where.c_str());
      return {d.co, d.ho, d.wo};
    }
    case LayerKind::deconv: {
      if (in.size() != 3)
        throw ShapeError(where + ": deconv layer needs rank-3 input, got " + shape_str(in));
      const std::int64_t h = (in[1] - 1) * spec.stride - 2 * spec.pad + spec.kernel;
      const std::int64_t w = (in[2] - 1) * spec.stride - 2 * spec.pad + spec.kernel;
      if (spec.out <= 0 || h <= 0 || w <= 0)
        throw ShapeError(where + ": degenerate deconv output for input " + shape_str(in));
      return {spec.out, h, w};
    }
    case LayerKind::reshape:
      if (shape_size(spec.target) != shape_size(in))
        throw ShapeError(where + ": cannot reshape " + shape_str(in) + " to " +
                         shape_str(spec.target));
      return spec.target;
  }
  throw Error(where + ": unknown layer kind");
}

void init_layer(Layer& layer, std::uint64_t seed, std::uint64_t stream) {
  if (layer.spec.kind == LayerKind::reshape) return;
  CounterRng rng = CounterRng::keyed(seed, stream);
  std::int64_t fan_in = 0;
  if (layer.spec.kind == LayerKind::dense) {
    fan_in = layer.in_shape[0];
    layer.weight = Tensor::zeros({layer.spec.out, layer.in_shape[0]});
  } else {
    fan_in = layer.in_shape[0] * layer.spec.kernel * layer.spec.kernel;
    layer.weight =
        Tensor::zeros({layer.spec.out, layer.in_shape[0], layer.spec.kernel, layer.spec.kernel});
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : layer.weight.data()) v = rng.next_range(-bound, bound);
  layer.bias = Tensor::zeros({layer.spec.out});
  for (double& v : layer.bias.data()) v = rng.next_range(-bound, bound);

  const std::int64_t ulen =
      layer.spec.kind == LayerKind::dense ? layer.spec.out : shape_size(layer.in_shape);
  layer.sn_u.assign(static_cast<std::size_t>(ulen), 0.0);
  for (auto& v : layer.sn_u) v = rng.next_normal();
  const double nn = vec_norm(layer.sn_u);
  for (auto& v : layer.sn_u) v /= nn;
  layer.eval_sigma_version = ~0ull;
}

double layer_eval_sigma(const Layer& layer, std::uint64_t version) {
  if (layer.eval_sigma_version == version) return layer.eval_sigma_cache;
  double sigma = 0.0;
  if (layer.spec.kind == LayerKind::dense) {
    const Eigen::MatrixXd w =
        CRowMap(layer.weight.data().data(), layer.weight.shape()[0], layer.weight.shape()[1]);
    Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(layer.sn_u.data(),
                                                          static_cast<Eigen::Index>(layer.sn_u.size()));
    sigma = dense_spectral_norm(w, u, 50).sigma;
  } else if (layer.spec.kind == LayerKind::conv || layer.spec.kind == LayerKind::deconv) {
    std::vector<double> u = layer.sn_u;
    sigma = conv_operator_norm(layer.weight,
                               layer.spec.kind == LayerKind::conv ? ConvDirection::forward
                                                                  : ConvDirection::transposed,
                               layer.in_shape, layer.spec.stride, layer.spec.pad, 50, &u);
  }
  layer.eval_sigma_cache = sigma;
  layer.eval_sigma_version = version;
  return sigma;
}

Tensor layer_forward(Graph& g, Layer& layer, const Tensor& x, Mode mode, std::uint64_t version) {
  const Shape& sx = x.shape();
  if (sx.empty() || static_cast<std::size_t>(sx.size()) != layer.in_shape.size() + 1 ||
      !std::equal(layer.in_shape.begin(), layer.in_shape.end(), sx.begin() + 1))
    throw ShapeError(std::string(layer_kind_name(layer.spec.kind)) + " layer: input " +
                     shape_str(sx) + " does not match [N]+" + shape_str(layer.in_shape));
  const std::int64_t batch = sx[0];

  Tensor y;
  if (layer.spec.kind == LayerKind::reshape) {
    Shape t;
    t.push_back(batch);
    t.insert(t.end(), layer.spec.target.begin(), layer.spec.target.end());
    y = g.reshape(x, std::move(t));
  } else {
    double scale = 1.0;
    if (layer.spec.spectral_norm) {
      double sigma;
      if (mode == Mode::train) {
        if (layer.spec.kind == LayerKind::dense) {
          const Eigen::MatrixXd w =
              CRowMap(layer.weight.data().data(), layer.weight.shape()[0], layer.weight.shape()[1]);
          Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(
              layer.sn_u.data(), static_cast<Eigen::Index>(layer.sn_u.size()));
          sigma = dense_spectral_norm(w, u, 1).sigma;
          Eigen::Map<Eigen::VectorXd>(layer.sn_u.data(), u.size()) = u;
        } else {
          sigma = conv_operator_norm(layer.weight,
                                     layer.spec.kind == LayerKind::conv ? ConvDirection::forward
                                                                        : ConvDirection::transposed,
                                     layer.in_shape, layer.spec.stride, layer.spec.pad, 1,
                                     &layer.sn_u);
        }
      } else {
        sigma = layer_eval_sigma(layer, version);
      }
      scale = 1.0 / std::max(sigma, kDivGuard);
    }

    Tensor w = g.input(layer.weight);
    if (scale != 1.0) w = g.scale(w, scale);
    Tensor b = g.input(layer.bias);

    if (layer.spec.kind == LayerKind::dense) {
      y = g.matmul(x, w, false, true);
      y = g.add(y, g.broadcast(b, {batch, layer.spec.out}));
    } else {
      y = layer.spec.kind == LayerKind::conv
              ? g.conv2d(x, w, layer.spec.stride, layer.spec.pad)
              : g.conv_transpose2d(x, w, layer.spec.stride, layer.spec.pad);
      Shape full = y.shape();
      y = g.add(y, g.broadcast(g.reshape(b, {layer.spec.out, 1, 1}), full));
    }
  }

  switch (layer.spec.act) {
    case ActKind::identity: break;
    case ActKind::leaky_relu: y = g.leaky_relu(y, layer.spec.act_alpha); break;
    case ActKind::sigmoid: y = g.sigmoid(y); break;
  }
  return y;
}

double layer_certified_norm(const Layer& layer, std::uint64_t version, double rel_tol) {
  if (layer.spec.kind == LayerKind::reshape) return 1.0;
  double cert;
  if (layer.spec.kind == LayerKind::dense) {
    const Eigen::MatrixXd w =
        CRowMap(layer.weight.data().data(), layer.weight.shape()[0], layer.weight.shape()[1]);
    Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(layer.sn_u.data(),
                                                          static_cast<Eigen::Index>(layer.sn_u.size()));
    cert = dense_spectral_norm_certified(w, u, rel_tol);
  } else {
    cert = conv_operator_norm_certified(layer.weight,
                                        layer.spec.kind == LayerKind::conv
                                            ? ConvDirection::forward
                                            : ConvDirection::transposed,
                                        layer.in_shape, layer.spec.stride, layer.spec.pad, rel_tol,
                                        2000000, &layer.sn_u);
  }
  if (!layer.spec.spectral_norm) return cert;
  return cert / std::max(layer_eval_sigma(layer, version), kDivGuard);
}

}  // namespace lv
