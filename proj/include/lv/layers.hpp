#pragma once

#include <Eigen/Core>

#include "lv/conv_ops.hpp"
#include "lv/rng.hpp"
#include "lv/tensor.hpp"

namespace lv {

enum class LayerKind { dense, conv, deconv, reshape };
enum class ActKind { identity, leaky_relu, sigmoid };
enum class Mode { train, eval };

const char* layer_kind_name(LayerKind k);
const char* act_kind_name(ActKind k);

// leaky_relu(0.2) and identity are 1-Lipschitz; sigmoid is 1/4-Lipschitz.
double activation_lipschitz(ActKind k, double alpha);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::int64_t out = 0;  // dense: features; conv/deconv: channels
  ActKind act = ActKind::identity;
  double act_alpha = 0.2;
  bool spectral_norm = false;
  std::int64_t kernel = 4, stride = 2, pad = 1;
  Shape target;  // reshape only, per-sample
};

// One realized layer. weight is [out,in] for dense and [out,in,kh,kw] for both
// conv directions (a transposed layer's kernel is stored in its own out/in
// terms). sn_u is the persistent power-iteration state: length out for dense,
// input-shaped for conv; the operator norm is certified for in_shape.
struct Layer {
  LayerSpec spec;
  Shape in_shape, out_shape;  // per-sample
  Tensor weight;
  Tensor bias;
  std::vector<double> sn_u;
  mutable double eval_sigma_cache = 1.0;
  mutable std::uint64_t eval_sigma_version = ~0ull;
};

struct SpectralEstimate {
  double sigma = 0.0;
  bool degenerate = false;
};

// iters power-iteration steps, each: v = normalize(W^T u); u = normalize(W v);
// sigma = |W v|. Mutates u for persistence. Zero operator reports degenerate.
SpectralEstimate dense_spectral_norm(const Eigen::MatrixXd& w, Eigen::VectorXd& u, int iters);

// Adaptive power iteration: stops when the Aitken-extrapolated tail of the
// sigma sequence drops below rel_tol * sigma. Lower-bounds the true sigma.
double dense_spectral_norm_certified(const Eigen::MatrixXd& w, Eigen::VectorXd u,
                                     double rel_tol = 1e-10, int max_iters = 2000000);

// Operator norm of the conv map on input_shape ([c,h,w]) by power iteration
// alternating the map and its adjoint. u_state, when given, seeds the
// iteration and receives the final vector (persistent use).
double conv_operator_norm(const Tensor& kernel, ConvDirection direction, const Shape& input_shape,
                          std::int64_t stride, std::int64_t pad, int iters,
                          std::vector<double>* u_state = nullptr);
double conv_operator_norm_certified(const Tensor& kernel, ConvDirection direction,
                                    const Shape& input_shape, std::int64_t stride, std::int64_t pad,
                                    double rel_tol = 1e-10, int max_iters = 2000000,
                                    const std::vector<double>* u0 = nullptr);

Shape layer_output_shape(const LayerSpec& spec, const Shape& in, const std::string& where);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, normalized
// Gaussian sn_u, all drawn from the portable generator stream.
void init_layer(Layer& layer, std::uint64_t seed, std::uint64_t stream);

// Training mode runs one persistent power-iteration step (mutates sn_u) and
// divides the weight by max(sigma, 1e-12) as a constant; eval mode uses a
// 50-iteration estimate from the persistent state, cached per parameter
// version. Activation applied last.
Tensor layer_forward(Graph& g, Layer& layer, const Tensor& x, Mode mode, std::uint64_t version);

double layer_eval_sigma(const Layer& layer, std::uint64_t version);

// Certified operator norm of the realized eval-mode linear map (activation
// factor excluded; reshape is 1). For a normalized layer this is
// sigma_certified / max(sigma_eval, 1e-12), slightly above 1 by construction.
double layer_certified_norm(const Layer& layer, std::uint64_t version, double rel_tol = 1e-9);

}  // namespace lv
