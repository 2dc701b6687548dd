#pragma once

#include <string>
#include <vector>

#include "lv/layers.hpp"

namespace lv {

struct ModelSpec {
  std::string name = "custom";
  Shape input_shape;
  std::int64_t latent_dim = 0;
  double lipschitz = 1.0;  // decoder certificate target
  std::vector<LayerSpec> encoder, decoder;

  // 2-D ambient, m=2, 4x dense-32 LeakyReLU(0.2) encoder, mirrored decoder of
  // normalized layers.
  static ModelSpec toy1d();
  // 3-D ambient, m=3, width 128.
  static ModelSpec toy2d();
  // Single dense encoder z=Ax+a and decoder x=Bz+b, no activations.
  static ModelSpec linear(std::int64_t input_dim, std::int64_t m, bool sn_decoder = true);
  // Conv stack halving size x16 or x32 down to 2x2 (channels 32,64,...),
  // flatten, dense to m; mirrored normalized deconv decoder ending in sigmoid.
  static ModelSpec conv_synthetic(std::int64_t size = 16, std::int64_t channels = 3,
                                  std::int64_t m = 50);
};

// Ablation switch: clears every normalization flag.
void strip_spectral_norm(ModelSpec& spec);

void validate_model_spec(const ModelSpec& spec);
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

struct Model {
  ModelSpec spec;
  std::vector<Layer> encoder, decoder;
  // Bumped on every parameter update; keys the eval-mode sigma caches.
  std::uint64_t version = 0;

  std::int64_t latent_dim() const { return spec.latent_dim; }
  std::int64_t input_size() const { return shape_size(spec.input_shape); }
};

Model build_autoencoder(const ModelSpec& spec, std::uint64_t seed);

Tensor encode(Graph& g, Model& model, const Tensor& x, Mode mode);
Tensor decode(Graph& g, Model& model, const Tensor& z, Mode mode);

// Eval-mode forwards over row-flattened samples, chunked through scratch
// graphs.
Eigen::MatrixXd encode_eval(Model& model, const Eigen::MatrixXd& x, std::int64_t chunk = 256);
Eigen::MatrixXd decode_eval(Model& model, const Eigen::MatrixXd& z, std::int64_t chunk = 256);

bool decoder_fully_normalized(const Model& model);
// Product of certified layer norms and activation Lipschitz constants.
double certified_decoder_lipschitz(const Model& model, double rel_tol = 1e-9);

// Trainable parameters in fixed enumeration order (weights and biases).
struct ParamRef {
  std::string name;
  Tensor tensor;
};
std::vector<ParamRef> model_parameters(Model& model);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace lv
