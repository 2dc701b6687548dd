#include "lv/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lv {

namespace {

using nlohmann::json;

LayerSpec dense(std::int64_t out, ActKind act, bool sn) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.out = out;
  s.act = act;
  s.spectral_norm = sn;
  return s;
}

LayerSpec conv(LayerKind kind, std::int64_t out, ActKind act, bool sn) {
  LayerSpec s;
  s.kind = kind;
  s.out = out;
  s.act = act;
  s.spectral_norm = sn;
  return s;
}

LayerSpec reshape_to(Shape target) {
  LayerSpec s;
  s.kind = LayerKind::reshape;
  s.target = std::move(target);
  return s;
}

ModelSpec dense_toy(const std::string& name, std::int64_t ambient, std::int64_t width) {
  ModelSpec m;
  m.name = name;
  m.input_shape = {ambient};
  m.latent_dim = ambient;
  for (int i = 0; i < 4; ++i) m.encoder.push_back(dense(width, ActKind::leaky_relu, false));
  m.encoder.push_back(dense(ambient, ActKind::identity, false));
  for (int i = 0; i < 4; ++i) m.decoder.push_back(dense(width, ActKind::leaky_relu, true));
  m.decoder.push_back(dense(ambient, ActKind::identity, true));
  return m;
}

json layer_to_json(const LayerSpec& s) {
  json j;
  j["kind"] = layer_kind_name(s.kind);
  j["out"] = s.out;
  j["act"] = act_kind_name(s.act);
  j["alpha"] = s.act_alpha;
  j["sn"] = s.spectral_norm;
  j["kernel"] = s.kernel;
  j["stride"] = s.stride;
  j["pad"] = s.pad;
  j["target"] = s.target;
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense")
    s.kind = LayerKind::dense;
  else if (kind == "conv")
    s.kind = LayerKind::conv;
  else if (kind == "deconv")
    s.kind = LayerKind::deconv;
  else if (kind == "reshape")
    s.kind = LayerKind::reshape;
  else
    throw IoError("model spec: unknown layer kind '" + kind + "'");
  const std::string act = j.at("act").get<std::string>();
  if (act == "identity")
    s.act = ActKind::identity;
  else if (act == "leaky_relu")
    s.act = ActKind::leaky_relu;
  else if (act == "sigmoid")
    s.act = ActKind::sigmoid;
  else
    throw IoError("model spec: unknown activation '" + act + "'");
  s.out = j.at("out").get<std::int64_t>();
  s.act_alpha = j.at("alpha").get<double>();
  s.spectral_norm = j.at("sn").get<bool>();
  s.kernel = j.at("kernel").get<std::int64_t>();
  s.stride = j.at("stride").get<std::int64_t>();
  s.pad = j.at("pad").get<std::int64_t>();
  s.target = j.at("target").get<Shape>();
  return s;
}

// Walks per-sample shapes through a stack; `where` names the stack in errors.
Shape walk_shapes(const std::vector<LayerSpec>& specs, Shape in, const std::string& where) {
  for (std::size_t i = 0; i < specs.size(); ++i)
    in = layer_output_shape(specs[i], in, where + " layer " + std::to_string(i));
  return in;
}

std::vector<Layer> realize_stack(const std::vector<LayerSpec>& specs, Shape in,
                                 const std::string& where) {
  std::vector<Layer> out;
  out.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Layer l;
    l.spec = specs[i];
    l.in_shape = in;
    l.out_shape = layer_output_shape(specs[i], in, where + " layer " + std::to_string(i));
    in = l.out_shape;
    out.push_back(std::move(l));
  }
  return out;
}

struct ParamShape {
  std::string name;
  Shape shape;
};

// Checkpointed state of one layer: weight, bias, and the power-iteration
// vector (kept for all parameterized layers so reload restores behavior
// exactly).
std::vector<ParamShape> layer_param_shapes(const Layer& l, const std::string& prefix) {
  if (l.spec.kind == LayerKind::reshape) return {};
  std::vector<ParamShape> out;
  if (l.spec.kind == LayerKind::dense) {
    out.push_back({prefix + ".weight", {l.spec.out, l.in_shape[0]}});
    out.push_back({prefix + ".sn_u", {l.spec.out}});
  } else {
    out.push_back({prefix + ".weight", {l.spec.out, l.in_shape[0], l.spec.kernel, l.spec.kernel}});
    out.push_back({prefix + ".sn_u", l.in_shape});
  }
  out.insert(out.begin() + 1, {prefix + ".bias", {l.spec.out}});
  return out;
}

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("checkpoint: write failed");
}

void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
  put_bytes(os, b, 2);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError(std::string("checkpoint: truncated while reading ") + what);
}

std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  get_bytes(is, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(get_u64(is, what));
}

}  // namespace

ModelSpec ModelSpec::toy1d() { return dense_toy("toy1d", 2, 32); }
ModelSpec ModelSpec::toy2d() { return dense_toy("toy2d", 3, 128); }

ModelSpec ModelSpec::linear(std::int64_t input_dim, std::int64_t m, bool sn_decoder) {
  ModelSpec s;
  s.name = "linear";
  s.input_shape = {input_dim};
  s.latent_dim = m;
  s.encoder.push_back(dense(m, ActKind::identity, false));
  s.decoder.push_back(dense(input_dim, ActKind::identity, sn_decoder));
  return s;
}

ModelSpec ModelSpec::conv_synthetic(std::int64_t size, std::int64_t channels, std::int64_t m) {
  if (size < 8 || (size & (size - 1)) != 0)
    throw Error("conv_synthetic: size must be a power of two >= 8");
  ModelSpec s;
  s.name = "conv_synthetic";
  s.input_shape = {channels, size, size};
  s.latent_dim = m;
  std::int64_t ch = 32, sp = size;
  while (sp > 2) {
    s.encoder.push_back(conv(LayerKind::conv, ch, ActKind::leaky_relu, false));
    ch *= 2;
    sp /= 2;
  }
  const std::int64_t top_ch = ch / 2;
  const std::int64_t flat = top_ch * 2 * 2;
  s.encoder.push_back(reshape_to({flat}));
  s.encoder.push_back(dense(m, ActKind::identity, false));

  s.decoder.push_back(dense(flat, ActKind::identity, true));
  s.decoder.push_back(reshape_to({top_ch, 2, 2}));
  for (std::int64_t c = top_ch / 2; c > channels; c /= 2)
    s.decoder.push_back(conv(LayerKind::deconv, c, ActKind::leaky_relu, true));
  s.decoder.push_back(conv(LayerKind::deconv, channels, ActKind::sigmoid, true));
  return s;
}

void strip_spectral_norm(ModelSpec& spec) {
  for (auto& l : spec.encoder) l.spectral_norm = false;
  for (auto& l : spec.decoder) l.spectral_norm = false;
}

void validate_model_spec(const ModelSpec& spec) {
  if (spec.input_shape.empty()) throw ShapeError("model spec: empty input shape");
  for (auto e : spec.input_shape)
    if (e <= 0) throw ShapeError("model spec: non-positive input extent in " + shape_str(spec.input_shape));
  if (spec.latent_dim < 1) throw ShapeError("model spec: latent_dim must be >= 1");
  if (spec.encoder.empty() || spec.decoder.empty())
    throw ShapeError("model spec: encoder and decoder must be nonempty");
  const Shape ze = walk_shapes(spec.encoder, spec.input_shape, "encoder");
  if (ze != Shape{spec.latent_dim})
    throw ShapeError("model spec: encoder produces " + shape_str(ze) + ", expected [" +
                     std::to_string(spec.latent_dim) + "]");
  const Shape xo = walk_shapes(spec.decoder, {spec.latent_dim}, "decoder");
  if (xo != spec.input_shape)
    throw ShapeError("model spec: decoder produces " + shape_str(xo) + ", expected " +
                     shape_str(spec.input_shape));
}

std::string model_spec_to_json(const ModelSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  j["latent_dim"] = spec.latent_dim;
  j["lipschitz"] = spec.lipschitz;
  j["encoder"] = json::array();
  for (const auto& l : spec.encoder) j["encoder"].push_back(layer_to_json(l));
  j["decoder"] = json::array();
  for (const auto& l : spec.decoder) j["decoder"].push_back(layer_to_json(l));
  return j.dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("model spec: bad structured text: ") + e.what());
  }
  try {
    ModelSpec s;
    s.name = j.at("name").get<std::string>();
    s.input_shape = j.at("input_shape").get<Shape>();
    s.latent_dim = j.at("latent_dim").get<std::int64_t>();
    s.lipschitz = j.at("lipschitz").get<double>();
    for (const auto& l : j.at("encoder")) s.encoder.push_back(layer_from_json(l));
    for (const auto& l : j.at("decoder")) s.decoder.push_back(layer_from_json(l));
    return s;
  } catch (const json::exception& e) {
    throw IoError(std::string("model spec: missing or mistyped field: ") + e.what());
  }
}

Model build_autoencoder(const ModelSpec& spec, std::uint64_t seed) {
  validate_model_spec(spec);
  Model m;
  m.spec = spec;
  m.encoder = realize_stack(spec.encoder, spec.input_shape, "encoder");
  m.decoder = realize_stack(spec.decoder, {spec.latent_dim}, "decoder");
  std::uint64_t stream = 0;
  for (auto& l : m.encoder) init_layer(l, seed, stream++);
  for (auto& l : m.decoder) init_layer(l, seed, stream++);
  return m;
}

Tensor encode(Graph& g, Model& model, const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : model.encoder) h = layer_forward(g, l, h, mode, model.version);
  return h;
}

Tensor decode(Graph& g, Model& model, const Tensor& z, Mode mode) {
  Tensor h = z;
  for (auto& l : model.decoder) h = layer_forward(g, l, h, mode, model.version);
  return h;
}

namespace {

Eigen::MatrixXd chunked_eval(Model& model, const Eigen::MatrixXd& rows, const Shape& sample,
                             std::int64_t out_cols, std::int64_t chunk, bool encoding) {
  if (rows.cols() != shape_size(sample))
    throw ShapeError(std::string(encoding ? "encode" : "decode") + ": rows have " +
                     std::to_string(rows.cols()) + " columns, sample shape is " +
                     shape_str(sample));
  Eigen::MatrixXd out(rows.rows(), out_cols);
  for (std::int64_t at = 0; at < rows.rows(); at += chunk) {
    const std::int64_t n = std::min<std::int64_t>(chunk, rows.rows() - at);
    Graph g;
    Tensor x = g.input(Tensor::from_rows(rows.middleRows(at, n), sample));
    Tensor y = encoding ? encode(g, model, x, Mode::eval) : decode(g, model, x, Mode::eval);
    const auto d = y.data();
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t c = 0; c < out_cols; ++c)
        out(at + r, c) = d[static_cast<std::size_t>(r * out_cols + c)];
  }
  return out;
}

}  // namespace

Eigen::MatrixXd encode_eval(Model& model, const Eigen::MatrixXd& x, std::int64_t chunk) {
  return chunked_eval(model, x, model.spec.input_shape, model.latent_dim(), chunk, true);
}

Eigen::MatrixXd decode_eval(Model& model, const Eigen::MatrixXd& z, std::int64_t chunk) {
  return chunked_eval(model, z, {model.latent_dim()}, model.input_size(), chunk, false);
}

bool decoder_fully_normalized(const Model& model) {
  for (const auto& l : model.decoder)
    if (l.spec.kind != LayerKind::reshape && !l.spec.spectral_norm) return false;
  return true;
}

double certified_decoder_lipschitz(const Model& model, double rel_tol) {
  double k = 1.0;
  for (const auto& l : model.decoder) {
    k *= layer_certified_norm(l, model.version, rel_tol);
    k *= activation_lipschitz(l.spec.act, l.spec.act_alpha);
  }
  return k;
}

std::vector<ParamRef> model_parameters(Model& model) {
  std::vector<ParamRef> out;
  auto take = [&](std::vector<Layer>& stack, const char* tag) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      if (stack[i].spec.kind == LayerKind::reshape) continue;
      const std::string prefix = std::string(tag) + "." + std::to_string(i);
      out.push_back({prefix + ".weight", stack[i].weight});
      out.push_back({prefix + ".bias", stack[i].bias});
    }
  };
  take(model.encoder, "enc");
  take(model.decoder, "dec");
  return out;
}

namespace {

// All checkpointed arrays in order, with their owning storage.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  double* data;
  std::size_t size;
};

std::vector<CheckpointEntry> checkpoint_entries(Model& model) {
  std::vector<CheckpointEntry> out;
  auto take = [&](std::vector<Layer>& stack, const char* tag) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      Layer& l = stack[i];
      if (l.spec.kind == LayerKind::reshape) continue;
      const std::string prefix = std::string(tag) + "." + std::to_string(i);
      for (auto& ps : layer_param_shapes(l, prefix)) {
        double* p = nullptr;
        std::size_t n = static_cast<std::size_t>(shape_size(ps.shape));
        if (ps.name.ends_with(".weight"))
          p = l.weight.data().data();
        else if (ps.name.ends_with(".bias"))
          p = l.bias.data().data();
        else
          p = l.sn_u.data();
        out.push_back({ps.name, ps.shape, p, n});
      }
    }
  };
  take(model.encoder, "enc");
  take(model.decoder, "dec");
  return out;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  put_bytes(os, "LVAE", 4);
  put_u16(os, 1);
  const std::string spec = model_spec_to_json(model.spec);
  put_u64(os, spec.size());
  put_bytes(os, spec.data(), spec.size());
  auto entries = checkpoint_entries(const_cast<Model&>(model));
  for (const auto& e : entries) {
    put_u64(os, e.name.size());
    put_bytes(os, e.name.data(), e.name.size());
    put_u64(os, e.shape.size());
    for (auto ext : e.shape) put_u64(os, static_cast<std::uint64_t>(ext));
    for (std::size_t i = 0; i < e.size; ++i) put_f64(os, e.data[i]);
  }
  os.flush();
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "LVAE", 4) != 0)
    throw IoError("checkpoint: bad magic in '" + path + "'");
  const std::uint16_t version = get_u16(is, "version");
  if (version != 1)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t spec_len = get_u64(is, "spec length");
  if (spec_len > (1ull << 24)) throw IoError("checkpoint: implausible spec length");
  std::string spec_text(spec_len, '\0');
  get_bytes(is, spec_text.data(), spec_len, "spec");
  const ModelSpec spec = model_spec_from_json(spec_text);
  validate_model_spec(spec);

  Model m;
  m.spec = spec;
  m.encoder = realize_stack(spec.encoder, spec.input_shape, "encoder");
  m.decoder = realize_stack(spec.decoder, {spec.latent_dim}, "decoder");
  auto alloc = [&](std::vector<Layer>& stack) {
    for (auto& l : stack) {
      if (l.spec.kind == LayerKind::reshape) continue;
      if (l.spec.kind == LayerKind::dense)
        l.weight = Tensor::zeros({l.spec.out, l.in_shape[0]});
      else
        l.weight = Tensor::zeros({l.spec.out, l.in_shape[0], l.spec.kernel, l.spec.kernel});
      l.bias = Tensor::zeros({l.spec.out});
      const std::int64_t ulen =
          l.spec.kind == LayerKind::dense ? l.spec.out : shape_size(l.in_shape);
      l.sn_u.assign(static_cast<std::size_t>(ulen), 0.0);
    }
  };
  alloc(m.encoder);
  alloc(m.decoder);

  for (const auto& e : checkpoint_entries(m)) {
    const std::uint64_t name_len = get_u64(is, "parameter name length");
    if (name_len > 4096) throw IoError("checkpoint: implausible parameter name length");
    std::string name(name_len, '\0');
    get_bytes(is, name.data(), name_len, "parameter name");
    if (name != e.name)
      throw IoError("checkpoint: expected parameter '" + e.name + "', found '" + name + "'");
    const std::uint64_t rank = get_u64(is, "parameter rank");
    if (rank != e.shape.size())
      throw IoError("checkpoint: rank mismatch for '" + name + "'");
    for (std::size_t i = 0; i < rank; ++i) {
      const std::uint64_t ext = get_u64(is, "parameter extent");
      if (ext != static_cast<std::uint64_t>(e.shape[i]))
        throw IoError("checkpoint: extent mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < e.size; ++i) e.data[i] = get_f64(is, name.c_str());
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw IoError("checkpoint: trailing data in '" + path + "'");
  return m;
}

}  // namespace lv
