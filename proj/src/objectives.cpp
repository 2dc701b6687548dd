#include "lv/objectives.hpp"

#include <cmath>
#include <limits>

namespace lv {

namespace {
constexpr double kVarFloor = 1e-12;
constexpr double kBceClamp = 1e-7;
}  // namespace

const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::bce: return "bce";
    case LossKind::l2: return "l2";
  }
  return "?";
}

const char* reg_kind_name(RegKind k) {
  switch (k) {
    case RegKind::none: return "none";
    case RegKind::vol: return "vol";
    case RegKind::l1_std: return "l1_std";
    case RegKind::lasso: return "lasso";
    case RegKind::st: return "st";
  }
  return "?";
}

LossKind loss_kind_from(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "bce") return LossKind::bce;
  if (s == "l2") return LossKind::l2;
  throw Error("unknown loss kind '" + s + "' (mse|bce|l2)");
}

RegKind reg_kind_from(const std::string& s) {
  if (s == "none") return RegKind::none;
  if (s == "vol") return RegKind::vol;
  if (s == "l1_std") return RegKind::l1_std;
  if (s == "lasso") return RegKind::lasso;
  if (s == "st") return RegKind::st;
  throw Error("unknown regularizer kind '" + s + "' (none|vol|l1_std|lasso|st)");
}

Tensor latent_std(Graph& g, const Tensor& z) {
  if (z.rank() != 2)
    throw ShapeError("latent_std: codes must be [batch,m], got " + shape_str(z.shape()));
  if (z.shape()[0] < 2)
    throw ShapeError("latent_std: batch " + std::to_string(z.shape()[0]) + " < 2");
  Tensor var = g.variance(z, 0, 1);
  var = g.clamp(var, kVarFloor, std::numeric_limits<double>::infinity());
  return g.sqrt(var);
}

Tensor volume_penalty(Graph& g, const Tensor& sigma, double eta) {
  if (eta < 0.0) throw DomainError("volume_penalty: eta " + std::to_string(eta) + " < 0");
  return g.exp(g.mean(g.log(g.shift(sigma, eta))));
}

Tensor l1_std_penalty(Graph& g, const Tensor& sigma) { return g.mean(sigma); }

Tensor lasso_penalty(Graph& g, const Tensor& z) { return g.mean(g.abs(z)); }

Tensor st_penalty(Graph& g, const Tensor& z) { return g.mean(g.log(g.shift(g.square(z), 1.0))); }

Tensor regularizer_value(Graph& g, RegKind kind, const Tensor& z, double eta) {
  switch (kind) {
    case RegKind::none: return g.constant(0.0);
    case RegKind::vol: return volume_penalty(g, latent_std(g, z), eta);
    case RegKind::l1_std: return l1_std_penalty(g, latent_std(g, z));
    case RegKind::lasso: return lasso_penalty(g, z);
    case RegKind::st: return st_penalty(g, z);
  }
  throw Error("regularizer_value: unknown kind");
}

Tensor reconstruction_loss(Graph& g, const Tensor& xhat, const Tensor& x, LossKind kind) {
  if (xhat.shape() != x.shape())
    throw ShapeError("reconstruction_loss: " + shape_str(xhat.shape()) + " vs " +
                     shape_str(x.shape()));
  switch (kind) {
    case LossKind::mse:
      return g.mean(g.square(g.sub(xhat, x)));
    case LossKind::bce: {
      for (double v : x.data())
        if (v < 0.0 || v > 1.0)
          throw DomainError("reconstruction_loss: bce target " + std::to_string(v) +
                            " outside [0,1]");
      Tensor c = g.clamp(xhat, kBceClamp, 1.0 - kBceClamp);
      Tensor one = g.broadcast(g.constant(1.0), x.shape());
      Tensor ll = g.add(g.mul(x, g.log(c)), g.mul(g.sub(one, x), g.log(g.sub(one, c))));
      return g.scale(g.mean(ll), -1.0);
    }
    case LossKind::l2: {
      const std::int64_t n = x.shape().empty() ? 1 : x.shape()[0];
      Tensor diff = g.reshape(g.sub(xhat, x), {n, x.size() / n});
      return g.mean(g.l2norm(diff, 1));
    }
  }
  throw Error("reconstruction_loss: unknown kind");
}

Tensor total_loss(Graph& g, const Tensor& j, const Tensor& reg, double lambda) {
  if (lambda < 0.0) throw Error("total_loss: lambda " + std::to_string(lambda) + " < 0");
  return g.add(j, g.scale(reg, lambda));
}

double volume_of(const Eigen::VectorXd& sigma, double eta) {
  if (sigma.size() == 0) throw Error("volume_of: empty sigma");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    const double t = sigma[i] + eta;
    if (!(t > 0.0)) throw DomainError("volume_of: sigma+eta = " + std::to_string(t) + " <= 0");
    acc += std::log(t);
  }
  return std::exp(acc / static_cast<double>(sigma.size()));
}

Eigen::VectorXd volume_grad(const Eigen::VectorXd& sigma, double eta) {
  const double v = volume_of(sigma, eta);
  Eigen::VectorXd g(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    g[i] = v / (static_cast<double>(sigma.size()) * (sigma[i] + eta));
  return g;
}

Eigen::VectorXd uniform_point_set_std(const Eigen::MatrixXd& points) {
  if (points.rows() < 2)
    throw Error("uniform_point_set_std: need at least 2 points, got " +
                std::to_string(points.rows()));
  const Eigen::RowVectorXd mean = points.colwise().mean();
  const Eigen::MatrixXd centered = points.rowwise() - mean;
  return (centered.colwise().squaredNorm() / static_cast<double>(points.rows() - 1))
      .cwiseSqrt()
      .transpose();
}

}  // namespace lv
