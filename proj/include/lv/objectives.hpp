#pragma once

#include <Eigen/Core>

#include "lv/tensor.hpp"

namespace lv {

enum class LossKind { mse, bce, l2 };
enum class RegKind { none, vol, l1_std, lasso, st };

const char* loss_kind_name(LossKind k);
const char* reg_kind_name(RegKind k);
LossKind loss_kind_from(const std::string& s);
RegKind reg_kind_from(const std::string& s);

// Per-dimension sample standard deviation of a batch of codes [N,m] with
// divisor N-1; variance floored at 1e-12 so the sqrt gradient stays finite as
// sigma -> 0.
Tensor latent_std(Graph& g, const Tensor& z);

// exp(mean(log(sigma + eta))): the geometric mean of (sigma_i + eta).
Tensor volume_penalty(Graph& g, const Tensor& sigma, double eta);
Tensor l1_std_penalty(Graph& g, const Tensor& sigma);   // mean of sigma
Tensor lasso_penalty(Graph& g, const Tensor& z);        // mean |z|
Tensor st_penalty(Graph& g, const Tensor& z);           // mean log(1+z^2)

// Dispatch on kind; none contributes a constant zero.
Tensor regularizer_value(Graph& g, RegKind kind, const Tensor& z, double eta);

// mse: mean squared element difference. bce: mean of -[x log c + (1-x) log(1-c)]
// with c = clamp(xhat, 1e-7, 1-1e-7); targets must lie in [0,1]. l2: mean over
// samples of per-sample Euclidean distance (reporting metric).
Tensor reconstruction_loss(Graph& g, const Tensor& xhat, const Tensor& x, LossKind kind);

Tensor total_loss(Graph& g, const Tensor& j, const Tensor& reg, double lambda);

// Plain-value counterparts used by analysis and tests.
double volume_of(const Eigen::VectorXd& sigma, double eta);
Eigen::VectorXd volume_grad(const Eigen::VectorXd& sigma, double eta);

// Per-coordinate sample STD (divisor n-1) of a discrete point set [n,d].
Eigen::VectorXd uniform_point_set_std(const Eigen::MatrixXd& points);

}  // namespace lv
