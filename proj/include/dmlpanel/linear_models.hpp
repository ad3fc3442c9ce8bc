#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmlpanel/matrix.hpp"

namespace dmlpanel {

struct OLSFit {
    std::vector<double> coefficients;
    std::vector<double> residuals;
    std::vector<double> fitted;
    Matrix covariance;  // classical sigma^2 (X'X)^-1
    std::vector<std::string> column_names;
    double sigma2 = 0.0;
    int n = 0;
    int p = 0;

    double se(std::size_t j) const;
};

// Least squares via Householder QR with column pivoting. Throws
// Error::compute on rank deficiency, naming the dependent column set.
OLSFit ols_fit(const Matrix& design, std::span<const double> y,
               std::vector<std::string> column_names = {});

// Rank-tolerant variant for nuisance fitting: dependent columns get zero
// coefficients instead of an error.
struct LeastSquares {
    std::vector<double> coefficients;
    int rank = 0;
    std::vector<int> dropped_columns;
};
LeastSquares lstsq(const Matrix& design, std::span<const double> y);

// Cluster-robust sandwich covariance with the G/(G-1) * (N-1)/(N-p)
// small-sample factor. Needs >= 2 distinct clusters.
Matrix clustered_covariance(const OLSFit& fit, const Matrix& design,
                            std::span<const int> clusters);

struct LassoFit {
    std::vector<double> coefficients;
    double intercept = 0.0;
    double lambda = 0.0;
    bool converged = false;
    int iterations = 0;
    std::vector<double> objective_trace;  // objective after each sweep
};

// Cyclic coordinate descent on (1/2N)||y - X beta - b0||^2 + lambda ||beta||_1.
// Columns of X are expected standardized (the soft-threshold updates assume
// centered columns).
LassoFit lasso_fit(const Matrix& x, std::span<const double> y, double lambda, double tol = 1e-7,
                   int max_iter = 100000);

// Smallest lambda that zeroes every slope: max_j |x_j'(y - ybar)| / N.
double lasso_lambda_max(const Matrix& x, std::span<const double> y);

std::vector<double> lasso_lambda_grid(double lambda_max, int size = 50, double min_ratio = 1e-4);

// K-fold CV mean squared out-of-fold error; returns the grid lambda with the
// smallest mean error. Deterministic in seed.
double lasso_lambda_cv(const Matrix& x, std::span<const double> y, int folds,
                       std::span<const double> grid, std::uint64_t seed);

// Two-sided p-value for z = coef/se under the normal approximation.
double two_sided_p(double z);

// "***" at 1%, "**" at 5%, "*" at 10%.
std::string significance_stars(double p);

}  // namespace dmlpanel
