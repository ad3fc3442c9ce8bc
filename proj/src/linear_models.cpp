#include "dmlpanel/linear_models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "dmlpanel/common.hpp"
#include "dmlpanel/rng.hpp"

namespace dmlpanel {

namespace {

// Householder QR with column pivoting, working on a column-contiguous copy
// so the inner loops are straight dot/axpy over contiguous memory.
class PivotedQR {
  public:
    void factor(const Matrix& x) {
        n_ = static_cast<int>(x.rows());
        p_ = static_cast<int>(x.cols());
        cols_ = Matrix(static_cast<std::size_t>(p_), static_cast<std::size_t>(n_));
        for (int i = 0; i < n_; ++i)
            for (int j = 0; j < p_; ++j)
                cols_(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) =
                    x(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        perm_.resize(static_cast<std::size_t>(p_));
        std::iota(perm_.begin(), perm_.end(), 0);
        tau_.assign(static_cast<std::size_t>(std::min(n_, p_)), 0.0);

        std::vector<double> norms(static_cast<std::size_t>(p_));
        std::vector<double> norms0(static_cast<std::size_t>(p_));
        for (int j = 0; j < p_; ++j) {
            norms[static_cast<std::size_t>(j)] =
                kernels::sum_sq(col(j), static_cast<std::size_t>(n_));
            norms0[static_cast<std::size_t>(j)] = norms[static_cast<std::size_t>(j)];
        }

        int steps = std::min(n_, p_);
        rank_ = steps;
        double tol_base = 0.0;
        for (int s = 0; s < steps; ++s) {
            // Pivot the column with the largest remaining norm into place.
            int best = s;
            for (int j = s + 1; j < p_; ++j)
                if (norms[static_cast<std::size_t>(j)] > norms[static_cast<std::size_t>(best)])
                    best = j;
            if (best != s) {
                std::swap(perm_[static_cast<std::size_t>(s)], perm_[static_cast<std::size_t>(best)]);
                std::swap(norms[static_cast<std::size_t>(s)], norms[static_cast<std::size_t>(best)]);
                std::swap(norms0[static_cast<std::size_t>(s)], norms0[static_cast<std::size_t>(best)]);
                double* a = cols_.row(static_cast<std::size_t>(s));
                double* b = cols_.row(static_cast<std::size_t>(best));
                std::swap_ranges(a, a + n_, b);
            }

            double* xs = col(s);
            std::size_t tail = static_cast<std::size_t>(n_ - s);
            double normx = std::sqrt(kernels::sum_sq(xs + s, tail));
            if (s == 0) tol_base = normx;
            double tol = std::numeric_limits<double>::epsilon() *
                         static_cast<double>(std::max(n_, p_)) * tol_base;
            if (normx <= tol) {
                rank_ = s;
                break;
            }
            double x0 = xs[s];
            double alpha = x0 >= 0.0 ? -normx : normx;
            double v0 = x0 - alpha;
            // tau = 2 v0^2 / v'v with v'v = 2 (normx^2 - x0 * alpha)
            double vtv = 2.0 * (normx * normx - x0 * alpha);
            tau_[static_cast<std::size_t>(s)] = 2.0 * v0 * v0 / vtv;
            xs[s] = alpha;
            for (int i = s + 1; i < n_; ++i) xs[static_cast<std::size_t>(i)] /= v0;

            for (int c = s + 1; c < p_; ++c) {
                double* xc = col(c);
                double w = xc[s] + kernels::dot(xs + s + 1, xc + s + 1,
                                                static_cast<std::size_t>(n_ - s - 1));
                w *= tau_[static_cast<std::size_t>(s)];
                xc[s] -= w;
                kernels::axpy(-w, xs + s + 1, xc + s + 1, static_cast<std::size_t>(n_ - s - 1));
                // Downdate the pivot norm; recompute when cancellation bites.
                double r = xc[s];
                double nn = norms[static_cast<std::size_t>(c)] - r * r;
                if (nn < 1e-12 * norms0[static_cast<std::size_t>(c)]) {
                    nn = kernels::sum_sq(xc + s + 1, static_cast<std::size_t>(n_ - s - 1));
                    norms0[static_cast<std::size_t>(c)] = nn;
                }
                norms[static_cast<std::size_t>(c)] = std::max(nn, 0.0);
            }
        }
    }

    int rank() const { return rank_; }
    int n() const { return n_; }
    int p() const { return p_; }
    const std::vector<int>& perm() const { return perm_; }

    std::vector<int> dependent_columns() const {
        return {perm_.begin() + rank_, perm_.end()};
    }

    // Q'y restricted to the factored steps.
    std::vector<double> apply_qt(std::span<const double> y) const {
        std::vector<double> w(y.begin(), y.end());
        for (int s = 0; s < rank_; ++s) {
            const double* xs = col(s);
            double d = w[static_cast<std::size_t>(s)] +
                       kernels::dot(xs + s + 1, w.data() + s + 1,
                                    static_cast<std::size_t>(n_ - s - 1));
            d *= tau_[static_cast<std::size_t>(s)];
            w[static_cast<std::size_t>(s)] -= d;
            kernels::axpy(-d, xs + s + 1, w.data() + s + 1,
                          static_cast<std::size_t>(n_ - s - 1));
        }
        return w;
    }

    // Minimum-residual solution; dependent columns get zero coefficients.
    std::vector<double> solve(std::span<const double> y) const {
        std::vector<double> qty = apply_qt(y);
        std::vector<double> beta_perm(static_cast<std::size_t>(p_), 0.0);
        for (int i = rank_ - 1; i >= 0; --i) {
            double acc = qty[static_cast<std::size_t>(i)];
            for (int j = i + 1; j < rank_; ++j)
                acc -= r_entry(i, j) * beta_perm[static_cast<std::size_t>(j)];
            beta_perm[static_cast<std::size_t>(i)] = acc / r_entry(i, i);
        }
        std::vector<double> beta(static_cast<std::size_t>(p_), 0.0);
        for (int j = 0; j < p_; ++j)
            beta[static_cast<std::size_t>(perm_[static_cast<std::size_t>(j)])] =
                beta_perm[static_cast<std::size_t>(j)];
        return beta;
    }

    // (X'X)^-1 from R; requires full column rank.
    Matrix xtx_inverse() const {
        std::size_t p = static_cast<std::size_t>(p_);
        // Invert the upper-triangular R.
        Matrix rinv(p, p, 0.0);
        for (int j = p_ - 1; j >= 0; --j) {
            rinv(static_cast<std::size_t>(j), static_cast<std::size_t>(j)) = 1.0 / r_entry(j, j);
            for (int i = j - 1; i >= 0; --i) {
                double acc = 0.0;
                for (int l = i + 1; l <= j; ++l)
                    acc += r_entry(i, l) * rinv(static_cast<std::size_t>(l), static_cast<std::size_t>(j));
                rinv(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = -acc / r_entry(i, i);
            }
        }
        // S = Rinv Rinv', then undo the permutation.
        Matrix cov(p, p, 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t j = i; j < p; ++j) {
                double acc = 0.0;
                for (std::size_t l = std::max(i, j); l < p; ++l)
                    acc += rinv(i, l) * rinv(j, l);
                std::size_t pi = static_cast<std::size_t>(perm_[i]);
                std::size_t pj = static_cast<std::size_t>(perm_[j]);
                cov(pi, pj) = acc;
                cov(pj, pi) = acc;
            }
        }
        return cov;
    }

  private:
    const double* col(int j) const { return cols_.row(static_cast<std::size_t>(j)); }
    double* col(int j) { return cols_.row(static_cast<std::size_t>(j)); }
    // R[i][j] (i <= j) is stored in column j at position i.
    double r_entry(int i, int j) const {
        return cols_(static_cast<std::size_t>(j), static_cast<std::size_t>(i));
    }

    Matrix cols_;  // p x n, column-contiguous working copy
    std::vector<double> tau_;
    std::vector<int> perm_;
    int n_ = 0, p_ = 0, rank_ = 0;
};

}  // namespace

double OLSFit::se(std::size_t j) const { return std::sqrt(covariance(j, j)); }

OLSFit ols_fit(const Matrix& design, std::span<const double> y,
               std::vector<std::string> column_names) {
    std::size_t n = design.rows();
    std::size_t p = design.cols();
    if (y.size() != n) throw Error::usage("ols_fit: y length does not match design rows");
    if (p == 0) throw Error::usage("ols_fit: empty design");
    if (p > n) throw Error::compute("ols_fit: more columns than rows");

    PivotedQR qr;
    qr.factor(design);
    if (qr.rank() < static_cast<int>(p)) {
        std::ostringstream msg;
        msg << "ols_fit: design is rank deficient (rank " << qr.rank() << " of " << p
            << "); dependent columns:";
        for (int j : qr.dependent_columns()) {
            msg << ' ';
            if (!column_names.empty() && j < static_cast<int>(column_names.size()))
                msg << column_names[static_cast<std::size_t>(j)];
            else
                msg << '#' << j;
        }
        throw Error::compute(msg.str());
    }

    OLSFit fit;
    fit.coefficients = qr.solve(y);
    fit.n = static_cast<int>(n);
    fit.p = static_cast<int>(p);
    fit.column_names = std::move(column_names);
    fit.fitted = matvec(design, fit.coefficients);
    fit.residuals.resize(n);
    for (std::size_t i = 0; i < n; ++i) fit.residuals[i] = y[i] - fit.fitted[i];

    double rss = kernels::sum_sq(fit.residuals.data(), n);
    fit.sigma2 = n > p ? rss / static_cast<double>(n - p) : 0.0;
    fit.covariance = qr.xtx_inverse();
    for (double& v : fit.covariance.data()) v *= fit.sigma2;
    return fit;
}

LeastSquares lstsq(const Matrix& design, std::span<const double> y) {
    if (y.size() != design.rows()) throw Error::usage("lstsq: y length does not match design rows");
    PivotedQR qr;
    qr.factor(design);
    LeastSquares out;
    out.coefficients = qr.solve(y);
    out.rank = qr.rank();
    out.dropped_columns = qr.dependent_columns();
    return out;
}

Matrix clustered_covariance(const OLSFit& fit, const Matrix& design,
                            std::span<const int> clusters) {
    std::size_t n = design.rows();
    std::size_t p = design.cols();
    if (clusters.size() != n)
        throw Error::usage("clustered_covariance: cluster labels must cover every row");
    if (fit.residuals.size() != n)
        throw Error::usage("clustered_covariance: fit does not match design");

    std::map<int, std::vector<std::size_t>> by_cluster;
    for (std::size_t i = 0; i < n; ++i) by_cluster[clusters[i]].push_back(i);
    std::size_t g = by_cluster.size();
    if (g < 2) throw Error::usage("clustered_covariance: need at least 2 clusters");

    PivotedQR qr;
    qr.factor(design);
    if (qr.rank() < static_cast<int>(p))
        throw Error::compute("clustered_covariance: design is rank deficient");
    Matrix bread = qr.xtx_inverse();

    // meat = sum_c (X_c' u_c)(X_c' u_c)'
    Matrix meat(p, p, 0.0);
    std::vector<double> score(p);
    for (const auto& [label, rows] : by_cluster) {
        std::fill(score.begin(), score.end(), 0.0);
        for (std::size_t i : rows) kernels::axpy(fit.residuals[i], design.row(i), score.data(), p);
        for (std::size_t a = 0; a < p; ++a)
            kernels::axpy(score[a], score.data(), meat.row(a), p);
    }

    double factor = (static_cast<double>(g) / static_cast<double>(g - 1)) *
                    (static_cast<double>(n - 1) / static_cast<double>(n - p));

    // factor * bread * meat * bread
    Matrix tmp(p, p, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = 0; l < p; ++l)
            kernels::axpy(bread(i, l), meat.row(l), tmp.row(i), p);
    Matrix cov(p, p, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = 0; l < p; ++l)
            kernels::axpy(tmp(i, l) * factor, bread.row(l), cov.row(i), p);
    // Symmetrize away accumulation asymmetry.
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = i + 1; j < p; ++j) {
            double v = 0.5 * (cov(i, j) + cov(j, i));
            cov(i, j) = v;
            cov(j, i) = v;
        }
    return cov;
}

namespace {

double soft_threshold(double z, double g) {
    if (z > g) return z - g;
    if (z < -g) return z + g;
    return 0.0;
}

// Column-contiguous copy for the coordinate-descent inner loops.
Matrix to_columns(const Matrix& x) {
    Matrix cols(x.cols(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) cols(j, i) = x(i, j);
    return cols;
}

double lasso_objective(std::span<const double> resid, std::span<const double> beta, double lambda,
                       std::size_t n) {
    double rss = kernels::sum_sq(resid.data(), resid.size());
    double l1 = kernels::sum_abs(beta.data(), beta.size());
    return rss / (2.0 * static_cast<double>(n)) + lambda * l1;
}

LassoFit lasso_fit_cols(const Matrix& cols, std::span<const double> y, double lambda, double tol,
                        int max_iter, const std::vector<double>* warm_beta) {
    std::size_t p = cols.rows();
    std::size_t n = cols.cols();
    if (lambda < 0.0) throw Error::usage("lasso_fit: lambda must be nonnegative");
    if (n == 0) throw Error::usage("lasso_fit: empty sample");

    LassoFit fit;
    fit.lambda = lambda;
    fit.coefficients.assign(p, 0.0);
    if (warm_beta) fit.coefficients = *warm_beta;

    std::vector<double> col_sq(p);
    for (std::size_t j = 0; j < p; ++j)
        col_sq[j] = kernels::sum_sq(cols.row(j), n) / static_cast<double>(n);

    double mean_y = 0.0;
    for (double v : y) mean_y += v;
    mean_y /= static_cast<double>(n);

    std::vector<double> resid(y.begin(), y.end());
    fit.intercept = mean_y;
    for (double& r : resid) r -= fit.intercept;
    for (std::size_t j = 0; j < p; ++j)
        if (fit.coefficients[j] != 0.0)
            kernels::axpy(-fit.coefficients[j], cols.row(j), resid.data(), n);

    for (int sweep = 0; sweep < max_iter; ++sweep) {
        double max_change = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (col_sq[j] <= 0.0) continue;
            double old = fit.coefficients[j];
            double rho = kernels::dot(cols.row(j), resid.data(), n) / static_cast<double>(n) +
                         col_sq[j] * old;
            double updated = soft_threshold(rho, lambda) / col_sq[j];
            if (updated != old) {
                kernels::axpy(old - updated, cols.row(j), resid.data(), n);
                fit.coefficients[j] = updated;
                max_change = std::max(max_change, std::fabs(updated - old));
            }
        }
        // Unpenalized intercept: absorb the residual mean.
        double shift = 0.0;
        for (double r : resid) shift += r;
        shift /= static_cast<double>(n);
        if (shift != 0.0) {
            fit.intercept += shift;
            for (double& r : resid) r -= shift;
            max_change = std::max(max_change, std::fabs(shift));
        }
        fit.iterations = sweep + 1;
        fit.objective_trace.push_back(lasso_objective(resid, fit.coefficients, lambda, n));
        if (max_change < tol) {
            fit.converged = true;
            break;
        }
    }
    return fit;
}

}  // namespace

LassoFit lasso_fit(const Matrix& x, std::span<const double> y, double lambda, double tol,
                   int max_iter) {
    if (y.size() != x.rows()) throw Error::usage("lasso_fit: y length does not match X rows");
    Matrix cols = to_columns(x);
    return lasso_fit_cols(cols, y, lambda, tol, max_iter, nullptr);
}

double lasso_lambda_max(const Matrix& x, std::span<const double> y) {
    std::size_t n = x.rows();
    if (n == 0) throw Error::usage("lasso_lambda_max: empty sample");
    double mean_y = 0.0;
    for (double v : y) mean_y += v;
    mean_y /= static_cast<double>(n);
    std::vector<double> centered(y.begin(), y.end());
    for (double& v : centered) v -= mean_y;
    // Same column-major dot path as the descent loop, so beta stays exactly
    // zero at lambda == lambda_max.
    Matrix cols = to_columns(x);
    double best = 0.0;
    for (std::size_t j = 0; j < cols.rows(); ++j)
        best = std::max(best,
                        std::fabs(kernels::dot(cols.row(j), centered.data(), n)) /
                            static_cast<double>(n));
    return best;
}

std::vector<double> lasso_lambda_grid(double lambda_max, int size, double min_ratio) {
    if (size < 1) throw Error::usage("lasso_lambda_grid: size must be positive");
    std::vector<double> grid(static_cast<std::size_t>(size));
    if (size == 1) {
        grid[0] = lambda_max;
        return grid;
    }
    double log_hi = std::log(lambda_max);
    double log_lo = std::log(lambda_max * min_ratio);
    for (int i = 0; i < size; ++i)
        grid[static_cast<std::size_t>(i)] =
            std::exp(log_hi + (log_lo - log_hi) * static_cast<double>(i) /
                                  static_cast<double>(size - 1));
    return grid;
}

double lasso_lambda_cv(const Matrix& x, std::span<const double> y, int folds,
                       std::span<const double> grid, std::uint64_t seed) {
    if (grid.empty()) throw Error::usage("lasso_lambda_cv: empty lambda grid");
    if (folds < 2) throw Error::usage("lasso_lambda_cv: need at least 2 folds");
    std::size_t n = x.rows();
    if (n < static_cast<std::size_t>(folds))
        throw Error::usage("lasso_lambda_cv: fewer rows than folds");

    // Evaluate the grid in descending order with warm starts.
    std::vector<double> lambdas(grid.begin(), grid.end());
    std::sort(lambdas.begin(), lambdas.end(), std::greater<>());

    Rng rng(derive_seed(seed, 0xCF));
    std::vector<int> order = rng.permutation(static_cast<int>(n));
    std::vector<int> fold_of(n);
    for (std::size_t i = 0; i < n; ++i)
        fold_of[static_cast<std::size_t>(order[i])] = static_cast<int>(i % static_cast<std::size_t>(folds));

    std::vector<double> total_sq_error(lambdas.size(), 0.0);
    std::vector<std::size_t> total_count(lambdas.size(), 0);

    for (int f = 0; f < folds; ++f) {
        std::vector<int> train_rows, test_rows;
        for (std::size_t i = 0; i < n; ++i)
            (fold_of[i] == f ? test_rows : train_rows).push_back(static_cast<int>(i));
        Matrix xtrain = gather_rows(x, train_rows);
        std::vector<double> ytrain = gather<double>(y, train_rows);
        Matrix cols = to_columns(xtrain);

        std::vector<double> beta(x.cols(), 0.0);
        for (std::size_t li = 0; li < lambdas.size(); ++li) {
            LassoFit fit = lasso_fit_cols(cols, ytrain, lambdas[li], 1e-7, 100000, &beta);
            beta = fit.coefficients;
            for (int i : test_rows) {
                double pred = fit.intercept +
                              kernels::dot(x.row(static_cast<std::size_t>(i)), beta.data(), x.cols());
                double err = y[static_cast<std::size_t>(i)] - pred;
                total_sq_error[li] += err * err;
                total_count[li] += 1;
            }
        }
    }

    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t li = 0; li < lambdas.size(); ++li) {
        double mse = total_sq_error[li] / static_cast<double>(total_count[li]);
        if (mse < best_err) {
            best_err = mse;
            best = li;
        }
    }
    return lambdas[best];
}

double two_sided_p(double z) { return std::erfc(std::fabs(z) / std::sqrt(2.0)); }

std::string significance_stars(double p) {
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.1) return "*";
    return "";
}

}  // namespace dmlpanel
