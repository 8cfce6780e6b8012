#pragma once

// Error decomposition and rate diagnostics. The iterate error splits as
//
//   x_n - x_* = 1'pi(x_n - x_*) + Q x_n
//
// (Q x_* = 0 since x_* is a consensus matrix). The agreement component is
// tracked against the noise accumulator
//
//   psi_{n+1} = sum_k alpha_k 1'pi M_{k+1} e^{-(t_{n+1} - t_{k+1})A},
//
// updated by the recursion psi_{n+1} = psi_n e^{-alpha_n A} + alpha_n 1'pi M_{n+1},
// and the disagreement component against
//
//   chi_{n+1} = sum_j alpha_j W^{n-j} Q M_{j+1} e^{-(t_{n+1} - t_{j+1})A},
//
// updated by chi_{n+1} = W chi_n e^{-alpha_n A} + alpha_n Q M_{n+1}. Residuals
// Delta_n = 1'pi(x_n - x_*) - psi_n and Gamma_n = Q x_n - chi_n close the
// decomposition. psi is rank one (1' times its pi-row), so only the row is
// stored and operator norms pick up a sqrt(m) factor.
//
// All norms are operator norms (largest singular value).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "dsalab/common.hpp"
#include "dsalab/spectral.hpp"

namespace dsalab::decomp {

// Largest singular value via power iteration on X'X. The iterate is squared a
// few times first so the method converges even when the top singular values
// are nearly equal; matrices here are tiny, so the squarings are free. Final
// accuracy comes from the Rayleigh quotient against the original X'X.
inline double operator_norm(const Mat& x) {
    if (x.size() == 0) return 0.0;
    const bool wide = x.cols() > x.rows();
    Mat g           = wide ? Mat(x * x.transpose()) : Mat(x.transpose() * x);
    const int n     = static_cast<int>(g.rows());
    double scale    = g.cwiseAbs().maxCoeff();
    if (scale == 0.0 || !std::isfinite(scale)) return std::isfinite(scale) ? 0.0 : scale;

    Mat b = g / scale;
    for (int s = 0; s < 12; ++s) {
        b = b * b;
        b /= b.cwiseAbs().maxCoeff();
    }
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i + 1);
    v.normalize();
    for (int it = 0; it < 200; ++it) {
        Vec bv      = b * v;
        double norm = bv.norm();
        if (norm == 0.0) break;
        bv /= norm;
        bool settled = (bv - v).norm() < 1e-14 || (bv + v).norm() < 1e-14;
        v            = bv;
        if (settled) break;
    }
    return std::sqrt(std::max(0.0, v.dot(g * v)));
}

struct DecompRecord {
    std::size_t n = 0;
    double alpha_n = 0.0;
    double t_n     = 0.0;
    double lil_scale = std::numeric_limits<double>::quiet_NaN();

    double agreement_norm    = 0.0;  // ||1'pi(x_n - x_*)||
    double disagreement_norm = 0.0;  // ||Q x_n||
    double total_norm        = 0.0;  // ||x_n - x_*||
    double lil_ratio = std::numeric_limits<double>::quiet_NaN();

    std::optional<double> psi_norm;
    std::optional<double> chi_norm;
    std::optional<double> delta_norm;
    std::optional<double> gamma_norm;
};

struct DecompParts {
    double agreement_norm;
    double disagreement_norm;
    double total_norm;
    double identity_residual;  // ||(x - x_*) - 1'pi(x - x_*) - Qx||
};

inline DecompParts decompose(const Mat& x, const Mat& x_star, const Vec& pi, const Mat& q) {
    const auto m = x.rows();
    for (int i = 1; i < x_star.rows(); ++i)
        if ((x_star.row(i) - x_star.row(0)).cwiseAbs().maxCoeff() > 1e-12)
            throw Error(ErrorCode::XStarNotConsensus, "rows of x_star differ beyond 1e-12");

    Mat diff        = x - x_star;
    RowVec pi_row   = pi.transpose() * diff;
    Mat agreement   = Vec::Ones(m) * pi_row;
    Mat disagreement = q * x;

    DecompParts out{};
    out.agreement_norm    = std::sqrt(static_cast<double>(m)) * pi_row.norm();
    out.disagreement_norm = operator_norm(disagreement);
    out.total_norm        = operator_norm(diff);
    out.identity_residual = operator_norm(diff - agreement - disagreement);
    return out;
}

// Noise accumulators owned by one run. psi is stored as its pi-row.
struct NoiseAccumulators {
    RowVec psi_row;  // 1 x d
    Mat chi;         // m x d

    static NoiseAccumulators zero(int m, int d) {
        NoiseAccumulators acc;
        acc.psi_row = RowVec::Zero(d);
        acc.chi     = Mat::Zero(m, d);
        return acc;
    }

    double psi_operator_norm() const {
        return std::sqrt(static_cast<double>(chi.rows())) * psi_row.norm();
    }
};

inline void psi_update(NoiseAccumulators& acc, const Mat& m_next, const Vec& pi,
                       const spectral::DriftMatrix& a, double alpha_n) {
    acc.psi_row = acc.psi_row * a.exp_neg(alpha_n) + alpha_n * (pi.transpose() * m_next);
}

inline void chi_update(NoiseAccumulators& acc, const Mat& m_next, const Mat& w, const Mat& q,
                       const spectral::DriftMatrix& a, double alpha_n) {
    acc.chi = w * acc.chi * a.exp_neg(alpha_n) + alpha_n * (q * m_next);
}

// Supremum of the recorded lil ratios at n >= burn_in, with its index.
inline std::pair<double, std::size_t> lil_running_sup(const std::vector<DecompRecord>& trace,
                                                      std::size_t burn_in) {
    double best       = -1.0;
    std::size_t where = 0;
    for (const auto& rec : trace) {
        if (rec.n < burn_in || !std::isfinite(rec.lil_ratio)) continue;
        if (rec.lil_ratio > best) {
            best  = rec.lil_ratio;
            where = rec.n;
        }
    }
    if (best < 0.0)
        throw Error(ErrorCode::EmptyAfterBurnIn, "no finite lil ratios at or after burn-in");
    return {best, where};
}

struct SlopeFit {
    std::size_t n_lo = 0;
    std::size_t n_hi = 0;
    double slope     = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t points = 0;
};

// Least-squares line through (ln n, ln y) for checkpoints inside the window.
// Nonpositive y values (dead components) are skipped.
inline SlopeFit slope_fit(const std::vector<std::pair<std::size_t, double>>& series,
                          std::size_t n_lo, std::size_t n_hi) {
    std::vector<double> xs, ys;
    for (const auto& [n, y] : series) {
        if (n < n_lo || n > n_hi || !(y > 0.0) || !std::isfinite(y)) continue;
        xs.push_back(std::log(static_cast<double>(n)));
        ys.push_back(std::log(y));
    }
    if (xs.size() < 10)
        throw Error(ErrorCode::TooFewPoints,
                    "slope fit needs >= 10 checkpoints, found " + std::to_string(xs.size()));
    const auto k = xs.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < k; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < k; ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    SlopeFit fit;
    fit.n_lo      = n_lo;
    fit.n_hi      = n_hi;
    fit.points    = k;
    fit.slope     = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return fit;
}

// Scaled martingale-difference sum tester:
//
//   U_{n+1} = sum_{k<=n} phi_k eps_{k+1},   tau_n = sum_{k<=n} T_k^2,
//   sup over eligible n of |U_{n+1}| / sqrt(2 tau_n lnln tau_n).
//
// Weight source supplies (phi_k, T_k) with |phi_k| <= T_k; ratios are taken
// once tau_n > e so the iterated logarithm is positive, and only inside
// [sup_from, horizon) when sup_from is set.
struct MartingaleLilResult {
    double sup_normalized = 0.0;
    std::size_t argmax_n  = 0;
    std::vector<std::pair<std::size_t, double>> trace;  // (n, normalized |U|)
};

inline MartingaleLilResult martingale_lil_test(const std::function<double(std::size_t)>& noise,
                                               const std::function<std::pair<double, double>(std::size_t)>& weights,
                                               std::size_t horizon, std::size_t sup_from = 0,
                                               std::size_t trace_stride = 0) {
    double u = 0.0, tau = 0.0, prev_tau = 0.0;
    MartingaleLilResult out;
    out.sup_normalized = -1.0;
    const double e_const = 2.718281828459045;
    for (std::size_t k = 0; k < horizon; ++k) {
        auto [phi, t_bound] = weights(k);
        if (std::abs(phi) > t_bound * (1.0 + 1e-12))
            throw Error(ErrorCode::InvalidArgument, "|phi_k| must not exceed T_k");
        u += phi * noise(k);
        tau += t_bound * t_bound;
        if (tau < prev_tau)
            throw Error(ErrorCode::TauNotIncreasing, "tau must be nondecreasing");
        prev_tau = tau;
        if (tau <= e_const || k < sup_from) continue;
        double ratio = std::abs(u) / std::sqrt(2.0 * tau * std::log(std::log(tau)));
        if (ratio > out.sup_normalized) {
            out.sup_normalized = ratio;
            out.argmax_n       = k;
        }
        if (trace_stride != 0 && k % trace_stride == 0) out.trace.emplace_back(k, ratio);
    }
    if (out.sup_normalized < 0.0)
        throw Error(ErrorCode::EmptyAfterBurnIn, "no eligible index reached tau > e");
    return out;
}

}  // namespace dsalab::decomp
