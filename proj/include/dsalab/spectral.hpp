#pragma once

// Gossip-matrix certification and the spectral utilities the error analysis
// rests on:
//
//   W      row-stochastic, irreducible, aperiodic gossip matrix
//   pi     unique left fixed vector, pi W = pi, pi > 0, sum pi = 1
//   Q      I - 1'pi, the projector onto the disagreement subspace
//   A      drift matrix with positive-definite symmetric part; lambda_min is
//          the smallest real part of its spectrum (-A Hurwitz)
//
// All matrices here are desk-scale (m <= ~200, d <= ~16); robustness is
// preferred over speed throughout.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>
#include <numeric>
#include <queue>
#include <sstream>
#include <vector>

#include "dsalab/common.hpp"

namespace dsalab::spectral {

struct GossipCertificate {
    double max_row_sum_dev = 0.0;
    double min_entry       = 0.0;
    bool strongly_connected = false;
    int period              = 0;
    bool positive_diagonal  = false;

    std::string report() const {
        std::ostringstream os;
        os << "gossip certificate\n"
           << "  row sums:        max |sum - 1| = " << max_row_sum_dev << "\n"
           << "  entries:         min = " << min_entry << "\n"
           << "  irreducible:     " << (strongly_connected ? "yes" : "NO") << "\n"
           << "  period:          " << period << (period == 1 ? " (aperiodic)" : " (PERIODIC)") << "\n"
           << "  diag > 0 (sufficient aperiodicity witness): " << (positive_diagonal ? "yes" : "no")
           << "\n";
        return os.str();
    }
};

namespace detail {

inline std::vector<std::vector<int>> adjacency(const Mat& w, bool reversed) {
    const int m = static_cast<int>(w.rows());
    std::vector<std::vector<int>> adj(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (w(i, j) > 0.0) {
                if (reversed)
                    adj[static_cast<size_t>(j)].push_back(i);
                else
                    adj[static_cast<size_t>(i)].push_back(j);
            }
    return adj;
}

inline bool reaches_all(const std::vector<std::vector<int>>& adj, std::vector<int>* depth_out = nullptr) {
    const int m = static_cast<int>(adj.size());
    std::vector<int> depth(static_cast<size_t>(m), -1);
    std::queue<int> q;
    depth[0] = 0;
    q.push(0);
    int seen = 1;
    while (!q.empty()) {
        int u = q.front();
        q.pop();
        for (int v : adj[static_cast<size_t>(u)])
            if (depth[static_cast<size_t>(v)] < 0) {
                depth[static_cast<size_t>(v)] = depth[static_cast<size_t>(u)] + 1;
                q.push(v);
                ++seen;
            }
    }
    if (depth_out) *depth_out = depth;
    return seen == m;
}

// Exact period of a strongly connected digraph: gcd of d(u) + 1 - d(v) over
// all edges u -> v, with d a BFS depth assignment.
inline int digraph_period(const Mat& w) {
    auto adj = adjacency(w, false);
    std::vector<int> depth;
    reaches_all(adj, &depth);
    long long g = 0;
    const int m = static_cast<int>(w.rows());
    for (int u = 0; u < m; ++u)
        for (int v : adj[static_cast<size_t>(u)])
            g = std::gcd(g, static_cast<long long>(std::abs(depth[static_cast<size_t>(u)] + 1 -
                                                            depth[static_cast<size_t>(v)])));
    return static_cast<int>(g == 0 ? 1 : g);
}

}  // namespace detail

class GossipMatrix;

// Left fixed vector pi W = pi solved for any single-recurrent-class
// row-stochastic matrix: rows of (W' - I) sum to zero, so replacing the last
// row with the normalization constraint keeps the system square and solvable.
// Used directly by the --force path; certified wrappers enforce pi > 0.
inline Vec stationary_of(const Mat& w) {
    const int m = static_cast<int>(w.rows());
    Mat sys     = w.transpose() - Mat::Identity(m, m);
    sys.row(m - 1).setOnes();
    Vec rhs        = Vec::Zero(m);
    rhs[m - 1]     = 1.0;
    Vec pi         = sys.fullPivLu().solve(rhs);
    double residual = ((pi.transpose() * w).transpose() - pi).lpNorm<Eigen::Infinity>();
    if (!pi.allFinite() || residual > 1e-10) {
        // Power-iteration fallback for ill-conditioned solves.
        Vec p = Vec::Constant(m, 1.0 / m);
        for (int it = 0; it < 100000; ++it) {
            Vec next = (p.transpose() * w).transpose();
            next /= next.sum();
            if ((next - p).lpNorm<Eigen::Infinity>() < 1e-15) {
                p = next;
                break;
            }
            p = next;
        }
        pi       = p;
        residual = ((pi.transpose() * w).transpose() - pi).lpNorm<Eigen::Infinity>();
        if (residual > 1e-10)
            throw Error(ErrorCode::ConvergenceFailure,
                        "stationary vector residual " + std::to_string(residual) + " exceeds 1e-10");
    }
    pi /= pi.sum();
    return pi;
}

struct StationaryVector {
    Vec pi;

    int size() const { return static_cast<int>(pi.size()); }
};

struct DisagreementProjector {
    Mat q;  // I - 1'pi
};

class GossipMatrix {
  public:
    const Mat& entries() const { return w_; }
    int size() const { return static_cast<int>(w_.rows()); }
    const GossipCertificate& certificate() const { return cert_; }

    friend GossipMatrix validate_gossip(const Mat& entries);

  private:
    GossipMatrix(Mat w, GossipCertificate cert) : w_(std::move(w)), cert_(cert) {}

    Mat w_;
    GossipCertificate cert_;
};

inline GossipMatrix validate_gossip(const Mat& entries) {
    if (entries.rows() != entries.cols() || entries.rows() < 1)
        throw Error(ErrorCode::InvalidArgument, "gossip matrix must be square with m >= 1");
    const int m = static_cast<int>(entries.rows());

    GossipCertificate cert;
    cert.min_entry = entries.minCoeff();
    if (cert.min_entry < 0.0)
        throw Error(ErrorCode::NegativeEntry,
                    "entry " + std::to_string(cert.min_entry) + " below zero");
    for (int i = 0; i < m; ++i) {
        double dev = std::abs(entries.row(i).sum() - 1.0);
        cert.max_row_sum_dev = std::max(cert.max_row_sum_dev, dev);
        if (dev > 1e-12)
            throw Error(ErrorCode::RowSumViolation,
                        "row " + std::to_string(i) + " sums to 1 " + (entries.row(i).sum() > 1 ? "+" : "-") +
                            " more than 1e-12");
    }

    cert.strongly_connected = detail::reaches_all(detail::adjacency(entries, false)) &&
                              detail::reaches_all(detail::adjacency(entries, true));
    if (!cert.strongly_connected)
        throw Error(ErrorCode::Reducible, "positive-entry digraph is not strongly connected");

    cert.period            = detail::digraph_period(entries);
    cert.positive_diagonal = entries.diagonal().minCoeff() > 0.0;
    if (cert.period != 1)
        throw Error(ErrorCode::Periodic, "cycle-length gcd is " + std::to_string(cert.period));

    return GossipMatrix(entries, cert);
}

inline StationaryVector stationary_vector(const GossipMatrix& w) {
    Vec pi = stationary_of(w.entries());
    if (pi.minCoeff() <= 0.0)
        throw Error(ErrorCode::ConvergenceFailure, "stationary vector has a non-positive entry");
    return StationaryVector{pi};
}

inline DisagreementProjector projector(const StationaryVector& sv) {
    const int m = sv.size();
    Mat q       = Mat::Identity(m, m) - Vec::Ones(m) * sv.pi.transpose();
    return DisagreementProjector{q};
}

namespace detail {

// Truncated Taylor series with scaling and squaring; fallback for matrices
// whose eigenbasis is too ill-conditioned to trust.
inline Mat expm_taylor(const Mat& b) {
    double norm = b.cwiseAbs().rowwise().sum().maxCoeff();
    int squarings = 0;
    Mat c         = b;
    if (norm > 0.5) {
        squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
        c /= std::pow(2.0, squarings);
    }
    const int n = static_cast<int>(b.rows());
    Mat result  = Mat::Identity(n, n);
    Mat term    = Mat::Identity(n, n);
    for (int k = 1; k <= 40; ++k) {
        term = term * c / static_cast<double>(k);
        result += term;
        if (term.cwiseAbs().maxCoeff() < 1e-18) break;
    }
    for (int s = 0; s < squarings; ++s) result = result * result;
    return result;
}

}  // namespace detail

// e^{-tM} for a general square real matrix.
inline Mat expm_neg(const Mat& m, double t) {
    if (t < 0.0) throw Error(ErrorCode::InvalidArgument, "expm_neg requires t >= 0");
    const int n = static_cast<int>(m.rows());
    if (t == 0.0) return Mat::Identity(n, n);
    Eigen::EigenSolver<Mat> es(m);
    if (es.info() == Eigen::Success) {
        const CMat& v = es.eigenvectors();
        Eigen::JacobiSVD<CMat> svd(v);
        double cond = svd.singularValues()(0) / svd.singularValues()(svd.singularValues().size() - 1);
        if (std::isfinite(cond) && cond < 1e8) {
            CVec scale = (-t * es.eigenvalues().array()).exp();
            CMat out   = v * scale.asDiagonal() * v.inverse();
            return out.real();
        }
    }
    return detail::expm_taylor(-t * m);
}

class DriftMatrix {
  public:
    // Certifies y A y' > 0 via the symmetric part and caches the eigenstructure
    // so that e^{-tA} is cheap inside per-step recursions.
    explicit DriftMatrix(const Mat& a) : a_(a) {
        if (a.rows() != a.cols() || a.rows() < 1)
            throw Error(ErrorCode::InvalidArgument, "drift matrix must be square");
        Eigen::SelfAdjointEigenSolver<Mat> sym(0.5 * (a + a.transpose()));
        sym_min_eig_ = sym.eigenvalues().minCoeff();
        if (sym_min_eig_ <= 0.0)
            throw Error(ErrorCode::NotPositiveDefinite,
                        "symmetric part has eigenvalue " + std::to_string(sym_min_eig_));

        Eigen::EigenSolver<Mat> es(a);
        eigvals_    = es.eigenvalues();
        lambda_min_ = eigvals_.real().minCoeff();

        eigvecs_ = es.eigenvectors();
        Eigen::JacobiSVD<CMat> svd(eigvecs_);
        double cond = svd.singularValues()(0) / svd.singularValues()(svd.singularValues().size() - 1);
        diagonalizable_ = std::isfinite(cond) && cond < 1e8;
        if (diagonalizable_) eigvecs_inv_ = eigvecs_.inverse();
    }

    const Mat& matrix() const { return a_; }
    int dim() const { return static_cast<int>(a_.rows()); }
    double lambda_min() const { return lambda_min_; }
    double symmetric_min_eigenvalue() const { return sym_min_eig_; }

    Mat exp_neg(double t) const {
        if (t < 0.0) throw Error(ErrorCode::InvalidArgument, "exp_neg requires t >= 0");
        if (t == 0.0) return Mat::Identity(dim(), dim());
        if (!diagonalizable_) return detail::expm_taylor(-t * a_);
        CVec scale = (-t * eigvals_.array()).exp();
        return (eigvecs_ * scale.asDiagonal() * eigvecs_inv_).real();
    }

  private:
    Mat a_;
    CVec eigvals_;
    CMat eigvecs_;
    CMat eigvecs_inv_;
    double lambda_min_  = 0.0;
    double sym_min_eig_ = 0.0;
    bool diagonalizable_ = false;
};

inline DriftMatrix drift_spectrum(const Mat& a) { return DriftMatrix(a); }

inline Mat matrix_exp_neg(const DriftMatrix& a, double t) { return a.exp_neg(t); }

// Second-largest eigenvalue modulus; mixing-speed diagnostic only.
inline double gossip_contraction(const GossipMatrix& w) {
    const int m = w.size();
    if (m == 1) return 0.0;
    Eigen::EigenSolver<Mat> es(w.entries());
    CVec ev  = es.eigenvalues();
    int skip = 0;
    for (int i = 1; i < m; ++i)
        if (std::abs(ev[i] - std::complex<double>(1.0, 0.0)) <
            std::abs(ev[skip] - std::complex<double>(1.0, 0.0)))
            skip = i;
    double best = 0.0;
    for (int i = 0; i < m; ++i)
        if (i != skip) best = std::max(best, std::abs(ev[i]));
    return std::min(best, 1.0 - 1e-15);
}

// Plain-text gossip format: first line m, then m whitespace-separated rows.
inline Mat read_gossip_text(std::istream& in) {
    int m = 0;
    if (!(in >> m) || m < 1) throw Error(ErrorCode::ParseError, "expected leading agent count");
    Mat w(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (!(in >> w(i, j)))
                throw Error(ErrorCode::ParseError,
                            "expected " + std::to_string(m * m) + " matrix entries");
    return w;
}

inline void write_gossip_text(std::ostream& out, const Mat& w) {
    out << w.rows() << "\n";
    for (int i = 0; i < w.rows(); ++i) {
        for (int j = 0; j < w.cols(); ++j) out << (j ? " " : "") << fmt17(w(i, j));
        out << "\n";
    }
}

// Ring with symmetric neighbor weights; doubly stochastic, aperiodic for
// self_weight > 0.
inline Mat ring_gossip(int m, double self_weight = 0.5) {
    if (m < 1 || self_weight <= 0.0 || self_weight >= 1.0)
        throw Error(ErrorCode::InvalidArgument, "ring_gossip needs m >= 1, self weight in (0,1)");
    Mat w = Mat::Zero(m, m);
    if (m == 1) {
        w(0, 0) = 1.0;
        return w;
    }
    double side = 0.5 * (1.0 - self_weight);
    for (int i = 0; i < m; ++i) {
        w(i, i) += self_weight;
        w(i, (i + 1) % m) += side;
        w(i, (i + m - 1) % m) += side;
    }
    return w;
}

// Hub-and-spokes broadcast pattern: spokes put weight beta on the hub, the hub
// listens back with small weight listen_back. listen_back = 0 reproduces the
// pure broadcast row (hub keeps its own value), which is reducible and fails
// certification; a positive value keeps pi concentrated on the hub while
// satisfying irreducibility. Row-stochastic but not doubly stochastic.
inline Mat broadcast_gossip(int m, double beta = 0.5, double listen_back = 0.02) {
    if (m < 2 || beta <= 0.0 || beta >= 1.0 || listen_back < 0.0 || listen_back * (m - 1) >= 1.0)
        throw Error(ErrorCode::InvalidArgument, "broadcast_gossip parameter out of range");
    Mat w = Mat::Zero(m, m);
    w(0, 0) = 1.0 - listen_back * (m - 1);
    for (int i = 1; i < m; ++i) {
        w(0, i) = listen_back;
        w(i, 0) = beta;
        w(i, i) = 1.0 - beta;
    }
    return w;
}

}  // namespace dsalab::spectral
