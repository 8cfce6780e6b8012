#pragma once

// The gossip-plus-local-update iteration
//
//   x_{n+1} = W x_n + alpha_n [ h(x_n) + M_{n+1} ]
//
// over joint estimates x in R^{m x d}, with pluggable drive h and noise M.
// A run owns its state and generator; nothing here is shared across runs.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsalab/common.hpp"
#include "dsalab/decomp.hpp"
#include "dsalab/rng.hpp"
#include "dsalab/schedule.hpp"
#include "dsalab/spectral.hpp"

namespace dsalab::engine {

inline constexpr double kDivergenceGuard = 1e12;

enum class DriveKind { Linear, LinearPlusPerturbation };

using PerturbationFn = std::function<Mat(const Mat&)>;

// Drive h. Linear evaluates h(x) = B - xA. LinearPlusPerturbation evaluates
// the local normal form h(x) = -1'pi(x - x_*)A + 1'pi f1(x) + Q(B + f2(x)),
// which needs pi, Q and x_* supplied up front.
struct DriveSpec {
    int m;
    int d;
    DriveKind kind;
    spectral::DriftMatrix a;
    Mat b;

    // LinearPlusPerturbation context.
    Vec pi;
    Mat q;
    Mat x_star;
    PerturbationFn f1;
    PerturbationFn f2;
    double nonlinearity_order = 2.0;  // growth order of 1'pi f1 near x_*

    DriveSpec(DriveKind kind_, spectral::DriftMatrix a_, Mat b_)
        : m(static_cast<int>(b_.rows())),
          d(static_cast<int>(b_.cols())),
          kind(kind_),
          a(std::move(a_)),
          b(std::move(b_)) {}

    static DriveSpec linear(spectral::DriftMatrix a, Mat b) {
        return DriveSpec(DriveKind::Linear, std::move(a), std::move(b));
    }

    static DriveSpec linear_plus_perturbation(spectral::DriftMatrix a, Mat b, Vec pi, Mat q,
                                              Mat x_star, PerturbationFn f1, PerturbationFn f2,
                                              double order = 2.0) {
        DriveSpec h(DriveKind::LinearPlusPerturbation, std::move(a), std::move(b));
        h.pi                 = std::move(pi);
        h.q                  = std::move(q);
        h.x_star             = std::move(x_star);
        h.f1                 = std::move(f1);
        h.f2                 = std::move(f2);
        h.nonlinearity_order = order;
        return h;
    }

    Mat evaluate(const Mat& x) const {
        if (kind == DriveKind::Linear) return b - x * a.matrix();
        Mat drift = -(Vec::Ones(m) * (pi.transpose() * (x - x_star))) * a.matrix();
        if (f1) drift += Vec::Ones(m) * (pi.transpose() * f1(x));
        Mat tail = b;
        if (f2) tail += f2(x);
        return drift + q * tail;
    }
};

// Noise source M_{n+1} as a function of the current iterate; must be
// conditionally mean zero. Zero and Gaussian are built here; TD sampling noise
// is produced by the td module as another source.
class NoiseModel {
  public:
    using Source = std::function<Mat(const Mat& x, Rng& rng)>;

    static NoiseModel zero() {
        NoiseModel n;
        n.name_ = "zero";
        return n;
    }

    // I.i.d. mean-zero Gaussian entries with per-agent standard deviations.
    static NoiseModel gaussian(Vec per_agent_std) {
        NoiseModel n;
        n.name_   = "gaussian";
        n.source_ = [sigma = std::move(per_agent_std)](const Mat& x, Rng& rng) {
            Mat out(x.rows(), x.cols());
            for (int i = 0; i < x.rows(); ++i)
                for (int j = 0; j < x.cols(); ++j) out(i, j) = sigma[i] * rng.gaussian();
            return out;
        };
        return n;
    }

    static NoiseModel custom(std::string name, Source source) {
        NoiseModel n;
        n.name_   = std::move(name);
        n.source_ = std::move(source);
        return n;
    }

    bool is_zero() const { return !source_; }
    const std::string& name() const { return name_; }

    Mat sample(const Mat& x, Rng& rng) const {
        if (!source_) return Mat::Zero(x.rows(), x.cols());
        return source_(x, rng);
    }

  private:
    std::string name_;
    Source source_;
};

struct DsaState {
    std::size_t k = 0;
    Mat x;
    Rng rng;

    DsaState(Mat x0, std::uint64_t seed) : x(std::move(x0)), rng(seed) {}
};

// One iteration. Throws NonFinite when the iterate leaves the trust region,
// which in practice flags a Type-1 coefficient below 1/(2 lambda_min).
inline Mat dsa_step_noise(DsaState& state, const spectral::GossipMatrix& w, const DriveSpec& h,
                          const NoiseModel& noise, const schedule::StepsizeSchedule& s) {
    const double alpha = s.alpha_at_step(state.k);
    Mat m_next         = noise.sample(state.x, state.rng);
    state.x            = w.entries() * state.x + alpha * (h.evaluate(state.x) + m_next);
    ++state.k;
    if (!all_finite(state.x) || state.x.cwiseAbs().maxCoeff() > kDivergenceGuard)
        throw Error(ErrorCode::NonFinite,
                    "iterate left the finite region at step " + std::to_string(state.k));
    return m_next;
}

inline void dsa_step(DsaState& state, const spectral::GossipMatrix& w, const DriveSpec& h,
                     const NoiseModel& noise, const schedule::StepsizeSchedule& s) {
    dsa_step_noise(state, w, h, noise, s);
}

// Context needed to decompose iterates during a run.
struct DecompContext {
    Vec pi;
    Mat q;
    Mat x_star;
};

struct RecorderSpec {
    double checkpoint_ratio = 1.05;  // geometric spacing past the dense prefix
    std::size_t dense_until = 100;   // record every n below this
    std::size_t burn_in     = 0;     // 0 = auto: first n with t_{n+1} > e and n >= 100
    bool track_psi        = false;
    bool track_chi        = false;
    bool track_delta      = false;
    bool track_gamma      = false;
    bool track_covariance = false;
};

enum class RunStatus { Completed, Diverged };

struct RateTrace {
    std::vector<decomp::DecompRecord> records;
    RunStatus status = RunStatus::Completed;
    std::size_t diverged_at = 0;
    std::size_t burn_in     = 0;
    std::uint64_t seed      = 0;
    Mat final_x;

    // Stabilization diagnostic of the conditional covariance of pi M_{n+1}:
    // relative Frobenius change of the running average between the last two
    // decades of steps. Only filled when covariance tracking is on.
    std::optional<double> covariance_rel_change;
};

inline std::vector<std::size_t> checkpoint_grid(std::size_t horizon, const RecorderSpec& rec) {
    std::vector<std::size_t> grid;
    std::size_t n = 0;
    while (n < rec.dense_until && n <= horizon) grid.push_back(n++);
    if (n > horizon) {
        if (grid.empty() || grid.back() != horizon) grid.push_back(horizon);
        return grid;
    }
    while (n < horizon) {
        grid.push_back(n);
        n = std::max(n + 1, static_cast<std::size_t>(
                                std::ceil(rec.checkpoint_ratio * static_cast<double>(n))));
    }
    grid.push_back(horizon);
    return grid;
}

inline RateTrace run_dsa(const Mat& init, const spectral::GossipMatrix& w, const DriveSpec& h,
                         const NoiseModel& noise, const schedule::StepsizeSchedule& s,
                         std::size_t horizon, const RecorderSpec& rec, const DecompContext& ctx,
                         std::uint64_t seed) {
    if (horizon < 1) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
    if (init.rows() != h.m || init.cols() != h.d)
        throw Error(ErrorCode::InvalidArgument, "init dimensions do not match the drive");

    RateTrace trace;
    trace.seed = seed;

    DsaState state(init, seed);
    schedule::TimeAccumulator acc;
    auto grid        = checkpoint_grid(horizon, rec);
    std::size_t next = 0;

    const bool track_acc = rec.track_psi || rec.track_chi || rec.track_delta || rec.track_gamma;
    auto noise_acc       = decomp::NoiseAccumulators::zero(h.m, h.d);

    // Covariance stabilization bookkeeping: running mean of (pi M)'(pi M) over
    // the final decade vs the one before it.
    Mat cov_prev = Mat::Zero(h.d, h.d), cov_last = Mat::Zero(h.d, h.d);
    std::size_t cov_prev_count = 0, cov_last_count = 0;
    const std::size_t cov_last_from = horizon / 10;
    const std::size_t cov_prev_from = horizon / 100;

    const double e_const = 2.718281828459045;
    bool burn_recorded   = false;

    auto record = [&](std::size_t n) {
        decomp::DecompRecord r;
        r.n       = n;
        r.alpha_n = s.alpha_at_step(n);
        r.t_n     = acc.t_n;
        double t_next = acc.t_n + r.alpha_n;
        auto parts    = decomp::decompose(state.x, ctx.x_star, ctx.pi, ctx.q);
        r.agreement_norm    = parts.agreement_norm;
        r.disagreement_norm = parts.disagreement_norm;
        r.total_norm        = parts.total_norm;
        if (t_next > 1.0) {
            r.lil_scale = std::sqrt(r.alpha_n * std::log(t_next));
            r.lil_ratio = r.total_norm / r.lil_scale;
        }
        if (rec.track_psi) r.psi_norm = noise_acc.psi_operator_norm();
        if (rec.track_chi) r.chi_norm = decomp::operator_norm(noise_acc.chi);
        if (rec.track_delta) {
            RowVec delta_row = ctx.pi.transpose() * (state.x - ctx.x_star) - noise_acc.psi_row;
            r.delta_norm     = std::sqrt(static_cast<double>(h.m)) * delta_row.norm();
        }
        if (rec.track_gamma) r.gamma_norm = decomp::operator_norm(ctx.q * state.x - noise_acc.chi);
        trace.records.push_back(std::move(r));
    };

    for (std::size_t k = 0; k < horizon; ++k) {
        if (!burn_recorded) {
            double t_next = acc.t_n + s.alpha_at_step(k);
            if (t_next > e_const && k >= 100) {
                trace.burn_in = k;
                burn_recorded = true;
            }
        }
        if (next < grid.size() && grid[next] == k) {
            record(k);
            ++next;
        }
        double alpha = s.alpha_at_step(k);
        Mat m_next;
        try {
            m_next = dsa_step_noise(state, w, h, noise, s);
        } catch (const Error& err) {
            if (err.code() != ErrorCode::NonFinite) throw;
            trace.status      = RunStatus::Diverged;
            trace.diverged_at = k + 1;
            trace.final_x     = Mat();
            return trace;
        }
        if (track_acc) {
            if (rec.track_psi || rec.track_delta)
                decomp::psi_update(noise_acc, m_next, ctx.pi, h.a, alpha);
            if (rec.track_chi || rec.track_gamma)
                decomp::chi_update(noise_acc, m_next, w.entries(), ctx.q, h.a, alpha);
        }
        if (rec.track_covariance) {
            RowVec pim = ctx.pi.transpose() * m_next;
            Mat outer  = pim.transpose() * pim;
            if (k >= cov_last_from) {
                cov_last += outer;
                ++cov_last_count;
            } else if (k >= cov_prev_from) {
                cov_prev += outer;
                ++cov_prev_count;
            }
        }
        acc.advance(alpha);
    }
    if (next < grid.size() && grid[next] == horizon) record(horizon);
    if (!burn_recorded) trace.burn_in = horizon;

    if (rec.track_covariance && cov_prev_count > 0 && cov_last_count > 0) {
        Mat a = cov_prev / static_cast<double>(cov_prev_count);
        Mat b = cov_last / static_cast<double>(cov_last_count);
        double denom = std::max(a.norm(), 1e-300);
        trace.covariance_rel_change = (b - a).norm() / denom;
    }

    trace.final_x = state.x;
    return trace;
}

// Residuals certifying that x_* = 1'(pi B A^{-1}) is fixed for the consensus
// part and zeroes the pi-projected drive: ||W x_* - x_*|| and ||pi h(x_*)||.
struct FixedPointResiduals {
    Mat x_star;
    RowVec theta_star;
    double consensus_residual;
    double drive_residual;
};

inline FixedPointResiduals deterministic_fixed_point_check(const spectral::GossipMatrix& w,
                                                           const DriveSpec& h, const Vec& pi) {
    if (h.kind != DriveKind::Linear)
        throw Error(ErrorCode::InvalidArgument, "fixed-point check expects a Linear drive");
    const Mat& a = h.a.matrix();
    Eigen::FullPivLU<Mat> lu(a);
    if (!lu.isInvertible()) throw Error(ErrorCode::SingularA, "drift matrix is singular");

    RowVec pib        = pi.transpose() * h.b;
    // theta A = pi B  <=>  A' theta' = (pi B)'
    RowVec theta_star = a.transpose().fullPivLu().solve(pib.transpose()).transpose();
    Mat x_star        = Vec::Ones(h.m) * theta_star;

    FixedPointResiduals out;
    out.x_star             = x_star;
    out.theta_star         = theta_star;
    out.consensus_residual = decomp::operator_norm(w.entries() * x_star - x_star);
    out.drive_residual     = (pi.transpose() * h.evaluate(x_star)).norm();
    return out;
}

}  // namespace dsalab::engine
