#pragma once

// Multi-agent TD(0) policy evaluation with linear function approximation.
//
// Agents share an MDP over L states; agent i picks local actions from its own
// set, the joint action drives the kernel, and each agent receives its own
// reward. Under a fixed product policy mu the induced state chain has a
// stationary distribution varphi, and with feature rows phi(s) the method is
// the gossip iteration with
//
//   h(x) = B - xA,     M_{n+1} = (B_n - B) - x_n (A_n - A),
//   A_n  = phi'(s_n) phi(s_n) - disc phi'(s~_n) phi(s_n),
//   b_n(i) = R_i(s_n, a_n, s~_n) phi(s_n),
//
// so that x converges to 1'theta_* with theta_* = pi B A^{-1}. All parameter
// rows are row vectors and A acts on the right (theta A), matching the update
// rule; note this is the transpose of another common convention.
//
// The paper's discount symbol clashes with the stepsize exponent; here the
// discount is `disc` everywhere, including file formats.

#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsalab/common.hpp"
#include "dsalab/engine.hpp"
#include "dsalab/rng.hpp"
#include "dsalab/schedule.hpp"
#include "dsalab/spectral.hpp"

namespace dsalab::td {

struct MdpModel {
    int num_states = 0;
    int num_agents = 0;
    std::vector<int> action_counts;  // per agent
    // kernel[s](a_joint, s~) = P(s~ | s, a); rewards[i][s](a_joint, s~) = R_i(s, a, s~)
    std::vector<Mat> kernel;
    std::vector<std::vector<Mat>> rewards;
    double disc = 0.0;
    Mat gossip;

    int joint_action_count() const {
        return std::accumulate(action_counts.begin(), action_counts.end(), 1,
                               [](int acc, int k) { return acc * k; });
    }

    std::vector<int> decode_joint_action(int idx) const {
        std::vector<int> a(action_counts.size());
        for (int i = static_cast<int>(action_counts.size()) - 1; i >= 0; --i) {
            a[static_cast<size_t>(i)] = idx % action_counts[static_cast<size_t>(i)];
            idx /= action_counts[static_cast<size_t>(i)];
        }
        return a;
    }

    int encode_joint_action(const std::vector<int>& a) const {
        int idx = 0;
        for (size_t i = 0; i < action_counts.size(); ++i) idx = idx * action_counts[i] + a[i];
        return idx;
    }

    void validate() const {
        if (num_states < 1 || num_agents < 1 || disc < 0.0 || disc >= 1.0)
            throw Error(ErrorCode::InvalidArgument, "bad MDP dimensions or discount");
        for (int s = 0; s < num_states; ++s)
            for (int a = 0; a < joint_action_count(); ++a) {
                double dev = std::abs(kernel[static_cast<size_t>(s)].row(a).sum() - 1.0);
                if (dev > 1e-12)
                    throw Error(ErrorCode::RowSumViolation,
                                "kernel row (s=" + std::to_string(s) + ", a=" + std::to_string(a) +
                                    ") off 1 by " + std::to_string(dev));
            }
        for (const auto& agent : rewards)
            for (const auto& table : agent)
                if (!table.allFinite())
                    throw Error(ErrorCode::InvalidArgument, "reward table has non-finite entries");
    }
};

struct PolicyModel {
    // tables[i](s, a_i) = mu_i(a_i | s)
    std::vector<Mat> tables;

    void validate() const {
        for (size_t i = 0; i < tables.size(); ++i)
            for (int s = 0; s < tables[i].rows(); ++s)
                if (std::abs(tables[i].row(s).sum() - 1.0) > 1e-12)
                    throw Error(ErrorCode::InvalidArgument,
                                "policy row for agent " + std::to_string(i) + ", state " +
                                    std::to_string(s) + " does not sum to 1");
    }

    double joint_probability(const MdpModel& mdp, int s, int joint_idx) const {
        auto a   = mdp.decode_joint_action(joint_idx);
        double p = 1.0;
        for (size_t i = 0; i < tables.size(); ++i) p *= tables[i](s, a[i]);
        return p;
    }
};

struct FeatureMatrix {
    Mat phi;  // L x d
    double min_singular_value = 0.0;

    static FeatureMatrix make(Mat phi) {
        Eigen::JacobiSVD<Mat> svd(phi);
        double min_sv = svd.singularValues()(svd.singularValues().size() - 1);
        if (min_sv <= 1e-8)
            throw Error(ErrorCode::RankDeficientFeatures,
                        "smallest singular value " + std::to_string(min_sv));
        return FeatureMatrix{std::move(phi), min_sv};
    }

    int dim() const { return static_cast<int>(phi.cols()); }
};

struct TdInstance {
    MdpModel mdp;
    PolicyModel policy;
    FeatureMatrix features;
};

struct InducedChain {
    Mat p_mu;    // L x L
    Vec varphi;  // stationary distribution
};

inline InducedChain induce_chain(const MdpModel& mdp, const PolicyModel& policy) {
    mdp.validate();
    policy.validate();
    const int L = mdp.num_states;
    Mat p       = Mat::Zero(L, L);
    for (int s = 0; s < L; ++s)
        for (int a = 0; a < mdp.joint_action_count(); ++a) {
            double w = policy.joint_probability(mdp, s, a);
            if (w > 0.0) p.row(s) += w * mdp.kernel[static_cast<size_t>(s)].row(a);
        }
    if (!spectral::detail::reaches_all(spectral::detail::adjacency(p, false)) ||
        !spectral::detail::reaches_all(spectral::detail::adjacency(p, true)))
        throw Error(ErrorCode::ReducibleChain, "induced state chain is not irreducible");
    if (spectral::detail::digraph_period(p) != 1)
        throw Error(ErrorCode::PeriodicChain, "induced state chain is periodic");
    Vec varphi = spectral::stationary_of(p);
    if (varphi.minCoeff() <= 0.0)
        throw Error(ErrorCode::ConvergenceFailure, "stationary distribution not strictly positive");
    return InducedChain{std::move(p), std::move(varphi)};
}

// Mean reward of agent i in state s under mu: E_{a, s~}[R_i(s, a, s~)].
inline Mat mean_rewards(const MdpModel& mdp, const PolicyModel& policy) {
    const int L = mdp.num_states;
    Mat rbar(mdp.num_agents, L);
    for (int i = 0; i < mdp.num_agents; ++i)
        for (int s = 0; s < L; ++s) {
            double v = 0.0;
            for (int a = 0; a < mdp.joint_action_count(); ++a) {
                double w = policy.joint_probability(mdp, s, a);
                if (w == 0.0) continue;
                v += w * mdp.kernel[static_cast<size_t>(s)]
                             .row(a)
                             .dot(mdp.rewards[static_cast<size_t>(i)][static_cast<size_t>(s)].row(a));
            }
            rbar(i, s) = v;
        }
    return rbar;
}

struct TdGroundTruth {
    spectral::DriftMatrix a_mat;
    Mat b_mat;          // m x d
    RowVec theta_star;  // 1 x d
    Mat x_star;         // 1' theta_star
    Vec j_mu;           // exact values, length L
};

// Exact A = E[A_n], B = E[B_n] under stationary i.i.d. sampling, plus the
// fixed point theta_* = pi B A^{-1} and the Bellman solution.
inline TdGroundTruth exact_moments(const MdpModel& mdp, const PolicyModel& policy,
                                   const InducedChain& chain, const FeatureMatrix& features,
                                   const Vec& pi) {
    const int L = mdp.num_states;
    const Mat& phi = features.phi;
    Mat d_mat      = chain.varphi.asDiagonal();
    Mat a          = (phi - mdp.disc * chain.p_mu * phi).transpose() * d_mat * phi;

    Mat rbar = mean_rewards(mdp, policy);
    Mat b(mdp.num_agents, features.dim());
    for (int i = 0; i < mdp.num_agents; ++i) {
        RowVec row = RowVec::Zero(features.dim());
        for (int s = 0; s < L; ++s) row += chain.varphi[s] * rbar(i, s) * phi.row(s);
        b.row(i) = row;
    }

    spectral::DriftMatrix drift(a);  // certifies positive definiteness
    Eigen::FullPivLU<Mat> lu(a);
    if (!lu.isInvertible()) throw Error(ErrorCode::SingularA, "A = E[A_n] is singular");
    RowVec pib        = pi.transpose() * b;
    RowVec theta_star = a.transpose().fullPivLu().solve(pib.transpose()).transpose();

    RowVec rbar_pi = pi.transpose() * rbar;  // 1 x L
    Mat bellman    = Mat::Identity(L, L) - mdp.disc * chain.p_mu;
    Vec j_mu       = bellman.fullPivLu().solve(rbar_pi.transpose());

    TdGroundTruth gt{std::move(drift), std::move(b), theta_star,
                     Vec::Ones(mdp.num_agents) * theta_star, std::move(j_mu)};
    return gt;
}

inline Vec bellman_value(const MdpModel& mdp, const PolicyModel& policy, const InducedChain& chain,
                         const Vec& pi) {
    RowVec rbar_pi = pi.transpose() * mean_rewards(mdp, policy);
    Mat sys        = Mat::Identity(mdp.num_states, mdp.num_states) - mdp.disc * chain.p_mu;
    return sys.fullPivLu().solve(rbar_pi.transpose());
}

struct Sample {
    int s = 0;
    std::vector<int> actions;
    int joint_action = 0;
    int s_tilde      = 0;
    Vec rewards;  // per agent
};

// One i.i.d. draw: s ~ varphi, a ~ mu(.|s), s~ ~ P(.|s,a).
inline Sample sample_step(const MdpModel& mdp, const PolicyModel& policy,
                          const InducedChain& chain, Rng& rng) {
    Sample out;
    out.s = rng.discrete({chain.varphi.data(), static_cast<size_t>(chain.varphi.size())});
    out.actions.resize(static_cast<size_t>(mdp.num_agents));
    for (int i = 0; i < mdp.num_agents; ++i) {
        const auto& row = policy.tables[static_cast<size_t>(i)];
        Vec probs       = row.row(out.s).transpose();
        out.actions[static_cast<size_t>(i)] =
            rng.discrete({probs.data(), static_cast<size_t>(probs.size())});
    }
    out.joint_action = mdp.encode_joint_action(out.actions);
    Vec trans = mdp.kernel[static_cast<size_t>(out.s)].row(out.joint_action).transpose();
    out.s_tilde = rng.discrete({trans.data(), static_cast<size_t>(trans.size())});
    out.rewards = Vec(mdp.num_agents);
    for (int i = 0; i < mdp.num_agents; ++i)
        out.rewards[i] = mdp.rewards[static_cast<size_t>(i)][static_cast<size_t>(out.s)](
            out.joint_action, out.s_tilde);
    return out;
}

struct SampleMoments {
    Mat a_n;  // d x d
    Mat b_n;  // m x d
};

inline SampleMoments sample_moments(const Sample& sample, const FeatureMatrix& features,
                                    double disc) {
    const Mat& phi = features.phi;
    RowVec phi_s   = phi.row(sample.s);
    RowVec phi_t   = phi.row(sample.s_tilde);
    SampleMoments out;
    out.a_n = phi_s.transpose() * phi_s - disc * phi_t.transpose() * phi_s;
    out.b_n = sample.rewards * phi_s;
    return out;
}

// M_{n+1} = (B_n - B) - x_n (A_n - A). Plugging this into the engine update
// makes it identical, row by row, to the per-agent TD(0) rule.
inline Mat td_noise(const Sample& sample, const Mat& x, const TdGroundTruth& gt,
                    const FeatureMatrix& features, double disc) {
    auto [a_n, b_n] = sample_moments(sample, features, disc);
    return (b_n - gt.b_mat) - x * (a_n - gt.a_mat.matrix());
}

// Engine noise source wrapping the i.i.d. sampler. Copies the tables; they are
// a few KB at desk scale.
inline engine::NoiseModel make_td_noise(const TdInstance& instance, const InducedChain& chain,
                                        const TdGroundTruth& gt) {
    return engine::NoiseModel::custom(
        "td_sampling",
        [mdp = instance.mdp, policy = instance.policy, features = instance.features, chain, gt,
         disc = instance.mdp.disc](const Mat& x, Rng& rng) {
            Sample smp = sample_step(mdp, policy, chain, rng);
            return td_noise(smp, x, gt, features, disc);
        });
}

struct RandomMdpParams {
    int num_states        = 5;
    int num_agents        = 3;
    int actions_per_agent = 2;
    int feature_dim       = 2;
    double density        = 1.0;  // Dirichlet concentration of kernel/policy rows
    double reward_scale   = 1.0;
    bool shared_rewards   = false;  // same reward table for every agent
    std::uint64_t seed    = 0;
};

// Random instance with strictly positive kernel rows (hence an irreducible
// aperiodic induced chain), bounded rewards, full-rank features, and a
// positive-diagonal random gossip matrix. Deterministic in the seed.
inline TdInstance random_mdp(const RandomMdpParams& p) {
    if (p.num_states < 2 || p.feature_dim > p.num_states || p.feature_dim < 1 ||
        p.num_agents < 1 || p.actions_per_agent < 1 || p.density <= 0.0)
        throw Error(ErrorCode::InvalidArgument, "random_mdp parameters out of range");
    if (p.num_agents > 4 || p.actions_per_agent > 3)
        throw Error(ErrorCode::InvalidArgument,
                    "joint action tables capped at 4 agents x 3 actions");
    Rng rng(p.seed ^ 0x7d5a0e1b3c9f2468ull);

    MdpModel mdp;
    mdp.num_states = p.num_states;
    mdp.num_agents = p.num_agents;
    mdp.action_counts.assign(static_cast<size_t>(p.num_agents), p.actions_per_agent);
    mdp.disc    = 0.5 + 0.3 * rng.uniform01();
    const int A = mdp.joint_action_count();

    for (int s = 0; s < p.num_states; ++s) {
        Mat rows(A, p.num_states);
        for (int a = 0; a < A; ++a) rows.row(a) = rng.dirichlet(p.num_states, p.density).transpose();
        mdp.kernel.push_back(std::move(rows));
    }

    auto draw_reward_table = [&]() {
        std::vector<Mat> per_state;
        for (int s = 0; s < p.num_states; ++s) {
            Mat t(A, p.num_states);
            for (int a = 0; a < A; ++a)
                for (int st = 0; st < p.num_states; ++st)
                    t(a, st) = rng.uniform(-p.reward_scale, p.reward_scale);
            per_state.push_back(std::move(t));
        }
        return per_state;
    };
    if (p.shared_rewards) {
        auto shared = draw_reward_table();
        for (int i = 0; i < p.num_agents; ++i) mdp.rewards.push_back(shared);
    } else {
        for (int i = 0; i < p.num_agents; ++i) mdp.rewards.push_back(draw_reward_table());
    }

    Mat w(p.num_agents, p.num_agents);
    if (p.num_agents == 1)
        w(0, 0) = 1.0;
    else
        for (int i = 0; i < p.num_agents; ++i)
            w.row(i) = (0.5 * Vec::Unit(p.num_agents, i) +
                        0.5 * rng.dirichlet(p.num_agents, 1.0))
                           .transpose();
    mdp.gossip = w;

    PolicyModel policy;
    for (int i = 0; i < p.num_agents; ++i) {
        Mat t(p.num_states, p.actions_per_agent);
        for (int s = 0; s < p.num_states; ++s)
            t.row(s) = rng.dirichlet(p.actions_per_agent, p.density).transpose();
        policy.tables.push_back(std::move(t));
    }

    for (int attempt = 0; attempt < 100; ++attempt) {
        Mat phi(p.num_states, p.feature_dim);
        for (int s = 0; s < p.num_states; ++s)
            for (int j = 0; j < p.feature_dim; ++j) phi(s, j) = rng.uniform(-1.0, 1.0);
        Eigen::JacobiSVD<Mat> svd(phi);
        if (svd.singularValues()(svd.singularValues().size() - 1) > 1e-8)
            return TdInstance{std::move(mdp), std::move(policy), FeatureMatrix::make(std::move(phi))};
    }
    throw Error(ErrorCode::RankDeficientFeatures, "no full-rank feature draw in 100 attempts");
}

// The worked two-state, one-agent instance: uniform chain, reward 1, disc 0.5,
// features (1; 2). Yields A = 1.375, b = 1.5, theta_* = 12/11, J = (2, 2).
inline TdInstance two_state_instance() {
    MdpModel mdp;
    mdp.num_states = 2;
    mdp.num_agents = 1;
    mdp.action_counts = {1};
    mdp.kernel.push_back((Mat(1, 2) << 0.5, 0.5).finished());
    mdp.kernel.push_back((Mat(1, 2) << 0.5, 0.5).finished());
    mdp.rewards.push_back({Mat::Ones(1, 2), Mat::Ones(1, 2)});
    mdp.disc   = 0.5;
    mdp.gossip = Mat::Ones(1, 1);

    PolicyModel policy;
    policy.tables.push_back(Mat::Ones(2, 1));

    Mat phi(2, 1);
    phi << 1.0, 2.0;
    return TdInstance{std::move(mdp), std::move(policy), FeatureMatrix::make(std::move(phi))};
}

struct AssumptionEntry {
    std::string id;
    bool pass = false;
    std::string detail;
};

struct AssumptionReport {
    std::vector<AssumptionEntry> entries;

    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return true;
    }

    std::string text() const {
        std::ostringstream os;
        for (const auto& e : entries)
            os << (e.pass ? "PASS " : "FAIL ") << e.id << ": " << e.detail << "\n";
        return os.str();
    }
};

// Checks the four standing assumptions on a concrete instance + schedule:
// gossip certification, the local normal form of h with f1 = 0 and
// f2(x) = -xA, the stepsize family (Type-1 coefficient against lambda_min),
// and the structural noise conditions implied by bounded rewards/features.
inline AssumptionReport verify_assumptions(const TdInstance& instance,
                                           const schedule::StepsizeSchedule& sched) {
    AssumptionReport report;
    auto add = [&](std::string id, bool pass, std::string detail) {
        report.entries.push_back({std::move(id), pass, std::move(detail)});
    };

    bool have_pi = false;
    Vec pi;
    try {
        auto w  = spectral::validate_gossip(instance.mdp.gossip);
        auto sv = spectral::stationary_vector(w);
        pi      = sv.pi;
        have_pi = true;
        add("A1", true,
            "gossip matrix certified (period 1, strongly connected), pi_min = " +
                std::to_string(sv.pi.minCoeff()));
    } catch (const Error& e) {
        add("A1", false, e.what());
    }

    try {
        auto chain = induce_chain(instance.mdp, instance.policy);
        add("A1-chain", true, "induced state chain irreducible and aperiodic");
        if (have_pi) {
            auto gt = exact_moments(instance.mdp, instance.policy, chain, instance.features, pi);
            double lmin = gt.a_mat.lambda_min();
            double sym  = gt.a_mat.symmetric_min_eigenvalue();

            // h(x) = B - xA must match -1'pi(x - x_*)A + Q(B + f2(x)) with
            // f1 = 0, f2(x) = -xA.
            const int m = instance.mdp.num_agents;
            Mat q       = Mat::Identity(m, m) - Vec::Ones(m) * pi.transpose();
            Rng probe(12345);
            double worst = 0.0;
            for (int trial = 0; trial < 8; ++trial) {
                Mat x(m, instance.features.dim());
                for (int i = 0; i < x.rows(); ++i)
                    for (int j = 0; j < x.cols(); ++j) x(i, j) = probe.uniform(-2.0, 2.0);
                Mat lhs = gt.b_mat - x * gt.a_mat.matrix();
                Mat rhs = -(Vec::Ones(m) * (pi.transpose() * (x - gt.x_star))) * gt.a_mat.matrix() +
                          q * (gt.b_mat - x * gt.a_mat.matrix());
                worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
            }
            add("A2", sym > 0.0 && worst < 1e-9,
                "A positive definite (sym part min eig " + std::to_string(sym) +
                    "), normal-form residual " + std::to_string(worst));

            bool a3 = schedule::type1_coefficient_ok(sched, lmin);
            add("A3", a3,
                sched.describe() + " vs lambda_min = " + std::to_string(lmin) +
                    (sched.kind() == schedule::Kind::Type1
                         ? " (needs alpha0 > " + std::to_string(1.0 / (2.0 * lmin)) + ")"
                         : " (no coefficient condition for type gamma)"));

            double rmax = 0.0;
            for (const auto& agent : instance.mdp.rewards)
                for (const auto& t : agent) rmax = std::max(rmax, t.cwiseAbs().maxCoeff());
            double phimax = instance.features.phi.rowwise().norm().maxCoeff();
            add("A4a", true, "E[M_{n+1} | F_n] = 0 by construction of A, B as exact means");
            add("A4b", true,
                "rewards bounded by " + std::to_string(rmax) + ", feature rows by " +
                    std::to_string(phimax) + "; ||QM|| grows at most linearly in ||Q(x - x_*)||");
            add("A4c", true, "conditional covariance of pi M is a fixed function of x");
            add("A4d", true, "bounded sampling space: all conditional moments finite");
        }
    } catch (const Error& e) {
        add(e.code() == ErrorCode::ReducibleChain || e.code() == ErrorCode::PeriodicChain
                ? "A1-chain"
                : "A2",
            false, e.what());
    }
    return report;
}

}  // namespace dsalab::td
