#include <catch_amalgamated.hpp>

#include <cmath>

#include "dsalab/engine.hpp"
#include "dsalab/td.hpp"

using namespace dsalab;
using namespace dsalab::engine;
using Catch::Matchers::WithinAbs;

namespace {

Mat mat2(double a, double b, double c, double d) {
    Mat m(2, 2);
    m << a, b, c, d;
    return m;
}

}  // namespace

TEST_CASE("dsa step: consensus fixed point under pure gossip") {
    // h evaluates to zero at x because B = xA, and W has dyadic entries so the
    // gossip average of identical rows is exact.
    Mat w = mat2(0.5, 0.5, 0.5, 0.5);
    auto gw = spectral::validate_gossip(w);
    auto a  = spectral::drift_spectrum(Mat::Identity(1, 1));
    Mat x0  = Vec::Ones(2) * RowVec::Constant(1, 3.25);
    auto h  = DriveSpec::linear(a, x0 * a.matrix());
    auto s  = schedule::StepsizeSchedule::type1(1.0);

    DsaState state(x0, 0);
    dsa_step(state, gw, h, NoiseModel::zero(), s);
    CHECK((state.x - x0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(state.k == 1);
}

TEST_CASE("dsa step: scalar Euler step") {
    auto gw = spectral::validate_gossip(Mat::Ones(1, 1));
    auto a  = spectral::drift_spectrum(Mat::Identity(1, 1));
    auto h  = DriveSpec::linear(a, Mat::Zero(1, 1));  // h(x) = -x
    auto s  = schedule::StepsizeSchedule::type1(0.5); // alpha_0 = 0.5

    DsaState state(Mat::Constant(1, 1, 2.0), 0);
    dsa_step(state, gw, h, NoiseModel::zero(), s);
    CHECK_THAT(state.x(0, 0), WithinAbs(1.0, 1e-15));
}

TEST_CASE("dsa step: gossip mixing by hand") {
    Mat w = mat2(0.9, 0.1, 0.2, 0.8);
    auto gw = spectral::validate_gossip(w);
    auto a  = spectral::drift_spectrum(Mat::Identity(1, 1));
    Mat x0(2, 1);
    x0 << 1.0, 0.0;
    auto h = DriveSpec::linear(a, x0 * a.matrix());  // zero drive at x0
    auto s = schedule::StepsizeSchedule::type1(1.0);

    DsaState state(x0, 0);
    dsa_step(state, gw, h, NoiseModel::zero(), s);
    CHECK_THAT(state.x(0, 0), WithinAbs(0.9, 1e-15));
    CHECK_THAT(state.x(1, 0), WithinAbs(0.2, 1e-15));
}

TEST_CASE("pi-projection recursion holds step by step") {
    Rng setup(5);
    Mat w(3, 3);
    for (int i = 0; i < 3; ++i)
        w.row(i) = (0.5 * Vec::Unit(3, i) + 0.5 * setup.dirichlet(3, 1.0)).transpose();
    auto gw = spectral::validate_gossip(w);
    auto pi = spectral::stationary_vector(gw);

    Mat amat = mat2(1.0, 0.2, -0.1, 1.5);
    auto a   = spectral::drift_spectrum(amat);
    Mat b(3, 2);
    b << 1.0, -0.5, 0.3, 0.7, -1.2, 0.4;
    auto h = DriveSpec::linear(a, b);
    auto s = schedule::StepsizeSchedule::type_gamma(0.5, 0.7);

    DsaState state(Mat::Zero(3, 2), 99);
    auto noise = NoiseModel::gaussian(Vec::Constant(3, 0.5));
    for (int k = 0; k < 50; ++k) {
        RowVec before  = pi.pi.transpose() * state.x;
        double alpha   = s.alpha_at_step(state.k);
        Mat drive      = h.evaluate(state.x);
        Mat m_next     = dsa_step_noise(state, gw, h, noise, s);
        RowVec after   = pi.pi.transpose() * state.x;
        RowVec predict = before + alpha * (pi.pi.transpose() * (drive + m_next));
        CHECK((after - predict).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("linear drive equals the local normal form with f1 = 0, f2 = -xA") {
    Rng rng(17);
    Mat w(3, 3);
    for (int i = 0; i < 3; ++i)
        w.row(i) = (0.5 * Vec::Unit(3, i) + 0.5 * rng.dirichlet(3, 1.0)).transpose();
    auto gw = spectral::validate_gossip(w);
    auto pi = spectral::stationary_vector(gw);
    auto q  = spectral::projector(pi);

    Mat amat = mat2(2.0, 0.5, -0.5, 1.0);
    auto a   = spectral::drift_spectrum(amat);
    Mat b(3, 2);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) b(i, j) = rng.uniform(-1.0, 1.0);

    RowVec pib    = pi.pi.transpose() * b;
    RowVec theta  = amat.transpose().fullPivLu().solve(pib.transpose()).transpose();
    Mat x_star    = Vec::Ones(3) * theta;
    auto linear   = DriveSpec::linear(a, b);
    auto expanded = DriveSpec::linear_plus_perturbation(
        a, b, pi.pi, q.q, x_star, nullptr, [amat](const Mat& x) { return Mat(-x * amat); });

    for (int trial = 0; trial < 10; ++trial) {
        Mat x(3, 2);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 2; ++j) x(i, j) = rng.uniform(-4.0, 4.0);
        CHECK((linear.evaluate(x) - expanded.evaluate(x)).cwiseAbs().maxCoeff() < 1e-12);
    }

    // A genuinely nonlinear f1 = g1(pi(x - x_*)) evaluates without fuss.
    auto nonlinear = DriveSpec::linear_plus_perturbation(
        a, b, pi.pi, q.q, x_star,
        [&](const Mat& x) {
            RowVec z = pi.pi.transpose() * (x - x_star);
            return Mat(Vec::Ones(3) * (z.norm() * z));
        },
        [amat](const Mat& x) { return Mat(-x * amat); }, 2.0);
    Mat probe = x_star + Mat::Constant(3, 2, 1e-3);
    CHECK(nonlinear.evaluate(probe).allFinite());
}

TEST_CASE("run_dsa input validation and determinism") {
    auto gw = spectral::validate_gossip(Mat::Ones(1, 1));
    auto a  = spectral::drift_spectrum(Mat::Identity(1, 1));
    auto h  = DriveSpec::linear(a, Mat::Zero(1, 1));
    auto s  = schedule::StepsizeSchedule::type1(1.0);
    DecompContext ctx{Vec::Ones(1), Mat::Zero(1, 1), Mat::Zero(1, 1)};

    CHECK_THROWS_AS(
        run_dsa(Mat::Zero(1, 1), gw, h, NoiseModel::zero(), s, 0, RecorderSpec{}, ctx, 0), Error);

    auto noise = NoiseModel::gaussian(Vec::Ones(1));
    auto t1 = run_dsa(Mat::Zero(1, 1), gw, h, noise, s, 2000, RecorderSpec{}, ctx, 7);
    auto t2 = run_dsa(Mat::Zero(1, 1), gw, h, noise, s, 2000, RecorderSpec{}, ctx, 7);
    REQUIRE(t1.records.size() == t2.records.size());
    for (size_t i = 0; i < t1.records.size(); ++i) {
        CHECK(t1.records[i].n == t2.records[i].n);
        CHECK(t1.records[i].total_norm == t2.records[i].total_norm);
        CHECK(t1.records[i].agreement_norm == t2.records[i].agreement_norm);
    }
    CHECK((t1.final_x - t2.final_x).cwiseAbs().maxCoeff() == 0.0);

    auto t3 = run_dsa(Mat::Zero(1, 1), gw, h, noise, s, 2000, RecorderSpec{}, ctx, 8);
    CHECK((t3.final_x - t1.final_x).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("checkpoint grid is dense then geometric") {
    RecorderSpec rec;
    auto grid = checkpoint_grid(100000, rec);
    for (std::size_t i = 0; i < 100; ++i) CHECK(grid[i] == i);
    for (size_t i = 101; i < grid.size(); ++i) CHECK(grid[i] > grid[i - 1]);
    CHECK(grid.back() == 100000);
    // O(log horizon): far fewer checkpoints than steps.
    CHECK(grid.size() < 400);

    auto tiny = checkpoint_grid(5, rec);
    CHECK(tiny.back() == 5);
}

TEST_CASE("noise-free run reaches the TD fixed point") {
    auto inst  = td::two_state_instance();
    auto chain = td::induce_chain(inst.mdp, inst.policy);
    auto gw    = spectral::validate_gossip(inst.mdp.gossip);
    auto pi    = spectral::stationary_vector(gw);
    auto gt    = td::exact_moments(inst.mdp, inst.policy, chain, inst.features, pi.pi);

    CHECK_THAT(gt.a_mat.matrix()(0, 0), WithinAbs(1.375, 1e-12));
    CHECK_THAT(gt.theta_star(0), WithinAbs(12.0 / 11.0, 1e-12));

    auto h = DriveSpec::linear(gt.a_mat, gt.b_mat);
    auto s = schedule::StepsizeSchedule::type1(2.0 / 1.375);
    DecompContext ctx{pi.pi, Mat::Zero(1, 1), gt.x_star};
    auto trace = run_dsa(Mat::Zero(1, 1), gw, h, NoiseModel::zero(), s, 100000, RecorderSpec{},
                         ctx, 0);
    REQUIRE(trace.status == RunStatus::Completed);
    CHECK((trace.final_x - gt.x_star).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fixed point residuals") {
    auto gw1 = spectral::validate_gossip(Mat::Ones(1, 1));
    auto a1  = spectral::drift_spectrum(Mat::Identity(1, 1));
    auto h1  = DriveSpec::linear(a1, Mat::Zero(1, 1));
    auto r1  = deterministic_fixed_point_check(gw1, h1, Vec::Ones(1));
    CHECK(r1.consensus_residual == 0.0);
    CHECK(r1.drive_residual == 0.0);

    auto a2 = spectral::drift_spectrum(Mat::Constant(1, 1, 2.0));
    auto h2 = DriveSpec::linear(a2, Mat::Constant(1, 1, 4.0));
    auto r2 = deterministic_fixed_point_check(gw1, h2, Vec::Ones(1));
    CHECK_THAT(r2.theta_star(0), WithinAbs(2.0, 1e-12));
    CHECK(r2.consensus_residual <= 1e-12);
    CHECK(r2.drive_residual <= 1e-12);

    // The worked TD instance: A = 1.375, pi B = 1.5, theta_* = 12/11.
    auto inst  = td::two_state_instance();
    auto chain = td::induce_chain(inst.mdp, inst.policy);
    auto pi    = spectral::stationary_vector(gw1);
    auto gt    = td::exact_moments(inst.mdp, inst.policy, chain, inst.features, pi.pi);
    auto h3    = DriveSpec::linear(gt.a_mat, gt.b_mat);
    auto r3    = deterministic_fixed_point_check(gw1, h3, pi.pi);
    CHECK_THAT(r3.theta_star(0), WithinAbs(12.0 / 11.0, 1e-10));
    CHECK(r3.consensus_residual <= 1e-10);
    CHECK(r3.drive_residual <= 1e-10);
}

TEST_CASE("divergence guard aborts with the trace intact") {
    auto gw = spectral::validate_gossip(Mat::Ones(1, 1));
    auto a  = spectral::drift_spectrum(Mat::Identity(1, 1));
    auto h  = DriveSpec::linear(a, Mat::Zero(1, 1));
    // Slowly decaying, enormous stepsize: |1 - alpha| stays far above 1.
    auto s = schedule::StepsizeSchedule::type_gamma(1e6, 0.1);
    DecompContext ctx{Vec::Ones(1), Mat::Zero(1, 1), Mat::Zero(1, 1)};

    auto trace = run_dsa(Mat::Constant(1, 1, 1.0), gw, h, NoiseModel::zero(), s, 1000,
                         RecorderSpec{}, ctx, 0);
    CHECK(trace.status == RunStatus::Diverged);
    CHECK(trace.diverged_at > 0);
    CHECK(!trace.records.empty());

    DsaState state(Mat::Constant(1, 1, 1e12), 0);
    CHECK_THROWS_MATCHES(dsa_step(state, gw, h, NoiseModel::zero(), s), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::NonFinite;
                         }));
}

TEST_CASE("gaussian noise source moments") {
    auto noise = NoiseModel::gaussian((Vec(2) << 1.0, 3.0).finished());
    Rng rng(1234);
    Mat x = Mat::Zero(2, 2);
    double sum0 = 0.0, sum_sq0 = 0.0, sum_sq1 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        Mat m = noise.sample(x, rng);
        sum0 += m(0, 0);
        sum_sq0 += m(0, 0) * m(0, 0);
        sum_sq1 += m(1, 0) * m(1, 0);
    }
    CHECK(std::abs(sum0 / n) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK_THAT(sum_sq0 / n, WithinAbs(1.0, 0.1));
    CHECK_THAT(sum_sq1 / n, WithinAbs(9.0, 0.7));
}
