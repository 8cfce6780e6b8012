#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dsalab/decomp.hpp"
#include "dsalab/rng.hpp"
#include "dsalab/schedule.hpp"

using namespace dsalab;
using namespace dsalab::decomp;
using Catch::Matchers::WithinAbs;

namespace {

Mat random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.uniform(-1.0, 1.0);
    return m;
}

struct RandomSystem {
    Mat w;
    Vec pi;
    Mat q;
    spectral::DriftMatrix a;
};

RandomSystem random_system(Rng& rng, int m, int d) {
    Mat w(m, m);
    for (int i = 0; i < m; ++i)
        w.row(i) = (0.5 * Vec::Unit(m, i) + 0.5 * rng.dirichlet(m, 1.0)).transpose();
    Vec pi = spectral::stationary_of(w);
    Mat q  = Mat::Identity(m, m) - Vec::Ones(m) * pi.transpose();
    Mat g  = random_matrix(rng, d, d);
    Mat amat = 0.5 * (g - g.transpose()) + g.transpose() * g + 0.3 * Mat::Identity(d, d);
    return {std::move(w), std::move(pi), std::move(q), spectral::drift_spectrum(amat)};
}

// Direct evaluation of the closed-form noise sums, entirely independent of the
// recursion implementations:
//   psi_{n+1} = sum_k alpha_k 1'pi M_{k+1} e^{-(t_{n+1} - t_{k+1}) A}
//   chi_{n+1} = sum_j alpha_j W^{n-j} Q M_{j+1} e^{-(t_{n+1} - t_{j+1}) A}
struct DirectSums {
    Mat psi;
    Mat chi;
};

DirectSums direct_sums(const std::vector<Mat>& noises, const std::vector<double>& alphas,
                       const RandomSystem& sys) {
    const auto n_steps = noises.size();
    std::vector<double> t(n_steps + 1, 0.0);
    for (size_t k = 0; k < n_steps; ++k) t[k + 1] = t[k] + alphas[k];
    const int m = static_cast<int>(sys.w.rows());
    const int d = sys.a.dim();

    Mat psi = Mat::Zero(m, d);
    Mat chi = Mat::Zero(m, d);
    // W^{n-j} built by repeated multiplication, highest power first.
    std::vector<Mat> w_pow(n_steps);
    Mat acc = Mat::Identity(m, m);
    for (size_t p = 0; p < n_steps; ++p) {
        w_pow[p] = acc;  // W^p
        acc      = sys.w * acc;
    }
    for (size_t k = 0; k < n_steps; ++k) {
        Mat decay = spectral::expm_neg(sys.a.matrix(), t[n_steps] - t[k + 1]);
        psi += alphas[k] * (Vec::Ones(m) * (sys.pi.transpose() * noises[k])) * decay;
        chi += alphas[k] * w_pow[n_steps - 1 - k] * (sys.q * noises[k]) * decay;
    }
    return {std::move(psi), std::move(chi)};
}

}  // namespace

TEST_CASE("operator norm agrees with SVD") {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        int r = 1 + static_cast<int>(rng.uniform01() * 7);
        int c = 1 + static_cast<int>(rng.uniform01() * 7);
        Mat x = random_matrix(rng, r, c, 3.0);
        Eigen::JacobiSVD<Mat> svd(x);
        CHECK_THAT(operator_norm(x), WithinAbs(svd.singularValues()(0), 1e-9));
    }
    CHECK(operator_norm(Mat::Zero(3, 2)) == 0.0);
    CHECK_THAT(operator_norm(Mat::Identity(4, 4)), WithinAbs(1.0, 1e-10));
}

TEST_CASE("decompose worked examples") {
    Vec pi(2);
    pi << 2.0 / 3.0, 1.0 / 3.0;
    Mat q = Mat::Identity(2, 2) - Vec::Ones(2) * pi.transpose();

    Mat x_star = Mat::Zero(2, 1);
    auto at_star = decompose(x_star, x_star, pi, q);
    CHECK(at_star.agreement_norm == 0.0);
    CHECK(at_star.disagreement_norm == 0.0);
    CHECK(at_star.total_norm == 0.0);

    // Consensus offset: disagreement vanishes, agreement is ||1'v||.
    RowVec v(1);
    v << 0.7;
    auto offset = decompose(x_star + Vec::Ones(2) * v, x_star, pi, q);
    CHECK_THAT(offset.disagreement_norm, WithinAbs(0.0, 1e-12));
    CHECK_THAT(offset.agreement_norm, WithinAbs(0.7 * std::sqrt(2.0), 1e-12));

    // Hand-computed rank-1 operator norms.
    Mat x(2, 1);
    x << 1.0, 0.0;
    auto parts = decompose(x, x_star, pi, q);
    CHECK_THAT(parts.agreement_norm, WithinAbs(2.0 / 3.0 * std::sqrt(2.0), 1e-12));
    CHECK_THAT(parts.disagreement_norm, WithinAbs(std::sqrt(5.0) / 3.0, 1e-12));
    CHECK(parts.identity_residual <= 1e-10);

    Mat skewed(2, 1);
    skewed << 1.0, 2.0;
    CHECK_THROWS_MATCHES(decompose(x, skewed, pi, q), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::XStarNotConsensus;
                         }));
}

TEST_CASE("decomposition triangle inequality and identity on random data") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        int m    = 2 + static_cast<int>(rng.uniform01() * 5);
        int d    = 1 + static_cast<int>(rng.uniform01() * 3);
        auto sys = random_system(rng, m, d);
        Mat x    = random_matrix(rng, m, d, 2.0);
        Mat xs   = Vec::Ones(m) * random_matrix(rng, 1, d, 2.0);
        auto parts = decompose(x, xs, sys.pi, sys.q);
        CHECK(parts.total_norm <= parts.agreement_norm + parts.disagreement_norm + 1e-9);
        CHECK(parts.identity_residual <= 1e-10);
    }
}

TEST_CASE("psi recursion basics") {
    Rng rng(3);
    auto sys = random_system(rng, 3, 2);
    auto acc = NoiseAccumulators::zero(3, 2);

    psi_update(acc, Mat::Zero(3, 2), sys.pi, sys.a, 0.3);
    CHECK(acc.psi_row.norm() == 0.0);

    Mat m1 = random_matrix(rng, 3, 2);
    psi_update(acc, m1, sys.pi, sys.a, 0.3);
    RowVec expected = 0.3 * (sys.pi.transpose() * m1);
    CHECK((acc.psi_row - expected).norm() < 1e-15);
    CHECK_THAT(acc.psi_operator_norm(), WithinAbs(std::sqrt(3.0) * expected.norm(), 1e-12));
}

TEST_CASE("chi recursion basics") {
    Rng rng(4);
    auto sys = random_system(rng, 3, 2);
    auto acc = NoiseAccumulators::zero(3, 2);

    chi_update(acc, Mat::Zero(3, 2), sys.w, sys.q, sys.a, 0.5);
    CHECK(acc.chi.norm() == 0.0);

    Mat m1 = random_matrix(rng, 3, 2);
    chi_update(acc, m1, sys.w, sys.q, sys.a, 0.5);
    CHECK((acc.chi - 0.5 * (sys.q * m1)).norm() < 1e-15);
}

TEST_CASE("recursions match the direct closed-form sums") {
    Rng rng(101);
    auto sched = schedule::StepsizeSchedule::type_gamma(0.5, 0.7);
    for (int trial = 0; trial < 5; ++trial) {
        int m    = 2 + static_cast<int>(rng.uniform01() * 4);  // m <= 6
        int d    = 1 + static_cast<int>(rng.uniform01() * 3);  // d <= 4
        auto sys = random_system(rng, m, d);
        auto acc = NoiseAccumulators::zero(m, d);

        std::vector<Mat> noises;
        std::vector<double> alphas;
        const int steps = 100;
        for (int k = 0; k < steps; ++k) {
            double alpha = sched.alpha_at_step(static_cast<std::size_t>(k));
            Mat m_next   = random_matrix(rng, m, d);
            psi_update(acc, m_next, sys.pi, sys.a, alpha);
            chi_update(acc, m_next, sys.w, sys.q, sys.a, alpha);
            noises.push_back(std::move(m_next));
            alphas.push_back(alpha);
        }
        auto direct = direct_sums(noises, alphas, sys);

        Mat psi_rec = Vec::Ones(m) * acc.psi_row;
        CHECK(operator_norm(psi_rec - direct.psi) < 1e-10);
        CHECK(operator_norm(acc.chi - direct.chi) < 1e-10);
    }
}

TEST_CASE("agreement norm equals psi plus delta") {
    // Rearranged residual definition: 1'pi(x - x_*) = psi_n + Delta_n.
    Rng rng(55);
    auto sys = random_system(rng, 4, 2);
    auto acc = NoiseAccumulators::zero(4, 2);
    Mat x    = random_matrix(rng, 4, 2);
    Mat xs   = Vec::Ones(4) * random_matrix(rng, 1, 2);
    for (int k = 0; k < 20; ++k) psi_update(acc, random_matrix(rng, 4, 2), sys.pi, sys.a, 0.05);

    RowVec agree_row = sys.pi.transpose() * (x - xs);
    RowVec delta_row = agree_row - acc.psi_row;
    double recomposed = std::sqrt(4.0) * (acc.psi_row + delta_row).norm();
    auto parts        = decompose(x, xs, sys.pi, sys.q);
    CHECK_THAT(recomposed, WithinAbs(parts.agreement_norm, 1e-9));
}

TEST_CASE("lil running sup") {
    auto rec = [](std::size_t n, double ratio) {
        DecompRecord r;
        r.n         = n;
        r.lil_ratio = ratio;
        return r;
    };
    std::vector<DecompRecord> flat{rec(100, 2.0), rec(200, 2.0), rec(300, 2.0)};
    auto [sup_f, at_f] = lil_running_sup(flat, 100);
    CHECK(sup_f == 2.0);
    CHECK(at_f == 100);

    std::vector<DecompRecord> bumpy{rec(100, 1.0), rec(200, 3.0), rec(300, 2.0)};
    auto [sup_b, at_b] = lil_running_sup(bumpy, 100);
    CHECK(sup_b == 3.0);
    CHECK(at_b == 200);

    CHECK_THROWS_MATCHES(lil_running_sup(bumpy, 500), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::EmptyAfterBurnIn;
                         }));
}

TEST_CASE("slope fit on synthetic decays") {
    std::vector<std::pair<std::size_t, double>> exact, logged, flat;
    std::size_t n = 100;
    while (n <= 1000000) {
        exact.emplace_back(n, std::pow(static_cast<double>(n), -0.7));
        logged.emplace_back(n, 5.0 * std::pow(static_cast<double>(n), -0.35) *
                                   std::sqrt(std::log(static_cast<double>(n))));
        flat.emplace_back(n, 2.5);
        n = static_cast<std::size_t>(std::ceil(1.05 * static_cast<double>(n)));
    }
    auto f_exact = slope_fit(exact, 1000, 1000000);
    CHECK_THAT(f_exact.slope, WithinAbs(-0.7, 1e-9));
    CHECK_THAT(f_exact.r_squared, WithinAbs(1.0, 1e-9));

    // Log factor biases the fitted slope upward; stays inside [-0.45, -0.30].
    auto f_logged = slope_fit(logged, 1000, 1000000);
    CHECK(f_logged.slope <= -0.30);
    CHECK(f_logged.slope >= -0.45);

    auto f_flat = slope_fit(flat, 1000, 1000000);
    CHECK_THAT(f_flat.slope, WithinAbs(0.0, 1e-12));

    CHECK_THROWS_MATCHES(slope_fit(exact, 999000, 1000000), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::TooFewPoints;
                         }));
}

TEST_CASE("martingale lil tester basics") {
    auto unit_weights = [](std::size_t) { return std::pair<double, double>{1.0, 1.0}; };

    auto zero = martingale_lil_test([](std::size_t) { return 0.0; }, unit_weights, 1000);
    CHECK(zero.sup_normalized == 0.0);

    // Exact scaling: doubling sigma doubles the sup for the same noise path.
    auto run_sigma = [&](double sigma) {
        Rng rng(2024);
        auto noise = [&rng, sigma](std::size_t) {
            return rng.uniform01() < 0.5 ? -sigma : sigma;
        };
        return martingale_lil_test(noise, unit_weights, 50000, 1000).sup_normalized;
    };
    double s1 = run_sigma(1.0);
    double s2 = run_sigma(2.0);
    CHECK_THAT(s2, WithinAbs(2.0 * s1, 1e-12));
    CHECK(s1 > 0.0);

    // Weight bound enforcement.
    auto bad_weights = [](std::size_t) { return std::pair<double, double>{2.0, 1.0}; };
    CHECK_THROWS_AS(
        martingale_lil_test([](std::size_t) { return 1.0; }, bad_weights, 10, 0), Error);

    // Decaying non-square-summable weights still accumulate tau to infinity.
    auto decaying = [](std::size_t k) {
        double t = std::pow(static_cast<double>(k + 1), -0.3);
        return std::pair<double, double>{t, t};
    };
    Rng rng(5);
    auto res = martingale_lil_test([&rng](std::size_t) { return rng.gaussian(); }, decaying,
                                   20000, 1000);
    CHECK(res.sup_normalized > 0.0);
    CHECK(std::isfinite(res.sup_normalized));
}
