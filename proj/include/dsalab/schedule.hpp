#pragma once

// Stepsize families:
//   Type 1:     alpha(n) = alpha0 / n
//   Type gamma: alpha(n) = c * n^{-gamma} * (ln n)^eta,  0 < gamma < 1
//
// start_index is the first schedule index at which alpha is evaluated; the
// engine maps its iteration counter k to index k + start_index. Cumulative
// time t_n = sum of the first n stepsizes consumed, and the pathwise rate
// scale at iteration n is sqrt(alpha_n * ln t_{n+1}).

#include <cmath>
#include <cstddef>
#include <string>

#include "dsalab/common.hpp"

namespace dsalab::schedule {

enum class Kind { Type1, TypeGamma };

class StepsizeSchedule {
  public:
    static StepsizeSchedule type1(double alpha0) {
        if (alpha0 <= 0.0) throw Error(ErrorCode::InvalidArgument, "type1 needs alpha0 > 0");
        StepsizeSchedule s;
        s.kind_        = Kind::Type1;
        s.alpha0_      = alpha0;
        s.start_index_ = 1;
        return s;
    }

    // alpha(n) = c n^{-gamma} (ln n)^eta. For eta != 0 the index starts at 2 so
    // ln n > 0; for eta > 0 the map increases until n = e^{eta/gamma}, so the
    // start is pushed past the peak to keep alpha strictly decreasing on its
    // whole domain.
    static StepsizeSchedule type_gamma(double c, double gamma_exp, double eta = 0.0) {
        if (c <= 0.0 || gamma_exp <= 0.0 || gamma_exp >= 1.0)
            throw Error(ErrorCode::InvalidArgument, "type_gamma needs c > 0 and gamma in (0,1)");
        StepsizeSchedule s;
        s.kind_      = Kind::TypeGamma;
        s.c_         = c;
        s.gamma_exp_ = gamma_exp;
        s.eta_       = eta;
        if (eta == 0.0)
            s.start_index_ = 1;
        else if (eta < 0.0)
            s.start_index_ = 2;
        else {
            auto peak      = static_cast<std::size_t>(std::ceil(std::exp(eta / gamma_exp)));
            s.start_index_ = std::max<std::size_t>(2, peak);
            while (!(s.eval(s.start_index_ + 1) < s.eval(s.start_index_))) ++s.start_index_;
        }
        return s;
    }

    Kind kind() const { return kind_; }
    double alpha0() const { return alpha0_; }
    double c() const { return c_; }
    double gamma_exp() const { return gamma_exp_; }
    double eta() const { return eta_; }
    std::size_t start_index() const { return start_index_; }

    double alpha(std::size_t n) const {
        if (n < start_index_)
            throw Error(ErrorCode::IndexBeforeStart,
                        "schedule index " + std::to_string(n) + " before start " +
                            std::to_string(start_index_));
        return eval(n);
    }

    // Stepsize consumed by engine iteration k (0-based).
    double alpha_at_step(std::size_t k) const { return eval(start_index_ + k); }

    // Polynomial decay exponents of the two error components, log factors
    // dropped: agreement and disagreement respectively.
    std::pair<double, double> theoretical_rate_exponents() const {
        if (kind_ == Kind::Type1) return {-0.5, -1.0};
        return {-0.5 * gamma_exp_, -gamma_exp_};
    }

    std::string describe() const {
        if (kind_ == Kind::Type1) return "type1(alpha0=" + std::to_string(alpha0_) + ")";
        return "type_gamma(c=" + std::to_string(c_) + ", gamma=" + std::to_string(gamma_exp_) +
               ", eta=" + std::to_string(eta_) + ")";
    }

  private:
    StepsizeSchedule() = default;

    double eval(std::size_t n) const {
        auto x = static_cast<double>(n);
        if (kind_ == Kind::Type1) return alpha0_ / x;
        double v = c_ * std::pow(x, -gamma_exp_);
        if (eta_ != 0.0) v *= std::pow(std::log(x), eta_);
        return v;
    }

    Kind kind_ = Kind::Type1;
    double alpha0_    = 1.0;
    double c_         = 1.0;
    double gamma_exp_ = 0.5;
    double eta_       = 0.0;
    std::size_t start_index_ = 1;
};

struct TimeAccumulator {
    std::size_t n = 0;  // iterations taken
    double t_n    = 0.0;

    void advance(double alpha_n) {
        t_n += alpha_n;
        ++n;
    }
};

// sqrt(alpha_n ln t_{n+1}) where alpha_n is the stepsize the next iteration
// will consume. Requires t_{n+1} > 1.
inline double lil_scale(const StepsizeSchedule& s, const TimeAccumulator& acc) {
    double alpha_n = s.alpha_at_step(acc.n);
    double t_next  = acc.t_n + alpha_n;
    if (t_next <= 1.0)
        throw Error(ErrorCode::BurnInNotReached,
                    "t_{n+1} = " + std::to_string(t_next) + " <= 1, ln not positive");
    return std::sqrt(alpha_n * std::log(t_next));
}

// A3 Type-1 coefficient condition against a drift matrix spectrum.
inline bool type1_coefficient_ok(const StepsizeSchedule& s, double lambda_min) {
    if (s.kind() != Kind::Type1) return true;
    return s.alpha0() > 1.0 / (2.0 * lambda_min);
}

}  // namespace dsalab::schedule
