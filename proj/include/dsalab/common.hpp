#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dsalab {

inline constexpr std::string_view kVersion = "dsalab 0.1.0";

using Mat    = Eigen::MatrixXd;
using Vec    = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using CMat   = Eigen::MatrixXcd;
using CVec   = Eigen::VectorXcd;

enum class ErrorCode {
    RowSumViolation,
    NegativeEntry,
    Reducible,
    Periodic,
    ConvergenceFailure,
    NotPositiveDefinite,
    IndexBeforeStart,
    BurnInNotReached,
    NonFinite,
    SingularA,
    XStarNotConsensus,
    EmptyAfterBurnIn,
    TooFewPoints,
    TauNotIncreasing,
    ReducibleChain,
    PeriodicChain,
    RankDeficientFeatures,
    AssumptionVeto,
    InvalidArgument,
    IoError,
    ParseError,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::RowSumViolation: return "RowSumViolation";
        case ErrorCode::NegativeEntry: return "NegativeEntry";
        case ErrorCode::Reducible: return "Reducible";
        case ErrorCode::Periodic: return "Periodic";
        case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
        case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
        case ErrorCode::IndexBeforeStart: return "IndexBeforeStart";
        case ErrorCode::BurnInNotReached: return "BurnInNotReached";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::SingularA: return "SingularA";
        case ErrorCode::XStarNotConsensus: return "XStarNotConsensus";
        case ErrorCode::EmptyAfterBurnIn: return "EmptyAfterBurnIn";
        case ErrorCode::TooFewPoints: return "TooFewPoints";
        case ErrorCode::TauNotIncreasing: return "TauNotIncreasing";
        case ErrorCode::ReducibleChain: return "ReducibleChain";
        case ErrorCode::PeriodicChain: return "PeriodicChain";
        case ErrorCode::RankDeficientFeatures: return "RankDeficientFeatures";
        case ErrorCode::AssumptionVeto: return "AssumptionVeto";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::ParseError: return "ParseError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

inline bool all_finite(const Mat& x) { return x.allFinite(); }

// FNV-1a, used to fingerprint serialized configs/instances in output files.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Fixed 17-significant-digit formatting for CSV output (round-trips doubles).
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace dsalab
