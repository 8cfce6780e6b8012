#pragma once

// Reproducibility shell: JSON configs, multi-seed orchestration over a worker
// pool, CSV/JSON persistence with embedded provenance hashes, aggregation
// across seeds (medians and 10/90 quantiles; the rate statements are pathwise,
// so medians rather than means), slope fitting against the theoretical
// exponents, and plot-ready exports.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dsalab/common.hpp"
#include "dsalab/decomp.hpp"
#include "dsalab/engine.hpp"
#include "dsalab/schedule.hpp"
#include "dsalab/spectral.hpp"
#include "dsalab/td.hpp"

namespace dsalab::harness {

using nlohmann::json;

// Slope acceptance tolerances (absolute, on log-log exponents) and the
// allowed growth of the running LIL sup over the last decade of steps.
inline constexpr double kAgreementSlopeTol    = 0.10;
inline constexpr double kDisagreementSlopeTol = 0.15;
inline constexpr double kRelativeRateTol      = 0.20;
inline constexpr double kLilSupGrowthLimit    = 0.30;

// ---------------------------------------------------------------------------
// Instance serialization
// ---------------------------------------------------------------------------

inline json matrix_to_json(const Mat& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Mat matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw Error(ErrorCode::ParseError, "expected a 2-d array");
    Mat m(static_cast<int>(j.size()), static_cast<int>(j[0].size()));
    for (int i = 0; i < m.rows(); ++i) {
        if (static_cast<int>(j[static_cast<size_t>(i)].size()) != m.cols())
            throw Error(ErrorCode::ParseError, "ragged matrix rows");
        for (int c = 0; c < m.cols(); ++c) m(i, c) = j[static_cast<size_t>(i)][static_cast<size_t>(c)].get<double>();
    }
    return m;
}

inline json instance_to_json(const td::TdInstance& inst) {
    json doc;
    doc["format"]        = "dsalab-instance-v1";
    doc["states"]        = inst.mdp.num_states;
    doc["agents"]        = inst.mdp.num_agents;
    doc["action_counts"] = inst.mdp.action_counts;
    doc["disc"]          = inst.mdp.disc;
    json kernel          = json::array();
    for (const auto& k : inst.mdp.kernel) kernel.push_back(matrix_to_json(k));
    doc["kernel"] = std::move(kernel);
    json rewards  = json::array();
    for (const auto& agent : inst.mdp.rewards) {
        json per_state = json::array();
        for (const auto& t : agent) per_state.push_back(matrix_to_json(t));
        rewards.push_back(std::move(per_state));
    }
    doc["rewards"] = std::move(rewards);
    json policy    = json::array();
    for (const auto& t : inst.policy.tables) policy.push_back(matrix_to_json(t));
    doc["policy"]   = std::move(policy);
    doc["features"] = matrix_to_json(inst.features.phi);
    doc["gossip"]   = matrix_to_json(inst.mdp.gossip);
    return doc;
}

inline td::TdInstance instance_from_json(const json& doc) try {
    if (doc.value("format", "") != "dsalab-instance-v1")
        throw Error(ErrorCode::ParseError, "not a dsalab-instance-v1 document");
    td::MdpModel mdp;
    mdp.num_states    = doc.at("states").get<int>();
    mdp.num_agents    = doc.at("agents").get<int>();
    mdp.action_counts = doc.at("action_counts").get<std::vector<int>>();
    mdp.disc          = doc.at("disc").get<double>();
    for (const auto& k : doc.at("kernel")) mdp.kernel.push_back(matrix_from_json(k));
    for (const auto& agent : doc.at("rewards")) {
        std::vector<Mat> per_state;
        for (const auto& t : agent) per_state.push_back(matrix_from_json(t));
        mdp.rewards.push_back(std::move(per_state));
    }
    mdp.gossip = matrix_from_json(doc.at("gossip"));
    td::PolicyModel policy;
    for (const auto& t : doc.at("policy")) policy.tables.push_back(matrix_from_json(t));
    auto features = td::FeatureMatrix::make(matrix_from_json(doc.at("features")));
    mdp.validate();
    policy.validate();
    return td::TdInstance{std::move(mdp), std::move(policy), std::move(features)};
} catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("instance: ") + e.what());
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct InstanceSource {
    enum class Kind { Generated, File } kind = Kind::Generated;
    td::RandomMdpParams params;
    std::string path;
    bool two_state_preset = false;
};

struct GossipOverride {
    enum class Kind { None, Ring, Broadcast, File } kind = Kind::None;
    double self_weight = 0.5;   // ring
    double beta        = 0.5;   // broadcast
    double listen_back = 0.02;  // broadcast
    std::string path;
};

struct ScheduleSpec {
    schedule::Kind kind = schedule::Kind::Type1;
    double alpha0       = 1.0;
    // When set, alpha0 is resolved as value / lambda_min of the instance.
    std::optional<double> alpha0_times_lambda_min;
    double c         = 1.0;
    double gamma_exp = 0.5;
    double eta       = 0.0;

    schedule::StepsizeSchedule resolve(double lambda_min) const {
        if (kind == schedule::Kind::Type1) {
            double a0 = alpha0_times_lambda_min ? *alpha0_times_lambda_min / lambda_min : alpha0;
            return schedule::StepsizeSchedule::type1(a0);
        }
        return schedule::StepsizeSchedule::type_gamma(c, gamma_exp, eta);
    }
};

struct DiagnosticToggles {
    bool psi        = false;
    bool chi        = false;
    bool delta      = false;
    bool gamma      = false;
    bool covariance = false;
};

struct InitSpec {
    enum class Kind { Zeros, Gaussian } kind = Kind::Zeros;
    double scale = 1.0;
};

struct ExperimentConfig {
    InstanceSource instance;
    GossipOverride gossip_override;
    ScheduleSpec schedule_spec;
    std::size_t horizon = 100000;
    std::vector<std::uint64_t> seeds{0};
    DiagnosticToggles diagnostics;
    std::size_t burn_in     = 0;  // 0 = auto
    double checkpoint_ratio = 1.05;
    std::size_t fit_window_lo = 1000;
    std::size_t fit_window_hi = 0;  // 0 = horizon
    InitSpec init;
    std::string output_dir = "out";
    bool force             = false;

    void validate() const {
        if (horizon < 1) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
        if (seeds.empty()) throw Error(ErrorCode::InvalidArgument, "need at least one seed");
        auto sorted = seeds;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw Error(ErrorCode::InvalidArgument, "seeds must be distinct");
        if (burn_in > horizon)
            throw Error(ErrorCode::InvalidArgument, "burn-in exceeds horizon");
        if (checkpoint_ratio <= 1.0)
            throw Error(ErrorCode::InvalidArgument, "checkpoint ratio must exceed 1");
    }
};

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    switch (c.instance.kind) {
        case InstanceSource::Kind::Generated:
            if (c.instance.two_state_preset) {
                j["instance"] = {{"kind", "two_state"}};
            } else {
                const auto& p = c.instance.params;
                j["instance"] = {{"kind", "generated"},
                                 {"seed", p.seed},
                                 {"states", p.num_states},
                                 {"agents", p.num_agents},
                                 {"actions_per_agent", p.actions_per_agent},
                                 {"feature_dim", p.feature_dim},
                                 {"density", p.density},
                                 {"reward_scale", p.reward_scale},
                                 {"shared_rewards", p.shared_rewards}};
            }
            break;
        case InstanceSource::Kind::File:
            j["instance"] = {{"kind", "file"}, {"path", c.instance.path}};
            break;
    }
    switch (c.gossip_override.kind) {
        case GossipOverride::Kind::None: break;
        case GossipOverride::Kind::Ring:
            j["gossip_override"] = {{"kind", "ring"}, {"self_weight", c.gossip_override.self_weight}};
            break;
        case GossipOverride::Kind::Broadcast:
            j["gossip_override"] = {{"kind", "broadcast"},
                                    {"beta", c.gossip_override.beta},
                                    {"listen_back", c.gossip_override.listen_back}};
            break;
        case GossipOverride::Kind::File:
            j["gossip_override"] = {{"kind", "file"}, {"path", c.gossip_override.path}};
            break;
    }
    if (c.schedule_spec.kind == schedule::Kind::Type1) {
        if (c.schedule_spec.alpha0_times_lambda_min)
            j["schedule"] = {{"kind", "type1"},
                             {"alpha0_times_lambda_min", *c.schedule_spec.alpha0_times_lambda_min}};
        else
            j["schedule"] = {{"kind", "type1"}, {"alpha0", c.schedule_spec.alpha0}};
    } else {
        j["schedule"] = {{"kind", "type_gamma"},
                         {"c", c.schedule_spec.c},
                         {"gamma_exp", c.schedule_spec.gamma_exp},
                         {"eta", c.schedule_spec.eta}};
    }
    j["horizon"]     = c.horizon;
    j["seeds"]       = c.seeds;
    j["diagnostics"] = {{"psi", c.diagnostics.psi},
                        {"chi", c.diagnostics.chi},
                        {"delta", c.diagnostics.delta},
                        {"gamma", c.diagnostics.gamma},
                        {"covariance", c.diagnostics.covariance}};
    j["burn_in"]          = c.burn_in;
    j["checkpoint_ratio"] = c.checkpoint_ratio;
    j["fit_window"]       = {c.fit_window_lo, c.fit_window_hi};
    j["init"] = c.init.kind == InitSpec::Kind::Zeros
                    ? json{{"kind", "zeros"}}
                    : json{{"kind", "gaussian"}, {"scale", c.init.scale}};
    j["output_dir"] = c.output_dir;
    j["force"]      = c.force;
    return j;
}

inline ExperimentConfig config_from_json(const json& full) try {
    // Accept both a bare config and the metadata wrapper written by `run`.
    const json& j = full.contains("config") && full.contains("artifact") ? full.at("config") : full;
    ExperimentConfig c;
    const json& inst = j.at("instance");
    std::string ikind = inst.at("kind").get<std::string>();
    if (ikind == "generated") {
        c.instance.kind            = InstanceSource::Kind::Generated;
        auto& p                    = c.instance.params;
        p.seed                     = inst.value("seed", 0ull);
        p.num_states               = inst.value("states", 5);
        p.num_agents               = inst.value("agents", 3);
        p.actions_per_agent        = inst.value("actions_per_agent", 2);
        p.feature_dim              = inst.value("feature_dim", 2);
        p.density                  = inst.value("density", 1.0);
        p.reward_scale             = inst.value("reward_scale", 1.0);
        p.shared_rewards           = inst.value("shared_rewards", false);
    } else if (ikind == "two_state") {
        c.instance.kind             = InstanceSource::Kind::Generated;
        c.instance.two_state_preset = true;
    } else if (ikind == "file") {
        c.instance.kind = InstanceSource::Kind::File;
        c.instance.path = inst.at("path").get<std::string>();
    } else {
        throw Error(ErrorCode::ParseError, "unknown instance kind '" + ikind + "'");
    }
    if (j.contains("gossip_override") && !j.at("gossip_override").is_null()) {
        const json& g     = j.at("gossip_override");
        std::string gkind = g.at("kind").get<std::string>();
        if (gkind == "ring") {
            c.gossip_override.kind        = GossipOverride::Kind::Ring;
            c.gossip_override.self_weight = g.value("self_weight", 0.5);
        } else if (gkind == "broadcast") {
            c.gossip_override.kind        = GossipOverride::Kind::Broadcast;
            c.gossip_override.beta        = g.value("beta", 0.5);
            c.gossip_override.listen_back = g.value("listen_back", 0.02);
        } else if (gkind == "file") {
            c.gossip_override.kind = GossipOverride::Kind::File;
            c.gossip_override.path = g.at("path").get<std::string>();
        } else {
            throw Error(ErrorCode::ParseError, "unknown gossip override '" + gkind + "'");
        }
    }
    const json& s     = j.at("schedule");
    std::string skind = s.at("kind").get<std::string>();
    if (skind == "type1") {
        c.schedule_spec.kind = schedule::Kind::Type1;
        if (s.contains("alpha0_times_lambda_min"))
            c.schedule_spec.alpha0_times_lambda_min = s.at("alpha0_times_lambda_min").get<double>();
        else
            c.schedule_spec.alpha0 = s.at("alpha0").get<double>();
    } else if (skind == "type_gamma") {
        c.schedule_spec.kind      = schedule::Kind::TypeGamma;
        c.schedule_spec.c         = s.value("c", 1.0);
        c.schedule_spec.gamma_exp = s.at("gamma_exp").get<double>();
        c.schedule_spec.eta       = s.value("eta", 0.0);
    } else {
        throw Error(ErrorCode::ParseError, "unknown schedule kind '" + skind + "'");
    }
    c.horizon = j.at("horizon").get<std::size_t>();
    c.seeds   = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("diagnostics")) {
        const json& d            = j.at("diagnostics");
        c.diagnostics.psi        = d.value("psi", false);
        c.diagnostics.chi        = d.value("chi", false);
        c.diagnostics.delta      = d.value("delta", false);
        c.diagnostics.gamma      = d.value("gamma", false);
        c.diagnostics.covariance = d.value("covariance", false);
    }
    c.burn_in          = j.value("burn_in", std::size_t{0});
    c.checkpoint_ratio = j.value("checkpoint_ratio", 1.05);
    if (j.contains("fit_window")) {
        c.fit_window_lo = j.at("fit_window")[0].get<std::size_t>();
        c.fit_window_hi = j.at("fit_window")[1].get<std::size_t>();
    }
    if (j.contains("init")) {
        const json& init = j.at("init");
        if (init.at("kind").get<std::string>() == "gaussian") {
            c.init.kind  = InitSpec::Kind::Gaussian;
            c.init.scale = init.value("scale", 1.0);
        }
    }
    c.output_dir = j.value("output_dir", std::string("out"));
    c.force      = j.value("force", false);
    c.validate();
    return c;
} catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("config: ") + e.what());
}

// ---------------------------------------------------------------------------
// Experiment assembly
// ---------------------------------------------------------------------------

struct BuiltExperiment {
    td::TdInstance instance;
    td::InducedChain chain;
    Vec pi;
    Mat q;
    td::TdGroundTruth ground_truth;
    schedule::StepsizeSchedule sched;
    td::AssumptionReport assumptions;
    bool gossip_certified = false;
    std::string instance_hash;
    json instance_doc;

    BuiltExperiment(td::TdInstance inst, td::InducedChain ch, Vec pi_in, Mat q_in,
                    td::TdGroundTruth gt, schedule::StepsizeSchedule s)
        : instance(std::move(inst)),
          chain(std::move(ch)),
          pi(std::move(pi_in)),
          q(std::move(q_in)),
          ground_truth(std::move(gt)),
          sched(std::move(s)) {}
};

inline td::TdInstance load_instance(const InstanceSource& src) {
    if (src.kind == InstanceSource::Kind::File) {
        std::ifstream in(src.path);
        if (!in) throw Error(ErrorCode::IoError, "cannot read instance file " + src.path);
        json doc = json::parse(in, nullptr, true, true);
        return instance_from_json(doc);
    }
    if (src.two_state_preset) return td::two_state_instance();
    return td::random_mdp(src.params);
}

inline Mat resolve_gossip(const GossipOverride& g, int m) {
    switch (g.kind) {
        case GossipOverride::Kind::Ring: return spectral::ring_gossip(m, g.self_weight);
        case GossipOverride::Kind::Broadcast:
            return spectral::broadcast_gossip(m, g.beta, g.listen_back);
        case GossipOverride::Kind::File: {
            std::ifstream in(g.path);
            if (!in) throw Error(ErrorCode::IoError, "cannot read gossip file " + g.path);
            return spectral::read_gossip_text(in);
        }
        case GossipOverride::Kind::None: break;
    }
    throw Error(ErrorCode::InvalidArgument, "no gossip override to resolve");
}

inline BuiltExperiment build_experiment(const ExperimentConfig& config) {
    auto instance = load_instance(config.instance);
    if (config.gossip_override.kind != GossipOverride::Kind::None)
        instance.mdp.gossip = resolve_gossip(config.gossip_override, instance.mdp.num_agents);

    auto chain = td::induce_chain(instance.mdp, instance.policy);
    // Lenient stationary solve: a --force run on an uncertifiable gossip matrix
    // (e.g. a pure broadcast hub) still gets the correct pi for a unichain.
    Vec pi      = spectral::stationary_of(instance.mdp.gossip);
    const int m = instance.mdp.num_agents;
    Mat q       = Mat::Identity(m, m) - Vec::Ones(m) * pi.transpose();
    auto gt = td::exact_moments(instance.mdp, instance.policy, chain, instance.features, pi);
    auto sched = config.schedule_spec.resolve(gt.a_mat.lambda_min());

    BuiltExperiment built(std::move(instance), std::move(chain), std::move(pi), std::move(q),
                          std::move(gt), std::move(sched));
    built.assumptions = td::verify_assumptions(built.instance, built.sched);
    try {
        spectral::validate_gossip(built.instance.mdp.gossip);
        built.gossip_certified = true;
    } catch (const Error&) {
        built.gossip_certified = false;
    }
    built.instance_doc  = instance_to_json(built.instance);
    built.instance_hash = hex64(fnv1a(built.instance_doc.dump()));
    return built;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 8> kStatFields = {
    "agreement", "disagreement", "total", "lil_ratio", "psi", "chi", "delta", "gamma"};

struct Stat {
    double q10 = std::numeric_limits<double>::quiet_NaN();
    double med = std::numeric_limits<double>::quiet_NaN();
    double q90 = std::numeric_limits<double>::quiet_NaN();
};

struct AggRow {
    std::size_t n = 0;
    double alpha_n = 0.0;
    double t_n     = 0.0;
    double lil_scale = std::numeric_limits<double>::quiet_NaN();
    std::array<Stat, 8> stats;
};

struct DyadicSup {
    std::size_t horizon = 0;
    double median_sup   = 0.0;
};

struct AggregateResult {
    std::vector<AggRow> rows;
    std::size_t burn_in = 0;
    std::optional<decomp::SlopeFit> agreement_fit;
    std::optional<decomp::SlopeFit> disagreement_fit;
    std::vector<DyadicSup> lil_sups;
    double lil_sup_growth_last_decade = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::uint64_t> excluded_seeds;
    std::optional<double> covariance_rel_change_median;
};

inline double quantile(std::vector<double> v, double p) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    double pos = p * static_cast<double>(v.size() - 1);
    auto lo    = static_cast<size_t>(std::floor(pos));
    auto hi    = static_cast<size_t>(std::ceil(pos));
    double f   = pos - static_cast<double>(lo);
    return (1.0 - f) * v[lo] + f * v[hi];
}

inline AggregateResult aggregate_traces(const std::vector<engine::RateTrace>& traces,
                                        const ExperimentConfig& config) {
    AggregateResult agg;
    std::vector<const engine::RateTrace*> ok;
    for (const auto& t : traces) {
        if (t.status == engine::RunStatus::Completed)
            ok.push_back(&t);
        else
            agg.excluded_seeds.push_back(t.seed);
    }
    if (ok.empty()) throw Error(ErrorCode::ConvergenceFailure, "all seeds diverged");

    agg.burn_in = config.burn_in > 0 ? config.burn_in : ok.front()->burn_in;
    const auto& grid = ok.front()->records;
    for (size_t r = 0; r < grid.size(); ++r) {
        AggRow row;
        row.n        = grid[r].n;
        row.alpha_n  = grid[r].alpha_n;
        row.t_n      = grid[r].t_n;
        row.lil_scale = grid[r].lil_scale;
        for (size_t f = 0; f < kStatFields.size(); ++f) {
            std::vector<double> vals;
            vals.reserve(ok.size());
            for (const auto* t : ok) {
                const auto& rec = t->records[r];
                double v = std::numeric_limits<double>::quiet_NaN();
                switch (f) {
                    case 0: v = rec.agreement_norm; break;
                    case 1: v = rec.disagreement_norm; break;
                    case 2: v = rec.total_norm; break;
                    case 3: v = rec.lil_ratio; break;
                    case 4: v = rec.psi_norm.value_or(v); break;
                    case 5: v = rec.chi_norm.value_or(v); break;
                    case 6: v = rec.delta_norm.value_or(v); break;
                    case 7: v = rec.gamma_norm.value_or(v); break;
                }
                if (std::isfinite(v)) vals.push_back(v);
            }
            if (!vals.empty()) {
                row.stats[f].q10 = quantile(vals, 0.10);
                row.stats[f].med = quantile(vals, 0.50);
                row.stats[f].q90 = quantile(vals, 0.90);
            }
        }
        agg.rows.push_back(std::move(row));
    }

    std::size_t window_hi = config.fit_window_hi > 0 ? config.fit_window_hi : config.horizon;
    auto collect = [&](size_t field) {
        std::vector<std::pair<std::size_t, double>> series;
        for (const auto& row : agg.rows) series.emplace_back(row.n, row.stats[field].med);
        return series;
    };
    try {
        agg.agreement_fit = decomp::slope_fit(collect(0), config.fit_window_lo, window_hi);
    } catch (const Error&) {
    }
    try {
        agg.disagreement_fit = decomp::slope_fit(collect(1), config.fit_window_lo, window_hi);
    } catch (const Error&) {
    }

    // Running sup of the lil ratio at dyadic horizons; the last-decade growth
    // is the boundedness proxy for the limsup statement.
    std::vector<std::size_t> dyads;
    for (std::size_t h = config.horizon; h > agg.burn_in * 4 && h > 100; h /= 2) dyads.push_back(h);
    std::reverse(dyads.begin(), dyads.end());
    for (std::size_t h : dyads) {
        std::vector<double> sups;
        for (const auto* t : ok) {
            double best = -1.0;
            for (const auto& rec : t->records)
                if (rec.n >= agg.burn_in && rec.n <= h && std::isfinite(rec.lil_ratio))
                    best = std::max(best, rec.lil_ratio);
            if (best >= 0.0) sups.push_back(best);
        }
        if (!sups.empty()) agg.lil_sups.push_back({h, quantile(sups, 0.5)});
    }
    {
        std::vector<double> lo_sups, hi_sups;
        std::size_t lo_h = config.horizon / 10;
        for (const auto* t : ok) {
            double lo = -1.0, hi = -1.0;
            for (const auto& rec : t->records) {
                if (rec.n < agg.burn_in || !std::isfinite(rec.lil_ratio)) continue;
                if (rec.n <= lo_h) lo = std::max(lo, rec.lil_ratio);
                hi = std::max(hi, rec.lil_ratio);
            }
            if (lo > 0.0 && hi > 0.0) {
                lo_sups.push_back(lo);
                hi_sups.push_back(hi);
            }
        }
        if (!lo_sups.empty()) {
            double lo_med = quantile(lo_sups, 0.5), hi_med = quantile(hi_sups, 0.5);
            agg.lil_sup_growth_last_decade = (hi_med - lo_med) / lo_med;
        }
    }

    std::vector<double> cov;
    for (const auto* t : ok)
        if (t->covariance_rel_change) cov.push_back(*t->covariance_rel_change);
    if (!cov.empty()) agg.covariance_rel_change_median = quantile(cov, 0.5);
    return agg;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

struct Provenance {
    std::string config_hash;
    std::string instance_hash;

    std::string comment_line() const {
        return "# " + std::string(kVersion) + " config=" + config_hash +
               " instance=" + instance_hash + "\n";
    }
};

inline std::string csv_cell(double v) {
    return std::isfinite(v) ? fmt17(v) : std::string();
}

inline std::string csv_cell(const std::optional<double>& v) {
    return v && std::isfinite(*v) ? fmt17(*v) : std::string();
}

inline void write_trace_csv(std::ostream& out, const engine::RateTrace& trace,
                            const Provenance& prov) {
    out << prov.comment_line();
    out << "# seed=" << trace.seed << " burn_in=" << trace.burn_in << " status="
        << (trace.status == engine::RunStatus::Completed ? "completed" : "diverged") << "\n";
    out << "n,alpha_n,t_n,lil_scale,agreement,disagreement,total,lil_ratio,psi,chi,delta,gamma\n";
    for (const auto& r : trace.records) {
        out << r.n << ',' << fmt17(r.alpha_n) << ',' << fmt17(r.t_n) << ',' << csv_cell(r.lil_scale)
            << ',' << fmt17(r.agreement_norm) << ',' << fmt17(r.disagreement_norm) << ','
            << fmt17(r.total_norm) << ',' << csv_cell(r.lil_ratio) << ',' << csv_cell(r.psi_norm)
            << ',' << csv_cell(r.chi_norm) << ',' << csv_cell(r.delta_norm) << ','
            << csv_cell(r.gamma_norm) << "\n";
    }
}

inline void write_aggregate_csv(std::ostream& out, const AggregateResult& agg,
                                const Provenance& prov) {
    out << prov.comment_line();
    out << "# burn_in=" << agg.burn_in << "\n";
    out << "n,alpha_n,t_n,lil_scale";
    for (const char* f : kStatFields)
        out << ',' << f << "_q10," << f << "_med," << f << "_q90";
    out << "\n";
    for (const auto& row : agg.rows) {
        out << row.n << ',' << fmt17(row.alpha_n) << ',' << fmt17(row.t_n) << ','
            << csv_cell(row.lil_scale);
        for (const auto& s : row.stats)
            out << ',' << csv_cell(s.q10) << ',' << csv_cell(s.med) << ',' << csv_cell(s.q90);
        out << "\n";
    }
}

// Minimal CSV reader for the files written above: '#' comment lines, header
// row, numeric cells (empty = NaN).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw Error(ErrorCode::ParseError, "missing CSV column '" + name + "'");
    }
};

inline CsvTable read_csv(std::istream& in) {
    CsvTable table;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (!have_header) {
            table.header = cells;
            have_header  = true;
            continue;
        }
        std::vector<double> row(table.header.size(), std::numeric_limits<double>::quiet_NaN());
        for (size_t i = 0; i < cells.size() && i < row.size(); ++i)
            if (!cells[i].empty()) row[i] = std::strtod(cells[i].c_str(), nullptr);
        table.rows.push_back(std::move(row));
    }
    if (!have_header) throw Error(ErrorCode::ParseError, "CSV has no header row");
    return table;
}

inline json aggregate_stats_to_json(const AggregateResult& agg) {
    json j;
    j["burn_in"] = agg.burn_in;
    auto fit_json = [](const std::optional<decomp::SlopeFit>& f) -> json {
        if (!f) return nullptr;
        return {{"slope", f->slope},
                {"intercept", f->intercept},
                {"r_squared", f->r_squared},
                {"window", {f->n_lo, f->n_hi}},
                {"points", f->points}};
    };
    j["agreement_fit"]    = fit_json(agg.agreement_fit);
    j["disagreement_fit"] = fit_json(agg.disagreement_fit);
    json sups             = json::array();
    for (const auto& d : agg.lil_sups) sups.push_back({d.horizon, d.median_sup});
    j["lil_sups"] = std::move(sups);
    if (std::isfinite(agg.lil_sup_growth_last_decade))
        j["lil_sup_growth_last_decade"] = agg.lil_sup_growth_last_decade;
    if (agg.covariance_rel_change_median)
        j["covariance_rel_change_median"] = *agg.covariance_rel_change_median;
    j["excluded_seeds"] = agg.excluded_seeds;
    return j;
}

// Rebuilds an AggregateResult from aggregate.csv plus the stats block stored
// in metadata.json, for the report/plot subcommands.
inline AggregateResult aggregate_from_files(std::istream& csv_in, const json& metadata) {
    AggregateResult agg;
    CsvTable table = read_csv(csv_in);
    int col_n = table.column("n"), col_a = table.column("alpha_n"), col_t = table.column("t_n");
    int col_scale = table.column("lil_scale");
    std::array<std::array<int, 3>, 8> cols{};
    for (size_t f = 0; f < kStatFields.size(); ++f) {
        cols[f][0] = table.column(std::string(kStatFields[f]) + "_q10");
        cols[f][1] = table.column(std::string(kStatFields[f]) + "_med");
        cols[f][2] = table.column(std::string(kStatFields[f]) + "_q90");
    }
    for (const auto& r : table.rows) {
        AggRow row;
        row.n        = static_cast<std::size_t>(r[static_cast<size_t>(col_n)]);
        row.alpha_n  = r[static_cast<size_t>(col_a)];
        row.t_n      = r[static_cast<size_t>(col_t)];
        row.lil_scale = r[static_cast<size_t>(col_scale)];
        for (size_t f = 0; f < kStatFields.size(); ++f) {
            row.stats[f].q10 = r[static_cast<size_t>(cols[f][0])];
            row.stats[f].med = r[static_cast<size_t>(cols[f][1])];
            row.stats[f].q90 = r[static_cast<size_t>(cols[f][2])];
        }
        agg.rows.push_back(std::move(row));
    }
    const json& stats = metadata.at("aggregate_stats");
    agg.burn_in       = stats.at("burn_in").get<std::size_t>();
    auto fit_from = [](const json& f) -> std::optional<decomp::SlopeFit> {
        if (f.is_null()) return std::nullopt;
        decomp::SlopeFit fit;
        fit.slope     = f.at("slope").get<double>();
        fit.intercept = f.at("intercept").get<double>();
        fit.r_squared = f.at("r_squared").get<double>();
        fit.n_lo      = f.at("window")[0].get<std::size_t>();
        fit.n_hi      = f.at("window")[1].get<std::size_t>();
        fit.points    = f.at("points").get<std::size_t>();
        return fit;
    };
    agg.agreement_fit    = fit_from(stats.at("agreement_fit"));
    agg.disagreement_fit = fit_from(stats.at("disagreement_fit"));
    for (const auto& d : stats.at("lil_sups"))
        agg.lil_sups.push_back({d[0].get<std::size_t>(), d[1].get<double>()});
    if (stats.contains("lil_sup_growth_last_decade"))
        agg.lil_sup_growth_last_decade = stats.at("lil_sup_growth_last_decade").get<double>();
    if (stats.contains("covariance_rel_change_median"))
        agg.covariance_rel_change_median = stats.at("covariance_rel_change_median").get<double>();
    if (stats.contains("excluded_seeds"))
        agg.excluded_seeds = stats.at("excluded_seeds").get<std::vector<std::uint64_t>>();
    return agg;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct ExperimentOutput {
    AggregateResult aggregate;
    json metadata;
    std::filesystem::path out_dir;
    std::vector<engine::RateTrace> traces;
};

inline ExperimentOutput run_experiment(const ExperimentConfig& config, unsigned jobs = 0) {
    config.validate();
    auto built = build_experiment(config);
    if (!built.assumptions.all_pass() && !config.force)
        throw Error(ErrorCode::AssumptionVeto,
                    "assumption verification failed (use force to run anyway)\n" +
                        built.assumptions.text());

    auto w_for_run = built.instance.mdp.gossip;
    // run_dsa consumes a certified gossip matrix; the forced path validates the
    // numeric properties it actually needs (row sums) and skips the rest.
    std::optional<spectral::GossipMatrix> certified;
    if (built.gossip_certified) certified = spectral::validate_gossip(w_for_run);

    auto drive = engine::DriveSpec::linear(built.ground_truth.a_mat, built.ground_truth.b_mat);
    auto noise = td::make_td_noise(built.instance, built.chain, built.ground_truth);
    engine::DecompContext ctx{built.pi, built.q, built.ground_truth.x_star};
    engine::RecorderSpec rec;
    rec.checkpoint_ratio = config.checkpoint_ratio;
    rec.track_psi        = config.diagnostics.psi;
    rec.track_chi        = config.diagnostics.chi;
    rec.track_delta      = config.diagnostics.delta;
    rec.track_gamma      = config.diagnostics.gamma;
    rec.track_covariance = config.diagnostics.covariance;

    const int m = built.instance.mdp.num_agents;
    const int d = built.instance.features.dim();

    std::vector<engine::RateTrace> traces(config.seeds.size());
    std::atomic<size_t> cursor{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = cursor.fetch_add(1);
            if (i >= config.seeds.size()) return;
            std::uint64_t seed = config.seeds[i];
            Mat x0             = Mat::Zero(m, d);
            if (config.init.kind == InitSpec::Kind::Gaussian) {
                Rng init_rng = Rng::substream(seed, 0xfeed);
                for (int r = 0; r < m; ++r)
                    for (int c2 = 0; c2 < d; ++c2) x0(r, c2) = config.init.scale * init_rng.gaussian();
            }
            if (certified) {
                traces[i] = engine::run_dsa(x0, *certified, drive, noise, built.sched,
                                            config.horizon, rec, ctx, seed);
            } else {
                // Forced run on an uncertified matrix: same loop, unchecked W.
                engine::DsaState state(x0, seed);
                schedule::TimeAccumulator acc;
                engine::RateTrace trace;
                trace.seed = seed;
                auto grid  = engine::checkpoint_grid(config.horizon, rec);
                size_t next = 0;
                bool burn_set = false;
                for (std::size_t k = 0; k < config.horizon; ++k) {
                    double alpha = built.sched.alpha_at_step(k);
                    if (!burn_set && acc.t_n + alpha > 2.718281828459045 && k >= 100) {
                        trace.burn_in = k;
                        burn_set      = true;
                    }
                    if (next < grid.size() && grid[next] == k) {
                        decomp::DecompRecord r;
                        r.n       = k;
                        r.alpha_n = alpha;
                        r.t_n     = acc.t_n;
                        auto parts = decomp::decompose(state.x, ctx.x_star, ctx.pi, ctx.q);
                        r.agreement_norm    = parts.agreement_norm;
                        r.disagreement_norm = parts.disagreement_norm;
                        r.total_norm        = parts.total_norm;
                        double t_next       = acc.t_n + alpha;
                        if (t_next > 1.0) {
                            r.lil_scale = std::sqrt(alpha * std::log(t_next));
                            r.lil_ratio = r.total_norm / r.lil_scale;
                        }
                        trace.records.push_back(r);
                        ++next;
                    }
                    Mat m_next = noise.sample(state.x, state.rng);
                    state.x = w_for_run * state.x + alpha * (drive.evaluate(state.x) + m_next);
                    if (!all_finite(state.x) || state.x.cwiseAbs().maxCoeff() > engine::kDivergenceGuard) {
                        trace.status      = engine::RunStatus::Diverged;
                        trace.diverged_at = k + 1;
                        break;
                    }
                    acc.advance(alpha);
                }
                if (!burn_set) trace.burn_in = config.horizon;
                trace.final_x = state.x;
                traces[i]     = std::move(trace);
            }
        }
    };
    unsigned n_jobs = jobs > 0 ? jobs : std::max(1u, std::thread::hardware_concurrency());
    n_jobs          = std::min<unsigned>(n_jobs, static_cast<unsigned>(config.seeds.size()));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    ExperimentOutput out;
    out.aggregate = aggregate_traces(traces, config);

    json config_doc = config_to_json(config);
    Provenance prov{hex64(fnv1a(config_doc.dump())), built.instance_hash};

    out.metadata             = json::object();
    out.metadata["artifact"] = std::string(kVersion);
    out.metadata["config"]   = config_doc;
    out.metadata["config_hash"]   = prov.config_hash;
    out.metadata["instance_hash"] = prov.instance_hash;
    out.metadata["resolved"]      = {
        {"lambda_min", built.ground_truth.a_mat.lambda_min()},
        {"schedule", built.sched.describe()},
        {"start_index", built.sched.start_index()},
        {"theoretical_exponents",
              {built.sched.theoretical_rate_exponents().first,
               built.sched.theoretical_rate_exponents().second}},
        {"burn_in", out.aggregate.burn_in},
        {"gossip_certified", built.gossip_certified},
        {"forced", config.force && !built.assumptions.all_pass()},
    };
    out.metadata["assumptions"]     = built.assumptions.text();
    out.metadata["excluded_seeds"]  = out.aggregate.excluded_seeds;
    out.metadata["aggregate_stats"] = aggregate_stats_to_json(out.aggregate);
    out.metadata["instance"]        = built.instance_doc;

    out.out_dir = config.output_dir;
    std::filesystem::create_directories(out.out_dir);
    for (size_t i = 0; i < traces.size(); ++i) {
        // Trace provenance hashes the config restricted to this seed, so a
        // trace's bytes depend only on its own seed (seed isolation); the full
        // config hash lives in aggregate.csv and metadata.json.
        json per_seed     = config_doc;
        per_seed["seeds"] = std::vector<std::uint64_t>{config.seeds[i]};
        Provenance seed_prov{hex64(fnv1a(per_seed.dump())), built.instance_hash};
        std::ofstream f(out.out_dir / ("trace_seed" + std::to_string(config.seeds[i]) + ".csv"));
        write_trace_csv(f, traces[i], seed_prov);
    }
    {
        std::ofstream f(out.out_dir / "aggregate.csv");
        write_aggregate_csv(f, out.aggregate, prov);
    }
    {
        std::ofstream f(out.out_dir / "metadata.json");
        f << out.metadata.dump(2) << "\n";
    }
    out.traces = std::move(traces);
    return out;
}

// ---------------------------------------------------------------------------
// Rates report & plot data
// ---------------------------------------------------------------------------

struct RatesReport {
    std::string text;
    std::string csv;
    bool all_pass = true;
};

inline RatesReport rates_report(const AggregateResult& agg,
                                const std::pair<double, double>& theory,
                                const Provenance& prov) {
    std::size_t usable = 0;
    for (const auto& row : agg.rows)
        if (row.n >= agg.burn_in) ++usable;
    if (usable < 10)
        throw Error(ErrorCode::TooFewPoints, "need >= 10 post-burn-in checkpoints");

    std::ostringstream text, csv;
    csv << prov.comment_line() << "metric,theoretical,fitted,tolerance,pass\n";
    bool all = true;
    auto line = [&](const std::string& name, double theo, double fitted, double tol) {
        bool pass = std::isfinite(fitted) && std::abs(fitted - theo) <= tol;
        all       = all && pass;
        text << "  " << name << ": fitted " << fitted << " vs theoretical " << theo << " (tol "
             << tol << ") -> " << (pass ? "PASS" : "FAIL") << "\n";
        csv << name << ',' << fmt17(theo) << ',' << fmt17(fitted) << ',' << fmt17(tol) << ','
            << (pass ? "1" : "0") << "\n";
        return pass;
    };

    text << "rate report (exponents on log-log medians, log factors ignored)\n";
    double agr = agg.agreement_fit ? agg.agreement_fit->slope
                                   : std::numeric_limits<double>::quiet_NaN();
    double dis = agg.disagreement_fit ? agg.disagreement_fit->slope
                                      : std::numeric_limits<double>::quiet_NaN();
    line("agreement_slope", theory.first, agr, kAgreementSlopeTol);
    line("disagreement_slope", theory.second, dis, kDisagreementSlopeTol);
    line("relative_rate", 0.0, dis - 2.0 * agr, kRelativeRateTol);

    text << "  lil running sup at dyadic horizons:\n";
    for (const auto& d : agg.lil_sups)
        text << "    n <= " << d.horizon << ": median sup = " << d.median_sup << "\n";
    if (std::isfinite(agg.lil_sup_growth_last_decade)) {
        bool pass = agg.lil_sup_growth_last_decade < kLilSupGrowthLimit;
        all       = all && pass;
        text << "  lil sup growth over last decade: " << 100.0 * agg.lil_sup_growth_last_decade
             << "% (limit " << 100.0 * kLilSupGrowthLimit << "%) -> " << (pass ? "PASS" : "FAIL")
             << "\n";
        csv << "lil_sup_growth,0," << fmt17(agg.lil_sup_growth_last_decade) << ','
            << fmt17(kLilSupGrowthLimit) << ',' << (pass ? "1" : "0") << "\n";
    }
    if (agg.covariance_rel_change_median)
        text << "  pi-noise covariance change over last decade: "
             << 100.0 * *agg.covariance_rel_change_median << "% (stabilization diagnostic)\n";
    if (!agg.excluded_seeds.empty()) {
        text << "  WARNING: excluded diverged seeds:";
        for (auto s : agg.excluded_seeds) text << ' ' << s;
        text << "\n";
    }
    text << (all ? "ALL PASS\n" : "FAILURES PRESENT\n");
    return RatesReport{text.str(), csv.str(), all};
}

// Plot-ready columns: log-log medians plus straight theory lines anchored at
// the first post-burn-in checkpoint.
inline std::string plot_data_csv(const AggregateResult& agg,
                                 const std::pair<double, double>& theory, const Provenance& prov) {
    std::ostringstream out;
    out << prov.comment_line();
    out << "ln_n,ln_agreement_median,ln_disagreement_median,lil_ratio_median,"
           "theory_agreement_line,theory_disagreement_line\n";
    double anchor_ln_n = std::numeric_limits<double>::quiet_NaN();
    double anchor_agr = 0.0, anchor_dis = 0.0;
    for (const auto& row : agg.rows) {
        if (row.n < std::max<std::size_t>(agg.burn_in, 1)) continue;
        double agr = row.stats[0].med, dis = row.stats[1].med;
        if (!(agr > 0.0) || !(dis > 0.0)) continue;
        double ln_n = std::log(static_cast<double>(row.n));
        if (!std::isfinite(anchor_ln_n)) {
            anchor_ln_n = ln_n;
            anchor_agr  = std::log(agr);
            anchor_dis  = std::log(dis);
        }
        out << fmt17(ln_n) << ',' << fmt17(std::log(agr)) << ',' << fmt17(std::log(dis)) << ','
            << csv_cell(row.stats[3].med) << ','
            << fmt17(anchor_agr + theory.first * (ln_n - anchor_ln_n)) << ','
            << fmt17(anchor_dis + theory.second * (ln_n - anchor_ln_n)) << "\n";
    }
    return out.str();
}

}  // namespace dsalab::harness
