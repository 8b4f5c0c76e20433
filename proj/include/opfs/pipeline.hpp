#pragma once
// Orchestration: two-dataset training, predict -> truncate -> solve with a
// feasibility fallback, and evaluation over a held-out test dataset.
//
// Feature modes: `net_injection` trains the classifiers on net injections
// predicted by the regressor (generation minus demand on the n_b' index set);
// `demand_only` trains them directly on the demand vector (the baseline the
// comparison mode measures against).
//
// Feasibility fallback (iterative_inclusion): solve the truncated problem,
// check the solution against the FULL constraint set, add every violated
// aggregated label (bus or branch), and re-solve from flat start, up to a
// round cap.  The returned solution is only reported feasible when no
// violations remain, so a broken classifier can cost rounds but never yields
// an unflagged infeasible result.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "opfs/case_io.hpp"
#include "opfs/metrics.hpp"
#include "opfs/mlp.hpp"
#include "opfs/opf.hpp"
#include "opfs/scenario.hpp"

namespace opfs {

enum class FeatureMode { net_injection, demand_only };
std::string to_string(FeatureMode m);
FeatureMode feature_mode_from_string(const std::string& s);

enum class FallbackMode { iterative_inclusion, warm_start_full, none };
std::string to_string(FallbackMode m);
FallbackMode fallback_mode_from_string(const std::string& s);

// Content hash over a dataset's matrices, labels, and bookkeeping.
std::string dataset_hash(const Dataset& ds);

struct TrainedModels {
    std::optional<TrainedMlp> regressor; // absent in demand_only mode
    TrainedMlp classifier_v;             // per-bus voltage-activity labels
    TrainedMlp classifier_l;             // per-branch flow-activity labels
    std::string case_hash_;
    FeatureMode feature_mode = FeatureMode::net_injection;
    std::string dataset1_hash, dataset2_hash;
    bool leakage = false; // dataset2 content equals dataset1 content
};

struct TrainAllOutput {
    TrainedModels models;
    TrainReport regressor_report; // empty in demand_only mode
    TrainReport v_report, l_report;
};

// Classifier feature rows predicted from demand rows via the regressor:
// row i = net_injection(demand, regressor(demand)) on the n_b' index set.
Eigen::MatrixXd ni_features(const Case& c, const TrainedMlp& regressor,
                            const Eigen::MatrixXd& d_rows, bool parallel = true);

// Trains the regressor on dataset1 (D -> G), applies it to dataset2's D to
// form predicted net injections, then trains both classifiers on those
// features (or on dataset2's D directly in demand_only mode).  Per-model
// seeds are derived from `seed`; the seed fields inside the configs are
// ignored.  Identical dataset contents set the leakage flag (warning, not an
// error).  Throws DataError when a dataset's case hash does not match `c`.
TrainAllOutput train_all(const Case& c, const Dataset& ds1, const Dataset& ds2,
                         const TrainConfig& regressor_cfg, const TrainConfig& classifier_cfg,
                         FeatureMode mode, std::uint64_t seed);

struct Prediction {
    VecR g_tilde;  // 2|n_g| predicted dispatch, p.u. (empty in demand_only)
    VecR ni_tilde; // 2|n_b'| predicted net injection (empty in demand_only)
    VecR v_scores, l_scores; // raw classifier outputs, clamped into (0,1)
    std::vector<std::uint8_t> v_active_pred, l_active_pred; // score >= threshold
};

Prediction predict_active(const Case& c, const TrainedModels& models, const DemandVector& d,
                          double threshold = 0.5, bool parallel = true);

// voltage_buses = predicted-active buses; flow_branches = predicted-active
// branches that actually carry a limit (rate_a > 0); chi always retained.
ConstraintSet build_truncated(const Case& c, const Prediction& pred);

struct FallbackResult {
    OpfSolution first_solution; // raw truncated solve
    OpfSolution final_solution; // what the pipeline returns
    int rounds = 0;             // inclusion rounds performed
    bool feasible_full = false; // final solution passes the full-set check
    bool flagged = false;       // round cap exhausted (or no inclusion progress)
    ConstraintSet final_cs;
};

// Throws SolverError when any required solve fails to converge.
FallbackResult solve_with_fallback(const Case& c, const ConstraintSet& cs, FallbackMode mode,
                                   const SolverConfig& solver = {}, int round_cap = 5);

struct EvalOptions {
    double threshold = 0.5;
    FallbackMode fallback = FallbackMode::iterative_inclusion;
    int round_cap = 5;
    int timing_scenarios = 50; // first N test rows timed
    int timing_repeats = 5;    // solves per timed row; medians reported
    int workers = 0;           // accuracy/gap phase parallelism, 0 = all cores
    SolverConfig solver;
    double eps_active = 1e-5;
    bool parallel_mlp = true;
};

struct ScenarioEval {
    int scenario = 0; // row index within the test dataset (kept order)
    Prediction pred;
    std::vector<std::uint8_t> v_actual, l_actual;
    double f_full = 0, f_final = 0; // $/h
    GapScenario gap;
};

struct EvalResult {
    ConfusionCounts confusion_v, confusion_l;
    MetricSet metrics_v, metrics_l;
    GapReport gaps;
    TimingReport timing;
    std::vector<std::pair<SolveStats, SolveStats>> timing_rows; // per timed row
    std::vector<ScenarioEval> scenarios;
};

// Two phases: (A) parallel over test rows — full solve for the reference
// objective, prediction, truncated solve with fallback, confusion/gap
// bookkeeping; (B) serial timing over the first timing_scenarios rows so the
// medians are not distorted by concurrent solves.
EvalResult evaluate_models(const Case& c, const TrainedModels& models, const Dataset& test,
                           const EvalOptions& opts);

// Writes models/, predictions.csv, gaps.csv, timing.csv, confusion.json,
// report.txt, manifest.json under run_dir.  Everything except wall-time
// fields (timing.csv, the timing section of report.txt) is byte-reproducible.
void write_eval_artifacts(const std::string& run_dir, const Case& c,
                          const TrainedModels& models, const EvalResult& r,
                          const EvalOptions& opts, const std::string& test_hash);

std::string render_report(const EvalResult& r);

// Model directory: regressor.json (when present), classifier_v.json,
// classifier_l.json, manifest.json.
void save_models(const std::string& dir, const TrainedModels& models);
// Validates the stored case hash against `c` and the model widths against the
// case dimensions; DataError on any mismatch.
TrainedModels load_models(const std::string& dir, const Case& c);

} // namespace opfs
