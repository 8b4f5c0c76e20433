#pragma once
// Confusion-matrix statistics, optimality gap, and timing comparison.
//
// The five complementary pairs in MetricSet (accuracy/misclassification,
// tpr/fnr, tnr/fpr, ppv/fdr, npv/for_) hold exactly in double precision: the
// primary of each pair is the direct quotient of the counts and the complement
// is derived as 1 - primary, for which x + (1 - x) rounds to exactly 1 for any
// x in [0, 1].  Indices with a zero denominator are reported as absent
// (std::nullopt), never coerced to 0.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "opfs/common.hpp"

namespace opfs {

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::uint64_t total() const { return tp + tn + fp + fn; }
};

// Elementwise tally; rows are scenarios, columns labels.  Active = 1.
ConfusionCounts accumulate_confusion(const std::vector<std::vector<std::uint8_t>>& predicted,
                                     const std::vector<std::vector<std::uint8_t>>& actual);

// Associative/commutative merge of partial tallies from parallel workers.
ConfusionCounts merge(const ConfusionCounts& a, const ConfusionCounts& b);

struct MetricSet {
    std::optional<double> accuracy, misclassification;
    std::optional<double> tpr, fnr; // recall / miss rate
    std::optional<double> tnr, fpr; // specificity / fall-out
    std::optional<double> ppv, fdr; // precision / false discovery
    std::optional<double> npv, for_; // negative predictive value / false omission
};

// Throws DataError when all counts are zero.
MetricSet compute_metrics(const ConfusionCounts& c);

// |f_truncated - f_original| / f_original * 100.  Throws DataError unless
// f_original > 0.
double optimality_gap(double f_truncated, double f_original);

// Median of a nonempty sample (average of the two middle order statistics for
// even sizes).  Throws DataError on empty input.
double median(std::vector<double> values);

struct SolveStats {
    double iterations = 0;
    double wall_time_s = 0;
    double feval = 0;
};

struct TimingReport {
    double mean_iter_full = 0, mean_iter_trunc = 0;
    double mean_time_full = 0, mean_time_trunc = 0;
    double mean_feval_full = 0, mean_feval_trunc = 0;
    double time_saving_pct = 0; // (1 - mean_time_trunc / mean_time_full) * 100
    int scenarios = 0;
};

// runs[i] = (full-problem stats, truncated-problem stats) for one scenario,
// each already reduced (e.g. median over repeats).  Throws DataError on empty.
TimingReport timing_compare(const std::vector<std::pair<SolveStats, SolveStats>>& runs);

struct GapScenario {
    int scenario = 0;      // dataset row index
    double gap_pct = 0;    // against the full-OPF objective
    bool fallback_used = false;
    int rounds = 0;        // inclusion rounds performed
    bool feasible_full = false;
    bool flagged = false;  // round cap exhausted with violations remaining
};

struct GapReport {
    std::vector<GapScenario> scenarios;
    double mean_gap_pct = 0;
    // Mean over the subset that needed no fallback (absent if that set is empty).
    std::optional<double> mean_gap_no_fallback_pct;
};

GapReport make_gap_report(std::vector<GapScenario> scenarios);

} // namespace opfs
