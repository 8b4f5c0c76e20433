#include "opfs/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace opfs {

ConfusionCounts accumulate_confusion(const std::vector<std::vector<std::uint8_t>>& predicted,
                                     const std::vector<std::vector<std::uint8_t>>& actual) {
    if (predicted.size() != actual.size())
        throw DataError("accumulate_confusion: row count mismatch");
    ConfusionCounts c;
    for (size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i].size() != actual[i].size())
            throw DataError("accumulate_confusion: row " + std::to_string(i) +
                            " width mismatch");
        for (size_t j = 0; j < predicted[i].size(); ++j) {
            const bool p = predicted[i][j] != 0, a = actual[i][j] != 0;
            if (p && a)
                ++c.tp;
            else if (!p && !a)
                ++c.tn;
            else if (p)
                ++c.fp;
            else
                ++c.fn;
        }
    }
    return c;
}

ConfusionCounts merge(const ConfusionCounts& a, const ConfusionCounts& b) {
    return ConfusionCounts{a.tp + b.tp, a.tn + b.tn, a.fp + b.fp, a.fn + b.fn};
}

namespace {

// Primary = num/den when den > 0; complement = 1 - primary (exact pairing).
void ratio_pair(std::uint64_t num, std::uint64_t den, std::optional<double>& primary,
                std::optional<double>& complement) {
    if (den == 0) return;
    const double x = static_cast<double>(num) / static_cast<double>(den);
    primary = x;
    complement = 1.0 - x;
}

} // namespace

MetricSet compute_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw DataError("compute_metrics: all counts are zero");
    MetricSet m;
    ratio_pair(c.tp + c.tn, c.total(), m.accuracy, m.misclassification);
    ratio_pair(c.tp, c.tp + c.fn, m.tpr, m.fnr);
    ratio_pair(c.tn, c.tn + c.fp, m.tnr, m.fpr);
    ratio_pair(c.tp, c.tp + c.fp, m.ppv, m.fdr);
    ratio_pair(c.tn, c.tn + c.fn, m.npv, m.for_);
    return m;
}

double optimality_gap(double f_truncated, double f_original) {
    if (!(f_original > 0))
        throw DataError("optimality_gap: reference objective must be positive");
    return std::abs(f_truncated - f_original) / f_original * 100.0;
}

double median(std::vector<double> values) {
    if (values.empty()) throw DataError("median: empty sample");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

TimingReport timing_compare(const std::vector<std::pair<SolveStats, SolveStats>>& runs) {
    if (runs.empty()) throw DataError("timing_compare: no paired runs");
    TimingReport r;
    r.scenarios = static_cast<int>(runs.size());
    for (const auto& [full, trunc] : runs) {
        r.mean_iter_full += full.iterations;
        r.mean_iter_trunc += trunc.iterations;
        r.mean_time_full += full.wall_time_s;
        r.mean_time_trunc += trunc.wall_time_s;
        r.mean_feval_full += full.feval;
        r.mean_feval_trunc += trunc.feval;
    }
    const double n = static_cast<double>(runs.size());
    r.mean_iter_full /= n;
    r.mean_iter_trunc /= n;
    r.mean_time_full /= n;
    r.mean_time_trunc /= n;
    r.mean_feval_full /= n;
    r.mean_feval_trunc /= n;
    r.time_saving_pct =
        r.mean_time_full > 0 ? (1.0 - r.mean_time_trunc / r.mean_time_full) * 100.0 : 0.0;
    return r;
}

GapReport make_gap_report(std::vector<GapScenario> scenarios) {
    GapReport g;
    g.scenarios = std::move(scenarios);
    if (g.scenarios.empty()) return g;
    double sum = 0, sum_nf = 0;
    int n_nf = 0;
    for (const GapScenario& s : g.scenarios) {
        sum += s.gap_pct;
        if (!s.fallback_used) {
            sum_nf += s.gap_pct;
            ++n_nf;
        }
    }
    g.mean_gap_pct = sum / static_cast<double>(g.scenarios.size());
    if (n_nf > 0) g.mean_gap_no_fallback_pct = sum_nf / n_nf;
    return g;
}

} // namespace opfs
