#include "opfs/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>

#include <json.hpp>
#include <omp.h>

#include "opfs/textio.hpp"

namespace opfs {

using Eigen::Index;
using Eigen::MatrixXd;

std::string to_string(FeatureMode m) {
    return m == FeatureMode::net_injection ? "net_injection" : "demand_only";
}

FeatureMode feature_mode_from_string(const std::string& s) {
    if (s == "net_injection") return FeatureMode::net_injection;
    if (s == "demand_only") return FeatureMode::demand_only;
    throw DataError("unknown feature mode '" + s + "'");
}

std::string to_string(FallbackMode m) {
    switch (m) {
        case FallbackMode::iterative_inclusion: return "iterative_inclusion";
        case FallbackMode::warm_start_full: return "warm_start_full";
        default: return "none";
    }
}

FallbackMode fallback_mode_from_string(const std::string& s) {
    if (s == "iterative_inclusion") return FallbackMode::iterative_inclusion;
    if (s == "warm_start_full") return FallbackMode::warm_start_full;
    if (s == "none") return FallbackMode::none;
    throw DataError("unknown fallback mode '" + s + "'");
}

std::string dataset_hash(const Dataset& ds) {
    std::string buf;
    buf.reserve(static_cast<size_t>((ds.D.size() + ds.G.size() + ds.NI.size()) * 25 + 1024));
    buf += ds.case_hash_;
    buf += '\n';
    buf += std::to_string(ds.requested);
    for (int k : ds.kept_indices) {
        buf += ',';
        buf += std::to_string(k);
    }
    buf += '\n';
    const auto add_matrix = [&buf](const MatrixXd& m) {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) {
                buf += fmt17(m(i, j));
                buf += ',';
            }
        buf += '\n';
    };
    add_matrix(ds.D);
    add_matrix(ds.G);
    add_matrix(ds.NI);
    const auto add_labels = [&buf](const std::vector<std::vector<std::uint8_t>>& lab) {
        for (const auto& row : lab)
            for (std::uint8_t v : row) buf += static_cast<char>('0' + (v != 0));
        buf += '\n';
    };
    add_labels(ds.labels_v);
    add_labels(ds.labels_l);
    return fnv1a_hex(buf);
}

MatrixXd ni_features(const Case& c, const TrainedMlp& regressor, const MatrixXd& d_rows,
                     bool parallel) {
    if (regressor.task != Task::regression)
        throw DataError("ni_features: the regressor artifact has the wrong task");
    const MatrixXd g = predict(regressor, d_rows, parallel); // n x 2|n_g|
    if (g.cols() != 2 * c.ng()) throw DataError("ni_features: regressor output width mismatch");
    MatrixXd out(d_rows.rows(), 2 * static_cast<Index>(c.n_b_prime.size()));
    for (Index i = 0; i < d_rows.rows(); ++i) {
        const DemandVector dv = unstack_demand(c, d_rows.row(i).transpose());
        const VecR pg = g.row(i).head(c.ng()).transpose();
        const VecR qg = g.row(i).tail(c.ng()).transpose();
        out.row(i) =
            net_injection(demand_on_nbp(c, dv), generation_on_nbp(c, pg, qg)).transpose();
    }
    return out;
}

namespace {

MatrixXd labels_matrix(const std::vector<std::vector<std::uint8_t>>& lab, Index width,
                       const char* what) {
    MatrixXd m(static_cast<Index>(lab.size()), width);
    for (size_t i = 0; i < lab.size(); ++i) {
        if (static_cast<Index>(lab[i].size()) != width)
            throw DataError(std::string(what) + ": label row width mismatch");
        for (Index j = 0; j < width; ++j) m(static_cast<Index>(i), j) = lab[i][j];
    }
    return m;
}

} // namespace

TrainAllOutput train_all(const Case& c, const Dataset& ds1, const Dataset& ds2,
                         const TrainConfig& regressor_cfg, const TrainConfig& classifier_cfg,
                         FeatureMode mode, std::uint64_t seed) {
    const std::string ch = case_hash(c);
    if (ds1.case_hash_ != ch || ds2.case_hash_ != ch)
        throw DataError("train_all: dataset was generated for a different case");
    if (ds1.D.rows() == 0 || ds2.D.rows() == 0) throw DataError("train_all: empty dataset");

    TrainAllOutput out;
    out.models.case_hash_ = ch;
    out.models.feature_mode = mode;
    out.models.dataset1_hash = dataset_hash(ds1);
    out.models.dataset2_hash = dataset_hash(ds2);
    out.models.leakage = out.models.dataset1_hash == out.models.dataset2_hash;

    Rng root(seed);
    MatrixXd features;
    if (mode == FeatureMode::net_injection) {
        TrainConfig rc = regressor_cfg;
        rc.task = Task::regression;
        rc.seed = root.split("regressor").next_u64();
        TrainOutput t = train(ds1.D, ds1.G, rc);
        out.models.regressor = std::move(t.model);
        out.regressor_report = std::move(t.report);
        features = ni_features(c, *out.models.regressor, ds2.D, classifier_cfg.parallel);
    } else {
        features = ds2.D;
    }

    const MatrixXd yv = labels_matrix(ds2.labels_v, c.nb(), "train_all voltage labels");
    const MatrixXd yl = labels_matrix(ds2.labels_l, c.nl(), "train_all branch labels");

    TrainConfig cv = classifier_cfg;
    cv.task = Task::classification;
    cv.seed = root.split("classifier_v").next_u64();
    TrainOutput tv = train(features, yv, cv);
    out.models.classifier_v = std::move(tv.model);
    out.v_report = std::move(tv.report);

    TrainConfig cl = classifier_cfg;
    cl.task = Task::classification;
    cl.seed = root.split("classifier_l").next_u64();
    TrainOutput tl = train(features, yl, cl);
    out.models.classifier_l = std::move(tl.model);
    out.l_report = std::move(tl.report);
    return out;
}

Prediction predict_active(const Case& c, const TrainedModels& models, const DemandVector& d,
                          double threshold, bool parallel) {
    const VecR stacked = stack_demand(d);
    Prediction p;
    MatrixXd feat;
    if (models.feature_mode == FeatureMode::net_injection) {
        if (!models.regressor)
            throw DataError("predict_active: net_injection models lack a regressor");
        MatrixXd drow(1, stacked.size());
        drow.row(0) = stacked.transpose();
        const MatrixXd g = predict(*models.regressor, drow, parallel);
        p.g_tilde = g.row(0).transpose();
        const VecR pg = p.g_tilde.head(c.ng());
        const VecR qg = p.g_tilde.tail(c.ng());
        p.ni_tilde = net_injection(demand_on_nbp(c, d), generation_on_nbp(c, pg, qg));
        feat.resize(1, p.ni_tilde.size());
        feat.row(0) = p.ni_tilde.transpose();
    } else {
        feat.resize(1, stacked.size());
        feat.row(0) = stacked.transpose();
    }
    const MatrixXd sv = predict(models.classifier_v, feat, parallel);
    const MatrixXd sl = predict(models.classifier_l, feat, parallel);
    if (sv.cols() != c.nb() || sl.cols() != c.nl())
        throw DataError("predict_active: classifier output width mismatch");
    p.v_scores = sv.row(0).transpose();
    p.l_scores = sl.row(0).transpose();
    p.v_active_pred.resize(static_cast<size_t>(c.nb()));
    for (int i = 0; i < c.nb(); ++i) p.v_active_pred[i] = p.v_scores[i] >= threshold ? 1 : 0;
    p.l_active_pred.resize(static_cast<size_t>(c.nl()));
    for (int l = 0; l < c.nl(); ++l) p.l_active_pred[l] = p.l_scores[l] >= threshold ? 1 : 0;
    return p;
}

ConstraintSet build_truncated(const Case& c, const Prediction& pred) {
    if (static_cast<int>(pred.v_active_pred.size()) != c.nb() ||
        static_cast<int>(pred.l_active_pred.size()) != c.nl())
        throw DataError("build_truncated: prediction widths do not match the case");
    std::vector<int> vb, fb;
    for (int i = 0; i < c.nb(); ++i)
        if (pred.v_active_pred[i]) vb.push_back(i);
    for (int l = 0; l < c.nl(); ++l)
        if (pred.l_active_pred[l] && c.branches[l].rate_a > 0) fb.push_back(l);
    return make_constraint_set(c, std::move(vb), std::move(fb));
}

FallbackResult solve_with_fallback(const Case& c, const ConstraintSet& cs, FallbackMode mode,
                                   const SolverConfig& solver, int round_cap) {
    FallbackResult r;
    r.final_cs = cs;
    r.first_solution = solve_opf(c, cs, std::nullopt, solver);
    if (r.first_solution.status != SolveStatus::converged)
        throw SolverError(std::string("truncated solve failed: ") +
                          to_string(r.first_solution.status));
    const ConstraintSet full = full_constraint_set(c);

    if (mode == FallbackMode::none) {
        r.final_solution = r.first_solution;
        r.feasible_full =
            check_violations(c, r.final_solution.vars, full, solver.feastol).empty();
        return r;
    }

    if (mode == FallbackMode::warm_start_full) {
        r.final_solution = solve_opf(c, full, r.first_solution.vars, solver);
        if (r.final_solution.status != SolveStatus::converged)
            throw SolverError(std::string("warm-started full solve failed: ") +
                              to_string(r.final_solution.status));
        r.final_cs = full;
        r.feasible_full =
            check_violations(c, r.final_solution.vars, full, solver.feastol).empty();
        return r;
    }

    // iterative_inclusion
    ConstraintSet cur = cs;
    OpfSolution sol = r.first_solution;
    for (;;) {
        const std::vector<Violation> viol =
            check_violations(c, sol.vars, full, solver.feastol);
        if (viol.empty()) {
            r.feasible_full = true;
            break;
        }
        if (r.rounds >= round_cap) {
            r.flagged = true;
            break;
        }
        std::vector<int> vb = cur.voltage_buses, fb = cur.flow_branches;
        for (const Violation& v : viol) {
            if (v.kind == Violation::Kind::vmax || v.kind == Violation::Kind::vmin)
                vb.push_back(v.index);
            else
                fb.push_back(v.index);
        }
        const ConstraintSet next = make_constraint_set(c, std::move(vb), std::move(fb));
        if (next.voltage_buses.size() == cur.voltage_buses.size() &&
            next.flow_branches.size() == cur.flow_branches.size()) {
            // Violations only on already-included labels (tolerance-level):
            // inclusion cannot make progress, so flag instead of spinning.
            r.flagged = true;
            break;
        }
        cur = next;
        ++r.rounds;
        sol = solve_opf(c, cur, std::nullopt, solver); // flat start by design
        if (sol.status != SolveStatus::converged)
            throw SolverError(std::string("inclusion round ") + std::to_string(r.rounds) +
                              " solve failed: " + to_string(sol.status));
    }
    r.final_solution = std::move(sol);
    r.final_cs = std::move(cur);
    return r;
}

EvalResult evaluate_models(const Case& c, const TrainedModels& models, const Dataset& test,
                           const EvalOptions& opts) {
    if (models.case_hash_ != case_hash(c))
        throw DataError("evaluate: models were trained for a different case");
    if (test.case_hash_ != models.case_hash_)
        throw DataError("evaluate: test dataset does not match the models' case");
    const Index n = test.D.rows();
    if (n == 0) throw DataError("evaluate: empty test set");
    if (static_cast<Index>(test.labels_v.size()) != n ||
        static_cast<Index>(test.labels_l.size()) != n)
        throw DataError("evaluate: test dataset label rows inconsistent with D");

    EvalResult r;
    r.scenarios.resize(static_cast<size_t>(n));
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    const int nthreads = opts.workers > 0 ? opts.workers : omp_get_max_threads();

#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
    for (Index i = 0; i < n; ++i) {
        try {
            ScenarioEval& sev = r.scenarios[static_cast<size_t>(i)];
            sev.scenario = static_cast<int>(i);
            const DemandVector dv = unstack_demand(c, test.D.row(i).transpose());
            const Case sc = apply_demand(c, dv);
            const OpfSolution full_sol =
                solve_opf(sc, full_constraint_set(sc), std::nullopt, opts.solver);
            if (full_sol.status != SolveStatus::converged)
                throw SolverError("full OPF failed on test row " + std::to_string(i) + ": " +
                                  to_string(full_sol.status));
            sev.f_full = full_sol.objective;
            sev.pred = predict_active(c, models, dv, opts.threshold, opts.parallel_mlp);
            const ConstraintSet cs = build_truncated(sc, sev.pred);
            const FallbackResult fb =
                solve_with_fallback(sc, cs, opts.fallback, opts.solver, opts.round_cap);
            sev.f_final = fb.final_solution.objective;
            sev.v_actual = test.labels_v[static_cast<size_t>(i)];
            sev.l_actual = test.labels_l[static_cast<size_t>(i)];
            sev.gap.scenario = static_cast<int>(i);
            sev.gap.gap_pct = optimality_gap(sev.f_final, sev.f_full);
            sev.gap.fallback_used = fb.rounds > 0;
            sev.gap.rounds = fb.rounds;
            sev.gap.feasible_full = fb.feasible_full;
            sev.gap.flagged = fb.flagged;
        } catch (...) {
            errors[static_cast<size_t>(i)] = std::current_exception();
        }
    }
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);

    std::vector<std::vector<std::uint8_t>> pv, av, pl, al;
    for (const ScenarioEval& sev : r.scenarios) {
        pv.push_back(sev.pred.v_active_pred);
        av.push_back(sev.v_actual);
        pl.push_back(sev.pred.l_active_pred);
        al.push_back(sev.l_actual);
    }
    r.confusion_v = accumulate_confusion(pv, av);
    r.confusion_l = accumulate_confusion(pl, al);
    r.metrics_v = compute_metrics(r.confusion_v);
    r.metrics_l = compute_metrics(r.confusion_l);
    std::vector<GapScenario> gaps;
    for (const ScenarioEval& sev : r.scenarios) gaps.push_back(sev.gap);
    r.gaps = make_gap_report(std::move(gaps));

    // Serial timing phase: medians must not be distorted by concurrent solves.
    const Index nt = std::min<Index>(std::max(opts.timing_scenarios, 0), n);
    const int repeats = std::max(opts.timing_repeats, 1);
    for (Index i = 0; i < nt; ++i) {
        const DemandVector dv = unstack_demand(c, test.D.row(i).transpose());
        const Case sc = apply_demand(c, dv);
        const ConstraintSet full = full_constraint_set(sc);
        const ConstraintSet cs = build_truncated(sc, r.scenarios[static_cast<size_t>(i)].pred);
        std::vector<double> tf, tt;
        OpfSolution sf, st;
        for (int rep = 0; rep < repeats; ++rep) {
            sf = solve_opf(sc, full, std::nullopt, opts.solver);
            st = solve_opf(sc, cs, std::nullopt, opts.solver);
            tf.push_back(sf.wall_time);
            tt.push_back(st.wall_time);
        }
        r.timing_rows.emplace_back(
            SolveStats{static_cast<double>(sf.iterations), median(tf),
                       static_cast<double>(sf.feval_count)},
            SolveStats{static_cast<double>(st.iterations), median(tt),
                       static_cast<double>(st.feval_count)});
    }
    if (!r.timing_rows.empty()) r.timing = timing_compare(r.timing_rows);
    return r;
}

namespace {

std::string pct(const std::optional<double>& v) {
    if (!v) return "undefined";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f%%", *v * 100.0);
    return buf;
}

nlohmann::json metrics_json(const MetricSet& m) {
    const auto v = [](const std::optional<double>& o) {
        return o ? nlohmann::json(*o) : nlohmann::json();
    };
    return {{"accuracy", v(m.accuracy)},
            {"misclassification", v(m.misclassification)},
            {"tpr", v(m.tpr)},
            {"fnr", v(m.fnr)},
            {"tnr", v(m.tnr)},
            {"fpr", v(m.fpr)},
            {"ppv", v(m.ppv)},
            {"fdr", v(m.fdr)},
            {"npv", v(m.npv)},
            {"for", v(m.for_)}};
}

nlohmann::json counts_json(const ConfusionCounts& c) {
    return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}, {"total", c.total()}};
}

void classifier_section(std::string& out, const char* title, const ConfusionCounts& c,
                        const MetricSet& m) {
    char buf[256];
    out += title;
    out += '\n';
    std::snprintf(buf, sizeof buf,
                  "  counts: tp=%llu tn=%llu fp=%llu fn=%llu total=%llu\n",
                  static_cast<unsigned long long>(c.tp), static_cast<unsigned long long>(c.tn),
                  static_cast<unsigned long long>(c.fp), static_cast<unsigned long long>(c.fn),
                  static_cast<unsigned long long>(c.total()));
    out += buf;
    out += "  accuracy=" + pct(m.accuracy) + "  misclassification=" + pct(m.misclassification) +
           "\n";
    out += "  tpr=" + pct(m.tpr) + "  fnr=" + pct(m.fnr) + "  tnr=" + pct(m.tnr) +
           "  fpr=" + pct(m.fpr) + "\n";
    out += "  ppv=" + pct(m.ppv) + "  fdr=" + pct(m.fdr) + "  npv=" + pct(m.npv) +
           "  for=" + pct(m.for_) + "\n";
}

} // namespace

std::string render_report(const EvalResult& r) {
    std::string out;
    char buf[256];
    classifier_section(out, "Voltage classifier (per-bus labels)", r.confusion_v, r.metrics_v);
    classifier_section(out, "Branch-flow classifier (per-branch labels)", r.confusion_l,
                       r.metrics_l);

    out += "Optimality gap\n";
    int fallback_used = 0, flagged = 0, infeasible_unflagged = 0;
    for (const GapScenario& g : r.gaps.scenarios) {
        fallback_used += g.fallback_used ? 1 : 0;
        flagged += g.flagged ? 1 : 0;
        infeasible_unflagged += (!g.feasible_full && !g.flagged) ? 1 : 0;
    }
    std::snprintf(buf, sizeof buf, "  scenarios=%zu  mean_gap=%.3e%%", r.gaps.scenarios.size(),
                  r.gaps.mean_gap_pct);
    out += buf;
    if (r.gaps.mean_gap_no_fallback_pct) {
        std::snprintf(buf, sizeof buf, "  mean_gap_no_fallback=%.3e%%",
                      *r.gaps.mean_gap_no_fallback_pct);
        out += buf;
    }
    out += '\n';
    std::snprintf(buf, sizeof buf, "  fallback_used=%d  flagged=%d  infeasible_unflagged=%d\n",
                  fallback_used, flagged, infeasible_unflagged);
    out += buf;

    out += "Timing (medians per scenario, then means)\n";
    if (r.timing.scenarios == 0) {
        out += "  no timing rows\n";
    } else {
        std::snprintf(buf, sizeof buf, "  %-10s %12s %14s %12s\n", "solve", "iterations",
                      "wall_time_s", "feval");
        out += buf;
        std::snprintf(buf, sizeof buf, "  %-10s %12.2f %14.6f %12.1f\n", "full",
                      r.timing.mean_iter_full, r.timing.mean_time_full, r.timing.mean_feval_full);
        out += buf;
        std::snprintf(buf, sizeof buf, "  %-10s %12.2f %14.6f %12.1f\n", "truncated",
                      r.timing.mean_iter_trunc, r.timing.mean_time_trunc,
                      r.timing.mean_feval_trunc);
        out += buf;
        std::snprintf(buf, sizeof buf, "  time_saving=%.1f%%  (over %d scenarios)\n",
                      r.timing.time_saving_pct, r.timing.scenarios);
        out += buf;
    }
    return out;
}

void write_eval_artifacts(const std::string& run_dir, const Case& c,
                          const TrainedModels& models, const EvalResult& r,
                          const EvalOptions& opts, const std::string& test_hash) {
    std::filesystem::create_directories(run_dir);
    save_models(run_dir + "/models", models);

    CsvTable pred;
    pred.header.push_back("scenario");
    for (const Bus& b : c.buses) pred.header.push_back("v_score_" + std::to_string(b.id));
    for (const Bus& b : c.buses) pred.header.push_back("v_pred_" + std::to_string(b.id));
    for (const Bus& b : c.buses) pred.header.push_back("v_act_" + std::to_string(b.id));
    for (int l = 0; l < c.nl(); ++l) pred.header.push_back("l_score_" + std::to_string(l));
    for (int l = 0; l < c.nl(); ++l) pred.header.push_back("l_pred_" + std::to_string(l));
    for (int l = 0; l < c.nl(); ++l) pred.header.push_back("l_act_" + std::to_string(l));
    for (const ScenarioEval& sev : r.scenarios) {
        std::vector<double> row;
        row.push_back(sev.scenario);
        for (int i = 0; i < c.nb(); ++i) row.push_back(sev.pred.v_scores[i]);
        for (int i = 0; i < c.nb(); ++i) row.push_back(sev.pred.v_active_pred[i]);
        for (int i = 0; i < c.nb(); ++i) row.push_back(sev.v_actual[i]);
        for (int l = 0; l < c.nl(); ++l) row.push_back(sev.pred.l_scores[l]);
        for (int l = 0; l < c.nl(); ++l) row.push_back(sev.pred.l_active_pred[l]);
        for (int l = 0; l < c.nl(); ++l) row.push_back(sev.l_actual[l]);
        pred.rows.push_back(std::move(row));
    }
    write_csv(run_dir + "/predictions.csv", pred);

    CsvTable gaps;
    gaps.header = {"scenario", "f_full",   "f_final",       "gap_pct",
                   "rounds",   "fallback", "feasible_full", "flagged"};
    for (const ScenarioEval& sev : r.scenarios)
        gaps.rows.push_back({static_cast<double>(sev.scenario), sev.f_full, sev.f_final,
                             sev.gap.gap_pct, static_cast<double>(sev.gap.rounds),
                             sev.gap.fallback_used ? 1.0 : 0.0,
                             sev.gap.feasible_full ? 1.0 : 0.0, sev.gap.flagged ? 1.0 : 0.0});
    write_csv(run_dir + "/gaps.csv", gaps);

    CsvTable timing;
    timing.header = {"scenario",     "iter_full",    "iter_trunc", "time_full_s",
                     "time_trunc_s", "feval_full",   "feval_trunc"};
    for (size_t i = 0; i < r.timing_rows.size(); ++i) {
        const auto& [full, trunc] = r.timing_rows[i];
        timing.rows.push_back({static_cast<double>(i), full.iterations, trunc.iterations,
                               full.wall_time_s, trunc.wall_time_s, full.feval, trunc.feval});
    }
    write_csv(run_dir + "/timing.csv", timing);

    nlohmann::json cj;
    cj["schema_version"] = 1;
    cj["voltage"] = {{"counts", counts_json(r.confusion_v)},
                     {"metrics", metrics_json(r.metrics_v)}};
    cj["branch"] = {{"counts", counts_json(r.confusion_l)},
                    {"metrics", metrics_json(r.metrics_l)}};
    write_file(run_dir + "/confusion.json", cj.dump(2) + "\n");

    write_file(run_dir + "/report.txt", render_report(r));

    nlohmann::json mj;
    mj["schema_version"] = 1;
    mj["tool_version"] = kToolVersion;
    mj["case_hash"] = models.case_hash_;
    mj["feature_mode"] = to_string(models.feature_mode);
    mj["threshold"] = opts.threshold;
    mj["fallback"] = to_string(opts.fallback);
    mj["round_cap"] = opts.round_cap;
    mj["timing_scenarios"] = opts.timing_scenarios;
    mj["timing_repeats"] = opts.timing_repeats;
    mj["workers"] = opts.workers;
    mj["eps_active"] = opts.eps_active;
    mj["solver"] = {{"feastol", opts.solver.feastol},   {"gradtol", opts.solver.gradtol},
                    {"comptol", opts.solver.comptol},   {"costtol", opts.solver.costtol},
                    {"max_iter", opts.solver.max_iter}, {"sigma", opts.solver.sigma},
                    {"xi", opts.solver.xi}};
    mj["test_dataset_hash"] = test_hash;
    mj["dataset1_hash"] = models.dataset1_hash;
    mj["dataset2_hash"] = models.dataset2_hash;
    write_file(run_dir + "/manifest.json", mj.dump(2) + "\n");
}

void save_models(const std::string& dir, const TrainedModels& models) {
    std::filesystem::create_directories(dir);
    if (models.regressor) save_mlp(dir + "/regressor.json", *models.regressor);
    save_mlp(dir + "/classifier_v.json", models.classifier_v);
    save_mlp(dir + "/classifier_l.json", models.classifier_l);
    nlohmann::json j;
    j["schema_version"] = 1;
    j["tool_version"] = kToolVersion;
    j["case_hash"] = models.case_hash_;
    j["feature_mode"] = to_string(models.feature_mode);
    j["dataset1_hash"] = models.dataset1_hash;
    j["dataset2_hash"] = models.dataset2_hash;
    j["leakage"] = models.leakage;
    j["has_regressor"] = models.regressor.has_value();
    write_file(dir + "/manifest.json", j.dump(2) + "\n");
}

TrainedModels load_models(const std::string& dir, const Case& c) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("models manifest parse failure in " + dir + ": " + e.what());
    }
    TrainedModels m;
    try {
        m.case_hash_ = j.at("case_hash").get<std::string>();
        m.feature_mode = feature_mode_from_string(j.at("feature_mode").get<std::string>());
        m.dataset1_hash = j.at("dataset1_hash").get<std::string>();
        m.dataset2_hash = j.at("dataset2_hash").get<std::string>();
        m.leakage = j.at("leakage").get<bool>();
        if (j.at("has_regressor").get<bool>()) m.regressor = load_mlp(dir + "/regressor.json");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("models manifest missing fields in " + dir + ": " + e.what());
    }
    if (m.case_hash_ != case_hash(c))
        throw DataError("models in " + dir + " were trained for a different case");
    m.classifier_v = load_mlp(dir + "/classifier_v.json");
    m.classifier_l = load_mlp(dir + "/classifier_l.json");

    const int nb = c.nb(), expect_feat = m.feature_mode == FeatureMode::net_injection
                                             ? 2 * static_cast<int>(c.n_b_prime.size())
                                             : 2 * static_cast<int>(c.n_b.size());
    if (m.feature_mode == FeatureMode::net_injection) {
        if (!m.regressor)
            throw DataError("models in " + dir + ": net_injection mode without a regressor");
        if (m.regressor->params.input_width() != 2 * static_cast<int>(c.n_b.size()) ||
            m.regressor->params.output_width() != 2 * c.ng())
            throw DataError("models in " + dir + ": regressor widths do not match the case");
    }
    if (m.classifier_v.params.input_width() != expect_feat ||
        m.classifier_l.params.input_width() != expect_feat)
        throw DataError("models in " + dir + ": classifier input widths do not match the case");
    if (m.classifier_v.params.output_width() != nb ||
        m.classifier_l.params.output_width() != c.nl())
        throw DataError("models in " + dir + ": classifier output widths do not match the case");
    return m;
}

} // namespace opfs
