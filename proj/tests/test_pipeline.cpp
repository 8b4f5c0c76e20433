#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "opfs/pipeline.hpp"
#include "support.hpp"

using namespace opfs;
using namespace opfs::test;
using Eigen::MatrixXd;

namespace {

Dataset make_ds(const Case& c, int count, std::uint64_t seed, const std::string& tag) {
    ScenarioConfig cfg;
    cfg.count = count;
    cfg.seed = seed;
    cfg.stream_tag = tag;
    return build_dataset(c, cfg, SolverConfig{}, 0);
}

TrainConfig tiny_train(Task task) {
    TrainConfig cfg;
    cfg.task = task;
    cfg.epochs = 40;
    cfg.batch_size = 8;
    cfg.hidden_width = 16;
    cfg.learning_rate = 3e-3;
    return cfg;
}

// Shared fixtures, built once: three disjoint-seed case3 datasets and a
// trained model pair for each feature mode.
const Dataset& ds1() {
    static const Dataset d = make_ds(case3(), 40, 101, "p-ds1");
    return d;
}
const Dataset& ds2() {
    static const Dataset d = make_ds(case3(), 40, 202, "p-ds2");
    return d;
}
const Dataset& ds_test() {
    static const Dataset d = make_ds(case3(), 12, 303, "p-test");
    return d;
}
const TrainAllOutput& trained_ni() {
    static const TrainAllOutput out =
        train_all(case3(), ds1(), ds2(), tiny_train(Task::regression),
                  tiny_train(Task::classification), FeatureMode::net_injection, 7);
    return out;
}
const TrainAllOutput& trained_do() {
    static const TrainAllOutput out =
        train_all(case3(), ds1(), ds2(), tiny_train(Task::regression),
                  tiny_train(Task::classification), FeatureMode::demand_only, 7);
    return out;
}

bool params_equal(const MlpParams& a, const MlpParams& b) {
    if (a.sizes != b.sizes) return false;
    for (std::size_t l = 0; l < a.W.size(); ++l)
        if (std::memcmp(a.W[l].data(), b.W[l].data(), sizeof(double) * a.W[l].size()) != 0)
            return false;
    return true;
}

// All-inactive saboteur: keeps the trained classifier shapes but drives every
// output to ~2e-9 so no label ever crosses a sane threshold.
TrainedMlp sabotage(TrainedMlp m) {
    MatrixXd& W = m.params.W.back();
    W.setZero();
    m.params.b.back().setConstant(-20.0);
    return m;
}

} // namespace

TEST_CASE("mode names round-trip") {
    for (FeatureMode m : {FeatureMode::net_injection, FeatureMode::demand_only})
        CHECK(feature_mode_from_string(to_string(m)) == m);
    for (FallbackMode m :
         {FallbackMode::iterative_inclusion, FallbackMode::warm_start_full, FallbackMode::none})
        CHECK(fallback_mode_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(feature_mode_from_string("pca"), DataError);
    CHECK_THROWS_AS(fallback_mode_from_string("retry"), DataError);
}

TEST_CASE("dataset_hash is content-addressed") {
    CHECK(dataset_hash(ds1()) == dataset_hash(ds1()));
    CHECK(dataset_hash(ds1()).size() == 16);
    CHECK(dataset_hash(ds1()) != dataset_hash(ds2()));
    Dataset mutated = ds1();
    mutated.D(0, 0) += 1e-9;
    CHECK(dataset_hash(mutated) != dataset_hash(ds1()));
}

TEST_CASE("train_all wires the two-dataset pipeline") {
    const TrainAllOutput& ni = trained_ni();
    REQUIRE(ni.models.regressor.has_value());
    CHECK(ni.models.feature_mode == FeatureMode::net_injection);
    CHECK(ni.models.case_hash_ == case_hash(case3()));
    CHECK(ni.models.dataset1_hash == dataset_hash(ds1()));
    CHECK(ni.models.dataset2_hash == dataset_hash(ds2()));
    CHECK(!ni.models.leakage);
    // Regressor: demand (2|n_b| = 4) -> dispatch (2|n_g| = 6).
    CHECK(ni.models.regressor->params.input_width() == 4);
    CHECK(ni.models.regressor->params.output_width() == 6);
    // Classifiers consume net injections over n_b' (2*3 = 6 features).
    CHECK(ni.models.classifier_v.params.input_width() == 6);
    CHECK(ni.models.classifier_v.params.output_width() == 3);
    CHECK(ni.models.classifier_l.params.input_width() == 6);
    CHECK(ni.models.classifier_l.params.output_width() == 3);
    CHECK(ni.regressor_report.train_loss.size() == 40);
    CHECK(ni.v_report.train_loss.size() == 40);

    const TrainAllOutput& dm = trained_do();
    CHECK(!dm.models.regressor.has_value());
    CHECK(dm.models.classifier_v.params.input_width() == 4); // raw demand features
    CHECK(dm.regressor_report.train_loss.empty());

    // Same seed, same data: reproducible parameters. Different seed: not.
    const TrainAllOutput again =
        train_all(case3(), ds1(), ds2(), tiny_train(Task::regression),
                  tiny_train(Task::classification), FeatureMode::net_injection, 7);
    CHECK(params_equal(again.models.classifier_v.params, ni.models.classifier_v.params));
    const TrainAllOutput other =
        train_all(case3(), ds1(), ds2(), tiny_train(Task::regression),
                  tiny_train(Task::classification), FeatureMode::net_injection, 8);
    CHECK(!params_equal(other.models.classifier_v.params, ni.models.classifier_v.params));
}

TEST_CASE("training on the same dataset twice raises the leakage flag") {
    const TrainAllOutput out =
        train_all(case3(), ds1(), ds1(), tiny_train(Task::regression),
                  tiny_train(Task::classification), FeatureMode::net_injection, 7);
    CHECK(out.models.leakage);
}

TEST_CASE("train_all refuses a dataset built for another case") {
    CHECK_THROWS_AS(train_all(case39(), ds1(), ds2(), tiny_train(Task::regression),
                              tiny_train(Task::classification), FeatureMode::net_injection, 7),
                    DataError);
}

TEST_CASE("ni_features composes the regressor with the injection gather") {
    const TrainedModels& m = trained_ni().models;
    const Case& c3 = case3();
    const MatrixXd ni = ni_features(c3, *m.regressor, ds2().D, false);
    REQUIRE(ni.rows() == ds2().D.rows());
    REQUIRE(ni.cols() == 6);
    const MatrixXd g = predict(*m.regressor, ds2().D, false);
    for (int r = 0; r < std::min<int>(5, ni.rows()); ++r) {
        const DemandVector d = unstack_demand(c3, ds2().D.row(r).transpose());
        const VecR expect = net_injection(
            demand_on_nbp(c3, d),
            generation_on_nbp(c3, g.row(r).head(3).transpose(), g.row(r).tail(3).transpose()));
        CHECK((VecR(ni.row(r).transpose()) - expect).lpNorm<Eigen::Infinity>() < 1e-12);
    }
}

TEST_CASE("predict_active applies the threshold to clamped scores") {
    const TrainedModels& m = trained_ni().models;
    const Case& c3 = case3();
    const DemandVector d = unstack_demand(c3, ds_test().D.row(0).transpose());

    const Prediction p = predict_active(c3, m, d, 0.5, false);
    CHECK(p.g_tilde.size() == 6);
    CHECK(p.ni_tilde.size() == 6);
    REQUIRE(p.v_scores.size() == 3);
    REQUIRE(p.l_scores.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(p.v_scores[i] > 0.0);
        CHECK(p.v_scores[i] < 1.0);
        CHECK(p.v_active_pred[i] == (p.v_scores[i] >= 0.5 ? 1 : 0));
        CHECK(p.l_active_pred[i] == (p.l_scores[i] >= 0.5 ? 1 : 0));
    }

    // Threshold 0 flags everything; threshold 1 flags nothing (open scores).
    const Prediction all = predict_active(c3, m, d, 0.0, false);
    CHECK(std::count(all.v_active_pred.begin(), all.v_active_pred.end(), 1) == 3);
    CHECK(std::count(all.l_active_pred.begin(), all.l_active_pred.end(), 1) == 3);
    const Prediction none = predict_active(c3, m, d, 1.0, false);
    CHECK(std::count(none.v_active_pred.begin(), none.v_active_pred.end(), 1) == 0);
    CHECK(std::count(none.l_active_pred.begin(), none.l_active_pred.end(), 1) == 0);

    const Prediction dm = predict_active(c3, trained_do().models, d, 0.5, false);
    CHECK(dm.g_tilde.size() == 0);
    CHECK(dm.ni_tilde.size() == 0);
    CHECK(dm.v_scores.size() == 3);
}

TEST_CASE("build_truncated maps predictions to a valid constraint set") {
    const Case& c3 = case3();
    Prediction p;
    p.v_active_pred = {1, 0, 1};
    p.l_active_pred = {0, 1, 0};
    const ConstraintSet cs = build_truncated(c3, p);
    CHECK(cs.voltage_buses == std::vector<int>{0, 2});
    CHECK(cs.flow_branches == std::vector<int>{1});
    CHECK(cs.chi_always);

    // Threshold 0 must reproduce the full problem exactly.
    const TrainedModels& m = trained_ni().models;
    const DemandVector d = unstack_demand(c3, ds_test().D.row(1).transpose());
    const ConstraintSet all = build_truncated(c3, predict_active(c3, m, d, 0.0, false));
    const ConstraintSet full = full_constraint_set(c3);
    CHECK(all.voltage_buses == full.voltage_buses);
    CHECK(all.flow_branches == full.flow_branches);

    // A predicted-active branch without a limit is silently unenforceable.
    Case unrated = c3;
    unrated.branches[1].rate_a = 0;
    const ConstraintSet cs2 = build_truncated(unrated, p);
    CHECK(cs2.flow_branches.empty());
}

TEST_CASE("fallback on the full set is a no-op") {
    const Case& c3 = case3();
    const FallbackResult r = solve_with_fallback(c3, full_constraint_set(c3),
                                                 FallbackMode::iterative_inclusion);
    CHECK(r.rounds == 0);
    CHECK(r.feasible_full);
    CHECK(!r.flagged);
    CHECK(r.final_solution.objective == r.first_solution.objective);
    CHECK(r.final_cs.voltage_buses == full_constraint_set(c3).voltage_buses);
}

TEST_CASE("iterative inclusion recovers the full optimum from an empty start") {
    for (double scale : {0.70, 1.00, 1.30}) {
        const Case c = scaled_demand(case3(), scale);
        const OpfSolution full = solve_opf(c, full_constraint_set(c));
        REQUIRE(full.status == SolveStatus::converged);

        const ConstraintSet empty = make_constraint_set(c, {}, {});
        const FallbackResult r =
            solve_with_fallback(c, empty, FallbackMode::iterative_inclusion);
        CHECK(r.rounds >= 1);
        CHECK(r.rounds <= 5);
        CHECK(r.feasible_full);
        CHECK(!r.flagged);
        CHECK(std::abs(r.final_solution.objective - full.objective) <
              1e-6 * std::max(1.0, full.objective));
        CHECK(check_violations(c, r.final_solution.vars, full_constraint_set(c)).empty());
        // The unconstrained first solve undercuts the full optimum (relaxation).
        CHECK(r.first_solution.objective <= full.objective + 1e-9);
    }
}

TEST_CASE("dropping the one active flow limit costs exactly one inclusion round") {
    const Case& c3 = case3(); // at base load: vm3 at vmax and branch 1 at its rating
    std::vector<int> vbus = {2};
    const ConstraintSet cs = make_constraint_set(c3, vbus, {});
    const OpfSolution full = solve_opf(c3, full_constraint_set(c3));
    const FallbackResult r = solve_with_fallback(c3, cs, FallbackMode::iterative_inclusion);
    CHECK(r.rounds == 1);
    CHECK(r.feasible_full);
    CHECK(std::find(r.final_cs.flow_branches.begin(), r.final_cs.flow_branches.end(), 1) !=
          r.final_cs.flow_branches.end());
    CHECK(std::abs(r.final_solution.objective - full.objective) < 1e-6 * full.objective);
}

TEST_CASE("fallback mode none reports infeasibility instead of hiding it") {
    const Case& c3 = case3();
    const ConstraintSet empty = make_constraint_set(c3, {}, {});
    const FallbackResult r = solve_with_fallback(c3, empty, FallbackMode::none);
    CHECK(r.rounds == 0);
    CHECK(!r.feasible_full); // base case binds vm3 and branch 1
    CHECK(r.final_solution.objective == r.first_solution.objective);
}

TEST_CASE("warm_start_full fallback lands on the full optimum") {
    const Case& c3 = case3();
    const ConstraintSet empty = make_constraint_set(c3, {}, {});
    const OpfSolution full = solve_opf(c3, full_constraint_set(c3));
    const FallbackResult r = solve_with_fallback(c3, empty, FallbackMode::warm_start_full);
    CHECK(r.rounds == 0);
    CHECK(r.feasible_full);
    CHECK(r.final_cs.voltage_buses == full_constraint_set(c3).voltage_buses);
    CHECK(std::abs(r.final_solution.objective - full.objective) < 1e-6 * full.objective);
}

TEST_CASE("a sabotaged all-inactive classifier can never smuggle out infeasibility") {
    const Case& c3 = case3();
    TrainedModels broken = trained_ni().models;
    broken.classifier_v = sabotage(broken.classifier_v);
    broken.classifier_l = sabotage(broken.classifier_l);
    for (int r = 0; r < 4; ++r) {
        const DemandVector d = unstack_demand(c3, ds_test().D.row(r).transpose());
        const Prediction p = predict_active(c3, broken, d, 0.5, false);
        CHECK(std::count(p.v_active_pred.begin(), p.v_active_pred.end(), 1) == 0);
        CHECK(std::count(p.l_active_pred.begin(), p.l_active_pred.end(), 1) == 0);
        const Case c = apply_demand(c3, d);
        const FallbackResult fr = solve_with_fallback(c, build_truncated(c, p),
                                                      FallbackMode::iterative_inclusion);
        CHECK(fr.feasible_full);
        CHECK(!fr.flagged);
        CHECK(fr.rounds <= 5);
    }
}

TEST_CASE("evaluate_models produces internally consistent artifacts") {
    const Case& c3 = case3();
    EvalOptions opts;
    opts.timing_scenarios = 3;
    opts.timing_repeats = 3;
    const EvalResult r = evaluate_models(c3, trained_ni().models, ds_test(), opts);

    const std::size_t kept = ds_test().kept_indices.size();
    REQUIRE(r.scenarios.size() == kept);
    CHECK(r.confusion_v.total() == kept * 3);
    CHECK(r.confusion_l.total() == kept * 3);
    CHECK(r.timing_rows.size() == 3);
    CHECK(r.timing.scenarios == 3);
    CHECK(r.gaps.scenarios.size() == kept);

    // Metric sets are derived from the same counts they sit next to.
    const MetricSet mv = compute_metrics(r.confusion_v);
    CHECK(r.metrics_v.accuracy.value() == mv.accuracy.value());

    // Actual labels quoted per scenario match the dataset rows.
    for (std::size_t i = 0; i < kept; ++i) {
        CHECK(r.scenarios[i].v_actual == ds_test().labels_v[i]);
        CHECK(r.scenarios[i].l_actual == ds_test().labels_l[i]);
        CHECK(r.scenarios[i].f_full > 0);
        CHECK(r.gaps.scenarios[i].feasible_full);
        CHECK(!r.gaps.scenarios[i].flagged);
    }
    // Feasible final solutions keep the gap at solver-tolerance scale.
    CHECK(r.gaps.mean_gap_pct < 1e-4);

    // Bit-stable across reruns (wall times aside).
    const EvalResult r2 = evaluate_models(c3, trained_ni().models, ds_test(), opts);
    CHECK(r2.confusion_v.tp == r.confusion_v.tp);
    CHECK(r2.confusion_v.fn == r.confusion_v.fn);
    CHECK(r2.confusion_l.fp == r.confusion_l.fp);
    for (std::size_t i = 0; i < kept; ++i)
        CHECK(r2.gaps.scenarios[i].gap_pct == r.gaps.scenarios[i].gap_pct);
}

TEST_CASE("eval artifacts are written, readable, and reproducible") {
    const Case& c3 = case3();
    EvalOptions opts;
    opts.timing_scenarios = 2;
    opts.timing_repeats = 2;
    const EvalResult r = evaluate_models(c3, trained_ni().models, ds_test(), opts);

    TempDir tmp;
    const std::string dir = tmp.path + "/run";
    write_eval_artifacts(dir, c3, trained_ni().models, r, opts, dataset_hash(ds_test()));
    for (const char* name : {"predictions.csv", "gaps.csv", "timing.csv", "confusion.json",
                             "report.txt", "manifest.json", "models/classifier_v.json",
                             "models/classifier_l.json", "models/regressor.json",
                             "models/manifest.json"})
        CHECK(std::filesystem::exists(dir + "/" + std::string(name)));

    const nlohmann::json conf = nlohmann::json::parse(slurp(dir + "/confusion.json"));
    CHECK(conf["voltage"]["counts"]["tp"].get<std::uint64_t>() == r.confusion_v.tp);
    CHECK(conf["branch"]["counts"]["fn"].get<std::uint64_t>() == r.confusion_l.fn);

    const std::string gaps = slurp(dir + "/gaps.csv");
    CHECK(gaps.rfind("scenario,f_full,f_final,gap_pct,rounds,fallback,feasible_full,flagged",
                     0) == 0);
    const std::string timing = slurp(dir + "/timing.csv");
    CHECK(timing.rfind("scenario,iter_full,iter_trunc,time_full_s,time_trunc_s,feval_full,"
                       "feval_trunc",
                       0) == 0);
    const std::string preds = slurp(dir + "/predictions.csv");
    CHECK(preds.find("v_score_") != std::string::npos);
    CHECK(preds.find("l_act_") != std::string::npos);

    const std::string report = slurp(dir + "/report.txt");
    CHECK(report == render_report(r));
    CHECK(report.find("Voltage classifier (per-bus labels)") != std::string::npos);
    CHECK(report.find("Branch-flow classifier (per-branch labels)") != std::string::npos);
    CHECK(report.find("Optimality gap") != std::string::npos);
    CHECK(report.find("Timing (medians per scenario, then means)") != std::string::npos);

    // Everything except the timing files is byte-identical on a second write.
    TempDir tmp2;
    const std::string dir2 = tmp2.path + "/run";
    const EvalResult r2 = evaluate_models(c3, trained_ni().models, ds_test(), opts);
    write_eval_artifacts(dir2, c3, trained_ni().models, r2, opts, dataset_hash(ds_test()));
    CHECK(slurp(dir2 + "/gaps.csv") == gaps);
    CHECK(slurp(dir2 + "/confusion.json") == slurp(dir + "/confusion.json"));
    CHECK(slurp(dir2 + "/predictions.csv") == preds);
}

TEST_CASE("model persistence round-trips through a directory") {
    const Case& c3 = case3();
    TempDir tmp;
    save_models(tmp.path, trained_ni().models);
    const TrainedModels back = load_models(tmp.path, c3);
    CHECK(back.feature_mode == FeatureMode::net_injection);
    CHECK(back.case_hash_ == case_hash(c3));
    REQUIRE(back.regressor.has_value());
    CHECK(params_equal(back.classifier_v.params, trained_ni().models.classifier_v.params));
    CHECK(params_equal(back.classifier_l.params, trained_ni().models.classifier_l.params));

    const DemandVector d = unstack_demand(c3, ds_test().D.row(2).transpose());
    const Prediction a = predict_active(c3, trained_ni().models, d, 0.5, false);
    const Prediction b = predict_active(c3, back, d, 0.5, false);
    CHECK(a.v_scores == b.v_scores);
    CHECK(a.l_scores == b.l_scores);

    // Wrong case: refused.
    CHECK_THROWS_AS(load_models(tmp.path, case39()), DataError);

    // demand_only directories carry no regressor file.
    TempDir tmp2;
    save_models(tmp2.path, trained_do().models);
    CHECK(!std::filesystem::exists(tmp2.path + "/regressor.json"));
    const TrainedModels dm = load_models(tmp2.path, c3);
    CHECK(!dm.regressor.has_value());
    CHECK(dm.feature_mode == FeatureMode::demand_only);
}
