#pragma once
// Full / truncated AC OPF via a primal-dual interior-point method, plus
// activity labeling and violation checking.
//
// Problem (all per-unit except the $/h objective):
//   min  sum_g a_g (pg_g B)^2 + b_g (pg_g B) + c_g          (B = base MVA)
//   s.t. Pbus(th,vm) + Pd - Cg pg = 0,  Qbus(th,vm) + Qd - Cg qg = 0
//        th[ref] = 0
//        vm bounds for buses in cs.voltage_buses
//        |S_l|^2 <= rate_a^2 at both ends for branches in cs.flow_branches
//        (held internally as |S_l|^2/rate_a^2 - 1 <= 0 so all rows are O(1))
//        pg/qg bounds for every generator (chi: always enforced)
// Generators with Pmax == Pmin (or Qmax == Qmin) become equality rows instead
// of zero-width inequalities.
//
// Solver: damped Newton on the perturbed KKT system with slack variables on
// inequalities, fraction-to-boundary step rule (xi = 0.99995) with separate
// primal/dual step lengths, monotone barrier reduction gamma = sigma s'z/ni,
// and diagonal regularization escalation on factorization failure.
//
// Inequality row ordering (slacks/multipliers follow it):
//   [vm upper | vm lower] over cs.voltage_buses ascending,
//   [flow from | flow to] over cs.flow_branches ascending,
//   [pg upper | pg lower | qg upper | qg lower] over non-fixed generators.
// Equality row ordering:
//   [P balance | Q balance | ref angle | fixed pg | fixed qg].

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "opfs/network.hpp"

namespace opfs {

struct SolverConfig {
    double feastol = 1e-6;
    double gradtol = 1e-6;
    double comptol = 1e-6;
    double costtol = 1e-6;
    int max_iter = 150;
    double sigma = 0.1;      // barrier reduction factor
    double xi = 0.99995;     // fraction-to-boundary
    double reg_init = 1e-8;  // KKT diagonal perturbation start
    double reg_max = 1e-2;   // beyond this: numerical_failure
    double eps_active = 1e-5; // default activity tolerance (p.u.)
};

struct ConstraintSet {
    std::vector<int> voltage_buses; // bus positions, sorted ascending
    std::vector<int> flow_branches; // branch indices (rate_a > 0), sorted ascending
    bool chi_always = true;        // balance, gen bounds, ref angle: always on
};

ConstraintSet full_constraint_set(const Case& c);
// Normalizes (sorts, dedups) and validates indices; DataError on a flow index
// whose branch has rate_a = 0 or any out-of-range index.
ConstraintSet make_constraint_set(const Case& c, std::vector<int> voltage_buses,
                                  std::vector<int> flow_branches);

struct OpfVariables {
    VecR theta, vm, pg, qg;
};

OpfVariables flat_start(const Case& c);

enum class SolveStatus { converged, max_iter, numerical_failure };
const char* to_string(SolveStatus s);

struct OpfSolution {
    OpfVariables vars;
    double objective = 0; // $/h
    VecR mult_eq;         // lambda, equality row order above
    VecR mult_ineq;       // z >= 0, inequality row order above
    VecR slacks;          // s >= 0, h + s = 0 at convergence
    SolveStatus status = SolveStatus::numerical_failure;
    int iterations = 0;
    double wall_time = 0;    // seconds (monotonic clock)
    std::int64_t feval_count = 0; // accumulated constraint-row evaluations
};

OpfSolution solve_opf(const Case& c, const ConstraintSet& cs,
                      const std::optional<OpfVariables>& start = std::nullopt,
                      const SolverConfig& cfg = {});

struct ActivityLabels {
    std::vector<std::uint8_t> v_active; // per bus
    std::vector<std::uint8_t> l_active; // per branch; always 0 when rate_a = 0
};

// Aggregated labels: a bus is active when either vm bound is within
// eps_active; a branch when either end's |S| is within eps_active*max(1,Fmax)
// of its limit. Requires a converged solution (SolverError otherwise).
ActivityLabels label_activity(const OpfSolution& sol, const Case& c, double eps_active = 1e-5);

struct Violation {
    enum class Kind { vmax, vmin, flow_from, flow_to };
    Kind kind;
    int index;     // bus position or branch index
    double amount; // p.u.: bound excess (vm) or |S| - Fmax (flows)
};

std::vector<Violation> check_violations(const Case& c, const OpfVariables& vars,
                                        const ConstraintSet& full_set, double tol = 1e-6);

struct KktResiduals {
    double feascond = 0, gradcond = 0, compcond = 0;
};
// Recomputed from the returned solution (MIPS-style scaled residuals); lets
// tests assert the KKT certificate independently of solver-internal state.
KktResiduals kkt_residuals(const Case& c, const ConstraintSet& cs, const OpfSolution& sol);

double objective_value(const Case& c, const VecR& pg);

// JSON export: variables, objective, status, iterations, wall_time,
// feval_count, labels (labels only when converged). wall_time is the one
// field that varies between otherwise identical runs.
std::string solution_to_json(const OpfSolution& sol, const Case& c);

} // namespace opfs
