#pragma once
// Perturbed demand scenario generation and dataset assembly.
//
// Demands are perturbed per bus of n_b (buses with nonzero base demand):
//   pd_k = pL + eta * (pU - pL),  pL = range_lo * Pd_base, pU = range_hi * Pd_base
// (interpolation form, so negative reactive bases stay well ordered); qd uses
// its own analogous range. eta is drawn independently per bus and scenario by
// default; `systemwide` draws one eta_p and one eta_q per scenario.
//
// Scenario k draws from the counter-based substream split(seed, tag, k), so
// the farm is order-independent and bit-reproducible for any worker count.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opfs/opf.hpp"
#include "opfs/rng.hpp"

namespace opfs {

struct DemandVector {
    VecR pd, qd; // per n_b bus, ascending bus id, p.u.
};

VecR stack_demand(const DemandVector& d); // D = [pd; qd], length 2|n_b|
DemandVector unstack_demand(const Case& c, const VecR& stacked);

enum class Correlation { independent_per_bus, systemwide };

struct ScenarioConfig {
    double range_lo = 0.70;
    double range_hi = 1.30;
    int count = 0;
    std::uint64_t seed = 0;
    std::string stream_tag = "scenarios"; // disjoint tags => disjoint streams
    Correlation correlation = Correlation::independent_per_bus;
};

DemandVector perturb_demand(const Case& c, const ScenarioConfig& cfg, int k);

// Returns a copy of the case with demand at the n_b buses replaced.
Case apply_demand(const Case& c, const DemandVector& d);

// Demand / per-generator dispatch gathered onto the n_b' index set
// (zero-filled where absent; generation summed per bus).
VecR demand_on_nbp(const Case& c, const DemandVector& d);  // [Pd; Qd] over n_b'
VecR generation_on_nbp(const Case& c, const VecR& pg, const VecR& qg);

// NI = G - D on the shared n_b' index set; DataError on length mismatch.
VecR net_injection(const VecR& d_on_nbp, const VecR& g_on_nbp);

struct Dataset {
    Eigen::MatrixXd D;  // kept x 2|n_b|
    Eigen::MatrixXd G;  // kept x 2|n_g| (actual OPF generation)
    Eigen::MatrixXd NI; // kept x 2|n_b'| (actual net injection, from own D and G)
    std::vector<std::vector<std::uint8_t>> labels_v; // kept x |buses|
    std::vector<std::vector<std::uint8_t>> labels_l; // kept x |branches|
    int requested = 0;
    std::vector<int> kept_indices; // original scenario indices, ascending
    std::vector<std::pair<int, SolveStatus>> dropped;
    std::string case_hash_;
};

// Solves the full OPF for each scenario (parallel across `workers` threads,
// 0 = all available) and assembles the dataset; infeasible scenarios are
// dropped with bookkeeping. SolverError if every scenario is infeasible.
Dataset build_dataset(const Case& c, const ScenarioConfig& cfg, const SolverConfig& solver,
                      int workers = 0, double eps_active = 1e-5);

// Directory persistence: manifest.json, D.csv, G.csv, NI.csv, labels_v.csv,
// labels_l.csv (numeric CSV, header row with bus/branch ids).
void save_dataset(const std::string& dir, const Dataset& ds, const Case& c,
                  const ScenarioConfig& cfg, const SolverConfig& solver, double eps_active);
Dataset load_dataset(const std::string& dir, const Case& c); // validates case hash

} // namespace opfs
