#pragma once
// Grid case model + parsing/validation/serialization.
//
// In-memory convention: every network quantity is per-unit on base_mva
// (demands, shunts, generator limits, flow limits); cost coefficients stay
// per-MW so objectives come out in $/h. Case files (both formats) carry the
// conventional physical units (MW, MVAr, MVA); conversion happens at the
// parse/serialize boundary. Out-of-service branches and generators are
// dropped at parse time (a dropped generator drops its cost row).
//
// Case is immutable after construction and safe for concurrent reads.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "opfs/common.hpp"

namespace opfs {

struct Bus {
    int id = 0;        // external integer label
    double pd = 0;     // real demand (p.u.)
    double qd = 0;     // reactive demand (p.u.)
    double gs = 0;     // shunt conductance (p.u. at V=1)
    double bs = 0;     // shunt susceptance (p.u. at V=1)
    double vmin = 0;   // voltage magnitude lower bound (p.u.)
    double vmax = 0;   // voltage magnitude upper bound (p.u.)
    bool is_ref = false;
};

struct Branch {
    int from = 0, to = 0; // external bus ids
    double r = 0, x = 0;  // series impedance (p.u.)
    double b_chg = 0;     // total line-charging susceptance (p.u.)
    double tap = 1.0;     // off-nominal turns ratio (1 = nominal)
    double shift = 0;     // phase-shift angle (rad)
    double rate_a = 0;    // |S| limit (p.u.); 0 = unlimited (no h_l rows)
    bool in_service = true;
};

struct Generator {
    int bus = 0; // external bus id
    double pmin = 0, pmax = 0; // real-power bounds (p.u.)
    double qmin = 0, qmax = 0; // reactive bounds (p.u.)
    bool in_service = true;
};

struct GenCost {
    double a = 0, b = 0, c = 0; // $/MW^2 h, $/MWh, $/h — applied to MW, not p.u.
};

struct Case {
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;     // in-service only
    std::vector<Generator> generators; // in-service only
    std::vector<GenCost> costs;        // aligned with generators

    // Derived (filled by finalize_case):
    std::unordered_map<int, int> bus_index; // external id -> position in buses
    int ref_bus = -1;                       // position of the reference bus
    std::vector<int> n_b;       // positions of buses with nonzero demand, ascending id
    std::vector<int> n_b_prime; // n_b ∪ {buses hosting a generator}, ascending id
    std::vector<std::vector<int>> gens_at_bus; // per bus position, generator indices

    int nb() const { return static_cast<int>(buses.size()); }
    int nl() const { return static_cast<int>(branches.size()); }
    int ng() const { return static_cast<int>(generators.size()); }
    int bus_pos(int external_id) const; // DataError if unknown
};

enum class CaseFormat { matpower_like, json };

// Validates and fills the derived index sets; throws DataError on violations
// (duplicate/unknown bus ids, no or multiple reference buses, bad bounds,
// degenerate r=x=0 branches, cost/generator count mismatch).
void finalize_case(Case& c);

Case parse_case(const std::string& text, CaseFormat format);
std::string serialize_case(const Case& c, CaseFormat format);

Case load_case(const std::string& path); // format from extension (.m / .json)

// Structural equality within 1e-12 relative on every field (round-trip test aid).
bool case_equal(const Case& a, const Case& b, double rtol = 1e-12);

// FNV-1a hash of the canonical JSON serialization; binds models to their case.
std::string case_hash(const Case& c);

} // namespace opfs
