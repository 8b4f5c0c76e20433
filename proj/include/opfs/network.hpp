#pragma once
// Bus admittance assembly, nodal injections, branch flows, and analytic
// first/second derivatives in polar voltage coordinates (theta, vm).
//
// The spec-level `derivatives(model, v, order)` operation is realized by the
// concrete function family below: injection_jacobian / flow_jacobian for
// order = jacobian, and injection_hessian / flow_sq_hessian for
// order = hessian-vector (Lagrangian-weighted contractions: pass multiplier
// weights, get the contracted symmetric block matrix over (theta, vm)).
//
// Flow inequality constraints are handled on squared magnitudes |S|^2 (smooth
// at zero flow); branch_flows reports plain magnitudes.

#include <complex>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "opfs/case_io.hpp"

namespace opfs {

using cplx = std::complex<double>;
using VecR = Eigen::VectorXd;
using VecC = Eigen::VectorXcd;
using SpR = Eigen::SparseMatrix<double>;
using SpC = Eigen::SparseMatrix<cplx>;

struct VoltageState {
    VecR theta; // rad, per bus
    VecR vm;    // p.u., per bus, > 0
};

struct AdmittanceModel {
    int nb = 0, nl = 0;
    SpC Ybus;   // nb x nb
    SpC Yf, Yt; // nl x nb: branch current row maps, I_f = Yf V, I_t = Yt V
    SpC Cf, Ct; // nl x nb 0/1 endpoint incidence
    std::vector<int> from_pos, to_pos; // branch endpoint bus positions
};

AdmittanceModel build_admittance(const Case& c);

VecC complex_voltage(const VoltageState& v);

// Net injected complex power per bus, split into (P, Q), p.u.
std::pair<VecR, VecR> injections(const AdmittanceModel& m, const VoltageState& v);

// Apparent-power magnitudes |S| at from/to ends, p.u.
std::pair<VecR, VecR> branch_flows(const AdmittanceModel& m, const VoltageState& v);

// Complex end flows (needed by the solver for squared-magnitude constraints).
std::pair<VecC, VecC> flows_complex(const AdmittanceModel& m, const VoltageState& v);

struct InjectionJacobian {
    VecC S;             // complex injections
    SpC dS_dth, dS_dvm; // nb x nb
};
InjectionJacobian injection_jacobian(const AdmittanceModel& m, const VoltageState& v);

struct FlowJacobian {
    VecC Sf, St;                  // complex end flows
    SpC dSf_dth, dSf_dvm;         // nl x nb
    SpC dSt_dth, dSt_dvm;
};
FlowJacobian flow_jacobian(const AdmittanceModel& m, const VoltageState& v);

// Hessian of wp'P_bus + wq'Q_bus w.r.t. stacked (theta, vm): 2nb x 2nb.
SpR injection_hessian(const AdmittanceModel& m, const VoltageState& v, const VecR& wp,
                      const VecR& wq);

enum class BranchSide { from_end, to_end };

// Hessian of sum_l w_l * |S_l|^2 at one branch end w.r.t. (theta, vm); w has
// one entry per branch (zero = branch not contracted). 2nb x 2nb.
SpR flow_sq_hessian(const AdmittanceModel& m, const VoltageState& v, BranchSide side,
                    const VecR& w);

} // namespace opfs
