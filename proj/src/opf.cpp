#include "opfs/opf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

#include <Eigen/SparseLU>
#include <json.hpp>

#include "opfs/textio.hpp"

namespace opfs {

namespace {

constexpr double kFixedTol = 1e-9; // bounds tighter than this become equality rows

struct ProblemMap {
    int nb = 0, ng = 0;
    int n = 0, ne = 0, ni = 0;
    std::vector<int> free_p, fixed_p, free_q, fixed_q; // generator indices
    int nvb = 0, nfb = 0;
    // inequality segment offsets (see opf.hpp ordering)
    int off_vmax = 0, off_vmin = 0, off_ff = 0, off_ft = 0;
    int off_pgu = 0, off_pgl = 0, off_qgu = 0, off_qgl = 0;
    // equality extra-row offsets
    int row_ref = 0, row_fixed_p = 0, row_fixed_q = 0;
};

ProblemMap make_map(const Case& c, const ConstraintSet& cs) {
    ProblemMap pm;
    pm.nb = c.nb();
    pm.ng = c.ng();
    pm.n = 2 * pm.nb + 2 * pm.ng;
    for (int g = 0; g < pm.ng; ++g) {
        const auto& gen = c.generators[g];
        (gen.pmax - gen.pmin <= kFixedTol ? pm.fixed_p : pm.free_p).push_back(g);
        (gen.qmax - gen.qmin <= kFixedTol ? pm.fixed_q : pm.free_q).push_back(g);
    }
    pm.row_ref = 2 * pm.nb;
    pm.row_fixed_p = pm.row_ref + 1;
    pm.row_fixed_q = pm.row_fixed_p + static_cast<int>(pm.fixed_p.size());
    pm.ne = pm.row_fixed_q + static_cast<int>(pm.fixed_q.size());

    pm.nvb = static_cast<int>(cs.voltage_buses.size());
    pm.nfb = static_cast<int>(cs.flow_branches.size());
    pm.off_vmax = 0;
    pm.off_vmin = pm.off_vmax + pm.nvb;
    pm.off_ff = pm.off_vmin + pm.nvb;
    pm.off_ft = pm.off_ff + pm.nfb;
    pm.off_pgu = pm.off_ft + pm.nfb;
    pm.off_pgl = pm.off_pgu + static_cast<int>(pm.free_p.size());
    pm.off_qgu = pm.off_pgl + static_cast<int>(pm.free_p.size());
    pm.off_qgl = pm.off_qgu + static_cast<int>(pm.free_q.size());
    pm.ni = pm.off_qgl + static_cast<int>(pm.free_q.size());
    return pm;
}

struct EvalResult {
    double f = 0;
    VecR df, g, h;
    SpR Jg, Jh;
};

VoltageState unpack_voltage(const ProblemMap& pm, const VecR& x) {
    VoltageState v;
    v.theta = x.segment(0, pm.nb);
    v.vm = x.segment(pm.nb, pm.nb);
    return v;
}

EvalResult evaluate(const Case& c, const AdmittanceModel& m, const ProblemMap& pm,
                    const ConstraintSet& cs, const VecR& x) {
    const double base = c.base_mva;
    EvalResult ev;
    const VoltageState v = unpack_voltage(pm, x);
    const auto pg = x.segment(2 * pm.nb, pm.ng);
    const auto qg = x.segment(2 * pm.nb + pm.ng, pm.ng);

    // Objective and gradient ($/h; pg in p.u., costs per MW).
    ev.f = 0;
    ev.df = VecR::Zero(pm.n);
    for (int g = 0; g < pm.ng; ++g) {
        const double pmw = pg[g] * base;
        ev.f += c.costs[g].a * pmw * pmw + c.costs[g].b * pmw + c.costs[g].c;
        ev.df[2 * pm.nb + g] = (2.0 * c.costs[g].a * pmw + c.costs[g].b) * base;
    }

    const InjectionJacobian inj = injection_jacobian(m, v);

    // Equalities.
    ev.g = VecR::Zero(pm.ne);
    std::vector<Eigen::Triplet<double>> tg;
    for (int i = 0; i < pm.nb; ++i) {
        ev.g[i] = inj.S[i].real() + c.buses[i].pd;
        ev.g[pm.nb + i] = inj.S[i].imag() + c.buses[i].qd;
    }
    for (int g = 0; g < pm.ng; ++g) {
        const int pos = c.bus_pos(c.generators[g].bus);
        ev.g[pos] -= pg[g];
        ev.g[pm.nb + pos] -= qg[g];
        tg.emplace_back(pos, 2 * pm.nb + g, -1.0);
        tg.emplace_back(pm.nb + pos, 2 * pm.nb + pm.ng + g, -1.0);
    }
    for (int col = 0; col < inj.dS_dth.outerSize(); ++col)
        for (SpC::InnerIterator it(inj.dS_dth, col); it; ++it) {
            tg.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                            it.value().real());
            tg.emplace_back(pm.nb + static_cast<int>(it.row()), static_cast<int>(it.col()),
                            it.value().imag());
        }
    for (int col = 0; col < inj.dS_dvm.outerSize(); ++col)
        for (SpC::InnerIterator it(inj.dS_dvm, col); it; ++it) {
            tg.emplace_back(static_cast<int>(it.row()), pm.nb + static_cast<int>(it.col()),
                            it.value().real());
            tg.emplace_back(pm.nb + static_cast<int>(it.row()),
                            pm.nb + static_cast<int>(it.col()), it.value().imag());
        }
    ev.g[pm.row_ref] = v.theta[c.ref_bus];
    tg.emplace_back(pm.row_ref, c.ref_bus, 1.0);
    for (size_t k = 0; k < pm.fixed_p.size(); ++k) {
        const int g = pm.fixed_p[k];
        const auto& gen = c.generators[g];
        ev.g[pm.row_fixed_p + static_cast<int>(k)] = pg[g] - 0.5 * (gen.pmin + gen.pmax);
        tg.emplace_back(pm.row_fixed_p + static_cast<int>(k), 2 * pm.nb + g, 1.0);
    }
    for (size_t k = 0; k < pm.fixed_q.size(); ++k) {
        const int g = pm.fixed_q[k];
        const auto& gen = c.generators[g];
        ev.g[pm.row_fixed_q + static_cast<int>(k)] = qg[g] - 0.5 * (gen.qmin + gen.qmax);
        tg.emplace_back(pm.row_fixed_q + static_cast<int>(k), 2 * pm.nb + pm.ng + g, 1.0);
    }
    ev.Jg.resize(pm.ne, pm.n);
    ev.Jg.setFromTriplets(tg.begin(), tg.end());

    // Inequalities.
    ev.h = VecR::Zero(pm.ni);
    std::vector<Eigen::Triplet<double>> th;
    for (int k = 0; k < pm.nvb; ++k) {
        const int i = cs.voltage_buses[k];
        ev.h[pm.off_vmax + k] = v.vm[i] - c.buses[i].vmax;
        ev.h[pm.off_vmin + k] = c.buses[i].vmin - v.vm[i];
        th.emplace_back(pm.off_vmax + k, pm.nb + i, 1.0);
        th.emplace_back(pm.off_vmin + k, pm.nb + i, -1.0);
    }
    if (pm.nfb > 0) {
        const FlowJacobian fj = flow_jacobian(m, v);
        // Flow rows are normalized by rate_a^2 so every inequality row is O(1);
        // same feasible set, far better barrier/KKT conditioning on cases whose
        // ratings span orders of magnitude.
        auto add_flow_rows = [&](int off, const VecC& S, const SpC& dth, const SpC& dvm) {
            // Map branch -> local row once, then scatter 2 Re(conj(S) dS) / fmax^2.
            std::vector<int> local(m.nl, -1);
            std::vector<double> wrow(m.nl, 0.0);
            for (int k = 0; k < pm.nfb; ++k) {
                const int l = cs.flow_branches[k];
                const double fmax = c.branches[l].rate_a;
                local[l] = k;
                wrow[l] = 1.0 / (fmax * fmax);
                ev.h[off + k] = std::norm(S[l]) * wrow[l] - 1.0;
            }
            for (int col = 0; col < dth.outerSize(); ++col)
                for (SpC::InnerIterator it(dth, col); it; ++it) {
                    const int k = local[static_cast<int>(it.row())];
                    if (k < 0) continue;
                    const cplx s = S[it.row()];
                    th.emplace_back(off + k, static_cast<int>(it.col()),
                                    2.0 * wrow[it.row()] *
                                        (s.real() * it.value().real() +
                                         s.imag() * it.value().imag()));
                }
            for (int col = 0; col < dvm.outerSize(); ++col)
                for (SpC::InnerIterator it(dvm, col); it; ++it) {
                    const int k = local[static_cast<int>(it.row())];
                    if (k < 0) continue;
                    const cplx s = S[it.row()];
                    th.emplace_back(off + k, pm.nb + static_cast<int>(it.col()),
                                    2.0 * wrow[it.row()] *
                                        (s.real() * it.value().real() +
                                         s.imag() * it.value().imag()));
                }
        };
        add_flow_rows(pm.off_ff, fj.Sf, fj.dSf_dth, fj.dSf_dvm);
        add_flow_rows(pm.off_ft, fj.St, fj.dSt_dth, fj.dSt_dvm);
    }
    for (size_t k = 0; k < pm.free_p.size(); ++k) {
        const int g = pm.free_p[k];
        const auto& gen = c.generators[g];
        ev.h[pm.off_pgu + static_cast<int>(k)] = pg[g] - gen.pmax;
        ev.h[pm.off_pgl + static_cast<int>(k)] = gen.pmin - pg[g];
        th.emplace_back(pm.off_pgu + static_cast<int>(k), 2 * pm.nb + g, 1.0);
        th.emplace_back(pm.off_pgl + static_cast<int>(k), 2 * pm.nb + g, -1.0);
    }
    for (size_t k = 0; k < pm.free_q.size(); ++k) {
        const int g = pm.free_q[k];
        const auto& gen = c.generators[g];
        ev.h[pm.off_qgu + static_cast<int>(k)] = qg[g] - gen.qmax;
        ev.h[pm.off_qgl + static_cast<int>(k)] = gen.qmin - qg[g];
        th.emplace_back(pm.off_qgu + static_cast<int>(k), 2 * pm.nb + pm.ng + g, 1.0);
        th.emplace_back(pm.off_qgl + static_cast<int>(k), 2 * pm.nb + pm.ng + g, -1.0);
    }
    ev.Jh.resize(pm.ni, pm.n);
    ev.Jh.setFromTriplets(th.begin(), th.end());
    return ev;
}

// Hessian of the Lagrangian f + lam'g + z'h w.r.t. x.
SpR lagrangian_hessian(const Case& c, const AdmittanceModel& m, const ProblemMap& pm,
                       const ConstraintSet& cs, const VecR& x, const VecR& lam, const VecR& z) {
    const double base = c.base_mva;
    const VoltageState v = unpack_voltage(pm, x);
    const VecR lamP = lam.segment(0, pm.nb);
    const VecR lamQ = lam.segment(pm.nb, pm.nb);

    SpR Hvv = injection_hessian(m, v, lamP, lamQ); // 2nb x 2nb
    if (pm.nfb > 0) {
        VecR wf = VecR::Zero(m.nl), wt = VecR::Zero(m.nl);
        bool any_f = false, any_t = false;
        for (int k = 0; k < pm.nfb; ++k) {
            const int l = cs.flow_branches[k];
            const double fmax = c.branches[l].rate_a;
            const double w = 1.0 / (fmax * fmax); // rows normalized by rate_a^2
            wf[l] = z[pm.off_ff + k] * w;
            wt[l] = z[pm.off_ft + k] * w;
            any_f = any_f || wf[l] != 0;
            any_t = any_t || wt[l] != 0;
        }
        if (any_f) Hvv = Hvv + flow_sq_hessian(m, v, BranchSide::from_end, wf);
        if (any_t) Hvv = Hvv + flow_sq_hessian(m, v, BranchSide::to_end, wt);
    }

    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<size_t>(Hvv.nonZeros()) + pm.ng);
    for (int col = 0; col < Hvv.outerSize(); ++col)
        for (SpR::InnerIterator it(Hvv, col); it; ++it)
            t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    for (int g = 0; g < pm.ng; ++g) {
        const double d2 = 2.0 * c.costs[g].a * base * base;
        if (d2 != 0) t.emplace_back(2 * pm.nb + g, 2 * pm.nb + g, d2);
    }
    SpR H(pm.n, pm.n);
    H.setFromTriplets(t.begin(), t.end());
    return H;
}

double inf_norm(const VecR& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

} // namespace

const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::converged: return "converged";
        case SolveStatus::max_iter: return "max_iter";
        default: return "numerical_failure";
    }
}

ConstraintSet full_constraint_set(const Case& c) {
    ConstraintSet cs;
    cs.voltage_buses.resize(c.nb());
    for (int i = 0; i < c.nb(); ++i) cs.voltage_buses[i] = i;
    for (int l = 0; l < c.nl(); ++l)
        if (c.branches[l].rate_a > 0) cs.flow_branches.push_back(l);
    return cs;
}

ConstraintSet make_constraint_set(const Case& c, std::vector<int> voltage_buses,
                                  std::vector<int> flow_branches) {
    auto norm = [](std::vector<int>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    norm(voltage_buses);
    norm(flow_branches);
    for (int i : voltage_buses)
        if (i < 0 || i >= c.nb())
            throw DataError("constraint set: voltage bus index out of range: " +
                            std::to_string(i));
    for (int l : flow_branches) {
        if (l < 0 || l >= c.nl())
            throw DataError("constraint set: branch index out of range: " + std::to_string(l));
        if (!(c.branches[l].rate_a > 0))
            throw DataError("constraint set: branch " + std::to_string(l) +
                            " has no flow limit (rate_a = 0)");
    }
    ConstraintSet cs;
    cs.voltage_buses = std::move(voltage_buses);
    cs.flow_branches = std::move(flow_branches);
    return cs;
}

OpfVariables flat_start(const Case& c) {
    OpfVariables v;
    v.theta = VecR::Zero(c.nb());
    v.vm.resize(c.nb());
    for (int i = 0; i < c.nb(); ++i) v.vm[i] = 0.5 * (c.buses[i].vmin + c.buses[i].vmax);
    v.pg.resize(c.ng());
    v.qg.resize(c.ng());
    for (int g = 0; g < c.ng(); ++g) {
        v.pg[g] = 0.5 * (c.generators[g].pmin + c.generators[g].pmax);
        v.qg[g] = 0.5 * (c.generators[g].qmin + c.generators[g].qmax);
    }
    return v;
}

double objective_value(const Case& c, const VecR& pg) {
    double f = 0;
    for (int g = 0; g < c.ng(); ++g) {
        const double pmw = pg[g] * c.base_mva;
        f += c.costs[g].a * pmw * pmw + c.costs[g].b * pmw + c.costs[g].c;
    }
    return f;
}

OpfSolution solve_opf(const Case& c, const ConstraintSet& cs,
                      const std::optional<OpfVariables>& start, const SolverConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const AdmittanceModel m = build_admittance(c);
    const ProblemMap pm = make_map(c, cs);

    OpfSolution sol;
    sol.feval_count = 0;

    // Primal start.
    OpfVariables v0 = start ? *start : flat_start(c);
    if (start) {
        if (v0.theta.size() != pm.nb || v0.vm.size() != pm.nb || v0.pg.size() != pm.ng ||
            v0.qg.size() != pm.ng)
            throw DataError("solve_opf: start point dimensions do not match the case");
        if (!(v0.vm.minCoeff() > 0)) throw DataError("solve_opf: start has nonpositive vm");
        v0.theta[c.ref_bus] = 0.0;
    }
    VecR x(pm.n);
    x << v0.theta, v0.vm, v0.pg, v0.qg;

    EvalResult ev = evaluate(c, m, pm, cs, x);
    sol.feval_count += pm.ne + pm.ni;

    // Slack/multiplier init (z0 = 1 convention).
    const double z0 = 1.0;
    VecR s = VecR::Constant(pm.ni, z0);
    for (int i = 0; i < pm.ni; ++i)
        if (-ev.h[i] > z0) s[i] = -ev.h[i];
    VecR z = VecR::Constant(pm.ni, z0);
    VecR lam = VecR::Zero(pm.ne);
    double gamma = 1.0;

    // OPFS_TRACE=1 prints per-iteration residuals to stderr (debug aid).
    const bool trace = std::getenv("OPFS_TRACE") != nullptr;
    auto residuals = [&](double f_prev, bool with_cost, int it) {
        VecR Lx = ev.df + ev.Jg.transpose() * lam;
        if (pm.ni > 0) Lx += ev.Jh.transpose() * z;
        const double hmax = pm.ni > 0 ? ev.h.maxCoeff() : 0.0;
        const double feascond =
            std::max(inf_norm(ev.g), hmax) / (1.0 + std::max(inf_norm(x), inf_norm(s)));
        const double gradcond = inf_norm(Lx) / (1.0 + std::max(inf_norm(lam), inf_norm(z)));
        const double compcond = (pm.ni > 0 ? s.dot(z) : 0.0) / (1.0 + inf_norm(x));
        const double costcond = with_cost
                                    ? std::abs(ev.f - f_prev) / (1.0 + std::abs(f_prev))
                                    : std::numeric_limits<double>::infinity();
        if (trace)
            std::fprintf(stderr,
                         "it %3d  f=%.10e feas=%.3e grad=%.3e comp=%.3e cost=%.3e gamma=%.3e\n",
                         it, ev.f, feascond, gradcond, compcond, costcond, gamma);
        const bool ok = feascond < cfg.feastol && gradcond < cfg.gradtol &&
                        compcond < cfg.comptol && (!with_cost || costcond < cfg.costtol);
        return ok;
    };

    bool converged = residuals(ev.f, false, 0);
    SolveStatus status = converged ? SolveStatus::converged : SolveStatus::max_iter;
    int iter = 0;

    while (!converged && iter < cfg.max_iter) {
        ++iter;

        const SpR H = lagrangian_hessian(c, m, pm, cs, x, lam, z);

        // Reduced KKT system.
        SpR M = H;
        VecR N = ev.df + ev.Jg.transpose() * lam;
        if (pm.ni > 0) {
            const VecR zs = z.cwiseQuotient(s);
            M = SpR(H + SpR(ev.Jh.transpose() * zs.asDiagonal() * ev.Jh));
            N += ev.Jh.transpose() * z +
                 ev.Jh.transpose() *
                     ((z.cwiseProduct(ev.h) + VecR::Constant(pm.ni, gamma)).cwiseQuotient(s));
        }
        VecR rhs(pm.n + pm.ne);
        rhs << -N, -ev.g;

        VecR step;
        bool solved = false;
        double reg = 0.0;
        while (true) {
            std::vector<Eigen::Triplet<double>> tk;
            tk.reserve(static_cast<size_t>(M.nonZeros() + 2 * ev.Jg.nonZeros()) + pm.n + pm.ne);
            for (int col = 0; col < M.outerSize(); ++col)
                for (SpR::InnerIterator it(M, col); it; ++it)
                    tk.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                                    it.value());
            for (int col = 0; col < ev.Jg.outerSize(); ++col)
                for (SpR::InnerIterator it(ev.Jg, col); it; ++it) {
                    tk.emplace_back(pm.n + static_cast<int>(it.row()),
                                    static_cast<int>(it.col()), it.value());
                    tk.emplace_back(static_cast<int>(it.col()),
                                    pm.n + static_cast<int>(it.row()), it.value());
                }
            if (reg > 0) {
                for (int i = 0; i < pm.n; ++i) tk.emplace_back(i, i, reg);
                for (int i = 0; i < pm.ne; ++i) tk.emplace_back(pm.n + i, pm.n + i, -reg);
            }
            SpR K(pm.n + pm.ne, pm.n + pm.ne);
            K.setFromTriplets(tk.begin(), tk.end());
            K.makeCompressed();
            Eigen::SparseLU<SpR> lu;
            lu.compute(K);
            if (lu.info() == Eigen::Success) {
                step = lu.solve(rhs);
                const double resid = inf_norm(VecR(K * step - rhs));
                if (step.allFinite() && resid <= 1e-6 * std::max(1.0, inf_norm(rhs))) {
                    solved = true;
                    break;
                }
            }
            reg = (reg == 0.0) ? cfg.reg_init : reg * 10.0;
            if (reg > cfg.reg_max) break;
        }
        if (!solved) {
            status = SolveStatus::numerical_failure;
            break;
        }

        const VecR dx = step.segment(0, pm.n);
        const VecR dlam = step.segment(pm.n, pm.ne);
        VecR ds(pm.ni), dz(pm.ni);
        if (pm.ni > 0) {
            ds = -ev.h - s - ev.Jh * dx;
            dz = -z + (VecR::Constant(pm.ni, gamma) - z.cwiseProduct(ds)).cwiseQuotient(s);
        }

        double alpha_p = 1.0, alpha_d = 1.0;
        for (int i = 0; i < pm.ni; ++i) {
            if (ds[i] < 0) alpha_p = std::min(alpha_p, cfg.xi * s[i] / -ds[i]);
            if (dz[i] < 0) alpha_d = std::min(alpha_d, cfg.xi * z[i] / -dz[i]);
        }
        // Keep vm strictly positive (VoltageState invariant), independent of
        // whether this bus's voltage bounds are enforced.
        for (int i = 0; i < pm.nb; ++i) {
            const double dvm = dx[pm.nb + i];
            if (dvm < 0) alpha_p = std::min(alpha_p, cfg.xi * x[pm.nb + i] / -dvm);
        }

        // Residual-safeguarded primal step: the fraction-to-boundary rule
        // protects the inequality slacks, but nothing above bounds how far one
        // Newton step may throw the nonlinear power-balance residual.  Halve
        // the primal step until that residual stays within a fixed growth
        // factor; near a solution the Newton step contracts it, so the guard
        // is inactive there and local convergence is unaffected.  The accepted
        // trial evaluation doubles as the next iterate's evaluation.
        EvalResult ev_next;
        {
            const double allow = std::max(10.0 * inf_norm(ev.g), cfg.feastol);
            for (int bt = 0;; ++bt) {
                ev_next = evaluate(c, m, pm, cs, VecR(x + alpha_p * dx));
                sol.feval_count += pm.ne + pm.ni;
                if ((ev_next.g.allFinite() && inf_norm(ev_next.g) <= allow) || bt >= 30) break;
                alpha_p *= 0.5;
            }
        }

        if (trace)
            std::fprintf(stderr,
                         "        ap=%.3e ad=%.3e |dx|=%.3e |x|=%.3e smax=%.3e zmax=%.3e\n",
                         alpha_p, alpha_d, inf_norm(dx), inf_norm(x), inf_norm(s), inf_norm(z));
        x += alpha_p * dx;
        if (pm.ni > 0) {
            s += alpha_p * ds;
            z += alpha_d * dz;
            // Multiplier safeguard: the fraction-to-boundary rule bounds only
            // negative dz components, so a near-zero slack can catapult its
            // dual upward and (through gamma = sigma s'z/ni) amplify itself.
            // Clamping each product s_i z_i into a wide box around gamma keeps
            // the iterates near the central path; the box never binds on a
            // well-behaved run.
            constexpr double kKappaSigma = 1e4;
            for (int i = 0; i < pm.ni; ++i) {
                const double lo = gamma / (kKappaSigma * s[i]);
                const double hi = kKappaSigma * gamma / s[i];
                z[i] = std::min(std::max(z[i], lo), hi);
            }
        }
        lam += alpha_d * dlam;
        if (pm.ni > 0) gamma = cfg.sigma * s.dot(z) / pm.ni;

        const double f_prev = ev.f;
        ev = std::move(ev_next);
        if (!std::isfinite(ev.f) || !ev.g.allFinite() || (pm.ni > 0 && !ev.h.allFinite())) {
            status = SolveStatus::numerical_failure;
            break;
        }
        converged = residuals(f_prev, true, iter);
        if (converged) status = SolveStatus::converged;
    }
    if (!converged && status != SolveStatus::numerical_failure) status = SolveStatus::max_iter;

    sol.vars.theta = x.segment(0, pm.nb);
    sol.vars.vm = x.segment(pm.nb, pm.nb);
    sol.vars.pg = x.segment(2 * pm.nb, pm.ng);
    sol.vars.qg = x.segment(2 * pm.nb + pm.ng, pm.ng);
    sol.objective = ev.f;
    sol.mult_eq = lam;
    sol.mult_ineq = z;
    sol.slacks = s;
    sol.status = status;
    sol.iterations = iter;
    sol.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return sol;
}

ActivityLabels label_activity(const OpfSolution& sol, const Case& c, double eps_active) {
    if (sol.status != SolveStatus::converged)
        throw SolverError("label_activity requires a converged solution (got " +
                          std::string(to_string(sol.status)) + ")");
    const AdmittanceModel m = build_admittance(c);
    VoltageState v{sol.vars.theta, sol.vars.vm};
    auto [ff, ft] = branch_flows(m, v);

    ActivityLabels lab;
    lab.v_active.resize(c.nb());
    lab.l_active.resize(c.nl());
    for (int i = 0; i < c.nb(); ++i) {
        const double margin = std::min(c.buses[i].vmax - v.vm[i], v.vm[i] - c.buses[i].vmin);
        lab.v_active[i] = margin <= eps_active ? 1 : 0;
    }
    for (int l = 0; l < c.nl(); ++l) {
        const double fmax = c.branches[l].rate_a;
        if (!(fmax > 0)) {
            lab.l_active[l] = 0;
            continue;
        }
        const double margin = fmax - std::max(ff[l], ft[l]);
        lab.l_active[l] = margin <= eps_active * std::max(1.0, fmax) ? 1 : 0;
    }
    return lab;
}

std::vector<Violation> check_violations(const Case& c, const OpfVariables& vars,
                                        const ConstraintSet& full_set, double tol) {
    const AdmittanceModel m = build_admittance(c);
    VoltageState v{vars.theta, vars.vm};
    auto [ff, ft] = branch_flows(m, v);
    std::vector<Violation> out;
    for (int i : full_set.voltage_buses) {
        const double over = v.vm[i] - c.buses[i].vmax;
        const double under = c.buses[i].vmin - v.vm[i];
        if (over > tol) out.push_back({Violation::Kind::vmax, i, over});
        if (under > tol) out.push_back({Violation::Kind::vmin, i, under});
    }
    for (int l : full_set.flow_branches) {
        const double fmax = c.branches[l].rate_a;
        if (!(fmax > 0)) continue;
        const double from_over = ff[l] - fmax;
        const double to_over = ft[l] - fmax;
        if (from_over > tol * std::max(1.0, fmax))
            out.push_back({Violation::Kind::flow_from, l, from_over});
        if (to_over > tol * std::max(1.0, fmax))
            out.push_back({Violation::Kind::flow_to, l, to_over});
    }
    return out;
}

KktResiduals kkt_residuals(const Case& c, const ConstraintSet& cs, const OpfSolution& sol) {
    const AdmittanceModel m = build_admittance(c);
    const ProblemMap pm = make_map(c, cs);
    VecR x(pm.n);
    x << sol.vars.theta, sol.vars.vm, sol.vars.pg, sol.vars.qg;
    const EvalResult ev = evaluate(c, m, pm, cs, x);

    KktResiduals r;
    VecR Lx = ev.df + ev.Jg.transpose() * sol.mult_eq;
    if (pm.ni > 0) Lx += ev.Jh.transpose() * sol.mult_ineq;
    const double hmax = pm.ni > 0 ? ev.h.maxCoeff() : 0.0;
    r.feascond = std::max(inf_norm(ev.g), hmax) /
                 (1.0 + std::max(inf_norm(x), inf_norm(sol.slacks)));
    r.gradcond =
        inf_norm(Lx) / (1.0 + std::max(inf_norm(sol.mult_eq), inf_norm(sol.mult_ineq)));
    r.compcond = (pm.ni > 0 ? sol.slacks.dot(sol.mult_ineq) : 0.0) / (1.0 + inf_norm(x));
    return r;
}

std::string solution_to_json(const OpfSolution& sol, const Case& c) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["status"] = to_string(sol.status);
    j["objective_usd_per_h"] = sol.objective;
    j["iterations"] = sol.iterations;
    j["wall_time_s"] = sol.wall_time; // varies run-to-run; all other fields reproducible
    j["feval_count"] = sol.feval_count;
    auto vec = [](const VecR& v) {
        std::vector<double> out(v.data(), v.data() + v.size());
        return out;
    };
    j["vars"] = {{"theta_rad", vec(sol.vars.theta)},
                 {"vm_pu", vec(sol.vars.vm)},
                 {"pg_pu", vec(sol.vars.pg)},
                 {"qg_pu", vec(sol.vars.qg)}};
    if (sol.status == SolveStatus::converged) {
        const ActivityLabels lab = label_activity(sol, c);
        j["labels"] = {{"v_active", std::vector<int>(lab.v_active.begin(), lab.v_active.end())},
                       {"l_active", std::vector<int>(lab.l_active.begin(), lab.l_active.end())}};
    }
    return j.dump(2) + "\n";
}

} // namespace opfs
