#include "opfs/network.hpp"

#include <vector>

namespace opfs {

namespace {

SpC spdiag(const VecC& d) {
    SpC m(d.size(), d.size());
    m.reserve(Eigen::VectorXi::Constant(static_cast<int>(d.size()), 1));
    for (int i = 0; i < d.size(); ++i) m.insert(i, i) = d[i];
    m.makeCompressed();
    return m;
}

// Stack four complex blocks into the real 2nb x 2nb [[Re Aa, Re Av],[Re Va, Re Vv]].
SpR real_block2(const SpC& aa, const SpC& av, const SpC& va, const SpC& vv) {
    const int n = static_cast<int>(aa.rows());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(aa.nonZeros() + av.nonZeros() + va.nonZeros() +
                                     vv.nonZeros()));
    auto add = [&](const SpC& blk, int ro, int co) {
        for (int k = 0; k < blk.outerSize(); ++k)
            for (SpC::InnerIterator it(blk, k); it; ++it)
                trip.emplace_back(ro + static_cast<int>(it.row()), co + static_cast<int>(it.col()),
                                  it.value().real());
    };
    add(aa, 0, 0);
    add(av, 0, n);
    add(va, n, 0);
    add(vv, n, n);
    SpR out(2 * n, 2 * n);
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
}

} // namespace

AdmittanceModel build_admittance(const Case& c) {
    AdmittanceModel m;
    m.nb = c.nb();
    m.nl = c.nl();
    m.from_pos.resize(m.nl);
    m.to_pos.resize(m.nl);

    std::vector<Eigen::Triplet<cplx>> tyf, tyt, tcf, tct, tyb;
    tyf.reserve(2 * m.nl);
    tyt.reserve(2 * m.nl);
    for (int l = 0; l < m.nl; ++l) {
        const Branch& br = c.branches[l];
        const int f = c.bus_pos(br.from);
        const int t = c.bus_pos(br.to);
        m.from_pos[l] = f;
        m.to_pos[l] = t;
        const cplx ys = 1.0 / cplx(br.r, br.x);
        const cplx bc(0.0, br.b_chg / 2.0);
        const cplx tap = br.tap * std::exp(cplx(0.0, br.shift));
        const cplx yff = (ys + bc) / (br.tap * br.tap);
        const cplx yft = -ys / std::conj(tap);
        const cplx ytf = -ys / tap;
        const cplx ytt = ys + bc;
        tyf.emplace_back(l, f, yff);
        tyf.emplace_back(l, t, yft);
        tyt.emplace_back(l, f, ytf);
        tyt.emplace_back(l, t, ytt);
        tcf.emplace_back(l, f, cplx(1.0, 0.0));
        tct.emplace_back(l, t, cplx(1.0, 0.0));
        tyb.emplace_back(f, f, yff);
        tyb.emplace_back(f, t, yft);
        tyb.emplace_back(t, f, ytf);
        tyb.emplace_back(t, t, ytt);
    }
    for (int i = 0; i < m.nb; ++i) {
        const Bus& b = c.buses[i];
        if (b.gs != 0 || b.bs != 0) tyb.emplace_back(i, i, cplx(b.gs, b.bs));
    }
    m.Yf.resize(m.nl, m.nb);
    m.Yt.resize(m.nl, m.nb);
    m.Cf.resize(m.nl, m.nb);
    m.Ct.resize(m.nl, m.nb);
    m.Ybus.resize(m.nb, m.nb);
    m.Yf.setFromTriplets(tyf.begin(), tyf.end());
    m.Yt.setFromTriplets(tyt.begin(), tyt.end());
    m.Cf.setFromTriplets(tcf.begin(), tcf.end());
    m.Ct.setFromTriplets(tct.begin(), tct.end());
    m.Ybus.setFromTriplets(tyb.begin(), tyb.end());
    return m;
}

VecC complex_voltage(const VoltageState& v) {
    VecC V(v.vm.size());
    for (int i = 0; i < v.vm.size(); ++i) V[i] = v.vm[i] * std::exp(cplx(0.0, v.theta[i]));
    return V;
}

std::pair<VecR, VecR> injections(const AdmittanceModel& m, const VoltageState& v) {
    const VecC V = complex_voltage(v);
    const VecC S = V.cwiseProduct((m.Ybus * V).conjugate());
    return {S.real(), S.imag()};
}

std::pair<VecC, VecC> flows_complex(const AdmittanceModel& m, const VoltageState& v) {
    const VecC V = complex_voltage(v);
    VecC sf(m.nl), st(m.nl);
    const VecC If = m.Yf * V, It = m.Yt * V;
    for (int l = 0; l < m.nl; ++l) {
        sf[l] = V[m.from_pos[l]] * std::conj(If[l]);
        st[l] = V[m.to_pos[l]] * std::conj(It[l]);
    }
    return {sf, st};
}

std::pair<VecR, VecR> branch_flows(const AdmittanceModel& m, const VoltageState& v) {
    auto [sf, st] = flows_complex(m, v);
    return {sf.cwiseAbs(), st.cwiseAbs()};
}

InjectionJacobian injection_jacobian(const AdmittanceModel& m, const VoltageState& v) {
    const VecC V = complex_voltage(v);
    const VecC Ibus = m.Ybus * V;
    VecC E(m.nb);
    for (int i = 0; i < m.nb; ++i) E[i] = V[i] / std::abs(V[i]);

    const SpC diagV = spdiag(V);
    const SpC diagE = spdiag(E);
    const SpC diagI = spdiag(Ibus);
    const SpC YdV = m.Ybus * diagV;
    const SpC YdE = m.Ybus * diagE;

    InjectionJacobian out;
    out.S = V.cwiseProduct(Ibus.conjugate());
    out.dS_dth = cplx(0.0, 1.0) * (diagV * SpC((SpC(diagI - YdV)).conjugate()));
    out.dS_dvm = SpC(diagV * SpC(YdE.conjugate())) + SpC(spdiag(Ibus.conjugate()) * diagE);
    return out;
}

FlowJacobian flow_jacobian(const AdmittanceModel& m, const VoltageState& v) {
    const VecC V = complex_voltage(v);
    VecC E(m.nb);
    for (int i = 0; i < m.nb; ++i) E[i] = V[i] / std::abs(V[i]);
    const SpC diagV = spdiag(V);
    const SpC diagE = spdiag(E);

    FlowJacobian out;
    auto one_end = [&](const SpC& Ybr, const SpC& Cbr, const std::vector<int>& pos, VecC& Sbr,
                       SpC& dth, SpC& dvm) {
        const VecC Ibr = Ybr * V;
        Sbr.resize(m.nl);
        for (int l = 0; l < m.nl; ++l) Sbr[l] = V[pos[l]] * std::conj(Ibr[l]);
        const SpC diagIc = spdiag(Ibr.conjugate());
        VecC vbr(m.nl), ebr(m.nl);
        for (int l = 0; l < m.nl; ++l) {
            vbr[l] = V[pos[l]];
            ebr[l] = E[pos[l]];
        }
        const SpC diagVbr = spdiag(vbr);
        const SpC YbrdV = Ybr * diagV;
        const SpC YbrdE = Ybr * diagE;
        dth = cplx(0.0, 1.0) *
              (SpC(diagIc * SpC(Cbr * diagV)) - SpC(diagVbr * SpC(YbrdV.conjugate())));
        dvm = SpC(diagVbr * SpC(YbrdE.conjugate())) + SpC(diagIc * SpC(Cbr * diagE));
    };
    one_end(m.Yf, m.Cf, m.from_pos, out.Sf, out.dSf_dth, out.dSf_dvm);
    one_end(m.Yt, m.Ct, m.to_pos, out.St, out.dSt_dth, out.dSt_dvm);
    return out;
}

SpR injection_hessian(const AdmittanceModel& m, const VoltageState& v, const VecR& wp,
                      const VecR& wq) {
    // Hess(wp'P + wq'Q) = Re[ G(wp - j wq) ] where G(lam) is the complex
    // Hessian of lam'S_bus; standard polar-coordinate second-derivative
    // identities.
    const VecC V = complex_voltage(v);
    const VecC Ibus = m.Ybus * V;
    VecC lam(m.nb);
    for (int i = 0; i < m.nb; ++i) lam[i] = cplx(wp[i], -wq[i]);

    const SpC diaglam = spdiag(lam);
    const SpC diagV = spdiag(V);
    const SpC A = spdiag(lam.cwiseProduct(V));
    const SpC B = m.Ybus * diagV;
    const SpC C = A * SpC(B.conjugate());
    const SpC D = SpC(m.Ybus.adjoint()) * diagV;
    const VecC Dlam = D * lam;
    const SpC E = SpC(diagV.conjugate()) * SpC(SpC(D * diaglam) - spdiag(Dlam));
    const SpC F = C - SpC(A * spdiag(Ibus.conjugate()));
    VecC ginv(m.nb);
    for (int i = 0; i < m.nb; ++i) ginv[i] = 1.0 / std::abs(V[i]);
    const SpC G1 = spdiag(ginv);

    const SpC Gaa = E + F;
    const SpC Gva = cplx(0.0, 1.0) * SpC(G1 * SpC(E - F));
    const SpC Gav = SpC(Gva.transpose());
    const SpC Gvv = SpC(G1 * SpC(SpC(C + SpC(C.transpose())) * G1));
    return real_block2(Gaa, Gav, Gva, Gvv);
}

SpR flow_sq_hessian(const AdmittanceModel& m, const VoltageState& v, BranchSide side,
                    const VecR& w) {
    const bool from = (side == BranchSide::from_end);
    const SpC& Ybr = from ? m.Yf : m.Yt;
    const SpC& Cbr = from ? m.Cf : m.Ct;

    const FlowJacobian fj = flow_jacobian(m, v);
    const VecC& Sbr = from ? fj.Sf : fj.St;
    const SpC& dth = from ? fj.dSf_dth : fj.dSt_dth;
    const SpC& dvm = from ? fj.dSf_dvm : fj.dSt_dvm;

    const VecC V = complex_voltage(v);
    // d2(|S|^2) = 2 Re[ conj(S) d2S ] + 2 Re[ dS^T w conj(dS) ]: second
    // derivative of S contracted with conj(S).*w plus the Jacobian outer term.
    VecC lam2(m.nl);
    for (int l = 0; l < m.nl; ++l) lam2[l] = std::conj(Sbr[l]) * w[l];

    const SpC diagV = spdiag(V);
    const SpC A = SpC(SpC(Ybr.adjoint()) * spdiag(lam2)) * Cbr;
    const SpC B = SpC(SpC(diagV.conjugate()) * A) * diagV;
    const VecC AV = A * V;
    const VecC AtVc = SpC(A.transpose()) * V.conjugate();
    const SpC D = spdiag(AV.cwiseProduct(V.conjugate()));
    const SpC E = spdiag(AtVc.cwiseProduct(V));
    const SpC Bt = SpC(B.transpose());
    const SpC F = B + Bt;
    VecC ginv(m.nb);
    for (int i = 0; i < m.nb; ++i) ginv[i] = 1.0 / std::abs(V[i]);
    const SpC G1 = spdiag(ginv);

    const SpC Saa = F - D - E;
    const SpC Sva = cplx(0.0, 1.0) * SpC(G1 * SpC(SpC(B - Bt) - D + E));
    const SpC Sav = SpC(Sva.transpose());
    const SpC Svv = SpC(G1 * SpC(F * G1));

    VecC wc(m.nl);
    for (int l = 0; l < m.nl; ++l) wc[l] = cplx(w[l], 0.0);
    const SpC diagw = spdiag(wc);
    const SpC Jaa = SpC(SpC(dth.transpose()) * diagw) * SpC(dth.conjugate());
    const SpC Jav = SpC(SpC(dth.transpose()) * diagw) * SpC(dvm.conjugate());
    const SpC Jva = SpC(SpC(dvm.transpose()) * diagw) * SpC(dth.conjugate());
    const SpC Jvv = SpC(SpC(dvm.transpose()) * diagw) * SpC(dvm.conjugate());

    SpR H = real_block2(SpC(Saa + Jaa), SpC(Sav + Jav), SpC(Sva + Jva), SpC(Svv + Jvv));
    return SpR(2.0 * H);
}

} // namespace opfs
