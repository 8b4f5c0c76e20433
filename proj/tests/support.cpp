#include "support.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "opfs/textio.hpp"

namespace opfs::test {

namespace fs = std::filesystem;

// ----------------------------------------------------------------- fixtures

std::string data_path(const std::string& name) {
    return std::string(OPFS_DATA_DIR) + "/" + name;
}

const Case& case39() {
    static const Case c = load_case(data_path("case39.m"));
    return c;
}

const Case& case3() {
    static const Case c = load_case(data_path("case3.m"));
    return c;
}

Case two_bus_case() {
    Case c;
    c.base_mva = 100.0;
    Bus b1;
    b1.id = 1;
    b1.vmin = 0.9;
    b1.vmax = 1.1;
    b1.is_ref = true;
    Bus b2 = b1;
    b2.id = 2;
    b2.is_ref = false;
    b2.pd = 1.0; // 100 MW
    c.buses = {b1, b2};
    Branch br;
    br.from = 1;
    br.to = 2;
    br.r = 0.0;
    br.x = 0.1;
    br.rate_a = 2.0;
    c.branches = {br};
    Generator g;
    g.bus = 1;
    g.pmin = 0.0;
    g.pmax = 3.0;
    g.qmin = -2.0;
    g.qmax = 2.0;
    c.generators = {g};
    c.costs = {GenCost{0.01, 10.0, 0.0}};
    finalize_case(c);
    return c;
}

Case scaled_demand(const Case& c, double scale) {
    Case out = c;
    for (auto& b : out.buses) {
        b.pd *= scale;
        b.qd *= scale;
    }
    finalize_case(out);
    return out;
}

// ------------------------------------------------------- finite differences

double central_fd(const std::function<double(double)>& f, double x0, double h) {
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h);
}

double fd_jacobian_gap(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                       const Eigen::VectorXd& x0, const Eigen::MatrixXd& analytic, double h) {
    double worst = 0.0;
    Eigen::VectorXd x = x0;
    for (int j = 0; j < x0.size(); ++j) {
        x[j] = x0[j] + h;
        const Eigen::VectorXd fp = f(x);
        x[j] = x0[j] - h;
        const Eigen::VectorXd fm = f(x);
        x[j] = x0[j];
        for (int i = 0; i < fp.size(); ++i) {
            const double fd = (fp[i] - fm[i]) / (2.0 * h);
            const double gap =
                std::abs(fd - analytic(i, j)) / std::max(1.0, std::abs(analytic(i, j)));
            worst = std::max(worst, gap);
        }
    }
    return worst;
}

// --------------------------------------------- case3 brute-force grid oracle

namespace {

using cplx = std::complex<double>;

// Everything the power flow needs, extracted once per demand point.  The
// admittances are assembled here from branch impedances on purpose: this
// duplicates (independently) what the network module does.
struct Pf3 {
    std::array<std::array<cplx, 3>, 3> Y{};
    struct Br {
        int f = 0, t = 0; // bus positions
        cplx y;
        double bc2 = 0; // half line-charging
        double rate = 0;
    };
    std::array<Br, 3> br{};
    std::array<double, 3> pd{}, qd{};              // p.u. demand per bus
    std::array<double, 3> qmin{}, qmax{};          // one generator per bus
    double pg2 = 0;                                // fixed machine, p.u.
    double pg1_min = 0, pg1_max = 0;
    std::array<double, 3> cost_a{}, cost_b{}, cost_c{};
    double base = 100.0;

    double cost(int g, double pg_pu) const {
        const double mw = pg_pu * base;
        return cost_a[g] * mw * mw + cost_b[g] * mw + cost_c[g];
    }
};

Pf3 make_pf3(const Case& c, const DemandVector& d) {
    Pf3 m;
    m.base = c.base_mva;
    for (int l = 0; l < 3; ++l) {
        const Branch& b = c.branches[l];
        Pf3::Br e;
        e.f = c.bus_pos(b.from);
        e.t = c.bus_pos(b.to);
        e.y = 1.0 / cplx(b.r, b.x);
        e.bc2 = b.b_chg / 2.0;
        e.rate = b.rate_a;
        m.Y[e.f][e.f] += e.y + cplx(0, e.bc2);
        m.Y[e.t][e.t] += e.y + cplx(0, e.bc2);
        m.Y[e.f][e.t] -= e.y;
        m.Y[e.t][e.f] -= e.y;
        m.br[l] = e;
    }
    // demand: d covers the n_b buses in ascending id order
    for (size_t k = 0; k < c.n_b.size(); ++k) {
        m.pd[c.n_b[k]] = d.pd[static_cast<int>(k)];
        m.qd[c.n_b[k]] = d.qd[static_cast<int>(k)];
    }
    for (int g = 0; g < 3; ++g) {
        const int pos = c.bus_pos(c.generators[g].bus);
        m.qmin[pos] = c.generators[g].qmin;
        m.qmax[pos] = c.generators[g].qmax;
    }
    m.pg2 = c.generators[1].pmin; // Pmin == Pmax: fixed output
    m.pg1_min = c.generators[0].pmin;
    m.pg1_max = c.generators[0].pmax;
    for (int g = 0; g < 3; ++g) {
        m.cost_a[g] = c.costs[g].a;
        m.cost_b[g] = c.costs[g].b;
        m.cost_c[g] = c.costs[g].c;
    }
    return m;
}

struct PfPoint {
    bool converged = false;
    std::array<double, 3> th{}, P{}, Q{};
    std::array<cplx, 3> V{};
};

// Newton power flow: th1 = 0 and all three vm fixed; unknowns th2, th3 solve
// the real-power balance at buses 2 and 3.
PfPoint newton_pf(const Pf3& m, const std::array<double, 3>& vm, double pg3) {
    PfPoint r;
    r.th = {0.0, 0.0, 0.0};
    const double target2 = m.pg2 - m.pd[1];
    const double target3 = pg3 - m.pd[2];
    for (int it = 0; it < 40; ++it) {
        for (int i = 0; i < 3; ++i) r.V[i] = std::polar(vm[i], r.th[i]);
        std::array<cplx, 3> S{};
        for (int i = 0; i < 3; ++i) {
            cplx I = 0;
            for (int j = 0; j < 3; ++j) I += m.Y[i][j] * r.V[j];
            S[i] = r.V[i] * std::conj(I);
        }
        for (int i = 0; i < 3; ++i) {
            r.P[i] = S[i].real();
            r.Q[i] = S[i].imag();
        }
        const double f2 = r.P[1] - target2;
        const double f3 = r.P[2] - target3;
        if (std::max(std::abs(f2), std::abs(f3)) < 1e-11) {
            r.converged = true;
            return r;
        }
        // dP_i/dth_j from the standard polar expressions.
        auto dP = [&](int i, int j) {
            const cplx Yij = m.Y[i][j];
            const double G = Yij.real(), B = Yij.imag();
            const double tij = r.th[i] - r.th[j];
            if (i == j) return -r.Q[i] - B * vm[i] * vm[i];
            return vm[i] * vm[j] * (G * std::sin(tij) - B * std::cos(tij));
        };
        const double a = dP(1, 1), b = dP(1, 2), c2 = dP(2, 1), d2 = dP(2, 2);
        const double det = a * d2 - b * c2;
        if (!(std::abs(det) > 1e-14)) return r;
        const double s2 = (-f2 * d2 + f3 * b) / det;
        const double s3 = (-a * f3 + c2 * f2) / det;
        if (!std::isfinite(s2) || !std::isfinite(s3) || std::abs(s2) > 10 || std::abs(s3) > 10)
            return r;
        r.th[1] += s2;
        r.th[2] += s3;
    }
    return r;
}

struct Probe {
    bool feasible = false;
    double objective = 0;
    double pg1 = 0;
    std::array<double, 3> flow_slack{};
};

Probe probe(const Pf3& m, const std::array<double, 3>& vm, double pg3) {
    Probe out;
    const PfPoint p = newton_pf(m, vm, pg3);
    if (!p.converged) return out;
    constexpr double tol = 1e-9;
    out.pg1 = p.P[0] + m.pd[0];
    if (out.pg1 < m.pg1_min - tol || out.pg1 > m.pg1_max + tol) return out;
    for (int i = 0; i < 3; ++i) {
        const double qg = p.Q[i] + m.qd[i];
        if (qg < m.qmin[i] - tol || qg > m.qmax[i] + tol) return out;
    }
    for (int l = 0; l < 3; ++l) {
        const auto& e = m.br[l];
        const cplx If = e.y * (p.V[e.f] - p.V[e.t]) + cplx(0, e.bc2) * p.V[e.f];
        const cplx It = e.y * (p.V[e.t] - p.V[e.f]) + cplx(0, e.bc2) * p.V[e.t];
        const double s = std::max(std::abs(p.V[e.f] * std::conj(If)),
                                  std::abs(p.V[e.t] * std::conj(It)));
        out.flow_slack[l] = e.rate - s;
        if (s > e.rate + tol) return out;
    }
    out.feasible = true;
    out.objective = m.cost(0, out.pg1) + m.cost(1, m.pg2) + m.cost(2, pg3);
    return out;
}

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * i / (n - 1);
    return v;
}

} // namespace

GridOracle grid_search_case3(const Case& c3, const DemandVector& d) {
    const Pf3 m = make_pf3(c3, d);
    std::array<double, 4> lo{c3.buses[0].vmin, c3.buses[1].vmin, c3.buses[2].vmin,
                             c3.generators[2].pmin};
    std::array<double, 4> hi{c3.buses[0].vmax, c3.buses[1].vmax, c3.buses[2].vmax,
                             c3.generators[2].pmax};

    struct Cand {
        std::array<double, 4> u{};
        double obj = 0;
    };
    std::vector<Cand> feas;

    // Coarse sweep with exact bound endpoints on every axis.
    const auto ax0 = linspace(lo[0], hi[0], 17);
    const auto ax1 = linspace(lo[1], hi[1], 17);
    const auto ax2 = linspace(lo[2], hi[2], 17);
    const auto ax3 = linspace(lo[3], hi[3], 41);
    for (double v1 : ax0)
        for (double v2 : ax1)
            for (double v3 : ax2)
                for (double p3 : ax3) {
                    const Probe pr = probe(m, {v1, v2, v3}, p3);
                    if (pr.feasible) feas.push_back({{v1, v2, v3, p3}, pr.objective});
                }

    GridOracle out;
    if (feas.empty()) return out;
    std::sort(feas.begin(), feas.end(), [](const Cand& a, const Cand& b) { return a.obj < b.obj; });

    // Multistart: the best coarse cell plus up to two more that sit well away
    // from every already-chosen start (hedges against a non-global basin).
    std::array<double, 4> step0{(hi[0] - lo[0]) / 16, (hi[1] - lo[1]) / 16, (hi[2] - lo[2]) / 16,
                                (hi[3] - lo[3]) / 40};
    std::vector<Cand> starts{feas.front()};
    for (const Cand& c : feas) {
        if (starts.size() >= 3) break;
        bool far = true;
        for (const Cand& s : starts) {
            double dist = 0;
            for (int a = 0; a < 4; ++a) dist = std::max(dist, std::abs(c.u[a] - s.u[a]) / step0[a]);
            if (dist < 2.5) far = false;
        }
        if (far) starts.push_back(c);
    }

    // The objective is nearly flat in the voltage controls and the feasible
    // set near the optimum can be a thin sliver along a reactive-absorption
    // limit, so coarse cells may sit far from the optimum: add upper-voltage
    // corner seeds (allowed to start infeasible) and refine with a pattern
    // search that keeps its window size as long as the stage improves the
    // best point, shrinking only when a whole stencil fails to improve --
    // a tilted valley floor is walked at constant step instead of being
    // abandoned by premature shrinking.
    const double kInf = std::numeric_limits<double>::infinity();
    starts.push_back({{hi[0], hi[1], hi[2], feas.front().u[3]}, kInf});
    starts.push_back({{hi[0] - step0[0], hi[1] - step0[1], hi[2] - step0[2], feas.front().u[3]},
                      kInf});

    Cand best = feas.front();
    for (const Cand& st : starts) {
        Cand cur = st;
        std::array<double, 4> w{4 * step0[0], 4 * step0[1], 4 * step0[2], 4 * step0[3]};
        for (int stage = 0; stage < 80; ++stage) {
            if (std::max(std::max(w[0], w[1]), std::max(w[2], w[3] / 5.0)) < 4e-5) break;
            std::array<std::vector<double>, 4> g;
            for (int a = 0; a < 4; ++a)
                g[a] = linspace(std::max(lo[a], cur.u[a] - w[a]),
                                std::min(hi[a], cur.u[a] + w[a]), 9);
            Cand b = cur;
            for (double v1 : g[0])
                for (double v2 : g[1])
                    for (double v3 : g[2])
                        for (double p3 : g[3]) {
                            const Probe pr = probe(m, {v1, v2, v3}, p3);
                            if (pr.feasible && pr.objective < b.obj)
                                b = {{v1, v2, v3, p3}, pr.objective};
                        }
            const bool improved = b.obj < cur.obj - 1e-9;
            cur = b;
            if (!improved)
                for (double& x : w) x *= 0.5;
        }
        if (cur.obj < best.obj) best = cur;
    }

    const Probe pr = probe(m, {best.u[0], best.u[1], best.u[2]}, best.u[3]);
    out.feasible_found = pr.feasible;
    out.objective = pr.objective;
    out.vm = {best.u[0], best.u[1], best.u[2]};
    out.pg1 = pr.pg1;
    out.pg3 = best.u[3];
    for (int i = 0; i < 3; ++i) {
        out.vmax_slack[i] = c3.buses[i].vmax - out.vm[i];
        out.vmin_slack[i] = out.vm[i] - c3.buses[i].vmin;
    }
    out.flow_slack = pr.flow_slack;
    return out;
}

// ------------------------------------------------------------- CLI plumbing

int run_cli(const std::string& args, std::string* output) {
#ifdef OPFS_CLI_PATH
    const fs::path tmp =
        fs::temp_directory_path() / ("opfs_cli_out_" + std::to_string(::getpid()) + "_" +
                                     std::to_string(std::rand()));
    const std::string cmd =
        std::string(OPFS_CLI_PATH) + " " + args + " > " + tmp.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    if (output) {
        std::error_code ec;
        *output = fs::exists(tmp, ec) ? slurp(tmp.string()) : std::string();
    }
    std::error_code ec;
    fs::remove(tmp, ec);
    if (raw == -1) return -1;
    if (WIFEXITED(raw)) return WEXITSTATUS(raw);
    return -2;
#else
    (void)args;
    (void)output;
    throw std::runtime_error("run_cli: OPFS_CLI_PATH not compiled into this binary");
#endif
}

TempDir::TempDir() {
    static std::mt19937_64 gen{std::random_device{}()};
    const fs::path p =
        fs::temp_directory_path() / ("opfs_test_" + std::to_string(gen() >> 16));
    fs::create_directories(p);
    path = p.string();
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
}

std::string slurp(const std::string& path) { return read_file(path); }

} // namespace opfs::test
