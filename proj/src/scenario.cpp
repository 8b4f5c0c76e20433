#include "opfs/scenario.hpp"

#include <filesystem>

#include <json.hpp>
#include <omp.h>

#include "opfs/textio.hpp"

namespace opfs {

VecR stack_demand(const DemandVector& d) {
    VecR out(d.pd.size() + d.qd.size());
    out << d.pd, d.qd;
    return out;
}

DemandVector unstack_demand(const Case& c, const VecR& stacked) {
    const int n = static_cast<int>(c.n_b.size());
    if (stacked.size() != 2 * n)
        throw DataError("demand vector length " + std::to_string(stacked.size()) +
                        " != 2|n_b| = " + std::to_string(2 * n));
    DemandVector d;
    d.pd = stacked.segment(0, n);
    d.qd = stacked.segment(n, n);
    return d;
}

DemandVector perturb_demand(const Case& c, const ScenarioConfig& cfg, int k) {
    if (!(cfg.range_lo > 0) || !(cfg.range_hi >= cfg.range_lo))
        throw DataError("scenario config: need 0 < range_lo <= range_hi");
    Rng rng = Rng(cfg.seed).split(cfg.stream_tag).split(static_cast<std::uint64_t>(k));
    const int n = static_cast<int>(c.n_b.size());
    DemandVector d;
    d.pd.resize(n);
    d.qd.resize(n);
    double eta_p_shared = 0, eta_q_shared = 0;
    if (cfg.correlation == Correlation::systemwide) {
        eta_p_shared = rng.next_double();
        eta_q_shared = rng.next_double();
    }
    for (int j = 0; j < n; ++j) {
        const Bus& b = c.buses[c.n_b[j]];
        double eta_p, eta_q;
        if (cfg.correlation == Correlation::systemwide) {
            eta_p = eta_p_shared;
            eta_q = eta_q_shared;
        } else {
            eta_p = rng.next_double();
            eta_q = rng.next_double();
        }
        const double plo = cfg.range_lo * b.pd, phi = cfg.range_hi * b.pd;
        const double qlo = cfg.range_lo * b.qd, qhi = cfg.range_hi * b.qd;
        d.pd[j] = plo + eta_p * (phi - plo);
        d.qd[j] = qlo + eta_q * (qhi - qlo);
    }
    return d;
}

Case apply_demand(const Case& c, const DemandVector& d) {
    const int n = static_cast<int>(c.n_b.size());
    if (d.pd.size() != n || d.qd.size() != n)
        throw DataError("apply_demand: demand vector does not match |n_b|");
    Case out = c;
    for (int j = 0; j < n; ++j) {
        out.buses[c.n_b[j]].pd = d.pd[j];
        out.buses[c.n_b[j]].qd = d.qd[j];
    }
    finalize_case(out); // n_b may shrink only if a perturbed demand is exactly 0
    return out;
}

VecR demand_on_nbp(const Case& c, const DemandVector& d) {
    const int np = static_cast<int>(c.n_b_prime.size());
    VecR out = VecR::Zero(2 * np);
    for (int j = 0; j < np; ++j) {
        const int pos = c.n_b_prime[j];
        // Locate pos inside n_b (both sorted by ascending bus id).
        const auto it = std::lower_bound(
            c.n_b.begin(), c.n_b.end(), pos, [&](int a, int b_) {
                return c.buses[a].id < c.buses[b_].id;
            });
        if (it != c.n_b.end() && *it == pos) {
            const int jj = static_cast<int>(it - c.n_b.begin());
            out[j] = d.pd[jj];
            out[np + j] = d.qd[jj];
        }
    }
    return out;
}

VecR generation_on_nbp(const Case& c, const VecR& pg, const VecR& qg) {
    if (pg.size() != c.ng() || qg.size() != c.ng())
        throw DataError("generation_on_nbp: pg/qg length != |n_g|");
    const int np = static_cast<int>(c.n_b_prime.size());
    VecR out = VecR::Zero(2 * np);
    for (int j = 0; j < np; ++j)
        for (int g : c.gens_at_bus[c.n_b_prime[j]]) {
            out[j] += pg[g];
            out[np + j] += qg[g];
        }
    return out;
}

VecR net_injection(const VecR& d_on_nbp, const VecR& g_on_nbp) {
    if (d_on_nbp.size() != g_on_nbp.size())
        throw DataError("net_injection: index-set mismatch (" +
                        std::to_string(d_on_nbp.size()) + " vs " +
                        std::to_string(g_on_nbp.size()) + ")");
    return g_on_nbp - d_on_nbp;
}

Dataset build_dataset(const Case& c, const ScenarioConfig& cfg, const SolverConfig& solver,
                      int workers, double eps_active) {
    if (cfg.count <= 0) throw DataError("scenario config: count must be > 0");
    const int n = cfg.count;
    struct Row {
        bool kept = false;
        SolveStatus status = SolveStatus::numerical_failure;
        VecR d, g, ni;
        std::vector<std::uint8_t> lv, ll;
    };
    std::vector<Row> rows(n);
    const int nthreads = workers > 0 ? workers : omp_get_max_threads();

#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
    for (int k = 0; k < n; ++k) {
        Row& r = rows[k];
        const DemandVector dv = perturb_demand(c, cfg, k);
        const Case sc = apply_demand(c, dv);
        const ConstraintSet full = full_constraint_set(sc);
        const OpfSolution sol = solve_opf(sc, full, std::nullopt, solver);
        r.status = sol.status;
        if (sol.status != SolveStatus::converged) continue;
        const ActivityLabels lab = label_activity(sol, sc, eps_active);
        r.kept = true;
        r.d = stack_demand(dv);
        r.g.resize(2 * c.ng());
        r.g << sol.vars.pg, sol.vars.qg;
        r.ni = net_injection(demand_on_nbp(c, dv),
                             generation_on_nbp(c, sol.vars.pg, sol.vars.qg));
        r.lv = lab.v_active;
        r.ll = lab.l_active;
    }

    Dataset ds;
    ds.requested = n;
    ds.case_hash_ = case_hash(c);
    int kept = 0;
    for (const auto& r : rows) kept += r.kept ? 1 : 0;
    if (kept == 0) {
        std::string diag = "all " + std::to_string(n) + " scenarios infeasible (";
        int shown = 0;
        for (int k = 0; k < n && shown < 5; ++k, ++shown)
            diag += "scenario " + std::to_string(k) + ": " +
                    to_string(rows[k].status) + (shown < 4 && k + 1 < n ? ", " : "");
        throw SolverError(diag + ")");
    }
    ds.D.resize(kept, 2 * static_cast<int>(c.n_b.size()));
    ds.G.resize(kept, 2 * c.ng());
    ds.NI.resize(kept, 2 * static_cast<int>(c.n_b_prime.size()));
    int i = 0;
    for (int k = 0; k < n; ++k) {
        if (!rows[k].kept) {
            ds.dropped.emplace_back(k, rows[k].status);
            continue;
        }
        ds.D.row(i) = rows[k].d;
        ds.G.row(i) = rows[k].g;
        ds.NI.row(i) = rows[k].ni;
        ds.labels_v.push_back(std::move(rows[k].lv));
        ds.labels_l.push_back(std::move(rows[k].ll));
        ds.kept_indices.push_back(k);
        ++i;
    }
    return ds;
}

namespace {

CsvTable matrix_csv(const Eigen::MatrixXd& m, std::vector<std::string> header) {
    CsvTable t;
    t.header = std::move(header);
    t.rows.reserve(static_cast<size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<size_t>(m.cols()));
        for (Eigen::Index ccol = 0; ccol < m.cols(); ++ccol)
            row[static_cast<size_t>(ccol)] = m(r, ccol);
        t.rows.push_back(std::move(row));
    }
    return t;
}

Eigen::MatrixXd csv_matrix(const CsvTable& t) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows.size()),
                      static_cast<Eigen::Index>(t.header.size()));
    for (size_t r = 0; r < t.rows.size(); ++r)
        for (size_t ccol = 0; ccol < t.header.size(); ++ccol)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(ccol)) = t.rows[r][ccol];
    return m;
}

CsvTable labels_csv(const std::vector<std::vector<std::uint8_t>>& lab,
                    std::vector<std::string> header) {
    CsvTable t;
    t.header = std::move(header);
    for (const auto& row : lab) {
        std::vector<double> r(row.size());
        for (size_t j = 0; j < row.size(); ++j) r[j] = row[j];
        t.rows.push_back(std::move(r));
    }
    return t;
}

std::vector<std::vector<std::uint8_t>> csv_labels(const CsvTable& t, const std::string& what) {
    std::vector<std::vector<std::uint8_t>> out;
    for (const auto& row : t.rows) {
        std::vector<std::uint8_t> r(row.size());
        for (size_t j = 0; j < row.size(); ++j) {
            if (row[j] != 0.0 && row[j] != 1.0)
                throw DataError(what + ": label cell is not 0/1");
            r[j] = row[j] != 0.0 ? 1 : 0;
        }
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace

void save_dataset(const std::string& dir, const Dataset& ds, const Case& c,
                  const ScenarioConfig& cfg, const SolverConfig& solver, double eps_active) {
    std::filesystem::create_directories(dir);

    std::vector<std::string> hd, hg, hni, hv, hl;
    for (int pos : c.n_b) hd.push_back("pd_" + std::to_string(c.buses[pos].id));
    for (int pos : c.n_b) hd.push_back("qd_" + std::to_string(c.buses[pos].id));
    for (int g = 0; g < c.ng(); ++g)
        hg.push_back("pg_g" + std::to_string(g) + "_bus" + std::to_string(c.generators[g].bus));
    for (int g = 0; g < c.ng(); ++g)
        hg.push_back("qg_g" + std::to_string(g) + "_bus" + std::to_string(c.generators[g].bus));
    for (int pos : c.n_b_prime) hni.push_back("nip_" + std::to_string(c.buses[pos].id));
    for (int pos : c.n_b_prime) hni.push_back("niq_" + std::to_string(c.buses[pos].id));
    for (const auto& b : c.buses) hv.push_back("v_" + std::to_string(b.id));
    for (int l = 0; l < c.nl(); ++l)
        hl.push_back("l_" + std::to_string(l) + "_" + std::to_string(c.branches[l].from) + "_" +
                     std::to_string(c.branches[l].to));

    write_csv(dir + "/D.csv", matrix_csv(ds.D, hd));
    write_csv(dir + "/G.csv", matrix_csv(ds.G, hg));
    write_csv(dir + "/NI.csv", matrix_csv(ds.NI, hni));
    write_csv(dir + "/labels_v.csv", labels_csv(ds.labels_v, hv));
    write_csv(dir + "/labels_l.csv", labels_csv(ds.labels_l, hl));

    nlohmann::json j;
    j["schema_version"] = 1;
    j["tool_version"] = kToolVersion;
    j["case_hash"] = ds.case_hash_;
    j["seed"] = cfg.seed;
    j["stream_tag"] = cfg.stream_tag;
    j["correlation"] =
        cfg.correlation == Correlation::systemwide ? "systemwide" : "independent_per_bus";
    j["range_lo"] = cfg.range_lo;
    j["range_hi"] = cfg.range_hi;
    j["requested"] = ds.requested;
    j["kept"] = static_cast<int>(ds.kept_indices.size());
    j["kept_indices"] = ds.kept_indices;
    j["dropped"] = nlohmann::json::array();
    for (const auto& [k, st] : ds.dropped)
        j["dropped"].push_back({{"index", k}, {"status", to_string(st)}});
    j["eps_active"] = eps_active;
    j["solver"] = {{"feastol", solver.feastol},   {"gradtol", solver.gradtol},
                   {"comptol", solver.comptol},   {"costtol", solver.costtol},
                   {"max_iter", solver.max_iter}, {"sigma", solver.sigma},
                   {"xi", solver.xi}};
    write_file(dir + "/manifest.json", j.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir, const Case& c) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("dataset manifest parse failure in " + dir + ": " + e.what());
    }
    Dataset ds;
    try {
        ds.case_hash_ = j.at("case_hash").get<std::string>();
        ds.requested = j.at("requested").get<int>();
        ds.kept_indices = j.at("kept_indices").get<std::vector<int>>();
        for (const auto& d : j.at("dropped")) {
            const std::string st = d.at("status").get<std::string>();
            ds.dropped.emplace_back(d.at("index").get<int>(),
                                    st == "max_iter" ? SolveStatus::max_iter
                                                     : SolveStatus::numerical_failure);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("dataset manifest missing fields in " + dir + ": " + e.what());
    }
    if (ds.case_hash_ != case_hash(c))
        throw DataError("dataset in " + dir + " was generated for a different case (hash " +
                        ds.case_hash_ + " != " + case_hash(c) + ")");
    ds.D = csv_matrix(read_csv(dir + "/D.csv"));
    ds.G = csv_matrix(read_csv(dir + "/G.csv"));
    ds.NI = csv_matrix(read_csv(dir + "/NI.csv"));
    ds.labels_v = csv_labels(read_csv(dir + "/labels_v.csv"), dir + "/labels_v.csv");
    ds.labels_l = csv_labels(read_csv(dir + "/labels_l.csv"), dir + "/labels_l.csv");
    const auto rows = ds.D.rows();
    if (ds.G.rows() != rows || ds.NI.rows() != rows ||
        static_cast<Eigen::Index>(ds.labels_v.size()) != rows ||
        static_cast<Eigen::Index>(ds.labels_l.size()) != rows)
        throw DataError("dataset in " + dir + " has inconsistent row counts");
    if (ds.D.cols() != 2 * static_cast<Eigen::Index>(c.n_b.size()) ||
        ds.G.cols() != 2 * c.ng() ||
        ds.NI.cols() != 2 * static_cast<Eigen::Index>(c.n_b_prime.size()))
        throw DataError("dataset in " + dir + " has widths inconsistent with the case");
    return ds;
}

} // namespace opfs
