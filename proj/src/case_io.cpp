#include "opfs/case_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include <json.hpp>

#include "opfs/textio.hpp"

namespace opfs {

namespace {

constexpr double kPi = 3.14159265358979323846;

// ------------------------------------------------------------ MATPOWER-like
// Hand-rolled scanner for the `mpc.<name> = ...;` block format with %-comments.
struct Cursor {
    const std::string& s;
    size_t i = 0;
    int line = 1, col = 1;

    bool eof() const { return i >= s.size(); }
    char peek() const { return s[i]; }
    void advance() {
        if (s[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
        ++i;
    }
    [[noreturn]] void fail(const std::string& msg) const {
        throw DataError("case parse error at line " + std::to_string(line) + ", col " +
                        std::to_string(col) + ": " + msg);
    }
    void skip_ws_comments() {
        while (!eof()) {
            char c = peek();
            if (c == '%') {
                while (!eof() && peek() != '\n') advance();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                advance();
            } else {
                break;
            }
        }
    }
    bool try_consume(char c) {
        skip_ws_comments();
        if (!eof() && peek() == c) {
            advance();
            return true;
        }
        return false;
    }
    void expect(char c, const char* what) {
        if (!try_consume(c)) fail(std::string("expected '") + c + "' " + what);
    }
    std::string read_word() {
        skip_ws_comments();
        std::string w;
        while (!eof()) {
            char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.') {
                w += c;
                advance();
            } else {
                break;
            }
        }
        return w;
    }
    double read_number() {
        skip_ws_comments();
        if (eof()) fail("unexpected end of file, number expected");
        const char* start = s.c_str() + i;
        char* end = nullptr;
        double v = std::strtod(start, &end);
        if (end == start) fail("number expected");
        size_t n = static_cast<size_t>(end - start);
        for (size_t k = 0; k < n; ++k) advance();
        return v;
    }
};

struct MpBlocks {
    double base_mva = -1;
    std::vector<std::vector<double>> bus, gen, branch, gencost;
    bool has_bus = false, has_gen = false, has_branch = false, has_gencost = false;
};

std::vector<std::vector<double>> read_matrix(Cursor& c) {
    std::vector<std::vector<double>> rows;
    c.expect('[', "to open a matrix block");
    std::vector<double> row;
    while (true) {
        c.skip_ws_comments();
        if (c.eof()) c.fail("unterminated matrix block");
        char ch = c.peek();
        if (ch == ';') {
            c.advance();
            if (!row.empty()) rows.push_back(std::move(row));
            row.clear();
        } else if (ch == ']') {
            c.advance();
            if (!row.empty()) rows.push_back(std::move(row));
            break;
        } else {
            row.push_back(c.read_number());
        }
    }
    return rows;
}

MpBlocks scan_matpower(const std::string& text) {
    Cursor c{text};
    MpBlocks b;
    while (true) {
        c.skip_ws_comments();
        if (c.eof()) break;
        std::string w = c.read_word();
        if (w.empty()) c.fail("unexpected character");
        if (w == "function") { // "function mpc = casename" header
            while (!c.eof() && c.peek() != '\n') c.advance();
            continue;
        }
        if (w.rfind("mpc.", 0) != 0) c.fail("expected an 'mpc.<field>' assignment, got '" + w + "'");
        std::string field = w.substr(4);
        c.expect('=', "after field name");
        if (field == "version") { // quoted string, e.g. '2'
            c.skip_ws_comments();
            if (!c.eof() && c.peek() == '\'') {
                c.advance();
                while (!c.eof() && c.peek() != '\'') c.advance();
                if (c.eof()) c.fail("unterminated version string");
                c.advance();
            } else {
                c.read_number();
            }
            c.expect(';', "after version");
        } else if (field == "baseMVA") {
            b.base_mva = c.read_number();
            c.expect(';', "after baseMVA");
        } else if (field == "bus" || field == "gen" || field == "branch" || field == "gencost") {
            auto rows = read_matrix(c);
            c.expect(';', "after matrix block");
            if (field == "bus") {
                b.bus = std::move(rows);
                b.has_bus = true;
            } else if (field == "gen") {
                b.gen = std::move(rows);
                b.has_gen = true;
            } else if (field == "branch") {
                b.branch = std::move(rows);
                b.has_branch = true;
            } else {
                b.gencost = std::move(rows);
                b.has_gencost = true;
            }
        } else {
            // Unknown block (e.g. bus_name): skip a scalar, string, or matrix.
            c.skip_ws_comments();
            if (!c.eof() && c.peek() == '[') {
                read_matrix(c);
            } else if (!c.eof() && c.peek() == '\'') {
                c.advance();
                while (!c.eof() && c.peek() != '\'') c.advance();
                if (!c.eof()) c.advance();
            } else {
                c.read_number();
            }
            c.expect(';', "after block");
        }
    }
    return b;
}

void need_cols(const std::vector<double>& row, size_t n, const char* table, size_t rowno) {
    if (row.size() < n)
        throw DataError(std::string("case parse error: ") + table + " row " +
                        std::to_string(rowno + 1) + " has " + std::to_string(row.size()) +
                        " columns, need at least " + std::to_string(n));
}

Case case_from_matpower(const std::string& text) {
    MpBlocks b = scan_matpower(text);
    if (b.base_mva <= 0) throw DataError("case parse error: missing or nonpositive mpc.baseMVA");
    if (!b.has_bus || !b.has_gen || !b.has_branch || !b.has_gencost)
        throw DataError("case parse error: bus, gen, branch, and gencost blocks are all required");
    Case c;
    c.base_mva = b.base_mva;
    const double base = c.base_mva;

    for (size_t i = 0; i < b.bus.size(); ++i) {
        const auto& r = b.bus[i];
        need_cols(r, 13, "bus", i);
        int type = static_cast<int>(r[1]);
        if (type == 4)
            throw DataError("validation error: bus " + std::to_string(static_cast<int>(r[0])) +
                            " is isolated (type 4), unsupported");
        Bus bus;
        bus.id = static_cast<int>(r[0]);
        bus.pd = r[2] / base;
        bus.qd = r[3] / base;
        bus.gs = r[4] / base;
        bus.bs = r[5] / base;
        bus.vmax = r[11];
        bus.vmin = r[12];
        bus.is_ref = (type == 3);
        c.buses.push_back(bus);
    }
    for (size_t i = 0; i < b.branch.size(); ++i) {
        const auto& r = b.branch[i];
        need_cols(r, 11, "branch", i);
        if (r[10] == 0) continue; // out of service: dropped at parse time
        Branch br;
        br.from = static_cast<int>(r[0]);
        br.to = static_cast<int>(r[1]);
        br.r = r[2];
        br.x = r[3];
        br.b_chg = r[4];
        br.rate_a = r[5] / base;
        br.tap = (r[8] == 0 ? 1.0 : r[8]);
        br.shift = r[9] * kPi / 180.0;
        br.in_service = true;
        c.branches.push_back(br);
    }
    if (b.gencost.size() != b.gen.size())
        throw DataError("validation error: gencost rows (" + std::to_string(b.gencost.size()) +
                        ") != gen rows (" + std::to_string(b.gen.size()) + ")");
    for (size_t i = 0; i < b.gen.size(); ++i) {
        const auto& r = b.gen[i];
        need_cols(r, 10, "gen", i);
        const auto& gc = b.gencost[i];
        need_cols(gc, 7, "gencost", i);
        if (static_cast<int>(gc[0]) != 2 || static_cast<int>(gc[3]) != 3)
            throw DataError("case parse error: gencost row " + std::to_string(i + 1) +
                            ": only quadratic polynomial costs (model 2, ncost 3) are accepted");
        if (r[7] == 0) continue; // out-of-service generator: dropped with its cost row
        Generator g;
        g.bus = static_cast<int>(r[0]);
        g.qmax = r[3] / base;
        g.qmin = r[4] / base;
        g.pmax = r[8] / base;
        g.pmin = r[9] / base;
        g.in_service = true;
        c.generators.push_back(g);
        c.costs.push_back(GenCost{gc[4], gc[5], gc[6]});
    }
    finalize_case(c);
    return c;
}

std::string matpower_from_case(const Case& c) {
    const double base = c.base_mva;
    std::string out = "function mpc = exported_case\nmpc.version = '2';\nmpc.baseMVA = " +
                      fmt17(base) + ";\n\nmpc.bus = [\n";
    for (const auto& b : c.buses) {
        out += "\t" + std::to_string(b.id) + "\t" + (b.is_ref ? std::string("3") : std::string("1"));
        for (double v : {b.pd * base, b.qd * base, b.gs * base, b.bs * base}) out += "\t" + fmt17(v);
        out += "\t1\t1\t0\t345\t1\t" + fmt17(b.vmax) + "\t" + fmt17(b.vmin) + ";\n";
    }
    out += "];\n\nmpc.gen = [\n";
    for (const auto& g : c.generators) {
        out += "\t" + std::to_string(g.bus) + "\t0\t0\t" + fmt17(g.qmax * base) + "\t" +
               fmt17(g.qmin * base) + "\t1\t" + fmt17(base) + "\t1\t" + fmt17(g.pmax * base) +
               "\t" + fmt17(g.pmin * base) + "\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;\n";
    }
    out += "];\n\nmpc.branch = [\n";
    for (const auto& br : c.branches) {
        out += "\t" + std::to_string(br.from) + "\t" + std::to_string(br.to);
        for (double v : {br.r, br.x, br.b_chg, br.rate_a * base}) out += "\t" + fmt17(v);
        out += "\t0\t0\t" + fmt17(br.tap == 1.0 ? 0.0 : br.tap) + "\t" +
               fmt17(br.shift * 180.0 / kPi) + "\t1\t-360\t360;\n";
    }
    out += "];\n\nmpc.gencost = [\n";
    for (const auto& gc : c.costs)
        out += "\t2\t0\t0\t3\t" + fmt17(gc.a) + "\t" + fmt17(gc.b) + "\t" + fmt17(gc.c) + ";\n";
    out += "];\n";
    return out;
}

// ------------------------------------------------------------------- JSON
using nlohmann::json;

json json_from_case(const Case& c) {
    const double base = c.base_mva;
    json j;
    j["schema_version"] = 1;
    j["base_mva"] = base;
    j["buses"] = json::array();
    for (const auto& b : c.buses)
        j["buses"].push_back({{"id", b.id},
                              {"pd_mw", b.pd * base},
                              {"qd_mvar", b.qd * base},
                              {"gs_mw", b.gs * base},
                              {"bs_mvar", b.bs * base},
                              {"vmin_pu", b.vmin},
                              {"vmax_pu", b.vmax},
                              {"is_ref", b.is_ref}});
    j["branches"] = json::array();
    for (const auto& br : c.branches)
        j["branches"].push_back({{"from", br.from},
                                 {"to", br.to},
                                 {"r_pu", br.r},
                                 {"x_pu", br.x},
                                 {"b_chg_pu", br.b_chg},
                                 {"tap", br.tap},
                                 {"shift_rad", br.shift},
                                 {"rate_a_mva", br.rate_a * base},
                                 {"in_service", br.in_service}});
    j["generators"] = json::array();
    j["gencosts"] = json::array();
    for (int g = 0; g < c.ng(); ++g) {
        const auto& gen = c.generators[g];
        j["generators"].push_back({{"bus", gen.bus},
                                   {"pmin_mw", gen.pmin * base},
                                   {"pmax_mw", gen.pmax * base},
                                   {"qmin_mvar", gen.qmin * base},
                                   {"qmax_mvar", gen.qmax * base},
                                   {"in_service", gen.in_service}});
        j["gencosts"].push_back({{"a", c.costs[g].a}, {"b", c.costs[g].b}, {"c", c.costs[g].c}});
    }
    return j;
}

Case case_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // Convert the byte position into line/col for a uniform error surface.
        size_t pos = std::min(e.byte, text.size());
        int line = 1, col = 1;
        for (size_t i = 0; i < pos; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw DataError("case parse error at line " + std::to_string(line) + ", col " +
                        std::to_string(col) + ": " + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != 1)
            throw DataError("case parse error: unsupported schema_version");
        Case c;
        c.base_mva = j.at("base_mva").get<double>();
        if (c.base_mva <= 0) throw DataError("case parse error: nonpositive base_mva");
        const double base = c.base_mva;
        for (const auto& jb : j.at("buses")) {
            Bus b;
            b.id = jb.at("id").get<int>();
            b.pd = jb.at("pd_mw").get<double>() / base;
            b.qd = jb.at("qd_mvar").get<double>() / base;
            b.gs = jb.at("gs_mw").get<double>() / base;
            b.bs = jb.at("bs_mvar").get<double>() / base;
            b.vmin = jb.at("vmin_pu").get<double>();
            b.vmax = jb.at("vmax_pu").get<double>();
            b.is_ref = jb.at("is_ref").get<bool>();
            c.buses.push_back(b);
        }
        for (const auto& jb : j.at("branches")) {
            if (!jb.at("in_service").get<bool>()) continue;
            Branch br;
            br.from = jb.at("from").get<int>();
            br.to = jb.at("to").get<int>();
            br.r = jb.at("r_pu").get<double>();
            br.x = jb.at("x_pu").get<double>();
            br.b_chg = jb.at("b_chg_pu").get<double>();
            br.tap = jb.at("tap").get<double>();
            br.shift = jb.at("shift_rad").get<double>();
            br.rate_a = jb.at("rate_a_mva").get<double>() / base;
            c.branches.push_back(br);
        }
        const auto& jg = j.at("generators");
        const auto& jc = j.at("gencosts");
        if (jg.size() != jc.size())
            throw DataError("validation error: gencosts size != generators size");
        for (size_t i = 0; i < jg.size(); ++i) {
            if (!jg[i].at("in_service").get<bool>()) continue;
            Generator g;
            g.bus = jg[i].at("bus").get<int>();
            g.pmin = jg[i].at("pmin_mw").get<double>() / base;
            g.pmax = jg[i].at("pmax_mw").get<double>() / base;
            g.qmin = jg[i].at("qmin_mvar").get<double>() / base;
            g.qmax = jg[i].at("qmax_mvar").get<double>() / base;
            c.generators.push_back(g);
            c.costs.push_back(
                GenCost{jc[i].at("a").get<double>(), jc[i].at("b").get<double>(),
                        jc[i].at("c").get<double>()});
        }
        finalize_case(c);
        return c;
    } catch (const json::exception& e) {
        throw DataError(std::string("case parse error: malformed JSON case: ") + e.what());
    }
}

bool feq(double a, double b, double rtol) {
    double scale = std::max({1.0, std::abs(a), std::abs(b)});
    return std::abs(a - b) <= rtol * scale;
}

} // namespace

int Case::bus_pos(int external_id) const {
    auto it = bus_index.find(external_id);
    if (it == bus_index.end())
        throw DataError("validation error: reference to unknown bus id " +
                        std::to_string(external_id));
    return it->second;
}

void finalize_case(Case& c) {
    c.bus_index.clear();
    for (int i = 0; i < c.nb(); ++i) {
        const Bus& b = c.buses[i];
        auto [it, inserted] = c.bus_index.emplace(b.id, i);
        (void)it;
        if (!inserted)
            throw DataError("validation error: duplicate bus id " + std::to_string(b.id));
        if (!(b.vmin > 0))
            throw DataError("validation error: bus " + std::to_string(b.id) + " has Vmin <= 0");
        if (!(b.vmax >= b.vmin))
            throw DataError("validation error: bus " + std::to_string(b.id) + " has Vmax < Vmin");
    }
    int refs = 0;
    c.ref_bus = -1;
    for (int i = 0; i < c.nb(); ++i)
        if (c.buses[i].is_ref) {
            ++refs;
            c.ref_bus = i;
        }
    if (refs == 0) throw DataError("validation error: no reference bus");
    if (refs > 1) throw DataError("validation error: multiple reference buses");

    for (const auto& br : c.branches) {
        c.bus_pos(br.from); // throws on dangling reference
        c.bus_pos(br.to);
        if (br.r == 0 && br.x == 0)
            throw DataError("validation error: branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has r = x = 0 (singular)");
        if (!(br.tap > 0))
            throw DataError("validation error: branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has tap <= 0");
        if (br.rate_a < 0)
            throw DataError("validation error: branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has rate_a < 0");
    }
    if (c.costs.size() != c.generators.size())
        throw DataError("validation error: cost rows (" + std::to_string(c.costs.size()) +
                        ") != generators (" + std::to_string(c.generators.size()) + ")");
    c.gens_at_bus.assign(c.nb(), {});
    for (int g = 0; g < c.ng(); ++g) {
        const auto& gen = c.generators[g];
        int pos = c.bus_pos(gen.bus);
        if (!(gen.pmax >= gen.pmin))
            throw DataError("validation error: generator at bus " + std::to_string(gen.bus) +
                            " has Pmax < Pmin");
        if (!(gen.qmax >= gen.qmin))
            throw DataError("validation error: generator at bus " + std::to_string(gen.bus) +
                            " has Qmax < Qmin");
        if (c.costs[g].a < 0)
            throw DataError("validation error: generator at bus " + std::to_string(gen.bus) +
                            " has negative quadratic cost coefficient");
        c.gens_at_bus[pos].push_back(g);
    }

    // Index sets, ascending external bus id.
    std::vector<int> order(c.nb());
    for (int i = 0; i < c.nb(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return c.buses[a].id < c.buses[b].id; });
    c.n_b.clear();
    c.n_b_prime.clear();
    for (int pos : order) {
        bool demand = (c.buses[pos].pd != 0 || c.buses[pos].qd != 0);
        bool gen = !c.gens_at_bus[pos].empty();
        if (demand) c.n_b.push_back(pos);
        if (demand || gen) c.n_b_prime.push_back(pos);
    }
}

Case parse_case(const std::string& text, CaseFormat format) {
    return format == CaseFormat::matpower_like ? case_from_matpower(text)
                                               : case_from_json_text(text);
}

std::string serialize_case(const Case& c, CaseFormat format) {
    if (format == CaseFormat::matpower_like) return matpower_from_case(c);
    return json_from_case(c).dump(2) + "\n";
}

Case load_case(const std::string& path) {
    std::string text = read_file(path);
    bool is_json = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
    return parse_case(text, is_json ? CaseFormat::json : CaseFormat::matpower_like);
}

bool case_equal(const Case& a, const Case& b, double rtol) {
    if (!feq(a.base_mva, b.base_mva, rtol)) return false;
    if (a.buses.size() != b.buses.size() || a.branches.size() != b.branches.size() ||
        a.generators.size() != b.generators.size() || a.costs.size() != b.costs.size())
        return false;
    for (size_t i = 0; i < a.buses.size(); ++i) {
        const Bus &x = a.buses[i], &y = b.buses[i];
        if (x.id != y.id || x.is_ref != y.is_ref) return false;
        if (!feq(x.pd, y.pd, rtol) || !feq(x.qd, y.qd, rtol) || !feq(x.gs, y.gs, rtol) ||
            !feq(x.bs, y.bs, rtol) || !feq(x.vmin, y.vmin, rtol) || !feq(x.vmax, y.vmax, rtol))
            return false;
    }
    for (size_t i = 0; i < a.branches.size(); ++i) {
        const Branch &x = a.branches[i], &y = b.branches[i];
        if (x.from != y.from || x.to != y.to || x.in_service != y.in_service) return false;
        if (!feq(x.r, y.r, rtol) || !feq(x.x, y.x, rtol) || !feq(x.b_chg, y.b_chg, rtol) ||
            !feq(x.tap, y.tap, rtol) || !feq(x.shift, y.shift, rtol) ||
            !feq(x.rate_a, y.rate_a, rtol))
            return false;
    }
    for (size_t i = 0; i < a.generators.size(); ++i) {
        const Generator &x = a.generators[i], &y = b.generators[i];
        if (x.bus != y.bus || x.in_service != y.in_service) return false;
        if (!feq(x.pmin, y.pmin, rtol) || !feq(x.pmax, y.pmax, rtol) ||
            !feq(x.qmin, y.qmin, rtol) || !feq(x.qmax, y.qmax, rtol))
            return false;
    }
    for (size_t i = 0; i < a.costs.size(); ++i) {
        if (!feq(a.costs[i].a, b.costs[i].a, rtol) || !feq(a.costs[i].b, b.costs[i].b, rtol) ||
            !feq(a.costs[i].c, b.costs[i].c, rtol))
            return false;
    }
    return true;
}

std::string case_hash(const Case& c) { return fnv1a_hex(json_from_case(c).dump()); }

} // namespace opfs
