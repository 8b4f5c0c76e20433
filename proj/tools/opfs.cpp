// opfs — AC optimal power flow active-constraint screening toolkit.
//
// Subcommands:
//   gen-data  perturb demands, solve the full OPF per scenario, label activity
//   train     fit the dispatch regressor and both activity classifiers
//   eval      score trained models on a labeled test dataset
//   solve     solve one OPF instance, optionally screened by trained models
//   report    re-render an evaluation report from a run directory's artifacts
//
// Every value flag can also be supplied through --config FILE, either a flat
// JSON object or `key = value` lines (keys are the long flag names with
// hyphens as underscores).  Precedence: command line > file > built-in
// defaults.  Exit codes: 0 success, 1 usage, 2 data/validation, 3 solver
// failure, 4 training failure.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "opfs/case_io.hpp"
#include "opfs/common.hpp"
#include "opfs/metrics.hpp"
#include "opfs/mlp.hpp"
#include "opfs/opf.hpp"
#include "opfs/pipeline.hpp"
#include "opfs/scenario.hpp"
#include "opfs/textio.hpp"

namespace {

using nlohmann::json;
using namespace opfs;

// ---------------------------------------------------------------------------
// Config files and CLI-over-file precedence

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string normalize_key(std::string k) {
    for (char& ch : k) ch = ch == '-' ? '_' : static_cast<char>(std::tolower(ch));
    return k;
}

// Union of config keys recognized by any subcommand, filled at setup time.
std::set<std::string>& known_keys() {
    static std::set<std::string> s;
    return s;
}

std::string json_scalar_to_string(const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    if (v.is_array()) { // e.g. hidden_layers: [1, 2, 3]
        std::string out;
        for (const json& e : v) {
            if (!out.empty()) out += ',';
            out += e.is_string() ? e.get<std::string>() : e.dump();
        }
        return out;
    }
    throw UsageError("config key '" + key + "': value must be a scalar or flat array");
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
    const std::string text = read_file(path);
    std::map<std::string, std::string> kv;
    const size_t first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw UsageError("config file " + path + ": " + e.what());
        }
        for (const auto& [key, value] : j.items()) {
            if (value.is_null()) continue;
            kv[normalize_key(key)] = json_scalar_to_string(value, key);
        }
    } else {
        size_t lineno = 0, pos = 0;
        while (pos <= text.size()) {
            size_t end = text.find('\n', pos);
            if (end == std::string::npos) end = text.size();
            std::string line = text.substr(pos, end - pos);
            pos = end + 1;
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            size_t sep = line.find_first_of("=:");
            if (sep == std::string::npos)
                throw UsageError("config file " + path + " line " + std::to_string(lineno) +
                                 ": expected 'key = value'");
            kv[normalize_key(trim(line.substr(0, sep)))] = trim(line.substr(sep + 1));
        }
    }
    for (const auto& [key, value] : kv)
        if (!known_keys().count(key))
            throw UsageError("config file " + path + ": unknown key '" + key + "'");
    return kv;
}

long long to_ll(const std::string& s) {
    size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument("not an integer: '" + s + "'");
    return v;
}

template <class T>
T convert_str(const std::string& s) {
    if constexpr (std::is_same_v<T, std::string>) {
        return s;
    } else if constexpr (std::is_same_v<T, double>) {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
        return v;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw std::invalid_argument("not a boolean: '" + s + "'");
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
        std::vector<std::string> out;
        size_t pos = 0;
        while (pos <= s.size()) {
            size_t comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            const std::string item = trim(s.substr(pos, comma - pos));
            if (!item.empty()) out.push_back(item);
            pos = comma + 1;
        }
        return out;
    } else {
        const long long v = to_ll(s);
        if (v < static_cast<long long>(std::numeric_limits<T>::min()) ||
            (v > 0 && static_cast<unsigned long long>(v) > std::numeric_limits<T>::max()))
            throw std::invalid_argument("integer out of range: '" + s + "'");
        return static_cast<T>(v);
    }
}

// Registers options on a CLI11 subcommand and replays config-file values into
// any option the command line left untouched.
class FlagSet {
  public:
    template <class T>
    CLI::Option* add(CLI::App& app, const std::string& spec, T& var, const std::string& desc) {
        CLI::Option* opt = app.add_option(spec, var, desc);
        const std::string key = normalize_key(opt->get_lnames().front());
        known_keys().insert(key);
        entries_.push_back({opt, key, [&var](const std::string& s) { var = convert_str<T>(s); }});
        return opt;
    }

    void apply(const std::map<std::string, std::string>& cfg) const {
        for (const Entry& e : entries_) {
            if (e.opt->count() > 0) continue; // command line wins
            const auto it = cfg.find(e.key);
            if (it == cfg.end()) continue;
            try {
                e.set(it->second);
            } catch (const std::exception& ex) {
                throw UsageError("config key '" + e.key + "': " + ex.what());
            }
        }
    }

  private:
    struct Entry {
        CLI::Option* opt;
        std::string key;
        std::function<void(const std::string&)> set;
    };
    std::vector<Entry> entries_;
};

void require(const std::string& value, const char* flag) {
    if (value.empty())
        throw UsageError(std::string("missing required option ") + flag +
                         " (flag or config key)");
}

// Flag-sourced enum parsing: bad values are usage errors, not data errors.
template <class T>
T parse_enum_flag(T (*parse)(const std::string&), const std::string& s, const char* flag) {
    try {
        return parse(s);
    } catch (const Error& e) {
        throw UsageError(std::string(flag) + ": " + e.what());
    }
}

Correlation correlation_from_flag(const std::string& s) {
    if (s == "independent_per_bus" || s == "independent") return Correlation::independent_per_bus;
    if (s == "systemwide") return Correlation::systemwide;
    throw UsageError("--correlation: expected 'independent_per_bus' or 'systemwide', got '" + s +
                     "'");
}

std::vector<int> parse_depth_list(const std::string& s) {
    std::vector<int> out;
    for (const std::string& item : convert_str<std::vector<std::string>>(s)) {
        int v = 0;
        try {
            v = static_cast<int>(to_ll(item));
        } catch (const std::exception&) {
            throw UsageError("--hidden-layers: not an integer: '" + item + "'");
        }
        if (v < 1) throw UsageError("--hidden-layers: depths must be >= 1");
        out.push_back(v);
    }
    if (out.empty()) throw UsageError("--hidden-layers: empty list");
    return out;
}

json solver_json(const SolverConfig& s) {
    return {{"feastol", s.feastol},   {"gradtol", s.gradtol}, {"comptol", s.comptol},
            {"costtol", s.costtol},   {"max_iter", s.max_iter}, {"sigma", s.sigma},
            {"xi", s.xi}};
}

void write_manifest(const std::string& dir, json j) {
    j["schema_version"] = 1;
    j["tool_version"] = kToolVersion;
    std::filesystem::create_directories(dir);
    write_file(dir + "/manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
    std::string case_path, out_dir, config_path;
    std::uint64_t seed = 1;
    int workers = 0;
    int count1 = 400, count2 = 400, count_test = 200;
    double range_lo = 0.70, range_hi = 1.30;
    std::string correlation = "independent_per_bus";
    double eps_active = 1e-5;
    SolverConfig solver;
    FlagSet flags;
};

void setup_gen_data(CLI::App& cmd, GenDataArgs& a) {
    a.flags.add(cmd, "--case", a.case_path, "case file (.m or .json)");
    a.flags.add(cmd, "--out", a.out_dir, "output directory (dataset1/, dataset2/, test/)");
    cmd.add_option("--config", a.config_path, "config file (JSON or key = value lines)");
    a.flags.add(cmd, "--seed", a.seed, "master seed; the three datasets use disjoint substreams");
    a.flags.add(cmd, "--workers", a.workers, "scenario-solve threads (0 = all cores)");
    a.flags.add(cmd, "--count1", a.count1, "scenario count for dataset1 (regressor)");
    a.flags.add(cmd, "--count2", a.count2, "scenario count for dataset2 (classifiers)");
    a.flags.add(cmd, "--count-test", a.count_test, "scenario count for the test dataset");
    a.flags.add(cmd, "--range-lo", a.range_lo, "demand perturbation lower factor");
    a.flags.add(cmd, "--range-hi", a.range_hi, "demand perturbation upper factor");
    a.flags.add(cmd, "--correlation", a.correlation,
                "demand draw correlation: independent_per_bus | systemwide");
    a.flags.add(cmd, "--eps-active", a.eps_active, "activity tolerance for labels (p.u.)");
    a.flags.add(cmd, "--feastol", a.solver.feastol, "solver feasibility tolerance");
    a.flags.add(cmd, "--gradtol", a.solver.gradtol, "solver gradient tolerance");
    a.flags.add(cmd, "--comptol", a.solver.comptol, "solver complementarity tolerance");
    a.flags.add(cmd, "--costtol", a.solver.costtol, "solver cost-decrease tolerance");
    a.flags.add(cmd, "--max-iter", a.solver.max_iter, "solver iteration cap");
}

int run_gen_data(GenDataArgs& a) {
    if (!a.config_path.empty()) a.flags.apply(load_config_file(a.config_path));
    require(a.case_path, "--case");
    require(a.out_dir, "--out");
    const Correlation corr = correlation_from_flag(a.correlation);

    const Case c = load_case(a.case_path);
    struct Part {
        const char* name;
        int count;
    };
    const Part parts[] = {{"dataset1", a.count1}, {"dataset2", a.count2},
                          {"test", a.count_test}};
    json dsets = json::object();
    for (const Part& p : parts) {
        ScenarioConfig sc;
        sc.range_lo = a.range_lo;
        sc.range_hi = a.range_hi;
        sc.count = p.count;
        sc.seed = a.seed;
        sc.stream_tag = p.name; // disjoint tags => disjoint scenario streams
        sc.correlation = corr;
        const Dataset ds = build_dataset(c, sc, a.solver, a.workers, a.eps_active);
        save_dataset(a.out_dir + "/" + p.name, ds, c, sc, a.solver, a.eps_active);
        std::cout << p.name << ": kept " << ds.kept_indices.size() << " of " << p.count
                  << " scenarios (" << ds.dropped.size() << " dropped)\n";
        dsets[p.name] = {{"requested", p.count},
                         {"kept", ds.kept_indices.size()},
                         {"dropped", ds.dropped.size()},
                         {"hash", dataset_hash(ds)}};
    }
    write_manifest(a.out_dir, {{"command", "gen-data"},
                               {"case", a.case_path},
                               {"case_hash", case_hash(c)},
                               {"seed", a.seed},
                               {"workers", a.workers},
                               {"range_lo", a.range_lo},
                               {"range_hi", a.range_hi},
                               {"correlation", a.correlation},
                               {"eps_active", a.eps_active},
                               {"solver", solver_json(a.solver)},
                               {"datasets", dsets}});
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string case_path, dataset1, dataset2, out_dir, config_path;
    std::uint64_t seed = 1;
    std::string feature_mode = "net_injection";
    std::string hidden_layers = "1";
    int hidden_width = 256;
    int epochs = 1000;
    int batch_size = 100;
    double learning_rate = 1e-3;
    double validation_split = 0.20;
    FlagSet flags;
};

void setup_train(CLI::App& cmd, TrainArgs& a) {
    a.flags.add(cmd, "--case", a.case_path, "case file (.m or .json)");
    a.flags.add(cmd, "--dataset1", a.dataset1, "regressor dataset directory");
    a.flags.add(cmd, "--dataset2", a.dataset2, "classifier dataset directory");
    a.flags.add(cmd, "--out", a.out_dir, "output directory (models/, curves/, sweep.csv)");
    cmd.add_option("--config", a.config_path, "config file (JSON or key = value lines)");
    a.flags.add(cmd, "--seed", a.seed, "training seed (init + shuffles)");
    a.flags.add(cmd, "--feature-mode", a.feature_mode,
                "classifier features: net_injection | demand_only");
    a.flags.add(cmd, "--hidden-layers", a.hidden_layers,
                "comma-separated depth sweep; first entry is the primary model");
    a.flags.add(cmd, "--hidden-width", a.hidden_width, "hidden layer width");
    a.flags.add(cmd, "--epochs", a.epochs, "training epochs");
    a.flags.add(cmd, "--batch-size", a.batch_size, "mini-batch size");
    a.flags.add(cmd, "--learning-rate", a.learning_rate, "Adam learning rate");
    a.flags.add(cmd, "--validation-split", a.validation_split,
                "trailing fraction held out for validation");
}

CsvTable curve_table(const TrainReport& r) {
    CsvTable t;
    t.header = {"epoch", "train_loss", "val_loss"};
    for (size_t e = 0; e < r.train_loss.size(); ++e)
        t.rows.push_back({static_cast<double>(e + 1), r.train_loss[e], r.val_loss[e]});
    return t;
}

int run_train(TrainArgs& a) {
    if (!a.config_path.empty()) a.flags.apply(load_config_file(a.config_path));
    require(a.case_path, "--case");
    require(a.dataset1, "--dataset1");
    require(a.dataset2, "--dataset2");
    require(a.out_dir, "--out");
    const FeatureMode mode =
        parse_enum_flag(feature_mode_from_string, a.feature_mode, "--feature-mode");
    const std::vector<int> depths = parse_depth_list(a.hidden_layers);

    const Case c = load_case(a.case_path);
    const Dataset ds1 = load_dataset(a.dataset1, c);
    const Dataset ds2 = load_dataset(a.dataset2, c);

    TrainConfig reg_cfg;
    reg_cfg.task = Task::regression;
    TrainConfig cls_cfg;
    cls_cfg.task = Task::classification;
    for (TrainConfig* cfg : {&reg_cfg, &cls_cfg}) {
        cfg->epochs = a.epochs;
        cfg->batch_size = a.batch_size;
        cfg->learning_rate = a.learning_rate;
        cfg->validation_split = a.validation_split;
        cfg->hidden_width = a.hidden_width;
    }

    std::filesystem::create_directories(a.out_dir + "/curves");
    CsvTable sweep;
    sweep.header = {"hidden_layers", "regressor_val_rmse", "classifier_v_val_loss",
                    "classifier_l_val_loss"};
    bool leakage = false;
    for (size_t i = 0; i < depths.size(); ++i) {
        reg_cfg.hidden_layers = depths[i];
        cls_cfg.hidden_layers = depths[i];
        TrainAllOutput t = train_all(c, ds1, ds2, reg_cfg, cls_cfg, mode, a.seed);
        leakage = t.models.leakage;
        const std::string suffix = "_depth" + std::to_string(depths[i]) + ".csv";
        if (t.models.regressor)
            write_csv(a.out_dir + "/curves/regressor" + suffix, curve_table(t.regressor_report));
        write_csv(a.out_dir + "/curves/classifier_v" + suffix, curve_table(t.v_report));
        write_csv(a.out_dir + "/curves/classifier_l" + suffix, curve_table(t.l_report));
        const double reg_rmse = t.models.regressor
                                    ? std::sqrt(t.regressor_report.final_val_loss)
                                    : std::numeric_limits<double>::quiet_NaN();
        sweep.rows.push_back({static_cast<double>(depths[i]), reg_rmse,
                              t.v_report.final_val_loss, t.l_report.final_val_loss});
        if (i == 0) save_models(a.out_dir + "/models", t.models);
        std::cout << "depth " << depths[i] << ": regressor val RMSE "
                  << (t.models.regressor ? fmt17(reg_rmse) : std::string("n/a"))
                  << ", classifier val BCE v=" << fmt17(t.v_report.final_val_loss)
                  << " l=" << fmt17(t.l_report.final_val_loss) << "\n";
    }
    if (depths.size() > 1) write_csv(a.out_dir + "/sweep.csv", sweep);
    if (leakage)
        std::cerr << "warning: dataset1 and dataset2 have identical content "
                     "(classifier features leak the regressor's training data)\n";

    write_manifest(a.out_dir, {{"command", "train"},
                               {"case", a.case_path},
                               {"case_hash", case_hash(c)},
                               {"dataset1", a.dataset1},
                               {"dataset1_hash", dataset_hash(ds1)},
                               {"dataset2", a.dataset2},
                               {"dataset2_hash", dataset_hash(ds2)},
                               {"seed", a.seed},
                               {"feature_mode", a.feature_mode},
                               {"hidden_layers", depths},
                               {"primary_depth", depths.front()},
                               {"hidden_width", a.hidden_width},
                               {"epochs", a.epochs},
                               {"batch_size", a.batch_size},
                               {"learning_rate", a.learning_rate},
                               {"validation_split", a.validation_split},
                               {"leakage", leakage}});
    std::cout << "models written to " << a.out_dir << "/models\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string case_path, test_dir, out_dir, config_path;
    std::vector<std::string> models_dirs;
    double threshold = 0.5;
    std::string fallback = "iterative_inclusion";
    int round_cap = 5;
    int workers = 0;
    int timing_scenarios = 50;
    int timing_repeats = 5;
    double eps_active = 1e-5;
    SolverConfig solver;
    FlagSet flags;
};

void setup_eval(CLI::App& cmd, EvalArgs& a) {
    a.flags.add(cmd, "--case", a.case_path, "case file (.m or .json)");
    a.flags.add(cmd, "--models", a.models_dirs,
                "model directory; repeat for side-by-side comparison");
    a.flags.add(cmd, "--test", a.test_dir, "labeled test dataset directory");
    a.flags.add(cmd, "--out", a.out_dir, "run directory for evaluation artifacts");
    cmd.add_option("--config", a.config_path, "config file (JSON or key = value lines)");
    a.flags.add(cmd, "--threshold", a.threshold, "active-prediction decision threshold");
    a.flags.add(cmd, "--fallback", a.fallback,
                "feasibility fallback: iterative_inclusion | warm_start_full | none");
    a.flags.add(cmd, "--round-cap", a.round_cap, "max inclusion rounds");
    a.flags.add(cmd, "--workers", a.workers, "accuracy/gap phase threads (0 = all cores)");
    a.flags.add(cmd, "--timing-scenarios", a.timing_scenarios, "scenarios timed serially");
    a.flags.add(cmd, "--timing-repeats", a.timing_repeats, "solves per timed scenario (median)");
    a.flags.add(cmd, "--eps-active", a.eps_active, "activity tolerance for labels (p.u.)");
    a.flags.add(cmd, "--feastol", a.solver.feastol, "solver feasibility tolerance");
    a.flags.add(cmd, "--gradtol", a.solver.gradtol, "solver gradient tolerance");
    a.flags.add(cmd, "--comptol", a.solver.comptol, "solver complementarity tolerance");
    a.flags.add(cmd, "--costtol", a.solver.costtol, "solver cost-decrease tolerance");
    a.flags.add(cmd, "--max-iter", a.solver.max_iter, "solver iteration cap");
}

json eval_summary_json(const std::string& models_dir, const TrainedModels& m,
                       const EvalResult& r) {
    const auto opt = [](const std::optional<double>& o) {
        return o ? json(*o) : json();
    };
    return {{"models", models_dir},
            {"feature_mode", to_string(m.feature_mode)},
            {"voltage",
             {{"accuracy", opt(r.metrics_v.accuracy)},
              {"fn", r.confusion_v.fn},
              {"fnr", opt(r.metrics_v.fnr)}}},
            {"branch",
             {{"accuracy", opt(r.metrics_l.accuracy)},
              {"fn", r.confusion_l.fn},
              {"fnr", opt(r.metrics_l.fnr)}}},
            {"mean_gap_pct", r.gaps.mean_gap_pct},
            {"time_saving_pct", r.timing.time_saving_pct}};
}

std::string pct_or_na(const std::optional<double>& o) {
    if (!o) return "undefined";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f%%", *o * 100.0);
    return buf;
}

std::string slurp_report(const std::string& run_dir) {
    try {
        return read_file(run_dir + "/report.txt");
    } catch (const Error&) {
        return "";
    }
}

int run_eval(EvalArgs& a) {
    if (!a.config_path.empty()) a.flags.apply(load_config_file(a.config_path));
    require(a.case_path, "--case");
    require(a.test_dir, "--test");
    require(a.out_dir, "--out");
    if (a.models_dirs.empty())
        throw UsageError("missing required option --models (flag or config key)");

    EvalOptions opts;
    opts.threshold = a.threshold;
    opts.fallback = parse_enum_flag(fallback_mode_from_string, a.fallback, "--fallback");
    opts.round_cap = a.round_cap;
    opts.timing_scenarios = a.timing_scenarios;
    opts.timing_repeats = a.timing_repeats;
    opts.workers = a.workers;
    opts.solver = a.solver;
    opts.eps_active = a.eps_active;

    const Case c = load_case(a.case_path);
    const Dataset test = load_dataset(a.test_dir, c);
    const std::string test_hash = dataset_hash(test);

    json comparison = json::array();
    std::string comparison_txt;
    for (size_t i = 0; i < a.models_dirs.size(); ++i) {
        const std::string& mdir = a.models_dirs[i];
        const std::string run_dir = a.models_dirs.size() == 1
                                        ? a.out_dir
                                        : a.out_dir + "/model" + std::to_string(i + 1);
        const TrainedModels models = load_models(mdir, c);
        const EvalResult r = evaluate_models(c, models, test, opts);
        write_eval_artifacts(run_dir, c, models, r, opts, test_hash);
        comparison.push_back(eval_summary_json(mdir, models, r));
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "%-14s v: acc=%s fn=%llu   l: acc=%s fn=%llu   gap=%.3e%%  saving=%.1f%%\n",
                      to_string(models.feature_mode).c_str(), pct_or_na(r.metrics_v.accuracy).c_str(),
                      static_cast<unsigned long long>(r.confusion_v.fn),
                      pct_or_na(r.metrics_l.accuracy).c_str(),
                      static_cast<unsigned long long>(r.confusion_l.fn), r.gaps.mean_gap_pct,
                      r.timing.time_saving_pct);
        comparison_txt += buf;
        std::cout << "evaluated " << mdir << " -> " << run_dir << "\n";
    }
    if (a.models_dirs.size() > 1) {
        write_file(a.out_dir + "/comparison.json", comparison.dump(2) + "\n");
        write_file(a.out_dir + "/comparison.txt", comparison_txt);
        std::cout << comparison_txt;
    } else {
        std::cout << slurp_report(a.out_dir);
    }
    write_manifest(a.out_dir, {{"command", "eval"},
                               {"case", a.case_path},
                               {"case_hash", case_hash(c)},
                               {"test", a.test_dir},
                               {"test_dataset_hash", test_hash},
                               {"models", a.models_dirs},
                               {"threshold", a.threshold},
                               {"fallback", a.fallback},
                               {"round_cap", a.round_cap},
                               {"workers", a.workers},
                               {"timing_scenarios", a.timing_scenarios},
                               {"timing_repeats", a.timing_repeats},
                               {"eps_active", a.eps_active},
                               {"solver", solver_json(a.solver)}});
    return 0;
}

// ---------------------------------------------------------------------------
// solve

struct SolveArgs {
    std::string case_path, models_dir, demand_csv, out_path = "-", config_path;
    double load_scale = 1.0;
    int demand_row = 0;
    double threshold = 0.5;
    std::string fallback = "iterative_inclusion";
    int round_cap = 5;
    double eps_active = 1e-5;
    SolverConfig solver;
    FlagSet flags;
};

void setup_solve(CLI::App& cmd, SolveArgs& a) {
    a.flags.add(cmd, "--case", a.case_path, "case file (.m or .json)");
    a.flags.add(cmd, "--models", a.models_dir,
                "model directory; omit to solve the full problem");
    a.flags.add(cmd, "--demand", a.demand_csv,
                "demand CSV in the dataset D.csv layout (pd_<bus>/qd_<bus> header)");
    a.flags.add(cmd, "--demand-row", a.demand_row, "row of --demand to solve (0-based)");
    a.flags.add(cmd, "--load-scale", a.load_scale,
                "scale base demand by this factor (exclusive with --demand)");
    a.flags.add(cmd, "--out", a.out_path, "output path for the solution JSON ('-' = stdout)");
    cmd.add_option("--config", a.config_path, "config file (JSON or key = value lines)");
    a.flags.add(cmd, "--threshold", a.threshold, "active-prediction decision threshold");
    a.flags.add(cmd, "--fallback", a.fallback,
                "feasibility fallback: iterative_inclusion | warm_start_full | none");
    a.flags.add(cmd, "--round-cap", a.round_cap, "max inclusion rounds");
    a.flags.add(cmd, "--eps-active", a.eps_active, "activity tolerance for labels (p.u.)");
    a.flags.add(cmd, "--feastol", a.solver.feastol, "solver feasibility tolerance");
    a.flags.add(cmd, "--gradtol", a.solver.gradtol, "solver gradient tolerance");
    a.flags.add(cmd, "--comptol", a.solver.comptol, "solver complementarity tolerance");
    a.flags.add(cmd, "--costtol", a.solver.costtol, "solver cost-decrease tolerance");
    a.flags.add(cmd, "--max-iter", a.solver.max_iter, "solver iteration cap");
}

DemandVector demand_from_csv(const Case& c, const std::string& path, int row) {
    const CsvTable t = read_csv(path);
    const int nb = static_cast<int>(c.n_b.size());
    std::vector<std::string> expect;
    for (int pos : c.n_b) expect.push_back("pd_" + std::to_string(c.buses[pos].id));
    for (int pos : c.n_b) expect.push_back("qd_" + std::to_string(c.buses[pos].id));
    if (t.header != expect)
        throw DataError(path + ": header does not match the case's demand-bus layout");
    if (row < 0 || row >= static_cast<int>(t.rows.size()))
        throw DataError(path + ": row " + std::to_string(row) + " out of range (rows: " +
                        std::to_string(t.rows.size()) + ")");
    DemandVector d;
    d.pd.resize(nb);
    d.qd.resize(nb);
    for (int i = 0; i < nb; ++i) {
        d.pd[i] = t.rows[row][i];
        d.qd[i] = t.rows[row][nb + i];
    }
    return d;
}

DemandVector scaled_base_demand(const Case& c, double scale) {
    const int nb = static_cast<int>(c.n_b.size());
    DemandVector d;
    d.pd.resize(nb);
    d.qd.resize(nb);
    for (int i = 0; i < nb; ++i) {
        d.pd[i] = c.buses[c.n_b[i]].pd * scale;
        d.qd[i] = c.buses[c.n_b[i]].qd * scale;
    }
    return d;
}

json vec_json(const VecR& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

json active_sets_json(const Case& c, const ActivityLabels& labels) {
    json vb = json::array(), lb = json::array();
    for (int i = 0; i < c.nb(); ++i)
        if (labels.v_active[i]) vb.push_back(c.buses[i].id);
    for (int l = 0; l < c.nl(); ++l)
        if (labels.l_active[l]) lb.push_back(l);
    return {{"voltage_buses", vb}, {"flow_branches", lb}};
}

json violations_json(const std::vector<Violation>& vs) {
    static const char* kKind[] = {"vmax", "vmin", "flow_from", "flow_to"};
    json a = json::array();
    for (const Violation& v : vs)
        a.push_back({{"kind", kKind[static_cast<int>(v.kind)]},
                     {"index", v.index},
                     {"amount", v.amount}});
    return a;
}

json solution_json(const Case& c, const OpfSolution& sol) {
    json bus_ids = json::array(), gen_bus = json::array();
    for (const Bus& b : c.buses) bus_ids.push_back(b.id);
    for (const Generator& g : c.generators) gen_bus.push_back(g.bus);
    return {{"status", to_string(sol.status)},
            {"objective_dollars_per_hour", sol.objective},
            {"iterations", sol.iterations},
            {"feval_count", sol.feval_count},
            {"bus_ids", bus_ids},
            {"theta_rad", vec_json(sol.vars.theta)},
            {"vm_pu", vec_json(sol.vars.vm)},
            {"gen_bus", gen_bus},
            {"pg_pu", vec_json(sol.vars.pg)},
            {"qg_pu", vec_json(sol.vars.qg)}};
}

int run_solve(SolveArgs& a) {
    if (!a.config_path.empty()) a.flags.apply(load_config_file(a.config_path));
    require(a.case_path, "--case");
    if (!a.demand_csv.empty() && a.load_scale != 1.0)
        throw UsageError("--demand and --load-scale are mutually exclusive");

    const Case c = load_case(a.case_path);
    const DemandVector d = a.demand_csv.empty() ? scaled_base_demand(c, a.load_scale)
                                                : demand_from_csv(c, a.demand_csv, a.demand_row);
    const Case cd = apply_demand(c, d);

    json out;
    out["schema_version"] = 1;
    out["tool_version"] = kToolVersion;
    out["case"] = a.case_path;
    out["case_hash"] = case_hash(c);
    out["demand"] = {{"bus_ids", [&] {
                          json ids = json::array();
                          for (int pos : c.n_b) ids.push_back(c.buses[pos].id);
                          return ids;
                      }()},
                     {"pd_pu", vec_json(d.pd)},
                     {"qd_pu", vec_json(d.qd)}};

    if (a.models_dir.empty()) {
        out["mode"] = "full";
        const OpfSolution sol = solve_opf(cd, full_constraint_set(cd), std::nullopt, a.solver);
        if (sol.status != SolveStatus::converged)
            throw SolverError(std::string("full OPF did not converge: ") + to_string(sol.status) +
                              " after " + std::to_string(sol.iterations) + " iterations");
        out["solution"] = solution_json(cd, sol);
        out["active"] = active_sets_json(cd, label_activity(sol, cd, a.eps_active));
        out["violations"] =
            violations_json(check_violations(cd, sol.vars, full_constraint_set(cd)));
    } else {
        out["mode"] = "screened";
        const TrainedModels models = load_models(a.models_dir, c);
        const FallbackMode fb =
            parse_enum_flag(fallback_mode_from_string, a.fallback, "--fallback");
        const Prediction pred = predict_active(c, models, d, a.threshold);
        const ConstraintSet cs = build_truncated(c, pred);
        const FallbackResult fr = solve_with_fallback(cd, cs, fb, a.solver, a.round_cap);
        out["solution"] = solution_json(cd, fr.final_solution);
        out["active"] = active_sets_json(cd, label_activity(fr.final_solution, cd, a.eps_active));
        out["violations"] = violations_json(
            check_violations(cd, fr.final_solution.vars, full_constraint_set(cd)));
        json pv = json::array(), pl = json::array();
        for (int i = 0; i < c.nb(); ++i)
            if (pred.v_active_pred[i]) pv.push_back(c.buses[i].id);
        for (int l = 0; l < c.nl(); ++l)
            if (pred.l_active_pred[l]) pl.push_back(l);
        json fv = json::array(), fl = json::array();
        for (int pos : fr.final_cs.voltage_buses) fv.push_back(c.buses[pos].id);
        for (int l : fr.final_cs.flow_branches) fl.push_back(l);
        out["screening"] = {{"models", a.models_dir},
                            {"feature_mode", to_string(models.feature_mode)},
                            {"threshold", a.threshold},
                            {"fallback", to_string(fb)},
                            {"round_cap", a.round_cap},
                            {"rounds", fr.rounds},
                            {"feasible_full", fr.feasible_full},
                            {"flagged", fr.flagged},
                            {"first_objective", fr.first_solution.objective},
                            {"predicted", {{"voltage_buses", pv}, {"flow_branches", pl}}},
                            {"final_constraint_set",
                             {{"voltage_buses", fv}, {"flow_branches", fl}}}};
    }

    const std::string text = out.dump(2) + "\n";
    if (a.out_path == "-")
        std::cout << text;
    else
        write_file(a.out_path, text);
    return 0;
}

// ---------------------------------------------------------------------------
// report

// Rebuilds the evaluation report from the persisted artifacts so the text can
// be regenerated (or inspected) without re-running any solves.
int run_report(const std::string& run_dir) {
    json cj;
    try {
        cj = json::parse(read_file(run_dir + "/confusion.json"));
    } catch (const json::exception& e) {
        throw DataError(run_dir + "/confusion.json: " + e.what());
    }
    EvalResult r;
    const auto counts = [&](const char* side) {
        const json& c = cj.at(side).at("counts");
        return ConfusionCounts{c.at("tp").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>(),
                               c.at("fp").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>()};
    };
    try {
        r.confusion_v = counts("voltage");
        r.confusion_l = counts("branch");
    } catch (const json::exception& e) {
        throw DataError(run_dir + "/confusion.json: " + e.what());
    }
    r.metrics_v = compute_metrics(r.confusion_v);
    r.metrics_l = compute_metrics(r.confusion_l);

    const CsvTable gaps = read_csv(run_dir + "/gaps.csv");
    const std::vector<std::string> gap_hdr = {"scenario", "f_full",   "f_final",
                                              "gap_pct",  "rounds",   "fallback",
                                              "feasible_full", "flagged"};
    if (gaps.header != gap_hdr) throw DataError(run_dir + "/gaps.csv: unexpected columns");
    std::vector<GapScenario> gs;
    for (const std::vector<double>& row : gaps.rows)
        gs.push_back({static_cast<int>(row[0]), row[3], row[5] != 0.0,
                      static_cast<int>(row[4]), row[6] != 0.0, row[7] != 0.0});
    r.gaps = make_gap_report(std::move(gs));

    const CsvTable timing = read_csv(run_dir + "/timing.csv");
    const std::vector<std::string> tim_hdr = {"scenario",     "iter_full",  "iter_trunc",
                                              "time_full_s",  "time_trunc_s", "feval_full",
                                              "feval_trunc"};
    if (timing.header != tim_hdr) throw DataError(run_dir + "/timing.csv: unexpected columns");
    for (const std::vector<double>& row : timing.rows)
        r.timing_rows.emplace_back(SolveStats{row[1], row[3], row[5]},
                                   SolveStats{row[2], row[4], row[6]});
    if (!r.timing_rows.empty()) r.timing = timing_compare(r.timing_rows);

    std::cout << render_report(r);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"active-constraint screening for AC optimal power flow"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "print help for every subcommand");

    GenDataArgs gen_args;
    CLI::App* gen = app.add_subcommand(
        "gen-data", "generate labeled scenario datasets (dataset1, dataset2, test)");
    setup_gen_data(*gen, gen_args);

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand(
        "train", "train the dispatch regressor and both activity classifiers");
    setup_train(*train, train_args);

    EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand(
        "eval", "evaluate trained models against a labeled test dataset");
    setup_eval(*eval, eval_args);

    SolveArgs solve_args;
    CLI::App* solve = app.add_subcommand(
        "solve", "solve one OPF instance, optionally screened by trained models");
    setup_solve(*solve, solve_args);

    std::string report_dir;
    CLI::App* report =
        app.add_subcommand("report", "re-render an evaluation report from run artifacts");
    report->add_option("run", report_dir, "evaluation run directory")->required();

    try {
        app.parse(argc, argv);
        if (*gen) return run_gen_data(gen_args);
        if (*train) return run_train(train_args);
        if (*eval) return run_eval(eval_args);
        if (*solve) return run_solve(solve_args);
        if (*report) return run_report(report_dir);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1; // non-help parse problems are usage errors
    } catch (const opfs::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
