#include "astgl/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "astgl/evaluation.hpp"
#include "astgl/kernels.hpp"
#include "astgl/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace astgl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Per-label base counts mirroring the published dataset statistics; desk-scale
// targets divide these by generation.scale_divisor (rounded to nearest).
struct GroupBase {
    std::size_t train_per_label;
    std::size_t test_per_label;
};
const std::map<std::string, GroupBase> kGroupBases{
    {"A", {3064, 766}}, {"B", {3078, 770}}, {"C", {0, 770}}};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out = "runs/astgl";
    int threads = 0;

    GridSpec grid;

    struct Generation {
        std::vector<std::string> groups{"A", "B", "C"};
        double scale_divisor = 8.0;
        double t_win = 0.5;
        double dt_sample = 0.01;
        double dc_analogue_share = 0.15;
        std::size_t n2_weight = 2;
        std::size_t attempt_budget_factor = 400;
        SurrogateConstants surrogate;
    } generation;

    Hyperparams hyper;

    struct Paths {
        std::string data_root;    // default <out>/data
        std::string dataset;      // explicit dataset dir (train/eval/inspect)
        std::string checkpoint;   // default <out>/checkpoints/astgl_<group>.ckpt
        std::string train_group = "B";
    } paths;

    struct Eval {
        std::string group = "all";  // A, B, C, or all
        std::string baseline = "none";
    } eval;

    struct Hpo {
        std::size_t budget = 8;
        std::size_t epoch_cap = 4;
        std::string sweep;  // "" or "t_win"
        SearchSpace space;
    } hpo;

    struct Inspect {
        std::string split = "test";
        std::size_t max_cases = 0;
        std::vector<std::string> layers;  // empty: all
    } inspect;

    fs::path data_root() const {
        return paths.data_root.empty() ? fs::path(out) / "data" : fs::path(paths.data_root);
    }
    fs::path checkpoint_path() const {
        return paths.checkpoint.empty()
                   ? fs::path(out) / "checkpoints" / ("astgl_" + paths.train_group + ".ckpt")
                   : fs::path(paths.checkpoint);
    }
};

// --- strict JSON loading -----------------------------------------------------

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& prefix) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError(concat("config: unknown key '", prefix, key, "'"));
        }
    }
}

template <typename T>
void take(const json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

void parse_surrogate(const json& j, SurrogateConstants& c, const std::string& prefix) {
    reject_unknown(j,
                   {"inertia", "slip_critical", "torque_gain", "mech_torque", "reactive_gain",
                    "grounding_eps", "dt", "horizon", "slip_blowup", "v_ceiling"},
                   prefix);
    take(j, "inertia", c.inertia);
    take(j, "slip_critical", c.slip_critical);
    take(j, "torque_gain", c.torque_gain);
    take(j, "mech_torque", c.mech_torque);
    take(j, "reactive_gain", c.reactive_gain);
    take(j, "grounding_eps", c.grounding_eps);
    take(j, "dt", c.dt);
    take(j, "horizon", c.horizon);
    take(j, "slip_blowup", c.slip_blowup);
    take(j, "v_ceiling", c.v_ceiling);
}

void parse_space(const json& j, SearchSpace& s, const std::string& prefix) {
    reject_unknown(j,
                   {"t_win", "lambda", "cheb_order", "temporal_taps", "gcn_channels",
                    "tcn_channels", "num_blocks", "learning_rate"},
                   prefix);
    take(j, "t_win", s.t_win);
    take(j, "lambda", s.lambda_reg);
    take(j, "cheb_order", s.cheb_order);
    take(j, "temporal_taps", s.temporal_taps);
    take(j, "gcn_channels", s.gcn_channels);
    take(j, "tcn_channels", s.tcn_channels);
    take(j, "num_blocks", s.num_blocks);
    take(j, "learning_rate", s.learning_rate);
}

RunConfig parse_config(const json& j) {
    RunConfig c;
    reject_unknown(j, {"seed", "out", "threads", "grid", "generation", "hyperparams", "paths",
                       "eval", "hpo", "inspect"},
                   "");
    take(j, "seed", c.seed);
    take(j, "out", c.out);
    take(j, "threads", c.threads);
    if (j.contains("grid")) {
        const json& g = j["grid"];
        reject_unknown(g, {"n_buses", "ring_reactance", "chord_reactance", "reactance_jitter"},
                       "grid.");
        take(g, "n_buses", c.grid.n_buses);
        take(g, "ring_reactance", c.grid.ring_reactance);
        take(g, "chord_reactance", c.grid.chord_reactance);
        take(g, "reactance_jitter", c.grid.reactance_jitter);
    }
    if (j.contains("generation")) {
        const json& g = j["generation"];
        reject_unknown(g,
                       {"groups", "scale_divisor", "t_win", "dt_sample", "dc_analogue_share", "n2_weight",
                        "attempt_budget_factor", "surrogate"},
                       "generation.");
        take(g, "groups", c.generation.groups);
        take(g, "scale_divisor", c.generation.scale_divisor);
        take(g, "t_win", c.generation.t_win);
        take(g, "dt_sample", c.generation.dt_sample);
        take(g, "dc_analogue_share", c.generation.dc_analogue_share);
        take(g, "n2_weight", c.generation.n2_weight);
        take(g, "attempt_budget_factor", c.generation.attempt_budget_factor);
        if (g.contains("surrogate")) {
            parse_surrogate(g["surrogate"], c.generation.surrogate, "generation.surrogate.");
        }
    }
    if (j.contains("hyperparams")) {
        const json& h = j["hyperparams"];
        reject_unknown(h,
                       {"t_win", "cheb_order", "temporal_taps", "gcn_channels", "tcn_channels",
                        "num_blocks", "lambda", "gamma", "learning_rate", "batch_size", "epochs",
                        "shared_pair_weights", "literal_row_norm"},
                       "hyperparams.");
        take(h, "t_win", c.hyper.t_win);
        take(h, "cheb_order", c.hyper.cheb_order);
        take(h, "temporal_taps", c.hyper.temporal_taps);
        take(h, "gcn_channels", c.hyper.gcn_channels);
        take(h, "tcn_channels", c.hyper.tcn_channels);
        take(h, "num_blocks", c.hyper.num_blocks);
        take(h, "lambda", c.hyper.lambda_reg);
        take(h, "gamma", c.hyper.gamma_agl);
        take(h, "learning_rate", c.hyper.learning_rate);
        take(h, "batch_size", c.hyper.batch_size);
        take(h, "epochs", c.hyper.epochs);
        take(h, "shared_pair_weights", c.hyper.shared_pair_weights);
        take(h, "literal_row_norm", c.hyper.literal_row_norm);
    }
    if (j.contains("paths")) {
        const json& p = j["paths"];
        reject_unknown(p, {"data_root", "dataset", "checkpoint", "train_group"}, "paths.");
        take(p, "data_root", c.paths.data_root);
        take(p, "dataset", c.paths.dataset);
        take(p, "checkpoint", c.paths.checkpoint);
        take(p, "train_group", c.paths.train_group);
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        reject_unknown(e, {"group", "baseline"}, "eval.");
        take(e, "group", c.eval.group);
        take(e, "baseline", c.eval.baseline);
    }
    if (j.contains("hpo")) {
        const json& h = j["hpo"];
        reject_unknown(h, {"budget", "epoch_cap", "sweep", "space"}, "hpo.");
        take(h, "budget", c.hpo.budget);
        take(h, "epoch_cap", c.hpo.epoch_cap);
        take(h, "sweep", c.hpo.sweep);
        if (h.contains("space")) parse_space(h["space"], c.hpo.space, "hpo.space.");
    }
    if (j.contains("inspect")) {
        const json& i = j["inspect"];
        reject_unknown(i, {"split", "max_cases", "layers"}, "inspect.");
        take(i, "split", c.inspect.split);
        take(i, "max_cases", c.inspect.max_cases);
        take(i, "layers", c.inspect.layers);
    }
    return c;
}

json config_to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["threads"] = c.threads;
    j["grid"] = {{"n_buses", c.grid.n_buses},
                 {"ring_reactance", c.grid.ring_reactance},
                 {"chord_reactance", c.grid.chord_reactance},
                 {"reactance_jitter", c.grid.reactance_jitter}};
    j["generation"] = {{"groups", c.generation.groups},
                       {"scale_divisor", c.generation.scale_divisor},
                       {"t_win", c.generation.t_win},
                       {"dt_sample", c.generation.dt_sample},
                       {"dc_analogue_share", c.generation.dc_analogue_share},
                       {"n2_weight", c.generation.n2_weight},
                       {"attempt_budget_factor", c.generation.attempt_budget_factor},
                       {"surrogate",
                        {{"inertia", c.generation.surrogate.inertia},
                         {"slip_critical", c.generation.surrogate.slip_critical},
                         {"torque_gain", c.generation.surrogate.torque_gain},
                         {"mech_torque", c.generation.surrogate.mech_torque},
                         {"reactive_gain", c.generation.surrogate.reactive_gain},
                         {"grounding_eps", c.generation.surrogate.grounding_eps},
                         {"dt", c.generation.surrogate.dt},
                         {"horizon", c.generation.surrogate.horizon},
                         {"slip_blowup", c.generation.surrogate.slip_blowup},
                         {"v_ceiling", c.generation.surrogate.v_ceiling}}}};
    j["hyperparams"] = {{"t_win", c.hyper.t_win},
                        {"cheb_order", c.hyper.cheb_order},
                        {"temporal_taps", c.hyper.temporal_taps},
                        {"gcn_channels", c.hyper.gcn_channels},
                        {"tcn_channels", c.hyper.tcn_channels},
                        {"num_blocks", c.hyper.num_blocks},
                        {"lambda", c.hyper.lambda_reg},
                        {"gamma", c.hyper.gamma_agl},
                        {"learning_rate", c.hyper.learning_rate},
                        {"batch_size", c.hyper.batch_size},
                        {"epochs", c.hyper.epochs},
                        {"shared_pair_weights", c.hyper.shared_pair_weights},
                        {"literal_row_norm", c.hyper.literal_row_norm}};
    j["paths"] = {{"data_root", c.paths.data_root},
                  {"dataset", c.paths.dataset},
                  {"checkpoint", c.paths.checkpoint},
                  {"train_group", c.paths.train_group}};
    j["eval"] = {{"group", c.eval.group}, {"baseline", c.eval.baseline}};
    j["hpo"] = {{"budget", c.hpo.budget},
                {"epoch_cap", c.hpo.epoch_cap},
                {"sweep", c.hpo.sweep},
                {"space",
                 {{"t_win", c.hpo.space.t_win},
                  {"lambda", c.hpo.space.lambda_reg},
                  {"cheb_order", c.hpo.space.cheb_order},
                  {"temporal_taps", c.hpo.space.temporal_taps},
                  {"gcn_channels", c.hpo.space.gcn_channels},
                  {"tcn_channels", c.hpo.space.tcn_channels},
                  {"num_blocks", c.hpo.space.num_blocks},
                  {"learning_rate", c.hpo.space.learning_rate}}}};
    j["inspect"] = {{"split", c.inspect.split},
                    {"max_cases", c.inspect.max_cases},
                    {"layers", c.inspect.layers}};
    return j;
}

json json_pointer_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return json(text);  // bare strings are allowed unquoted
    }
}

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::optional<std::uint64_t>& seed_flag,
                      const std::string& out_flag, int threads_flag) {
    json j = config_to_json(RunConfig{});
    if (!config_path.empty()) {
        std::ifstream in(config_path, std::ios::binary);
        if (!in) throw DataError(concat("cannot read config file ", config_path));
        json loaded;
        try {
            loaded = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError(concat("config file is not valid JSON: ", e.what()));
        }
        parse_config(loaded);  // strict key check on the user's file
        j.merge_patch(loaded);
    }
    for (const std::string& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(concat("--set expects key.path=value, got '", kv, "'"));
        }
        std::string pointer = "/" + kv.substr(0, eq);
        for (auto& ch : pointer) {
            if (ch == '.') ch = '/';
        }
        try {
            j[json::json_pointer(pointer)] = json_pointer_value(kv.substr(eq + 1));
        } catch (const json::exception& e) {
            throw ConfigError(concat("--set ", kv, ": ", e.what()));
        }
    }
    RunConfig c = parse_config(j);
    if (seed_flag.has_value()) c.seed = *seed_flag;
    if (!out_flag.empty()) c.out = out_flag;
    if (threads_flag >= 0) c.threads = threads_flag;
    return c;
}

void apply_threads(const RunConfig& c) {
    if (c.threads > 0) {
#ifdef _OPENMP
        omp_set_num_threads(c.threads);
#endif
        kernels::set_max_threads(c.threads);
    }
}

void write_resolved_config(const RunConfig& c) {
    fs::create_directories(c.out);
    std::ofstream out(fs::path(c.out) / "resolved_config.json", std::ios::binary);
    if (!out) throw DataError(concat("cannot write resolved config under ", c.out));
    out << config_to_json(c).dump(2) << "\n";
}

std::size_t desk_count(std::size_t base, double divisor) {
    return static_cast<std::size_t>(
        std::llround(static_cast<double>(base) / divisor));
}

GridTopology grid_for(const RunConfig& c) {
    GridSpec spec = c.grid;
    spec.seed = substream_seed(c.seed, "grid");
    return build_grid(spec);
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

// --- commands ----------------------------------------------------------------

int cmd_gen_data(const RunConfig& c) {
    Timer timer;
    write_resolved_config(c);
    GridTopology topo = grid_for(c);
    fs::create_directories(c.data_root());
    save_topology(topo, c.data_root() / "topology.json");

    std::cout << "grid: " << topo.n_buses() << " buses, " << topo.lines.size()
              << " lines, digest " << grid_digest(topo) << "\n";
    std::cout << "group  split  stable  unstable  total\n";
    for (const std::string& group : c.generation.groups) {
        const auto it = kGroupBases.find(group);
        if (it == kGroupBases.end()) {
            throw ConfigError(concat("generation.groups: unknown group '", group, "'"));
        }
        GenerationSpec spec;
        spec.group = scenario_group_from(group);
        spec.train_per_label = desk_count(it->second.train_per_label, c.generation.scale_divisor);
        spec.test_per_label = desk_count(it->second.test_per_label, c.generation.scale_divisor);
        spec.t_win = c.generation.t_win;
        spec.dt_sample = c.generation.dt_sample;
        spec.dc_analogue_share = c.generation.dc_analogue_share;
        spec.n2_weight = c.generation.n2_weight;
        spec.attempt_budget_factor = c.generation.attempt_budget_factor;
        spec.seed = substream_seed(c.seed, "generation." + group);

        Dataset ds = generate_dataset(topo, spec, c.generation.surrogate);
        save_dataset(ds, topo, c.data_root() / group);
        export_dataset_csv(ds, c.data_root() / group / "cases.csv");

        for (const std::string& split : {"train", "test"}) {
            const auto counts = ds.manifest.counts.find(split);
            if (counts == ds.manifest.counts.end()) continue;
            std::cout << group << "      " << split << (split == "test" ? "   " : "  ")
                      << counts->second[0] << "     " << counts->second[1] << "       "
                      << counts->second[0] + counts->second[1] << "\n";
        }
        std::cout << group << "      payload digest " << ds.manifest.payload_digest << "\n";
    }
    std::cout << "gen-data completed in " << timer.seconds() << " s\n";
    return 0;
}

fs::path dataset_dir_for(const RunConfig& c, const std::string& group) {
    if (!c.paths.dataset.empty()) return c.paths.dataset;
    return c.data_root() / group;
}

int cmd_train(const RunConfig& c) {
    Timer timer;
    write_resolved_config(c);
    const fs::path ds_dir = dataset_dir_for(c, c.paths.train_group);
    if (!fs::exists(ds_dir / "manifest.json")) {
        throw DataError(concat("no dataset at ", ds_dir.string(), "; run gen-data first"));
    }
    Dataset ds = load_dataset(ds_dir);
    GridTopology topo = dataset_topology(ds_dir);

    Hyperparams hyper = c.hyper;
    hyper.seed = c.seed;
    TrainResult run = train(ds, topo, hyper, GraphMode::adaptive);

    fs::create_directories(fs::path(c.out) / "checkpoints");
    fs::create_directories(fs::path(c.out) / "logs");
    save_checkpoint(run.checkpoint, c.checkpoint_path());
    write_train_log_csv(run.log, fs::path(c.out) / "logs" /
                                     ("train_" + c.paths.train_group + ".csv"));

    if (run.aborted) {
        std::cerr << "training aborted: " << run.abort_reason << "\n";
        return 4;
    }
    std::cout << "trained " << run.checkpoint.model_id << " on group " << c.paths.train_group
              << ": train_acc=" << run.final_train_acc << " val_acc=" << run.final_val_acc
              << " best_val_acc=" << run.checkpoint.best_val_acc << "\n";
    std::cout << "checkpoint: " << c.checkpoint_path().string() << "\n";
    std::cout << "train completed in " << timer.seconds() << " s\n";
    return 0;
}

int cmd_eval(const RunConfig& c) {
    Timer timer;
    write_resolved_config(c);
    Checkpoint ckpt = load_checkpoint(c.checkpoint_path());

    std::vector<std::string> groups;
    if (c.eval.group == "all") {
        for (const std::string& g : {"A", "B", "C"}) {
            if (fs::exists(c.data_root() / g / "manifest.json")) groups.push_back(g);
        }
        if (groups.empty()) throw DataError(concat("no datasets under ", c.data_root().string()));
    } else {
        groups.push_back(c.eval.group);
    }

    fs::create_directories(fs::path(c.out) / "reports");
    std::map<std::string, double> astgl_acc, baseline_acc;
    for (const std::string& group : groups) {
        const fs::path dir = dataset_dir_for(c, group);
        Dataset ds = load_dataset(dir);
        EvalReport report = evaluate(ckpt, ds, "test");
        astgl_acc[group] = report.overall.values.accuracy;
        save_report(report, fs::path(c.out) / "reports" / ("eval_astgl_" + group + ".json"));
        write_report_csv(report, fs::path(c.out) / "reports" / ("eval_astgl_" + group + ".csv"));
        std::cout << "astgl on group " << group << ": acc=" << report.overall.values.accuracy
                  << " f1=" << report.overall.values.f1 << " pre=" << report.overall.values.precision
                  << " rec=" << report.overall.values.recall << "\n";
    }

    if (c.eval.baseline != "none") {
        const GraphMode mode = c.eval.baseline == "connectivity" ? GraphMode::fixed_connectivity
                               : c.eval.baseline == "admittance" ? GraphMode::fixed_admittance
                                                                 : GraphMode::adaptive;
        if (mode == GraphMode::adaptive) {
            throw ConfigError(concat("eval.baseline must be none, connectivity, or admittance; got '",
                                     c.eval.baseline, "'"));
        }
        const fs::path train_dir = dataset_dir_for(c, c.paths.train_group);
        Dataset train_ds = load_dataset(train_dir);
        GridTopology topo = dataset_topology(train_dir);
        Hyperparams hyper = c.hyper;
        hyper.seed = c.seed;
        BaselineResult base = baseline_fixed_adjacency(train_ds, topo, mode, hyper);
        for (const std::string& group : groups) {
            Dataset ds = load_dataset(dataset_dir_for(c, group));
            EvalReport report = evaluate(base.checkpoint, ds, "test");
            baseline_acc[group] = report.overall.values.accuracy;
            save_report(report, fs::path(c.out) / "reports" /
                                    ("eval_" + base.checkpoint.model_id + "_" + group + ".json"));
            write_report_csv(report, fs::path(c.out) / "reports" /
                                         ("eval_" + base.checkpoint.model_id + "_" + group + ".csv"));
            std::cout << base.checkpoint.model_id << " on group " << group
                      << ": acc=" << report.overall.values.accuracy << "\n";
        }
    }

    if (astgl_acc.count("B") && astgl_acc.count("C")) {
        std::cout << "known-vs-unknown accuracy gap (B - C): "
                  << (astgl_acc["B"] - astgl_acc["C"]) * 100.0 << " percentage points\n";
    }
    std::cout << "eval completed in " << timer.seconds() << " s\n";
    return 0;
}

int cmd_hpo(const RunConfig& c) {
    Timer timer;
    write_resolved_config(c);
    GridTopology topo = grid_for(c);
    fs::create_directories(fs::path(c.out) / "hpo");

    // Datasets per window length, generated once and cached on disk.
    std::map<double, std::shared_ptr<Dataset>> cache;
    auto provider = [&](double t_win) -> std::shared_ptr<const Dataset> {
        auto it = cache.find(t_win);
        if (it != cache.end()) return it->second;
        const fs::path dir =
            fs::path(c.out) / "hpo" / concat("data_tw", static_cast<int>(std::llround(t_win * 1000)), "ms");
        std::shared_ptr<Dataset> ds;
        if (fs::exists(dir / "manifest.json")) {
            ds = std::make_shared<Dataset>(load_dataset(dir));
        } else {
            GenerationSpec spec;
            spec.group = scenario_group_from(c.paths.train_group);
            const GroupBase& base = kGroupBases.at(c.paths.train_group);
            spec.train_per_label = desk_count(base.train_per_label, c.generation.scale_divisor);
            spec.test_per_label = desk_count(base.test_per_label, c.generation.scale_divisor);
            spec.t_win = t_win;
            spec.dt_sample = c.generation.dt_sample;
            spec.dc_analogue_share = c.generation.dc_analogue_share;
            spec.n2_weight = c.generation.n2_weight;
            spec.seed = substream_seed(c.seed, "generation." + c.paths.train_group);
            ds = std::make_shared<Dataset>(generate_dataset(topo, spec, c.generation.surrogate));
            save_dataset(*ds, topo, dir);
        }
        cache[t_win] = ds;
        return ds;
    };

    Hyperparams base = c.hyper;
    base.seed = c.seed;

    if (c.hpo.sweep == "t_win") {
        std::vector<double> values = c.hpo.space.t_win;
        if (values.size() < 2) {
            values = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
        }
        std::vector<TrialResult> rows = sweep_t_win(values, provider, topo, base,
                                                    c.hpo.epoch_cap);
        write_trial_table_csv(rows, fs::path(c.out) / "hpo" / "sweep_t_win.csv");
        for (const TrialResult& t : rows) {
            std::cout << "t_win=" << t.hyper.t_win << " val_acc=" << t.val_acc
                      << (t.failed ? " (failed)" : "") << "\n";
        }
    } else if (!c.hpo.sweep.empty()) {
        throw ConfigError(concat("hpo.sweep must be empty or 't_win', got '", c.hpo.sweep, "'"));
    } else {
        HpoResult result = random_search_hpo(c.hpo.space, c.hpo.budget, provider, topo, base,
                                             substream_seed(c.seed, "hpo"), c.hpo.epoch_cap);
        write_trial_table_csv(result.trials, fs::path(c.out) / "hpo" / "trials.csv");

        RunConfig best_config = c;
        best_config.hyper = result.best;
        std::ofstream out(fs::path(c.out) / "hpo" / "best_config.json", std::ios::binary);
        out << config_to_json(best_config).dump(2) << "\n";

        std::cout << "best trial " << result.best_index << ": val_acc="
                  << result.trials[result.best_index].val_acc << "\n";
        std::cout << "wrote " << (fs::path(c.out) / "hpo" / "best_config.json").string() << "\n";
    }
    std::cout << "hpo completed in " << timer.seconds() << " s\n";
    return 0;
}

int cmd_inspect(const RunConfig& c) {
    Timer timer;
    write_resolved_config(c);
    Checkpoint ckpt = load_checkpoint(c.checkpoint_path());
    const fs::path ds_dir = dataset_dir_for(c, c.paths.train_group);
    Dataset ds = load_dataset(ds_dir);
    GridTopology topo = dataset_topology(ds_dir);

    const fs::path dir = fs::path(c.out) / "inspect";
    InspectionResult res = inspect_adaptive_graph(ckpt, ds, c.inspect.split, topo,
                                                  c.inspect.max_cases);
    write_inspection_csv(res, dir);
    std::cout << "sign test: " << res.sign_test.positive << "+ / " << res.sign_test.negative
              << "- (" << res.sign_test.tied << " tied), p=" << res.sign_test.p_value
              << (res.sign_test.significant() ? " (significant at 0.05)" : "") << "\n";

    std::vector<std::string> layers = c.inspect.layers;
    if (layers.empty()) layers = embedding_layers(ckpt.config);
    for (const std::string& layer : layers) {
        export_embeddings(ckpt, ds, c.inspect.split, layer,
                          dir / ("embeddings_" + layer + ".csv"));
    }
    std::cout << "wrote matrices and embeddings under " << dir.string() << "\n";
    std::cout << "inspect completed in " << timer.seconds() << " s\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Adaptive spatio-temporal graph learning for short-term voltage stability"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags are accepted after the subcommand too

    std::string config_path, out_flag;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed_flag;
    int threads_flag = -1;

    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--seed", seed_flag, "top-level seed (overrides config)");
    app.add_option("--out", out_flag, "output directory (overrides config)");
    app.add_option("--threads", threads_flag, "worker thread cap, 0 = default");
    app.add_option("--set", sets, "override a config value: key.path=value")->take_all();

    CLI::App* gen = app.add_subcommand("gen-data", "generate labeled transient datasets");
    CLI::App* train_cmd = app.add_subcommand("train", "train the classifier");
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    CLI::App* hpo_cmd = app.add_subcommand("hpo", "random hyperparameter search / sweeps");
    CLI::App* inspect_cmd = app.add_subcommand("inspect", "export learned graphs and embeddings");

    std::string group_flag, baseline_flag;
    eval_cmd->add_option("--group", group_flag, "A, B, C, or all");
    eval_cmd->add_option("--baseline", baseline_flag, "none, connectivity, or admittance");

    try {
        // CLI11's vector overload consumes arguments in reverse order.
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        RunConfig config = load_config(config_path, sets, seed_flag, out_flag, threads_flag);
        if (!group_flag.empty()) config.eval.group = group_flag;
        if (!baseline_flag.empty()) config.eval.baseline = baseline_flag;
        apply_threads(config);

        if (gen->parsed()) return cmd_gen_data(config);
        if (train_cmd->parsed()) return cmd_train(config);
        if (eval_cmd->parsed()) return cmd_eval(config);
        if (hpo_cmd->parsed()) return cmd_hpo(config);
        if (inspect_cmd->parsed()) return cmd_inspect(config);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace astgl::cli
