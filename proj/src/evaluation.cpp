#include "astgl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "astgl/csv.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace astgl {

using nlohmann::json;

MetricValues metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw DataError("metrics: empty evaluation set");
    MetricValues m;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    const bool has_pre = c.tp + c.fp > 0;
    const bool has_rec = c.tp + c.fn > 0;
    if (has_pre) m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (has_rec) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (has_pre && has_rec) {
        const double denom = m.precision + m.recall;
        m.f1 = denom > 0 ? 2.0 * m.precision * m.recall / denom : 0.0;
    }
    return m;
}

namespace {

std::vector<int> predictions_for(const Checkpoint& ckpt, const Dataset& dataset,
                                 const std::string& split_name) {
    const SplitTensors& split = dataset.split(split_name);
    const ModelConfig& config = ckpt.config;
    if (split.cases() == 0) {
        throw DataError(concat("evaluate: split '", split_name, "' is empty"));
    }
    if (split.x.extent(2) != config.n_buses || split.x.extent(1) != config.window_len) {
        throw DataError(concat("evaluate: dataset window [", split.x.extent(1), "x",
                               split.x.extent(2), "] does not match checkpoint [",
                               config.window_len, "x", config.n_buses, "]"));
    }
    std::vector<int> preds(split.cases(), 0);
    std::string failure;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(split.cases()); ++i) {
        const std::size_t row = static_cast<std::size_t>(i);
        try {
            const std::size_t numel = split.x.extent(1) * split.x.extent(2) * 3;
            Tensor x({split.x.extent(1), split.x.extent(2), 3});
            std::copy(split.x.data() + row * numel, split.x.data() + (row + 1) * numel,
                      x.data());
            ForwardTrace trace = forward(x, ckpt.best_params, config);
            preds[row] = predict_label(trace.y_hat);
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            failure = e.what();
        }
    }
    if (!failure.empty()) throw NumericalError(concat("evaluate: ", failure));
    return preds;
}

void tally(ConfusionCounts& counts, int truth, int predicted) {
    if (truth == 1) {
        (predicted == 1 ? counts.tp : counts.fn)++;
    } else {
        (predicted == 0 ? counts.tn : counts.fp)++;
    }
}

json group_to_json(const GroupReport& g) {
    auto opt = [](double v) { return std::isnan(v) ? json() : json(v); };
    return json{{"counts",
                 {{"tp", g.counts.tp}, {"tn", g.counts.tn}, {"fp", g.counts.fp},
                  {"fn", g.counts.fn}}},
                {"accuracy", opt(g.values.accuracy)},
                {"f1", opt(g.values.f1)},
                {"precision", opt(g.values.precision)},
                {"recall", opt(g.values.recall)}};
}

}  // namespace

EvalReport evaluate(const Checkpoint& ckpt, const Dataset& dataset, const std::string& split) {
    const std::vector<int> preds = predictions_for(ckpt, dataset, split);
    const SplitTensors& tensors = dataset.split(split);
    const std::vector<const CaseRecord*> records = dataset.split_records(split);

    EvalReport report;
    report.model_id = ckpt.model_id;
    report.dataset_digest = dataset.manifest.payload_digest;
    report.split = split;
    std::map<std::string, ConfusionCounts> by_group;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int truth = static_cast<int>(tensors.labels[i]);
        tally(report.overall.counts, truth, preds[i]);
        if (records[i] != nullptr) {
            tally(by_group[scenario_group_name(records[i]->group)], truth, preds[i]);
        }
    }
    report.overall.values = metrics(report.overall.counts);
    for (const auto& [group, counts] : by_group) {
        report.by_group[group] = GroupReport{counts, metrics(counts)};
    }
    return report;
}

std::string report_to_json(const EvalReport& report) {
    json j;
    j["model_id"] = report.model_id;
    j["dataset_digest"] = report.dataset_digest;
    j["split"] = report.split;
    j["overall"] = group_to_json(report.overall);
    json groups = json::object();
    for (const auto& [name, g] : report.by_group) groups[name] = group_to_json(g);
    j["groups"] = groups;
    return j.dump(2);
}

void save_report(const EvalReport& report, const std::filesystem::path& json_path) {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw DataError(concat("cannot write report ", json_path.string()));
    out << report_to_json(report) << "\n";
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& csv_path) {
    CsvWriter csv(csv_path);
    csv.cell(std::string("model_id"))
        .cell(std::string("split"))
        .cell(std::string("scope"))
        .cell(std::string("tp"))
        .cell(std::string("tn"))
        .cell(std::string("fp"))
        .cell(std::string("fn"))
        .cell(std::string("accuracy"))
        .cell(std::string("f1"))
        .cell(std::string("precision"))
        .cell(std::string("recall"));
    csv.end_row();
    auto row = [&](const std::string& scope, const GroupReport& g) {
        csv.cell(report.model_id)
            .cell(report.split)
            .cell(scope)
            .cell(g.counts.tp)
            .cell(g.counts.tn)
            .cell(g.counts.fp)
            .cell(g.counts.fn)
            .cell(g.values.accuracy)
            .cell(g.values.f1)
            .cell(g.values.precision)
            .cell(g.values.recall);
        csv.end_row();
    };
    row("overall", report.overall);
    for (const auto& [name, g] : report.by_group) row(concat("group_", name), g);
}

BaselineResult baseline_fixed_adjacency(const Dataset& dataset, const GridTopology& topology,
                                        GraphMode variant, const Hyperparams& hyper,
                                        std::size_t epoch_cap) {
    if (variant == GraphMode::adaptive) {
        throw ConfigError("baseline_fixed_adjacency: pick a fixed variant");
    }
    TrainResult run = train(dataset, topology, hyper, variant, epoch_cap);
    if (run.aborted) {
        throw NumericalError(concat("baseline training aborted: ", run.abort_reason));
    }
    BaselineResult out;
    out.checkpoint = std::move(run.checkpoint);
    out.report = evaluate(out.checkpoint, dataset, "test");
    return out;
}

// ---------------------------------------------------------------------------
// adaptive-graph inspection

double sign_test_p_value(std::size_t positive, std::size_t negative) {
    const std::size_t n = positive + negative;
    if (n == 0 || positive == 0) return 1.0;
    double acc = 0.0;
    for (std::size_t i = positive; i <= n; ++i) {
        const double log_c = std::lgamma(static_cast<double>(n) + 1) -
                             std::lgamma(static_cast<double>(i) + 1) -
                             std::lgamma(static_cast<double>(n - i) + 1);
        acc += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
    }
    return std::min(acc, 1.0);
}

InspectionResult inspect_adaptive_graph(const Checkpoint& ckpt, const Dataset& dataset,
                                        const std::string& split, const GridTopology& topology,
                                        std::size_t max_cases) {
    if (ckpt.config.graph_mode != GraphMode::adaptive) {
        throw ConfigError("inspect_adaptive_graph: checkpoint has no adaptive graph (fixed mode)");
    }
    const SplitTensors& tensors = dataset.split(split);
    const std::vector<const CaseRecord*> records = dataset.split_records(split);
    const std::size_t n = topology.n_buses();
    if (ckpt.config.n_buses != n) {
        throw DataError("inspect_adaptive_graph: topology size does not match checkpoint");
    }

    std::size_t count = tensors.cases();
    if (max_cases > 0) count = std::min(count, max_cases);
    for (std::size_t row = 0; row < count; ++row) {
        if (records[row] == nullptr) {
            throw DataError("inspect_adaptive_graph: case metadata missing from manifest");
        }
    }

    InspectionResult result;
    result.cases.resize(count);
    std::string failure;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::ptrdiff_t idx = 0; idx < static_cast<std::ptrdiff_t>(count); ++idx) {
        const std::size_t row = static_cast<std::size_t>(idx);
        try {
            const CaseRecord* rec = records[row];
            const std::size_t numel = tensors.x.extent(1) * tensors.x.extent(2) * 3;
            Tensor x({tensors.x.extent(1), tensors.x.extent(2), 3});
            std::copy(tensors.x.data() + row * numel, tensors.x.data() + (row + 1) * numel,
                      x.data());
            ForwardTrace trace = forward(x, ckpt.best_params, ckpt.config);

            CaseInspection& ci = result.cases[row];
            ci.case_seed = rec->case_seed;
            ci.group = scenario_group_name(rec->group);
            ci.label = rec->label;
            ci.fault_bus = rec->fault.fault_bus;
            ci.fault_region = topology.buses[ci.fault_bus].region;
            ci.a_adp = std::move(trace.a_adp);
            ci.alpha_sp = std::move(trace.alpha_sp);
            ci.a_sp = std::move(trace.a_sp);

            const std::vector<std::size_t> region = topology.region_members(ci.fault_region);
            double inside = 0.0, total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double w = ci.a_sp.at(ci.fault_bus, j);
                total += w;
                if (std::find(region.begin(), region.end(), j) != region.end()) inside += w;
            }
            ci.fault_region_mass = total > 0 ? inside / total : 0.0;
            const double share_in = static_cast<double>(region.size()) / static_cast<double>(n);
            ci.in_region_norm = ci.fault_region_mass / share_in;
            ci.out_region_norm = (1.0 - ci.fault_region_mass) / (1.0 - share_in);
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            failure = e.what();
        }
    }
    if (!failure.empty()) throw NumericalError(concat("inspect_adaptive_graph: ", failure));

    SignTest& st = result.sign_test;
    for (const CaseInspection& ci : result.cases) {
        ++st.pairs;
        if (ci.in_region_norm > ci.out_region_norm) {
            ++st.positive;
        } else if (ci.in_region_norm < ci.out_region_norm) {
            ++st.negative;
        } else {
            ++st.tied;
        }
    }
    st.p_value = sign_test_p_value(st.positive, st.negative);
    return result;
}

void write_inspection_csv(const InspectionResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto dump_matrix = [&](const char* name, const Tensor& (*pick)(const CaseInspection&)) {
        CsvWriter csv(dir / concat(name, ".csv"));
        csv.cell(std::string("case_seed"));
        if (!result.cases.empty()) {
            const std::size_t n = pick(result.cases.front()).extent(0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) csv.cell(concat("w_", i, "_", j));
        }
        csv.end_row();
        for (const CaseInspection& ci : result.cases) {
            csv.cell(std::to_string(ci.case_seed));
            const Tensor& m = pick(ci);
            for (std::size_t i = 0; i < m.numel(); ++i) csv.cell(m[i]);
            csv.end_row();
        }
    };
    dump_matrix("a_adp", [](const CaseInspection& c) -> const Tensor& { return c.a_adp; });
    dump_matrix("alpha_sp", [](const CaseInspection& c) -> const Tensor& { return c.alpha_sp; });
    dump_matrix("a_sp", [](const CaseInspection& c) -> const Tensor& { return c.a_sp; });

    CsvWriter csv(dir / "attention_mass.csv");
    csv.cell(std::string("case_seed"))
        .cell(std::string("group"))
        .cell(std::string("label"))
        .cell(std::string("fault_bus"))
        .cell(std::string("fault_region"))
        .cell(std::string("fault_region_mass"))
        .cell(std::string("in_region_norm"))
        .cell(std::string("out_region_norm"));
    csv.end_row();
    for (const CaseInspection& ci : result.cases) {
        csv.cell(std::to_string(ci.case_seed))
            .cell(ci.group)
            .cell(ci.label)
            .cell(ci.fault_bus)
            .cell(ci.fault_region)
            .cell(ci.fault_region_mass)
            .cell(ci.in_region_norm)
            .cell(ci.out_region_norm);
        csv.end_row();
    }

    std::ofstream sign(dir / "sign_test.json", std::ios::binary);
    sign << json{{"pairs", result.sign_test.pairs},
                 {"positive", result.sign_test.positive},
                 {"negative", result.sign_test.negative},
                 {"tied", result.sign_test.tied},
                 {"p_value", result.sign_test.p_value},
                 {"significant_at_0.05", result.sign_test.significant()}}
                .dump(2)
         << "\n";
}

// ---------------------------------------------------------------------------
// embeddings

std::vector<std::string> embedding_layers(const ModelConfig& config) {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < config.num_blocks + 2; ++b) {
        names.push_back(concat("L", b + 1));
    }
    return names;
}

void export_embeddings(const Checkpoint& ckpt, const Dataset& dataset, const std::string& split,
                       const std::string& layer, const std::filesystem::path& csv_path) {
    const std::vector<std::string> layers = embedding_layers(ckpt.config);
    const auto it = std::find(layers.begin(), layers.end(), layer);
    if (it == layers.end()) {
        std::string known;
        for (const std::string& l : layers) known += " " + l;
        throw ConfigError(concat("export_embeddings: unknown layer '", layer, "'; expected one of",
                                 known));
    }
    const std::size_t layer_idx = static_cast<std::size_t>(it - layers.begin());
    const SplitTensors& tensors = dataset.split(split);
    const std::vector<const CaseRecord*> records = dataset.split_records(split);

    std::vector<std::vector<double>> features(tensors.cases());
    std::string failure;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(tensors.cases()); ++i) {
        const std::size_t row = static_cast<std::size_t>(i);
        try {
            const std::size_t numel = tensors.x.extent(1) * tensors.x.extent(2) * 3;
            Tensor x({tensors.x.extent(1), tensors.x.extent(2), 3});
            std::copy(tensors.x.data() + row * numel, tensors.x.data() + (row + 1) * numel,
                      x.data());
            ForwardTrace trace = forward(x, ckpt.best_params, ckpt.config);
            const Tensor* src;
            if (layer_idx < ckpt.config.num_blocks) {
                src = &trace.z_st_prime[layer_idx];
            } else if (layer_idx == ckpt.config.num_blocks) {
                src = &trace.logits;
            } else {
                src = &trace.y_hat;
            }
            features[row].assign(src->data(), src->data() + src->numel());
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            failure = e.what();
        }
    }
    if (!failure.empty()) throw NumericalError(concat("export_embeddings: ", failure));

    CsvWriter csv(csv_path);
    csv.cell(std::string("case_seed")).cell(std::string("group")).cell(std::string("label"));
    if (!features.empty()) {
        for (std::size_t i = 0; i < features.front().size(); ++i) csv.cell(concat("f", i));
    }
    csv.end_row();
    for (std::size_t row = 0; row < features.size(); ++row) {
        const CaseRecord* rec = records[row];
        csv.cell(rec != nullptr ? std::to_string(rec->case_seed) : std::string("?"))
            .cell(rec != nullptr ? scenario_group_name(rec->group) : std::string("?"))
            .cell(static_cast<int>(tensors.labels[row]));
        for (double v : features[row]) csv.cell(v);
        csv.end_row();
    }
}

}  // namespace astgl
