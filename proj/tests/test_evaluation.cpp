#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "astgl/evaluation.hpp"
#include "support/model_builders.hpp"

using namespace astgl;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    GridTopology topo;
    Dataset dataset;
    Checkpoint ckpt;
    Fixture() : topo(build_grid(GridSpec{})) {
        GenerationSpec spec;
        spec.group = ScenarioGroup::B;
        spec.train_per_label = 16;
        spec.test_per_label = 6;
        spec.seed = 777;
        dataset = generate_dataset(topo, spec);

        Hyperparams h;
        h.gcn_channels = 4;
        h.tcn_channels = 4;
        h.num_blocks = 1;
        h.epochs = 2;
        h.batch_size = 8;
        h.seed = 3;
        TrainResult run = train(dataset, topo, h, GraphMode::adaptive);
        ckpt = std::move(run.checkpoint);
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

fs::path temp_dir(const char* stem) {
    const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
    fs::path p = fs::temp_directory_path() / (std::string(stem) + std::to_string(now));
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("metrics: direct formula evaluation") {
    MetricValues m = metrics({3, 4, 1, 2});
    CHECK(m.accuracy == doctest::Approx(0.70).epsilon(1e-14));
    CHECK(m.precision == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(m.recall == doctest::Approx(0.60).epsilon(1e-14));
    CHECK(m.f1 == doctest::Approx(2.0 * 0.75 * 0.6 / 1.35).epsilon(1e-14));
}

TEST_CASE("metrics: the headline confusion row reproduces published percentages") {
    // TP=766, TN=760, FP=6, FN=0.
    MetricValues m = metrics({766, 760, 6, 0});
    CHECK(std::fabs(m.accuracy * 100.0 - 99.61) <= 0.01);
    CHECK(std::fabs(m.precision * 100.0 - 99.22) <= 0.01);
    CHECK(std::fabs(m.recall * 100.0 - 100.0) <= 0.01);
    CHECK(std::fabs(m.f1 * 100.0 - 99.61) <= 0.01);
}

TEST_CASE("metrics: perfect classifier, undefined denominators, empty set") {
    MetricValues perfect = metrics({10, 10, 0, 0});
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.f1 == 1.0);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);

    // No predicted positives: precision undefined, F1 follows suit.
    MetricValues no_pos = metrics({0, 5, 0, 3});
    CHECK(std::isnan(no_pos.precision));
    CHECK(std::isnan(no_pos.f1));
    CHECK_FALSE(std::isnan(no_pos.recall));

    // No actual positives: recall undefined.
    MetricValues no_true = metrics({0, 5, 2, 0});
    CHECK(std::isnan(no_true.recall));
    CHECK(std::isnan(no_true.f1));

    CHECK_THROWS_AS(metrics({0, 0, 0, 0}), DataError);
}

TEST_CASE("metrics: identities on random counts") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        ConfusionCounts c{rng.below(50), rng.below(50), rng.below(50), rng.below(50)};
        if (c.total() == 0) continue;
        MetricValues m = metrics(c);
        CHECK(std::fabs(m.accuracy - static_cast<double>(c.tp + c.tn) / c.total()) <= 1e-12);
        if (!std::isnan(m.precision) && !std::isnan(m.recall) &&
            m.precision + m.recall > 0) {
            const double harmonic =
                2.0 * m.precision * m.recall / (m.precision + m.recall);
            CHECK(std::fabs(m.f1 - harmonic) <= 1e-12);
        }
    }
}

TEST_CASE("sign test p-values") {
    CHECK(sign_test_p_value(0, 0) == 1.0);
    CHECK(sign_test_p_value(0, 5) == 1.0);
    CHECK(sign_test_p_value(5, 0) == doctest::Approx(1.0 / 32.0).epsilon(1e-12));
    CHECK(sign_test_p_value(4, 1) == doctest::Approx(6.0 / 32.0).epsilon(1e-12));
    CHECK(sign_test_p_value(25, 5) < 0.001);
}

TEST_CASE("evaluate: determinism, per-group reports, report files") {
    const Fixture& f = fixture();
    EvalReport r1 = evaluate(f.ckpt, f.dataset, "test");
    EvalReport r2 = evaluate(f.ckpt, f.dataset, "test");
    CHECK(report_to_json(r1) == report_to_json(r2));
    CHECK(r1.model_id == "astgl");
    CHECK(r1.overall.counts.total() == f.dataset.test.cases());
    REQUIRE(r1.by_group.count("B") == 1);
    CHECK(r1.by_group.at("B").counts.total() == f.dataset.test.cases());

    fs::path dir = temp_dir("astgl_eval_");
    save_report(r1, dir / "report.json");
    write_report_csv(r1, dir / "report.csv");
    std::ifstream in(dir / "report.json");
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str().find("\"model_id\"") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("evaluate: degenerate all-stable split reports recall as not-a-value") {
    const Fixture& f = fixture();
    Dataset copy = f.dataset;
    for (auto& y : copy.test.labels) y = 0;
    for (auto& c : copy.manifest.cases) {
        if (c.split == "test") c.label = 0;
    }
    EvalReport r = evaluate(f.ckpt, copy, "test");
    CHECK(std::isnan(r.overall.values.recall));
    CHECK(r.overall.counts.tp + r.overall.counts.fn == 0);
}

TEST_CASE("evaluate: grid-size mismatch is rejected") {
    const Fixture& f = fixture();
    GridTopology small = build_grid(GridSpec{.n_buses = 6, .seed = 2});
    GenerationSpec spec;
    spec.group = ScenarioGroup::A;
    spec.train_per_label = 2;
    spec.test_per_label = 2;
    spec.seed = 5;
    Dataset other = generate_dataset(small, spec);
    CHECK_THROWS_AS(evaluate(f.ckpt, other, "test"), DataError);
}

TEST_CASE("baseline: fixed-adjacency harness trains and reports without AGLM/SAM") {
    const Fixture& f = fixture();
    Hyperparams h;
    h.gcn_channels = 4;
    h.tcn_channels = 4;
    h.num_blocks = 1;
    h.epochs = 1;
    h.batch_size = 8;
    h.seed = 3;
    BaselineResult base = baseline_fixed_adjacency(f.dataset, f.topo,
                                                   GraphMode::fixed_admittance, h);
    CHECK(base.report.model_id == "stgcn_fixed_admittance");
    CHECK(base.checkpoint.params.agl.weights.empty());
    CHECK(base.checkpoint.params.attention.weight.empty());
    CHECK(base.report.overall.counts.total() == f.dataset.test.cases());

    // The fixed path never touches adaptive-graph machinery.
    Tensor x({f.dataset.manifest.window_len, f.dataset.manifest.n_buses, 3});
    ForwardTrace trace = forward(x, base.checkpoint.best_params, base.checkpoint.config);
    CHECK_FALSE(trace.used_adaptive_graph);
    CHECK(trace.a_adp.empty());

    CHECK_THROWS_AS(
        baseline_fixed_adjacency(f.dataset, f.topo, GraphMode::adaptive, h),
        ConfigError);
}

TEST_CASE("inspect: uniform untrained model shows no concentration and round-trips") {
    const Fixture& f = fixture();
    // Zero weights everywhere: the adaptive graph is exactly uniform.
    Checkpoint zero = f.ckpt;
    for_each_param(zero.best_params, [&](const std::string&, Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    });

    InspectionResult res = inspect_adaptive_graph(zero, f.dataset, "test", f.topo);
    REQUIRE(res.cases.size() == f.dataset.test.cases());
    for (const CaseInspection& ci : res.cases) {
        const double share = static_cast<double>(f.topo.region_members(ci.fault_region).size()) /
                             static_cast<double>(f.topo.n_buses());
        CHECK(ci.fault_region_mass == doctest::Approx(share).epsilon(1e-9));
        CHECK(ci.in_region_norm == doctest::Approx(ci.out_region_norm).epsilon(1e-9));
    }
    CHECK(res.sign_test.p_value > 0.05);

    fs::path dir = temp_dir("astgl_inspect_");
    write_inspection_csv(res, dir);

    // The exported adjacency reloads to the same values (17 digits round-trip).
    std::ifstream csv(dir / "a_adp.csv");
    std::string header, first;
    std::getline(csv, header);
    std::getline(csv, first);
    std::vector<double> values;
    std::stringstream ss(first);
    std::string cell;
    std::getline(ss, cell, ',');  // case seed
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    REQUIRE(values.size() == res.cases[0].a_adp.numel());
    for (std::size_t i = 0; i < values.size(); ++i) {
        CHECK(values[i] == res.cases[0].a_adp[i]);
    }
    fs::remove_all(dir);
}

TEST_CASE("inspect: fixed-mode checkpoints are rejected") {
    const Fixture& f = fixture();
    Hyperparams h;
    h.gcn_channels = 4;
    h.tcn_channels = 4;
    h.num_blocks = 1;
    h.epochs = 1;
    h.batch_size = 8;
    BaselineResult base = baseline_fixed_adjacency(f.dataset, f.topo,
                                                   GraphMode::fixed_connectivity, h);
    CHECK_THROWS_AS(inspect_adaptive_graph(base.checkpoint, f.dataset, "test", f.topo),
                    ConfigError);
}

TEST_CASE("embeddings: row counts, constant width, labels match bytes") {
    const Fixture& f = fixture();
    fs::path dir = temp_dir("astgl_embed_");
    for (const std::string& layer : embedding_layers(f.ckpt.config)) {
        export_embeddings(f.ckpt, f.dataset, "test", layer, dir / (layer + ".csv"));
    }
    std::ifstream csv(dir / "L1.csv");
    std::string line;
    std::getline(csv, line);
    const std::size_t header_cols = std::count(line.begin(), line.end(), ',') + 1;
    std::size_t rows = 0;
    std::vector<int> labels;
    while (std::getline(csv, line)) {
        CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') + 1) ==
              header_cols);
        // label is the third column
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        labels.push_back(std::stoi(cell));
        ++rows;
    }
    CHECK(rows == f.dataset.test.cases());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        CHECK(labels[i] == static_cast<int>(f.dataset.test.labels[i]));
    }

    CHECK_THROWS_AS(export_embeddings(f.ckpt, f.dataset, "test", "L9", dir / "bad.csv"),
                    ConfigError);
    fs::remove_all(dir);
}
