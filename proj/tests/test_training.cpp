#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "astgl/training.hpp"
#include "support/model_builders.hpp"

using namespace astgl;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    GridTopology topo;
    Dataset dataset;
    Fixture() : topo(build_grid(GridSpec{})) {
        GenerationSpec spec;
        spec.group = ScenarioGroup::B;
        spec.train_per_label = 20;
        spec.test_per_label = 5;
        spec.seed = 404;
        dataset = generate_dataset(topo, spec);
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

Hyperparams tiny_hyper() {
    Hyperparams h;
    h.gcn_channels = 4;
    h.tcn_channels = 4;
    h.num_blocks = 1;
    h.epochs = 3;
    h.batch_size = 8;
    h.seed = 11;
    return h;
}

fs::path temp_file(const char* stem) {
    const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
    return fs::temp_directory_path() / (std::string(stem) + std::to_string(now));
}

}  // namespace

TEST_CASE("init_params: zero pair weights, seeded determinism, fan bounds") {
    ModelConfig cfg;
    cfg.n_buses = 4;
    cfg.window_len = 5;
    cfg.gcn_channels = 3;
    cfg.tcn_channels = 3;

    ModelParams a = init_params(cfg, 42);
    ModelParams b = init_params(cfg, 42);
    ModelParams c = init_params(cfg, 43);

    // Pair weights start small but nonzero (an exact zero would sit on the
    // relu kink where the chosen subgradient is 0 and never train).
    bool any_nonzero = false;
    for (std::size_t i = 0; i < a.agl.weights.numel(); ++i) {
        CHECK(std::fabs(a.agl.weights[i]) <= 0.1);
        if (a.agl.weights[i] != 0.0) any_nonzero = true;
    }
    CHECK(any_nonzero);
    for (std::size_t i = 0; i < 2; ++i) CHECK(a.stgcn.classifier_bias[i] == 0.0);

    bool same = true;
    bool diff = false;
    for_each_param(a, [&](const std::string& name, Tensor& t) {
        for_each_param(b, [&](const std::string& name_b, Tensor& tb) {
            if (name == name_b && !(t == tb)) same = false;
        });
    });
    CHECK(same);

    const double cls_bound = std::sqrt(6.0 / (cfg.flat_features() + 2.0));
    for (std::size_t i = 0; i < a.stgcn.classifier_weight.numel(); ++i) {
        CHECK(std::fabs(a.stgcn.classifier_weight[i]) <= cls_bound);
        if (a.stgcn.classifier_weight[i] != c.stgcn.classifier_weight[i]) diff = true;
    }
    CHECK(diff);

    // The first forward graph is close to uniform (exactly uniform only at
    // zero weights, see the zero-network test in the model suite).
    Rng rng(1);
    Tensor x = testsupport::random_tensor({5, 4, 3}, rng, 0.0, 1.0);
    ForwardTrace trace = forward(x, a, cfg);
    for (std::size_t i = 0; i < trace.a_adp.numel(); ++i) {
        CHECK(trace.a_adp[i] == doctest::Approx(1.0 / 20.0).epsilon(0.25));
    }
}

TEST_CASE("adam_step: zero gradient, first-step magnitude, diagnostics") {
    ModelConfig cfg;
    cfg.n_buses = 4;
    cfg.window_len = 5;
    ModelParams params = init_params(cfg, 7);
    ModelParams before = params;
    AdamState state;

    std::vector<Tensor> zeros;
    for_each_param(params, [&](const std::string&, Tensor& t) {
        zeros.push_back(Tensor::zeros(t.shape()));
    });
    adam_step(params, zeros, state, 1e-3);
    bool unchanged = true;
    for_each_param(params, [&](const std::string& name, Tensor& t) {
        for_each_param(before, [&](const std::string& nb, Tensor& tb) {
            if (name == nb && !(t == tb)) unchanged = false;
        });
    });
    CHECK(unchanged);
    CHECK(state.step == 1);

    // First step with unit gradient moves by ~lr (bias-corrected moments are 1).
    std::vector<Tensor> ones = zeros;
    for (Tensor& t : ones) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0;
    }
    AdamState fresh;
    ModelParams p2 = before;
    adam_step(p2, ones, fresh, 1e-3);
    double delta = 0.0;
    for_each_param(p2, [&](const std::string& name, Tensor& t) {
        for_each_param(before, [&](const std::string& nb, Tensor& tb) {
            if (name == nb) delta = t[0] - tb[0];
        });
    });
    CHECK(std::fabs(delta + 1e-3) <= 1e-10);

    std::vector<Tensor> bad = zeros;
    bad[0][0] = std::numeric_limits<double>::quiet_NaN();
    AdamState s3;
    CHECK_THROWS_WITH_AS(adam_step(p2, bad, s3, 1e-3), doctest::Contains("agl.weights"),
                         NumericalError);
}

TEST_CASE("fixed adjacency matrices ignore trips and encode line weights") {
    const GridTopology& topo = fixture().topo;
    Tensor conn = fixed_adjacency_matrix(topo, GraphMode::fixed_connectivity);
    Tensor admit = fixed_adjacency_matrix(topo, GraphMode::fixed_admittance);
    for (const Line& l : topo.lines) {
        CHECK(conn.at(l.from, l.to) == 1.0);
        CHECK(admit.at(l.from, l.to) == doctest::Approx(1.0 / l.reactance).epsilon(1e-15));
    }
    for (std::size_t i = 0; i < topo.n_buses(); ++i) CHECK(conn.at(i, i) == 0.0);
    CHECK_THROWS_AS(fixed_adjacency_matrix(topo, GraphMode::adaptive), ConfigError);
}

TEST_CASE("train: loss decreases, objective decomposes, determinism holds") {
    const Fixture& f = fixture();
    Hyperparams h = tiny_hyper();
    TrainResult run = train(f.dataset, f.topo, h, GraphMode::adaptive);
    CHECK_FALSE(run.aborted);
    REQUIRE(!run.log.empty());

    double first_epoch = 0, last_epoch = 0;
    std::size_t first_n = 0, last_n = 0;
    for (const TrainLogRow& row : run.log) {
        CHECK(std::fabs(row.total - (h.gamma_agl * row.l_agl + row.l_cm)) <= 1e-12);
        if (row.epoch == 1) {
            first_epoch += row.total;
            ++first_n;
        }
        if (row.epoch == h.epochs) {
            last_epoch += row.total;
            ++last_n;
        }
    }
    CHECK(last_epoch / last_n < first_epoch / first_n);

    TrainResult again = train(f.dataset, f.topo, h, GraphMode::adaptive);
    const fs::path p1 = temp_file("ckpt_a_");
    const fs::path p2 = temp_file("ckpt_b_");
    save_checkpoint(run.checkpoint, p1);
    save_checkpoint(again.checkpoint, p2);
    CHECK(file_digest(p1) == file_digest(p2));
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("train: gamma=0 ablation and baseline mode run") {
    const Fixture& f = fixture();
    Hyperparams h = tiny_hyper();
    h.gamma_agl = 0.0;
    h.epochs = 1;
    TrainResult run = train(f.dataset, f.topo, h, GraphMode::adaptive);
    CHECK_FALSE(run.aborted);
    for (const TrainLogRow& row : run.log) CHECK(row.total == row.l_cm);

    Hyperparams hb = tiny_hyper();
    hb.epochs = 1;
    TrainResult base = train(f.dataset, f.topo, hb, GraphMode::fixed_admittance);
    CHECK_FALSE(base.aborted);
    CHECK(base.checkpoint.model_id == "stgcn_fixed_admittance");
    CHECK(base.checkpoint.params.agl.weights.empty());
    for (const TrainLogRow& row : base.log) CHECK(row.l_agl == 0.0);
}

TEST_CASE("train: input validation") {
    const Fixture& f = fixture();
    Hyperparams h = tiny_hyper();
    h.t_win = 0.4;
    CHECK_THROWS_AS(train(f.dataset, f.topo, h, GraphMode::adaptive), DataError);

    GridTopology other = build_grid(GridSpec{.n_buses = 12, .seed = 999});
    CHECK_THROWS_AS(train(f.dataset, other, tiny_hyper(), GraphMode::adaptive), DataError);
}

TEST_CASE("checkpoint: save/load round trip and bit-exact resume") {
    const Fixture& f = fixture();
    Hyperparams h = tiny_hyper();

    TrainResult full = train(f.dataset, f.topo, h, GraphMode::adaptive);

    TrainResult part = train(f.dataset, f.topo, h, GraphMode::adaptive, /*epoch_cap=*/2);
    const fs::path mid = temp_file("ckpt_mid_");
    save_checkpoint(part.checkpoint, mid);
    Checkpoint reloaded = load_checkpoint(mid);
    CHECK(reloaded.epochs_done == 2);
    CHECK(reloaded.model_id == part.checkpoint.model_id);

    TrainResult resumed = train(f.dataset, f.topo, h, GraphMode::adaptive, 0, &reloaded);
    CHECK(resumed.checkpoint.epochs_done == h.epochs);

    const fs::path pa = temp_file("ckpt_full_");
    const fs::path pb = temp_file("ckpt_resumed_");
    save_checkpoint(full.checkpoint, pa);
    save_checkpoint(resumed.checkpoint, pb);
    CHECK(file_digest(pa) == file_digest(pb));
    fs::remove(pa);
    fs::remove(pb);
    fs::remove(mid);

    CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "missing.ckpt"), DataError);
}

TEST_CASE("random search: budget one, reproducibility, failure diagnostics") {
    const Fixture& f = fixture();
    auto provider = [&](double t_win) -> std::shared_ptr<const Dataset> {
        if (std::fabs(t_win - 0.5) > 1e-12) throw DataError("only the 0.5 s window is cached");
        return std::shared_ptr<const Dataset>(&f.dataset, [](const Dataset*) {});
    };

    SearchSpace space;
    space.t_win = {0.5};
    space.cheb_order = {2, 3};
    space.gcn_channels = {4};
    space.tcn_channels = {4};
    space.num_blocks = {1};

    Hyperparams base = tiny_hyper();
    HpoResult one = random_search_hpo(space, 1, provider, f.topo, base, 5, 1);
    CHECK(one.trials.size() == 1);
    CHECK(one.best_index == 0);
    CHECK_FALSE(one.trials[0].failed);
    CHECK(one.trials[0].param_count > 0);

    HpoResult again = random_search_hpo(space, 1, provider, f.topo, base, 5, 1);
    CHECK(again.trials[0].val_acc == one.trials[0].val_acc);
    CHECK(again.trials[0].hyper.cheb_order == one.trials[0].hyper.cheb_order);

    SearchSpace broken = space;
    broken.t_win = {0.25};
    CHECK_THROWS_AS(random_search_hpo(broken, 2, provider, f.topo, base, 5, 1),
                    NumericalError);
    CHECK_THROWS_AS(random_search_hpo(space, 0, provider, f.topo, base, 5, 1), ConfigError);

    SearchSpace empty;
    empty.lambda_reg = {};
    CHECK_THROWS_AS(random_search_hpo(empty, 1, provider, f.topo, base, 5, 1), ConfigError);
}
