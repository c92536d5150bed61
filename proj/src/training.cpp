#include "astgl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "astgl/csv.hpp"
#include "astgl/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace astgl {

void Hyperparams::validate() const {
    if (t_win <= 0) throw ConfigError("hyperparams: t_win must be positive");
    if (cheb_order < 1) throw ConfigError("hyperparams: cheb_order must be >= 1");
    if (temporal_taps < 1 || gcn_channels < 1 || tcn_channels < 1 || num_blocks < 1) {
        throw ConfigError("hyperparams: sizes must be >= 1");
    }
    if (lambda_reg < 0) throw ConfigError("hyperparams: lambda must be >= 0");
    if (gamma_agl < 0) throw ConfigError("hyperparams: gamma must be >= 0");
    if (learning_rate <= 0) throw ConfigError("hyperparams: learning_rate must be positive");
    if (batch_size < 1 || epochs < 1) {
        throw ConfigError("hyperparams: batch_size and epochs must be >= 1");
    }
}

ModelConfig Hyperparams::model_config(std::size_t n_buses, std::size_t window_len,
                                      GraphMode mode) const {
    ModelConfig cfg;
    cfg.n_buses = n_buses;
    cfg.window_len = window_len;
    cfg.cheb_order = cheb_order;
    cfg.temporal_taps = temporal_taps;
    cfg.gcn_channels = gcn_channels;
    cfg.tcn_channels = tcn_channels;
    cfg.num_blocks = num_blocks;
    cfg.lambda_reg = lambda_reg;
    cfg.gamma_agl = gamma_agl;
    cfg.shared_pair_weights = shared_pair_weights;
    cfg.literal_row_norm = literal_row_norm;
    cfg.graph_mode = mode;
    return cfg;
}

namespace {

Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = substream(seed, "init");
    ModelParams p;
    if (config.adaptive()) {
        // Small uniform pair weights: the first adaptive graph is uniform to
        // within a few percent. Exactly-zero weights would park every pair
        // score on the flat side of the relu (relu'(0) = 0), freezing the
        // graph learner for the whole run.
        const Shape w_shape = config.shared_pair_weights
                                  ? Shape{config.in_channels, config.window_len}
                                  : Shape{config.n_buses, config.n_buses, config.in_channels,
                                          config.window_len};
        Tensor w(w_shape);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-0.1, 0.1);
        p.agl.weights = std::move(w);
        p.agl.lambda = config.lambda_reg;
        p.attention.weight =
            xavier({config.n_buses, config.n_buses}, config.n_buses, config.n_buses, rng);
        p.attention.bias = Tensor::zeros({config.n_buses});
    }
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
        const std::size_t f_in = config.block_in_channels(b);
        p.stgcn.cheb_filters.push_back(
            xavier({config.cheb_order, f_in, config.gcn_channels},
                   config.cheb_order * f_in, config.gcn_channels, rng));
        p.stgcn.temporal_filters.push_back(
            xavier({config.temporal_taps, config.gcn_channels, config.tcn_channels},
                   config.temporal_taps * config.gcn_channels, config.tcn_channels, rng));
        p.stgcn.residual_filters.push_back(
            xavier({config.temporal_taps, f_in, config.tcn_channels},
                   config.temporal_taps * f_in, config.tcn_channels, rng));
    }
    p.stgcn.classifier_weight =
        xavier({config.flat_features(), 2}, config.flat_features(), 2, rng);
    p.stgcn.classifier_bias = Tensor::zeros({2});
    return p;
}

Tensor fixed_adjacency_matrix(const GridTopology& topology, GraphMode mode) {
    if (mode == GraphMode::adaptive) {
        throw ConfigError("fixed_adjacency_matrix: adaptive mode has no fixed matrix");
    }
    const std::size_t n = topology.n_buses();
    Tensor a({n, n});
    for (const Line& l : topology.lines) {
        if (!l.in_service) continue;
        const double w = mode == GraphMode::fixed_connectivity ? 1.0 : 1.0 / l.reactance;
        a.at(l.from, l.to) += w;
        a.at(l.to, l.from) += w;
    }
    return a;
}

std::size_t parameter_count(const ModelParams& params) {
    std::size_t count = 0;
    for_each_param(const_cast<ModelParams&>(params),
                   [&](const std::string&, Tensor& t) { count += t.numel(); });
    return count;
}

void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    std::vector<Tensor*> groups;
    std::vector<std::string> names;
    for_each_param(params, [&](const std::string& name, Tensor& t) {
        groups.push_back(&t);
        names.push_back(name);
    });
    if (grads.size() != groups.size()) {
        throw DimensionError(concat("adam_step: ", grads.size(), " gradient groups for ",
                                    groups.size(), " parameter groups"));
    }
    if (state.first.empty()) {
        for (Tensor* g : groups) {
            state.first.push_back(Tensor::zeros(g->shape()));
            state.second.push_back(Tensor::zeros(g->shape()));
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const Tensor& grad = grads[g];
        if (!grad.all_finite()) {
            throw NumericalError(concat("adam_step: non-finite gradient in group ", names[g]));
        }
        if (!grad.same_shape(*groups[g])) {
            throw DimensionError(concat("adam_step: gradient shape ", grad.shape_string(),
                                        " does not match ", names[g]));
        }
        Tensor& m = state.first[g];
        Tensor& v = state.second[g];
        Tensor& p = *groups[g];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

int predict_label(const Tensor& y_hat) { return y_hat[1] >= y_hat[0] ? 1 : 0; }

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

constexpr char kMagic[8] = {'A', 'S', 'T', 'G', 'L', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

struct ByteWriter {
    std::string buf;
    void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
    void u64(std::uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
    void f64(double v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf.append(s);
    }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) u64(e);
        buf.append(reinterpret_cast<const char*>(t.data()),
                   t.numel() * sizeof(double));
    }
};

struct ByteReader {
    const char* p;
    const char* end;
    explicit ByteReader(const std::string& s) : p(s.data()), end(s.data() + s.size()) {}
    void need(std::size_t n) const {
        if (p + n > end) throw DataError("checkpoint file truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(*p++);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, p, 4);
        p += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, p, 8);
        p += 8;
        return v;
    }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, p, 8);
        p += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(p, n);
        p += n;
        return s;
    }
    Tensor tensor() {
        const std::uint32_t rank = u32();
        if (rank == 0) return Tensor();
        Shape shape(rank);
        for (std::uint32_t i = 0; i < rank; ++i) shape[i] = u64();
        Tensor t(shape);
        need(t.numel() * sizeof(double));
        std::memcpy(t.data(), p, t.numel() * sizeof(double));
        p += t.numel() * sizeof(double);
        return t;
    }
};

void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u64(c.n_buses);
    w.u64(c.window_len);
    w.u64(c.in_channels);
    w.u64(c.cheb_order);
    w.u64(c.temporal_taps);
    w.u64(c.gcn_channels);
    w.u64(c.tcn_channels);
    w.u64(c.num_blocks);
    w.f64(c.lambda_reg);
    w.f64(c.gamma_agl);
    w.u8(c.shared_pair_weights);
    w.u8(c.literal_row_norm);
    w.u8(static_cast<std::uint8_t>(c.graph_mode));
}

ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.n_buses = r.u64();
    c.window_len = r.u64();
    c.in_channels = r.u64();
    c.cheb_order = r.u64();
    c.temporal_taps = r.u64();
    c.gcn_channels = r.u64();
    c.tcn_channels = r.u64();
    c.num_blocks = r.u64();
    c.lambda_reg = r.f64();
    c.gamma_agl = r.f64();
    c.shared_pair_weights = r.u8() != 0;
    c.literal_row_norm = r.u8() != 0;
    c.graph_mode = static_cast<GraphMode>(r.u8());
    return c;
}

void write_hyper(ByteWriter& w, const Hyperparams& h) {
    w.f64(h.t_win);
    w.u64(h.cheb_order);
    w.u64(h.temporal_taps);
    w.u64(h.gcn_channels);
    w.u64(h.tcn_channels);
    w.u64(h.num_blocks);
    w.f64(h.lambda_reg);
    w.f64(h.gamma_agl);
    w.f64(h.learning_rate);
    w.u64(h.batch_size);
    w.u64(h.epochs);
    w.u8(h.shared_pair_weights);
    w.u8(h.literal_row_norm);
    w.u64(h.seed);
}

Hyperparams read_hyper(ByteReader& r) {
    Hyperparams h;
    h.t_win = r.f64();
    h.cheb_order = r.u64();
    h.temporal_taps = r.u64();
    h.gcn_channels = r.u64();
    h.tcn_channels = r.u64();
    h.num_blocks = r.u64();
    h.lambda_reg = r.f64();
    h.gamma_agl = r.f64();
    h.learning_rate = r.f64();
    h.batch_size = r.u64();
    h.epochs = r.u64();
    h.shared_pair_weights = r.u8() != 0;
    h.literal_row_norm = r.u8() != 0;
    h.seed = r.u64();
    return h;
}

void write_params(ByteWriter& w, const ModelParams& p) {
    std::uint32_t count = 0;
    for_each_param(const_cast<ModelParams&>(p),
                   [&](const std::string&, Tensor&) { ++count; });
    w.u32(count);
    for_each_param(const_cast<ModelParams&>(p), [&](const std::string& name, Tensor& t) {
        w.str(name);
        w.tensor(t);
    });
    w.tensor(p.fixed_adjacency);
    w.f64(p.agl.lambda);
}

ModelParams read_params(ByteReader& r, const ModelConfig& config) {
    // Reconstruct the shape skeleton, then fill by name.
    ModelParams p;
    if (config.adaptive()) {
        p.agl.weights = Tensor({1});
        p.attention.weight = Tensor({1});
        p.attention.bias = Tensor({1});
    }
    p.stgcn.cheb_filters.resize(config.num_blocks, Tensor({1}));
    p.stgcn.temporal_filters.resize(config.num_blocks, Tensor({1}));
    p.stgcn.residual_filters.resize(config.num_blocks, Tensor({1}));
    p.stgcn.classifier_weight = Tensor({1});
    p.stgcn.classifier_bias = Tensor({1});

    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        Tensor value = r.tensor();
        bool placed = false;
        for_each_param(p, [&](const std::string& slot, Tensor& t) {
            if (slot == name) {
                t = std::move(value);
                placed = true;
            }
        });
        if (!placed) throw DataError(concat("checkpoint names unknown parameter '", name, "'"));
    }
    p.fixed_adjacency = r.tensor();
    p.agl.lambda = r.f64();
    return p;
}

void write_adam(ByteWriter& w, const AdamState& a) {
    w.u64(a.step);
    w.u32(static_cast<std::uint32_t>(a.first.size()));
    for (const Tensor& t : a.first) w.tensor(t);
    for (const Tensor& t : a.second) w.tensor(t);
}

AdamState read_adam(ByteReader& r) {
    AdamState a;
    a.step = r.u64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) a.first.push_back(r.tensor());
    for (std::uint32_t i = 0; i < n; ++i) a.second.push_back(r.tensor());
    return a;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    ByteWriter w;
    w.buf.append(kMagic, sizeof(kMagic));
    w.u32(kVersion);
    write_config(w, ckpt.config);
    write_hyper(w, ckpt.hyper);
    w.str(ckpt.model_id);
    w.u64(ckpt.dataset_digest);
    write_params(w, ckpt.params);
    write_params(w, ckpt.best_params);
    w.f64(ckpt.best_val_acc);
    write_adam(w, ckpt.adam);
    w.u64(ckpt.epochs_done);
    w.u64(ckpt.shuffle_state);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(concat("cannot write checkpoint ", path.string()));
    out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(concat("cannot read checkpoint ", path.string()));
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader r(bytes);
    r.need(sizeof(kMagic));
    if (std::memcmp(r.p, kMagic, sizeof(kMagic)) != 0) {
        throw DataError(concat(path.string(), " is not a checkpoint file"));
    }
    r.p += sizeof(kMagic);
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw DataError(concat("unsupported checkpoint version ", version));
    }
    Checkpoint ckpt;
    ckpt.config = read_config(r);
    ckpt.hyper = read_hyper(r);
    ckpt.model_id = r.str();
    ckpt.dataset_digest = r.u64();
    ckpt.params = read_params(r, ckpt.config);
    ckpt.best_params = read_params(r, ckpt.config);
    ckpt.best_val_acc = r.f64();
    ckpt.adam = read_adam(r);
    ckpt.epochs_done = r.u64();
    ckpt.shuffle_state = r.u64();
    return ckpt;
}

// ---------------------------------------------------------------------------
// training

namespace {

std::vector<Var> flat_param_vars(const stgcn::ParamVars& vars, const ModelConfig& config) {
    std::vector<Var> flat;
    if (config.adaptive()) {
        flat.push_back(vars.pair_weights);
        flat.push_back(vars.attn_weight);
        flat.push_back(vars.attn_bias);
    }
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
        flat.push_back(vars.cheb[b]);
        flat.push_back(vars.temporal[b]);
        flat.push_back(vars.residual[b]);
    }
    flat.push_back(vars.cls_weight);
    flat.push_back(vars.cls_bias);
    return flat;
}

Tensor sample_window(const SplitTensors& split, std::size_t row) {
    const std::size_t len = split.x.extent(1), n = split.x.extent(2);
    Tensor x({len, n, 3});
    std::memcpy(x.data(), split.x.data() + row * x.numel(), x.numel() * sizeof(double));
    return x;
}

struct SampleOutcome {
    double l_agl = 0, l_cm = 0, total = 0;
    int predicted = 0;
    bool finite = true;
    std::string failure;
    std::vector<Tensor> grads;
};

SampleOutcome run_sample(const Tensor& x, int label, const ModelParams& params,
                         const ModelConfig& config, const Tensor* fixed_adj, bool with_grads) {
    SampleOutcome out;
    try {
        Tape tape;
        stgcn::ParamVars vars = stgcn::track_params(tape, params, config, with_grads);
        Var xv = tape.constant(x);
        stgcn::ForwardVars fwd = stgcn::forward_pass(tape, xv, vars, config, fixed_adj);
        Var l_cm = stgcn::classification_loss(tape, fwd.y_hat, label);
        Var total = stgcn::total_loss(tape, fwd.l_agl, l_cm, config.gamma_agl);
        out.l_agl = fwd.l_agl.value()[0];
        out.l_cm = l_cm.value()[0];
        out.total = total.value()[0];
        out.predicted = predict_label(fwd.y_hat.value());
        if (with_grads) {
            Gradients grads = tape.backward(total);
            for (Var v : flat_param_vars(vars, config)) out.grads.push_back(grads.grad(v));
        }
    } catch (const std::exception& e) {
        out.finite = false;
        out.failure = e.what();
    }
    return out;
}

double accuracy_over(const SplitTensors& split, const std::vector<std::size_t>& rows,
                     const ModelParams& params, const ModelConfig& config,
                     const Tensor* fixed_adj) {
    if (rows.empty()) return std::nan("");
    std::vector<int> hits(rows.size(), 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows.size()); ++i) {
        const std::size_t row = rows[static_cast<std::size_t>(i)];
        SampleOutcome out = run_sample(sample_window(split, row), split.labels[row], params,
                                       config, fixed_adj, /*with_grads=*/false);
        hits[static_cast<std::size_t>(i)] =
            out.finite && out.predicted == static_cast<int>(split.labels[row]);
    }
    std::size_t correct = 0;
    for (int h : hits) correct += static_cast<std::size_t>(h);
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

}  // namespace

TrainResult train(const Dataset& dataset, const GridTopology& topology,
                  const Hyperparams& hyper, GraphMode mode, std::size_t epoch_cap,
                  const Checkpoint* resume) {
    hyper.validate();
    const DatasetManifest& mf = dataset.manifest;
    if (dataset.train.cases() == 0) throw DataError("train: dataset has no training split");
    if (std::fabs(hyper.t_win - mf.t_win) > 1e-12) {
        throw DataError(concat("train: hyperparameter t_win ", hyper.t_win,
                               " does not match dataset window ", mf.t_win));
    }
    if (grid_digest(topology) != mf.grid_digest) {
        throw DataError("train: topology does not match the dataset's grid digest");
    }
    bool has_stable = false, has_unstable = false;
    for (std::uint8_t y : dataset.train.labels) (y ? has_unstable : has_stable) = true;
    if (!has_stable || !has_unstable) {
        throw DataError("train: training split must contain both labels");
    }

    ModelConfig config = hyper.model_config(mf.n_buses, mf.window_len, mode);
    config.validate();
    Tensor fixed_adj;
    const Tensor* fixed_ptr = nullptr;
    if (!config.adaptive()) {
        fixed_adj = fixed_adjacency_matrix(topology, mode);
        fixed_ptr = &fixed_adj;
    }

    // Stratified 10% validation carve-out from the training split.
    std::vector<std::size_t> train_rows, val_rows;
    {
        std::vector<std::size_t> by_label[2];
        for (std::size_t i = 0; i < dataset.train.cases(); ++i) {
            by_label[dataset.train.labels[i]].push_back(i);
        }
        Rng carve = substream(hyper.seed, "valsplit");
        for (auto& rows : by_label) {
            carve.shuffle(rows);
            const std::size_t val_n = std::max<std::size_t>(1, rows.size() / 10);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                (i < val_n ? val_rows : train_rows).push_back(rows[i]);
            }
        }
        std::sort(train_rows.begin(), train_rows.end());
        std::sort(val_rows.begin(), val_rows.end());
    }

    TrainResult result;
    Checkpoint& ckpt = result.checkpoint;
    if (resume != nullptr) {
        ckpt = *resume;
        if (ckpt.dataset_digest != mf.payload_digest) {
            throw DataError("train: checkpoint was produced on a different dataset");
        }
    } else {
        ckpt.config = config;
        ckpt.hyper = hyper;
        ckpt.model_id = mode == GraphMode::adaptive ? "astgl"
                        : mode == GraphMode::fixed_connectivity ? "stgcn_fixed_connectivity"
                                                                : "stgcn_fixed_admittance";
        ckpt.dataset_digest = mf.payload_digest;
        ckpt.params = init_params(config, hyper.seed);
        if (!config.adaptive()) ckpt.params.fixed_adjacency = fixed_adj;
        ckpt.best_params = ckpt.params;
        ckpt.shuffle_state = substream_seed(hyper.seed, "shuffle");
    }

    const std::size_t total_epochs = epoch_cap > 0 ? epoch_cap : hyper.epochs;
    double train_acc = std::nan(""), val_acc = std::nan("");

    for (std::size_t epoch = ckpt.epochs_done + 1; epoch <= total_epochs; ++epoch) {
        Rng shuffle_rng(0);
        shuffle_rng.set_state(ckpt.shuffle_state);
        std::vector<std::size_t> order = train_rows;
        shuffle_rng.shuffle(order);

        const std::size_t first_log_row = result.log.size();
        std::size_t epoch_hits = 0;
        for (std::size_t start = 0, batch_no = 0; start < order.size();
             start += hyper.batch_size, ++batch_no) {
            const std::size_t count = std::min(hyper.batch_size, order.size() - start);
            std::vector<SampleOutcome> outcomes(count);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
            for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
                const std::size_t row = order[start + static_cast<std::size_t>(i)];
                outcomes[static_cast<std::size_t>(i)] =
                    run_sample(sample_window(dataset.train, row), dataset.train.labels[row],
                               ckpt.params, config, fixed_ptr, /*with_grads=*/true);
            }

            double l_agl = 0, l_cm = 0, total = 0;
            std::vector<Tensor> grads;
            bool finite = true;
            std::string failure;
            for (std::size_t i = 0; i < count; ++i) {
                const SampleOutcome& out = outcomes[i];
                if (!out.finite || !std::isfinite(out.total)) {
                    finite = false;
                    failure = out.failure;
                    break;
                }
                l_agl += out.l_agl;
                l_cm += out.l_cm;
                total += out.total;
                epoch_hits += out.predicted ==
                              static_cast<int>(dataset.train.labels[order[start + i]]);
                if (grads.empty()) {
                    grads = out.grads;
                } else {
                    for (std::size_t g = 0; g < grads.size(); ++g) {
                        for (std::size_t k = 0; k < grads[g].numel(); ++k) {
                            grads[g][k] += out.grads[g][k];
                        }
                    }
                }
            }
            if (!finite) {
                result.aborted = true;
                result.abort_reason = concat("non-finite loss at epoch ", epoch, " batch ",
                                             batch_no, (failure.empty() ? "" : ": "), failure,
                                             "; checkpoint holds the preceding step");
                result.final_train_acc = train_acc;
                result.final_val_acc = val_acc;
                return result;
            }
            const double inv = 1.0 / static_cast<double>(count);
            for (Tensor& g : grads) {
                for (std::size_t k = 0; k < g.numel(); ++k) g[k] *= inv;
            }
            try {
                adam_step(ckpt.params, grads, ckpt.adam, hyper.learning_rate);
            } catch (const NumericalError& e) {
                result.aborted = true;
                result.abort_reason = concat("epoch ", epoch, " batch ", batch_no, ": ", e.what());
                result.final_train_acc = train_acc;
                result.final_val_acc = val_acc;
                return result;
            }

            TrainLogRow row;
            row.epoch = epoch;
            row.batch = batch_no;
            row.l_agl = l_agl * inv;
            row.l_cm = l_cm * inv;
            row.total = total * inv;
            result.log.push_back(row);
        }

        // Running train accuracy over this epoch's predictions plus a fresh
        // validation pass with the updated parameters.
        train_acc = static_cast<double>(epoch_hits) / static_cast<double>(order.size());
        val_acc = accuracy_over(dataset.train, val_rows, ckpt.params, config, fixed_ptr);
        for (std::size_t i = first_log_row; i < result.log.size(); ++i) {
            result.log[i].train_acc = train_acc;
            result.log[i].val_acc = val_acc;
        }
        // Ties go to the later epoch: equally-scoring later parameters have
        // seen more updates.
        if (val_acc >= ckpt.best_val_acc) {
            ckpt.best_val_acc = val_acc;
            ckpt.best_params = ckpt.params;
        }
        ckpt.epochs_done = epoch;
        ckpt.shuffle_state = shuffle_rng.state();
    }
    result.final_train_acc = train_acc;
    result.final_val_acc = val_acc;
    return result;
}

void write_train_log_csv(const std::vector<TrainLogRow>& log,
                         const std::filesystem::path& file) {
    CsvWriter csv(file);
    csv.cell(std::string("epoch"))
        .cell(std::string("batch"))
        .cell(std::string("l_agl"))
        .cell(std::string("l_cm"))
        .cell(std::string("total"))
        .cell(std::string("train_acc"))
        .cell(std::string("val_acc"));
    csv.end_row();
    for (const TrainLogRow& row : log) {
        csv.cell(row.epoch)
            .cell(row.batch)
            .cell(row.l_agl)
            .cell(row.l_cm)
            .cell(row.total)
            .cell(row.train_acc)
            .cell(row.val_acc);
        csv.end_row();
    }
}

// ---------------------------------------------------------------------------
// hyperparameter search

void SearchSpace::validate() const {
    if (t_win.empty() || lambda_reg.empty() || cheb_order.empty() || temporal_taps.empty() ||
        gcn_channels.empty() || tcn_channels.empty() || num_blocks.empty() ||
        learning_rate.empty()) {
        throw ConfigError("search space: every dimension needs at least one value");
    }
}

HpoResult random_search_hpo(const SearchSpace& space, std::size_t budget,
                            const DatasetProvider& datasets, const GridTopology& topology,
                            const Hyperparams& base, std::uint64_t seed,
                            std::size_t epoch_cap) {
    space.validate();
    if (budget < 1) throw ConfigError("random_search_hpo: budget must be >= 1");

    HpoResult result;
    for (std::size_t t = 0; t < budget; ++t) {
        Rng rng = substream(seed, "hpo.trial", t);
        TrialResult trial;
        trial.index = t;
        Hyperparams h = base;
        h.t_win = rng.pick(space.t_win);
        h.lambda_reg = rng.pick(space.lambda_reg);
        h.cheb_order = rng.pick(space.cheb_order);
        h.temporal_taps = rng.pick(space.temporal_taps);
        h.gcn_channels = rng.pick(space.gcn_channels);
        h.tcn_channels = rng.pick(space.tcn_channels);
        h.num_blocks = rng.pick(space.num_blocks);
        h.learning_rate = rng.pick(space.learning_rate);
        h.seed = substream_seed(seed, "hpo.trialseed", t);
        trial.hyper = h;
        try {
            std::shared_ptr<const Dataset> ds = datasets(h.t_win);
            TrainResult run = train(*ds, topology, h, GraphMode::adaptive, epoch_cap);
            if (run.aborted) throw NumericalError(run.abort_reason);
            trial.val_acc = run.checkpoint.best_val_acc;
            trial.param_count = parameter_count(run.checkpoint.params);
        } catch (const std::exception& e) {
            trial.failed = true;
            trial.error = e.what();
        }
        result.trials.push_back(std::move(trial));
    }

    const TrialResult* best = nullptr;
    for (const TrialResult& t : result.trials) {
        if (t.failed) continue;
        if (best == nullptr || t.val_acc > best->val_acc ||
            (t.val_acc == best->val_acc && t.param_count < best->param_count)) {
            best = &t;
        }
    }
    if (best == nullptr) {
        std::string diag = "random_search_hpo: every trial failed:";
        for (const TrialResult& t : result.trials) {
            diag += concat("\n  trial ", t.index, ": ", t.error);
        }
        throw NumericalError(diag);
    }
    result.best_index = best->index;
    result.best = best->hyper;
    return result;
}

std::vector<TrialResult> sweep_t_win(const std::vector<double>& values,
                                     const DatasetProvider& datasets,
                                     const GridTopology& topology, const Hyperparams& base,
                                     std::size_t epoch_cap) {
    if (values.empty()) throw ConfigError("sweep_t_win: no window lengths given");
    std::vector<TrialResult> out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        TrialResult trial;
        trial.index = i;
        Hyperparams h = base;
        h.t_win = values[i];
        trial.hyper = h;
        try {
            std::shared_ptr<const Dataset> ds = datasets(h.t_win);
            TrainResult run = train(*ds, topology, h, GraphMode::adaptive, epoch_cap);
            if (run.aborted) throw NumericalError(run.abort_reason);
            trial.val_acc = run.checkpoint.best_val_acc;
            trial.param_count = parameter_count(run.checkpoint.params);
        } catch (const std::exception& e) {
            trial.failed = true;
            trial.error = e.what();
        }
        out.push_back(std::move(trial));
    }
    return out;
}

void write_trial_table_csv(const std::vector<TrialResult>& trials,
                           const std::filesystem::path& file) {
    CsvWriter csv(file);
    csv.cell(std::string("trial"))
        .cell(std::string("t_win"))
        .cell(std::string("lambda"))
        .cell(std::string("cheb_order"))
        .cell(std::string("temporal_taps"))
        .cell(std::string("gcn_channels"))
        .cell(std::string("tcn_channels"))
        .cell(std::string("num_blocks"))
        .cell(std::string("learning_rate"))
        .cell(std::string("param_count"))
        .cell(std::string("val_acc"))
        .cell(std::string("status"));
    csv.end_row();
    for (const TrialResult& t : trials) {
        csv.cell(t.index)
            .cell(t.hyper.t_win)
            .cell(t.hyper.lambda_reg)
            .cell(t.hyper.cheb_order)
            .cell(t.hyper.temporal_taps)
            .cell(t.hyper.gcn_channels)
            .cell(t.hyper.tcn_channels)
            .cell(t.hyper.num_blocks)
            .cell(t.hyper.learning_rate)
            .cell(t.param_count)
            .cell(t.val_acc)
            .cell(t.failed ? concat("failed: ", t.error) : std::string("ok"));
        csv.end_row();
    }
}

}  // namespace astgl
