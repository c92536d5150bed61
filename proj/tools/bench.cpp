// Compares the serial reference kernels against the OpenMP variants and times
// a parallel batch of transient simulations. Results must match bit-exactly;
// the speedup column is what varies by machine.

#include <chrono>
#include <cstdio>
#include <functional>

#include "astgl/dataset.hpp"
#include "astgl/kernels.hpp"
#include "astgl/rng.hpp"
#include "astgl/tensor.hpp"

using namespace astgl;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto stop = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(stop - start).count() / reps;
}

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

void report(const char* name, double serial, double parallel, bool identical) {
    std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   %s\n", name,
                serial * 1e3, parallel * 1e3, serial / parallel,
                identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main() {
    Rng rng(2024);
    std::printf("threads: %d\n", kernels::max_threads());

    {
        const std::size_t m = 256, k = 256, n = 256;
        Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        Tensor out_s({m, n}), out_p({m, n});
        const double ts = time_of(
            [&] { kernels::matmul_serial(a.data(), b.data(), out_s.data(), m, k, n); }, 5);
        const double tp = time_of(
            [&] { kernels::matmul_omp(a.data(), b.data(), out_p.data(), m, k, n); }, 5);
        report("matmul 256^3", ts, tp, out_s == out_p);
    }

    {
        const std::size_t len = 512, lanes = 64, ci = 8, taps = 3, co = 16;
        Tensor x = random_tensor({len, lanes, ci}, rng);
        Tensor ker = random_tensor({taps, ci, co}, rng);
        Tensor out_s({len, lanes, co}), out_p({len, lanes, co});
        const double ts = time_of(
            [&] {
                kernels::conv1d_serial(x.data(), ker.data(), out_s.data(), len, lanes, ci, taps,
                                       co, kernels::Padding::same);
            },
            10);
        const double tp = time_of(
            [&] {
                kernels::conv1d_omp(x.data(), ker.data(), out_p.data(), len, lanes, ci, taps, co,
                                    kernels::Padding::same);
            },
            10);
        report("conv1d 512x64x8->16", ts, tp, out_s == out_p);
    }

    {
        const std::size_t len = 256, n = 24, f = 8, order = 3, co = 16;
        Tensor x = random_tensor({len, n, f}, rng);
        Tensor basis = random_tensor({order, n, n}, rng);
        Tensor theta = random_tensor({order, f, co}, rng);
        Tensor out_s({len, n, co}), out_p({len, n, co});
        const double ts = time_of(
            [&] {
                kernels::graph_conv_serial(x.data(), basis.data(), theta.data(), out_s.data(),
                                           len, n, f, order, co);
            },
            10);
        const double tp = time_of(
            [&] {
                kernels::graph_conv_omp(x.data(), basis.data(), theta.data(), out_p.data(), len,
                                        n, f, order, co);
            },
            10);
        report("graph_conv 256x24x8", ts, tp, out_s == out_p);
    }

    {
        // Case simulation batch: parallelism across independent cases.
        GridTopology topo = build_grid(GridSpec{});
        GenerationSpec spec;
        spec.group = ScenarioGroup::B;
        spec.train_per_label = 24;
        spec.test_per_label = 8;
        spec.seed = 7;
        const double t = time_of([&] { generate_dataset(topo, spec); }, 1);
        std::printf("%-22s %8.3f s for %zu balanced cases (parallel across cases)\n",
                    "dataset generation", t, 2 * (spec.train_per_label + spec.test_per_label));
    }
    return 0;
}
