#include "astgl/kernels.hpp"

#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace astgl::kernels {

namespace {
int g_max_threads = 0;

inline int worker_count() {
#ifdef _OPENMP
    int hw = omp_get_max_threads();
    return (g_max_threads > 0 && g_max_threads < hw) ? g_max_threads : hw;
#else
    return 1;
#endif
}
}  // namespace

void set_max_threads(int n) { g_max_threads = n; }
int max_threads() { return worker_count(); }

std::size_t conv_out_len(std::size_t len, std::size_t taps, Padding pad) {
    return pad == Padding::valid ? len - taps + 1 : len;
}

std::size_t conv_pad_left(std::size_t taps, Padding pad) {
    return pad == Padding::valid ? 0 : (taps - 1) / 2;
}

// ---------------------------------------------------------------------------
// matmul

void matmul_serial(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out + i * n;
        std::memset(row, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
}

void matmul_omp(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                std::size_t n) {
#ifdef _OPENMP
    const auto im = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) num_threads(worker_count())
    for (std::ptrdiff_t i = 0; i < im; ++i) {
        double* row = out + static_cast<std::size_t>(i) * n;
        std::memset(row, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[static_cast<std::size_t>(i) * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
#else
    matmul_serial(a, b, out, m, k, n);
#endif
}

void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
            std::size_t n) {
    if (m * k * n >= 32768) {
        matmul_omp(a, b, out, m, k, n);
    } else {
        matmul_serial(a, b, out, m, k, n);
    }
}

// ---------------------------------------------------------------------------
// time convolution

namespace {
inline void conv_one_step(const double* x, const double* kernel, double* out, std::size_t t,
                          std::size_t len, std::size_t lanes, std::size_t c_in, std::size_t taps,
                          std::size_t c_out, std::size_t pad_left) {
    double* orow = out + t * lanes * c_out;
    std::memset(orow, 0, lanes * c_out * sizeof(double));
    for (std::size_t kk = 0; kk < taps; ++kk) {
        const std::ptrdiff_t src =
            static_cast<std::ptrdiff_t>(t + kk) - static_cast<std::ptrdiff_t>(pad_left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* xrow = x + static_cast<std::size_t>(src) * lanes * c_in;
        const double* krow = kernel + kk * c_in * c_out;
        for (std::size_t lane = 0; lane < lanes; ++lane) {
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                const double xv = xrow[lane * c_in + ci];
                const double* kc = krow + ci * c_out;
                double* oc = orow + lane * c_out;
                for (std::size_t co = 0; co < c_out; ++co) oc[co] += xv * kc[co];
            }
        }
    }
}
}  // namespace

void conv1d_serial(const double* x, const double* kernel, double* out, std::size_t len,
                   std::size_t lanes, std::size_t c_in, std::size_t taps, std::size_t c_out,
                   Padding pad) {
    const std::size_t out_len = conv_out_len(len, taps, pad);
    const std::size_t pad_left = conv_pad_left(taps, pad);
    for (std::size_t t = 0; t < out_len; ++t) {
        conv_one_step(x, kernel, out, t, len, lanes, c_in, taps, c_out, pad_left);
    }
}

void conv1d_omp(const double* x, const double* kernel, double* out, std::size_t len,
                std::size_t lanes, std::size_t c_in, std::size_t taps, std::size_t c_out,
                Padding pad) {
#ifdef _OPENMP
    const std::size_t out_len = conv_out_len(len, taps, pad);
    const std::size_t pad_left = conv_pad_left(taps, pad);
    const auto ilen = static_cast<std::ptrdiff_t>(out_len);
#pragma omp parallel for schedule(static) num_threads(worker_count())
    for (std::ptrdiff_t t = 0; t < ilen; ++t) {
        conv_one_step(x, kernel, out, static_cast<std::size_t>(t), len, lanes, c_in, taps, c_out,
                      pad_left);
    }
#else
    conv1d_serial(x, kernel, out, len, lanes, c_in, taps, c_out, pad);
#endif
}

void conv1d(const double* x, const double* kernel, double* out, std::size_t len, std::size_t lanes,
            std::size_t c_in, std::size_t taps, std::size_t c_out, Padding pad) {
    if (len * lanes * c_in * taps * c_out >= 65536) {
        conv1d_omp(x, kernel, out, len, lanes, c_in, taps, c_out, pad);
    } else {
        conv1d_serial(x, kernel, out, len, lanes, c_in, taps, c_out, pad);
    }
}

// ---------------------------------------------------------------------------
// spectral graph convolution

namespace {
inline void graph_conv_one_step(const double* x, const double* basis, const double* theta,
                                double* out, double* scratch, std::size_t t, std::size_t n,
                                std::size_t f_in, std::size_t order, std::size_t c_out) {
    const double* xt = x + t * n * f_in;
    double* ot = out + t * n * c_out;
    std::memset(ot, 0, n * c_out * sizeof(double));
    for (std::size_t k = 0; k < order; ++k) {
        const double* tk = basis + k * n * n;
        // scratch[v,f] = (T_k · x_t)[v,f]
        matmul_serial(tk, xt, scratch, n, n, f_in);
        const double* th = theta + k * f_in * c_out;
        for (std::size_t v = 0; v < n; ++v) {
            for (std::size_t f = 0; f < f_in; ++f) {
                const double sv = scratch[v * f_in + f];
                const double* tc = th + f * c_out;
                double* oc = ot + v * c_out;
                for (std::size_t c = 0; c < c_out; ++c) oc[c] += sv * tc[c];
            }
        }
    }
}
}  // namespace

void graph_conv_serial(const double* x, const double* basis, const double* theta, double* out,
                       std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                       std::size_t c_out) {
    std::vector<double> scratch(n * f_in);
    for (std::size_t t = 0; t < len; ++t) {
        graph_conv_one_step(x, basis, theta, out, scratch.data(), t, n, f_in, order, c_out);
    }
}

void graph_conv_omp(const double* x, const double* basis, const double* theta, double* out,
                    std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                    std::size_t c_out) {
#ifdef _OPENMP
    const auto ilen = static_cast<std::ptrdiff_t>(len);
#pragma omp parallel num_threads(worker_count())
    {
        std::vector<double> scratch(n * f_in);
#pragma omp for schedule(static)
        for (std::ptrdiff_t t = 0; t < ilen; ++t) {
            graph_conv_one_step(x, basis, theta, out, scratch.data(), static_cast<std::size_t>(t),
                                n, f_in, order, c_out);
        }
    }
#else
    graph_conv_serial(x, basis, theta, out, len, n, f_in, order, c_out);
#endif
}

void graph_conv(const double* x, const double* basis, const double* theta, double* out,
                std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                std::size_t c_out) {
    if (len * order * n * n * f_in >= 65536) {
        graph_conv_omp(x, basis, theta, out, len, n, f_in, order, c_out);
    } else {
        graph_conv_serial(x, basis, theta, out, len, n, f_in, order, c_out);
    }
}

}  // namespace astgl::kernels
