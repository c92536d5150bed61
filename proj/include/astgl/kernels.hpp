#pragma once

#include <cstddef>

namespace astgl::kernels {

/// Global worker cap for OpenMP regions (0 = runtime default). Parallel kernels
/// partition work over independent output elements with a fixed per-element
/// accumulation order, so results are bit-identical to the serial references
/// regardless of thread count.
void set_max_threads(int n);
int max_threads();

enum class Padding { valid, same };

/// out_len for a length-L sequence under the given padding.
std::size_t conv_out_len(std::size_t len, std::size_t taps, Padding pad);
/// Left zero-pad for `same` (extra pad goes to the end when taps is even).
std::size_t conv_pad_left(std::size_t taps, Padding pad);

// --- matmul: out[m x n] = a[m x k] * b[k x n] ---
void matmul_serial(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                   std::size_t n);
void matmul_omp(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                std::size_t n);
void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
            std::size_t n);

// --- time convolution (cross-correlation) applied independently per lane ---
// x: [len x lanes x c_in], kernel: [taps x c_in x c_out], out: [out_len x lanes x c_out]
void conv1d_serial(const double* x, const double* kernel, double* out, std::size_t len,
                   std::size_t lanes, std::size_t c_in, std::size_t taps, std::size_t c_out,
                   Padding pad);
void conv1d_omp(const double* x, const double* kernel, double* out, std::size_t len,
                std::size_t lanes, std::size_t c_in, std::size_t taps, std::size_t c_out,
                Padding pad);
void conv1d(const double* x, const double* kernel, double* out, std::size_t len, std::size_t lanes,
            std::size_t c_in, std::size_t taps, std::size_t c_out, Padding pad);

// --- spectral graph convolution contraction ---
// x: [len x n x f_in], basis: [order x n x n], theta: [order x f_in x c_out],
// out: [len x n x c_out];  out[t,v,c] = sum_k sum_f theta[k,f,c] * (basis_k · x_t)[v,f]
void graph_conv_serial(const double* x, const double* basis, const double* theta, double* out,
                       std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                       std::size_t c_out);
void graph_conv_omp(const double* x, const double* basis, const double* theta, double* out,
                    std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                    std::size_t c_out);
void graph_conv(const double* x, const double* basis, const double* theta, double* out,
                std::size_t len, std::size_t n, std::size_t f_in, std::size_t order,
                std::size_t c_out);

}  // namespace astgl::kernels
