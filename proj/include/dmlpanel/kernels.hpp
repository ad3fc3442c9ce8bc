#pragma once

#include <cstddef>

// Arithmetic inner loops shared by the regression solvers and the network
// trainer. Scalar reference implementations live in kernels::scalar; an AVX2
// variant is selected at runtime when the CPU supports it. The two backends
// agree to floating-point reassociation error and are equivalence-tested.
namespace dmlpanel::kernels {

enum class Backend { scalar, avx2 };

bool avx2_available();
Backend active_backend();
// Throws Error::usage when an unavailable backend is requested.
void set_backend(Backend b);

double dot(const double* a, const double* b, std::size_t n);
// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);
double sum_abs(const double* x, std::size_t n);
double sum_sq(const double* x, std::size_t n);
// out[i] = max(pre[i], 0)
void relu(const double* pre, double* out, std::size_t n);
// grad_in[i] = pre[i] > 0 ? grad_out[i] : 0
void relu_backward(const double* pre, const double* grad_out, double* grad_in, std::size_t n);
// Bias-corrected adaptive-moment update. bias1 = 1 - beta1^t, bias2 = 1 - beta2^t.
void adam_update(double* param, double* m, double* v, const double* grad, std::size_t n,
                 double lr, double beta1, double beta2, double eps, double bias1, double bias2);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
double sum_abs(const double* x, std::size_t n);
double sum_sq(const double* x, std::size_t n);
void relu(const double* pre, double* out, std::size_t n);
void relu_backward(const double* pre, const double* grad_out, double* grad_in, std::size_t n);
void adam_update(double* param, double* m, double* v, const double* grad, std::size_t n,
                 double lr, double beta1, double beta2, double eps, double bias1, double bias2);
}  // namespace scalar

// Dispatch table; the avx2 table is null when the binary or CPU lacks AVX2+FMA.
struct KernelTable {
    double (*dot)(const double*, const double*, std::size_t);
    void (*axpy)(double, const double*, double*, std::size_t);
    double (*sum_abs)(const double*, std::size_t);
    double (*sum_sq)(const double*, std::size_t);
    void (*relu)(const double*, double*, std::size_t);
    void (*relu_backward)(const double*, const double*, double*, std::size_t);
    void (*adam_update)(double*, double*, double*, const double*, std::size_t, double, double,
                        double, double, double, double);
};

const KernelTable* avx2_kernel_table();

}  // namespace dmlpanel::kernels
