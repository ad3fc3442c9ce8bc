#include "dmlpanel/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include "dmlpanel/common.hpp"

namespace dmlpanel::kernels {

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double sum_abs(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::fabs(x[i]);
    return acc;
}

double sum_sq(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
    return acc;
}

void relu(const double* pre, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = pre[i] > 0.0 ? pre[i] : 0.0;
}

void relu_backward(const double* pre, const double* grad_out, double* grad_in, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) grad_in[i] = pre[i] > 0.0 ? grad_out[i] : 0.0;
}

void adam_update(double* param, double* m, double* v, const double* grad, std::size_t n,
                 double lr, double beta1, double beta2, double eps, double bias1, double bias2) {
    for (std::size_t i = 0; i < n; ++i) {
        double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        double m_hat = m[i] / bias1;
        double v_hat = v[i] / bias2;
        param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

}  // namespace scalar

namespace {

const KernelTable scalar_table = {
    &scalar::dot,  &scalar::axpy,          &scalar::sum_abs,     &scalar::sum_sq,
    &scalar::relu, &scalar::relu_backward, &scalar::adam_update,
};

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend resolve_initial_backend() {
    if (const char* env = std::getenv("DMLPANEL_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
        if (std::strcmp(env, "avx2") == 0 && avx2_available()) return Backend::avx2;
    }
    return avx2_available() ? Backend::avx2 : Backend::scalar;
}

std::atomic<const KernelTable*> active_table{nullptr};
std::atomic<Backend> active{Backend::scalar};

const KernelTable* table() {
    const KernelTable* t = active_table.load(std::memory_order_acquire);
    if (t == nullptr) {
        Backend b = resolve_initial_backend();
        t = b == Backend::avx2 ? avx2_kernel_table() : &scalar_table;
        active.store(b, std::memory_order_relaxed);
        active_table.store(t, std::memory_order_release);
    }
    return t;
}

}  // namespace

bool avx2_available() { return cpu_has_avx2_fma() && avx2_kernel_table() != nullptr; }

Backend active_backend() {
    table();
    return active.load(std::memory_order_relaxed);
}

void set_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_available())
        throw Error::usage("avx2 kernel backend not available on this build/CPU");
    active.store(b, std::memory_order_relaxed);
    active_table.store(b == Backend::avx2 ? avx2_kernel_table() : &scalar_table,
                       std::memory_order_release);
}

double dot(const double* a, const double* b, std::size_t n) { return table()->dot(a, b, n); }

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    table()->axpy(alpha, x, y, n);
}

double sum_abs(const double* x, std::size_t n) { return table()->sum_abs(x, n); }

double sum_sq(const double* x, std::size_t n) { return table()->sum_sq(x, n); }

void relu(const double* pre, double* out, std::size_t n) { table()->relu(pre, out, n); }

void relu_backward(const double* pre, const double* grad_out, double* grad_in, std::size_t n) {
    table()->relu_backward(pre, grad_out, grad_in, n);
}

void adam_update(double* param, double* m, double* v, const double* grad, std::size_t n,
                 double lr, double beta1, double beta2, double eps, double bias1, double bias2) {
    table()->adam_update(param, m, v, grad, n, lr, beta1, beta2, eps, bias1, bias2);
}

}  // namespace dmlpanel::kernels
