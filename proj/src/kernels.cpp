#include "pandagpt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pgpt::kernels {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr int64_t kParallelFlopCutoff = 1 << 18;

inline void mm_nn_rows(const float* a, const float* b, float* c, int i0, int i1, int k, int n) {
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = i0; i < i1; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const float* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
        }
        float* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
    }
}

// a * b^T runs through the nn inner loop on a transposed copy of b. Each
// output element still accumulates k-ascending, so the result matches the
// naive dot product bit for bit while staying throughput-bound.
inline std::vector<float> transpose_to(const float* b, int rows, int cols) {
    std::vector<float> bt(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            bt[static_cast<size_t>(j) * rows + i] = b[static_cast<size_t>(i) * cols + j];
    return bt;
}

// c[k x n] = a^T * b over output rows [r0, r1); each element accumulates over
// m in ascending order.
inline void mm_tn_rows(const float* a, const float* b, float* c, int r0, int r1, int m, int k, int n) {
    std::vector<double> acc(static_cast<size_t>(n));
    for (int r = r0; r < r1; ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<size_t>(i) * k + r];
            const float* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
        }
        float* crow = c + static_cast<size_t>(r) * n;
        for (int j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
    }
}

inline void softmax_row(const float* x, float* y, int cols) {
    float mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
        const float e = std::exp(x[j] - mx);
        y[j] = e;
        sum += static_cast<double>(e);
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < cols; ++j) y[j] = static_cast<float>(static_cast<double>(y[j]) * inv);
}

// Splits [0, total) into per-thread ranges and runs fn(begin, end) once per
// thread. Row results do not depend on the split, so any thread count gives
// the serial bytes.
template <typename Fn>
inline void parallel_ranges(int total, Fn fn) {
#ifdef _OPENMP
#pragma omp parallel
    {
        const int nt = omp_get_num_threads();
        const int id = omp_get_thread_num();
        const int begin = static_cast<int>(static_cast<int64_t>(total) * id / nt);
        const int end = static_cast<int>(static_cast<int64_t>(total) * (id + 1) / nt);
        if (begin < end) fn(begin, end);
    }
#else
    fn(0, total);
#endif
}

inline bool go_parallel(int64_t flops, int rows) {
#ifdef _OPENMP
    return flops >= kParallelFlopCutoff && rows > 1 && omp_get_max_threads() > 1;
#else
    (void)flops;
    (void)rows;
    return false;
#endif
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matmul_nn_serial(const float* a, const float* b, float* c, int m, int k, int n) {
    mm_nn_rows(a, b, c, 0, m, k, n);
}

void matmul_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    if (go_parallel(static_cast<int64_t>(m) * k * n, m)) {
        parallel_ranges(m, [&](int i0, int i1) { mm_nn_rows(a, b, c, i0, i1, k, n); });
        return;
    }
    mm_nn_rows(a, b, c, 0, m, k, n);
}

void matmul_nt_serial(const float* a, const float* b, float* c, int m, int k, int n) {
    const std::vector<float> bt = transpose_to(b, n, k);
    mm_nn_rows(a, bt.data(), c, 0, m, k, n);
}

void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    const std::vector<float> bt = transpose_to(b, n, k);
    if (go_parallel(static_cast<int64_t>(m) * k * n, m)) {
        const float* btp = bt.data();
        parallel_ranges(m, [&](int i0, int i1) { mm_nn_rows(a, btp, c, i0, i1, k, n); });
        return;
    }
    mm_nn_rows(a, bt.data(), c, 0, m, k, n);
}

void matmul_tn_serial(const float* a, const float* b, float* c, int m, int k, int n) {
    mm_tn_rows(a, b, c, 0, k, m, k, n);
}

void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    if (go_parallel(static_cast<int64_t>(m) * k * n, k)) {
        parallel_ranges(k, [&](int r0, int r1) { mm_tn_rows(a, b, c, r0, r1, m, k, n); });
        return;
    }
    mm_tn_rows(a, b, c, 0, k, m, k, n);
}

void softmax_rows_serial(const float* x, float* y, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        softmax_row(x + static_cast<size_t>(i) * cols, y + static_cast<size_t>(i) * cols, cols);
}

void softmax_rows(const float* x, float* y, int rows, int cols) {
    if (go_parallel(static_cast<int64_t>(rows) * cols * 16, rows)) {
        parallel_ranges(rows, [&](int i0, int i1) {
            for (int i = i0; i < i1; ++i)
                softmax_row(x + static_cast<size_t>(i) * cols, y + static_cast<size_t>(i) * cols, cols);
        });
        return;
    }
    softmax_rows_serial(x, y, rows, cols);
}

}  // namespace pgpt::kernels
