#pragma once

#include <cstdint>

namespace pgpt::kernels {

// Dense float kernels. Every output element is a dot product accumulated in
// 64-bit, k-ascending, then rounded once to 32-bit. Because each element owns
// its accumulator, the OpenMP variants split work across output rows and are
// bit-identical to the serial references regardless of thread count.
//
// The *_serial functions are the reference implementations kept for testing
// and benchmarking; the unsuffixed entry points dispatch to OpenMP when the
// problem is large enough to pay for the fork.

// c[m x n] = a[m x k] * b[k x n]
void matmul_nn_serial(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_nn(const float* a, const float* b, float* c, int m, int k, int n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n);

// c[k x n] = a[m x k]^T * b[m x n]
void matmul_tn_serial(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n);

// Row-wise softmax with max subtraction; sums accumulate in 64-bit.
void softmax_rows_serial(const float* x, float* y, int rows, int cols);
void softmax_rows(const float* x, float* y, int rows, int cols);

// Number of OpenMP threads the dispatching kernels will fan out to (1 when
// built without OpenMP).
int max_threads();

}  // namespace pgpt::kernels
