#ifndef DNDM_SRC_KERNELS_H_
#define DNDM_SRC_KERNELS_H_

#include <cstddef>
#include <vector>

// Dense kernels behind Linear(). Loop orders keep the innermost loop a
// contiguous axpy so the compiler can vectorize it without reassociating sums;
// results are therefore bit-reproducible for a given build. Zero input
// activations (MNIST background, dead ReLUs) are skipped.
namespace dndm::internal {

// out[rows x n] = x[rows x k] * w[k x n] + bias[n]
template <typename T>
void AffineForward(const T* x, const T* w, const T* bias, size_t rows,
                   size_t k, size_t n, T* out) {
  for (size_t i = 0; i < rows; ++i) {
    T* out_row = out + i * n;
    for (size_t j = 0; j < n; ++j) out_row[j] = bias[j];
    const T* x_row = x + i * k;
    for (size_t p = 0; p < k; ++p) {
      const T xv = x_row[p];
      if (xv == T{0}) continue;
      const T* w_row = w + p * n;
      for (size_t j = 0; j < n; ++j) out_row[j] += xv * w_row[j];
    }
  }
}

// dw[k x n] += x^T * dy
template <typename T>
void AccumulateWeightGrad(const T* x, const T* dy, size_t rows, size_t k,
                          size_t n, T* dw) {
  for (size_t i = 0; i < rows; ++i) {
    const T* x_row = x + i * k;
    const T* dy_row = dy + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T xv = x_row[p];
      if (xv == T{0}) continue;
      T* dw_row = dw + p * n;
      for (size_t j = 0; j < n; ++j) dw_row[j] += xv * dy_row[j];
    }
  }
}

// db[n] += column sums of dy
template <typename T>
void AccumulateBiasGrad(const T* dy, size_t rows, size_t n, T* db) {
  for (size_t i = 0; i < rows; ++i) {
    const T* dy_row = dy + i * n;
    for (size_t j = 0; j < n; ++j) db[j] += dy_row[j];
  }
}

// dx[rows x k] += dy[rows x n] * w^T
template <typename T>
void AccumulateInputGrad(const T* dy, const T* w, size_t rows, size_t k,
                         size_t n, T* dx) {
  std::vector<T> wt(n * k);
  for (size_t p = 0; p < k; ++p) {
    for (size_t j = 0; j < n; ++j) wt[j * k + p] = w[p * n + j];
  }
  for (size_t i = 0; i < rows; ++i) {
    T* dx_row = dx + i * k;
    const T* dy_row = dy + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T g = dy_row[j];
      if (g == T{0}) continue;
      const T* wt_row = wt.data() + j * k;
      for (size_t p = 0; p < k; ++p) dx_row[p] += g * wt_row[p];
    }
  }
}

}  // namespace dndm::internal

#endif  // DNDM_SRC_KERNELS_H_
