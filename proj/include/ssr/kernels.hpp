#pragma once

#include <cstddef>
#include <vector>

namespace ssr {

// Row-major dense matrix of doubles. The whole toolkit trains in double
// so gradient checks against finite differences are meaningful.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double* row(std::size_t r) { return v.data() + r * cols; }
  const double* row(std::size_t r) const { return v.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  std::size_t size() const { return v.size(); }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// Dense kernels, OpenMP-parallel over output rows. Each output element
// is accumulated sequentially by a single thread, so results are
// bitwise identical to the serial reference for any thread count.
namespace kernels {

// out[m x n] = a[m x k] * b[k x n]
void matmul(const Mat& a, const Mat& b, Mat& out);
// out[m x n] = a[m x k] * b^T   (b is [n x k])
void matmul_bt(const Mat& a, const Mat& b, Mat& out);
// out[k x n] = a^T * b          (a is [m x k], b is [m x n])
void matmul_at(const Mat& a, const Mat& b, Mat& out);
// out[k x n] += a^T * b
void matmul_at_acc(const Mat& a, const Mat& b, Mat& out);
// In-place row-wise softmax.
void softmax_rows(Mat& x);
// out += x
void add_inplace(Mat& out, const Mat& x);

}  // namespace kernels

// Serial reference implementations. Kept for testing and as the
// baseline for the kernel benchmark; plain loops, no pragmas.
namespace serial {

void matmul(const Mat& a, const Mat& b, Mat& out);
void matmul_bt(const Mat& a, const Mat& b, Mat& out);
void matmul_at(const Mat& a, const Mat& b, Mat& out);
void matmul_at_acc(const Mat& a, const Mat& b, Mat& out);
void softmax_rows(Mat& x);
void add_inplace(Mat& out, const Mat& x);

}  // namespace serial

}  // namespace ssr
