#include "ssr/kernels.hpp"

#include <cassert>
#include <cmath>

namespace ssr {

namespace {

// Shared inner loops. The parallel entry points split work by output
// row; the per-element accumulation order matches the serial reference
// exactly.
inline void matmul_row(const Mat& a, const Mat& b, Mat& out, std::size_t i) {
  const std::size_t k = a.cols, n = b.cols;
  double* o = out.row(i);
  for (std::size_t j = 0; j < n; ++j) o[j] = 0.0;
  const double* ai = a.row(i);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = ai[p];
    const double* bp = b.row(p);
    for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
  }
}

inline void matmul_bt_row(const Mat& a, const Mat& b, Mat& out, std::size_t i) {
  const std::size_t k = a.cols, n = b.rows;
  const double* ai = a.row(i);
  double* o = out.row(i);
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b.row(j);
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
    o[j] = acc;
  }
}

inline void matmul_at_row(const Mat& a, const Mat& b, Mat& out, std::size_t i, bool accumulate) {
  // out[i, :] = sum_p a[p, i] * b[p, :]
  const std::size_t m = a.rows, n = b.cols;
  double* o = out.row(i);
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) o[j] = 0.0;
  for (std::size_t p = 0; p < m; ++p) {
    const double av = a.at(p, i);
    const double* bp = b.row(p);
    for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
  }
}

inline void softmax_row(Mat& x, std::size_t i) {
  double* r = x.row(i);
  double mx = r[0];
  for (std::size_t j = 1; j < x.cols; ++j)
    if (r[j] > mx) mx = r[j];
  double sum = 0.0;
  for (std::size_t j = 0; j < x.cols; ++j) {
    r[j] = std::exp(r[j] - mx);
    sum += r[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < x.cols; ++j) r[j] *= inv;
}

}  // namespace

namespace kernels {

void matmul(const Mat& a, const Mat& b, Mat& out) {
  assert(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < a.rows; ++i) matmul_row(a, b, out, i);
}

void matmul_bt(const Mat& a, const Mat& b, Mat& out) {
  assert(a.cols == b.cols && out.rows == a.rows && out.cols == b.rows);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < a.rows; ++i) matmul_bt_row(a, b, out, i);
}

void matmul_at(const Mat& a, const Mat& b, Mat& out) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i, false);
}

void matmul_at_acc(const Mat& a, const Mat& b, Mat& out) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i, true);
}

void softmax_rows(Mat& x) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < x.rows; ++i) softmax_row(x, i);
}

void add_inplace(Mat& out, const Mat& x) {
  assert(out.size() == x.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += x.v[i];
}

}  // namespace kernels

namespace serial {

void matmul(const Mat& a, const Mat& b, Mat& out) {
  assert(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) matmul_row(a, b, out, i);
}

void matmul_bt(const Mat& a, const Mat& b, Mat& out) {
  assert(a.cols == b.cols && out.rows == a.rows && out.cols == b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) matmul_bt_row(a, b, out, i);
}

void matmul_at(const Mat& a, const Mat& b, Mat& out) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
  for (std::size_t i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i, false);
}

void matmul_at_acc(const Mat& a, const Mat& b, Mat& out) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
  for (std::size_t i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i, true);
}

void softmax_rows(Mat& x) {
  for (std::size_t i = 0; i < x.rows; ++i) softmax_row(x, i);
}

void add_inplace(Mat& out, const Mat& x) {
  assert(out.size() == x.size());
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += x.v[i];
}

}  // namespace serial

}  // namespace ssr
