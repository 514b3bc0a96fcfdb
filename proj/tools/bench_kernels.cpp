// Compares the OpenMP kernels against the serial reference: wall time
// and bitwise agreement on identical inputs.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ssr/kernels.hpp"
#include "ssr/rng.hpp"

namespace {

using ssr::Mat;

Mat random_mat(std::size_t rows, std::size_t cols, ssr::Rng& rng) {
  Mat m(rows, cols);
  for (double& x : m.v) x = ssr::normal(rng);
  return m;
}

template <typename F>
double time_ms(F&& fn, int iters) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 384;
  int iters = 5;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--size" && i + 1 < argc) n = std::stoul(argv[++i]);
    else if (arg == "--iters" && i + 1 < argc) iters = std::stoi(argv[++i]);
  }
#ifdef _OPENMP
  std::printf("openmp: %d threads\n", omp_get_max_threads());
#else
  std::printf("openmp: disabled at build time\n");
#endif
  std::printf("matrices: %zux%zu, %d iterations per kernel\n\n", n, n, iters);

  ssr::Rng rng(42);
  const Mat a = random_mat(n, n, rng);
  const Mat b = random_mat(n, n, rng);
  Mat out_par(n, n), out_ser(n, n);

  struct Row {
    const char* name;
    double par_ms, ser_ms;
    bool equal;
  };
  Row rows[4];

  rows[0].name = "matmul";
  rows[0].par_ms = time_ms([&] { ssr::kernels::matmul(a, b, out_par); }, iters);
  rows[0].ser_ms = time_ms([&] { ssr::serial::matmul(a, b, out_ser); }, iters);
  rows[0].equal = bitwise_equal(out_par, out_ser);

  rows[1].name = "matmul_bt";
  rows[1].par_ms = time_ms([&] { ssr::kernels::matmul_bt(a, b, out_par); }, iters);
  rows[1].ser_ms = time_ms([&] { ssr::serial::matmul_bt(a, b, out_ser); }, iters);
  rows[1].equal = bitwise_equal(out_par, out_ser);

  rows[2].name = "matmul_at";
  rows[2].par_ms = time_ms([&] { ssr::kernels::matmul_at(a, b, out_par); }, iters);
  rows[2].ser_ms = time_ms([&] { ssr::serial::matmul_at(a, b, out_ser); }, iters);
  rows[2].equal = bitwise_equal(out_par, out_ser);

  rows[3].name = "softmax_rows";
  Mat sp = a, ss = a;
  rows[3].par_ms = time_ms(
      [&] {
        sp = a;
        ssr::kernels::softmax_rows(sp);
      },
      iters);
  rows[3].ser_ms = time_ms(
      [&] {
        ss = a;
        ssr::serial::softmax_rows(ss);
      },
      iters);
  rows[3].equal = bitwise_equal(sp, ss);

  std::printf("%-14s %12s %12s %10s %8s\n", "kernel", "parallel ms", "serial ms", "speedup",
              "bitwise");
  bool all_equal = true;
  for (const Row& r : rows) {
    std::printf("%-14s %12.3f %12.3f %9.2fx %8s\n", r.name, r.par_ms, r.ser_ms,
                r.ser_ms / r.par_ms, r.equal ? "equal" : "DIFFER");
    all_equal = all_equal && r.equal;
  }
  if (!all_equal) {
    std::printf("\nerror: parallel and serial kernels disagree\n");
    return 1;
  }
  return 0;
}
