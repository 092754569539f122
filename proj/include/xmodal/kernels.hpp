#pragma once

#include <cstddef>
#include <cstdint>

// Double-precision arithmetic kernels behind a runtime-dispatched table.
// A scalar reference backend always exists; an AVX2 backend is selected at
// startup when the CPU supports it. XMODAL_KERNELS=scalar|avx2 overrides.
// Backends may differ in the last few ulps (different reduction order);
// within one process the selected backend never changes mid-run.

namespace xmodal::kernels {

enum class Backend { scalar, avx2 };

struct Ops {
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*reduce_max)(const double* x, std::size_t n);
  double (*reduce_sum)(const double* x, std::size_t n);
  double (*sq_dist)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  // y = W x, W row-major rows x cols
  void (*matvec)(const double* w, const double* x, double* y, std::size_t rows,
                 std::size_t cols);
  // y = W^T u, y has cols entries
  void (*matvec_t)(const double* w, const double* u, double* y,
                   std::size_t rows, std::size_t cols);
  // A += alpha * u v^T, A row-major rows x cols
  void (*ger)(double* a, const double* u, const double* v, double alpha,
              std::size_t rows, std::size_t cols);
};

const Ops& scalar_ops();
// nullptr when AVX2 is unavailable on this CPU or not compiled in.
const Ops* avx2_ops();

Backend active_backend();
const char* backend_name(Backend b);
// Returns false if the requested backend is unavailable.
bool force_backend(Backend b);
const Ops& ops();

// Composite helpers on top of the active backend. exp/log stay scalar in
// every backend so results do not depend on a transcendental approximation.

// probs = softmax(logits), max-subtracted.
void softmax(const double* logits, double* probs, std::size_t n);

// sum_i p_i * (log p_i - log q_i), terms with p_i == 0 contribute zero.
double kl_div(const double* p, const double* q, std::size_t n);

}  // namespace xmodal::kernels
