#include "xmodal/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>

namespace xmodal::kernels {
namespace {

Backend pick_initial_backend() {
  const char* env = std::getenv("XMODAL_KERNELS");
  if (env != nullptr) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0 && avx2_ops() != nullptr)
      return Backend::avx2;
  }
  return avx2_ops() != nullptr ? Backend::avx2 : Backend::scalar;
}

Backend g_backend = pick_initial_backend();
const Ops* g_ops =
    g_backend == Backend::avx2 ? avx2_ops() : &scalar_ops();

}  // namespace

Backend active_backend() { return g_backend; }

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

bool force_backend(Backend b) {
  const Ops* table = b == Backend::avx2 ? avx2_ops() : &scalar_ops();
  if (table == nullptr) return false;
  g_backend = b;
  g_ops = table;
  return true;
}

const Ops& ops() { return *g_ops; }

void softmax(const double* logits, double* probs, std::size_t n) {
  if (n == 0) return;
  const double m = ops().reduce_max(logits, n);
  for (std::size_t i = 0; i < n; ++i) probs[i] = std::exp(logits[i] - m);
  const double z = ops().reduce_sum(probs, n);
  ops().scale(1.0 / z, probs, n);
}

double kl_div(const double* p, const double* q, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return s;
}

}  // namespace xmodal::kernels
