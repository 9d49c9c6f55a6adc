#include <atomic>
#include <cstdlib>
#include <string_view>

#include "scn/error.hpp"
#include "scn/kernels/kernels.hpp"

namespace scn::kernels {
namespace {

Isa detect() {
  if (const char* env = std::getenv("SCN_ISA")) {
    const std::string_view requested(env);
    if (requested == "scalar") return Isa::scalar;
    if (requested == "avx2" && avx2::supported()) return Isa::avx2;
  }
  return avx2::supported() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_available(Isa isa) { return isa == Isa::scalar || avx2::supported(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  require(isa_available(isa), ErrorKind::usage, std::string("instruction set not available: ") + isa_name(isa));
  current().store(isa, std::memory_order_relaxed);
}

template <typename T>
const KernelTable<T>& table(Isa isa) {
  return isa == Isa::avx2 ? avx2::kernels<T>() : scalar::kernels<T>();
}

template const KernelTable<float>& table<float>(Isa);
template const KernelTable<double>& table<double>(Isa);

}  // namespace scn::kernels
