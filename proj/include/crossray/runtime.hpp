#pragma once

#include <cblas.h>
#include <malloc.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>

namespace crossray {

/// Process-level tuning for the executables; call first thing in main.
///
/// OpenBLAS built with DYNAMIC_ARCH falls back to generic SSE3 kernels when
/// it cannot identify the CPU (common under virtualisation), which makes
/// sgemm about 5x slower. If that happened and the CPU has AVX-512 or AVX2,
/// the process re-executes itself once with OPENBLAS_CORETYPE set, since the
/// kernel is chosen when the library loads.
///
/// Large tensors are allocated and freed every step; keeping them on the
/// heap instead of fresh mmaps avoids re-faulting the pages each time.
inline void tune_process(char** argv) {
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  if (std::getenv("OPENBLAS_CORETYPE") || std::strcmp(openblas_get_corename(), "Prescott") != 0) return;
  const char* core = nullptr;
  if (__builtin_cpu_supports("avx512f")) {
    core = "SkylakeX";
  } else if (__builtin_cpu_supports("avx2")) {
    core = "Haswell";
  }
  if (!core) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  execv("/proc/self/exe", argv);  // returns only on failure; carry on with the slow kernels
}

}  // namespace crossray
