#pragma once

// Built-in self tests: popcount GEMM against the dense sign oracle, and the
// per-layer gradient checks.

#include <cstdint>
#include <ostream>
#include <random>
#include <string>

#include "bvit/bittensor.hpp"
#include "bvit/gradcheck.hpp"

namespace bvit {

struct GemmSuiteResult {
  std::size_t cases = 0;
  std::size_t failures = 0;
  std::string first_failure;

  bool ok() const { return cases > 0 && failures == 0; }
};

/// Random shapes in [1, max_dim]^3 with real entries (including exact zeros);
/// compares binary_gemm on packed signs with reference::sign_gemm.
inline GemmSuiteResult gemm_oracle_suite(std::size_t cases, std::size_t max_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, max_dim);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::bernoulli_distribution zero(0.05);
  GemmSuiteResult res;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    FloatTensor a = FloatTensor::matrix(m, k), b = FloatTensor::matrix(k, n);
    for (auto& v : a.values()) v = zero(rng) ? 0.0f : nd(rng);
    for (auto& v : b.values()) v = zero(rng) ? 0.0f : nd(rng);
    const IntMatrix got = binary_gemm(pack_signs(a), pack_signs(b));
    const IntMatrix want = reference::sign_gemm(a, b);
    ++res.cases;
    if (!(got == want)) {
      if (res.failures++ == 0)
        res.first_failure = "case " + std::to_string(c) + " (" + std::to_string(m) + "x" + std::to_string(k) + "x" + std::to_string(n) + ")";
    }
  }
  return res;
}

/// Runs both suites, printing one line per suite or check. Returns true iff all pass.
inline bool run_selftest(std::ostream& os, std::uint64_t seed = 0, std::size_t gemm_cases = 1000) {
  bool all = true;
  const GemmSuiteResult g = gemm_oracle_suite(gemm_cases, 256, seed);
  os << (g.ok() ? "PASS" : "FAIL") << "  gemm-oracle        " << (g.cases - g.failures) << "/" << g.cases << " cases";
  if (!g.ok()) os << "  first failure: " << g.first_failure;
  os << "\n";
  all &= g.ok();

  std::size_t passed = 0;
  const auto results = run_layer_gradchecks(GradCheckOptions{}, seed + 1);
  for (const auto& r : results) {
    os << (r.ok() ? "PASS" : "FAIL") << "  gradcheck " << r.name << "  points " << r.points << "  max rel err " << r.max_rel_err;
    if (r.rejected) os << "  (no sample far enough from kinks after " << r.attempts << " attempts)";
    if (!r.ok() && !r.worst.empty()) os << "  worst " << r.worst;
    os << "\n";
    passed += r.ok();
    all &= r.ok();
  }
  os << "gradcheck suite " << passed << "/" << results.size() << " passed\n";
  return all;
}

}  // namespace bvit
