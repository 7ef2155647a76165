#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stav/error.hpp"

// Sequence toolkit: unimodality and log-concavity tests plus the penalty
// that drives a sequence toward log-concavity (and hence unimodality).

namespace stav {

// True iff some peak position m exists with a[i-1] <= a[i] + tol for i <= m
// and a[i] >= a[i+1] - tol for i >= m. Every monotone sequence qualifies.
inline bool is_unimodal(std::span<const double> a, double tol = 0.0) {
  const std::size_t n = a.size();
  if (n <= 2) return true;
  for (std::size_t m = 0; m < n; ++m) {
    bool ok = true;
    for (std::size_t i = 1; i <= m && ok; ++i)
      if (!(a[i - 1] <= a[i] + tol)) ok = false;
    for (std::size_t i = m; i + 1 < n && ok; ++i)
      if (!(a[i] >= a[i + 1] - tol)) ok = false;
    if (ok) return true;
  }
  return false;
}

// True iff a[i]^2 >= a[i-1]*a[i+1] at every interior index and the support
// is contiguous (no zero strictly between positive entries). Entries must be
// non-negative; equality counts, so constant sequences qualify. The support
// condition is what makes {log a_k} a concave sequence: a zero plateau
// between positive entries satisfies the bare inequality (both sides 0) yet
// allows two separated bumps, which would break the unimodality implication.
inline bool is_log_concave(std::span<const double> a) {
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    if (a[i] < 0.0) throw usage_error("is_log_concave: negative entry at index " + std::to_string(i));
  for (std::size_t i = 1; i + 1 < n; ++i)
    if (a[i] * a[i] < a[i - 1] * a[i + 1]) return false;
  std::size_t first = n, last = n;
  for (std::size_t i = 0; i < n; ++i)
    if (a[i] > 0.0) {
      if (first == n) first = i;
      last = i;
    }
  for (std::size_t i = first; i < last && i < n; ++i)
    if (a[i] == 0.0) return false;
  return true;
}

// R = sum_i max{0, a[i-1]*a[i+1] - a[i]^2}; zero exactly on log-concave
// sequences. Sequences shorter than 3 have no interior terms.
inline double logconcave_penalty(std::span<const double> a) {
  double r = 0.0;
  for (std::size_t i = 1; i + 1 < a.size(); ++i) {
    const double excess = a[i - 1] * a[i + 1] - a[i] * a[i];
    if (excess > 0.0) r += excess;
  }
  return r;
}

}  // namespace stav
