// Shared basics: token ids, error taxonomy, log-space helpers.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

namespace tqlab {

using TokenId = int;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Node budget exceeded while enumerating the response space.
class EnumerationCapError : public Error {
 public:
  using Error::Error;
};

// A distribution places mass where its reference has none.
class AbsoluteContinuityError : public Error {
 public:
  using Error::Error;
};

// Query at a state carrying zero probability (or outside a policy's domain).
class UnreachablePrefixError : public Error {
 public:
  using Error::Error;
};

// Config parsing/validation problems; message names the field and line.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Max-shifted log(sum(exp(xs))). Empty input and all -inf both yield -inf.
inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// log(1 + exp(x)) without overflow; -log(sigmoid(x)) == log1p_exp(-x).
inline double log1p_exp(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace tqlab
