#pragma once

#include <functional>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "kgscat/grid.hpp"

namespace kgscat {

// Time-dependent scalar symbol a(t, x, k) with claimed differential order and
// claimed joint decay rate; the claims are metadata checked by slope fits,
// never assumed.
struct Symbol {
  std::function<Complex(Real, Real, Real)> evaluator;
  Real claimed_m = 0.0;
  Real claimed_delta = 0.0;
  bool polyhomogeneous = false;
};

// Quadrature setup for the resolvent-integral power route.
struct PowerRoutine {
  enum class Mode { Spectral, Contour };
  Mode mode = Mode::Contour;
  int quadrature_nodes = 200;
  Real alpha = -0.5;
};

// Symmetric (midpoint) quantization on the periodic grid:
//   K(x_i, x_j) = (1/n) sum_k a(t, (x_i+x_j)/2, k) e^{i k (x_i - x_j)},
// with the Nyquist wavenumber split evenly between +k_N and -k_N so real
// symbols quantize to Hermitian matrices exactly. Fourier multipliers and
// pure multiplication operators are reproduced exactly.
GridOperator weyl_quantize(const Symbol& sym, Real t, const SpatialGrid& grid);

// A^alpha through the eigendecomposition in the weighted inner product.
// Requires A self-adjoint w.r.t. density and spectrum >= c0 > 0; throws
// std::domain_error when the smallest eigenvalue is <= 1e-10.
GridOperator fractional_power_spectral(const GridOperator& a, Real alpha,
                                       const RealVec& density);
GridOperator fractional_power_spectral(const GridOperator& a, Real alpha,
                                       const GridFunction& density);

// A^alpha through the resolvent integral
//   A^alpha = C_alpha * Integral_0^inf (A + s)^{-1} s^alpha ds,
// C_alpha = -sin(pi*alpha)/pi, valid for alpha in (-1, 0); other exponents
// are reached by an exact integer-power shift. The integral is evaluated by
// a trapezoid rule in log s over a window sized so both truncation tails are
// below 1e-9 relative; a doubled-node self-check must agree to 1e-5 (throws
// std::runtime_error otherwise).
GridOperator fractional_power_contour(const GridOperator& a, Real alpha,
                                      const PowerRoutine& routine);

// Map from times to grid operators with a sample cache.
class OperatorFamily {
 public:
  OperatorFamily() = default;
  explicit OperatorFamily(std::function<GridOperator(Real)> eval)
      : eval_(std::move(eval)) {}

  const GridOperator& at(Real t) const;
  bool valid() const { return static_cast<bool>(eval_); }
  void clear_cache() const { cache_.clear(); }

 private:
  std::function<GridOperator(Real)> eval_;
  mutable std::map<long long, GridOperator> cache_;
};

// Configuration for the weighted-norm decay-slope estimator. The measured
// quantity is s(t) = || <D>^{-m} W a(t) W <D>^{-m'} || with W the indicator
// of the interior window |x| <= window_radius, optionally conjugated by
// <x>^k weights as well.
struct DecayFitConfig {
  std::optional<std::pair<Real, Real>> frequency_exponents;  // (m, m')
  std::optional<std::pair<Real, Real>> position_exponents;   // (k, k')
  Real window_radius = 0.0;  // 0 -> L/4 default
  std::vector<Real> times;   // >= 8 samples spanning at least a decade
};

struct DecayFit {
  Real slope = 0.0;
  Real stderr_slope = 0.0;
  Real r2 = 0.0;
  bool well_conditioned = false;   // false when r2 < 0.9 or samples non-monotone
  bool below_noise_floor = false;  // all samples below 1e-13
  std::vector<std::pair<Real, Real>> samples;  // (t, s(t))
};

std::vector<Real> default_decay_times();

DecayFit decay_exponent_fit(const OperatorFamily& family,
                            const DecayFitConfig& config);

// Least-squares slope of log s vs log <t>; shared by operator-level and
// scalar-coefficient decay diagnostics.
DecayFit fit_log_slope(const std::vector<std::pair<Real, Real>>& samples);

}  // namespace kgscat
