#pragma once

#include <optional>
#include <string>

#include "kgscat/types.hpp"

namespace kgscat {

// Periodic uniform spatial grid on [-L/2, L/2) with its discrete Fourier
// transform. Points are x_i = -L/2 + i*dx, dx = L/n. Wavenumbers follow the
// usual signed FFT layout k_j = 2*pi*j/L for j = 0..n/2, j-n for j > n/2;
// the single Nyquist line (j = n/2) carries the positive sign.
class SpatialGrid {
 public:
  SpatialGrid(int n_points, Real box_length);

  int n() const { return n_; }
  Real length() const { return length_; }
  Real dx() const { return length_ / n_; }
  const RealVec& points() const { return points_; }
  const RealVec& wavenumbers() const { return wavenumbers_; }
  bool is_nyquist(int j) const { return n_ % 2 == 0 && j == n_ / 2; }

  // Unitary forward DFT matrix F with F(m, j) = exp(-i k_m x_j) / sqrt(n),
  // and its inverse (= adjoint).
  const Mat& dft() const { return dft_; }
  const Mat& idft() const { return idft_; }

  // Dense realization of the Fourier multiplier sym(k): idft * diag(sym) * dft.
  Mat multiplier(const Vec& symbol_values) const;

 private:
  int n_;
  Real length_;
  RealVec points_;
  RealVec wavenumbers_;
  Mat dft_;
  Mat idft_;
};

// Complex-valued function sampled on a SpatialGrid. The grid must outlive the
// function; all types here are immutable value holders after construction.
struct GridFunction {
  const SpatialGrid* grid = nullptr;
  Vec values;

  GridFunction() = default;
  GridFunction(const SpatialGrid& g, Vec v);
  int n() const { return grid->n(); }
};

GridFunction constant_function(const SpatialGrid& grid, Complex value);

// Dense operator on grid functions, with metadata: claimed differential
// order, claimed joint decay rate of the coefficients (if any), and an
// optional density with respect to which the operator claims self-adjointness.
struct GridOperator {
  const SpatialGrid* grid = nullptr;
  Mat matrix;
  Real claimed_order = 0.0;
  std::optional<Real> claimed_decay;
  std::optional<RealVec> selfadjoint_density;

  GridOperator() = default;
  GridOperator(const SpatialGrid& g, Mat m, Real order = 0.0,
               std::optional<Real> decay = std::nullopt,
               std::optional<RealVec> density = std::nullopt);
  int n() const { return grid->n(); }
};

// Two-component Cauchy state (u, i^{-1} d_t u) of the second-order equation,
// both components on the same grid.
struct CauchyDatum {
  GridFunction u0;
  GridFunction u1;

  CauchyDatum() = default;
  CauchyDatum(GridFunction a, GridFunction b);
  const SpatialGrid& grid() const { return *u0.grid; }
  // Stacked 2n-vector (u0 on top of u1).
  Vec stacked() const;
  static CauchyDatum from_stacked(const SpatialGrid& g, const Vec& v);
};

// Spectral differentiation matrix of the given order. Odd orders zero the
// Nyquist line so the matrix stays anti-Hermitian and maps real functions to
// real functions; even orders keep the full |k|^order multiplier.
GridOperator fourier_derivative(const SpatialGrid& grid, int order);

enum class WeightKind { Position, Frequency };

// Diagonal (1+x^2)^(e/2) for Position, Fourier multiplier (1+k^2)^(e/2) for
// Frequency. Both are Hermitian positive definite for every real exponent.
GridOperator weight_operator(const SpatialGrid& grid, WeightKind kind,
                             Real exponent);

// dx * sum_i conj(u_i) v_i density_i; conjugate-linear in u. The density must
// be real and strictly positive (throws std::invalid_argument otherwise).
Complex weighted_inner_product(const GridFunction& u, const GridFunction& v,
                               const GridFunction& density);

// Plain L^2 norm of <D>^m u.
Real sobolev_norm(const GridFunction& u, Real m);
// sqrt(sobolev(u0, m+1)^2 + sobolev(u1, m)^2).
Real energy_norm(const CauchyDatum& d, Real m);

// Adjoint with respect to the weighted product <u, v>_w = dx sum conj(u) v w:
// returns W^{-1} A^H W with W = diag(density). Throws on nonpositive density.
GridOperator weighted_adjoint(const GridOperator& a, const GridFunction& density);
GridOperator weighted_adjoint(const GridOperator& a, const RealVec& density);

// Residual ||A - A^{+w}|| of the claimed weighted self-adjointness.
Real weighted_selfadjoint_residual(const GridOperator& a, const RealVec& density);

// CSV serialization: row-major real/imag column pairs, with a JSON sidecar
// (path + ".json") storing {n_points, box_length, claimed_order, claimed_decay}.
void save_operator_csv(const std::string& path, const GridOperator& op);
GridOperator load_operator_csv(const std::string& path, const SpatialGrid& grid);
void save_function_csv(const std::string& path, const GridFunction& f);
GridFunction load_function_csv(const std::string& path, const SpatialGrid& grid);

}  // namespace kgscat
