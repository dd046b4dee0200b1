#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "kgscat/geometry.hpp"
#include "kgscat/grid.hpp"

namespace kgscat {

// Uniform symmetric time lattice on [-T, T] with 0 as a lattice point, plus
// the weight exponent gamma of the <t>^{-gamma}-weighted space-time norm.
// The step is snapped so the lattice is exactly symmetric.
class TimeGrid {
 public:
  TimeGrid(Real half_width, Real dt, Real delta,
           std::optional<Real> gamma = std::nullopt);

  Real half_width() const { return half_width_; }
  Real dt() const { return dt_; }
  Real gamma() const { return gamma_; }
  int n_steps() const { return n_steps_; }          // number of intervals
  int n_times() const { return n_steps_ + 1; }
  int index_zero() const { return n_steps_ / 2; }
  Real time(int j) const { return -half_width_ + j * dt_; }
  std::vector<Real> times() const;
  // Exact lattice membership (throws std::invalid_argument otherwise).
  int index_of(Real t) const;
  // <t_j>^{-2 gamma} * dt quadrature weight of the weighted norm.
  Real weight(int j) const;

 private:
  Real half_width_, dt_, gamma_;
  int n_steps_;
};

// 2x2 block matrix over a grid: the container for generators, projections,
// pairings, and diagonalizers acting on two-component states.
class BlockOperator {
 public:
  BlockOperator() = default;
  BlockOperator(const SpatialGrid& grid, Mat full);
  static BlockOperator from_blocks(const SpatialGrid& grid, const Mat& ul,
                                   const Mat& ur, const Mat& ll, const Mat& lr);
  static BlockOperator identity(const SpatialGrid& grid);
  // Off-diagonal pairing q = [[0, 1], [1, 0]].
  static BlockOperator q_pairing(const SpatialGrid& grid);
  // Diagonal pairing q^ad = diag(1, -1).
  static BlockOperator q_ad_pairing(const SpatialGrid& grid);
  // Projections onto the upper/lower component, pi^+ = diag(1, 0) etc.
  static BlockOperator projector_plus(const SpatialGrid& grid);
  static BlockOperator projector_minus(const SpatialGrid& grid);

  const SpatialGrid& grid() const { return *grid_; }
  int n() const;
  const Mat& mat() const { return mat_; }
  Mat& mat() { return mat_; }
  Mat ul() const { return mat_.topLeftCorner(n(), n()); }
  Mat ur() const { return mat_.topRightCorner(n(), n()); }
  Mat ll() const { return mat_.bottomLeftCorner(n(), n()); }
  Mat lr() const { return mat_.bottomRightCorner(n(), n()); }

 private:
  const SpatialGrid* grid_ = nullptr;
  Mat mat_;
};

// Adjoint of a two-component operator w.r.t. the weighted pairings
// <v, w>_rho = dx sum conj(v) w rho applied componentwise, with possibly
// different densities on domain and range (evolution maps change time):
// U^* = D_dom^{-1} U^H D_ran.
Mat block_weighted_adjoint(const Mat& u, const RealVec& density_domain,
                           const RealVec& density_range);

// Generator H(t) = [[0, 1], [a(t), i r(t)]] of the first-order system.
BlockOperator build_generator(const ReducedModel& reduced, Real t);

// Residual of the pairing identity the conservation law rests on:
// || H^{*rho} q - q H + i r q || where * is the rho(t)-weighted block
// adjoint. The extra i*r*q term is the exact contribution of the density's
// own time drift; the residual is zero iff a(t) is exactly rho-self-adjoint.
Real generator_pairing_residual(const ReducedModel& reduced, Real t);

// ---------------------------------------------------------------------------
// Approximate diagonalization

// Per-lattice-time diagonalization data, computed lazily per index:
//   b+ = eps = a(t)^{1/2} (optionally Riccati-refined),  b- = -(b+)^{*rho},
//   S = (b+ - b-)^{-1/2},  T = i^{-1} [[1, -1], [b+, -b-]] S,
//   T^{-1} = i S [[-b-, 1], [-b+, 1]],
//   r_inf^+ = a - (b+)^2 + i d_t b+ + i r b+,
//   H^ad = T^{-1} H T - i^{-1} T^{-1} (d_t T),
//   eps^+/- = diagonal blocks of H^ad, symmetrized; the skew parts and the
//   off-diagonal blocks all land in V^ad = H^d - H^ad exactly.
// Time derivatives are centered differences on the lattice (one-sided at the
// ends).
class DiagonalizationBundle {
 public:
  DiagonalizationBundle(const ReducedModel& reduced, const TimeGrid& tg,
                        int refine = 0);

  const TimeGrid& tg() const { return tg_; }
  const ReducedModel& reduced() const { return reduced_; }
  int refine() const { return refine_; }

  // Accessors return copies: the lazy cache behind them evicts old indices
  // once it grows past the retention limit, so references could not be kept
  // stable across calls.
  Mat eps(int j) const;       // leading symbol a^{1/2}
  Mat b_plus(int j) const;    // refined root
  Mat b_minus(int j) const;
  Mat s_half(int j) const;    // (b+ - b-)^{-1/2}
  BlockOperator t_op(int j) const;
  BlockOperator t_inv(int j) const;
  Mat r_inf_plus(int j) const;
  Mat r_inf_minus(int j) const;
  BlockOperator h_ad(int j) const;
  Mat eps_plus(int j) const;   // hermitized diagonal generator blocks
  Mat eps_minus(int j) const;
  BlockOperator v_ad(int j) const;
  Real hermitization_residual(int j) const;
  RealVec density(int j) const;

  // Retention limit of the lazy cache in matrix entries (approximately
  // 16 n^2 bytes each); 0 disables eviction.
  void set_cache_limit(std::size_t entries) const;

  // Weighted slab norm of r_inf^+ for refinement levels 0..refine; the
  // quality gain of each Riccati sweep is the ratio of successive entries.
  std::vector<Real> remainder_ladder() const;

 private:
  struct Cache;  // lazy per-index tables, shared across copies
  void evict_if_needed() const;
  const Mat& b_at_level(int level, int j) const;
  const Mat& eps_i(int j) const;
  const Mat& b_plus_i(int j) const;
  const Mat& b_minus_i(int j) const;
  const Mat& s_half_i(int j) const;
  const BlockOperator& t_op_i(int j) const;
  const BlockOperator& t_inv_i(int j) const;
  const Mat& r_inf_plus_i(int j) const;
  const Mat& r_inf_minus_i(int j) const;
  const BlockOperator& h_ad_i(int j) const;
  const Mat& eps_plus_i(int j) const;
  const Mat& eps_minus_i(int j) const;
  const BlockOperator& v_ad_i(int j) const;
  Mat d_t(const std::function<const Mat&(int)>& f, int j) const;

  ReducedModel reduced_;
  TimeGrid tg_;
  int refine_;
  std::shared_ptr<Cache> cache_;
};

DiagonalizationBundle diagonalization_bundle(const ReducedModel& reduced,
                                             const TimeGrid& tg,
                                             int refine = 0);

// ---------------------------------------------------------------------------
// Evolutions

enum class Flavor { Full, Ad, Diag, Free };

// Closed-form evolution exp(i (t-s) [[0, 1], [a, 0]]) of a time-independent
// positive weighted-self-adjoint spatial operator, evaluated through one
// eigendecomposition in the flattened frame; exact for every (t, s).
class FreeEvolution {
 public:
  explicit FreeEvolution(const GridOperator& a);

  const SpatialGrid& grid() const { return *grid_; }
  Mat matrix(Real t, Real s) const;
  Vec apply(Real s, Real t, const Vec& state) const;

 private:
  const SpatialGrid* grid_;
  RealVec sq_, sqinv_;  // sqrt density and its reciprocal
  Mat vec_;             // flat-frame eigenvectors
  RealVec omega_;       // sqrt of the eigenvalues
};

struct StepperOptions {
  int substeps = 0;  // 0 -> default (1); raise to refine within lattice steps
};

// Time stepping for all four flavors with lazily cached ladder columns
// U(t_j, 0) and U(0, t_j). All steppers work in the frame conjugated by
// rho(t)^{1/2}, where the step factors are exactly pairing-unitary, so the
// discrete conservation laws hold to roundoff:
//   Full: Strang split K(dt/2) W(dt) K(dt/2) of [[-ir/2, 1], [a_check, ir/2]]
//         with all coefficients frozen at the substep midpoint.
//   Ad:   per-step conjugation T^{-1}(t_{j+1}) U_step T(t_j) of the full step.
//   Diag: exp(i dt diag(eps+, eps-)) with hermitized midpoint blocks.
//   Free: closed-form mode evolution, exact for every (t, s).
class EvolutionTable {
 public:
  EvolutionTable(Flavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
                 std::shared_ptr<const DiagonalizationBundle> bundle = nullptr,
                 StepperOptions options = {});

  Flavor flavor() const { return flavor_; }
  const TimeGrid& tg() const { return tg_; }
  const ReducedModel& reduced() const { return reduced_; }
  const SpatialGrid& grid() const;
  int substeps() const { return substeps_; }

  // U(t_{j+1}, t_j) as a dense matrix, and its inverse U(t_j, t_{j+1}) built
  // from the exactly inverted step factors (not a numerical inverse).
  Mat step_matrix(int j) const;
  Mat step_matrix_inverse(int j) const;
  // Stream a state from lattice time s to lattice time t (indices).
  Vec apply(int j_from, int j_to, Vec state) const;
  Vec apply(Real s, Real t, Vec state) const;
  // Cached ladder columns.
  const Mat& column(int j) const;      // U(t_j, 0)
  const Mat& column_rev(int j) const;  // U(0, t_j)
  // U(t, s) assembled from the cached columns.
  Mat matrix(Real t, Real s) const;

 private:
  struct Step;  // factor bundle for one substep
  Step make_step(Real t_mid, Real dt) const;
  void apply_step_inplace(const Step& s, Mat& m, bool from_left) const;
  void advance(Mat& m, int step_idx, bool inverse, bool from_left) const;
  RealVec sqrt_density(Real t) const;

  Flavor flavor_;
  ReducedModel reduced_;
  TimeGrid tg_;
  std::shared_ptr<const DiagonalizationBundle> bundle_;
  std::shared_ptr<FreeEvolution> free_;
  int substeps_;
  mutable std::map<int, Mat> fwd_, bwd_;
};

// One-shot evolution of a two-component state (2n vector) from time s to t.
Vec evolve(Flavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
           Real s, Real t, const Vec& state,
           std::shared_ptr<const DiagonalizationBundle> bundle = nullptr,
           StepperOptions options = {});

// ---------------------------------------------------------------------------
// Space-time fields and the inhomogeneous solver

// Coordinate frame a sampled field lives in: the reduced model's chart and
// conformal scaling, or the original spacetime coordinates reached from it
// by the chart relabeling and conformal factors.
enum class Frame { Model, Original };

// Field sampled on the slab lattice: two-component states (size 2n) or
// scalar samples (size n) per lattice time, depending on which operator
// produced it.
struct SpacetimeField {
  std::shared_ptr<const SpatialGrid> grid;
  TimeGrid tg;
  std::vector<Vec> states;
  Frame frame = Frame::Model;

  int n() const { return grid->n(); }
  Vec head(int j) const { return states[j].head(n()); }   // u(t_j)
  Vec tail(int j) const { return states[j].tail(n()); }   // i^{-1} d_t u(t_j)
};

// Weighted space-time norm sqrt( sum_j <t_j>^{-2 gamma} dt |<D>^m f_j|^2 )
// of a scalar sample family (n per time).
Real ym_norm(const std::vector<Vec>& samples, const TimeGrid& tg,
             const SpatialGrid& grid, Real sobolev_index);

// Discrete model operator applied to a stored field:
// (P u)_j = i D_t(u1)_j + i r(t_j) u1_j + a(t_j) u0_j, with fourth-order
// centered time differences in the interior (lower order within two points
// of the ends; compare on the interior).
std::vector<Vec> apply_model_operator(const ReducedModel& reduced,
                                      const SpacetimeField& field);

// Duhamel solution of (d_t - iH) z = -i pi_1^* f from data z(0) = v,
// trapezoid quadrature on the lattice, streamed forward and backward from 0.
SpacetimeField solve_inhomogeneous(const ReducedModel& reduced,
                                   const TimeGrid& tg, const CauchyDatum& v,
                                   const std::function<Vec(Real)>& f,
                                   StepperOptions options = {});

}  // namespace kgscat
