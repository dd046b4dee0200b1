#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgscat/grid.hpp"
#include "kgscat/pseudodiff.hpp"

namespace kgscat {

// Lorentzian surface metric g = g_tt dt^2 + 2 g_tx dt dx + g_xx dx^2 with a
// potential V, mass m, and claimed decay rate delta of (g - eta, V - m^2).
// The time function defaults to t itself.
struct MetricModel {
  std::string name;
  std::function<Real(Real, Real)> g_tt, g_tx, g_xx, V;
  Real m = 1.0;
  Real delta = 1.5;

  Real det(Real t, Real x) const {
    const Real gtx = g_tx(t, x);
    return g_tt(t, x) * g_xx(t, x) - gtx * gtx;
  }
  // Squared lapse of the zero-shift form reached by the reduction chart.
  Real lapse2(Real t, Real x) const { return -det(t, x) / g_xx(t, x); }
  // Spatial velocity of the chart flow field (unit time component).
  Real flow_vx(Real t, Real x) const { return -g_tx(t, x) / g_xx(t, x); }
};

// Named presets: "free", "bump12", "bump15", "bump20", "cross15", "lapse15",
// and the deliberately broken "sigflip".
MetricModel preset_model(const std::string& name);
std::vector<std::string> preset_names();

// Metric from a JSON object {m, delta, g_tt, g_tx, g_xx, V} whose coefficient
// entries are expression strings in t and x.
MetricModel model_from_json(const nlohmann::json& spec);

// ---------------------------------------------------------------------------
// Validation

struct ValidationOptions {
  Real t_extent = 40.0;
  Real x_extent = 40.0;
  int samples = 64;            // per axis for pointwise clauses
  Real window_radius = 20.0;   // |x| window for the decay fit
  std::vector<Real> times;     // decay-fit times; empty -> default ladder
};

struct ValidationReport {
  bool signature_ok = false;
  bool time_function_ok = false;
  bool decay_ok = false;
  std::vector<std::pair<Real, Real>> signature_failures;  // sampled (t, x)
  std::vector<std::pair<Real, Real>> time_function_failures;
  DecayFit metric_decay;
  DecayFit potential_decay;

  bool passed() const { return signature_ok && time_function_ok && decay_ok; }
  std::string summary() const;
  nlohmann::json to_json() const;
};

ValidationReport validate_am(const MetricModel& model,
                             const ValidationOptions& options = {});

// ---------------------------------------------------------------------------
// Null geodesics

struct NullInit {
  Real t = 0.0, x = 0.0;
  Real tau = 1.0, k = 1.0;  // covector components; tau is re-solved so p = 0
};

struct GeodesicTrace {
  std::vector<Real> s, t, x, tau, k, p;
  bool trapped = false;
  Real max_abs_p = 0.0;  // relative to |xi|^2
  Real max_abs_x = 0.0;
};

// Hamiltonian flow of p(y, xi) = xi . g^{-1}(y) xi by classical RK4; the
// initial tau is projected onto the characteristic set. Throws
// std::runtime_error when |p| drifts beyond 1e-6 relative.
GeodesicTrace null_geodesic_trace(const MetricModel& model, NullInit init,
                                  Real s_max, Real step = 0.002,
                                  Real escape_radius = 20.0);

// ---------------------------------------------------------------------------
// Reduction chart

struct FlowOptions {
  Real step = 0.005;       // RK4 step for fiber integration
  Real snap_every = 0.25;  // snapshot spacing along t
  Real t_max = 60.0;       // initial slab half-depth
};

// Integral curves of the field v = (1, -g_tx/g_xx) from the t = 0 slice, one
// fiber per grid point, with the variational factor J = d(chart)/dx0 carried
// along. Slices at arbitrary times are reached from the nearest stored slice
// and cached; the table extends itself on demand.
class ChartFlow {
 public:
  struct Slice {
    RealVec y;  // chart positions of the grid fibers
    RealVec j;  // fiber derivative d y / d x0
  };

  ChartFlow(MetricModel model, std::shared_ptr<const SpatialGrid> grid,
            FlowOptions options = {});

  const Slice& slice(Real t) const;
  void ensure(Real t_abs) const;
  // Single off-lattice fiber from (0, x0) to time t: returns (y, J).
  std::pair<Real, Real> fiber(Real x0, Real t) const;

  const MetricModel& model() const { return model_; }
  const SpatialGrid& grid() const { return *grid_; }
  std::shared_ptr<const SpatialGrid> grid_ptr() const { return grid_; }
  const FlowOptions& options() const { return options_; }

 private:
  Slice advance(Slice slice, Real t_from, Real t_to) const;

  MetricModel model_;
  std::shared_ptr<const SpatialGrid> grid_;
  FlowOptions options_;
  mutable std::map<long long, Slice> slices_;  // key: round(t * 1e9)
  mutable Real built_to_pos_ = 0.0, built_to_neg_ = 0.0;
};

std::shared_ptr<ChartFlow> flow_chart(const MetricModel& model,
                                      std::shared_ptr<const SpatialGrid> grid,
                                      FlowOptions options = {});

// ---------------------------------------------------------------------------
// Asymptotic data

struct AsymptoticDiffeos {
  RealVec y_out, y_in;        // limits of the chart positions
  RealVec hhat_out, hhat_in;  // limits of the reduced spatial metric
  GridOperator a_out, a_in;   // pullback flat operators -Lap_h + m^2
  Real convergence_out = 0.0, convergence_in = 0.0;  // last extrapolant move
  std::vector<Real> ladder;
};

// Limits along the chart at the ladder times with Richardson extrapolation of
// known tail exponent delta; throws std::runtime_error when successive
// extrapolants still differ by more than 1e-4.
AsymptoticDiffeos asymptotic_diffeos(const ChartFlow& chart,
                                     std::vector<Real> ladder = {});

// ---------------------------------------------------------------------------
// Reduced model

struct ReduceOptions {
  FlowOptions flow;
  Real fd_time_step = 1e-3;  // stencil width for time derivatives
};

// Coefficients of the model form d_t^2 + r d_t + a(t) obtained from the
// chart pullback and the conformal rescaling by the squared lapse. The
// conserved density is rho = chat^3 * sqrt(hhat); a(t) is assembled in
// manifestly rho-symmetric divergence form and then exactly symmetrized
// (correction norm recorded).
class ReducedModel {
 public:
  const SpatialGrid& grid() const;
  std::shared_ptr<const SpatialGrid> grid_ptr() const;
  const MetricModel& model() const;
  const ChartFlow& chart() const;
  int conformal_exponent() const { return 2; }
  Real mass() const;
  Real decay() const;

  RealVec lapse2(Real t) const;          // chat^2
  RealVec spatial_metric(Real t) const;  // hhat
  RealVec potential(Real t) const;       // Vhat
  RealVec density(Real t) const;         // rho
  RealVec damping(Real t) const;         // r = d_t log rho
  const GridOperator& spatial_op(Real t) const;

  const AsymptoticDiffeos& asymptotics() const;
  const GridOperator& a_out() const;
  const GridOperator& a_in() const;

  Real symmetrization_correction() const;  // largest correction applied
  Real positivity_margin() const;          // smallest eigenvalue seen
  Real spectral_shift() const;             // nonzero only if fallback fired

  OperatorFamily a_family() const;
  OperatorFamily r_family() const;
  OperatorFamily density_family() const;

 private:
  friend ReducedModel reduce(const MetricModel&,
                             std::shared_ptr<const SpatialGrid>,
                             ReduceOptions);
  struct State;
  std::shared_ptr<State> state_;
};

ReducedModel reduce(const MetricModel& model,
                    std::shared_ptr<const SpatialGrid> grid,
                    ReduceOptions options = {});
ReducedModel reduce(const MetricModel& model, int n_points, Real box_length,
                    ReduceOptions options = {});

// ---------------------------------------------------------------------------
// Direct wave operator for consistency oracles

// (-Box_g + V) f at a point, via nested five-point finite differences on the
// closed-form input; no grid involved.
Complex apply_wave_operator_fd(const MetricModel& model,
                               const std::function<Complex(Real, Real)>& f,
                               Real t, Real x, Real h = 1e-3);

}  // namespace kgscat
