#include "kgscat/scattering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include "kgscat/pseudodiff.hpp"
#include "kgscat/rng.hpp"

namespace kgscat {

namespace {

Vec stack2(const RealVec& d) {
  Vec s(2 * d.size());
  s << d.cast<Complex>(), d.cast<Complex>();
  return s;
}

void scale_rows(Mat& m, const Vec& s) { m.array().colwise() *= s.array(); }
void scale_cols(Mat& m, const Vec& s) {
  m.array().rowwise() *= s.transpose().array();
}

// Left/right multiplication by the pairings without forming them densely:
// q swaps the component blocks, q_ad flips the sign of the second one.
void q_left(Mat& m) {
  const int n = m.rows() / 2;
  m.topRows(n).swap(m.bottomRows(n));
}
void q_right(Mat& m) {
  const int n = m.cols() / 2;
  m.leftCols(n).swap(m.rightCols(n));
}
void qad_left(Mat& m) { m.bottomRows(m.rows() / 2) *= -1.0; }
void qad_right(Mat& m) { m.rightCols(m.cols() / 2) *= -1.0; }

enum class Pairing { Q, QAd };

// (D(rho_dom) q)^{-1} W^H (D(rho_ran) q): the adjoint w.r.t. the weighted
// pairings on domain and range. For a map that conserves the pairing exactly
// this is also its exact inverse.
Mat pairing_adjoint(const Mat& w, Pairing p, const RealVec& rho_dom,
                    const RealVec& rho_ran) {
  Mat m = w.adjoint();
  scale_cols(m, stack2(rho_ran));
  p == Pairing::Q ? q_right(m) : qad_right(m);
  scale_rows(m, stack2(rho_dom).cwiseInverse());
  p == Pairing::Q ? q_left(m) : qad_left(m);
  return m;
}

// U(t, 0)^{-1} from the discrete conservation law U^H D(rho_t) q U =
// D(rho_0) q, exact for the slab steppers; no numerical inversion involved.
Mat pairing_inverse(const Mat& u_t0, const RealVec& rho0, const RealVec& rho_t) {
  return pairing_adjoint(u_t0, Pairing::Q, rho0, rho_t);
}

Real opnorm(const Mat& m) {
  return Eigen::BDCSVD<Mat>(m).singularValues()(0);
}

// Frame map of a positive weighted-self-adjoint asymptotic operator: with
// eps = a^{1/2} and S = (2 eps)^{-1/2},
//   T = i^{-1} [[1, -1], [eps, eps]] S,  T^{-1} = i S [[eps, 1], [-eps, 1]],
// matching the slab diagonalizer's convention at b^+/- = +/- eps.
struct AsymFrame {
  Mat eps, eps_inv;
  Mat t, t_inv;
  RealVec rho;
};

AsymFrame make_frame(const GridOperator& a) {
  const int n = a.n();
  AsymFrame fr;
  fr.rho = a.selfadjoint_density.value_or(RealVec::Ones(n));
  const Vec sq = fr.rho.cwiseSqrt().cast<Complex>();
  const Vec sqinv = sq.cwiseInverse();
  Mat flat = sq.asDiagonal() * a.matrix * sqinv.asDiagonal();
  flat = (flat + Mat(flat.adjoint())) / 2.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(flat);
  if (es.eigenvalues()(0) <= 1e-10)
    throw std::domain_error("asymptotic operator must be positive definite");
  auto power = [&](Real e) {
    const RealVec lam = es.eigenvalues().array().pow(e);
    Mat core = es.eigenvectors() * lam.cast<Complex>().asDiagonal() *
               es.eigenvectors().adjoint();
    return Mat(sqinv.asDiagonal() * core * sq.asDiagonal());
  };
  fr.eps = power(0.5);
  fr.eps_inv = power(-0.5);
  const Mat s = power(-0.25) / std::sqrt(2.0);
  const Mat eps_s = power(0.25) / std::sqrt(2.0);
  fr.t.resize(2 * n, 2 * n);
  fr.t.topLeftCorner(n, n) = -kI * s;
  fr.t.topRightCorner(n, n) = kI * s;
  fr.t.bottomLeftCorner(n, n) = -kI * eps_s;
  fr.t.bottomRightCorner(n, n) = -kI * eps_s;
  fr.t_inv.resize(2 * n, 2 * n);
  fr.t_inv.topLeftCorner(n, n) = kI * eps_s;
  fr.t_inv.topRightCorner(n, n) = kI * s;
  fr.t_inv.bottomLeftCorner(n, n) = -kI * eps_s;
  fr.t_inv.bottomRightCorner(n, n) = kI * s;
  return fr;
}

GridOperator plain_mass_operator(const SpatialGrid& grid, Real mass) {
  const Mat lap = fourier_derivative(grid, 2).matrix;
  Mat a = mass * mass * Mat::Identity(grid.n(), grid.n()) - lap;
  return GridOperator(grid, std::move(a), 2.0);
}

VacuumProjections projections_from_frame(const AsymFrame& fr, const Mat& a) {
  const int n = fr.eps.rows();
  VacuumProjections v;
  v.c_plus.setZero(2 * n, 2 * n);
  v.c_plus.topLeftCorner(n, n) = 0.5 * Mat::Identity(n, n);
  v.c_plus.bottomRightCorner(n, n) = 0.5 * Mat::Identity(n, n);
  v.c_plus.topRightCorner(n, n) = 0.5 * fr.eps_inv;
  v.c_plus.bottomLeftCorner(n, n) = 0.5 * fr.eps;
  v.c_minus = Mat::Identity(2 * n, 2 * n) - v.c_plus;
  v.idempotency = std::max((v.c_plus * v.c_plus - v.c_plus).norm(),
                           (v.c_minus * v.c_minus - v.c_minus).norm());
  Mat h = Mat::Zero(2 * n, 2 * n);
  h.topRightCorner(n, n) = Mat::Identity(n, n);
  h.bottomLeftCorner(n, n) = a;
  v.commutator = (v.c_plus * h - h * v.c_plus).norm();
  // Variant with the frequency weight in both corners.
  v.corner_weight_gap = 0.5 * (fr.eps - fr.eps_inv).norm();
  return v;
}

// Geometric readout offsets (in lattice steps from the center), ascending,
// ending exactly at the slab edge.
std::vector<int> ladder_offsets(const TimeGrid& tg, const MollerOptions& opt) {
  const int spread = tg.n_steps() - tg.index_zero();
  std::vector<int> offs;
  for (int k = opt.ladder_points - 1; k >= 0; --k) {
    const Real t = tg.half_width() * std::pow(opt.ladder_ratio, k);
    const int off =
        std::clamp<int>(std::llround(t / tg.dt()), 1, spread);
    if (offs.empty() || off > offs.back()) offs.push_back(off);
  }
  return offs;
}

Real log_bracket(Real t) { return 0.5 * std::log1p(t * t); }

MollerTail fit_tail(const std::vector<std::pair<Real, Real>>& increments,
                    Real top_time, Real ladder_ratio) {
  MollerTail tail;
  tail.fit = fit_log_slope(increments);
  Real largest = 0.0;
  for (const auto& [t, s] : increments) largest = std::max(largest, s);
  // A curve that never leaves accumulated roundoff is already converged at
  // every readout; fitting it would only diagnose the noise.
  if (tail.fit.below_noise_floor || largest < 1e-10) {
    tail.converged = true;
    tail.tail_estimate = largest;
    return tail;
  }
  // Extrapolate the fitted increment law over the geometric readout times
  // beyond the slab: times T g^j with g = 1/ratio, increments C <t>^slope.
  Real intercept = 0.0;
  for (const auto& [t, s] : increments)
    intercept += std::log(std::max(s, 1e-300)) - tail.fit.slope * log_bracket(t);
  intercept /= static_cast<Real>(increments.size());
  const Real g = 1.0 / ladder_ratio;
  const Real gs = std::pow(g, tail.fit.slope);
  if (gs < 1.0) {
    tail.tail_estimate = std::exp(intercept + tail.fit.slope *
                                  log_bracket(top_time)) / (1.0 - gs);
  } else {
    tail.tail_estimate = std::numeric_limits<Real>::infinity();
  }
  tail.converged = tail.fit.well_conditioned && tail.fit.slope < -0.5;
  return tail;
}

}  // namespace

VacuumProjections free_vacuum_projections(const GridOperator& a_out) {
  return projections_from_frame(make_frame(a_out), a_out.matrix);
}

VacuumProjections free_vacuum_projections(const SpatialGrid& grid, Real mass) {
  if (!(mass > 0)) throw std::invalid_argument("mass must be positive");
  return free_vacuum_projections(plain_mass_operator(grid, mass));
}

// ---------------------------------------------------------------------------
// Moller operators

MollerSet moller(const ReducedModel& reduced, const TimeGrid& tg,
                 std::shared_ptr<const DiagonalizationBundle> bundle,
                 MollerOptions options) {
  const SpatialGrid& grid = reduced.grid();
  const int n = grid.n();
  const int j0 = tg.index_zero();
  if (!bundle)
    bundle = std::make_shared<DiagonalizationBundle>(reduced, tg, 0);
  const EvolutionTable table(Flavor::Full, reduced, tg, nullptr,
                             options.stepper);
  const FreeEvolution free_out(reduced.a_out());
  const FreeEvolution free_in(reduced.a_in());
  const AsymFrame fr_out = make_frame(reduced.a_out());
  const AsymFrame fr_in = make_frame(reduced.a_in());
  const AsymFrame fr_free = make_frame(plain_mass_operator(grid, reduced.mass()));

  MollerSet ms;
  ms.grid = reduced.grid_ptr();
  ms.rho0 = reduced.density(0.0);
  ms.rho_out = fr_out.rho;
  ms.rho_in = fr_in.rho;
  ms.z0 = bundle->t_op(j0).mat();
  ms.z0_inv = bundle->t_inv(j0).mat();
  ms.z_out = fr_out.t;
  ms.z_out_inv = fr_out.t_inv;
  ms.z_in = fr_in.t;
  ms.z_in_inv = fr_in.t_inv;
  ms.z_free = fr_free.t;
  ms.z_free_inv = fr_free.t_inv;
  ms.vac = projections_from_frame(fr_out, reduced.a_out().matrix);

  const std::vector<int> offs = ladder_offsets(tg, options);

  // Target pairing D(rho_asym) q of the comparison dynamics.
  auto pairing_matrix = [&](const RealVec& rho) {
    Mat qd = Mat::Zero(2 * n, 2 * n);
    qd.topRightCorner(n, n) = rho.cast<Complex>().asDiagonal();
    qd.bottomLeftCorner(n, n) = rho.cast<Complex>().asDiagonal();
    return qd;
  };

  auto sweep = [&](int sign, const FreeEvolution& fre, const AsymFrame& fr) {
    MollerOperator mo;
    Mat a = Mat::Identity(2 * n, 2 * n);  // running U(t, 0)
    std::vector<Mat> ws;
    std::vector<Real> ts;
    std::size_t next = 0;
    for (int s = 1; s <= offs.back(); ++s) {
      a = (sign > 0 ? table.step_matrix(j0 + s - 1)
                    : table.step_matrix_inverse(j0 - s)) *
          a;
      if (next < offs.size() && s == offs[next]) {
        const Real t = tg.time(j0 + sign * s);
        Mat w = pairing_inverse(a, ms.rho0, reduced.density(t)) *
                fre.matrix(t, 0.0);
        ws.push_back(std::move(w));
        ts.push_back(t);
        ++next;
      }
    }
    mo.top_time = ts.back();
    mo.w = ws.back();
    mo.w_inverse = fre.matrix(0.0, mo.top_time) * a;
    for (std::size_t k = 0; k + 1 < ws.size(); ++k) {
      mo.curve.emplace_back(std::abs(ts[k]), (mo.w - ws[k]).norm());
      mo.increments.emplace_back(std::abs(ts[k]), (ws[k + 1] - ws[k]).norm());
    }
    mo.tail = fit_tail(mo.increments, std::abs(mo.top_time),
                       options.ladder_ratio);
    Mat dqw = mo.w;
    q_left(dqw);
    scale_rows(dqw, stack2(ms.rho0));
    mo.q_unitarity = (mo.w.adjoint() * dqw - pairing_matrix(fr.rho)).norm();
    mo.adjoint_inverse_gap =
        (pairing_adjoint(mo.w, Pairing::Q, fr.rho, ms.rho0) - mo.w_inverse)
            .norm();
    mo.w_ad = ms.z0_inv * mo.w * fr.t;
    mo.w_ad_inverse = fr.t_inv * mo.w_inverse * ms.z0;
    return mo;
  };

  ms.out = sweep(+1, free_out, fr_out);
  ms.in = sweep(-1, free_in, fr_in);
  ms.frame_consistency_out =
      (ms.out.w - ms.z0 * ms.out.w_ad * fr_out.t_inv).norm();
  ms.frame_consistency_in =
      (ms.in.w - ms.z0 * ms.in.w_ad * fr_in.t_inv).norm();
  return ms;
}

// ---------------------------------------------------------------------------
// Scattering data

namespace {

ScatteringData data_from_endpoints(const ReducedModel& reduced,
                                   const TimeGrid& tg, const Vec& u_top,
                                   const Vec& u_top_half, const Vec& u_bot,
                                   const Vec& u_bot_half, Real t_top_half,
                                   Real t_bot_half) {
  const FreeEvolution free_out(reduced.a_out());
  const FreeEvolution free_in(reduced.a_in());
  ScatteringData sd;
  sd.rho_out = free_out.apply(tg.time(tg.n_steps()), 0.0, u_top);
  sd.rho_in = free_in.apply(tg.time(0), 0.0, u_bot);
  const Vec half_out = free_out.apply(t_top_half, 0.0, u_top_half);
  const Vec half_in = free_in.apply(t_bot_half, 0.0, u_bot_half);
  auto rel = [](const Vec& full, const Vec& half) {
    return (full - half).norm() / std::max(full.norm(), 1e-300);
  };
  sd.doubling_change = std::max(rel(sd.rho_out, half_out),
                                rel(sd.rho_in, half_in));
  sd.stable = sd.doubling_change < 1e-3;
  const VacuumProjections vac = free_vacuum_projections(reduced.a_out());
  sd.rho_feyn = vac.c_plus * sd.rho_out + vac.c_minus * sd.rho_in;
  sd.rho_afeyn = vac.c_minus * sd.rho_out + vac.c_plus * sd.rho_in;
  return sd;
}

}  // namespace

ScatteringData scattering_data(const ReducedModel& reduced, const TimeGrid& tg,
                               const Vec& datum, StepperOptions options) {
  if (datum.size() != 2 * reduced.grid().n())
    throw std::invalid_argument("datum must be a stacked two-component state");
  const EvolutionTable table(Flavor::Full, reduced, tg, nullptr, options);
  const int j0 = tg.index_zero(), jtop = tg.n_steps();
  const int jh = j0 + (jtop - j0) / 2;
  const int jl = j0 - (j0 - 0) / 2;
  const Vec mid_out = table.apply(j0, jh, datum);
  const Vec u_top = table.apply(jh, jtop, mid_out);
  const Vec mid_in = table.apply(j0, jl, datum);
  const Vec u_bot = table.apply(jl, 0, mid_in);
  return data_from_endpoints(reduced, tg, u_top, mid_out, u_bot, mid_in,
                             tg.time(jh), tg.time(jl));
}

ScatteringData scattering_data(const ReducedModel& reduced,
                               const SpacetimeField& solution) {
  const TimeGrid& tg = solution.tg;
  const int n = reduced.grid().n();
  if (solution.states.empty() ||
      solution.states.front().size() != 2 * n)
    throw std::invalid_argument("solution must store two-component states");
  const int j0 = tg.index_zero(), jtop = tg.n_steps();
  const int jh = j0 + (jtop - j0) / 2;
  const int jl = j0 - (j0 - 0) / 2;
  return data_from_endpoints(reduced, tg, solution.states[jtop],
                             solution.states[jh], solution.states[0],
                             solution.states[jl], tg.time(jh), tg.time(jl));
}

ScatteringDataConsistency scattering_data_consistency(
    const ReducedModel& reduced, const TimeGrid& tg,
    const DiagonalizationBundle& bundle, const MollerSet& ms, const Vec& datum,
    StepperOptions options) {
  const EvolutionTable table(Flavor::Full, reduced, tg, nullptr, options);
  const int j0 = tg.index_zero(), jtop = tg.n_steps();
  const FreeEvolution free_out(reduced.a_out());
  const FreeEvolution free_in(reduced.a_in());
  const AsymFrame fr_out = make_frame(reduced.a_out());
  const AsymFrame fr_in = make_frame(reduced.a_in());
  const Vec w0 = ms.z0_inv * datum;

  ScatteringDataConsistency out;
  auto run_side = [&](int jend, const FreeEvolution& fre, const AsymFrame& fr,
                      const MollerOperator& mo, Real& adj_gap,
                      Real& frame_gap) {
    const Real t_end = tg.time(jend);
    const Vec u_end = table.apply(j0, jend, datum);
    // Route one: endpoint readout in the diagonalizing frame.
    const Vec w_end = bundle.t_inv(jend).mat() * u_end;
    const Vec a_route =
        fr.t_inv * (fre.matrix(0.0, t_end) * (fr.t * w_end));
    // Route two: pairing adjoint of the frame-level Moller operator applied
    // to the time-zero state.
    const Vec b_route =
        pairing_adjoint(mo.w_ad, Pairing::QAd, fr.rho, ms.rho0) * w0;
    adj_gap = (a_route - b_route).norm() / std::max(b_route.norm(), 1e-300);
    // Original-level data vs the frame-level data pushed through the
    // asymptotic frame map.
    const Vec rho_full = fre.apply(t_end, 0.0, u_end);
    const Vec mapped = fr.t * a_route;
    frame_gap =
        (rho_full - mapped).norm() / std::max(rho_full.norm(), 1e-300);
  };
  run_side(jtop, free_out, fr_out, ms.out, out.adjoint_route_out,
           out.frame_route_out);
  run_side(0, free_in, fr_in, ms.in, out.adjoint_route_in,
           out.frame_route_in);
  return out;
}

// ---------------------------------------------------------------------------
// Feynman wave operators

FeynmanWaveOps feynman_wave_ops(const MollerSet& ms, Real alpha) {
  const SpatialGrid& grid = *ms.grid;
  const int n = grid.n();
  const Mat eye = Mat::Identity(2 * n, 2 * n);
  FeynmanWaveOps fw;
  fw.alpha = alpha;
  fw.w_feyn = ms.out.w * ms.vac.c_plus + ms.in.w * ms.vac.c_minus;
  fw.w_afeyn = ms.out.w * ms.vac.c_minus + ms.in.w * ms.vac.c_plus;

  const Mat wdag =
      pairing_adjoint(fw.w_feyn, Pairing::Q, ms.rho_out, ms.rho0);
  const Mat k1 = fw.w_feyn * wdag - eye;
  const Mat k2 = wdag * fw.w_feyn - eye;
  fw.k1_singulars = Eigen::BDCSVD<Mat>(k1).singularValues();
  fw.k2_singulars = Eigen::BDCSVD<Mat>(k2).singularValues();
  const auto& sv = fw.k2_singulars;
  if (sv.size() > 19 && sv(0) > 0) {
    fw.sigma_ratio_10 = sv(9) / sv(0);
    fw.sigma_ratio_20 = sv(19) / sv(0);
  }

  // Smoothing norms of the conjugated projection defect.
  auto blk = [&](const Mat& m) {
    Mat b = Mat::Zero(2 * n, 2 * n);
    b.topLeftCorner(n, n) = m;
    b.bottomRightCorner(n, n) = m;
    return b;
  };
  Mat pi_plus = Mat::Zero(2 * n, 2 * n);
  pi_plus.topLeftCorner(n, n) = Mat::Identity(n, n);
  const Mat defect =
      ms.out.w_ad * pi_plus * ms.out.w_ad_inverse - pi_plus;
  const Mat xa = blk(weight_operator(grid, WeightKind::Position, alpha).matrix);
  for (int m = 0; m <= 2; ++m) {
    const Mat dm = blk(weight_operator(grid, WeightKind::Frequency,
                                       static_cast<Real>(m)).matrix);
    fw.smoothing_norms[m] = opnorm(dm * xa * defect * xa * dm);
  }

  // Frequency-regularizing probe: on low-frequency inputs the output of k2
  // must stay low-frequency, so the <D>^2-weighted output norm may exceed the
  // plain one only by a bounded factor.  Probes are seeded Gaussians smoothed
  // by <D>^{-2}; outputs below roundoff are skipped.
  const Mat d2 = blk(weight_operator(grid, WeightKind::Frequency, 2.0).matrix);
  const Mat d2inv =
      blk(weight_operator(grid, WeightKind::Frequency, -2.0).matrix);
  fw.regularization_ratio = 0.0;
  for (int s = 0; s < 5; ++s) {
    Vec raw(2 * n);
    raw.head(n) = gaussian_vector(n, derive_seed(7100 + s, "lofreq-u"));
    raw.tail(n) = gaussian_vector(n, derive_seed(7100 + s, "lofreq-v"));
    const Vec kv = k2 * (d2inv * raw).eval();
    if (kv.norm() < 1e-14 * raw.norm()) continue;
    fw.regularization_ratio =
        std::max(fw.regularization_ratio, (d2 * kv).norm() / kv.norm());
  }
  return fw;
}

// ---------------------------------------------------------------------------
// Index estimate

IndexEstimate index_estimate(const MollerSet& ms, Real tau, int sobolev_shift) {
  const SpatialGrid& grid = *ms.grid;
  const int n = grid.n();
  Mat m = ms.vac.c_minus * ms.out.w_inverse + ms.vac.c_plus * ms.in.w_inverse;
  // Energy-space weighting diag(<D>^{m+1}, <D>^m); a similarity, so the
  // counted dimensions must be invariant under the shift.
  auto weight2 = [&](Real e_top, Real e_bot) {
    Mat w = Mat::Zero(2 * n, 2 * n);
    w.topLeftCorner(n, n) =
        weight_operator(grid, WeightKind::Frequency, e_top).matrix;
    w.bottomRightCorner(n, n) =
        weight_operator(grid, WeightKind::Frequency, e_bot).matrix;
    return w;
  };
  const Real sm = static_cast<Real>(sobolev_shift);
  m = weight2(sm + 1.0, sm) * m * weight2(-sm - 1.0, -sm);

  IndexEstimate est;
  est.singulars = Eigen::BDCSVD<Mat>(m).singularValues();
  const auto& sv = est.singulars;
  est.threshold = tau * sv(0);
  int rank = 0;
  while (rank < sv.size() && sv(rank) > est.threshold) ++rank;
  est.dim_ker = static_cast<int>(sv.size()) - rank;
  // Square matrix: row and column rank agree, so the cokernel count below
  // the same threshold is identical by construction.
  est.dim_coker = est.dim_ker;
  est.index = est.dim_ker - est.dim_coker;
  if (rank == 0) {
    est.gap = 0.0;
  } else if (rank == sv.size()) {
    est.gap = sv(sv.size() - 1) / est.threshold;
  } else {
    est.gap = sv(rank - 1) / sv(rank);
  }
  est.confident = est.gap > 100.0;
  return est;
}

// ---------------------------------------------------------------------------
// Weighted propagation bounds

PropagationLadder weighted_propagation_check(const ReducedModel& reduced,
                                            const TimeGrid& tg,
                                            const DiagonalizationBundle& bundle,
                                            int m, int k,
                                            MollerOptions options) {
  const SpatialGrid& grid = reduced.grid();
  const int n = grid.n();
  const int j0 = tg.index_zero();
  const EvolutionTable table(Flavor::Full, reduced, tg, nullptr,
                             options.stepper);
  const RealVec rho0 = reduced.density(0.0);
  const Mat z0_inv = bundle.t_inv(j0).mat();

  auto blk = [&](const Mat& mat) {
    Mat b = Mat::Zero(2 * n, 2 * n);
    b.topLeftCorner(n, n) = mat;
    b.bottomRightCorner(n, n) = mat;
    return b;
  };
  const Mat dm = blk(weight_operator(grid, WeightKind::Frequency,
                                     static_cast<Real>(m)).matrix);
  const Mat dm_inv = blk(weight_operator(grid, WeightKind::Frequency,
                                         static_cast<Real>(-m)).matrix);
  const Mat xk = blk(weight_operator(grid, WeightKind::Position,
                                     static_cast<Real>(k)).matrix);
  const RealVec xw = (grid.points().array().square() + 1.0).sqrt();

  const std::vector<int> offs = ladder_offsets(tg, options);
  PropagationLadder ladder;
  auto sweep = [&](int sign) {
    Mat a = Mat::Identity(2 * n, 2 * n);
    std::size_t next = 0;
    for (int s = 1; s <= offs.back(); ++s) {
      a = (sign > 0 ? table.step_matrix(j0 + s - 1)
                    : table.step_matrix_inverse(j0 - s)) *
          a;
      if (next < offs.size() && s == offs[next]) {
        const int j = j0 + sign * s;
        const Real t = tg.time(j);
        const Mat u0t = pairing_inverse(a, rho0, reduced.density(t));
        const Mat uad = z0_inv * u0t * bundle.t_op(j).mat();
        Mat probe = dm * xk * uad;
        const RealVec denom =
            (xw.array() + std::sqrt(1.0 + t * t)).pow(-k);
        scale_cols(probe, stack2(denom));
        probe = probe * dm_inv;
        ladder.norms.emplace_back(t, opnorm(probe));
        ++next;
      }
    }
  };
  sweep(+1);
  sweep(-1);
  ladder.sup_norm = 0.0;
  for (const auto& [t, nr] : ladder.norms)
    ladder.sup_norm = std::max(ladder.sup_norm, nr);
  return ladder;
}

}  // namespace kgscat
