#include "kgscat/propagators.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>

#include "kgscat/rng.hpp"

namespace kgscat {

namespace {

// theta(t_j - s_k) with the trapezoid-consistent half weight on the diagonal.
Real theta(int j, int k) {
  if (j > k) return 1.0;
  return j == k ? 0.5 : 0.0;
}

// Global trapezoid weight of the slab quadrature (plain dt measure; the
// <t>^{-2 gamma} weights belong to norms, not to the propagator integrals).
Real trapezoid_weight(const TimeGrid& tg, int k) {
  return (k == 0 || k == tg.n_steps()) ? 0.5 * tg.dt() : tg.dt();
}

bool needs_bundle(PropFlavor f) {
  return f != PropFlavor::Retarded && f != PropFlavor::Advanced;
}

Flavor table_flavor(PropFlavor f) {
  switch (f) {
    case PropFlavor::Retarded:
    case PropFlavor::Advanced:
      return Flavor::Full;
    case PropFlavor::AdRetarded:
    case PropFlavor::AdAdvanced:
      return Flavor::Ad;
    default:
      return Flavor::Diag;
  }
}

Mat embed_pi1(const Mat& f) {
  Mat out = Mat::Zero(2 * f.rows(), f.cols());
  out.bottomRows(f.rows()) = f;
  return out;
}

std::vector<Mat> stack_fields(const std::vector<SpacetimeField>& fs,
                              const TimeGrid& tg) {
  if (fs.empty()) throw std::invalid_argument("empty source batch");
  const int n_times = tg.n_times();
  const auto rows = fs.front().states.at(0).size();
  std::vector<Mat> batch(n_times);
  for (int j = 0; j < n_times; ++j) {
    Mat m(rows, static_cast<int>(fs.size()));
    for (std::size_t s = 0; s < fs.size(); ++s) {
      if (static_cast<int>(fs[s].states.size()) != n_times ||
          fs[s].states[j].size() != rows)
        throw std::invalid_argument("source batch shapes disagree");
      m.col(static_cast<int>(s)) = fs[s].states[j];
    }
    batch[j] = std::move(m);
  }
  return batch;
}

std::vector<SpacetimeField> unstack_fields(
    std::vector<Mat> batch, const std::vector<SpacetimeField>& like) {
  std::vector<SpacetimeField> out;
  out.reserve(like.size());
  for (std::size_t s = 0; s < like.size(); ++s) {
    SpacetimeField field{like[s].grid, like[s].tg,
                         std::vector<Vec>(batch.size()), like[s].frame};
    for (std::size_t j = 0; j < batch.size(); ++j)
      field.states[j] = batch[j].col(static_cast<int>(s));
    out.push_back(std::move(field));
  }
  return out;
}

RealVec conformal_factor(const ReducedModel& reduced, Real t) {
  return reduced.lapse2(t).cwiseSqrt();
}

SpacetimeField scale_scalar_field(const ReducedModel& reduced,
                                  const SpacetimeField& f, Real exponent,
                                  Frame target) {
  if (!f.states.empty() && f.states.front().size() != f.grid->n())
    throw std::invalid_argument("frame transport expects scalar states");
  SpacetimeField out = f;
  out.frame = target;
  for (int j = 0; j < f.tg.n_times(); ++j) {
    const RealVec c = conformal_factor(reduced, f.tg.time(j));
    const Vec scale = c.array().pow(exponent).matrix().cast<Complex>();
    out.states[j] = f.states[j].cwiseProduct(scale);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// PropagatorKernel

PropagatorKernel::PropagatorKernel(
    PropFlavor flavor, PropLevel level, const ReducedModel& reduced,
    const TimeGrid& tg, std::shared_ptr<const DiagonalizationBundle> bundle,
    PropagatorOptions options)
    : flavor_(flavor), level_(level), reduced_(reduced), tg_(tg),
      bundle_(std::move(bundle)), options_(options) {
  if (flavor == PropFlavor::Feynman && level != PropLevel::Scalar)
    throw std::invalid_argument("the scalar Feynman flavor is scalar-level");
  if (needs_bundle(flavor) && flavor != PropFlavor::Feynman &&
      level != PropLevel::System)
    throw std::invalid_argument(
        "conjugated-frame flavors act on two-component sources");
  if (needs_bundle(flavor) && !bundle_)
    bundle_ = std::make_shared<DiagonalizationBundle>(reduced_, tg_, 0);
  table_ = std::make_shared<EvolutionTable>(table_flavor(flavor), reduced_,
                                            tg_, bundle_, options_.stepper);
}

// Streaming trapezoid accumulation of int U(t,s) f(s) ds over the causal
// half s <= t (retarded) or s >= t (advanced); no i prefactors, no
// projections -- callers wrap. An exactly zero accumulator stays bitwise
// zero until the first nonzero source column, which is what makes the
// support property exact rather than merely small.
std::vector<Mat> PropagatorKernel::causal_sweep(
    const std::vector<Mat>& f, bool retarded,
    const EvolutionTable& table) const {
  const int last = tg_.n_steps();
  std::vector<Mat> acc(last + 1);
  if (retarded) {
    Mat run = 0.5 * trapezoid_weight(tg_, 0) * f[0];
    acc[0] = run;
    for (int j = 0; j < last; ++j) {
      run += 0.5 * trapezoid_weight(tg_, j) * f[j];
      run = table.step_matrix(j) * run;
      run += 0.5 * trapezoid_weight(tg_, j + 1) * f[j + 1];
      acc[j + 1] = run;
    }
  } else {
    Mat run = 0.5 * trapezoid_weight(tg_, last) * f[last];
    acc[last] = run;
    for (int j = last; j > 0; --j) {
      run += 0.5 * trapezoid_weight(tg_, j) * f[j];
      run = table.step_matrix_inverse(j - 1) * run;
      run += 0.5 * trapezoid_weight(tg_, j - 1) * f[j - 1];
      acc[j - 1] = run;
    }
  }
  return acc;
}

// Two-pass realization of the positive/negative frequency splice
//   (G^ad_F f)(t) = i U^d(t,0) [ pi^+ A(t) - pi^- B(t) ],
//   A(t) = int_{-T}^t U^d(0,s) f(s) ds,  B(t) = int_t^T U^d(0,s) f(s) ds,
// streaming the transfer matrices through t = 0 so the factor products match
// the ladder columns of the evolution table exactly.
std::vector<Mat> PropagatorKernel::feynman_ad_sweep(
    const std::vector<Mat>& f) const {
  const int last = tg_.n_steps();
  const int j0 = tg_.index_zero();
  const int n2 = 2 * grid().n();
  const EvolutionTable& table = *table_;

  // Pass 1: h_k = U^d(0, t_k) f_k, weighted halves for the two causal sums.
  std::vector<Mat> c(last + 1), d(last + 1);
  auto split = [&](int k, const Mat& h) {
    const Real w = trapezoid_weight(tg_, k);
    Mat top = Mat::Zero(n2, h.cols());
    top.topRows(n2 / 2) = w * h.topRows(n2 / 2);
    Mat bot = Mat::Zero(n2, h.cols());
    bot.bottomRows(n2 / 2) = w * h.bottomRows(n2 / 2);
    c[k] = std::move(top);
    d[k] = std::move(bot);
  };
  Mat m = Mat::Identity(n2, n2);
  split(j0, f[j0]);
  for (int k = j0; k < last; ++k) {
    m = m * table.step_matrix_inverse(k);
    split(k + 1, m * f[k + 1]);
  }
  m = Mat::Identity(n2, n2);
  for (int k = j0; k > 0; --k) {
    m = m * table.step_matrix(k - 1);
    split(k - 1, m * f[k - 1]);
  }

  // Combine into g_j = i [ C_j - D_j ] with the half-weight edges,
  // C_j = sum_{k<j} c_k + c_j / 2,  D_j = d_j / 2 + sum_{k>j} d_k.
  std::vector<Mat> g(last + 1);
  Mat prefix = Mat::Zero(n2, f[0].cols());
  for (int j = 0; j <= last; ++j) {
    g[j] = kI * (prefix + 0.5 * c[j]);
    prefix += c[j];
  }
  Mat suffix = Mat::Zero(n2, f[0].cols());
  for (int j = last; j >= 0; --j) {
    g[j] -= kI * (suffix + 0.5 * d[j]);
    suffix += d[j];
  }
  c.clear();
  d.clear();

  // Pass 2: out_j = U^d(t_j, 0) g_j, streamed outward from the center.
  std::vector<Mat> out(last + 1);
  Mat nmat = Mat::Identity(n2, n2);
  out[j0] = g[j0];
  for (int j = j0; j < last; ++j) {
    nmat = table.step_matrix(j) * nmat;
    out[j + 1] = nmat * g[j + 1];
  }
  nmat = Mat::Identity(n2, n2);
  for (int j = j0; j > 0; --j) {
    nmat = table.step_matrix_inverse(j - 1) * nmat;
    out[j - 1] = nmat * g[j - 1];
  }
  return out;
}

std::vector<Mat> PropagatorKernel::apply_batch(const std::vector<Mat>& f) const {
  const int last = tg_.n_steps();
  const bool scalar = level_ == PropLevel::Scalar;

  switch (flavor_) {
    case PropFlavor::Retarded:
    case PropFlavor::AdRetarded:
    case PropFlavor::DiagRetarded: {
      std::vector<Mat> src = f;
      if (scalar)
        for (auto& mj : src) mj = embed_pi1(mj);
      std::vector<Mat> acc = causal_sweep(src, true, *table_);
      for (auto& aj : acc) aj = scalar ? Mat(-kI * aj) : Mat(kI * aj);
      return acc;
    }
    case PropFlavor::Advanced:
    case PropFlavor::AdAdvanced:
    case PropFlavor::DiagAdvanced: {
      std::vector<Mat> src = f;
      if (scalar)
        for (auto& mj : src) mj = embed_pi1(mj);
      std::vector<Mat> acc = causal_sweep(src, false, *table_);
      for (auto& aj : acc) aj = scalar ? Mat(kI * aj) : Mat(-kI * aj);
      return acc;
    }
    case PropFlavor::FeynmanAd:
      return feynman_ad_sweep(f);
    case PropFlavor::Feynman: {
      // f^ad = T^{-1} pi_1^* f, spliced evolution, then -T on the way out;
      // the returned two-component states hold the scalar solution and its
      // reduced time-derivative companion.
      std::vector<Mat> fad(last + 1);
      for (int j = 0; j <= last; ++j)
        fad[j] = bundle_->t_inv(j).mat() * embed_pi1(f[j]);
      std::vector<Mat> w = feynman_ad_sweep(fad);
      for (int j = 0; j <= last; ++j) w[j] = -(bundle_->t_op(j).mat() * w[j]);
      return w;
    }
  }
  throw std::logic_error("unhandled flavor");
}

std::vector<SpacetimeField> PropagatorKernel::apply(
    const std::vector<SpacetimeField>& fs) const {
  std::vector<Mat> batch = stack_fields(fs, tg_);
  const auto rows = batch.front().rows();
  const int n = grid().n();
  const bool scalar = level_ == PropLevel::Scalar;
  if (scalar && rows != n)
    throw std::invalid_argument("scalar-level kernel expects size-n states");
  if (!scalar && rows != 2 * n)
    throw std::invalid_argument("system-level kernel expects size-2n states");
  return unstack_fields(apply_batch(batch), fs);
}

SpacetimeField PropagatorKernel::apply(const SpacetimeField& f) const {
  return apply(std::vector<SpacetimeField>{f}).front();
}

Mat PropagatorKernel::block(int j, int k) const {
  const int n = grid().n();
  const Real tj = tg_.time(j), sk = tg_.time(k);
  switch (flavor_) {
    case PropFlavor::Retarded:
    case PropFlavor::AdRetarded:
    case PropFlavor::DiagRetarded: {
      const Real th = theta(j, k);
      if (th == 0.0)
        return Mat::Zero(level_ == PropLevel::Scalar ? n : 2 * n,
                         level_ == PropLevel::Scalar ? n : 2 * n);
      Mat u = table_->matrix(tj, sk);
      if (level_ == PropLevel::Scalar)
        return Mat(-kI * th * u.topRightCorner(n, n));
      return Mat(kI * th * u);
    }
    case PropFlavor::Advanced:
    case PropFlavor::AdAdvanced:
    case PropFlavor::DiagAdvanced: {
      const Real th = theta(k, j);
      if (th == 0.0)
        return Mat::Zero(level_ == PropLevel::Scalar ? n : 2 * n,
                         level_ == PropLevel::Scalar ? n : 2 * n);
      Mat u = table_->matrix(tj, sk);
      if (level_ == PropLevel::Scalar)
        return Mat(kI * th * u.topRightCorner(n, n));
      return Mat(-kI * th * u);
    }
    case PropFlavor::FeynmanAd:
    case PropFlavor::Feynman: {
      const Mat& nj = table_->column(j);
      const Mat& mk = table_->column_rev(k);
      Mat mid = Mat::Zero(2 * n, 2 * n);
      mid.topLeftCorner(n, n) =
          (kI * theta(j, k)) * Mat::Identity(n, n);
      mid.bottomRightCorner(n, n) =
          (-kI * theta(k, j)) * Mat::Identity(n, n);
      Mat kernel = nj * mid * mk;
      if (flavor_ == PropFlavor::FeynmanAd) return kernel;
      Mat wrapped = bundle_->t_op(j).mat() * kernel * bundle_->t_inv(k).mat();
      return Mat(-wrapped.topRightCorner(n, n));
    }
  }
  throw std::logic_error("unhandled flavor");
}

GridOperator PropagatorKernel::block_operator(int j, int k) const {
  if (level_ != PropLevel::Scalar)
    throw std::invalid_argument("block_operator is scalar-level only");
  return GridOperator(grid(), block(j, k));
}

Real PropagatorKernel::step_relation_defect(
    const std::vector<SpacetimeField>& sources,
    const std::vector<SpacetimeField>& solutions) const {
  if (sources.size() != solutions.size() || sources.empty())
    throw std::invalid_argument("batch sizes disagree");
  const int last = tg_.n_steps();
  std::vector<Mat> g = stack_fields(sources, tg_);
  std::vector<Mat> v = stack_fields(solutions, tg_);
  Complex halfi = Complex(0.0, 0.5);
  if (level_ == PropLevel::Scalar) {
    if (flavor_ == PropFlavor::Feynman) {
      // conjugated frame: w = -T^{-1} v solves the spliced relation with
      // source f^ad = T^{-1} pi_1^* g
      for (int j = 0; j <= last; ++j) {
        const Mat tinv = bundle_->t_inv(j).mat();
        v[j] = -(tinv * v[j]);
        g[j] = tinv * embed_pi1(g[j]);
      }
    } else {
      // pi_1^* embedding flips the source prefactor
      for (int j = 0; j <= last; ++j) g[j] = embed_pi1(g[j]);
      halfi = -halfi;
    }
  }
  Real defect2 = 0.0, source2 = 0.0;
  for (int j = 0; j < last; ++j) {
    const Mat s = table_->step_matrix(j);
    const Real wj = trapezoid_weight(tg_, j);
    const Real wj1 = trapezoid_weight(tg_, j + 1);
    const Mat d =
        v[j + 1] - s * v[j] - halfi * (wj * (s * g[j]) + wj1 * g[j + 1]);
    defect2 += 0.5 * (wj + wj1) * d.squaredNorm();
    source2 += trapezoid_weight(tg_, j) * g[j].squaredNorm();
  }
  source2 += trapezoid_weight(tg_, last) * g[last].squaredNorm();
  return std::sqrt(defect2 / source2);
}

Mat PropagatorKernel::dense() const {
  const int n = grid().n();
  const int width = level_ == PropLevel::Scalar ? n : 2 * n;
  const int dim = width * tg_.n_times();
  if (n * tg_.n_times() > options_.dense_cap)
    throw std::runtime_error("dense materialization exceeds the size cap");
  Mat a(dim, dim);
  for (int j = 0; j < tg_.n_times(); ++j)
    for (int k = 0; k < tg_.n_times(); ++k)
      a.block(j * width, k * width, width, width) =
          trapezoid_weight(tg_, k) * block(j, k);
  return a;
}

// ---------------------------------------------------------------------------
// Convenience wrappers

SpacetimeField apply_retarded(PropLevel level, const ReducedModel& reduced,
                              const TimeGrid& tg, const SpacetimeField& f,
                              StepperOptions options) {
  PropagatorOptions po;
  po.stepper = options;
  return PropagatorKernel(PropFlavor::Retarded, level, reduced, tg, nullptr,
                          po)
      .apply(f);
}

SpacetimeField apply_advanced(PropLevel level, const ReducedModel& reduced,
                              const TimeGrid& tg, const SpacetimeField& f,
                              StepperOptions options) {
  PropagatorOptions po;
  po.stepper = options;
  return PropagatorKernel(PropFlavor::Advanced, level, reduced, tg, nullptr,
                          po)
      .apply(f);
}

SpacetimeField apply_feynman_ad(
    std::shared_ptr<const DiagonalizationBundle> bundle,
    const SpacetimeField& f_ad, StepperOptions options) {
  if (!bundle) throw std::invalid_argument("bundle required");
  PropagatorOptions po;
  po.stepper = options;
  return PropagatorKernel(PropFlavor::FeynmanAd, PropLevel::System,
                          bundle->reduced(), f_ad.tg, bundle, po)
      .apply(f_ad);
}

SpacetimeField apply_feynman(std::shared_ptr<const DiagonalizationBundle> bundle,
                             const SpacetimeField& f, StepperOptions options) {
  if (!bundle) throw std::invalid_argument("bundle required");
  PropagatorOptions po;
  po.stepper = options;
  return PropagatorKernel(PropFlavor::Feynman, PropLevel::Scalar,
                          bundle->reduced(), f.tg, bundle, po)
      .apply(f);
}

// ---------------------------------------------------------------------------
// First-order slab operators

namespace {

// Fourth-order interior lattice time derivative, second order within one
// point of the slab ends; the same stencil the scalar model operator uses.
Vec lattice_dt(const std::vector<Vec>& u, int j, Real h) {
  const int nt = static_cast<int>(u.size());
  if (j >= 2 && j + 2 < nt)
    return (-u[j + 2] + 8.0 * u[j + 1] - 8.0 * u[j - 1] + u[j - 2]) /
           (12.0 * h);
  if (j >= 1 && j + 1 < nt) return (u[j + 1] - u[j - 1]) / (2.0 * h);
  if (j == 0) return (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
  return (3.0 * u[nt - 1] - 4.0 * u[nt - 2] + u[nt - 3]) / (2.0 * h);
}

}  // namespace

std::vector<Vec> apply_system_operator(const ReducedModel& reduced,
                                       const SpacetimeField& field) {
  const int nt = field.tg.n_times();
  std::vector<Vec> out(nt);
  for (int j = 0; j < nt; ++j)
    out[j] = -kI * lattice_dt(field.states, j, field.tg.dt()) -
             build_generator(reduced, field.tg.time(j)).mat() *
                 field.states[j];
  return out;
}

std::vector<Vec> apply_ad_operator(const DiagonalizationBundle& bundle,
                                   const SpacetimeField& field) {
  const int nt = field.tg.n_times();
  std::vector<Vec> out(nt);
  for (int j = 0; j < nt; ++j)
    out[j] = -kI * lattice_dt(field.states, j, field.tg.dt()) -
             bundle.h_ad(j).mat() * field.states[j];
  return out;
}

// ---------------------------------------------------------------------------
// Frame transport

SpacetimeField source_to_model_frame(const ReducedModel& reduced,
                                     const SpacetimeField& f) {
  if (f.frame != Frame::Original)
    throw std::invalid_argument("source is not in the original frame");
  return scale_scalar_field(reduced, f, 0.5, Frame::Model);
}

SpacetimeField source_to_original_frame(const ReducedModel& reduced,
                                        const SpacetimeField& f) {
  if (f.frame != Frame::Model)
    throw std::invalid_argument("source is not in the model frame");
  return scale_scalar_field(reduced, f, -0.5, Frame::Original);
}

SpacetimeField solution_to_model_frame(const ReducedModel& reduced,
                                       const SpacetimeField& u) {
  if (u.frame != Frame::Original)
    throw std::invalid_argument("solution is not in the original frame");
  return scale_scalar_field(reduced, u, -1.5, Frame::Model);
}

SpacetimeField solution_to_original_frame(const ReducedModel& reduced,
                                          const SpacetimeField& u) {
  if (u.frame != Frame::Model)
    throw std::invalid_argument("solution is not in the model frame");
  return scale_scalar_field(reduced, u, 1.5, Frame::Original);
}

SpacetimeField apply_feynman_original(
    std::shared_ptr<const DiagonalizationBundle> bundle,
    const SpacetimeField& f_original, StepperOptions options) {
  if (!bundle) throw std::invalid_argument("bundle required");
  const ReducedModel& reduced = bundle->reduced();
  SpacetimeField f = source_to_model_frame(reduced, f_original);
  SpacetimeField v = apply_feynman(bundle, f, options);
  // reduce to the scalar head before transporting back
  SpacetimeField u = v;
  for (auto& s : u.states) s = Vec(s.head(u.grid->n()));
  return solution_to_original_frame(reduced, u);
}

// ---------------------------------------------------------------------------
// Positivity

PositivityReport positivity_check(const PropagatorKernel& kernel) {
  if (kernel.level() != PropLevel::Scalar)
    throw std::invalid_argument("positivity form is scalar-level");
  const TimeGrid& tg = kernel.tg();
  const SpatialGrid& grid = kernel.grid();
  const int n = grid.n();

  // Plain-dt trapezoid weights and the slice densities: in this Gram the
  // adjoint defect of the spliced kernel collapses to a rank-bounded square
  // (the time weights must match the quadrature weights for the
  // theta-symmetrization to telescope), so the form is positive to roundoff
  // rather than to discretization error.
  Mat a = kernel.dense();
  RealVec w(n * tg.n_times());
  for (int j = 0; j < tg.n_times(); ++j)
    w.segment(j * n, n) = trapezoid_weight(tg, j) * grid.dx() *
                          kernel.reduced().density(tg.time(j));
  Mat wa = w.cast<Complex>().asDiagonal() * a;
  Mat form = kI * (wa - wa.adjoint());

  Eigen::SelfAdjointEigenSolver<Mat> es(form);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("eigensolver failed on the positivity form");
  PositivityReport rep;
  rep.dimension = static_cast<int>(form.rows());
  rep.min_eigenvalue = es.eigenvalues().minCoeff();
  rep.max_eigenvalue = es.eigenvalues().maxCoeff();
  return rep;
}

// ---------------------------------------------------------------------------
// Random sources and inversion statistics

SpacetimeField random_smooth_source(std::shared_ptr<const SpatialGrid> grid,
                                    const TimeGrid& tg, std::uint64_t seed,
                                    bool system) {
  const int n = grid->n();
  const int rows = system ? 2 * n : n;
  SpacetimeField f{grid, tg,
                   std::vector<Vec>(tg.n_times(), Vec::Zero(rows)),
                   Frame::Model};
  const Real half = tg.half_width();
  const int rank = 6;
  std::mt19937_64 rng(derive_seed(seed, "envelope"));
  std::uniform_real_distribution<Real> center(-half / 3.0, half / 3.0);
  std::uniform_real_distribution<Real> width(half / 12.0, half / 6.0);
  for (int p = 0; p < rank; ++p) {
    const Real tc = center(rng);
    const Real sigma = width(rng);
    Vec phi(rows);
    phi.head(n) =
        smooth_random_function(*grid, derive_seed(seed, "profile") + p)
            .values;
    if (system)
      phi.tail(n) =
          smooth_random_function(*grid, derive_seed(seed, "companion") + p)
              .values;
    for (int j = 0; j < tg.n_times(); ++j) {
      const Real u = (tg.time(j) - tc) / sigma;
      f.states[j] += std::exp(-0.5 * u * u) * phi;
    }
  }
  return f;
}

namespace {

// Weighted slab norm at spatial order zero, optionally dropping edge slices
// (the lattice time stencil loses order there).
Real slab_norm(const std::vector<Vec>& samples, const TimeGrid& tg, Real dx,
               int skip_edges = 0) {
  Real acc = 0.0;
  const int nt = static_cast<int>(samples.size());
  for (int j = skip_edges; j < nt - skip_edges; ++j)
    acc += tg.weight(j) * dx * samples[j].squaredNorm();
  return std::sqrt(acc);
}

}  // namespace

InversionReport inversion_report(
    PropFlavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
    int sample_count, std::shared_ptr<const DiagonalizationBundle> bundle,
    std::uint64_t seed) {
  const bool scalar = flavor == PropFlavor::Retarded ||
                      flavor == PropFlavor::Advanced ||
                      flavor == PropFlavor::Feynman;
  const PropLevel level = scalar ? PropLevel::Scalar : PropLevel::System;
  if (needs_bundle(flavor) && !bundle)
    bundle = std::make_shared<DiagonalizationBundle>(reduced, tg, 0);
  PropagatorKernel kernel(flavor, level, reduced, tg, bundle);
  const int n = reduced.grid().n();
  const Real dx = reduced.grid().dx();

  // The independent lattice operator each flavor is expected to invert (up
  // to its compact remainder): the scalar model operator, the conjugated or
  // plain first-order system operator, or the diagonal part alone.
  auto lattice_op = [&](const SpacetimeField& u) -> std::vector<Vec> {
    switch (flavor) {
      case PropFlavor::Retarded:
      case PropFlavor::Advanced:
      case PropFlavor::Feynman:
        return apply_model_operator(reduced, u);
      case PropFlavor::AdRetarded:
      case PropFlavor::AdAdvanced:
      case PropFlavor::FeynmanAd:
        return apply_ad_operator(*bundle, u);
      case PropFlavor::DiagRetarded:
      case PropFlavor::DiagAdvanced: {
        std::vector<Vec> out(tg.n_times());
        for (int j = 0; j < tg.n_times(); ++j) {
          Vec hd(2 * n);
          hd.head(n) = bundle->eps_plus(j) * u.states[j].head(n);
          hd.tail(n) = bundle->eps_minus(j) * u.states[j].tail(n);
          out[j] = -kI * lattice_dt(u.states, j, tg.dt()) - hd;
        }
        return out;
      }
    }
    throw std::logic_error("unhandled flavor");
  };

  std::vector<SpacetimeField> sources;
  sources.reserve(sample_count);
  for (int s = 0; s < sample_count; ++s)
    sources.push_back(random_smooth_source(
        reduced.grid_ptr(), tg, derive_seed(seed, "f") + s, !scalar));

  std::vector<SpacetimeField> solutions = kernel.apply(sources);

  InversionReport rep;
  rep.samples = sample_count;
  rep.max_relation_defect = kernel.step_relation_defect(sources, solutions);

  // Independent diagonalized-remainder norms || V^ad G^ad_F f^ad ||. For
  // the scalar Feynman flavor the transported sources go through one
  // batched spliced sweep; for the system-level splice the solutions are
  // already the diagonal-frame states.
  std::vector<Real> remainder_norms;
  if (flavor == PropFlavor::Feynman) {
    std::vector<SpacetimeField> fads(
        sources.size(), SpacetimeField{reduced.grid_ptr(), tg,
                                       std::vector<Vec>(tg.n_times()),
                                       Frame::Model});
    for (int j = 0; j < tg.n_times(); ++j) {
      const Mat tinv = bundle->t_inv(j).mat();
      for (int s = 0; s < sample_count; ++s) {
        Vec src = Vec::Zero(2 * n);
        src.tail(n) = sources[s].states[j];
        fads[s].states[j] = tinv * src;
      }
    }
    PropagatorKernel kernel_ad(PropFlavor::FeynmanAd, PropLevel::System,
                               reduced, tg, bundle);
    std::vector<SpacetimeField> ws = kernel_ad.apply(fads);
    remainder_norms.assign(sources.size(), 0.0);
    for (int j = 0; j < tg.n_times(); ++j) {
      const Mat vad = bundle->v_ad(j).mat();
      const Real wj = tg.weight(j) * dx;
      for (int s = 0; s < sample_count; ++s)
        remainder_norms[s] += wj * (vad * ws[s].states[j]).squaredNorm();
    }
    for (Real& r : remainder_norms) r = std::sqrt(r);
  } else if (flavor == PropFlavor::FeynmanAd) {
    remainder_norms.assign(sources.size(), 0.0);
    for (int j = 0; j < tg.n_times(); ++j) {
      const Mat vad = bundle->v_ad(j).mat();
      const Real wj = tg.weight(j) * dx;
      for (int s = 0; s < sample_count; ++s)
        remainder_norms[s] +=
            wj * (vad * solutions[s].states[j]).squaredNorm();
    }
    for (Real& r : remainder_norms) r = std::sqrt(r);
  }

  const int skip = 2;  // one-sided stencils at the slab ends
  for (int s = 0; s < sample_count; ++s) {
    std::vector<Vec> res = lattice_op(solutions[s]);
    for (int j = 0; j < tg.n_times(); ++j) res[j] -= sources[s].states[j];
    const Real fnorm = slab_norm(sources[s].states, tg, dx);
    const Real rnorm = slab_norm(res, tg, dx, skip);
    rep.max_forward_residual =
        std::max(rep.max_forward_residual, rnorm / fnorm);
    if (!remainder_norms.empty() && remainder_norms[s] > 0.0)
      rep.max_remainder_ratio =
          std::max(rep.max_remainder_ratio, rnorm / remainder_norms[s]);
  }

  // Backward residuals on constrained inputs: u = G g lies in the kernel's
  // discrete range, so G applied to the lattice operator of u should
  // reproduce it up to the same discretization error.
  for (int s = 0; s < sample_count; ++s) {
    const SpacetimeField& u = solutions[s];
    SpacetimeField pu_field{u.grid, tg, lattice_op(u), u.frame};
    SpacetimeField back = kernel.apply(pu_field);
    std::vector<Vec> diff(u.states.size());
    std::vector<Vec> ref(u.states.size());
    for (int j = 0; j < tg.n_times(); ++j) {
      if (scalar) {
        diff[j] = back.states[j].head(n) - u.states[j].head(n);
        ref[j] = u.states[j].head(n);
      } else {
        diff[j] = back.states[j] - u.states[j];
        ref[j] = u.states[j];
      }
    }
    rep.max_backward_residual =
        std::max(rep.max_backward_residual,
                 slab_norm(diff, tg, dx, skip) / slab_norm(ref, tg, dx));
  }
  return rep;
}

}  // namespace kgscat
