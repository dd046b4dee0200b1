#include "kgscat/pseudodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kgscat {

namespace {

RealVec checked_density(const GridFunction& density) {
  RealVec d(density.values.size());
  for (int i = 0; i < d.size(); ++i) {
    const Complex z = density.values[i];
    if (std::abs(z.imag()) > 1e-12 * (1.0 + std::abs(z.real())))
      throw std::invalid_argument("density must be real");
    if (z.real() <= 0.0)
      throw std::invalid_argument("density must be strictly positive");
    d[i] = z.real();
  }
  return d;
}

// Hermitian representative rho^{1/2} A rho^{-1/2} of a weighted-self-adjoint
// operator, symmetrized to kill roundoff skew.
Mat flat_hermitian(const Mat& a, const RealVec& density) {
  const RealVec half = density.array().sqrt();
  Mat b = half.asDiagonal() * a * half.cwiseInverse().asDiagonal();
  return 0.5 * (b + Mat(b.adjoint()));
}

struct SpectrumBounds {
  Real min = 0.0;
  Real max = 0.0;
};

SpectrumBounds spectrum_bounds(const GridOperator& a) {
  if (a.selfadjoint_density) {
    Eigen::SelfAdjointEigenSolver<Mat> es(
        flat_hermitian(a.matrix, *a.selfadjoint_density),
        Eigen::EigenvaluesOnly);
    return {es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff()};
  }
  Eigen::ComplexEigenSolver<Mat> es(a.matrix, false);
  const RealVec re = es.eigenvalues().real();
  return {re.minCoeff(), re.maxCoeff()};
}

Mat integer_matrix_power(const GridOperator& a, long long p) {
  const int n = a.n();
  if (p == 0) return Mat::Identity(n, n);
  Mat base = a.matrix;
  if (p < 0) {
    base = Eigen::PartialPivLU<Mat>(base).inverse();
    p = -p;
  }
  Mat out = Mat::Identity(n, n);
  for (long long i = 0; i < p; ++i) out = out * base;
  return out;
}

// Trapezoid sum of C_beta * (A + e^u)^{-1} e^{u(beta+1)} over the given
// log-s window.
Mat contour_sum(const Mat& a, Real beta, Real u_lo, Real u_hi, int nodes) {
  const int n = static_cast<int>(a.rows());
  const Real c_beta = -std::sin(kPi * beta) / kPi;
  const Real h = (u_hi - u_lo) / (nodes - 1);
  Mat acc = Mat::Zero(n, n);
  for (int q = 0; q < nodes; ++q) {
    const Real u = u_lo + q * h;
    const Real s = std::exp(u);
    const Real w = (q == 0 || q == nodes - 1) ? 0.5 : 1.0;
    Mat shifted = a;
    shifted.diagonal().array() += s;
    acc += (w * std::exp(u * (beta + 1.0))) *
           Eigen::PartialPivLU<Mat>(std::move(shifted)).inverse();
  }
  return (c_beta * h) * acc;
}

Real linear_stderr(const std::vector<std::pair<Real, Real>>& xy, Real slope,
                   Real intercept) {
  const int n = static_cast<int>(xy.size());
  if (n <= 2) return 0.0;
  Real ss_res = 0.0, xbar = 0.0;
  for (const auto& [x, y] : xy) xbar += x;
  xbar /= n;
  Real sxx = 0.0;
  for (const auto& [x, y] : xy) {
    const Real r = y - (slope * x + intercept);
    ss_res += r * r;
    sxx += (x - xbar) * (x - xbar);
  }
  if (sxx <= 0.0) return 0.0;
  return std::sqrt(ss_res / ((n - 2) * sxx));
}

}  // namespace

GridOperator weyl_quantize(const Symbol& sym, Real t, const SpatialGrid& grid) {
  const int n = grid.n();
  const Real dx = grid.dx();
  const Real x0 = grid.points()[0];

  // Mode list with the Nyquist line split evenly between +k_N and -k_N, so
  // real symbols give exactly Hermitian kernels.
  std::vector<std::pair<Real, Real>> modes;  // (k, weight)
  modes.reserve(n + 1);
  for (int j = 0; j < n; ++j) {
    const Real k = grid.wavenumbers()[j];
    if (grid.is_nyquist(j)) {
      modes.emplace_back(k, 0.5);
      modes.emplace_back(-k, 0.5);
    } else {
      modes.emplace_back(k, 1.0);
    }
  }
  const int nm = static_cast<int>(modes.size());

  // Symbol samples on the midpoint (half-step) grid and phase factors for
  // each integer point separation.
  Mat samples(2 * n - 1, nm);
  for (int p = 0; p < 2 * n - 1; ++p) {
    const Real xm = x0 + 0.5 * dx * p;
    for (int m = 0; m < nm; ++m)
      samples(p, m) = modes[m].second * sym.evaluator(t, xm, modes[m].first);
  }
  Mat phases(nm, 2 * n - 1);
  for (int m = 0; m < nm; ++m)
    for (int d = -(n - 1); d <= n - 1; ++d)
      phases(m, d + n - 1) = std::exp(kI * (modes[m].first * dx * d));

  Mat kernel(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      Complex acc = 0.0;
      for (int m = 0; m < nm; ++m)
        acc += samples(i + j, m) * phases(m, i - j + n - 1);
      kernel(i, j) = acc / static_cast<Real>(n);
    }

  return GridOperator(grid, std::move(kernel), sym.claimed_m,
                      sym.claimed_delta);
}

GridOperator fractional_power_spectral(const GridOperator& a, Real alpha,
                                       const RealVec& density) {
  Eigen::SelfAdjointEigenSolver<Mat> es(flat_hermitian(a.matrix, density));
  const RealVec ev = es.eigenvalues();
  if (ev.minCoeff() <= 1e-10)
    throw std::domain_error(
        "fractional power requires a uniformly positive operator; min "
        "eigenvalue " +
        std::to_string(ev.minCoeff()));
  RealVec powered(ev.size());
  for (int i = 0; i < ev.size(); ++i) powered[i] = std::pow(ev[i], alpha);
  const Mat b_pow =
      es.eigenvectors() * powered.asDiagonal() * es.eigenvectors().adjoint();
  const RealVec half = density.array().sqrt();
  Mat out = half.cwiseInverse().asDiagonal() * b_pow * half.asDiagonal();
  return GridOperator(*a.grid, std::move(out), alpha * a.claimed_order,
                      a.claimed_decay, density);
}

GridOperator fractional_power_spectral(const GridOperator& a, Real alpha,
                                       const GridFunction& density) {
  return fractional_power_spectral(a, alpha, checked_density(density));
}

GridOperator fractional_power_contour(const GridOperator& a, Real alpha,
                                      const PowerRoutine& routine) {
  const auto bounds = spectrum_bounds(a);
  if (bounds.min <= 1e-10)
    throw std::domain_error(
        "fractional power requires a uniformly positive operator; min "
        "eigenvalue " +
        std::to_string(bounds.min));

  const Real rounded = std::round(alpha);
  if (std::abs(alpha - rounded) < 1e-14) {
    return GridOperator(*a.grid,
                        integer_matrix_power(a, llround(rounded)),
                        alpha * a.claimed_order, a.claimed_decay,
                        a.selfadjoint_density);
  }
  const Real p = std::ceil(alpha);
  const Real beta = alpha - p;  // in (-1, 0)

  // Window the log-s trapezoid so both truncation tails of
  //   C_beta Int s^beta (A+s)^{-1} ds
  // fall below ~1e-9 of ||A^beta||. The integrand is analytic in a strip of
  // half-width pi around the real u-axis, so the trapezoid discretization
  // error is negligible at any practical node count and the window width is
  // effectively free.
  const Real c_beta = -std::sin(kPi * beta) / kPi;
  const Real tail = 1e-9;
  Real u_lo = std::log(bounds.min) +
              std::log(tail * (beta + 1.0) / c_beta) / (beta + 1.0);
  Real u_hi = std::log(bounds.min) + std::log(c_beta / (tail * (-beta))) / (-beta);
  u_lo = std::max(u_lo, std::log(bounds.min) - 230.0);
  u_hi = std::min(std::max(u_hi, std::log(bounds.max) + 30.0),
                  std::log(bounds.max) + 230.0);

  const int nodes = std::max(routine.quadrature_nodes, 8);
  const Mat coarse = contour_sum(a.matrix, beta, u_lo, u_hi, nodes);
  const Mat fine = contour_sum(a.matrix, beta, u_lo, u_hi, 2 * nodes);
  const Real disagreement = (fine - coarse).norm() / std::max(fine.norm(), 1e-300);
  if (disagreement > 1e-5)
    throw std::runtime_error(
        "contour quadrature failed its doubled-node self-check: relative "
        "disagreement " +
        std::to_string(disagreement));

  Mat out = fine;
  if (p != 0.0) out = integer_matrix_power(a, llround(p)) * out;
  return GridOperator(*a.grid, std::move(out), alpha * a.claimed_order,
                      a.claimed_decay, a.selfadjoint_density);
}

const GridOperator& OperatorFamily::at(Real t) const {
  if (!eval_) throw std::logic_error("OperatorFamily has no evaluator");
  const long long key = llround(t * 1e9);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, eval_(t)).first;
  return it->second;
}

std::vector<Real> default_decay_times() {
  return {0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 18.0, 27.0, 40.0};
}

DecayFit decay_exponent_fit(const OperatorFamily& family,
                            const DecayFitConfig& config) {
  if (config.times.size() < 8)
    throw std::invalid_argument("decay fit needs at least 8 time samples");
  const GridOperator& first = family.at(config.times.front());
  const SpatialGrid& grid = *first.grid;
  const int n = grid.n();

  const Real radius =
      config.window_radius > 0.0 ? config.window_radius : grid.length() / 4.0;
  RealVec window = RealVec::Zero(n);
  for (int i = 0; i < n; ++i)
    if (std::abs(grid.points()[i]) <= radius) window[i] = 1.0;

  Mat left = window.cast<Complex>().asDiagonal();
  Mat right = left;
  if (config.position_exponents) {
    left = left * weight_operator(grid, WeightKind::Position,
                                  config.position_exponents->first)
                      .matrix;
    right = weight_operator(grid, WeightKind::Position,
                            config.position_exponents->second)
                .matrix *
            right;
  }
  if (config.frequency_exponents) {
    left = left * weight_operator(grid, WeightKind::Frequency,
                                  -config.frequency_exponents->first)
                      .matrix;
    right = weight_operator(grid, WeightKind::Frequency,
                            -config.frequency_exponents->second)
                .matrix *
            right;
  }

  DecayFit fit;
  bool monotone = true;
  Real prev = 0.0;
  for (std::size_t i = 0; i < config.times.size(); ++i) {
    const Real t = config.times[i];
    const Mat weighted = left * family.at(t).matrix * right;
    const Real s = weighted.jacobiSvd().singularValues()[0];
    fit.samples.emplace_back(t, s);
    if (i > 0 && s > prev * 1.05) monotone = false;
    prev = s;
  }
  fit.below_noise_floor = std::all_of(
      fit.samples.begin(), fit.samples.end(),
      [](const auto& ts) { return ts.second < 1e-13; });

  const DecayFit line = fit_log_slope(fit.samples);
  fit.slope = line.slope;
  fit.stderr_slope = line.stderr_slope;
  fit.r2 = line.r2;
  fit.well_conditioned = monotone && fit.r2 >= 0.9 && !fit.below_noise_floor;
  return fit;
}

DecayFit fit_log_slope(const std::vector<std::pair<Real, Real>>& samples) {
  DecayFit fit;
  fit.samples = samples;
  std::vector<std::pair<Real, Real>> xy;
  for (const auto& [t, s] : samples)
    xy.emplace_back(0.5 * std::log1p(t * t), std::log(std::max(s, 1e-300)));
  const int n = static_cast<int>(xy.size());
  if (n < 2) throw std::invalid_argument("slope fit needs >= 2 samples");

  Real sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : xy) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
  }
  const Real det = n * sxx - sx * sx;
  fit.slope = (n * sxy - sx * sy) / det;
  const Real intercept = (sy - fit.slope * sx) / n;
  const Real ss_tot = syy - sy * sy / n;
  Real ss_res = 0.0;
  for (const auto& [x, y] : xy) {
    const Real r = y - (fit.slope * x + intercept);
    ss_res += r * r;
  }
  fit.r2 = ss_tot > 1e-20 ? 1.0 - ss_res / ss_tot : 1.0;
  fit.stderr_slope = linear_stderr(xy, fit.slope, intercept);
  fit.well_conditioned = fit.r2 >= 0.9;
  return fit;
}

}  // namespace kgscat
