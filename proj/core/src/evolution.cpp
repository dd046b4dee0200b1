#include "kgscat/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "kgscat/pseudodiff.hpp"

namespace kgscat {

namespace {

Mat hermitian_part(const Mat& m) { return 0.5 * (m + m.adjoint()); }

// rho^{1/2} A rho^{-1/2} and its inverse sandwich.
Mat to_flat(const Mat& a, const RealVec& sq) {
  Vec l = sq.cast<Complex>();
  Vec r = sq.cwiseInverse().cast<Complex>();
  return l.asDiagonal() * a * r.asDiagonal();
}

Mat from_flat(const Mat& a, const RealVec& sq) {
  Vec l = sq.cwiseInverse().cast<Complex>();
  Vec r = sq.cast<Complex>();
  return l.asDiagonal() * a * r.asDiagonal();
}

Mat weighted_adjoint_mat(const Mat& a, const RealVec& rho) {
  Vec l = rho.cwiseInverse().cast<Complex>();
  Vec r = rho.cast<Complex>();
  return l.asDiagonal() * a.adjoint() * r.asDiagonal();
}

void scale_component_rows(Mat& m, const RealVec& top, const RealVec& bot) {
  const int n = static_cast<int>(top.size());
  for (int i = 0; i < n; ++i) {
    m.row(i) *= top(i);
    m.row(n + i) *= bot(i);
  }
}

void scale_component_cols(Mat& m, const RealVec& top, const RealVec& bot) {
  const int n = static_cast<int>(top.size());
  for (int i = 0; i < n; ++i) {
    m.col(i) *= top(i);
    m.col(n + i) *= bot(i);
  }
}

// Truncated series for cos(sqrt(X)) and sin(sqrt(X))/sqrt(X) with the
// truncation level picked so the dropped tail is below 1e-20 of unity;
// both share the running power of X.
void wave_series(const Mat& x, Mat& cosm, Mat& sincm) {
  const int n = static_cast<int>(x.rows());
  const Real nx = x.norm();
  int terms = 1;
  Real bound = 1.0;
  while (terms < 30) {
    bound *= nx / ((2.0 * terms - 1.0) * (2.0 * terms));
    if (bound < 1e-20) break;
    ++terms;
  }
  cosm = Mat::Identity(n, n);
  sincm = Mat::Identity(n, n);
  Mat power = Mat::Identity(n, n);
  Real c = 1.0, s = 1.0;
  for (int k = 1; k <= terms; ++k) {
    power = (power * x).eval();
    c *= -1.0 / ((2.0 * k - 1.0) * (2.0 * k));
    s *= -1.0 / ((2.0 * k) * (2.0 * k + 1.0));
    cosm += c * power;
    sincm += s * power;
  }
}

// Truncated exponential series with scaling-and-squaring for larger norms.
Mat exp_series(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  const Real na = a.norm();
  int squarings = 0;
  Mat base = a;
  if (na > 0.5) {
    squarings = static_cast<int>(std::ceil(std::log2(na / 0.25)));
    base *= std::pow(2.0, -squarings);
  }
  Mat sum = Mat::Identity(n, n);
  Mat term = Mat::Identity(n, n);
  for (int k = 1; k <= 60; ++k) {
    term = (term * base).eval() / static_cast<Real>(k);
    sum += term;
    if (term.norm() < 1e-19 * sum.norm()) break;
  }
  for (int i = 0; i < squarings; ++i) sum = (sum * sum).eval();
  return sum;
}

}  // namespace

// ---------------------------------------------------------------------------
// TimeGrid

TimeGrid::TimeGrid(Real half_width, Real dt, Real delta,
                   std::optional<Real> gamma)
    : half_width_(half_width) {
  if (half_width <= 0.0 || dt <= 0.0)
    throw std::invalid_argument("time grid needs positive extent and step");
  if (delta <= 0.0)
    throw std::invalid_argument("decay rate must be positive");
  const int half_steps =
      std::max(1, static_cast<int>(std::llround(half_width / dt)));
  n_steps_ = 2 * half_steps;
  dt_ = 2.0 * half_width / n_steps_;
  const Real lo = 0.5, hi = 0.5 + delta;
  if (gamma) {
    if (*gamma <= lo || *gamma >= hi)
      throw std::invalid_argument(
          "weight exponent must lie strictly between 1/2 and 1/2 + delta");
    gamma_ = *gamma;
  } else {
    gamma_ = std::clamp(0.75 + 0.5 * delta, lo + 1e-6, hi - 1e-6);
  }
}

std::vector<Real> TimeGrid::times() const {
  std::vector<Real> out(n_times());
  for (int j = 0; j < n_times(); ++j) out[j] = time(j);
  return out;
}

int TimeGrid::index_of(Real t) const {
  const int j = static_cast<int>(std::llround((t + half_width_) / dt_));
  if (j < 0 || j > n_steps_ ||
      std::abs(time(j) - t) > 1e-9 * std::max(Real(1), std::abs(t)))
    throw std::invalid_argument("time is not on the lattice");
  return j;
}

Real TimeGrid::weight(int j) const {
  const Real t = time(j);
  return std::pow(1.0 + t * t, -gamma_) * dt_;
}

// ---------------------------------------------------------------------------
// BlockOperator

BlockOperator::BlockOperator(const SpatialGrid& grid, Mat full)
    : grid_(&grid), mat_(std::move(full)) {
  if (mat_.rows() != 2 * grid.n() || mat_.cols() != 2 * grid.n())
    throw std::invalid_argument("block operator size mismatch");
}

int BlockOperator::n() const { return grid_->n(); }

BlockOperator BlockOperator::from_blocks(const SpatialGrid& grid, const Mat& ul,
                                         const Mat& ur, const Mat& ll,
                                         const Mat& lr) {
  const int n = grid.n();
  Mat full(2 * n, 2 * n);
  full.topLeftCorner(n, n) = ul;
  full.topRightCorner(n, n) = ur;
  full.bottomLeftCorner(n, n) = ll;
  full.bottomRightCorner(n, n) = lr;
  return BlockOperator(grid, std::move(full));
}

BlockOperator BlockOperator::identity(const SpatialGrid& grid) {
  return BlockOperator(grid, Mat::Identity(2 * grid.n(), 2 * grid.n()));
}

BlockOperator BlockOperator::q_pairing(const SpatialGrid& grid) {
  const int n = grid.n();
  Mat m = Mat::Zero(2 * n, 2 * n);
  m.topRightCorner(n, n).setIdentity();
  m.bottomLeftCorner(n, n).setIdentity();
  return BlockOperator(grid, std::move(m));
}

BlockOperator BlockOperator::q_ad_pairing(const SpatialGrid& grid) {
  const int n = grid.n();
  Mat m = Mat::Identity(2 * n, 2 * n);
  m.bottomRightCorner(n, n) *= -1.0;
  return BlockOperator(grid, std::move(m));
}

BlockOperator BlockOperator::projector_plus(const SpatialGrid& grid) {
  const int n = grid.n();
  Mat m = Mat::Zero(2 * n, 2 * n);
  m.topLeftCorner(n, n).setIdentity();
  return BlockOperator(grid, std::move(m));
}

BlockOperator BlockOperator::projector_minus(const SpatialGrid& grid) {
  const int n = grid.n();
  Mat m = Mat::Zero(2 * n, 2 * n);
  m.bottomRightCorner(n, n).setIdentity();
  return BlockOperator(grid, std::move(m));
}

Mat block_weighted_adjoint(const Mat& u, const RealVec& density_domain,
                           const RealVec& density_range) {
  const int n2 = static_cast<int>(u.rows());
  const int n = n2 / 2;
  auto stack = [n, n2](const RealVec& d) {
    if (static_cast<int>(d.size()) == n2) return d;
    RealVec s(n2);
    s.head(n) = d;
    s.tail(n) = d;
    return s;
  };
  RealVec dom = stack(density_domain), ran = stack(density_range);
  Vec l = dom.cwiseInverse().cast<Complex>();
  Vec r = ran.cast<Complex>();
  return l.asDiagonal() * u.adjoint() * r.asDiagonal();
}

BlockOperator build_generator(const ReducedModel& reduced, Real t) {
  const SpatialGrid& g = reduced.grid();
  const int n = g.n();
  Mat ul = Mat::Zero(n, n);
  Mat ur = Mat::Identity(n, n);
  Mat lr = Mat::Zero(n, n);
  lr.diagonal() = kI * reduced.damping(t).cast<Complex>();
  return BlockOperator::from_blocks(g, ul, ur, reduced.spatial_op(t).matrix,
                                    lr);
}

Real generator_pairing_residual(const ReducedModel& reduced, Real t) {
  const SpatialGrid& g = reduced.grid();
  const int n = g.n();
  const Mat h = build_generator(reduced, t).mat();
  const Mat q = BlockOperator::q_pairing(g).mat();
  const RealVec rho = reduced.density(t);
  const RealVec r = reduced.damping(t);
  Vec r2(2 * n);
  r2.head(n) = r.cast<Complex>();
  r2.tail(n) = r.cast<Complex>();
  const Mat hstar = block_weighted_adjoint(h, rho, rho);
  const Mat res = hstar * q - q * h + kI * (r2.asDiagonal() * q);
  return res.norm();
}

// ---------------------------------------------------------------------------
// DiagonalizationBundle

struct DiagonalizationBundle::Cache {
  std::vector<std::map<int, Mat>> b_levels;
  std::map<int, Mat> eps, bminus, shalf, rinfp, rinfm, epsp, epsm;
  std::map<int, BlockOperator> tmat, tinv, had, vad;
  std::map<int, Real> herm_res;
  // Retention limit in matrix entries; long sweeps over many lattice indices
  // would otherwise hold the whole slab's worth of dense matrices.
  std::size_t limit = 1200;

  std::size_t entries() const {
    std::size_t total = 0;
    for (const auto& lvl : b_levels) total += lvl.size();
    total += eps.size() + bminus.size() + shalf.size() + rinfp.size() +
             rinfm.size() + epsp.size() + epsm.size();
    // block operators hold four blocks' worth each
    total += 4 * (tmat.size() + tinv.size() + had.size() + vad.size());
    return total;
  }
  void clear_tables() {
    for (auto& lvl : b_levels) lvl.clear();
    eps.clear(); bminus.clear(); shalf.clear(); rinfp.clear(); rinfm.clear();
    epsp.clear(); epsm.clear();
    tmat.clear(); tinv.clear(); had.clear(); vad.clear();
    herm_res.clear();
  }
};

void DiagonalizationBundle::evict_if_needed() const {
  if (cache_->limit > 0 && cache_->entries() > cache_->limit)
    cache_->clear_tables();
}

void DiagonalizationBundle::set_cache_limit(std::size_t entries) const {
  cache_->limit = entries;
  evict_if_needed();
}

DiagonalizationBundle::DiagonalizationBundle(const ReducedModel& reduced,
                                             const TimeGrid& tg, int refine)
    : reduced_(reduced), tg_(tg), refine_(refine),
      cache_(std::make_shared<Cache>()) {
  if (refine < 0) throw std::invalid_argument("refine must be >= 0");
  cache_->b_levels.resize(refine + 1);
}

RealVec DiagonalizationBundle::density(int j) const {
  return reduced_.density(tg_.time(j));
}

Mat DiagonalizationBundle::d_t(const std::function<const Mat&(int)>& f,
                               int j) const {
  const Real h = tg_.dt();
  const int last = tg_.n_steps();
  if (j == 0) return (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h);
  if (j == last)
    return (3.0 * f(last) - 4.0 * f(last - 1) + f(last - 2)) / (2.0 * h);
  return (f(j + 1) - f(j - 1)) / (2.0 * h);
}

const Mat& DiagonalizationBundle::eps_i(int j) const {
  auto it = cache_->eps.find(j);
  if (it != cache_->eps.end()) return it->second;
  const Real t = tg_.time(j);
  GridOperator root =
      fractional_power_spectral(reduced_.spatial_op(t), 0.5, density(j));
  return cache_->eps.emplace(j, std::move(root.matrix)).first->second;
}

const Mat& DiagonalizationBundle::b_at_level(int level, int j) const {
  if (level == 0) return eps_i(j);
  auto& table = cache_->b_levels[level];
  auto it = table.find(j);
  if (it != table.end()) return it->second;

  const Real t = tg_.time(j);
  const Mat& prev = b_at_level(level - 1, j);
  auto prev_fn = [this, level](int k) -> const Mat& {
    return b_at_level(level - 1, k);
  };
  const Mat dtb = d_t(prev_fn, j);
  const RealVec r = reduced_.damping(t);
  Mat target = reduced_.spatial_op(t).matrix + kI * dtb +
               kI * (r.cast<Complex>().asDiagonal() * prev);
  const RealVec sq = density(j).cwiseSqrt();
  // Principal square root of the near-Hermitian target: spectral root of the
  // Hermitian part, skew part folded in by the Sylvester relation
  // E d + d E = skew in the eigenbasis, then Newton-polished so b^2 matches
  // the full target.
  Mat flat = to_flat(target, sq);
  Mat hpart = hermitian_part(flat);
  Eigen::SelfAdjointEigenSolver<Mat> es(hpart);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("eigensolver failed in refinement sweep");
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::runtime_error(
        "refinement sweep lost positivity of the squared symbol");
  const Mat& v = es.eigenvectors();
  const RealVec roots = es.eigenvalues().cwiseSqrt();
  const int n = static_cast<int>(roots.size());
  Mat target_eb = v.adjoint() * flat * v;
  Mat b_eb = Mat::Zero(n, n);
  b_eb.diagonal() = roots.cast<Complex>();
  for (int polish = 0; polish < 3; ++polish) {
    Mat res = target_eb - b_eb * b_eb;
    for (int col = 0; col < n; ++col)
      for (int row = 0; row < n; ++row)
        b_eb(row, col) += res(row, col) / (roots(row) + roots(col));
  }
  Mat b = from_flat(v * b_eb * v.adjoint(), sq);
  return table.emplace(j, std::move(b)).first->second;
}

const Mat& DiagonalizationBundle::b_plus_i(int j) const {
  return b_at_level(refine_, j);
}

const Mat& DiagonalizationBundle::b_minus_i(int j) const {
  auto it = cache_->bminus.find(j);
  if (it != cache_->bminus.end()) return it->second;
  Mat bm = -weighted_adjoint_mat(b_plus_i(j), density(j));
  return cache_->bminus.emplace(j, std::move(bm)).first->second;
}

const Mat& DiagonalizationBundle::s_half_i(int j) const {
  auto it = cache_->shalf.find(j);
  if (it != cache_->shalf.end()) return it->second;
  const RealVec sq = density(j).cwiseSqrt();
  Mat gap = hermitian_part(to_flat(b_plus_i(j) - b_minus_i(j), sq));
  Eigen::SelfAdjointEigenSolver<Mat> es(gap);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("eigensolver failed on the symbol gap");
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::runtime_error("b+ - b- lost positive definiteness");
  Mat s_flat = es.eigenvectors() *
               es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() *
               es.eigenvectors().adjoint();
  Mat s = from_flat(s_flat, sq);
  return cache_->shalf.emplace(j, std::move(s)).first->second;
}

const BlockOperator& DiagonalizationBundle::t_op_i(int j) const {
  auto it = cache_->tmat.find(j);
  if (it != cache_->tmat.end()) return it->second;
  const Mat& s = s_half_i(j);
  const Complex c = -kI;  // 1/i
  Mat ul = c * s;
  Mat ur = -c * s;
  Mat ll = c * (b_plus_i(j) * s);
  Mat lr = -c * (b_minus_i(j) * s);
  BlockOperator t = BlockOperator::from_blocks(reduced_.grid(), ul, ur, ll, lr);
  return cache_->tmat.emplace(j, std::move(t)).first->second;
}

const BlockOperator& DiagonalizationBundle::t_inv_i(int j) const {
  auto it = cache_->tinv.find(j);
  if (it != cache_->tinv.end()) return it->second;
  const Mat& s = s_half_i(j);
  Mat ul = -kI * (s * b_minus_i(j));
  Mat ur = kI * s;
  Mat ll = -kI * (s * b_plus_i(j));
  Mat lr = kI * s;
  BlockOperator t = BlockOperator::from_blocks(reduced_.grid(), ul, ur, ll, lr);
  return cache_->tinv.emplace(j, std::move(t)).first->second;
}

const BlockOperator& DiagonalizationBundle::h_ad_i(int j) const {
  auto it = cache_->had.find(j);
  if (it != cache_->had.end()) return it->second;
  const Mat h = build_generator(reduced_, tg_.time(j)).mat();
  auto t_fn = [this](int k) -> const Mat& { return t_op_i(k).mat(); };
  const Mat dtt = d_t(t_fn, j);
  Mat had = t_inv_i(j).mat() * h * t_op_i(j).mat() + kI * (t_inv_i(j).mat() * dtt);
  BlockOperator out(reduced_.grid(), std::move(had));
  return cache_->had.emplace(j, std::move(out)).first->second;
}

// The density's time-drift makes the diagonal blocks of the conjugated
// generator skew by exactly (i/2)r; that part belongs to the diagonal
// generator (the stepper's density scalings integrate it), so it is kept
// and only the excess skew is discarded and reported.
static void hermitize_weighted(const Mat& raw, const RealVec& sq,
                               const RealVec& drift, Mat& herm_out,
                               Real& res_out) {
  Mat flat = to_flat(raw, sq);
  Mat h = hermitian_part(flat);
  Mat excess = flat - h;
  excess.diagonal() -= kI * 0.5 * drift.cast<Complex>();
  res_out = excess.norm();
  herm_out = from_flat(h, sq);
  herm_out.diagonal() += kI * 0.5 * drift.cast<Complex>();
}

const Mat& DiagonalizationBundle::eps_plus_i(int j) const {
  auto it = cache_->epsp.find(j);
  if (it != cache_->epsp.end()) return it->second;
  const RealVec sq = density(j).cwiseSqrt();
  const RealVec r = reduced_.damping(tg_.time(j));
  Mat hp, hm;
  Real rp = 0.0, rm = 0.0;
  hermitize_weighted(h_ad_i(j).ul(), sq, r, hp, rp);
  hermitize_weighted(h_ad_i(j).lr(), sq, r, hm, rm);
  cache_->herm_res[j] = std::max(rp, rm);
  cache_->epsm.emplace(j, std::move(hm));
  return cache_->epsp.emplace(j, std::move(hp)).first->second;
}

const Mat& DiagonalizationBundle::eps_minus_i(int j) const {
  auto it = cache_->epsm.find(j);
  if (it != cache_->epsm.end()) return it->second;
  eps_plus_i(j);  // fills both diagonal blocks
  return cache_->epsm.at(j);
}

Real DiagonalizationBundle::hermitization_residual(int j) const {
  evict_if_needed();
  eps_plus_i(j);
  return cache_->herm_res.at(j);
}

const BlockOperator& DiagonalizationBundle::v_ad_i(int j) const {
  auto it = cache_->vad.find(j);
  if (it != cache_->vad.end()) return it->second;
  const int n = reduced_.grid().n();
  Mat hd = Mat::Zero(2 * n, 2 * n);
  hd.topLeftCorner(n, n) = eps_plus_i(j);
  hd.bottomRightCorner(n, n) = eps_minus_i(j);
  Mat v = hd - h_ad_i(j).mat();
  BlockOperator out(reduced_.grid(), std::move(v));
  return cache_->vad.emplace(j, std::move(out)).first->second;
}

const Mat& DiagonalizationBundle::r_inf_plus_i(int j) const {
  auto it = cache_->rinfp.find(j);
  if (it != cache_->rinfp.end()) return it->second;
  const Real t = tg_.time(j);
  auto b_fn = [this](int k) -> const Mat& { return b_plus_i(k); };
  const Mat dtb = d_t(b_fn, j);
  const RealVec r = reduced_.damping(t);
  const Mat& b = b_plus_i(j);
  Mat rinf = reduced_.spatial_op(t).matrix - b * b + kI * dtb +
             kI * (r.cast<Complex>().asDiagonal() * b);
  return cache_->rinfp.emplace(j, std::move(rinf)).first->second;
}

const Mat& DiagonalizationBundle::r_inf_minus_i(int j) const {
  auto it = cache_->rinfm.find(j);
  if (it != cache_->rinfm.end()) return it->second;
  Mat rm = weighted_adjoint_mat(r_inf_plus_i(j), density(j));
  return cache_->rinfm.emplace(j, std::move(rm)).first->second;
}

// Public accessors: evict stale cache pages first, then hand out copies so
// later evictions cannot invalidate what the caller holds.
Mat DiagonalizationBundle::eps(int j) const {
  evict_if_needed();
  return eps_i(j);
}
Mat DiagonalizationBundle::b_plus(int j) const {
  evict_if_needed();
  return b_plus_i(j);
}
Mat DiagonalizationBundle::b_minus(int j) const {
  evict_if_needed();
  return b_minus_i(j);
}
Mat DiagonalizationBundle::s_half(int j) const {
  evict_if_needed();
  return s_half_i(j);
}
BlockOperator DiagonalizationBundle::t_op(int j) const {
  evict_if_needed();
  return t_op_i(j);
}
BlockOperator DiagonalizationBundle::t_inv(int j) const {
  evict_if_needed();
  return t_inv_i(j);
}
Mat DiagonalizationBundle::r_inf_plus(int j) const {
  evict_if_needed();
  return r_inf_plus_i(j);
}
Mat DiagonalizationBundle::r_inf_minus(int j) const {
  evict_if_needed();
  return r_inf_minus_i(j);
}
BlockOperator DiagonalizationBundle::h_ad(int j) const {
  evict_if_needed();
  return h_ad_i(j);
}
Mat DiagonalizationBundle::eps_plus(int j) const {
  evict_if_needed();
  return eps_plus_i(j);
}
Mat DiagonalizationBundle::eps_minus(int j) const {
  evict_if_needed();
  return eps_minus_i(j);
}
BlockOperator DiagonalizationBundle::v_ad(int j) const {
  evict_if_needed();
  return v_ad_i(j);
}

std::vector<Real> DiagonalizationBundle::remainder_ladder() const {
  // Weighted slab norm of the remainder family at each refinement level:
  // sqrt(sum_j w_j ||r_level(t_j)||_F^2).  The weights damp the tails the
  // same way the propagation norms do, so the ladder entry measures the
  // remainder as an element of the decaying class rather than at one time.
  std::vector<Real> out;
  for (int level = 0; level <= refine_; ++level) {
    auto b_fn = [this, level](int k) -> const Mat& {
      return b_at_level(level, k);
    };
    Real acc = 0;
    for (int j = 0; j <= tg_.n_steps(); ++j) {
      evict_if_needed();
      const Mat dtb = d_t(b_fn, j);
      const Real t = tg_.time(j);
      const RealVec r = reduced_.damping(t);
      const Mat& b = b_at_level(level, j);
      Mat rinf = reduced_.spatial_op(t).matrix - b * b + kI * dtb +
                 kI * (r.cast<Complex>().asDiagonal() * b);
      acc += tg_.weight(j) * rinf.squaredNorm();
    }
    out.push_back(std::sqrt(acc));
  }
  return out;
}

DiagonalizationBundle diagonalization_bundle(const ReducedModel& reduced,
                                             const TimeGrid& tg, int refine) {
  return DiagonalizationBundle(reduced, tg, refine);
}

// ---------------------------------------------------------------------------
// FreeEvolution

FreeEvolution::FreeEvolution(const GridOperator& a) : grid_(a.grid) {
  const int n = a.n();
  RealVec rho = a.selfadjoint_density.value_or(RealVec::Ones(n));
  sq_ = rho.cwiseSqrt();
  sqinv_ = sq_.cwiseInverse();
  Mat flat = hermitian_part(to_flat(a.matrix, sq_));
  Eigen::SelfAdjointEigenSolver<Mat> es(flat);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("eigensolver failed on the asymptotic operator");
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::runtime_error("asymptotic operator is not positive definite");
  vec_ = es.eigenvectors();
  omega_ = es.eigenvalues().cwiseSqrt();
}

Mat FreeEvolution::matrix(Real t, Real s) const {
  const int n = grid_->n();
  const Real tau = t - s;
  Vec cosd(n), sincd(n), wsind(n);
  for (int i = 0; i < n; ++i) {
    const Real w = omega_(i);
    cosd(i) = std::cos(w * tau);
    sincd(i) = (std::abs(w) > 0) ? std::sin(w * tau) / w : tau;
    wsind(i) = w * std::sin(w * tau);
  }
  Mat c = vec_ * cosd.asDiagonal() * vec_.adjoint();
  Mat s1 = vec_ * sincd.asDiagonal() * vec_.adjoint();
  Mat ws = vec_ * wsind.asDiagonal() * vec_.adjoint();
  Mat full(2 * n, 2 * n);
  full.topLeftCorner(n, n) = c;
  full.topRightCorner(n, n) = kI * s1;
  full.bottomLeftCorner(n, n) = kI * ws;
  full.bottomRightCorner(n, n) = c;
  scale_component_rows(full, sqinv_, sqinv_);
  scale_component_cols(full, sq_, sq_);
  return full;
}

Vec FreeEvolution::apply(Real s, Real t, const Vec& state) const {
  return matrix(t, s) * state;
}

// ---------------------------------------------------------------------------
// EvolutionTable

struct EvolutionTable::Step {
  Real dt = 0.0;
  RealVec khalf;         // e^{dt r_mid / 4}, upper-component factor
  Mat cosm, sincm, as1;  // wave factors at the frozen midpoint
  Mat expp, expm;        // diagonal-flavor exponentials
  RealVec sq_from, sq_to;
};

EvolutionTable::EvolutionTable(
    Flavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
    std::shared_ptr<const DiagonalizationBundle> bundle, StepperOptions options)
    : flavor_(flavor), reduced_(reduced), tg_(tg), bundle_(std::move(bundle)) {
  substeps_ = options.substeps > 0 ? options.substeps : 1;
  if ((flavor_ == Flavor::Ad || flavor_ == Flavor::Diag) && !bundle_)
    bundle_ = std::make_shared<DiagonalizationBundle>(reduced_, tg_, 0);
  if (flavor_ == Flavor::Free)
    free_ = std::make_shared<FreeEvolution>(reduced_.a_out());
  const int j0 = tg_.index_zero();
  fwd_[j0] = Mat::Identity(2 * grid().n(), 2 * grid().n());
  bwd_[j0] = fwd_[j0];
}

const SpatialGrid& EvolutionTable::grid() const { return reduced_.grid(); }

RealVec EvolutionTable::sqrt_density(Real t) const {
  return reduced_.density(t).cwiseSqrt();
}

EvolutionTable::Step EvolutionTable::make_step(Real t_mid, Real dt) const {
  Step s;
  s.dt = dt;
  s.sq_from = sqrt_density(t_mid - 0.5 * dt);
  s.sq_to = sqrt_density(t_mid + 0.5 * dt);
  if (flavor_ == Flavor::Diag) {
    const Real tl = tg_.time(0);
    Real pos = (t_mid - tl) / tg_.dt();
    int jl = std::clamp(static_cast<int>(std::floor(pos)), 0,
                        tg_.n_steps() - 1);
    const Real theta = std::clamp(pos - jl, 0.0, 1.0);
    Mat ep = (1.0 - theta) * bundle_->eps_plus(jl) +
             theta * bundle_->eps_plus(jl + 1);
    Mat em = (1.0 - theta) * bundle_->eps_minus(jl) +
             theta * bundle_->eps_minus(jl + 1);
    const RealVec sqm = sqrt_density(t_mid);
    Mat epf = hermitian_part(to_flat(ep, sqm));
    Mat emf = hermitian_part(to_flat(em, sqm));
    s.expp = exp_series(kI * dt * epf);
    s.expm = exp_series(kI * dt * emf);
    return s;
  }
  const RealVec r = reduced_.damping(t_mid);
  s.khalf = (0.25 * dt * r.array()).exp().matrix();
  const RealVec sqm = sqrt_density(t_mid);
  Mat acheck = hermitian_part(to_flat(reduced_.spatial_op(t_mid).matrix, sqm));
  Mat x = (dt * dt) * acheck;
  wave_series(x, s.cosm, s.sincm);
  s.sincm *= dt;
  s.as1 = acheck * s.sincm;
  return s;
}

void EvolutionTable::apply_step_inplace(const Step& s, Mat& m,
                                        bool from_left) const {
  const int n = grid().n();
  const RealVec sq_to_inv = s.sq_to.cwiseInverse();
  if (from_left) {
    scale_component_rows(m, s.sq_from, s.sq_from);
    if (flavor_ == Flavor::Diag) {
      m.topRows(n) = (s.expp * m.topRows(n)).eval();
      m.bottomRows(n) = (s.expm * m.bottomRows(n)).eval();
    } else {
      const RealVec kinv = s.khalf.cwiseInverse();
      scale_component_rows(m, s.khalf, kinv);
      Mat top = s.cosm * m.topRows(n) + kI * (s.sincm * m.bottomRows(n));
      Mat bot = kI * (s.as1 * m.topRows(n)) + s.cosm * m.bottomRows(n);
      m.topRows(n) = top;
      m.bottomRows(n) = bot;
      scale_component_rows(m, s.khalf, kinv);
    }
    scale_component_rows(m, sq_to_inv, sq_to_inv);
  } else {
    // m <- m * Step: walk the factors left to right.
    scale_component_cols(m, sq_to_inv, sq_to_inv);
    if (flavor_ == Flavor::Diag) {
      m.leftCols(n) = (m.leftCols(n) * s.expp).eval();
      m.rightCols(n) = (m.rightCols(n) * s.expm).eval();
    } else {
      const RealVec kinv = s.khalf.cwiseInverse();
      scale_component_cols(m, s.khalf, kinv);
      Mat left = m.leftCols(n) * s.cosm + kI * (m.rightCols(n) * s.as1);
      Mat right = kI * (m.leftCols(n) * s.sincm) + m.rightCols(n) * s.cosm;
      m.leftCols(n) = left;
      m.rightCols(n) = right;
      scale_component_cols(m, s.khalf, kinv);
    }
    scale_component_cols(m, s.sq_from, s.sq_from);
  }
}

void EvolutionTable::advance(Mat& m, int step_idx, bool inverse,
                             bool from_left) const {
  const Real t0 = tg_.time(step_idx);
  const Real t1 = tg_.time(step_idx + 1);
  if (flavor_ == Flavor::Free) {
    const Mat u = free_->matrix(inverse ? t0 : t1, inverse ? t1 : t0);
    if (from_left)
      m = (u * m).eval();
    else
      m = (m * u).eval();
    return;
  }
  const int jf = inverse ? step_idx + 1 : step_idx;
  const int jt = inverse ? step_idx : step_idx + 1;
  if (flavor_ == Flavor::Ad) {
    if (from_left)
      m = (bundle_->t_op(jf).mat() * m).eval();
    else
      m = (m * bundle_->t_inv(jt).mat()).eval();
  }
  const Real from = tg_.time(jf), to = tg_.time(jt);
  const Real h = (to - from) / substeps_;
  if (from_left) {
    for (int i = 0; i < substeps_; ++i)
      apply_step_inplace(make_step(from + (i + 0.5) * h, h), m, true);
  } else {
    for (int i = substeps_ - 1; i >= 0; --i)
      apply_step_inplace(make_step(from + (i + 0.5) * h, h), m, false);
  }
  if (flavor_ == Flavor::Ad) {
    if (from_left)
      m = (bundle_->t_inv(jt).mat() * m).eval();
    else
      m = (m * bundle_->t_op(jf).mat()).eval();
  }
}

Mat EvolutionTable::step_matrix(int j) const {
  Mat m = Mat::Identity(2 * grid().n(), 2 * grid().n());
  advance(m, j, false, true);
  return m;
}

Mat EvolutionTable::step_matrix_inverse(int j) const {
  Mat m = Mat::Identity(2 * grid().n(), 2 * grid().n());
  advance(m, j, true, true);
  return m;
}

Vec EvolutionTable::apply(int j_from, int j_to, Vec state) const {
  Mat m = state;
  int j = j_from;
  while (j < j_to) {
    advance(m, j, false, true);
    ++j;
  }
  while (j > j_to) {
    advance(m, j - 1, true, true);
    --j;
  }
  return m.col(0);
}

Vec EvolutionTable::apply(Real s, Real t, Vec state) const {
  return apply(tg_.index_of(s), tg_.index_of(t), std::move(state));
}

const Mat& EvolutionTable::column(int j) const {
  auto it = fwd_.find(j);
  if (it != fwd_.end()) return it->second;
  // Nearest cached anchor.
  auto hi = fwd_.lower_bound(j);
  auto anchor = hi;
  if (hi == fwd_.end() || (hi != fwd_.begin() &&
                           j - std::prev(hi)->first < hi->first - j))
    anchor = std::prev(hi);
  Mat m = anchor->second;
  int k = anchor->first;
  while (k < j) {
    advance(m, k, false, true);
    ++k;
  }
  while (k > j) {
    advance(m, k - 1, true, true);
    --k;
  }
  return fwd_.emplace(j, std::move(m)).first->second;
}

const Mat& EvolutionTable::column_rev(int j) const {
  auto it = bwd_.find(j);
  if (it != bwd_.end()) return it->second;
  auto hi = bwd_.lower_bound(j);
  auto anchor = hi;
  if (hi == bwd_.end() || (hi != bwd_.begin() &&
                           j - std::prev(hi)->first < hi->first - j))
    anchor = std::prev(hi);
  Mat m = anchor->second;
  int k = anchor->first;
  while (k < j) {
    advance(m, k, true, false);
    ++k;
  }
  while (k > j) {
    advance(m, k - 1, false, false);
    --k;
  }
  return bwd_.emplace(j, std::move(m)).first->second;
}

Mat EvolutionTable::matrix(Real t, Real s) const {
  return column(tg_.index_of(t)) * column_rev(tg_.index_of(s));
}

Vec evolve(Flavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
           Real s, Real t, const Vec& state,
           std::shared_ptr<const DiagonalizationBundle> bundle,
           StepperOptions options) {
  EvolutionTable table(flavor, reduced, tg, std::move(bundle), options);
  return table.apply(s, t, state);
}

// ---------------------------------------------------------------------------
// Space-time fields

Real ym_norm(const std::vector<Vec>& samples, const TimeGrid& tg,
             const SpatialGrid& grid, Real sobolev_index) {
  if (static_cast<int>(samples.size()) != tg.n_times())
    throw std::invalid_argument("sample count does not match the lattice");
  const GridOperator w =
      weight_operator(grid, WeightKind::Frequency, sobolev_index);
  Real acc = 0.0;
  for (int j = 0; j < tg.n_times(); ++j) {
    const Real nj = (w.matrix * samples[j]).norm();
    acc += tg.weight(j) * grid.dx() * nj * nj;
  }
  return std::sqrt(acc);
}

std::vector<Vec> apply_model_operator(const ReducedModel& reduced,
                                      const SpacetimeField& field) {
  const TimeGrid& tg = field.tg;
  const int n = field.n();
  const int nt = tg.n_times();
  const Real h = tg.dt();
  auto u1 = [&](int j) { return field.states[j].tail(n); };
  std::vector<Vec> out(nt);
  for (int j = 0; j < nt; ++j) {
    Vec dt1(n);
    if (j >= 2 && j + 2 < nt) {
      dt1 = (-u1(j + 2) + 8.0 * u1(j + 1) - 8.0 * u1(j - 1) + u1(j - 2)) /
            (12.0 * h);
    } else if (j >= 1 && j + 1 < nt) {
      dt1 = (u1(j + 1) - u1(j - 1)) / (2.0 * h);
    } else if (j == 0) {
      dt1 = (-3.0 * u1(0) + 4.0 * u1(1) - u1(2)) / (2.0 * h);
    } else {
      dt1 = (3.0 * u1(nt - 1) - 4.0 * u1(nt - 2) + u1(nt - 3)) / (2.0 * h);
    }
    const Real t = tg.time(j);
    const RealVec r = reduced.damping(t);
    out[j] = kI * dt1 + kI * (r.cast<Complex>().asDiagonal() * Vec(u1(j))) +
             reduced.spatial_op(t).matrix * field.states[j].head(n);
  }
  return out;
}

SpacetimeField solve_inhomogeneous(const ReducedModel& reduced,
                                   const TimeGrid& tg, const CauchyDatum& v,
                                   const std::function<Vec(Real)>& f,
                                   StepperOptions options) {
  EvolutionTable table(Flavor::Full, reduced, tg, nullptr, options);
  const int n = reduced.grid().n();
  const int nt = tg.n_times();
  const int j0 = tg.index_zero();
  const Real half = 0.5 * tg.dt();

  std::vector<Vec> g(nt);
  auto source = [&](int j) -> const Vec& {
    if (g[j].size() == 0) {
      g[j] = Vec::Zero(2 * n);
      g[j].tail(n) = -kI * f(tg.time(j));
    }
    return g[j];
  };

  SpacetimeField field{reduced.grid_ptr(), tg, std::vector<Vec>(nt)};
  field.states[j0] = v.stacked();
  for (int j = j0; j < nt - 1; ++j) {
    Vec z = table.apply(j, j + 1, field.states[j] + half * source(j));
    field.states[j + 1] = z + half * source(j + 1);
  }
  for (int j = j0; j > 0; --j) {
    Vec z = table.apply(j, j - 1, field.states[j] - half * source(j));
    field.states[j - 1] = z - half * source(j - 1);
  }
  return field;
}

}  // namespace kgscat
