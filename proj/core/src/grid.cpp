#include "kgscat/grid.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace kgscat {

SpatialGrid::SpatialGrid(int n_points, Real box_length)
    : n_(n_points), length_(box_length) {
  if (n_ < 2) throw std::invalid_argument("grid needs at least 2 points");
  if (length_ <= 0) throw std::invalid_argument("box length must be positive");
  points_.resize(n_);
  wavenumbers_.resize(n_);
  const Real dx = length_ / n_;
  for (int i = 0; i < n_; ++i) points_[i] = -length_ / 2 + i * dx;
  for (int j = 0; j < n_; ++j) {
    const int m = (j <= n_ / 2) ? j : j - n_;
    wavenumbers_[j] = 2.0 * kPi * m / length_;
  }
  dft_.resize(n_, n_);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(n_));
  for (int m = 0; m < n_; ++m)
    for (int j = 0; j < n_; ++j)
      dft_(m, j) = scale * std::exp(Complex(0.0, -wavenumbers_[m] * points_[j]));
  idft_ = dft_.adjoint();
}

Mat SpatialGrid::multiplier(const Vec& symbol_values) const {
  return idft_ * symbol_values.asDiagonal() * dft_;
}

GridFunction::GridFunction(const SpatialGrid& g, Vec v)
    : grid(&g), values(std::move(v)) {
  if (values.size() != g.n())
    throw std::invalid_argument("grid function length mismatch");
}

GridFunction constant_function(const SpatialGrid& grid, Complex value) {
  return GridFunction(grid, Vec::Constant(grid.n(), value));
}

GridOperator::GridOperator(const SpatialGrid& g, Mat m, Real order,
                           std::optional<Real> decay,
                           std::optional<RealVec> density)
    : grid(&g),
      matrix(std::move(m)),
      claimed_order(order),
      claimed_decay(decay),
      selfadjoint_density(std::move(density)) {
  if (matrix.rows() != g.n() || matrix.cols() != g.n())
    throw std::invalid_argument("operator dimension mismatch");
}

CauchyDatum::CauchyDatum(GridFunction a, GridFunction b)
    : u0(std::move(a)), u1(std::move(b)) {
  if (u0.grid != u1.grid)
    throw std::invalid_argument("Cauchy components on different grids");
}

Vec CauchyDatum::stacked() const {
  Vec v(2 * u0.n());
  v.head(u0.n()) = u0.values;
  v.tail(u0.n()) = u1.values;
  return v;
}

CauchyDatum CauchyDatum::from_stacked(const SpatialGrid& g, const Vec& v) {
  if (v.size() != 2 * g.n())
    throw std::invalid_argument("stacked vector has wrong length");
  return CauchyDatum(GridFunction(g, v.head(g.n())),
                     GridFunction(g, v.tail(g.n())));
}

GridOperator fourier_derivative(const SpatialGrid& grid, int order) {
  if (order < 0) throw std::invalid_argument("derivative order must be >= 0");
  const int n = grid.n();
  Vec sym(n);
  for (int j = 0; j < n; ++j) {
    if (order % 2 == 1 && grid.is_nyquist(j)) {
      sym[j] = 0.0;
    } else {
      sym[j] = std::pow(Complex(0.0, grid.wavenumbers()[j]), order);
    }
  }
  return GridOperator(grid, grid.multiplier(sym), static_cast<Real>(order));
}

GridOperator weight_operator(const SpatialGrid& grid, WeightKind kind,
                             Real exponent) {
  const int n = grid.n();
  if (kind == WeightKind::Position) {
    Vec d(n);
    for (int i = 0; i < n; ++i)
      d[i] = std::pow(1.0 + grid.points()[i] * grid.points()[i], exponent / 2);
    return GridOperator(grid, Mat(d.asDiagonal()), 0.0);
  }
  Vec sym(n);
  for (int j = 0; j < n; ++j) {
    const Real k = grid.wavenumbers()[j];
    sym[j] = std::pow(1.0 + k * k, exponent / 2);
  }
  return GridOperator(grid, grid.multiplier(sym), exponent);
}

namespace {
void check_density(const RealVec& d, Eigen::Index n) {
  if (d.size() != n) throw std::invalid_argument("density length mismatch");
  if ((d.array() <= 0.0).any())
    throw std::invalid_argument("density must be strictly positive");
}

RealVec real_density(const GridFunction& density) {
  if (density.values.imag().cwiseAbs().maxCoeff() > 0.0)
    throw std::invalid_argument("density must be real");
  return density.values.real();
}
}  // namespace

Complex weighted_inner_product(const GridFunction& u, const GridFunction& v,
                               const GridFunction& density) {
  RealVec d = real_density(density);
  check_density(d, u.values.size());
  return u.grid->dx() *
         (u.values.conjugate().array() * v.values.array() * d.array()).sum();
}

Real sobolev_norm(const GridFunction& u, Real m) {
  const SpatialGrid& g = *u.grid;
  Vec hat = g.dft() * u.values;
  Real acc = 0.0;
  for (int j = 0; j < g.n(); ++j) {
    const Real k = g.wavenumbers()[j];
    acc += std::pow(1.0 + k * k, m) * std::norm(hat[j]);
  }
  return std::sqrt(g.dx() * acc);
}

Real energy_norm(const CauchyDatum& d, Real m) {
  const Real a = sobolev_norm(d.u0, m + 1);
  const Real b = sobolev_norm(d.u1, m);
  return std::sqrt(a * a + b * b);
}

GridOperator weighted_adjoint(const GridOperator& a, const RealVec& density) {
  check_density(density, a.matrix.rows());
  Mat adj = density.cwiseInverse().asDiagonal() * a.matrix.adjoint() *
            density.asDiagonal();
  return GridOperator(*a.grid, std::move(adj), a.claimed_order, a.claimed_decay);
}

GridOperator weighted_adjoint(const GridOperator& a, const GridFunction& density) {
  return weighted_adjoint(a, real_density(density));
}

Real weighted_selfadjoint_residual(const GridOperator& a, const RealVec& density) {
  return (a.matrix - weighted_adjoint(a, density).matrix).norm();
}

namespace {
nlohmann::json sidecar_json(const GridOperator& op) {
  nlohmann::json j;
  j["n_points"] = op.grid->n();
  j["box_length"] = op.grid->length();
  j["claimed_order"] = op.claimed_order;
  if (op.claimed_decay)
    j["claimed_decay"] = *op.claimed_decay;
  else
    j["claimed_decay"] = nullptr;
  return j;
}

void write_rows(std::ofstream& out, const Mat& m) {
  out.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j).real() << ',' << m(i, j).imag();
    }
    out << '\n';
  }
}

Mat read_rows(std::ifstream& in, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  std::string line;
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("csv: missing row");
    std::stringstream ss(line);
    std::string cell;
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (!std::getline(ss, cell, ',')) throw std::runtime_error("csv: short row");
      const Real re = std::stod(cell);
      if (!std::getline(ss, cell, ',')) throw std::runtime_error("csv: short row");
      m(i, j) = Complex(re, std::stod(cell));
    }
  }
  return m;
}
}  // namespace

void save_operator_csv(const std::string& path, const GridOperator& op) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  write_rows(out, op.matrix);
  std::ofstream side(path + ".json");
  side << sidecar_json(op).dump(2) << '\n';
}

GridOperator load_operator_csv(const std::string& path, const SpatialGrid& grid) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Mat m = read_rows(in, grid.n(), grid.n());
  Real order = 0.0;
  std::optional<Real> decay;
  std::ifstream side(path + ".json");
  if (side) {
    nlohmann::json j;
    side >> j;
    if (j.value("n_points", grid.n()) != grid.n())
      throw std::runtime_error("csv sidecar grid mismatch");
    order = j.value("claimed_order", 0.0);
    if (j.contains("claimed_decay") && !j["claimed_decay"].is_null())
      decay = j["claimed_decay"].get<Real>();
  }
  return GridOperator(grid, std::move(m), order, decay);
}

void save_function_csv(const std::string& path, const GridFunction& f) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  for (Eigen::Index i = 0; i < f.values.size(); ++i)
    out << f.values[i].real() << ',' << f.values[i].imag() << '\n';
  std::ofstream side(path + ".json");
  nlohmann::json j;
  j["n_points"] = f.grid->n();
  j["box_length"] = f.grid->length();
  side << j.dump(2) << '\n';
}

GridFunction load_function_csv(const std::string& path, const SpatialGrid& grid) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Vec v(grid.n());
  std::string line;
  for (int i = 0; i < grid.n(); ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("csv: missing row");
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const Real re = std::stod(cell);
    std::getline(ss, cell, ',');
    v[i] = Complex(re, std::stod(cell));
  }
  return GridFunction(grid, std::move(v));
}

}  // namespace kgscat
