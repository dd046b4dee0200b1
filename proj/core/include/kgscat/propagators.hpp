#pragma once

#include <memory>
#include <vector>

#include "kgscat/evolution.hpp"

namespace kgscat {

// Which inverse of the model operator a kernel realizes. Retarded/Advanced
// act through the full first-order evolution; AdRetarded/AdAdvanced through
// its conjugation by the diagonalizer frame (the same evolution seen in
// diagonalizing coordinates); DiagRetarded/DiagAdvanced through the purely
// diagonal evolution, which inverts only the diagonal part of the conjugated
// operator; FeynmanAd is the positive/negative frequency splice at the
// diagonal level; Feynman is its scalar pullback.
enum class PropFlavor {
  Retarded,
  Advanced,
  AdRetarded,
  AdAdvanced,
  DiagRetarded,
  DiagAdvanced,
  FeynmanAd,
  Feynman,
};

// Scalar kernels map scalar sources to scalar solutions through the
// pi_0 / pi_1^* embeddings; system kernels act directly on two-component
// sources. The diagonalized and Feynman-ad flavors are system-level by
// construction; the scalar Feynman wraps FeynmanAd in T / T^{-1}.
enum class PropLevel { Scalar, System };

struct PropagatorOptions {
  StepperOptions stepper{};
  // n * n_times cap for dense materialization.
  int dense_cap = 4096;
};

// Slab realization of one propagator: streaming application to space-time
// sources, per-block kernel evaluation, and optional dense materialization.
// Quadrature is the global trapezoid rule with the step function theta(t-s)
// carrying weight 1/2 at coincident times, which makes the retarded/advanced
// adjoint algebra and the Feynman positivity factorization exact at the
// discrete level.
class PropagatorKernel {
 public:
  PropagatorKernel(PropFlavor flavor, PropLevel level,
                   const ReducedModel& reduced, const TimeGrid& tg,
                   std::shared_ptr<const DiagonalizationBundle> bundle = nullptr,
                   PropagatorOptions options = {});

  PropFlavor flavor() const { return flavor_; }
  PropLevel level() const { return level_; }
  const TimeGrid& tg() const { return tg_; }
  const ReducedModel& reduced() const { return reduced_; }
  const SpatialGrid& grid() const { return reduced_.grid(); }
  std::shared_ptr<const DiagonalizationBundle> bundle() const {
    return bundle_;
  }

  // Apply to one source field or to a batch sharing a single slab sweep.
  SpacetimeField apply(const SpacetimeField& f) const;
  std::vector<SpacetimeField> apply(
      const std::vector<SpacetimeField>& fs) const;

  // Kernel block K(t_j, s_k): n x n at scalar level, 2n x 2n at system
  // level, without quadrature weights.
  Mat block(int j, int k) const;
  GridOperator block_operator(int j, int k) const;  // scalar level only

  // Dense quadrature operator mapping stacked source samples to stacked
  // output samples, source-side weights folded in; throws when
  // n * n_times exceeds the configured cap.
  Mat dense() const;

  // Defect of the exact two-point relation every quadrature solution
  // satisfies by construction,
  //   u_{j+1} = S_j u_j + (i/2)(w_j S_j f_j + w_{j+1} f_{j+1})
  // at the level of the kernel's underlying evolution (with the embedded
  // source and the conjugated states for the scalar flavors). Zero to
  // roundoff certifies that the sweep realizes the exact discrete inverse
  // pair; returned as a weighted-slab-norm ratio against the source.
  Real step_relation_defect(const std::vector<SpacetimeField>& sources,
                            const std::vector<SpacetimeField>& solutions) const;

 private:
  std::vector<Mat> apply_batch(const std::vector<Mat>& f) const;
  std::vector<Mat> causal_sweep(const std::vector<Mat>& f, bool retarded,
                                const EvolutionTable& table) const;
  std::vector<Mat> feynman_ad_sweep(const std::vector<Mat>& f) const;

  PropFlavor flavor_;
  PropLevel level_;
  ReducedModel reduced_;
  TimeGrid tg_;
  std::shared_ptr<const DiagonalizationBundle> bundle_;
  std::shared_ptr<EvolutionTable> table_;
  PropagatorOptions options_;
};

// One-call conveniences constructing a kernel and applying it.
SpacetimeField apply_retarded(PropLevel level, const ReducedModel& reduced,
                              const TimeGrid& tg, const SpacetimeField& f,
                              StepperOptions options = {});
SpacetimeField apply_advanced(PropLevel level, const ReducedModel& reduced,
                              const TimeGrid& tg, const SpacetimeField& f,
                              StepperOptions options = {});
SpacetimeField apply_feynman_ad(
    std::shared_ptr<const DiagonalizationBundle> bundle,
    const SpacetimeField& f_ad, StepperOptions options = {});
SpacetimeField apply_feynman(std::shared_ptr<const DiagonalizationBundle> bundle,
                             const SpacetimeField& f,
                             StepperOptions options = {});

// Conformal/chart transport of scalar sample families (size-n states)
// between the model frame and the original coordinates: samples are
// relabeled along the reduction chart and scaled by conformal-factor powers
// (chat^{1/2} for sources, chat^{3/2} for solutions), the two exponents the
// conformal conjugation of the wave operator splits between input and
// output. Round trips are exact by construction.
SpacetimeField source_to_model_frame(const ReducedModel& reduced,
                                     const SpacetimeField& f);
SpacetimeField source_to_original_frame(const ReducedModel& reduced,
                                        const SpacetimeField& f);
SpacetimeField solution_to_model_frame(const ReducedModel& reduced,
                                       const SpacetimeField& u);
SpacetimeField solution_to_original_frame(const ReducedModel& reduced,
                                          const SpacetimeField& u);

// Scalar Feynman application in the original coordinates: transport the
// source into the model frame, apply, transport the solution back.
SpacetimeField apply_feynman_original(
    std::shared_ptr<const DiagonalizationBundle> bundle,
    const SpacetimeField& f_original, StepperOptions options = {});

// First-order slab operators applied to stored two-component fields, with
// the same lattice time stencil as the scalar model operator:
// (D_t - H(t_j)) u_j and (D_t - H^ad(t_j)) u_j, D_t = i^{-1} d_t.
std::vector<Vec> apply_system_operator(const ReducedModel& reduced,
                                       const SpacetimeField& field);
std::vector<Vec> apply_ad_operator(const DiagonalizationBundle& bundle,
                                   const SpacetimeField& field);

// Minimum/maximum eigenvalue of the Hermitian form <f, i(G - G^*) f> over
// the weighted slab inner product (density-weighted, order-zero spatial
// weights), assembled densely from the kernel.
struct PositivityReport {
  Real min_eigenvalue = 0.0;
  Real max_eigenvalue = 0.0;
  int dimension = 0;
};
PositivityReport positivity_check(const PropagatorKernel& kernel);

// Residual statistics over random smooth sources. Two notions are tracked:
// the structural relation defect (the sweep's exact discrete inverse
// property, roundoff for every flavor and preset) and residuals against the
// independent finite-difference lattice operator, which carry the genuine
// discretization error plus, for the Feynman flavor, the compact remainder.
// Backward residuals use inputs generated inside the kernel's range (the
// discrete constrained space). For the Feynman flavor the forward residual
// is also compared against the diagonalized-remainder norm
// ||V^ad G^ad_F f^ad||, whose ratio the inversion theorems control.
struct InversionReport {
  Real max_relation_defect = 0.0;    // exact-inverse certificate, roundoff
  Real max_forward_residual = 0.0;   // ||P G f - f||_Y / ||f||_Y, lattice P
  Real max_backward_residual = 0.0;  // ||G P u - u||_Y / ||u||_Y, lattice P
  Real max_remainder_ratio = 0.0;    // Feynman only
  int samples = 0;
};
InversionReport inversion_report(
    PropFlavor flavor, const ReducedModel& reduced, const TimeGrid& tg,
    int sample_count,
    std::shared_ptr<const DiagonalizationBundle> bundle = nullptr,
    std::uint64_t seed = 0x9e3779b97f4a7c15ull);

// Seeded random source smooth in space and in time: a small sum of
// <D>^{-2}-smoothed Gaussian spatial profiles carried by Gaussian time
// envelopes centered well inside the slab; two-component when system is
// set, scalar otherwise.
SpacetimeField random_smooth_source(std::shared_ptr<const SpatialGrid> grid,
                                    const TimeGrid& tg, std::uint64_t seed,
                                    bool system = false);

}  // namespace kgscat
