#pragma once

#include <Eigen/Dense>
#include <optional>

#include "flowlab/config.hpp"
#include "flowlab/geometry.hpp"
#include "flowlab/tensor.hpp"

namespace flowlab {

// Deterministic generator artifacts derived from (spec, seed): the stacked
// per-token affine embedding with prescribed singular spectrum, the CLS map,
// and per-class latent mean shifts.
class SynthGenerator {
  public:
    explicit SynthGenerator(const GeneratorSpec& spec);

    const GeneratorSpec& spec() const { return spec_; }

    // Deterministic given (spec, n, seed): calling twice returns the same batch.
    FeatureBatch generate(int n) const;

    // Euclidean distance from z (flattened C*H*W) to the data manifold.
    // Pure-affine embeddings project onto the embedding's column space in
    // closed form; otherwise an on-manifold reference sample is required.
    double manifold_distance(const Eigen::VectorXd& z, const Eigen::MatrixXd* reference = nullptr) const;

    bool is_affine() const;

    // Reference cache for nearest-neighbor oracles (derived "reference" seed,
    // so it never collides with generate()).
    Eigen::MatrixXd reference_sample(int n) const;

    // Latent draw behind sample i of generate(n); used to match pair
    // separations across regimes.
    Eigen::VectorXd latent_of(int i) const;

    const Eigen::MatrixXd& class_shifts() const { return class_shifts_; }

  private:
    GeneratorSpec spec_;
    Eigen::MatrixXd embed_;        // D x d_int
    Eigen::VectorXd bias_;         // D
    Eigen::MatrixXd embed_basis_;  // D x d_int, orthonormal columns
    Eigen::MatrixXd cls_embed_;    // C x d_int
    Eigen::VectorXd cls_bias_;     // C
    Eigen::MatrixXd class_shifts_;  // num_classes x d_int
    Eigen::MatrixXd gmm_means_;     // gmm2d: 8 x 2
    double gmm_sigma_ = 0.3;

    void fill_sample(int index, float* patches, float* cls, int32_t* label) const;
};

// Manifold-distance oracle plus its calibration: `nn_resolution` is the
// median fresh-sample distance under the oracle, `endpoint_tolerance` bounds
// how far a valid on-manifold point may sit from it.
struct CalibratedOracle {
    ManifoldOracle fn;
    double nn_resolution = 0.0;
    double endpoint_tolerance = 0.0;
};

// Nearest-neighbor oracle against a cached reference sample (the shared
// pipeline used when comparing two regimes).
CalibratedOracle make_nn_oracle(const SynthGenerator& gen, const Eigen::MatrixXd& reference, uint64_t calib_seed);

// Closed-form subspace oracle; only valid for pure-affine embeddings.
CalibratedOracle make_affine_oracle(const SynthGenerator& gen);

// Same-class endpoint pairs for the interpolation score, restricted to points
// the oracle accepts (heavy-tail samples can sit beyond the reference cache's
// resolution and are not usable as endpoints).
std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> select_interpolation_pairs(
    const FeatureBatch& batch, const Eigen::MatrixXd& flat, const CalibratedOracle& oracle, int max_pairs);

// Deterministic label-stratified split.
std::pair<FeatureBatch, FeatureBatch> train_eval_split(const FeatureBatch& batch, double fraction);

// Flatten patches into an N x D (double) matrix for the geometry suite.
Eigen::MatrixXd flatten_patches(const FeatureBatch& batch);

}  // namespace flowlab
