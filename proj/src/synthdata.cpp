#include "flowlab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "flowlab/rng.hpp"

namespace flowlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

Eigen::MatrixXd random_gaussian(int rows, int cols, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

Eigen::MatrixXd orthonormal_columns(int rows, int cols, Rng& rng) {
    const Eigen::MatrixXd g = random_gaussian(rows, cols, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
    return q;
}

}  // namespace

SynthGenerator::SynthGenerator(const GeneratorSpec& spec) : spec_(spec) {
    spec_.validate();
    const int d = spec_.intrinsic_dim;
    const int D = spec_.ambient_dim();

    if (spec_.kind == "gmm2d") {
        gmm_means_.resize(spec_.num_classes, 2);
        for (int k = 0; k < spec_.num_classes; ++k) {
            const double a = 2.0 * kPi * k / spec_.num_classes;
            gmm_means_(k, 0) = 4.0 * std::cos(a);
            gmm_means_(k, 1) = 4.0 * std::sin(a);
        }
        return;
    }

    Rng rng_embed(substream_seed(spec_.seed, "embed"));
    const Eigen::MatrixXd u = orthonormal_columns(D, d, rng_embed);
    const Eigen::MatrixXd v = d > 1 ? orthonormal_columns(d, d, rng_embed) : Eigen::MatrixXd::Identity(1, 1);
    Eigen::VectorXd s(d);
    for (int i = 0; i < d; ++i)
        s(i) = d > 1 ? std::pow(spec_.cond_target, double(i) / double(d - 1)) : 1.0;
    embed_ = u * s.asDiagonal() * v.transpose();
    embed_basis_ = u;

    Rng rng_bias(substream_seed(spec_.seed, "bias"));
    bias_.resize(D);
    // unpinned manifolds are translation-invariant in every diagnostic; for
    // pinned tokens a larger bias keeps them on a locally flat spherical cap
    const double bias_scale = spec_.norm_pinning ? 2.5 : 1.0;
    for (int i = 0; i < D; ++i) bias_(i) = bias_scale * rng_bias.normal();

    Rng rng_cls(substream_seed(spec_.seed, "cls-map"));
    cls_embed_ = random_gaussian(spec_.channels, d, rng_cls) / std::sqrt(double(d));
    cls_bias_.resize(spec_.channels);
    for (int i = 0; i < spec_.channels; ++i) cls_bias_(i) = rng_cls.normal();

    Rng rng_shift(substream_seed(spec_.seed, "class-shifts"));
    class_shifts_.resize(spec_.num_classes, d);
    for (int k = 0; k < spec_.num_classes; ++k) {
        Eigen::VectorXd g(d);
        for (int i = 0; i < d; ++i) g(i) = rng_shift.normal();
        const double nrm = g.norm();
        if (nrm > 0) g *= spec_.class_shift_norm / nrm;
        class_shifts_.row(k) = g.transpose();
    }
}

bool SynthGenerator::is_affine() const { return spec_.kind != "gmm2d" && !spec_.norm_pinning; }

Eigen::VectorXd SynthGenerator::latent_of(int index) const {
    const int d = spec_.kind == "gmm2d" ? 2 : spec_.intrinsic_dim;
    Rng rng_label(step_seed(substream_seed(spec_.seed, "labels"), index));
    const int label = static_cast<int>(rng_label.uniform_int(spec_.num_classes));

    Rng rng_lat(step_seed(substream_seed(spec_.seed, "latent"), index));
    Eigen::VectorXd g(d);
    for (int i = 0; i < d; ++i) g(i) = rng_lat.normal();

    if (spec_.kind == "gmm2d") return gmm_means_.row(label).transpose() + gmm_sigma_ * g;

    if (spec_.tail_dof > 0) {
        // multivariate Student-t scaled to unit component variance
        const int nu = static_cast<int>(spec_.tail_dof);
        Rng rng_tail(step_seed(substream_seed(spec_.seed, "tails"), index));
        double chi2 = 0.0;
        for (int i = 0; i < nu; ++i) {
            const double h = rng_tail.normal();
            chi2 += h * h;
        }
        chi2 = std::max(chi2, 1e-12);
        g *= std::sqrt(double(nu - 2) / chi2);
    }
    return class_shifts_.row(label).transpose() + g;
}

void SynthGenerator::fill_sample(int index, float* patches, float* cls, int32_t* label) const {
    Rng rng_label(step_seed(substream_seed(spec_.seed, "labels"), index));
    *label = static_cast<int32_t>(rng_label.uniform_int(spec_.num_classes));

    const Eigen::VectorXd u = latent_of(index);
    const int C = spec_.channels, H = spec_.grid_h, W = spec_.grid_w;

    if (spec_.kind == "gmm2d") {
        patches[0] = static_cast<float>(u(0));
        patches[1] = static_cast<float>(u(1));
        cls[0] = static_cast<float>(u(0));
        cls[1] = static_cast<float>(u(1));
        return;
    }

    Eigen::VectorXd z = embed_ * u + bias_;  // flattened [C][H][W]
    if (spec_.norm_pinning) {
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double nrm2 = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double v = z(c * H * W + h * W + w);
                    nrm2 += v * v;
                }
                const double scale = std::sqrt(double(C)) / std::max(std::sqrt(nrm2), 1e-12);
                for (int c = 0; c < C; ++c) z(c * H * W + h * W + w) *= scale;
            }
    }
    for (int i = 0; i < C * H * W; ++i) patches[i] = static_cast<float>(z(i));

    Eigen::VectorXd zc = cls_embed_ * u + cls_bias_;
    zc *= std::sqrt(double(C)) / std::max(zc.norm(), 1e-12);
    for (int c = 0; c < C; ++c) cls[c] = static_cast<float>(zc(c));
}

FeatureBatch SynthGenerator::generate(int n) const {
    if (n < 1) throw std::runtime_error("generate: n must be >= 1");
    FeatureBatch out;
    out.resize(n, spec_.channels, spec_.grid_h, spec_.grid_w);
    for (int i = 0; i < n; ++i) fill_sample(i, out.sample(i), out.cls_row(i), &out.labels[i]);
    return out;
}

Eigen::MatrixXd SynthGenerator::reference_sample(int n) const {
    GeneratorSpec ref = spec_;
    ref.seed = substream_seed(spec_.seed, "reference");
    SynthGenerator gen(ref);
    return flatten_patches(gen.generate(n));
}

double SynthGenerator::manifold_distance(const Eigen::VectorXd& z, const Eigen::MatrixXd* reference) const {
    if (z.size() != spec_.ambient_dim()) throw std::runtime_error("manifold_distance: dimension mismatch");
    if (reference != nullptr) {
        double best = std::numeric_limits<double>::infinity();
        const Eigen::VectorXd dists =
            (reference->rowwise() - z.transpose()).rowwise().squaredNorm();
        best = dists.minCoeff();
        return std::sqrt(std::max(0.0, best));
    }
    if (!is_affine()) throw std::runtime_error("manifold_distance: missing reference cache for non-affine manifold");
    const Eigen::VectorXd r = z - bias_;
    const Eigen::VectorXd proj = embed_basis_ * (embed_basis_.transpose() * r);
    return (r - proj).norm();
}

CalibratedOracle make_nn_oracle(const SynthGenerator& gen, const Eigen::MatrixXd& reference, uint64_t calib_seed) {
    if (reference.rows() < 100) throw std::runtime_error("make_nn_oracle: reference cache too small");
    CalibratedOracle oracle;
    const Eigen::MatrixXd* ref = &reference;
    const SynthGenerator* g = &gen;
    oracle.fn = [g, ref](const Eigen::VectorXd& z) { return g->manifold_distance(z, ref); };

    // calibration: fresh-sample nearest-neighbor distances against the cache
    GeneratorSpec probe_spec = gen.spec();
    probe_spec.seed = substream_seed(calib_seed, "oracle-calibration");
    SynthGenerator probe(probe_spec);
    const Eigen::MatrixXd fresh = flatten_patches(probe.generate(256));
    std::vector<double> d(fresh.rows());
    double dmax = 0.0;
    for (Eigen::Index i = 0; i < fresh.rows(); ++i) {
        d[i] = oracle.fn(fresh.row(i).transpose());
        dmax = std::max(dmax, d[i]);
    }
    std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
    oracle.nn_resolution = d[d.size() / 2];
    oracle.endpoint_tolerance = 2.0 * dmax;
    return oracle;
}

CalibratedOracle make_affine_oracle(const SynthGenerator& gen) {
    if (!gen.is_affine()) throw std::runtime_error("make_affine_oracle: generator manifold is not affine");
    CalibratedOracle oracle;
    const SynthGenerator* g = &gen;
    oracle.fn = [g](const Eigen::VectorXd& z) { return g->manifold_distance(z, nullptr); };
    oracle.nn_resolution = 0.0;
    oracle.endpoint_tolerance = 1e-3 * std::sqrt(double(gen.spec().ambient_dim()));
    return oracle;
}

std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> select_interpolation_pairs(
    const FeatureBatch& batch, const Eigen::MatrixXd& flat, const CalibratedOracle& oracle, int max_pairs) {
    std::map<int32_t, std::vector<int>> by_class;
    for (int i = 0; i < batch.b; ++i) {
        if (oracle.fn(flat.row(i).transpose()) <= oracle.endpoint_tolerance) by_class[batch.labels[i]].push_back(i);
    }
    std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
    for (const auto& [label, idx] : by_class)
        for (size_t j = 0; j + 1 < idx.size() && pairs.size() < size_t(max_pairs); j += 2)
            pairs.emplace_back(flat.row(idx[j]).transpose(), flat.row(idx[j + 1]).transpose());
    if (pairs.empty()) throw std::runtime_error("select_interpolation_pairs: no on-manifold pairs found");
    return pairs;
}

std::pair<FeatureBatch, FeatureBatch> train_eval_split(const FeatureBatch& batch, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::runtime_error("train_eval_split: fraction must be in (0,1)");
    batch.check_consistent();

    std::map<int32_t, std::vector<int>> by_class;
    for (int i = 0; i < batch.b; ++i) by_class[batch.labels[i]].push_back(i);

    std::vector<int> train_idx, eval_idx;
    for (const auto& [label, idx] : by_class) {
        const int nc = static_cast<int>(idx.size());
        if (nc < 2)
            throw std::runtime_error("train_eval_split: class " + std::to_string(label) + " has fewer than 2 samples");
        int ntrain = static_cast<int>(std::lround(fraction * nc));
        ntrain = std::clamp(ntrain, 1, nc - 1);
        for (int j = 0; j < nc; ++j) (j < ntrain ? train_idx : eval_idx).push_back(idx[j]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(eval_idx.begin(), eval_idx.end());
    return {batch.select(train_idx), batch.select(eval_idx)};
}

Eigen::MatrixXd flatten_patches(const FeatureBatch& batch) {
    const auto d = static_cast<Eigen::Index>(batch.patch_dim());
    Eigen::MatrixXd m(batch.b, d);
    for (int i = 0; i < batch.b; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = batch.sample(i)[j];
    return m;
}

}  // namespace flowlab
