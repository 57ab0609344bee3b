#include <doctest.h>

#include <cmath>
#include <map>

#include "flowlab/geometry.hpp"
#include "flowlab/rng.hpp"
#include "flowlab/synthdata.hpp"

using namespace flowlab;

namespace {

GeneratorSpec make_spec(const std::string& kind, uint64_t seed) {
    GeneratorSpec spec;
    spec.kind = kind;
    spec.apply_kind_defaults();
    spec.seed = seed;
    return spec;
}

double kappa_at(const GeometryReport& r, double t) {
    for (const auto& [ti, k] : r.conditioning_curve)
        if (std::abs(ti - t) < 1e-12) return k;
    return 0.0;
}

}  // namespace

TEST_SUITE("synthdata") {

TEST_CASE("generation is deterministic and shape-consistent") {
    const auto spec = make_spec("shell", 7);
    SynthGenerator gen(spec);
    const FeatureBatch a = gen.generate(64);
    const FeatureBatch b = gen.generate(64);
    CHECK(a.patches == b.patches);
    CHECK(a.cls == b.cls);
    CHECK(a.labels == b.labels);
    a.check_consistent();
    CHECK(a.c == 8);
    CHECK(a.h == 4);
    CHECK(a.w == 4);
    for (float v : a.patches) CHECK(std::isfinite(v));
}

TEST_CASE("gmm2d is the ring mixture") {
    const auto spec = make_spec("gmm2d", 11);
    SynthGenerator gen(spec);
    const FeatureBatch fb = gen.generate(4000);
    CHECK(fb.c == 2);
    CHECK(fb.h == 1);
    CHECK(fb.w == 1);
    // class-conditional means sit on the radius-4 circle
    std::map<int32_t, std::pair<double, double>> sums;
    std::map<int32_t, int> counts;
    for (int i = 0; i < fb.b; ++i) {
        sums[fb.labels[i]].first += fb.sample(i)[0];
        sums[fb.labels[i]].second += fb.sample(i)[1];
        counts[fb.labels[i]]++;
    }
    CHECK(counts.size() == 8);
    for (const auto& [label, s] : sums) {
        const double mx = s.first / counts[label], my = s.second / counts[label];
        CHECK(std::sqrt(mx * mx + my * my) == doctest::Approx(4.0).epsilon(0.05));
    }
}

TEST_CASE("norm pinning holds exactly on shell tokens") {
    const auto spec = make_spec("shell", 13);
    SynthGenerator gen(spec);
    const FeatureBatch fb = gen.generate(128);
    const int hw = fb.h * fb.w;
    for (int i = 0; i < fb.b; ++i)
        for (int k = 0; k < hw; ++k) {
            double n2 = 0.0;
            for (int c = 0; c < fb.c; ++c) {
                const double v = fb.sample(i)[c * hw + k];
                n2 += v * v;
            }
            CHECK(n2 == doctest::Approx(double(fb.c)).epsilon(1e-3));
        }
    // CLS is pinned as well
    for (int i = 0; i < fb.b; ++i) {
        double n2 = 0.0;
        for (int c = 0; c < fb.c; ++c) n2 += double(fb.cls_row(i)[c]) * fb.cls_row(i)[c];
        CHECK(n2 == doctest::Approx(double(fb.c)).epsilon(1e-3));
    }
}

TEST_CASE("condition-number shaping is infeasible for a 1-dim latent") {
    GeneratorSpec spec = make_spec("spiky", 3);
    spec.intrinsic_dim = 1;
    CHECK_THROWS(SynthGenerator{spec});
}

TEST_CASE("affine manifold distance is a closed-form projection") {
    GeneratorSpec spec = make_spec("spiky", 17);
    SynthGenerator gen(spec);
    REQUIRE(gen.is_affine());
    const FeatureBatch fb = gen.generate(16);
    const Eigen::MatrixXd flat = flatten_patches(fb);
    for (int i = 0; i < fb.b; ++i)
        CHECK(gen.manifold_distance(flat.row(i).transpose()) < 1e-4);  // f32 storage quantization

    // a point displaced orthogonally to the column space by norm 2 has distance 2
    const auto oracle = make_affine_oracle(gen);
    Eigen::VectorXd on = flat.row(0).transpose();
    Rng rng(18);
    Eigen::VectorXd dir(on.size());
    for (int j = 0; j < dir.size(); ++j) dir(j) = rng.normal();
    // project out the manifold directions via distances: build from residual
    Eigen::VectorXd probe = on + dir;
    const double d0 = gen.manifold_distance(probe);
    Eigen::VectorXd step = probe;  // walk along the residual direction
    // residual direction of `probe` relative to the subspace
    // (re-derive: r = probe - proj; oracle gives |r|)
    // construct the orthogonal displacement explicitly instead:
    Eigen::VectorXd r = dir;
    {
        // remove the component representable by latent moves: least squares
        // against 2*d_int sampled manifold directions
        const FeatureBatch basis_pts = gen.generate(64);
        const Eigen::MatrixXd pts = flatten_patches(basis_pts);
        Eigen::MatrixXd dirs(pts.rows() - 1, pts.cols());
        for (int i = 1; i < pts.rows(); ++i) dirs.row(i - 1) = pts.row(i) - pts.row(0);
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(dirs.transpose())
                                      .householderQ() *
                                  Eigen::MatrixXd::Identity(pts.cols(), spec.intrinsic_dim);
        r = dir - q * (q.transpose() * dir);
    }
    r *= 2.0 / r.norm();
    CHECK(gen.manifold_distance(on + r) == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(d0 >= 0.0);
    CHECK(oracle.endpoint_tolerance > 0.0);
}

TEST_CASE("nearest-neighbor oracle accepts fresh on-manifold samples") {
    const auto spec = make_spec("shell", 19);
    SynthGenerator gen(spec);
    CHECK(!gen.is_affine());
    CHECK_THROWS(gen.manifold_distance(Eigen::VectorXd::Zero(spec.ambient_dim())));  // missing cache

    const Eigen::MatrixXd ref = gen.reference_sample(20000);
    const auto oracle = make_nn_oracle(gen, ref, 19);
    const FeatureBatch fresh = gen.generate(32);
    const Eigen::MatrixXd flat = flatten_patches(fresh);
    for (int i = 0; i < fresh.b; ++i) CHECK(oracle.fn(flat.row(i).transpose()) < oracle.endpoint_tolerance);
    CHECK(oracle.nn_resolution > 0.0);
}

TEST_CASE("stratified split") {
    const auto spec = make_spec("shell", 23);
    SynthGenerator gen(spec);

    SUBCASE("80/20 on 100 samples") {
        const FeatureBatch fb = gen.generate(100);
        const auto [train, eval] = train_eval_split(fb, 0.8);
        CHECK(train.b + eval.b == 100);
        CHECK(train.b >= 75);
        CHECK(eval.b >= 15);
    }
    SUBCASE("balanced classes split exactly") {
        FeatureBatch fb;
        fb.resize(100, 1, 1, 1);
        for (int i = 0; i < 100; ++i) fb.labels[i] = i / 10;  // 10 classes x 10
        const auto [train, eval] = train_eval_split(fb, 0.5);
        std::map<int32_t, int> tc, ec;
        for (auto l : train.labels) tc[l]++;
        for (auto l : eval.labels) ec[l]++;
        for (int k = 0; k < 10; ++k) {
            CHECK(tc[k] == 5);
            CHECK(ec[k] == 5);
        }
    }
    SUBCASE("error paths") {
        const FeatureBatch fb = gen.generate(100);
        CHECK_THROWS(train_eval_split(fb, 0.0));
        CHECK_THROWS(train_eval_split(fb, 1.0));
        FeatureBatch tiny;
        tiny.resize(3, 1, 1, 1);
        tiny.labels = {0, 0, 1};  // class 1 has a single sample
        CHECK_THROWS(train_eval_split(tiny, 0.5));
    }
}

TEST_CASE("geometry orderings across the three regimes") {
    // desk-scale mirror of the pixel / VAE / DINOv2 comparison
    const int n = 8000;
    GeometryConfig cfg;
    cfg.twonn_subsample = 2000;
    cfg.twonn_bootstraps = 4;

    std::map<std::string, GeometryReport> reports;
    for (const std::string kind : {"shell", "mid", "spiky"}) {
        SynthGenerator gen(make_spec(kind, 2024));
        reports[kind] = geometry_report(flatten_patches(gen.generate(n)), cfg, 2024);
    }
    const auto& shell = reports["shell"];
    const auto& mid = reports["mid"];
    const auto& spiky = reports["spiky"];

    CHECK(shell.effective_rank > mid.effective_rank);
    CHECK(mid.effective_rank > spiky.effective_rank);
    CHECK(shell.effective_rank / spiky.effective_rank > 2.0);

    CHECK(shell.kurtosis.median_abs < mid.kurtosis.median_abs);
    CHECK(mid.kurtosis.median_abs < spiky.kurtosis.median_abs);

    CHECK(kappa_at(spiky, 0.9) / kappa_at(shell, 0.9) >= 5.0);

    CHECK(shell.intrinsic_dim_mean > 6.0);
    CHECK(shell.intrinsic_dim_mean < 10.0);
    CHECK(spiky.intrinsic_dim_mean > 6.0);
    CHECK(spiky.intrinsic_dim_mean < 10.0);
}

TEST_CASE("interpolation ordering: spiky chords leave the data, shell chords stay near") {
    const int n_ref = 20000;
    const int n_pairs = 60;
    std::map<std::string, double> mid_mse;
    for (const std::string kind : {"shell", "spiky"}) {
        SynthGenerator gen(make_spec(kind, 31));
        const Eigen::MatrixXd ref = gen.reference_sample(n_ref);
        const auto oracle = make_nn_oracle(gen, ref, 31);
        const FeatureBatch fb = gen.generate(4 * n_pairs);
        const Eigen::MatrixXd flat = flatten_patches(fb);
        std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
        std::map<int32_t, std::vector<int>> by_class;
        for (int i = 0; i < fb.b; ++i) by_class[fb.labels[i]].push_back(i);
        for (const auto& [label, idx] : by_class)
            for (size_t j = 0; j + 1 < idx.size() && pairs.size() < size_t(n_pairs); j += 2)
                pairs.emplace_back(flat.row(idx[j]).transpose(), flat.row(idx[j + 1]).transpose());
        const auto curve = interpolation_score(pairs, 11, oracle.fn, oracle.endpoint_tolerance);
        mid_mse[kind] = curve[5].second;  // t = 0.5
    }
    CHECK(mid_mse["spiky"] > mid_mse["shell"]);
}

}  // TEST_SUITE
