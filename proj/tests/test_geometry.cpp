#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "flowlab/geometry.hpp"
#include "flowlab/rng.hpp"

using namespace flowlab;

namespace {

Eigen::MatrixXd gaussian_matrix(int n, int d, uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
    return m;
}

Eigen::MatrixXd random_rotation(int d, uint64_t seed) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(d, d, seed));
    return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

Spectrum spectrum_of(std::vector<double> evals) {
    Spectrum s;
    s.eigenvalues = std::move(evals);
    s.total_variance = 0.0;
    for (double v : s.eigenvalues) s.total_variance += v;
    s.normalized.resize(s.eigenvalues.size(), 0.0);
    if (s.total_variance > 0)
        for (size_t i = 0; i < s.eigenvalues.size(); ++i) s.normalized[i] = s.eigenvalues[i] / s.total_variance;
    return s;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("pca spectrum hand cases") {
    SUBCASE("identical points give a zero spectrum") {
        Eigen::MatrixXd data = Eigen::MatrixXd::Ones(5, 3);
        const Spectrum s = pca_spectrum(data, 3);
        for (double v : s.eigenvalues) CHECK(v == 0.0);
        CHECK_THROWS_WITH_AS(effective_rank(s), "effective_rank: all-zero spectrum", std::runtime_error);
    }
    SUBCASE("two antipodal points use the N-1 divisor") {
        Eigen::MatrixXd data(2, 2);
        data << 1, 0, -1, 0;
        const Spectrum s = pca_spectrum(data, 2);
        CHECK(s.eigenvalues[0] == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(s.eigenvalues[1] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("isotropic gaussian eigenvalues are near one") {
        const auto data = gaussian_matrix(10000, 5, 42);
        const Spectrum s = pca_spectrum(data, 5);
        for (double v : s.eigenvalues) CHECK(v == doctest::Approx(1.0).epsilon(0.1));
    }
    SUBCASE("gram path matches covariance path") {
        const auto wide = gaussian_matrix(20, 50, 43);  // D > N: gram trick
        const Spectrum a = pca_spectrum(wide, 10);
        // same spectrum via the covariance of the transposed problem is not
        // equivalent, so check against explicit covariance eigenvalues
        Eigen::MatrixXd centered = wide.rowwise() - wide.colwise().mean();
        Eigen::MatrixXd cov = centered.transpose() * centered / double(wide.rows() - 1);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
        for (int i = 0; i < 10; ++i)
            CHECK(a.eigenvalues[i] == doctest::Approx(es.eigenvalues()(49 - i)).epsilon(1e-9));
    }
    CHECK_THROWS(pca_spectrum(Eigen::MatrixXd::Zero(1, 3), 1));  // N < 2
}

TEST_CASE("effective rank hand values") {
    CHECK(effective_rank(spectrum_of({1, 1, 1, 1, 1, 1})) == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(effective_rank(spectrum_of({1, 0, 0})) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(effective_rank(spectrum_of({2, 1, 1})) == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-9));
}

TEST_CASE("effective rank invariances") {
    const int n = 400, d = 12;
    Eigen::MatrixXd data = gaussian_matrix(n, d, 7);
    data.rightCols(6) *= 0.1;  // anisotropic
    const double base = effective_rank(pca_spectrum(data, d));

    const Eigen::MatrixXd rot = data * random_rotation(d, 8);
    CHECK(effective_rank(pca_spectrum(rot, d)) == doctest::Approx(base).epsilon(1e-6));

    const Eigen::MatrixXd scaled = -3.7 * data;
    CHECK(effective_rank(pca_spectrum(scaled, d)) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("twonn hand value on a 3-point line") {
    Eigen::MatrixXd data(3, 1);
    data << 0, 1, 3;
    const TwoNNResult r = twonn(data, 3, 1, 1);
    // mu = {3, 2, 1.5}: d = 3 / (ln 3 + ln 2 + ln 1.5)
    CHECK(r.mean == doctest::Approx(3.0 / (std::log(3.0) + std::log(2.0) + std::log(1.5))).epsilon(1e-9));
}

TEST_CASE("twonn estimates the intrinsic dimension of simple manifolds") {
    SUBCASE("uniform points in the unit square") {
        Rng rng(101);
        Eigen::MatrixXd data(5000, 2);
        for (int i = 0; i < 5000; ++i)
            for (int j = 0; j < 2; ++j) data(i, j) = rng.uniform();
        const TwoNNResult r = twonn(data, 5000, 3, 2);
        CHECK(r.mean > 1.8);
        CHECK(r.mean < 2.2);
    }
    SUBCASE("5-cube embedded in 50 dimensions") {
        Rng rng(102);
        Eigen::MatrixXd lat(5000, 5);
        for (int i = 0; i < 5000; ++i)
            for (int j = 0; j < 5; ++j) lat(i, j) = rng.uniform();
        Eigen::MatrixXd embed = gaussian_matrix(5, 50, 103);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(embed.transpose());
        const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(50, 5);
        const Eigen::MatrixXd data = lat * q.transpose();
        const TwoNNResult r = twonn(data, 5000, 3, 3);
        CHECK(r.mean > 4.4);
        CHECK(r.mean < 5.6);
    }
}

TEST_CASE("twonn is invariant under global isometry") {
    const auto data = gaussian_matrix(800, 6, 55);
    const TwoNNResult base = twonn(data, 800, 2, 9);
    Eigen::MatrixXd moved = data * random_rotation(6, 56);
    moved.rowwise() += Eigen::RowVectorXd::Constant(6, 13.5);
    const TwoNNResult iso = twonn(moved, 800, 2, 9);
    CHECK(iso.mean == doctest::Approx(base.mean).epsilon(1e-6));
}

TEST_CASE("twonn drops duplicates and rejects degenerate sets") {
    Eigen::MatrixXd data(7, 1);
    data << 0, 0, 10, 11, 13, 17, 25;  // the pair at 0 carries no ratio information
    const TwoNNResult r = twonn(data, 7, 1, 4);
    CHECK(r.dropped_duplicates > 0);
    CHECK(r.mean > 0.0);

    Eigen::MatrixXd degenerate = Eigen::MatrixXd::Zero(5, 2);
    CHECK_THROWS(twonn(degenerate, 5, 1, 5));
    CHECK_THROWS(twonn(data, 2, 1, 6));  // subsample < 3
}

TEST_CASE("excess kurtosis of known distributions") {
    const int n = 200000;
    Rng rng(21);
    Eigen::MatrixXd data(n, 3);
    for (int i = 0; i < n; ++i) {
        data(i, 0) = rng.normal();
        data(i, 1) = rng.uniform();  // excess kurtosis -6/5
        const double u = std::max(rng.uniform(), 1e-12);
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        data(i, 2) = sign * -std::log(u);  // Laplace, excess kurtosis +3
    }
    int constants = 0;
    const auto kappa = excess_kurtosis(data, &constants);
    CHECK(constants == 0);
    CHECK(std::abs(kappa[0]) < 0.1);
    CHECK(kappa[1] == doctest::Approx(-1.2).epsilon(0.05 / 1.2));
    CHECK(kappa[2] == doctest::Approx(3.0).epsilon(0.3 / 3.0));
}

TEST_CASE("excess kurtosis is invariant under per-dimension affine maps") {
    const auto data = gaussian_matrix(5000, 4, 22);
    const auto base = excess_kurtosis(data);
    Eigen::MatrixXd mapped = data;
    mapped.col(0) = 5.0 * mapped.col(0).array() + 3.0;
    mapped.col(1) = -0.2 * mapped.col(1).array() - 7.0;
    const auto after = excess_kurtosis(mapped);
    for (int j = 0; j < 4; ++j) CHECK(after[j] == doctest::Approx(base[j]).epsilon(1e-8));
}

TEST_CASE("constant dimensions are flagged with kappa zero") {
    Eigen::MatrixXd data = gaussian_matrix(100, 2, 23);
    data.col(1).setConstant(4.0);
    int constants = 0;
    const auto kappa = excess_kurtosis(data, &constants);
    CHECK(constants == 1);
    CHECK(kappa[1] == 0.0);
}

TEST_CASE("conditioning curve hand values and limits") {
    const Spectrum iso = spectrum_of({1, 1, 1});
    for (const auto& [t, k] : conditioning_curve(iso, {0.0, 0.3, 0.9})) CHECK(k == doctest::Approx(1.0));

    const Spectrum aniso = spectrum_of({100, 1});
    const auto curve = conditioning_curve(aniso, {0.0, 0.9});
    CHECK(curve[0].second == 1.0);  // kappa(Sigma_0) = 1 exactly
    CHECK(curve[1].second == doctest::Approx(81.01 / 0.82).epsilon(1e-6));

    const Spectrum rank1 = spectrum_of({5, 0});
    const auto inf_curve = conditioning_curve(rank1, {1.0});
    CHECK(std::isinf(inf_curve[0].second));
}

TEST_CASE("conditioning curve is monotone nondecreasing for random PSD spectra") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> evals(8);
        for (auto& v : evals) v = std::exp(rng.normal());
        std::sort(evals.rbegin(), evals.rend());
        std::vector<double> ts(101);
        for (int i = 0; i <= 100; ++i) ts[i] = i / 100.0;
        const auto curve = conditioning_curve(spectrum_of(evals), ts);
        for (size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].second >= curve[i - 1].second - 1e-12);
    }
}

TEST_CASE("interpolation score on the unit circle") {
    ManifoldOracle circle = [](const Eigen::VectorXd& z) { return std::abs(1.0 - z.norm()); };
    Eigen::VectorXd a(2), b(2);
    a << 1, 0;
    b << -1, 0;

    SUBCASE("degenerate chord") {
        const auto curve = interpolation_score({{a, a}}, 5, circle, 1e-9);
        for (const auto& [t, d2] : curve) CHECK(d2 == doctest::Approx(0.0));
    }
    SUBCASE("antipodal endpoints pass through the center") {
        const auto curve = interpolation_score({{a, b}}, 3, circle, 1e-9);
        CHECK(curve[0].second == doctest::Approx(0.0));
        CHECK(curve[1].second == doctest::Approx(1.0));  // midpoint at the origin
        CHECK(curve[2].second == doctest::Approx(0.0));
    }
    SUBCASE("off-manifold endpoints are rejected") {
        Eigen::VectorXd far(2);
        far << 3, 0;
        CHECK_THROWS(interpolation_score({{a, far}}, 3, circle, 1e-9));
    }
}

TEST_CASE("geometry report composes the diagnostics") {
    GeometryConfig cfg;
    cfg.twonn_subsample = 2000;
    cfg.twonn_bootstraps = 3;

    SUBCASE("isotropic gaussian in 32 dims") {
        const auto data = gaussian_matrix(10000, 32, 61);
        const GeometryReport r = geometry_report(data, cfg, 61);
        CHECK(r.effective_rank >= 30.0);
        CHECK(r.kurtosis.median_abs < 0.1);
        double kappa09 = 0.0;
        for (const auto& [t, k] : r.conditioning_curve)
            if (std::abs(t - 0.9) < 1e-12) kappa09 = k;
        CHECK(kappa09 < 2.0);
        CHECK(r.sample_count == 10000);
    }
    SUBCASE("rank-3 gaussian embedded in 32 dims") {
        const auto lat = gaussian_matrix(8000, 3, 62);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(32, 3, 63));
        const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(32, 3);
        const Eigen::MatrixXd data = lat * q.transpose();
        const GeometryReport r = geometry_report(data, cfg, 64);
        CHECK(r.effective_rank <= 3.2);
        CHECK(r.intrinsic_dim_mean > 2.5);
        CHECK(r.intrinsic_dim_mean < 3.5);
    }
    SUBCASE("constant dataset is an error") {
        CHECK_THROWS(geometry_report(Eigen::MatrixXd::Ones(100, 8), cfg, 65));
    }
}

}  // TEST_SUITE
