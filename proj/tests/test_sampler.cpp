#include <doctest.h>

#include <cmath>

#include "flowlab/rng.hpp"
#include "flowlab/sampler.hpp"

using namespace flowlab;

namespace {

struct ConstField : VelocityField {
    int c, h, w;
    float value;
    ConstField(int c_, int h_, int w_, float v) : c(c_), h(h_), w(w_), value(v) {}
    int channels() const override { return c; }
    int grid_h() const override { return h; }
    int grid_w() const override { return w; }
    void eval(int B, const float*, const float*, double, const int32_t*, float* v, float* v_cls) override {
        for (int j = 0; j < B * c * h * w; ++j) v[j] = value;
        for (int j = 0; j < B * c; ++j) v_cls[j] = value;
    }
};

struct LinearField : VelocityField {
    int channels() const override { return 1; }
    int grid_h() const override { return 1; }
    int grid_w() const override { return 1; }
    void eval(int B, const float* z, const float* z_cls, double, const int32_t*, float* v, float* v_cls) override {
        for (int j = 0; j < B; ++j) v[j] = z[j];
        for (int j = 0; j < B; ++j) v_cls[j] = z_cls[j];
    }
};

TimeGrid span_grid(double lo, double hi, int k) {
    TimeGrid g;
    g.kind = "custom";
    g.knots.resize(k + 1);
    for (int i = 0; i <= k; ++i) g.knots[i] = lo + (hi - lo) * double(i) / k;
    return g;
}

SamplerConfig defaults() { return SamplerConfig{}; }

Denoiser random_net(uint64_t seed) {
    DenoiserConfig cfg;
    cfg.hidden_dim = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.channels = 4;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    cfg.num_classes = 3;
    cfg.time_feat_dim = 8;
    Denoiser net(cfg);
    Rng rng(seed);
    net.randomize_all(rng, 0.3);
    return net;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("schedule knots match the table formulas") {
    const SamplerConfig p = defaults();

    const TimeGrid uniform = make_grid("uniform", 2, p);
    CHECK(uniform.knots == std::vector<double>{0.0, 0.5, 1.0});

    const TimeGrid power2 = make_grid("power2", 2, p);
    CHECK(power2.knots[0] == 0.0);
    CHECK(power2.knots[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(power2.knots[2] == 1.0);

    const TimeGrid edm = make_grid("edm", 10, p);
    CHECK(edm.knots.front() == doctest::Approx(1.0 / 81.0).epsilon(1e-9));
    CHECK(edm.knots.back() == doctest::Approx(1.0 / 1.002).epsilon(1e-9));

    const TimeGrid logsnr = make_grid("logsnr", 10, p);
    CHECK(logsnr.knots.front() == doctest::Approx(0.001).epsilon(1e-9));
    CHECK(logsnr.knots.back() == doctest::Approx(0.999).epsilon(1e-9));

    const TimeGrid cosine = make_grid("cosine", 2, p);
    CHECK(cosine.knots[1] == doctest::Approx(0.5).epsilon(1e-12));

    SamplerConfig p49 = p;
    p49.shift_s = 4.9;
    const TimeGrid shift = make_grid("timeshift", 2, p49);
    CHECK(shift.knots[0] == doctest::Approx(0.0));
    CHECK(shift.knots[1] == doctest::Approx(1.0 - 2.45 / 2.95).epsilon(1e-9));
    CHECK(shift.knots[2] == doctest::Approx(1.0));
}

TEST_CASE("cosine and uniform share the identical 2-step grid") {
    const SamplerConfig p = defaults();
    const TimeGrid a = make_grid("uniform", 2, p);
    const TimeGrid b = make_grid("cosine", 2, p);
    for (int i = 0; i < 3; ++i) CHECK(a.knots[i] == doctest::Approx(b.knots[i]).epsilon(1e-12));
}

TEST_CASE("grids are strictly increasing and clamped") {
    SamplerConfig p = defaults();
    p.t_max = 0.95;
    for (const std::string kind : {"uniform", "cosine", "logsnr", "edm", "power2", "timeshift"}) {
        const TimeGrid g = make_grid(kind, 25, p);
        CHECK(g.knots.front() >= 0.0);
        CHECK(g.knots.back() <= 0.95 + 1e-12);
        for (size_t i = 1; i < g.knots.size(); ++i) CHECK(g.knots[i] > g.knots[i - 1]);
    }
    SamplerConfig bad = defaults();
    bad.edm_sigma_min = 100.0;  // sigma_min >= sigma_max
    CHECK_THROWS(make_grid("edm", 5, bad));
    CHECK_THROWS(make_grid("nope", 5, defaults()));
}

TEST_CASE("constant fields integrate exactly under both solvers and any grid") {
    const SamplerConfig p = defaults();
    ConstField field(2, 2, 2, 0.75f);
    const std::vector<int32_t> labels(3, 0);
    for (const std::string solver : {"euler", "heun"}) {
        for (const std::string kind : {"uniform", "power2", "timeshift"}) {
            const TimeGrid g = make_grid(kind, 7, p);
            const FeatureBatch out = integrate(field, g, labels, 9, solver, "independent", 1.0, nullptr);
            // endpoint = z0 + value * (t_K - t_0) with t_0 = 0, t_K = 1
            Rng check(substream_seed(9, "patch"));
            for (size_t j = 0; j < out.patches.size(); ++j)
                CHECK(out.patches[j] == doctest::Approx(check.normal() + 0.75).epsilon(1e-6));
        }
    }
}

TEST_CASE("one Heun step on v(z)=z from z=1 gives 2.5") {
    LinearField field;
    TimeGrid g = span_grid(0.0, 1.0, 1);
    // deterministic unit start: override by integrating from a seed whose
    // first draw is rescaled -- instead use stats-free manual start via the
    // noise stream, then compare against the same start value
    const FeatureBatch out = integrate(field, g, {0}, 4, "heun", "independent", 1.0, nullptr);
    Rng check(substream_seed(4, "patch"));
    const double z0 = check.normal();
    CHECK(out.patches[0] == doctest::Approx(2.5 * z0).epsilon(1e-6));

    const FeatureBatch eee = integrate(field, g, {0}, 4, "euler", "independent", 1.0, nullptr);
    CHECK(eee.patches[0] == doctest::Approx(2.0 * z0).epsilon(1e-6));
}

TEST_CASE("solver orders on the linear field: Heun -2, Euler -1") {
    LinearField field;
    const std::vector<int> ks{4, 8, 16, 32, 64};
    const double analytic_factor = std::exp(0.5);
    std::vector<double> err_heun, err_euler;
    for (int k : ks) {
        const TimeGrid g = span_grid(0.0, 0.5, k);
        const FeatureBatch h = integrate(field, g, {0}, 11, "heun", "independent", 1.0, nullptr);
        const FeatureBatch e = integrate(field, g, {0}, 11, "euler", "independent", 1.0, nullptr);
        Rng check(substream_seed(11, "patch"));
        const double z0 = check.normal();
        err_heun.push_back(std::abs(h.patches[0] - analytic_factor * z0));
        err_euler.push_back(std::abs(e.patches[0] - analytic_factor * z0));
    }
    CHECK(loglog_slope(ks, err_heun) == doctest::Approx(-2.0).epsilon(0.05));
    CHECK(loglog_slope(ks, err_euler) == doctest::Approx(-1.0).epsilon(0.1));
}

TEST_CASE("guidance contracts") {
    const Denoiser net = random_net(77);
    const SamplerConfig p = defaults();
    const std::vector<int32_t> labels{0, 1};

    SUBCASE("w = 1 is bit-identical to guidance off") {
        GuidanceConfig off{false, 3.7, 3.7, 0.1, 0.98};
        GuidanceConfig w1{true, 1.0, 1.0, 0.1, 0.98};
        DenoiserField f_off(&net, nullptr, "x", 0.05, off);
        DenoiserField f_w1(&net, nullptr, "x", 0.05, w1);
        const TimeGrid g = make_grid("uniform", 5, p);
        const FeatureBatch a = integrate(f_off, g, labels, 21, "heun", "independent", 1.0, nullptr);
        const FeatureBatch b = integrate(f_w1, g, labels, 21, "heun", "independent", 1.0, nullptr);
        CHECK(a.patches == b.patches);
        CHECK(a.cls == b.cls);
    }

    SUBCASE("interval gating is inert outside [0.1, 0.98]") {
        GuidanceConfig on{true, 3.7, 3.7, 0.1, 0.98};
        GuidanceConfig off{false, 1.0, 1.0, 0.1, 0.98};
        DenoiserField fg(&net, nullptr, "x", 0.05, on);
        DenoiserField fu(&net, nullptr, "x", 0.05, off);
        const int B = 2;
        const size_t pd = 4 * 2 * 2;
        std::vector<float> z(B * pd, 0.3f), zc(B * 4, -0.2f);
        std::vector<float> vg(B * pd), vgc(B * 4), vu(B * pd), vuc(B * 4);
        for (double t : {0.05, 0.99}) {
            fg.eval(B, z.data(), zc.data(), t, labels.data(), vg.data(), vgc.data());
            fu.eval(B, z.data(), zc.data(), t, labels.data(), vu.data(), vuc.data());
            CHECK(vg == vu);
            CHECK(vgc == vuc);
        }
        for (double t : {0.1, 0.5, 0.98}) {
            fg.eval(B, z.data(), zc.data(), t, labels.data(), vg.data(), vgc.data());
            fu.eval(B, z.data(), zc.data(), t, labels.data(), vu.data(), vuc.data());
            CHECK(vg != vu);  // guidance active inside the interval
        }
    }

    SUBCASE("combination formula and w = 0") {
        const int B = 1;
        const size_t pd = 4 * 2 * 2;
        std::vector<float> z(pd, 0.4f), zc(4, 0.1f);
        std::vector<float> vc(pd), vcc(4), vu(pd), vuc(4), vg(pd), vgc(4);
        const std::vector<int32_t> lab{1};
        const std::vector<int32_t> null_lab{3};  // num_classes = 3

        GuidanceConfig off{false, 1.0, 1.0, 0.0, 1.0};
        DenoiserField plain(&net, nullptr, "x", 0.05, off);
        plain.eval(B, z.data(), zc.data(), 0.5, lab.data(), vc.data(), vcc.data());
        plain.eval(B, z.data(), zc.data(), 0.5, null_lab.data(), vu.data(), vuc.data());

        GuidanceConfig g37{true, 3.7, 3.7, 0.0, 1.0};
        DenoiserField guided(&net, nullptr, "x", 0.05, g37);
        guided.eval(B, z.data(), zc.data(), 0.5, lab.data(), vg.data(), vgc.data());
        for (size_t j = 0; j < pd; ++j)
            CHECK(vg[j] == doctest::Approx(vu[j] + 3.7f * (vc[j] - vu[j])).epsilon(1e-6));

        GuidanceConfig g0{true, 0.0, 0.0, 0.0, 1.0};
        DenoiserField uncond(&net, nullptr, "x", 0.05, g0);
        uncond.eval(B, z.data(), zc.data(), 0.5, lab.data(), vg.data(), vgc.data());
        for (size_t j = 0; j < pd; ++j) CHECK(vg[j] == doctest::Approx(vu[j]).epsilon(1e-7));
    }
}

TEST_CASE("coupled vs independent CLS init differs only in the CLS stream") {
    ConstField still(3, 4, 4, 0.0f);  // zero field: the output is the initial state
    const TimeGrid g = span_grid(0.0, 1.0, 2);
    const std::vector<int32_t> labels(5, 0);
    const FeatureBatch ind = integrate(still, g, labels, 31, "heun", "independent", 1.0, nullptr);
    const FeatureBatch cpl = integrate(still, g, labels, 31, "heun", "coupled", 1.0, nullptr);
    CHECK(ind.patches == cpl.patches);  // patch noise shared bit-for-bit
    CHECK(ind.cls != cpl.cls);
    const int hw = 16;
    for (int i = 0; i < 5; ++i)
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int k = 0; k < hw; ++k) acc += cpl.patches[(size_t(i) * 3 + c) * hw + k];
            CHECK(cpl.cls[i * 3 + c] == doctest::Approx(acc / hw).epsilon(1e-6));
        }
}

TEST_CASE("integrate destandardizes with supplied stats") {
    ConstField still(1, 1, 1, 0.0f);
    const TimeGrid g = span_grid(0.0, 1.0, 1);
    StandardizationStats stats;
    stats.c = 1;
    stats.h = 1;
    stats.w = 1;
    stats.patch_mean = {10.0f};
    stats.patch_std = {2.0f};
    stats.cls_mean = {-5.0f};
    stats.cls_std = {0.5f};
    const FeatureBatch out = integrate(still, g, {0}, 41, "euler", "independent", 1.0, &stats);
    Rng check(substream_seed(41, "patch"));
    const double z0 = check.normal();
    CHECK(out.patches[0] == doctest::Approx(z0 * std::sqrt(4.0 + 1e-6) + 10.0).epsilon(1e-5));
}

TEST_CASE("non-finite states abort with the step index") {
    struct BlowupField : VelocityField {
        int channels() const override { return 1; }
        int grid_h() const override { return 1; }
        int grid_w() const override { return 1; }
        void eval(int B, const float*, const float*, double t, const int32_t*, float* v, float* v_cls) override {
            for (int j = 0; j < B; ++j) v[j] = t > 0.4 ? std::numeric_limits<float>::infinity() : 0.0f;
            for (int j = 0; j < B; ++j) v_cls[j] = 0.0f;
        }
    } field;
    const TimeGrid g = span_grid(0.0, 1.0, 4);
    CHECK_THROWS_WITH_AS(integrate(field, g, {0}, 5, "euler", "independent", 1.0, nullptr),
                         "integrate: non-finite state after step 2", std::runtime_error);
}

TEST_CASE("truncation distances vanish for exactly-integrable fields and self-reference") {
    ConstField field(2, 2, 2, 0.3f);
    SamplerConfig p = defaults();
    const auto rows = truncation_study(field, "uniform", p, {2, 5, 125}, 125, 8, 71, 4, nullptr);
    for (const auto& r : rows) CHECK(r.mean == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("mmd behaves like a two-sample test") {
    Rng rng(81);
    const int n = 200, d = 8;
    Eigen::MatrixXd x(n, d), y(n, d), shifted(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            x(i, j) = rng.normal();
            y(i, j) = rng.normal();
            shifted(i, j) = rng.normal() + 5.0;
        }

    // same distribution: |MMD| within the 2/sqrt(n) bias bound
    CHECK(std::abs(mmd_metric(x, y)) < 2.0 / std::sqrt(double(n)));

    // 5-sigma mean shift: far outside the permutation null band
    const MmdTestResult t = mmd_permutation_test(shifted, y, 100, 82);
    CHECK(t.mmd > 10.0 * std::max(t.null_q95, 1e-12));

    // identical sets: the unbiased estimator sits within the same bias bound
    CHECK(std::abs(mmd_metric(x, x)) < 2.0 / std::sqrt(double(n)));
}

TEST_CASE("prototype accuracy is exact at the class means") {
    Eigen::MatrixXd protos(3, 2);
    protos << 0, 0, 10, 0, 0, 10;
    Eigen::MatrixXd samples(3, 2);
    samples << 0.1, -0.1, 9.8, 0.3, 0.2, 10.4;
    CHECK(prototype_accuracy(samples, {0, 1, 2}, protos) == 1.0);
    CHECK(prototype_accuracy(samples, {1, 1, 2}, protos) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("loglog slope recovers a known power law") {
    std::vector<int> k{4, 8, 16, 32};
    std::vector<double> err;
    for (int ki : k) err.push_back(3.0 / double(ki * ki));
    CHECK(loglog_slope(k, err) == doctest::Approx(-2.0).epsilon(1e-9));
}

}  // TEST_SUITE
