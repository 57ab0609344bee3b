#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "flowlab/synthdata.hpp"
#include "flowlab/trainer.hpp"

using namespace flowlab;

namespace {

RunConfig gmm_config(uint64_t seed) {
    RunConfig c;
    c.seed = seed;
    c.generator.kind = "gmm2d";
    c.generator.apply_kind_defaults();
    c.denoiser.hidden_dim = 32;
    c.denoiser.layers = 2;
    c.denoiser.heads = 2;
    c.denoiser.channels = 2;
    c.denoiser.grid_h = 1;
    c.denoiser.grid_w = 1;
    c.denoiser.num_classes = 8;
    c.denoiser.time_feat_dim = 16;
    c.trainer.steps = 200;
    c.trainer.batch_size = 32;
    c.trainer.data_size = 2000;
    c.trainer.lr = 1e-3;
    return c;
}

FeatureBatch gmm_data(const RunConfig& c) {
    GeneratorSpec spec = c.generator;
    spec.seed = substream_seed(c.seed, "dataset");
    return SynthGenerator(spec).generate(c.trainer.data_size);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("clip scale") {
    CHECK(clip_scale(10.0, 1.0) == doctest::Approx(0.1));
    CHECK(clip_scale(0.5, 1.0) == 1.0);
}

TEST_CASE("identical seeds give bit-identical loss sequences") {
    const RunConfig c = gmm_config(555);
    const FeatureBatch data = gmm_data(c);
    Trainer a(c), b(c);
    a.prepare(data);
    b.prepare(data);
    for (int i = 0; i < 100; ++i) {
        const auto ma = a.train_step();
        const auto mb = b.train_step();
        CHECK(ma.loss == mb.loss);  // to the last bit
        CHECK(Trainer::metrics_to_json(ma) == Trainer::metrics_to_json(mb));
    }
}

TEST_CASE("first optimizer step moves parameters by about lr in sign(g)") {
    RunConfig c = gmm_config(556);
    c.trainer.warmup_steps = 1;  // full lr at step 0
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    const std::vector<float> before = tr.net().params;
    tr.train_step();
    const std::vector<float>& after = tr.net().params;
    const float lr = float(c.trainer.lr);
    int moved = 0;
    for (size_t i = 0; i < before.size(); ++i) {
        const float d = std::abs(after[i] - before[i]);
        CHECK(d <= lr * 1.001f);  // |update| <= lr after bias correction
        if (d > 0.9f * lr) ++moved;
    }
    // zero-initialized heads block upstream gradients at step 0, so exactly
    // the head parameters move, each by about lr
    const auto& lay = tr.net().layout();
    const int head_params = int(2 * (lay.D * lay.C + lay.C));
    CHECK(moved >= head_params / 2);
    CHECK(moved <= head_params + int(2 * lay.D));
}

TEST_CASE("ema with decay zero tracks the raw parameters exactly") {
    RunConfig c = gmm_config(557);
    c.trainer.ema_decay_a = 0.0;
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    for (int i = 0; i < 5; ++i) {
        tr.train_step();
        CHECK(tr.ema("a") == tr.net().params);
    }
}

TEST_CASE("label dropout fraction matches its rate") {
    RunConfig c = gmm_config(558);
    c.trainer.steps = 400;
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    int null_count = 0, total = 0;
    for (int i = 0; i < 400; ++i) {
        const auto m = tr.train_step();
        for (int32_t l : m.labels_used) {
            if (l == c.denoiser.num_classes) ++null_count;
            ++total;
        }
    }
    CHECK(total >= 10000);
    const double frac = double(null_count) / total;
    CHECK(frac > 0.09);
    CHECK(frac < 0.11);
}

TEST_CASE("x-mode loss equals the reweighted x-MSE recomputed from per-sample logs") {
    RunConfig c = gmm_config(559);
    c.trainer.eps_t_clamp = 0.05;
    c.trainer.t_hi = 0.9499;  // keep 1-t above the clamp so the identity is exact
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    for (int i = 0; i < 20; ++i) {
        const auto m = tr.train_step();
        REQUIRE(m.x_mse.size() == size_t(c.trainer.batch_size));
        double acc = 0.0, acc_cls = 0.0;
        for (size_t j = 0; j < m.x_mse.size(); ++j) {
            const double w = 1.0 / ((1.0 - m.t[j]) * (1.0 - m.t[j]));
            acc += w * m.x_mse[j];
            acc_cls += w * m.x_mse_cls[j];
        }
        acc /= double(m.x_mse.size());
        acc_cls /= double(m.x_mse.size());
        const double recomputed = acc + c.trainer.lambda_cls * acc_cls;
        CHECK(m.loss == doctest::Approx(recomputed).epsilon(1e-5));
    }
}

TEST_CASE("checkpoint round-trip resumes the identical loss trajectory") {
    RunConfig c = gmm_config(560);
    const FeatureBatch data = gmm_data(c);
    Trainer tr(c);
    tr.prepare(data);
    for (int i = 0; i < 30; ++i) tr.train_step();
    const Checkpoint ck = tr.to_checkpoint();

    std::vector<double> cont;
    for (int i = 0; i < 10; ++i) cont.push_back(tr.train_step().loss);

    Trainer restored = Trainer::from_checkpoint(ck, data);
    CHECK(restored.step() == 30);
    for (int i = 0; i < 10; ++i) CHECK(restored.train_step().loss == cont[i]);
}

TEST_CASE("checkpoint persists through the container format") {
    RunConfig c = gmm_config(561);
    const FeatureBatch data = gmm_data(c);
    Trainer tr(c);
    tr.prepare(data);
    for (int i = 0; i < 10; ++i) tr.train_step();
    const auto path = (std::filesystem::temp_directory_path() / "flowlab_trainer_ck.rfcp").string();
    save_checkpoint(tr.to_checkpoint(), path);
    Trainer restored = Trainer::from_checkpoint(load_checkpoint(path), data);
    CHECK(restored.net().params == tr.net().params);
    CHECK(restored.ema("a") == tr.ema("a"));
    CHECK(restored.ema("b") == tr.ema("b"));
}

TEST_CASE("training on the ring mixture halves the loss within 2000 steps") {
    RunConfig c = gmm_config(562);
    c.trainer.steps = 2000;
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    const auto metrics = tr.train("");
    auto avg = [&](int lo, int hi) {
        double acc = 0.0;
        for (int i = lo; i < hi; ++i) acc += metrics[i].loss;
        return acc / (hi - lo);
    };
    const double head = avg(0, 50);
    const double tail = avg(1950, 2000);
    CHECK(tail < 0.5 * head);
}

TEST_CASE("v-mode and lambda ablations run") {
    for (const std::string mode : {"x", "v"}) {
        for (double lambda : {0.0, 0.2}) {
            RunConfig c = gmm_config(563);
            c.trainer.mode = mode;
            c.trainer.lambda_cls = lambda;
            c.trainer.steps = 20;
            Trainer tr(c);
            tr.prepare(gmm_data(c));
            const auto metrics = tr.train("");
            CHECK(metrics.size() == 20);
            for (const auto& m : metrics) CHECK(std::isfinite(m.loss));
        }
    }
}

TEST_CASE("loss spikes reject the step and leave parameters untouched") {
    RunConfig c = gmm_config(564);
    c.trainer.spike_reject_factor = 1.0001;  // makes ordinary fluctuation a "spike"
    c.trainer.spike_min_history = 5;
    Trainer tr(c);
    tr.prepare(gmm_data(c));
    bool saw_rejection = false;
    for (int i = 0; i < 60 && !saw_rejection; ++i) {
        const std::vector<float> before = tr.net().params;
        const auto m = tr.train_step();
        if (m.rejected) {
            saw_rejection = true;
            CHECK(tr.net().params == before);
        }
    }
    CHECK(saw_rejection);
    CHECK(tr.rejected_steps() > 0);
}

TEST_CASE("warmup schedule is linear then constant") {
    RunConfig c = gmm_config(565);
    c.trainer.steps = 100;
    c.trainer.warmup_steps = 10;
    Trainer tr(c);
    CHECK(tr.lr_at(0) == doctest::Approx(c.trainer.lr * 0.1));
    CHECK(tr.lr_at(4) == doctest::Approx(c.trainer.lr * 0.5));
    CHECK(tr.lr_at(9) == doctest::Approx(c.trainer.lr));
    CHECK(tr.lr_at(50) == doctest::Approx(c.trainer.lr));
}

}  // TEST_SUITE
