#include "flowlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include <json.hpp>

#include "flowlab/synthdata.hpp"

namespace flowlab {

namespace {

double median_of_window(const std::deque<double>& w) {
    std::vector<double> v(w.begin(), w.end());
    const size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    return v[mid];
}

StandardizationStats identity_stats(int c, int h, int w) {
    StandardizationStats s;
    s.c = c;
    s.h = h;
    s.w = w;
    s.patch_mean.assign(size_t(c) * h * w, 0.0f);
    s.patch_std.assign(size_t(c) * h * w, 1.0f);
    s.cls_mean.assign(c, 0.0f);
    s.cls_std.assign(c, 1.0f);
    return s;
}

}  // namespace

Trainer::Trainer(const RunConfig& config) : config_(config), net_(config.denoiser) {
    config_.validate();
    if (config_.trainer.lambda_cls > 0 && !config_.denoiser.cls_token)
        throw std::runtime_error("trainer: lambda_cls > 0 requires the CLS token");
    Rng rng_init(substream_seed(config_.seed, "init"));
    net_.init_params(rng_init);
    ema_a_ = net_.params;
    ema_b_ = net_.params;
    adam_m_.assign(net_.params.size(), 0.0f);
    adam_v_.assign(net_.params.size(), 0.0f);
    shift_s_ = config_.trainer.time_shift_s > 0
                   ? config_.trainer.time_shift_s
                   : std::max(1.0, compute_shift(config_.denoiser.grid_h, config_.denoiser.grid_w,
                                                 config_.denoiser.channels));
}

void Trainer::prepare(const FeatureBatch& data) {
    data.check_consistent();
    if (data.c != config_.denoiser.channels || data.h != config_.denoiser.grid_h ||
        data.w != config_.denoiser.grid_w)
        throw std::runtime_error("trainer: data shape does not match denoiser config");
    auto [train, eval] = train_eval_split(data, config_.trainer.train_fraction);
    (void)eval;
    train_raw_ = std::move(train);
    if (config_.trainer.standardize)
        stats_ = fit_standardization(train_raw_);
    else
        stats_ = identity_stats(data.c, data.h, data.w);
    train_std_ = standardize(train_raw_, stats_);
    prepared_ = true;
}

double Trainer::lr_at(uint64_t step) const {
    const int warmup = config_.trainer.effective_warmup();
    const double frac = std::min(1.0, double(step + 1) / double(warmup));
    return config_.trainer.lr * frac;
}

StepMetrics Trainer::train_step() {
    if (!prepared_) throw std::runtime_error("trainer: prepare() not called");
    const auto& tc = config_.trainer;
    const int B = tc.batch_size;
    const int C = config_.denoiser.channels;
    const size_t pd = train_std_.patch_dim();

    // batch selection
    Rng rng_data(step_seed(substream_seed(config_.seed, "data"), step_));
    std::vector<int> idx(B);
    for (int i = 0; i < B; ++i) idx[i] = static_cast<int>(rng_data.uniform_int(train_std_.b));
    FeatureBatch batch = train_std_.select(idx);

    // time sampling
    Rng rng_time(step_seed(substream_seed(config_.seed, "time"), step_));
    TimeSampler sampler{shift_s_, tc.t_lo, tc.t_hi};
    const std::vector<double> t = sample_time(sampler, B, rng_time);

    // label dropout to the null class
    Rng rng_drop(step_seed(substream_seed(config_.seed, "dropout"), step_));
    std::vector<int32_t> labels = batch.labels;
    for (auto& l : labels)
        if (rng_drop.uniform() < tc.label_dropout) l = config_.denoiser.num_classes;

    // forward process
    Rng rng_noise(step_seed(substream_seed(config_.seed, "noise"), step_));
    const ClsNoiseMode mode =
        tc.cls_noise_mode == "coupled" ? ClsNoiseMode::coupled : ClsNoiseMode::independent;
    FlowSample fs = make_flow_sample(batch, t, rng_noise, mode, tc.sigma_eps);

    DenoiserCache cache;
    net_.forward(B, fs.z_t.data(), fs.z_cls_t.data(), t.data(), labels.data(), cache);

    StepMetrics m;
    m.step = step_;
    m.t = t;
    m.labels_used = labels;
    m.t_mean = std::accumulate(t.begin(), t.end(), 0.0) / B;
    m.lr = lr_at(step_);

    // velocity predictions and output gradients
    std::vector<float> v_hat(size_t(B) * pd), v_cls_hat(size_t(B) * C);
    std::vector<float> d_y_patch(size_t(B) * pd), d_y_cls(size_t(B) * C, 0.0f);
    const bool x_mode = tc.mode == "x";
    for (int i = 0; i < B; ++i) {
        const double div = xpred_divisor(t[i], tc.eps_t_clamp);
        const float* y = cache.y_patch.data() + size_t(i) * pd;
        const float* zt = fs.z_t.data() + size_t(i) * pd;
        float* vh = v_hat.data() + size_t(i) * pd;
        if (x_mode)
            xpred_to_velocity(y, zt, t[i], tc.eps_t_clamp, vh, pd);
        else
            std::copy(y, y + pd, vh);
        const float* yc = cache.y_cls.data() + size_t(i) * C;
        const float* zct = fs.z_cls_t.data() + size_t(i) * C;
        float* vch = v_cls_hat.data() + size_t(i) * C;
        if (x_mode)
            xpred_to_velocity(yc, zct, t[i], tc.eps_t_clamp, vch, C);
        else
            std::copy(yc, yc + C, vch);

        if (x_mode) {
            double xe = 0.0;
            for (size_t j = 0; j < pd; ++j) {
                const double d = double(y[j]) - double(fs.z0[size_t(i) * pd + j]);
                xe += d * d;
            }
            m.x_mse.push_back(xe / double(pd));
            double xec = 0.0;
            for (int j = 0; j < C; ++j) {
                const double d = double(yc[j]) - double(fs.z_cls0[size_t(i) * C + j]);
                xec += d * d;
            }
            m.x_mse_cls.push_back(xec / double(C));
        }

        // d(loss)/d(network output)
        const float scale_p = 2.0f / float(double(B) * double(pd));
        const float scale_c = float(tc.lambda_cls) * 2.0f / float(double(B) * double(C));
        for (size_t j = 0; j < pd; ++j) {
            float g = scale_p * (vh[j] - fs.v[size_t(i) * pd + j]);
            if (x_mode) g = float(g / div);
            d_y_patch[size_t(i) * pd + j] = g;
        }
        for (int j = 0; j < C; ++j) {
            float g = scale_c * (vch[j] - fs.v_cls[size_t(i) * C + j]);
            if (x_mode) g = float(g / div);
            d_y_cls[size_t(i) * C + j] = g;
        }
    }

    m.loss_cls = loss_fm(v_cls_hat.data(), fs.v_cls.data(), size_t(B) * C);
    m.loss = loss_fm(v_hat.data(), fs.v.data(), size_t(B) * pd) + tc.lambda_cls * m.loss_cls;
    if (!std::isfinite(m.loss))
        throw std::runtime_error("trainer: non-finite loss at step " + std::to_string(step_));

    // spike rejection against the running median of accepted losses
    const bool reject = loss_window_.size() >= size_t(tc.spike_min_history) &&
                        m.loss > tc.spike_reject_factor * median_of_window(loss_window_);
    if (reject) {
        m.rejected = true;
        ++rejected_;
        ++step_;
        return m;
    }

    std::vector<float> grads(net_.params.size(), 0.0f);
    net_.backward(cache, d_y_patch.data(), d_y_cls.data(), grads);

    double sq = 0.0;
    for (float g : grads) sq += double(g) * double(g);
    m.grad_norm = std::sqrt(sq);
    apply_update(grads, m.lr, clip_scale(m.grad_norm, tc.grad_clip));

    ema_update(ema_a_, net_.params, tc.ema_decay_a);
    ema_update(ema_b_, net_.params, tc.ema_decay_b);

    loss_window_.push_back(m.loss);
    while (loss_window_.size() > size_t(tc.spike_window)) loss_window_.pop_front();

    ++step_;
    return m;
}

void Trainer::apply_update(const std::vector<float>& grads, double lr, double clip_scale) {
    const auto& tc = config_.trainer;
    ++adam_steps_;
    const double bc1 = 1.0 - std::pow(tc.beta1, double(adam_steps_));
    const double bc2 = 1.0 - std::pow(tc.beta2, double(adam_steps_));
    const float b1 = float(tc.beta1), b2 = float(tc.beta2);
    const float cs = float(clip_scale);
    for (size_t i = 0; i < grads.size(); ++i) {
        const float g = grads[i] * cs;
        adam_m_[i] = b1 * adam_m_[i] + (1.0f - b1) * g;
        adam_v_[i] = b2 * adam_v_[i] + (1.0f - b2) * g * g;
        const double mhat = double(adam_m_[i]) / bc1;
        const double vhat = double(adam_v_[i]) / bc2;
        double upd = mhat / (std::sqrt(vhat) + tc.adam_eps);
        if (tc.weight_decay > 0) upd += tc.weight_decay * double(net_.params[i]);  // decoupled decay
        net_.params[i] -= float(lr * upd);
    }
}

std::vector<StepMetrics> Trainer::train(const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    std::vector<StepMetrics> all;
    all.reserve(config_.trainer.steps);
    while (step_ < uint64_t(config_.trainer.steps)) {
        all.push_back(train_step());
        if (!out_dir.empty() && config_.trainer.checkpoint_every > 0 &&
            step_ % uint64_t(config_.trainer.checkpoint_every) == 0 && step_ < uint64_t(config_.trainer.steps)) {
            char name[64];
            std::snprintf(name, sizeof(name), "ck_%08llu.rfcp", static_cast<unsigned long long>(step_));
            save_checkpoint(to_checkpoint(), (fs::path(out_dir) / name).string());
        }
    }
    if (!out_dir.empty()) {
        std::vector<std::string> records;
        records.reserve(all.size());
        for (const auto& m : all) records.push_back(metrics_to_json(m));
        emit_jsonl(records, (fs::path(out_dir) / "metrics.jsonl").string());
        save_checkpoint(to_checkpoint(), (fs::path(out_dir) / "checkpoint.rfcp").string());
    }
    return all;
}

std::string Trainer::metrics_to_json(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["loss_cls"] = m.loss_cls;
    j["grad_norm"] = m.grad_norm;
    j["lr"] = m.lr;
    j["t_mean"] = m.t_mean;
    j["rejected"] = m.rejected;
    return j.dump();
}

const std::vector<float>& Trainer::ema(const std::string& which) const {
    if (which == "0.9999" || which == "a") return ema_a_;
    if (which == "0.9996" || which == "b") return ema_b_;
    if (which == "raw") return net_.params;
    throw std::runtime_error("trainer: unknown EMA track " + which);
}

Checkpoint Trainer::to_checkpoint() const {
    Checkpoint ck;
    ck.config_json = config_.to_json();
    ck.step = step_;
    ck.sections.emplace_back("params", net_.params);
    ck.sections.emplace_back("ema_a", ema_a_);
    ck.sections.emplace_back("ema_b", ema_b_);
    ck.sections.emplace_back("adam_m", adam_m_);
    ck.sections.emplace_back("adam_v", adam_v_);
    ck.sections.emplace_back("adam_steps", std::vector<float>{float(adam_steps_)});
    ck.sections.emplace_back("rejected", std::vector<float>{float(rejected_)});
    ck.sections.emplace_back("stats_patch_mean", stats_.patch_mean);
    ck.sections.emplace_back("stats_patch_std", stats_.patch_std);
    ck.sections.emplace_back("stats_cls_mean", stats_.cls_mean);
    ck.sections.emplace_back("stats_cls_std", stats_.cls_std);
    std::vector<float> window(loss_window_.begin(), loss_window_.end());
    ck.sections.emplace_back("loss_window", window);
    return ck;
}

Trainer Trainer::from_checkpoint(const Checkpoint& ck, const FeatureBatch& data) {
    Trainer tr(RunConfig::from_json(ck.config_json));
    tr.prepare(data);
    if (ck.section("params").size() != tr.net_.params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    tr.net_.params = ck.section("params");
    tr.ema_a_ = ck.section("ema_a");
    tr.ema_b_ = ck.section("ema_b");
    tr.adam_m_ = ck.section("adam_m");
    tr.adam_v_ = ck.section("adam_v");
    tr.adam_steps_ = uint64_t(ck.section("adam_steps").at(0));
    tr.rejected_ = uint64_t(ck.section("rejected").at(0));
    tr.stats_.patch_mean = ck.section("stats_patch_mean");
    tr.stats_.patch_std = ck.section("stats_patch_std");
    tr.stats_.cls_mean = ck.section("stats_cls_mean");
    tr.stats_.cls_std = ck.section("stats_cls_std");
    tr.train_std_ = standardize(tr.train_raw_, tr.stats_);  // stored stats win over refitted ones
    const auto& window = ck.section("loss_window");
    tr.loss_window_.assign(window.begin(), window.end());
    tr.step_ = ck.step;
    return tr;
}

}  // namespace flowlab
