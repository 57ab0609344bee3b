#pragma once

#include <deque>
#include <string>
#include <vector>

#include "flowlab/config.hpp"
#include "flowlab/denoiser.hpp"
#include "flowlab/flowcore.hpp"
#include "flowlab/io.hpp"

namespace flowlab {

// global-norm gradient clipping factor
inline double clip_scale(double grad_norm, double max_norm) {
    return grad_norm > max_norm ? max_norm / grad_norm : 1.0;
}

struct StepMetrics {
    uint64_t step = 0;
    double loss = 0.0;
    double loss_cls = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double t_mean = 0.0;
    bool rejected = false;
    // per-sample values, enough to recompute the loss from the x-MSE side
    std::vector<double> t;
    std::vector<double> x_mse;      // mean over patch elements, x-mode only
    std::vector<double> x_mse_cls;  // mean over CLS elements, x-mode only
    std::vector<int32_t> labels_used;
};

// Flow-matching training loop: logit-normal time sampling with dimension-aware
// shift, label dropout, x- or v-prediction loss, Adam with linear warmup and
// global-norm clipping, dual-EMA tracking, loss-spike step rejection.
// All randomness is counter-based from the config seed, so a restored
// checkpoint replays the exact trajectory.
class Trainer {
  public:
    explicit Trainer(const RunConfig& config);

    // split, fit standardization on the train side, keep the standardized set
    void prepare(const FeatureBatch& data);

    StepMetrics train_step();

    // run to config.trainer.steps; writes metrics.jsonl and checkpoints under
    // out_dir unless it is empty
    std::vector<StepMetrics> train(const std::string& out_dir);

    Checkpoint to_checkpoint() const;
    static Trainer from_checkpoint(const Checkpoint& ck, const FeatureBatch& data);

    const RunConfig& config() const { return config_; }
    const Denoiser& net() const { return net_; }
    Denoiser& net() { return net_; }
    const StandardizationStats& stats() const { return stats_; }
    const std::vector<float>& ema(const std::string& which) const;
    uint64_t step() const { return step_; }
    uint64_t rejected_steps() const { return rejected_; }
    int train_size() const { return train_std_.b; }
    double lr_at(uint64_t step) const;
    double shift_s() const { return shift_s_; }

    static std::string metrics_to_json(const StepMetrics& m);

  private:
    RunConfig config_;
    Denoiser net_;
    std::vector<float> ema_a_, ema_b_, adam_m_, adam_v_;
    StandardizationStats stats_;
    FeatureBatch train_raw_;
    FeatureBatch train_std_;
    uint64_t step_ = 0;
    uint64_t adam_steps_ = 0;
    uint64_t rejected_ = 0;
    std::deque<double> loss_window_;
    double shift_s_ = 1.0;
    bool prepared_ = false;

    void apply_update(const std::vector<float>& grads, double lr, double clip_scale);
};

}  // namespace flowlab
