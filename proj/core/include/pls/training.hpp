#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pls/autodiff.hpp"
#include "pls/models.hpp"
#include "pls/tasks.hpp"
#include "pls/tensor.hpp"

namespace pls {

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;  // aligned with the parameter store
    std::size_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double lr = 1e-3;
};

template <typename T>
AdamState<T> make_adam(const ParamStore<T>& params, double lr);

// Bias-corrected Adam.  Returns the raw update vectors u = lr * m_hat /
// (sqrt(v_hat) + eps) without applying them, so a filter can intercept.
// Throws NumericalError on non-finite gradients, naming the step.
template <typename T>
std::vector<Tensor<T>> adam_step(AdamState<T>& state, const GradStore<T>& grads);

template <typename T>
struct EmaState {
    std::vector<Tensor<T>> ema;
    double decay = 0.98;
    double lambda = 2.0;
    bool enabled = true;
    bool replace = false;  // applied = ema instead of u + lambda * ema
};

template <typename T>
EmaState<T> make_ema(const ParamStore<T>& params, double decay, double lambda, bool enabled,
                     bool replace);

// ema <- decay * ema + (1 - decay) * u; returns u + lambda * ema (or the ema
// itself in replace mode).  Disabled state passes u through untouched.
template <typename T>
std::vector<Tensor<T>> ema_filter(EmaState<T>& state, const std::vector<Tensor<T>>& u);

template <typename T>
void apply_update(ParamStore<T>& params, const std::vector<Tensor<T>>& applied);

// Mean pairwise cosine similarity of n gradient vectors (flattened across all
// parameters).  Zero-norm gradients contribute 0 to the sum while the pair
// count stays n(n-1)/2; their presence is flagged.
struct SigmaG {
    double value = 0;
    bool zero_norm_seen = false;
    std::size_t zero_norm_count = 0;
};

template <typename T>
SigmaG sigma_g(const std::vector<GradStore<T>>& grads);

enum class SchedulerKind { Constant, StepDecay, Adaptive };

const char* scheduler_name(SchedulerKind k);
SchedulerKind scheduler_from_name(const std::string& s);

struct SchedulerState {
    SchedulerKind kind = SchedulerKind::Constant;
    double lr0 = 1e-3;
    std::size_t step_rate = 3000;
    double decay = 0.9;
    double sigma_th = 0.1;
    double lr = 1e-3;               // current value, maintained by scheduler_step
    std::vector<double> history;    // recent probed sigma_g values
};

// Advances the schedule at `iter` (0-based) and returns the new lr.
// constant: lr0.  step_decay: lr0 * decay^floor(iter / step_rate).
// adaptive: every step_rate iterations multiply by decay when sigma_g is
// above sigma_th, divide otherwise; requires a probe value at those steps.
double scheduler_step(SchedulerState& sched, std::size_t iter, std::optional<double> sigma);

struct MetricsRecord {
    std::size_t iter = 0;
    double loss = 0;
    double lr = 0;
    std::optional<double> sigma;
    double grad_norm = 0;
    double wall_ms = 0;
};

std::string metrics_to_json(const MetricsRecord& r);

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainConfig {
    std::size_t batch_size = 1024;
    std::size_t total_iters = 10000;
    std::size_t probe_count = 10;
    std::size_t probe_interval = 0;  // 0 = follow scheduler step_rate
    std::size_t log_interval = 100;
    std::uint64_t seed = 0;
    Dtype dtype = Dtype::Single;
    std::string reduction = "mean";  // the only implemented loss reduction
    double target_mse = 0;           // > 0 enables early stopping
    double divergence_loss = 1e6;
    SchedulerState scheduler;
    double ema_decay = 0.98;
    double ema_lambda = 2.0;
    bool ema_enabled = true;
    bool ema_replace = false;
    InitScheme init = InitScheme::GaussianScaled;
    ModelSpec model;
    TaskSpec task;

    void validate() const;
};

template <typename T>
struct TrainResult {
    ParamStore<T> params;       // state when the loop stopped
    ParamStore<T> best_params;  // lowest-loss state seen
    double best_loss = 0;
    std::size_t best_iter = 0;
    double final_loss = 0;
    std::size_t iters_run = 0;
    bool diverged = false;
    bool early_stopped = false;
    std::string abort_reason;
};

// One training step's loss and gradient: per-sample graphs share the
// parameter leaves and the batch loss is the mean of per-sample MSEs,
// accumulated in a fixed order.
template <typename T>
struct BatchGrad {
    double loss = 0;
    GradStore<T> grads;
};

template <typename T>
BatchGrad<T> batch_forward_backward(const ModelSpec& spec, const ParamStore<T>& params,
                                    const PromptBatch<T>& batch);

// Loss only, no tape.
template <typename T>
double batch_loss(const ModelSpec& spec, const ParamStore<T>& params,
                  const PromptBatch<T>& batch);

// Full loop: sample, forward, backward, probe/schedule, Adam, EMA, apply.
// Fresh data every step; probes run on independent minibatches at frozen
// parameters.  On divergence the result carries the last good state.
template <typename T>
TrainResult<T> train(const TrainConfig& config, const MetricsSink& sink);

}  // namespace pls
