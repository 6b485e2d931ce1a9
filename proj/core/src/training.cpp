#include "pls/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "pls/errors.hpp"
#include "pls/linalg.hpp"

namespace pls {

namespace {

template <typename T>
std::vector<Tensor<T>> zeros_like(const ParamStore<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& kv : params.items) out.push_back(Tensor<T>::zeros(kv.second.dims));
    return out;
}

template <typename T>
Tensor<T> sample_slice(const Tensor<T>& batch, std::size_t s) {
    const std::size_t rows = batch.dims[1], cols = batch.dims[2];
    Tensor<T> out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = batch.at(s, r, c);
    return out;
}

}  // namespace

template <typename T>
AdamState<T> make_adam(const ParamStore<T>& params, double lr) {
    AdamState<T> state;
    state.m = zeros_like(params);
    state.v = zeros_like(params);
    state.lr = lr;
    return state;
}

template <typename T>
std::vector<Tensor<T>> adam_step(AdamState<T>& state, const GradStore<T>& grads) {
    if (grads.size() != state.m.size())
        throw DimensionError("adam: gradient count does not match state");
    for (const auto& kv : grads.items)
        for (T g : kv.second.data)
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericalError("adam: non-finite gradient in '" + kv.first + "' at step " +
                                     std::to_string(state.t + 1));

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    std::vector<Tensor<T>> updates;
    updates.reserve(state.m.size());
    for (std::size_t p = 0; p < state.m.size(); ++p) {
        const Tensor<T>& g = grads.items[p].second;
        Tensor<T>& m = state.m[p];
        Tensor<T>& v = state.v[p];
        if (!g.same_shape(m)) throw DimensionError("adam: gradient shape mismatch");
        Tensor<T> u = Tensor<T>::zeros(g.dims);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = state.beta1 * static_cast<double>(m.data[i]) +
                              (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * static_cast<double>(v.data[i]) +
                              (1.0 - state.beta2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            u.data[i] = static_cast<T>(state.lr * (mi / bc1) /
                                       (std::sqrt(vi / bc2) + state.eps));
        }
        updates.push_back(std::move(u));
    }
    return updates;
}

template <typename T>
EmaState<T> make_ema(const ParamStore<T>& params, double decay, double lambda, bool enabled,
                     bool replace) {
    if (decay < 0 || decay >= 1) throw ConfigError("ema: decay must be in [0, 1)");
    EmaState<T> state;
    state.ema = zeros_like(params);
    state.decay = decay;
    state.lambda = lambda;
    state.enabled = enabled;
    state.replace = replace;
    return state;
}

template <typename T>
std::vector<Tensor<T>> ema_filter(EmaState<T>& state, const std::vector<Tensor<T>>& u) {
    if (!state.enabled) return u;
    if (u.size() != state.ema.size()) throw DimensionError("ema: update count mismatch");
    std::vector<Tensor<T>> applied;
    applied.reserve(u.size());
    for (std::size_t p = 0; p < u.size(); ++p) {
        Tensor<T>& e = state.ema[p];
        if (!u[p].same_shape(e)) throw DimensionError("ema: update shape mismatch");
        Tensor<T> a = Tensor<T>::zeros(e.dims);
        for (std::size_t i = 0; i < e.data.size(); ++i) {
            const double ei = state.decay * static_cast<double>(e.data[i]) +
                              (1.0 - state.decay) * static_cast<double>(u[p].data[i]);
            e.data[i] = static_cast<T>(ei);
            a.data[i] = state.replace
                            ? static_cast<T>(ei)
                            : static_cast<T>(static_cast<double>(u[p].data[i]) +
                                             state.lambda * ei);
        }
        applied.push_back(std::move(a));
    }
    return applied;
}

template <typename T>
void apply_update(ParamStore<T>& params, const std::vector<Tensor<T>>& applied) {
    if (applied.size() != params.size()) throw DimensionError("apply: update count mismatch");
    for (std::size_t p = 0; p < applied.size(); ++p) {
        Tensor<T>& t = params.items[p].second;
        if (!applied[p].same_shape(t)) throw DimensionError("apply: update shape mismatch");
        for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = static_cast<T>(static_cast<double>(t.data[i]) -
                                       static_cast<double>(applied[p].data[i]));
    }
}

template <typename T>
SigmaG sigma_g(const std::vector<GradStore<T>>& grads) {
    const std::size_t n = grads.size();
    if (n < 2) throw ConfigError("sigma_g: need at least two gradients");
    std::vector<double> norms(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0;
        for (const auto& kv : grads[i].items)
            for (T x : kv.second.data) sq += static_cast<double>(x) * static_cast<double>(x);
        norms[i] = std::sqrt(sq);
    }
    SigmaG result;
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0) {
            result.zero_norm_seen = true;
            result.zero_norm_count += 1;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (norms[i] == 0 || norms[j] == 0) continue;  // the pair contributes 0
            double dot = 0;
            for (std::size_t p = 0; p < grads[i].items.size(); ++p) {
                const auto& gi = grads[i].items[p].second.data;
                const auto& gj = grads[j].items[p].second.data;
                for (std::size_t x = 0; x < gi.size(); ++x)
                    dot += static_cast<double>(gi[x]) * static_cast<double>(gj[x]);
            }
            sum += dot / (norms[i] * norms[j]);
        }
    }
    result.value = 2.0 * sum / (static_cast<double>(n) * static_cast<double>(n - 1));
    return result;
}

const char* scheduler_name(SchedulerKind k) {
    switch (k) {
        case SchedulerKind::Constant: return "constant";
        case SchedulerKind::StepDecay: return "step_decay";
        case SchedulerKind::Adaptive: return "adaptive";
    }
    return "?";
}

SchedulerKind scheduler_from_name(const std::string& s) {
    if (s == "constant") return SchedulerKind::Constant;
    if (s == "step_decay") return SchedulerKind::StepDecay;
    if (s == "adaptive") return SchedulerKind::Adaptive;
    throw ConfigError("unknown scheduler: " + s);
}

double scheduler_step(SchedulerState& sched, std::size_t iter, std::optional<double> sigma) {
    if (sigma) {
        sched.history.push_back(*sigma);
        if (sched.history.size() > 64) sched.history.erase(sched.history.begin());
    }
    switch (sched.kind) {
        case SchedulerKind::Constant:
            sched.lr = sched.lr0;
            break;
        case SchedulerKind::StepDecay:
            sched.lr = sched.lr0 *
                       std::pow(sched.decay, static_cast<double>(iter / sched.step_rate));
            break;
        case SchedulerKind::Adaptive:
            if (iter > 0 && iter % sched.step_rate == 0) {
                if (!sigma)
                    throw ConfigError("adaptive scheduler needs a sigma_g probe at iteration " +
                                      std::to_string(iter));
                sched.lr = *sigma > sched.sigma_th ? sched.lr * sched.decay
                                                   : sched.lr / sched.decay;
            }
            break;
    }
    return sched.lr;
}

std::string metrics_to_json(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["iter"] = r.iter;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    if (r.sigma) j["sigma_g"] = *r.sigma;
    else j["sigma_g"] = nullptr;
    j["grad_norm"] = r.grad_norm;
    j["wall_ms"] = r.wall_ms;
    return j.dump();
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (total_iters < 1) throw ConfigError("train: total_iters must be >= 1");
    if (probe_count < 2) throw ConfigError("train: probe_count must be >= 2");
    if (log_interval < 1) throw ConfigError("train: log_interval must be >= 1");
    if (reduction != "mean") throw ConfigError("train: only mean loss reduction is implemented");
    if (scheduler.lr0 <= 0) throw ConfigError("train: lr0 must be > 0");
    if (scheduler.step_rate < 1) throw ConfigError("train: step_rate must be >= 1");
    if (scheduler.decay <= 0 || scheduler.decay >= 1)
        throw ConfigError("train: scheduler decay must be in (0, 1)");
    if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("train: ema decay must be in [0, 1)");
    if (divergence_loss <= 0) throw ConfigError("train: divergence_loss must be > 0");
    model.validate();
    task.validate();

    const std::size_t want_rows = task.prompt_rows();
    const std::size_t want_cols = task.width ? task.width : task.prompt_cols();
    if (static_cast<std::size_t>(model.seq_len) != want_rows)
        throw ConfigError("train: model seq_len " + std::to_string(model.seq_len) +
                          " does not match the task's " + std::to_string(want_rows) + " rows");
    if (static_cast<std::size_t>(model.in_dim) != want_cols)
        throw ConfigError("train: model in_dim " + std::to_string(model.in_dim) +
                          " does not match the prompt width " + std::to_string(want_cols));
    if (static_cast<std::size_t>(model.out_dim) != task.out_cols())
        throw ConfigError("train: model out_dim " + std::to_string(model.out_dim) +
                          " does not match the target width " + std::to_string(task.out_cols()));
    const std::size_t probe_every = probe_interval ? probe_interval : scheduler.step_rate;
    if (scheduler.kind == SchedulerKind::Adaptive && probe_every != scheduler.step_rate)
        throw ConfigError("train: the adaptive scheduler needs probe_interval == step_rate");
}

template <typename T>
BatchGrad<T> batch_forward_backward(const ModelSpec& spec, const ParamStore<T>& params,
                                    const PromptBatch<T>& batch) {
    Tape<T> tape;
    const std::vector<int> pids = bind_params(tape, params, true);
    const std::size_t bsz = batch.inputs.dims[0];
    int acc = -1;
    for (std::size_t s = 0; s < bsz; ++s) {
        const int input = tape.leaf(sample_slice(batch.inputs, s));
        const int out = model_forward(tape, spec, pids, input);
        const int pred = tape.slice(out, batch.readout.r0, batch.readout.r1, batch.readout.c0,
                                    batch.readout.c1);
        const int target = tape.leaf(sample_slice(batch.targets, s));
        const int loss_s = tape.mse_loss(pred, target);
        acc = acc < 0 ? loss_s : tape.add(acc, loss_s);
    }
    const int loss = tape.scale(acc, 1.0 / static_cast<double>(bsz));
    BatchGrad<T> result;
    result.loss = static_cast<double>(tape.value(loss).data[0]);
    result.grads = tape.backward(loss);
    return result;
}

template <typename T>
double batch_loss(const ModelSpec& spec, const ParamStore<T>& params,
                  const PromptBatch<T>& batch) {
    const std::size_t bsz = batch.inputs.dims[0];
    double acc = 0;
    for (std::size_t s = 0; s < bsz; ++s) {
        const Tensor<T> out = model_eval(spec, params, sample_slice(batch.inputs, s));
        const Tensor<T> pred = apply_readout(out, batch.readout);
        acc += mse(pred, sample_slice(batch.targets, s));
    }
    return acc / static_cast<double>(bsz);
}

template <typename T>
TrainResult<T> train(const TrainConfig& config, const MetricsSink& sink) {
    config.validate();
    if (dtype_of<T>() != config.dtype)
        throw ConfigError("train: instantiated dtype does not match config dtype");

    const SeededRng base(config.seed);
    SeededRng init_rng = base.substream(1);
    const SeededRng data_rng = base.substream(2);
    const SeededRng probe_rng = base.substream(3);

    ParamStore<T> params = init_params<T>(config.model, config.init, init_rng);
    AdamState<T> adam = make_adam(params, config.scheduler.lr0);
    EmaState<T> ema = make_ema(params, config.ema_decay, config.ema_lambda, config.ema_enabled,
                               config.ema_replace);
    SchedulerState sched = config.scheduler;
    sched.lr = sched.lr0;
    const std::size_t probe_every =
        config.probe_interval ? config.probe_interval : sched.step_rate;

    TrainResult<T> result;
    result.best_loss = std::numeric_limits<double>::infinity();

    auto last_tick = std::chrono::steady_clock::now();
    const auto emit = [&](std::size_t iter, double loss, double lr, std::optional<double> sigma,
                          double grad_norm) {
        const auto now = std::chrono::steady_clock::now();
        MetricsRecord rec;
        rec.iter = iter;
        rec.loss = loss;
        rec.lr = lr;
        rec.sigma = sigma;
        rec.grad_norm = grad_norm;
        rec.wall_ms = std::chrono::duration<double, std::milli>(now - last_tick).count();
        last_tick = now;
        if (sink) sink(rec);
    };

    for (std::size_t iter = 0; iter < config.total_iters; ++iter) {
        const PromptBatch<T> batch =
            make_batch<T>(config.task, config.batch_size, data_rng.substream(iter));
        BatchGrad<T> bg = batch_forward_backward(config.model, params, batch);
        result.final_loss = bg.loss;
        result.iters_run = iter + 1;

        double gsq = 0;
        for (const auto& kv : bg.grads.items)
            for (T x : kv.second.data) gsq += static_cast<double>(x) * static_cast<double>(x);
        const double grad_norm = std::sqrt(gsq);

        if (!std::isfinite(bg.loss) || bg.loss > config.divergence_loss) {
            result.diverged = true;
            result.abort_reason = "loss " + std::to_string(bg.loss) + " at iteration " +
                                  std::to_string(iter);
            emit(iter, bg.loss, sched.lr, std::nullopt, grad_norm);
            break;
        }
        if (bg.loss < result.best_loss) {
            result.best_loss = bg.loss;
            result.best_iter = iter;
            result.best_params = params;
        }

        std::optional<double> sigma;
        if (iter > 0 && iter % probe_every == 0) {
            std::vector<GradStore<T>> probe_grads;
            probe_grads.reserve(config.probe_count);
            const SeededRng probe_iter_rng = probe_rng.substream(iter);
            for (std::size_t p = 0; p < config.probe_count; ++p) {
                const PromptBatch<T> probe_batch =
                    make_batch<T>(config.task, config.batch_size, probe_iter_rng.substream(p));
                probe_grads.push_back(
                    batch_forward_backward(config.model, params, probe_batch).grads);
            }
            sigma = sigma_g(probe_grads).value;
        }

        const double lr = scheduler_step(sched, iter, sigma);
        adam.lr = lr;
        const std::vector<Tensor<T>> u = adam_step(adam, bg.grads);
        const std::vector<Tensor<T>> applied = ema_filter(ema, u);
        apply_update(params, applied);

        const bool stop_early = config.target_mse > 0 && bg.loss <= config.target_mse;
        if (iter % config.log_interval == 0 || iter + 1 == config.total_iters || stop_early)
            emit(iter, bg.loss, lr, sigma, grad_norm);
        if (stop_early) {
            result.early_stopped = true;
            break;
        }
    }

    result.params = params;
    if (!std::isfinite(result.best_loss)) {
        result.best_params = params;
        result.best_loss = result.final_loss;
    }
    return result;
}

#define PLS_INSTANTIATE_TRAINING(T)                                                       \
    template AdamState<T> make_adam<T>(const ParamStore<T>&, double);                     \
    template std::vector<Tensor<T>> adam_step<T>(AdamState<T>&, const GradStore<T>&);     \
    template EmaState<T> make_ema<T>(const ParamStore<T>&, double, double, bool, bool);   \
    template std::vector<Tensor<T>> ema_filter<T>(EmaState<T>&,                           \
                                                  const std::vector<Tensor<T>>&);         \
    template void apply_update<T>(ParamStore<T>&, const std::vector<Tensor<T>>&);         \
    template SigmaG sigma_g<T>(const std::vector<GradStore<T>>&);                         \
    template BatchGrad<T> batch_forward_backward<T>(const ModelSpec&, const ParamStore<T>&, \
                                                    const PromptBatch<T>&);               \
    template double batch_loss<T>(const ModelSpec&, const ParamStore<T>&,                 \
                                  const PromptBatch<T>&);                                 \
    template TrainResult<T> train<T>(const TrainConfig&, const MetricsSink&);

PLS_INSTANTIATE_TRAINING(float)
PLS_INSTANTIATE_TRAINING(double)

}  // namespace pls
