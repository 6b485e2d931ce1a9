#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pls/constructions.hpp"
#include "pls/models.hpp"
#include "pls/tasks.hpp"
#include "pls/training.hpp"

namespace pls {

// Update-direction evaluator used by the fixed-point iterator: maps the
// current x (with the instance's A, b) to the step direction delta.
template <typename T>
using GradFn = std::function<Tensor<T>(const LeastSquaresInstance<T>&, const Tensor<T>&)>;

// Delta straight from the analytic gradient.
template <typename T>
GradFn<T> oracle_grad_fn(bool normalized = false);

// Delta read out of a gradient-emitting model: the instance is embedded with
// the current x in place of x0, the model runs, and the readout slice is the
// step direction.
template <typename T>
GradFn<T> construction_grad_fn(const BuiltModel<T>& model);

enum class StopReason { Tol, MaxIters, Diverged };
const char* stop_name(StopReason r);

struct IterationStep {
    std::size_t iter = 0;      // 1-based update count
    double delta_norm = 0;     // max-abs change of x this step
    double mse_to_star = 0;
};

template <typename T>
struct IterationTrace {
    std::vector<IterationStep> steps;
    StopReason reason = StopReason::MaxIters;
    Tensor<T> x;  // final iterate
};

// x_{i+1} = x_i - eta * delta_i until the max-abs step falls below tol, the
// iteration budget runs out, or ||x|| exceeds 1e9 (reported as divergence,
// not an error).
template <typename T>
IterationTrace<T> iterative_solve(const GradFn<T>& grad_fn, const LeastSquaresInstance<T>& inst,
                                  double eta, double tol = 1e-12,
                                  std::size_t max_iters = 10000);

// A checkpoint pulled back into memory together with its provenance.
template <typename T>
struct LoadedModel {
    ModelSpec spec;
    ParamStore<T> params;
    ReadoutMask readout;
    bool is_construction = false;
    ConstructionKind ckind = ConstructionKind::Read;
    std::size_t n = 0, d = 0, k = 1;
    double eta = 0.04;
    bool emit_gradient = false;
    bool normalized = false;
    bool has_task = false;
    TaskSpec task;
};

template <typename T>
LoadedModel<T> load_model(const std::string& path);

// Builds a GradFn from a loaded checkpoint; requires either a
// gradient-emitting GD construction or a model trained on the gradient task.
template <typename T>
GradFn<T> model_grad_fn(const LoadedModel<T>& lm);

// FNV-1a over the canonical (sorted-key) JSON dump, as 16 hex digits.
std::string config_hash(const std::string& config_json);

// Process exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitGradCheck = 4;

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<Dtype> dtype;
};

// Each command parses its JSON config (strict: unknown keys are rejected),
// does the work, writes its artifacts under the output directory, and
// returns the process exit code.  Errors are printed to stderr.
int cmd_train(const std::string& config_json, const CliOverrides& ov);
int cmd_eval(const std::string& config_json, const CliOverrides& ov);
int cmd_construct(const std::string& config_json, const CliOverrides& ov);
int cmd_iterate(const std::string& config_json, const CliOverrides& ov);
int cmd_sweep_ood(const std::string& config_json, const CliOverrides& ov);
int cmd_depth_sweep(const std::string& config_json, const CliOverrides& ov);
int cmd_gradcheck(const std::string& config_json, const CliOverrides& ov);
int cmd_oracle(const std::string& config_json, const CliOverrides& ov);

}  // namespace pls
