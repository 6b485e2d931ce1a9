#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pls/models.hpp"
#include "pls/rng.hpp"
#include "pls/tensor.hpp"

namespace pls {

// How least-squares problems are drawn: A starts Gaussian and its spectrum is
// remapped to [sigma_max / kappa, sigma_max]; solution entries are
// N(0, target_sigma^2).
struct DistributionSpec {
    std::size_t n = 20, d = 5;
    double sigma_max = 5.0;
    double kappa = 5.0;
    double target_sigma = 1.0;
    double noise_std = 0.0;

    void validate() const;
};

// Copy of `base` with the solution scale replaced; the spectrum (and hence
// any convergent step size) is unchanged.
DistributionSpec ood_spec(const DistributionSpec& base, double sigma);

template <typename T>
struct LeastSquaresInstance {
    Tensor<T> a;       // n x d
    Tensor<T> b;       // length n
    Tensor<T> x_star;  // length d
    Tensor<T> x0;      // length d
    double eta = 0.04;
    DistributionSpec dist;
};

template <typename T>
LeastSquaresInstance<T> sample_instance(const DistributionSpec& dist, SeededRng& rng);

// grad = A^T (A x - b); the normalized variant divides by the row count.
// Dot products accumulate in double for either dtype, so single-precision
// descent bottoms out at the iterate storage precision.
template <typename T>
Tensor<T> grad_oracle(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x,
                      bool normalized = false);

// One descent step x - eta * grad.
template <typename T>
Tensor<T> gd_update(const Tensor<T>& x, const Tensor<T>& grad, double eta);

// In-place descent iterate with compensated (Kahan) accumulation: `carry`
// holds the low-order bits the working dtype drops when x absorbs -eta*grad.
// Without it, single precision stalls once |eta*grad| falls below half an
// ulp of x (squared error ~1e-12 at eta = 0.04); with it the iterate reaches
// the storage floor near 2^-46.  Shared by the oracle and the harness
// iterator so their trajectories are bit-identical.
template <typename T>
struct GdIterate {
    Tensor<T> x;
    Tensor<T> carry;
    explicit GdIterate(const Tensor<T>& x0) : x(x0), carry(x0.dims) {}
    void apply(const Tensor<T>& grad, double eta);
};

// k exact gradient-descent iterates.  When `trace` is given it receives
// x_1..x_k.  Throws DivergenceError (naming the iterate) if an iterate's
// max-abs entry exceeds 1e12.
template <typename T>
Tensor<T> gd_oracle(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0, double eta,
                    std::size_t k, bool normalized = false,
                    std::vector<Tensor<T>>* trace = nullptr);

// Newton iteration for the inverse of G = A^T A: M_{t+1} = M_t (2I - G M_t),
// M_0 = G / ||G||_F^2.  Returns M after `steps` iterations; throws
// DivergenceError (with the residual) if ||I - G M|| blows up.  When given,
// residual_trace receives ||I - G M||_F after every step.
template <typename T>
Tensor<T> newton_oracle(const Tensor<T>& a, std::size_t steps,
                        std::vector<double>* residual_trace = nullptr);

enum class TaskKind { LeastSquares, Read, Linear, Multiply, Gradient, KIter };

const char* task_name(TaskKind k);
TaskKind task_from_name(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::LeastSquares;
    std::size_t n = 40, d = 20;  // primitive prompt shape
    std::size_t width = 0;       // zero-pad prompts to this many channels (0 = natural)
    std::size_t k = 1;           // KIter iterate count
    double eta = 0.04;
    bool normalized = false;
    DistributionSpec dist;  // least-squares family tasks draw from this

    // Read: copy columns [a,b) of row i into row j (b = 0 means full width).
    std::size_t read_i = 0, read_j = 1, read_a = 0, read_b = 0;
    // Multiply: out[c] = u[a+c] * u[b+c] for c < d_out (d_out = 0 means d/2).
    std::size_t mul_a = 0, mul_b = 0, mul_d_out = 0;
    // Linear: fixed matrix, d x d_out.
    Tensor<double> h_matrix;

    void validate() const;
    std::size_t prompt_rows() const;
    std::size_t prompt_cols() const;  // natural width before padding
    std::size_t out_cols() const;
};

// Draws the task's frozen randomness (Read indices uniform with i != j,
// Linear matrix entries N(0, 3)) for fields still at their sentinel values.
void randomize_task(TaskSpec& task, SeededRng& rng);

// The slice of the model output a task is scored on.
ReadoutMask task_readout(const TaskSpec& task);

template <typename T>
struct PromptBatch {
    Tensor<T> inputs;   // batch x rows x width
    Tensor<T> targets;  // batch x readout rows x readout cols
    ReadoutMask readout;
    TaskKind kind = TaskKind::LeastSquares;
    std::uint64_t seed = 0, stream = 0;  // provenance of the generating rng
};

// Samples `batch` instances using per-sample substreams of `rng`, so the
// result depends only on (seed, stream), not on evaluation order.
template <typename T>
PromptBatch<T> make_batch(const TaskSpec& task, std::size_t batch, const SeededRng& rng);

// Single-instance prompt layouts.
// Least squares: n rows of (a_i; b_i).
template <typename T>
Tensor<T> ls_prompt(const LeastSquaresInstance<T>& inst);
// Gradient / k-iterate: the same rows plus a final row (x0; 0).
template <typename T>
Tensor<T> iterate_prompt(const LeastSquaresInstance<T>& inst);

// Zero-pads columns up to `width`; throws CapacityError when width is too
// small to hold the prompt.
template <typename T>
Tensor<T> pad_prompt(const Tensor<T>& prompt, std::size_t width);

template <typename T>
struct PromptParts {
    Tensor<T> a;
    Tensor<T> b;
    Tensor<T> x0;  // empty for ls prompts
};

// Inverse of the prompt layouts (before padding is stripped by `d`).
template <typename T>
PromptParts<T> split_ls_prompt(const Tensor<T>& prompt, std::size_t d);
template <typename T>
PromptParts<T> split_iterate_prompt(const Tensor<T>& prompt, std::size_t d);

// Exact primitive output for a raw n x d input.
template <typename T>
Tensor<T> primitive_target(const TaskSpec& task, const Tensor<T>& data);

// Serializes a batch ("inputs", "targets" tensors plus a JSON manifest with
// the task and provenance) into the standard tensor container.
template <typename T>
void dump_batch(const std::string& path, const PromptBatch<T>& batch, const TaskSpec& task);

std::string task_spec_to_json(const TaskSpec& task);
TaskSpec task_spec_from_json(const std::string& text);

}  // namespace pls
