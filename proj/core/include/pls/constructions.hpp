#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pls/models.hpp"
#include "pls/rng.hpp"
#include "pls/tensor.hpp"

namespace pls {

enum class ConstructionKind { Read, Linear, Multiply, GdNoncausal, GdCausal };

const char* construction_name(ConstructionKind k);
ConstructionKind construction_from_name(const std::string& s);

struct GdOptions {
    bool emit_gradient = false;  // final update layer writes the raw gradient into the x block
    bool normalized = false;     // use the 1/N-averaged gradient
};

// A compiled model: spec + exact weights + where the answer lives in the
// model output, plus a JSON table documenting the channel block layout.
template <typename T>
struct BuiltModel {
    ModelSpec spec;
    ParamStore<T> params;
    ReadoutMask readout;
    ConstructionKind kind = ConstructionKind::Read;
    std::size_t n = 0, d = 0, k = 0;
    double eta = 0;
    std::string layout_json;
};

// Declarative form used by the CLI; `emb` of 0 means "use the layout width".
struct ConstructionSpec {
    ConstructionKind kind = ConstructionKind::Read;
    std::size_t i = 0, j = 0, a = 0, b = 0;
    std::size_t d_out = 0;
    Tensor<double> h_matrix;  // Linear only
    double eta = 0.04;
    std::size_t k = 1;
    std::size_t n = 40, d = 20;
    std::size_t emb = 0;
    GdOptions gd;
    Dtype dtype = Dtype::Single;
};

// Copies row i's columns [a,b) into row j, every other entry unchanged.
// One layer, one-hot positions, residual skip.
template <typename T>
BuiltModel<T> build_read(std::size_t i, std::size_t j, std::size_t a, std::size_t b,
                         std::size_t n, std::size_t d);

// Computes u * H for a fixed D x d_out matrix H.
template <typename T>
BuiltModel<T> build_linear(const Tensor<T>& h_matrix, std::size_t n);

// Computes u[:, a:a+d_out] .* u[:, b:b+d_out].
template <typename T>
BuiltModel<T> build_multiply(std::size_t a, std::size_t b, std::size_t d_out,
                             std::size_t n, std::size_t d);

// k gradient-descent iterates on the least-squares objective, 3 layers per
// iterate, sum-over-positions realized with a circular all-ones filter.
// Input must come from embed_gd_noncausal.
template <typename T>
BuiltModel<T> build_gd_noncausal(double eta, std::size_t k, std::size_t n, std::size_t d,
                                 GdOptions opt = {});

// Same iterates under strictly causal information flow: two preparation
// layers accumulate sum(b_i a_i) and the flattened Gram matrix with causal
// all-ones filters, then one layer per iterate. Input from embed_gd_causal.
template <typename T>
BuiltModel<T> build_gd_causal(double eta, std::size_t k, std::size_t n, std::size_t d,
                              GdOptions opt = {});

BuiltModel<float> build_construction_single(const ConstructionSpec& cs);
BuiltModel<double> build_construction_double(const ConstructionSpec& cs);

// Layout widths (embedding channel counts) the GD builders require.
std::size_t gd_noncausal_width(std::size_t d);
std::size_t gd_causal_width(std::size_t d);

// Embeds a least-squares instance (A: N x D, b: length N, x0: length D) into
// the model input the GD constructions consume.  Non-causal: N positions,
// x0 replicated at every one.  Causal: N data positions plus a final row
// holding x0 and a block of ones.
template <typename T>
Tensor<T> embed_gd_noncausal(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0);
template <typename T>
Tensor<T> embed_gd_causal(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0);

template <typename T>
struct GdPromptParts {
    Tensor<T> a;   // N x D
    Tensor<T> b;   // length N
    Tensor<T> x0;  // length D
};

// Recovers (A, b, x0) from an embedded GD input; inverse of the embedders.
template <typename T>
GdPromptParts<T> extract_gd_noncausal(const Tensor<T>& input, std::size_t d);
template <typename T>
GdPromptParts<T> extract_gd_causal(const Tensor<T>& input, std::size_t d);

// Direct evaluations of the primitives, used as oracles against the builders.
template <typename T>
Tensor<T> primitive_read(const Tensor<T>& u, std::size_t i, std::size_t j, std::size_t a,
                         std::size_t b);
template <typename T>
Tensor<T> primitive_linear(const Tensor<T>& u, const Tensor<T>& h_matrix);
template <typename T>
Tensor<T> primitive_multiply(const Tensor<T>& u, std::size_t a, std::size_t b,
                             std::size_t d_out);

// The iterate block (x after each GD step) read off the layer outputs of a
// GD construction; entry t is iterate t+1.
template <typename T>
std::vector<Tensor<T>> gd_construction_iterates(const BuiltModel<T>& model,
                                                const Tensor<T>& input);

struct VerifyReport {
    double mse = 0;
    double max_abs_err = 0;
};

// Runs the model on n fresh sampled inputs and compares its readout slice
// with oracle_fn applied to the same input.
template <typename T>
VerifyReport verify_construction(const BuiltModel<T>& model,
                                 const std::function<Tensor<T>(const Tensor<T>&)>& oracle_fn,
                                 const std::function<Tensor<T>(SeededRng&)>& sampler,
                                 std::size_t n_samples, SeededRng& rng);

}  // namespace pls
