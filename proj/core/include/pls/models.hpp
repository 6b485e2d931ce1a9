#pragma once

#include <string>
#include <vector>

#include "pls/autodiff.hpp"
#include "pls/rng.hpp"
#include "pls/tensor.hpp"

namespace pls {

enum class Arch { BaseConv, LinearAttention, Transformer };
enum class PosEnc { None, Learned, OneHot };
enum class InitScheme { GaussianScaled, Zeros, IdentityDebug };

struct ModelSpec {
    Arch arch = Arch::BaseConv;
    int layers = 1;
    int emb = 8;  // width the layer stack operates at (includes one-hot block)
    int heads = 1;
    bool use_mlp = false;
    int mlp_mult = 4;
    bool use_layernorm = false;
    bool causal = true;
    int seq_len = 8;
    int in_dim = 1;
    int out_dim = 1;
    PosEnc positional_encoding = PosEnc::None;
    // Per-layer skip connection for BaseConv / linear attention stacks.
    // Transformer blocks always use their own internal residuals.
    bool residual = true;

    // Width the input is projected to; one-hot positional columns occupy the
    // first seq_len channels, data channels fill the rest.
    int data_width() const {
        return positional_encoding == PosEnc::OneHot ? emb - seq_len : emb;
    }
    void validate() const;
};

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& s);
const char* posenc_name(PosEnc p);
PosEnc posenc_from_name(const std::string& s);
const char* init_name(InitScheme s);
InitScheme init_from_name(const std::string& s);

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

struct ParamDef {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

// Canonical parameter schema for a model; order defines checkpoint layout
// and gradient flattening order.
std::vector<ParamDef> param_defs(const ModelSpec& spec);

template <typename T>
ParamStore<T> init_params(const ModelSpec& spec, InitScheme scheme, SeededRng& rng);

// Creates one tape leaf per parameter, in store order.
template <typename T>
std::vector<int> bind_params(Tape<T>& tape, const ParamStore<T>& params, bool trainable);

// Full forward pass: input projection, positional encoding, layer stack,
// readout projection.  `params` are the leaf ids from bind_params.  Returns
// the seq_len x out_dim output node.  When layer_nodes is non-null it is
// filled with each layer's output node (after the residual, before readout).
template <typename T>
int model_forward(Tape<T>& tape, const ModelSpec& spec, const std::vector<int>& params,
                  int input, std::vector<int>* layer_nodes = nullptr);

template <typename T>
Tensor<T> model_eval(const ModelSpec& spec, const ParamStore<T>& params, const Tensor<T>& input);

template <typename T>
std::vector<Tensor<T>> model_eval_layers(const ModelSpec& spec, const ParamStore<T>& params,
                                         const Tensor<T>& input);

// Rectangular slice of the model output that a task is scored on.
struct ReadoutMask {
    std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
    std::size_t rows() const { return r1 - r0; }
    std::size_t cols() const { return c1 - c0; }
};

template <typename T>
Tensor<T> apply_readout(const Tensor<T>& model_out, const ReadoutMask& mask);

}  // namespace pls
