#include "pls/models.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "pls/errors.hpp"
#include "pls/linalg.hpp"

namespace pls {

using nlohmann::json;

void ModelSpec::validate() const {
    if (layers < 1)
        throw ConfigError("model: layers must be >= 1");
    if (emb < 1 || seq_len < 1 || in_dim < 1 || out_dim < 1)
        throw ConfigError("model: emb, seq_len, in_dim, out_dim must be >= 1");
    if (positional_encoding == PosEnc::OneHot && emb <= seq_len)
        throw ConfigError("model: one-hot positional encoding needs emb > seq_len");
    if (arch == Arch::Transformer || arch == Arch::LinearAttention) {
        if (heads < 1 || emb % heads != 0)
            throw ConfigError("model: heads must divide emb");
    }
    if (arch == Arch::Transformer && !causal)
        throw ConfigError("model: transformer is causal only");
    if (use_mlp && mlp_mult < 1)
        throw ConfigError("model: mlp_mult must be >= 1");
}

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::BaseConv: return "baseconv";
        case Arch::LinearAttention: return "linear_attention";
        case Arch::Transformer: return "transformer";
    }
    return "?";
}

Arch arch_from_name(const std::string& s) {
    if (s == "baseconv") return Arch::BaseConv;
    if (s == "linear_attention") return Arch::LinearAttention;
    if (s == "transformer") return Arch::Transformer;
    throw ConfigError("unknown arch: " + s);
}

const char* posenc_name(PosEnc p) {
    switch (p) {
        case PosEnc::None: return "none";
        case PosEnc::Learned: return "learned";
        case PosEnc::OneHot: return "one_hot";
    }
    return "?";
}

PosEnc posenc_from_name(const std::string& s) {
    if (s == "none") return PosEnc::None;
    if (s == "learned") return PosEnc::Learned;
    if (s == "one_hot") return PosEnc::OneHot;
    throw ConfigError("unknown positional_encoding: " + s);
}

const char* init_name(InitScheme s) {
    switch (s) {
        case InitScheme::GaussianScaled: return "gaussian_scaled";
        case InitScheme::Zeros: return "zeros";
        case InitScheme::IdentityDebug: return "identity_debug";
    }
    return "?";
}

InitScheme init_from_name(const std::string& s) {
    if (s == "gaussian_scaled") return InitScheme::GaussianScaled;
    if (s == "zeros") return InitScheme::Zeros;
    if (s == "identity_debug") return InitScheme::IdentityDebug;
    throw ConfigError("unknown init scheme: " + s);
}

std::string model_spec_to_json(const ModelSpec& s) {
    json j;
    j["arch"] = arch_name(s.arch);
    j["layers"] = s.layers;
    j["emb"] = s.emb;
    j["heads"] = s.heads;
    j["use_mlp"] = s.use_mlp;
    j["mlp_mult"] = s.mlp_mult;
    j["use_layernorm"] = s.use_layernorm;
    j["causal"] = s.causal;
    j["seq_len"] = s.seq_len;
    j["in_dim"] = s.in_dim;
    j["out_dim"] = s.out_dim;
    j["positional_encoding"] = posenc_name(s.positional_encoding);
    j["residual"] = s.residual;
    return j.dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelSpec d;
    ModelSpec s;
    s.arch = arch_from_name(j.value("arch", arch_name(d.arch)));
    s.layers = j.value("layers", d.layers);
    s.emb = j.value("emb", d.emb);
    s.heads = j.value("heads", d.heads);
    s.use_mlp = j.value("use_mlp", d.use_mlp);
    s.mlp_mult = j.value("mlp_mult", d.mlp_mult);
    s.use_layernorm = j.value("use_layernorm", d.use_layernorm);
    s.causal = j.value("causal", d.causal);
    s.seq_len = j.value("seq_len", d.seq_len);
    s.in_dim = j.value("in_dim", d.in_dim);
    s.out_dim = j.value("out_dim", d.out_dim);
    s.positional_encoding = posenc_from_name(j.value("positional_encoding", posenc_name(d.positional_encoding)));
    s.residual = j.value("residual", d.residual);
    s.validate();
    return s;
}

std::vector<ParamDef> param_defs(const ModelSpec& spec) {
    spec.validate();
    const auto n = static_cast<std::size_t>(spec.seq_len);
    const auto e = static_cast<std::size_t>(spec.emb);
    const auto dw = static_cast<std::size_t>(spec.data_width());
    std::vector<ParamDef> defs;
    defs.push_back({"embed.w", static_cast<std::size_t>(spec.in_dim), dw});
    defs.push_back({"embed.b", 1, dw});
    if (spec.positional_encoding == PosEnc::Learned)
        defs.push_back({"pos.p", n, e});
    for (int l = 0; l < spec.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        switch (spec.arch) {
            case Arch::BaseConv:
                defs.push_back({p + "w_gate", e, e});
                defs.push_back({p + "b_gate", n, e});
                defs.push_back({p + "w_in", e, e});
                defs.push_back({p + "b_in", n, e});
                defs.push_back({p + "h", n, e});
                defs.push_back({p + "b_conv", n, e});
                defs.push_back({p + "w_out", e, e});
                defs.push_back({p + "b_out", n, e});
                break;
            case Arch::LinearAttention:
                defs.push_back({p + "wq", e, e});
                defs.push_back({p + "wk", e, e});
                defs.push_back({p + "wv", e, e});
                defs.push_back({p + "b_v", n, e});
                defs.push_back({p + "wo", e, e});
                defs.push_back({p + "b_o", 1, e});
                break;
            case Arch::Transformer: {
                if (spec.use_layernorm) {
                    defs.push_back({p + "ln1.g", 1, e});
                    defs.push_back({p + "ln1.b", 1, e});
                }
                // Queries and keys are bias-free: softmax scores are invariant to a
                // constant key shift, so a key bias would be dead weight.
                defs.push_back({p + "attn.wq", e, e});
                defs.push_back({p + "attn.wk", e, e});
                defs.push_back({p + "attn.wv", e, e});
                defs.push_back({p + "attn.bv", 1, e});
                defs.push_back({p + "attn.wo", e, e});
                defs.push_back({p + "attn.bo", 1, e});
                if (spec.use_mlp) {
                    const std::size_t hidden = e * static_cast<std::size_t>(spec.mlp_mult);
                    if (spec.use_layernorm) {
                        defs.push_back({p + "ln2.g", 1, e});
                        defs.push_back({p + "ln2.b", 1, e});
                    }
                    defs.push_back({p + "mlp.w1", e, hidden});
                    defs.push_back({p + "mlp.b1", 1, hidden});
                    defs.push_back({p + "mlp.w2", hidden, e});
                    defs.push_back({p + "mlp.b2", 1, e});
                }
                break;
            }
        }
    }
    defs.push_back({"readout.w", e, static_cast<std::size_t>(spec.out_dim)});
    defs.push_back({"readout.b", 1, static_cast<std::size_t>(spec.out_dim)});
    return defs;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Rectangular identity block, used by identity_debug embed/readout.
template <typename T>
Tensor<T> rect_eye(std::size_t rows, std::size_t cols) {
    Tensor<T> t({rows, cols});
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) t.at(i, i) = T(1);
    return t;
}

}  // namespace

template <typename T>
ParamStore<T> init_params(const ModelSpec& spec, InitScheme scheme, SeededRng& rng) {
    ParamStore<T> store;
    for (const ParamDef& def : param_defs(spec)) {
        const bool is_ln_gain = ends_with(def.name, "ln1.g") || ends_with(def.name, "ln2.g");
        const bool is_filter = ends_with(def.name, ".h");
        const bool is_bias = def.name == "embed.b" || def.name == "readout.b" ||
                             def.name.find(".b") != std::string::npos;
        Tensor<T> t({def.rows, def.cols});
        switch (scheme) {
            case InitScheme::GaussianScaled: {
                if (is_ln_gain) {
                    for (T& x : t.data) x = T(1);
                } else if (is_filter) {
                    t = gaussian<T>(rng, {def.rows, def.cols},
                                    1.0 / std::sqrt(static_cast<double>(spec.seq_len)));
                } else if (!is_bias) {
                    t = gaussian<T>(rng, {def.rows, def.cols},
                                    1.0 / std::sqrt(static_cast<double>(def.rows)));
                }
                break;
            }
            case InitScheme::Zeros:
                break;
            case InitScheme::IdentityDebug: {
                if (is_ln_gain) {
                    for (T& x : t.data) x = T(1);
                } else if (def.name == "embed.w" || def.name == "readout.w") {
                    t = rect_eye<T>(def.rows, def.cols);
                } else if (spec.arch == Arch::BaseConv) {
                    // Gate constant one, conv path = identity: layer == input.
                    if (ends_with(def.name, "b_gate"))
                        t = Tensor<T>::full({def.rows, def.cols}, T(1));
                    else if (ends_with(def.name, "w_in") || ends_with(def.name, "w_out"))
                        t = rect_eye<T>(def.rows, def.cols);
                    else if (is_filter)
                        for (std::size_t j = 0; j < def.cols; ++j) t.at(0, j) = T(1);
                }
                // Attention and MLP weights stay zero: blocks pass input through.
                break;
            }
        }
        store.add(def.name, std::move(t));
    }
    return store;
}

template <typename T>
std::vector<int> bind_params(Tape<T>& tape, const ParamStore<T>& params, bool trainable) {
    std::vector<int> ids;
    ids.reserve(params.items.size());
    for (const auto& kv : params.items)
        ids.push_back(tape.leaf(kv.second, kv.first, trainable));
    return ids;
}

namespace {

// Walks parameter ids in the same order param_defs emits them.
struct ParamCursor {
    const std::vector<int>& ids;
    std::size_t next = 0;
    int take() {
        if (next >= ids.size())
            throw DimensionError("model_forward: parameter id list too short");
        return ids[next++];
    }
};

template <typename T>
int broadcast_row(Tape<T>& tape, int ones_col, int row) {
    return tape.matmul(ones_col, row);
}

template <typename T>
int affine_layer_norm(Tape<T>& tape, int x, int gain, int shift, int ones_col) {
    const int normed = tape.layer_norm_rows(x);
    const int scaled = tape.hadamard(normed, broadcast_row(tape, ones_col, gain));
    return tape.add(scaled, broadcast_row(tape, ones_col, shift));
}

template <typename T>
int baseconv_layer(Tape<T>& tape, const ModelSpec& spec, ParamCursor& pc, int x) {
    const int wg = pc.take(), bg = pc.take(), wi = pc.take(), bi = pc.take();
    const int h = pc.take(), bc = pc.take(), wo = pc.take(), bo = pc.take();
    const int gate = tape.add(tape.matmul(x, wg), bg);
    const int cin = tape.add(tape.matmul(x, wi), bi);
    const int conv = spec.causal ? tape.causal_conv_cols(h, cin) : tape.circular_conv_cols(h, cin);
    const int mixed = tape.hadamard(gate, tape.add(conv, bc));
    return tape.add(tape.matmul(mixed, wo), bo);
}

template <typename T>
int linear_attention_layer(Tape<T>& tape, const ModelSpec& spec, ParamCursor& pc, int x,
                           int ones_col, int tri) {
    const int wq = pc.take(), wk = pc.take(), wv = pc.take(), bv = pc.take();
    const int wo = pc.take(), bo = pc.take();
    const int q = tape.matmul(x, wq);
    const int k = tape.matmul(x, wk);
    const int v = tape.add(tape.matmul(x, wv), bv);
    const std::size_t n = static_cast<std::size_t>(spec.seq_len);
    const std::size_t dh = static_cast<std::size_t>(spec.emb / spec.heads);
    int heads_out = -1;
    for (int hd = 0; hd < spec.heads; ++hd) {
        const std::size_t c0 = static_cast<std::size_t>(hd) * dh;
        const int qh = tape.slice(q, 0, n, c0, c0 + dh);
        const int kh = tape.slice(k, 0, n, c0, c0 + dh);
        const int vh = tape.slice(v, 0, n, c0, c0 + dh);
        int scores = tape.matmul(qh, tape.transpose(kh));
        if (tri >= 0) scores = tape.hadamard(scores, tri);
        const int oh = tape.matmul(scores, vh);
        heads_out = hd == 0 ? oh : tape.concat(heads_out, oh, 1);
    }
    return tape.add(tape.matmul(heads_out, wo), broadcast_row(tape, ones_col, bo));
}

template <typename T>
int transformer_block(Tape<T>& tape, const ModelSpec& spec, ParamCursor& pc, int x, int ones_col,
                      int mask) {
    int ln1g = -1, ln1b = -1;
    if (spec.use_layernorm) {
        ln1g = pc.take();
        ln1b = pc.take();
    }
    const int wq = pc.take(), wk = pc.take();
    const int wv = pc.take(), bv = pc.take(), wo = pc.take(), bo = pc.take();

    const int h_in = spec.use_layernorm ? affine_layer_norm(tape, x, ln1g, ln1b, ones_col) : x;
    const int q = tape.matmul(h_in, wq);
    const int k = tape.matmul(h_in, wk);
    const int v = tape.add(tape.matmul(h_in, wv), broadcast_row(tape, ones_col, bv));

    const std::size_t n = static_cast<std::size_t>(spec.seq_len);
    const std::size_t dh = static_cast<std::size_t>(spec.emb / spec.heads);
    int heads_out = -1;
    for (int hd = 0; hd < spec.heads; ++hd) {
        const std::size_t c0 = static_cast<std::size_t>(hd) * dh;
        const int qh = tape.slice(q, 0, n, c0, c0 + dh);
        const int kh = tape.slice(k, 0, n, c0, c0 + dh);
        const int vh = tape.slice(v, 0, n, c0, c0 + dh);
        int scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                                1.0 / std::sqrt(static_cast<double>(dh)));
        scores = tape.add(scores, mask);
        const int oh = tape.matmul(tape.softmax_rows(scores), vh);
        heads_out = hd == 0 ? oh : tape.concat(heads_out, oh, 1);
    }
    const int attn = tape.add(tape.matmul(heads_out, wo), broadcast_row(tape, ones_col, bo));
    int out = tape.add(x, attn);

    if (spec.use_mlp) {
        int ln2g = -1, ln2b = -1;
        if (spec.use_layernorm) {
            ln2g = pc.take();
            ln2b = pc.take();
        }
        const int w1 = pc.take(), b1 = pc.take(), w2 = pc.take(), b2 = pc.take();
        const int m_in = spec.use_layernorm ? affine_layer_norm(tape, out, ln2g, ln2b, ones_col) : out;
        int m = tape.relu(tape.add(tape.matmul(m_in, w1), broadcast_row(tape, ones_col, b1)));
        m = tape.add(tape.matmul(m, w2), broadcast_row(tape, ones_col, b2));
        out = tape.add(out, m);
    }
    return out;
}

}  // namespace

template <typename T>
int model_forward(Tape<T>& tape, const ModelSpec& spec, const std::vector<int>& params, int input,
                  std::vector<int>* layer_nodes) {
    spec.validate();
    const Tensor<T>& u = tape.value(input);
    if (u.rank() != 2 || u.dims[0] != static_cast<std::size_t>(spec.seq_len) ||
        u.dims[1] != static_cast<std::size_t>(spec.in_dim))
        throw DimensionError("model_forward: input must be seq_len x in_dim");
    if (params.size() != param_defs(spec).size())
        throw DimensionError("model_forward: parameter id count mismatch");

    const std::size_t n = static_cast<std::size_t>(spec.seq_len);
    ParamCursor pc{params};
    const int ones_col = tape.leaf(Tensor<T>::full({n, 1}, T(1)));

    const int embed_w = pc.take(), embed_b = pc.take();
    int x = tape.add(tape.matmul(input, embed_w), broadcast_row(tape, ones_col, embed_b));
    if (spec.positional_encoding == PosEnc::OneHot) {
        x = tape.concat(tape.leaf(eye<T>(n)), x, 1);
    } else if (spec.positional_encoding == PosEnc::Learned) {
        x = tape.add(x, pc.take());
    }

    int mask = -1;
    if (spec.arch == Arch::Transformer) {
        Tensor<T> m({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = T(-1e30);
        mask = tape.leaf(std::move(m));
    }
    int tri = -1;
    if (spec.arch == Arch::LinearAttention && spec.causal) {
        Tensor<T> m({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.at(i, j) = T(1);
        tri = tape.leaf(std::move(m));
    }

    for (int l = 0; l < spec.layers; ++l) {
        int y;
        switch (spec.arch) {
            case Arch::BaseConv:
                y = baseconv_layer(tape, spec, pc, x);
                if (spec.residual) y = tape.add(y, x);
                break;
            case Arch::LinearAttention:
                y = linear_attention_layer(tape, spec, pc, x, ones_col, tri);
                if (spec.residual) y = tape.add(y, x);
                break;
            case Arch::Transformer:
                y = transformer_block(tape, spec, pc, x, ones_col, mask);
                break;
        }
        x = y;
        if (layer_nodes)
            layer_nodes->push_back(x);
    }

    const int readout_w = pc.take(), readout_b = pc.take();
    return tape.add(tape.matmul(x, readout_w), broadcast_row(tape, ones_col, readout_b));
}

template <typename T>
Tensor<T> model_eval(const ModelSpec& spec, const ParamStore<T>& params, const Tensor<T>& input) {
    Tape<T> tape;
    const std::vector<int> ids = bind_params(tape, params, false);
    const int out = model_forward(tape, spec, ids, tape.leaf(input));
    return tape.value(out);
}

template <typename T>
std::vector<Tensor<T>> model_eval_layers(const ModelSpec& spec, const ParamStore<T>& params,
                                         const Tensor<T>& input) {
    Tape<T> tape;
    const std::vector<int> ids = bind_params(tape, params, false);
    std::vector<int> layer_nodes;
    model_forward(tape, spec, ids, tape.leaf(input), &layer_nodes);
    std::vector<Tensor<T>> out;
    out.reserve(layer_nodes.size());
    for (int id : layer_nodes) out.push_back(tape.value(id));
    return out;
}

template <typename T>
Tensor<T> apply_readout(const Tensor<T>& model_out, const ReadoutMask& mask) {
    if (model_out.rank() != 2 || mask.r1 > model_out.dims[0] || mask.c1 > model_out.dims[1] ||
        mask.r0 >= mask.r1 || mask.c0 >= mask.c1)
        throw DimensionError("apply_readout: mask out of range");
    Tensor<T> out({mask.rows(), mask.cols()});
    for (std::size_t i = mask.r0; i < mask.r1; ++i)
        for (std::size_t j = mask.c0; j < mask.c1; ++j)
            out.at(i - mask.r0, j - mask.c0) = model_out.at(i, j);
    return out;
}

#define PLS_INSTANTIATE_MODELS(T)                                                            \
    template ParamStore<T> init_params<T>(const ModelSpec&, InitScheme, SeededRng&);         \
    template std::vector<int> bind_params<T>(Tape<T>&, const ParamStore<T>&, bool);          \
    template int model_forward<T>(Tape<T>&, const ModelSpec&, const std::vector<int>&, int,  \
                                  std::vector<int>*);                                        \
    template Tensor<T> model_eval<T>(const ModelSpec&, const ParamStore<T>&, const Tensor<T>&); \
    template std::vector<Tensor<T>> model_eval_layers<T>(const ModelSpec&, const ParamStore<T>&, \
                                                         const Tensor<T>&);                  \
    template Tensor<T> apply_readout<T>(const Tensor<T>&, const ReadoutMask&);

PLS_INSTANTIATE_MODELS(float)
PLS_INSTANTIATE_MODELS(double)

#undef PLS_INSTANTIATE_MODELS

}  // namespace pls
