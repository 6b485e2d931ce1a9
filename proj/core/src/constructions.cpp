#include "pls/constructions.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <initializer_list>
#include <utility>

#include <nlohmann/json.hpp>

#include "pls/errors.hpp"
#include "pls/linalg.hpp"

namespace pls {

namespace {

using json = nlohmann::json;

template <typename T>
Tensor<T>& P(ParamStore<T>& store, const std::string& name) {
    return store.at(name);
}

template <typename T>
ParamStore<T> zero_params(const ModelSpec& spec) {
    SeededRng rng(0);
    return init_params<T>(spec, InitScheme::Zeros, rng);
}

std::string layer_name(int l, const char* field) {
    return "layers." + std::to_string(l) + "." + field;
}

std::string block_table(std::initializer_list<std::pair<const char*, std::array<std::size_t, 2>>> blocks) {
    json j;
    for (const auto& [name, range] : blocks) j["blocks"][name] = {range[0], range[1]};
    return j.dump();
}

void check_emb_override(std::size_t requested, std::size_t required, const char* kind) {
    if (requested != 0 && requested != required)
        throw CapacityError(std::string(kind) + " construction layout needs emb = " +
                            std::to_string(required) + ", got " + std::to_string(requested));
}

}  // namespace

const char* construction_name(ConstructionKind k) {
    switch (k) {
        case ConstructionKind::Read: return "read";
        case ConstructionKind::Linear: return "linear";
        case ConstructionKind::Multiply: return "multiply";
        case ConstructionKind::GdNoncausal: return "gd_noncausal";
        case ConstructionKind::GdCausal: return "gd_causal";
    }
    return "?";
}

ConstructionKind construction_from_name(const std::string& s) {
    if (s == "read") return ConstructionKind::Read;
    if (s == "linear") return ConstructionKind::Linear;
    if (s == "multiply") return ConstructionKind::Multiply;
    if (s == "gd_noncausal") return ConstructionKind::GdNoncausal;
    if (s == "gd_causal") return ConstructionKind::GdCausal;
    throw ConfigError("unknown construction kind: " + s);
}

std::size_t gd_noncausal_width(std::size_t d) { return 4 * d + 1; }
std::size_t gd_causal_width(std::size_t d) { return 2 * d * d + 5 * d + 1; }

template <typename T>
BuiltModel<T> build_read(std::size_t i, std::size_t j, std::size_t a, std::size_t b,
                         std::size_t n, std::size_t d) {
    if (i == j) throw ConfigError("read: source and target rows must differ");
    if (i >= n || j >= n) throw ConfigError("read: row index out of range");
    if (!(a < b && b <= d)) throw ConfigError("read: need 0 <= a < b <= d");

    BuiltModel<T> m;
    m.kind = ConstructionKind::Read;
    m.n = n;
    m.d = d;
    m.spec.arch = Arch::BaseConv;
    m.spec.layers = 1;
    m.spec.emb = static_cast<int>(n + d);
    m.spec.causal = false;
    m.spec.seq_len = static_cast<int>(n);
    m.spec.in_dim = static_cast<int>(d);
    m.spec.out_dim = static_cast<int>(d);
    m.spec.positional_encoding = PosEnc::OneHot;
    m.spec.residual = true;
    m.spec.validate();

    m.params = zero_params<T>(m.spec);
    P(m.params, "embed.w") = eye<T>(d);

    // Gate selects row j via its one-hot channel; the filter on each data
    // channel is a circular shift by (j - i) minus the identity, so row j's
    // conv output is u[i] - u[j] and the residual turns that into a copy.
    Tensor<T>& w_gate = P(m.params, layer_name(0, "w_gate"));
    Tensor<T>& w_in = P(m.params, layer_name(0, "w_in"));
    Tensor<T>& h = P(m.params, layer_name(0, "h"));
    Tensor<T>& w_out = P(m.params, layer_name(0, "w_out"));
    w_in = eye<T>(n + d);
    const std::size_t shift = (j + n - i) % n;
    for (std::size_t c = 0; c < d; ++c) {
        w_gate.at(j, n + c) = 1;
        h.at(shift, n + c) += 1;
        h.at(0, n + c) -= 1;
    }
    for (std::size_t c = a; c < b; ++c) w_out.at(n + c, n + c) = 1;
    for (std::size_t c = 0; c < d; ++c) P(m.params, "readout.w").at(n + c, c) = 1;

    m.readout = ReadoutMask{0, n, 0, d};
    m.layout_json = block_table({{"one_hot", {0, n}}, {"data", {n, n + d}}});
    return m;
}

template <typename T>
BuiltModel<T> build_linear(const Tensor<T>& h_matrix, std::size_t n) {
    if (h_matrix.dims.size() != 2) throw DimensionError("linear: H must be a matrix");
    for (T v : h_matrix.data)
        if (!std::isfinite(static_cast<double>(v))) throw ConfigError("linear: H must be finite");
    const std::size_t d = h_matrix.rows();
    const std::size_t d_out = h_matrix.cols();
    const std::size_t emb = std::max(d, d_out);

    BuiltModel<T> m;
    m.kind = ConstructionKind::Linear;
    m.n = n;
    m.d = d;
    m.spec.arch = Arch::BaseConv;
    m.spec.layers = 1;
    m.spec.emb = static_cast<int>(emb);
    m.spec.causal = false;
    m.spec.seq_len = static_cast<int>(n);
    m.spec.in_dim = static_cast<int>(d);
    m.spec.out_dim = static_cast<int>(d_out);
    m.spec.residual = false;
    m.spec.validate();

    m.params = zero_params<T>(m.spec);
    Tensor<T>& embed = P(m.params, "embed.w");
    for (std::size_t c = 0; c < d; ++c) embed.at(c, c) = 1;

    // Gate carries u, conv path is the constant 1, output mixes with H.
    P(m.params, layer_name(0, "w_gate")) = eye<T>(emb);
    Tensor<T>& b_conv = P(m.params, layer_name(0, "b_conv"));
    Tensor<T>& h = P(m.params, layer_name(0, "h"));
    Tensor<T>& w_out = P(m.params, layer_name(0, "w_out"));
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t c = 0; c < emb; ++c) b_conv.at(p, c) = 1;
    for (std::size_t c = 0; c < emb; ++c) h.at(0, c) = 1;
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d_out; ++c) w_out.at(r, c) = h_matrix.at(r, c);
    for (std::size_t c = 0; c < d_out; ++c) P(m.params, "readout.w").at(c, c) = 1;

    m.readout = ReadoutMask{0, n, 0, d_out};
    m.layout_json = block_table({{"data", {0, d}}, {"out", {0, d_out}}});
    return m;
}

template <typename T>
BuiltModel<T> build_multiply(std::size_t a, std::size_t b, std::size_t d_out,
                             std::size_t n, std::size_t d) {
    if (d_out == 0) throw ConfigError("multiply: d_out must be >= 1");
    if (a + d_out > d || b + d_out > d)
        throw ConfigError("multiply: ranges [a, a+d_out) and [b, b+d_out) must fit in d");

    BuiltModel<T> m;
    m.kind = ConstructionKind::Multiply;
    m.n = n;
    m.d = d;
    m.spec.arch = Arch::BaseConv;
    m.spec.layers = 1;
    m.spec.emb = static_cast<int>(d);
    m.spec.causal = false;
    m.spec.seq_len = static_cast<int>(n);
    m.spec.in_dim = static_cast<int>(d);
    m.spec.out_dim = static_cast<int>(d_out);
    m.spec.residual = false;
    m.spec.validate();

    m.params = zero_params<T>(m.spec);
    P(m.params, "embed.w") = eye<T>(d);

    Tensor<T>& w_gate = P(m.params, layer_name(0, "w_gate"));
    Tensor<T>& w_in = P(m.params, layer_name(0, "w_in"));
    Tensor<T>& h = P(m.params, layer_name(0, "h"));
    for (std::size_t c = 0; c < d_out; ++c) {
        w_in.at(a + c, c) = 1;
        w_gate.at(b + c, c) = 1;
    }
    for (std::size_t c = 0; c < d; ++c) h.at(0, c) = 1;
    P(m.params, layer_name(0, "w_out")) = eye<T>(d);
    for (std::size_t c = 0; c < d_out; ++c) P(m.params, "readout.w").at(c, c) = 1;

    m.readout = ReadoutMask{0, n, 0, d_out};
    m.layout_json = block_table({{"data", {0, d}}, {"out", {0, d_out}}});
    return m;
}

// Channel blocks for the non-causal GD layout.
namespace nc {
inline std::size_t A(std::size_t, std::size_t c) { return c; }
inline std::size_t B(std::size_t d) { return d; }
inline std::size_t X(std::size_t d, std::size_t c) { return d + 1 + c; }
inline std::size_t S1(std::size_t d, std::size_t c) { return 2 * d + 1 + c; }
inline std::size_t S2(std::size_t d, std::size_t c) { return 3 * d + 1 + c; }
}  // namespace nc

template <typename T>
BuiltModel<T> build_gd_noncausal(double eta, std::size_t k, std::size_t n, std::size_t d,
                                 GdOptions opt) {
    if (eta < 0) throw ConfigError("gd: eta must be >= 0");
    if (k < 1) throw ConfigError("gd: k must be >= 1");
    const std::size_t emb = gd_noncausal_width(d);

    BuiltModel<T> m;
    m.kind = ConstructionKind::GdNoncausal;
    m.n = n;
    m.d = d;
    m.k = k;
    m.eta = eta;
    m.spec.arch = Arch::BaseConv;
    m.spec.layers = static_cast<int>(3 * k);
    m.spec.emb = static_cast<int>(emb);
    m.spec.causal = false;
    m.spec.seq_len = static_cast<int>(n);
    m.spec.in_dim = static_cast<int>(emb);
    m.spec.out_dim = static_cast<int>(d);
    m.spec.residual = false;
    m.spec.validate();

    m.params = zero_params<T>(m.spec);
    P(m.params, "embed.w") = eye<T>(emb);
    for (std::size_t c = 0; c < d; ++c) P(m.params, "readout.w").at(nc::X(d, c), c) = 1;

    const T step = static_cast<T>(opt.normalized ? eta / static_cast<double>(n) : eta);
    const T grad_scale = static_cast<T>(opt.normalized ? 1.0 / static_cast<double>(n) : 1.0);

    for (std::size_t t = 0; t < k; ++t) {
        const int l1 = static_cast<int>(3 * t);
        const int l2 = l1 + 1;
        const int l3 = l1 + 2;

        // Layer 1: residual per-position scalar r_i = <x, a_i> - b_i lands in
        // every S2 channel; a, b, x pass through, S1 is consumed.
        {
            Tensor<T>& w_in = P(m.params, layer_name(l1, "w_in"));
            Tensor<T>& w_gate = P(m.params, layer_name(l1, "w_gate"));
            Tensor<T>& b_gate = P(m.params, layer_name(l1, "b_gate"));
            Tensor<T>& h = P(m.params, layer_name(l1, "h"));
            Tensor<T>& w_out = P(m.params, layer_name(l1, "w_out"));
            for (std::size_t c = 0; c < emb; ++c) h.at(0, c) = 1;
            for (std::size_t c = 0; c < d; ++c) {
                w_in.at(nc::A(d, c), nc::A(d, c)) = 1;
                w_in.at(nc::X(d, c), nc::X(d, c)) = 1;
                w_in.at(nc::A(d, c), nc::S1(d, c)) = 1;
                w_gate.at(nc::X(d, c), nc::S1(d, c)) = 1;
                w_out.at(nc::A(d, c), nc::A(d, c)) = 1;
                w_out.at(nc::X(d, c), nc::X(d, c)) = 1;
            }
            w_in.at(nc::B(d), nc::B(d)) = 1;
            w_out.at(nc::B(d), nc::B(d)) = 1;
            for (std::size_t p = 0; p < n; ++p) {
                for (std::size_t c = 0; c < d; ++c) {
                    b_gate.at(p, nc::A(d, c)) = 1;
                    b_gate.at(p, nc::X(d, c)) = 1;
                }
                b_gate.at(p, nc::B(d)) = 1;
            }
            for (std::size_t c = 0; c < d; ++c) {
                for (std::size_t s = 0; s < d; ++s) w_out.at(nc::S1(d, s), nc::S2(d, c)) = 1;
                w_out.at(nc::B(d), nc::S2(d, c)) = -1;
            }
        }

        // Layer 2: S2 channel c becomes r_i * a_i[c]; everything else is kept.
        {
            Tensor<T>& w_in = P(m.params, layer_name(l2, "w_in"));
            Tensor<T>& w_gate = P(m.params, layer_name(l2, "w_gate"));
            Tensor<T>& b_gate = P(m.params, layer_name(l2, "b_gate"));
            Tensor<T>& h = P(m.params, layer_name(l2, "h"));
            w_in = eye<T>(emb);
            for (std::size_t c = 0; c < emb; ++c) h.at(0, c) = 1;
            for (std::size_t c = 0; c < d; ++c) w_gate.at(nc::A(d, c), nc::S2(d, c)) = 1;
            for (std::size_t p = 0; p < n; ++p)
                for (std::size_t c = 0; c < emb; ++c)
                    if (c < nc::S2(d, 0)) b_gate.at(p, c) = 1;
            P(m.params, layer_name(l2, "w_out")) = eye<T>(emb);
        }

        // Layer 3: an all-ones circular filter broadcasts the position sum of
        // S2 (the full gradient) everywhere, then the output matrix applies
        // the step x <- x - eta * grad and clears the scratch blocks.
        {
            Tensor<T>& b_gate = P(m.params, layer_name(l3, "b_gate"));
            Tensor<T>& w_in = P(m.params, layer_name(l3, "w_in"));
            Tensor<T>& h = P(m.params, layer_name(l3, "h"));
            Tensor<T>& w_out = P(m.params, layer_name(l3, "w_out"));
            w_in = eye<T>(emb);
            for (std::size_t p = 0; p < n; ++p)
                for (std::size_t c = 0; c < emb; ++c) b_gate.at(p, c) = 1;
            for (std::size_t c = 0; c < emb; ++c) {
                const bool sum_block = c >= nc::S2(d, 0);
                if (sum_block)
                    for (std::size_t p = 0; p < n; ++p) h.at(p, c) = 1;
                else
                    h.at(0, c) = 1;
            }
            for (std::size_t c = 0; c < d; ++c) {
                w_out.at(nc::A(d, c), nc::A(d, c)) = 1;
                if (t + 1 == k && opt.emit_gradient) {
                    w_out.at(nc::S2(d, c), nc::X(d, c)) = grad_scale;
                } else {
                    w_out.at(nc::X(d, c), nc::X(d, c)) = 1;
                    w_out.at(nc::S2(d, c), nc::X(d, c)) = -step;
                }
            }
            w_out.at(nc::B(d), nc::B(d)) = 1;
        }
    }

    m.readout = ReadoutMask{n - 1, n, 0, d};
    m.layout_json = block_table({{"a", {0, d}},
                                 {"b", {d, d + 1}},
                                 {"x", {d + 1, 2 * d + 1}},
                                 {"s1", {2 * d + 1, 3 * d + 1}},
                                 {"s2", {3 * d + 1, 4 * d + 1}}});
    return m;
}

// Channel blocks for the causal GD layout.
namespace cz {
inline std::size_t A(std::size_t, std::size_t c) { return c; }
inline std::size_t B(std::size_t d) { return d; }
inline std::size_t X(std::size_t d, std::size_t c) { return d + 1 + c; }
inline std::size_t ONES(std::size_t d, std::size_t c) { return 2 * d + 1 + c; }
inline std::size_t BA(std::size_t d, std::size_t c) { return 3 * d + 1 + c; }
inline std::size_t GRAM(std::size_t d, std::size_t r, std::size_t c) {
    return 4 * d + 1 + r * d + c;
}
inline std::size_t SBA(std::size_t d, std::size_t c) { return 4 * d + 1 + d * d + c; }
inline std::size_t SGRAM(std::size_t d, std::size_t r, std::size_t c) {
    return 5 * d + 1 + d * d + r * d + c;
}
}  // namespace cz

template <typename T>
BuiltModel<T> build_gd_causal(double eta, std::size_t k, std::size_t n, std::size_t d,
                              GdOptions opt) {
    if (eta < 0) throw ConfigError("gd: eta must be >= 0");
    if (k < 1) throw ConfigError("gd: k must be >= 1");
    const std::size_t emb = gd_causal_width(d);
    const std::size_t rows = n + 1;  // data positions plus the x0 row

    BuiltModel<T> m;
    m.kind = ConstructionKind::GdCausal;
    m.n = n;
    m.d = d;
    m.k = k;
    m.eta = eta;
    m.spec.arch = Arch::BaseConv;
    m.spec.layers = static_cast<int>(2 + k);
    m.spec.emb = static_cast<int>(emb);
    m.spec.causal = true;
    m.spec.seq_len = static_cast<int>(rows);
    m.spec.in_dim = static_cast<int>(emb);
    m.spec.out_dim = static_cast<int>(d);
    m.spec.residual = false;
    m.spec.validate();

    m.params = zero_params<T>(m.spec);
    P(m.params, "embed.w") = eye<T>(emb);
    for (std::size_t c = 0; c < d; ++c) P(m.params, "readout.w").at(cz::X(d, c), c) = 1;

    const T step = static_cast<T>(opt.normalized ? eta / static_cast<double>(n) : eta);
    const T grad_scale = static_cast<T>(opt.normalized ? 1.0 / static_cast<double>(n) : 1.0);
    const std::size_t keep_end = cz::BA(d, 0);  // a, b, x, ones pass through untouched

    // Layer 0: per-position products b_i * a_i -> BA and a_i a_i^T -> GRAM.
    {
        Tensor<T>& w_in = P(m.params, layer_name(0, "w_in"));
        Tensor<T>& w_gate = P(m.params, layer_name(0, "w_gate"));
        Tensor<T>& b_gate = P(m.params, layer_name(0, "b_gate"));
        Tensor<T>& h = P(m.params, layer_name(0, "h"));
        Tensor<T>& w_out = P(m.params, layer_name(0, "w_out"));
        for (std::size_t c = 0; c < emb; ++c) h.at(0, c) = 1;
        for (std::size_t c = 0; c < keep_end; ++c) {
            w_in.at(c, c) = 1;
            w_out.at(c, c) = 1;
            for (std::size_t p = 0; p < rows; ++p) b_gate.at(p, c) = 1;
        }
        for (std::size_t c = 0; c < d; ++c) {
            w_in.at(cz::A(d, c), cz::BA(d, c)) = 1;
            w_gate.at(cz::B(d), cz::BA(d, c)) = 1;
            w_out.at(cz::BA(d, c), cz::BA(d, c)) = 1;
        }
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                w_in.at(cz::A(d, c), cz::GRAM(d, r, c)) = 1;
                w_gate.at(cz::A(d, r), cz::GRAM(d, r, c)) = 1;
                w_out.at(cz::GRAM(d, r, c), cz::GRAM(d, r, c)) = 1;
            }
    }

    // Layer 1: causal all-ones filters turn BA and GRAM into prefix sums, so
    // the final row holds sum(b_i a_i) and the flattened Gram matrix.
    {
        Tensor<T>& w_in = P(m.params, layer_name(1, "w_in"));
        Tensor<T>& b_gate = P(m.params, layer_name(1, "b_gate"));
        Tensor<T>& h = P(m.params, layer_name(1, "h"));
        w_in = eye<T>(emb);
        for (std::size_t p = 0; p < rows; ++p)
            for (std::size_t c = 0; c < emb; ++c) b_gate.at(p, c) = 1;
        for (std::size_t c = 0; c < emb; ++c) {
            const bool prefix = c >= cz::BA(d, 0) && c < cz::SBA(d, 0);
            if (prefix)
                for (std::size_t p = 0; p < rows; ++p) h.at(p, c) = 1;
            else
                h.at(0, c) = 1;
        }
        P(m.params, layer_name(1, "w_out")) = eye<T>(emb);
    }

    // Update layers: gate the copied sums by the ones block / current x and
    // fold them into x.  Only the final row has ones and x set, so earlier
    // rows stay fixed and information never flows backward.
    for (std::size_t t = 0; t < k; ++t) {
        const int l = static_cast<int>(2 + t);
        Tensor<T>& w_in = P(m.params, layer_name(l, "w_in"));
        Tensor<T>& w_gate = P(m.params, layer_name(l, "w_gate"));
        Tensor<T>& b_gate = P(m.params, layer_name(l, "b_gate"));
        Tensor<T>& h = P(m.params, layer_name(l, "h"));
        Tensor<T>& w_out = P(m.params, layer_name(l, "w_out"));
        for (std::size_t c = 0; c < emb; ++c) h.at(0, c) = 1;
        for (std::size_t c = 0; c < cz::SBA(d, 0); ++c) {
            w_in.at(c, c) = 1;
            w_out.at(c, c) = 1;
            for (std::size_t p = 0; p < rows; ++p) b_gate.at(p, c) = 1;
        }
        const bool emit = t + 1 == k && opt.emit_gradient;
        for (std::size_t c = 0; c < d; ++c) {
            w_in.at(cz::BA(d, c), cz::SBA(d, c)) = 1;
            w_gate.at(cz::ONES(d, c), cz::SBA(d, c)) = 1;
            w_out.at(cz::SBA(d, c), cz::X(d, c)) = emit ? -grad_scale : step;
        }
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                w_in.at(cz::GRAM(d, r, c), cz::SGRAM(d, r, c)) = 1;
                w_gate.at(cz::X(d, c), cz::SGRAM(d, r, c)) = 1;
                w_out.at(cz::SGRAM(d, r, c), cz::X(d, r)) = emit ? grad_scale : -step;
            }
        if (emit)
            for (std::size_t c = 0; c < d; ++c) w_out.at(cz::X(d, c), cz::X(d, c)) = 0;
    }

    m.readout = ReadoutMask{n, n + 1, 0, d};
    m.layout_json = block_table({{"a", {0, d}},
                                 {"b", {d, d + 1}},
                                 {"x", {d + 1, 2 * d + 1}},
                                 {"ones", {2 * d + 1, 3 * d + 1}},
                                 {"ba", {3 * d + 1, 4 * d + 1}},
                                 {"gram", {4 * d + 1, 4 * d + 1 + d * d}},
                                 {"s_ba", {4 * d + 1 + d * d, 5 * d + 1 + d * d}},
                                 {"s_gram", {5 * d + 1 + d * d, 5 * d + 1 + 2 * d * d}}});
    return m;
}

namespace {

template <typename T>
BuiltModel<T> build_any(const ConstructionSpec& cs) {
    switch (cs.kind) {
        case ConstructionKind::Read:
            check_emb_override(cs.emb, cs.n + cs.d, "read");
            return build_read<T>(cs.i, cs.j, cs.a, cs.b, cs.n, cs.d);
        case ConstructionKind::Linear: {
            const std::size_t d = cs.h_matrix.dims.size() == 2 ? cs.h_matrix.rows() : 0;
            const std::size_t d_out = cs.h_matrix.dims.size() == 2 ? cs.h_matrix.cols() : 0;
            check_emb_override(cs.emb, std::max(d, d_out), "linear");
            return build_linear<T>(cast_tensor<T>(cs.h_matrix), cs.n);
        }
        case ConstructionKind::Multiply:
            check_emb_override(cs.emb, cs.d, "multiply");
            return build_multiply<T>(cs.a, cs.b, cs.d_out, cs.n, cs.d);
        case ConstructionKind::GdNoncausal:
            check_emb_override(cs.emb, gd_noncausal_width(cs.d), "gd_noncausal");
            return build_gd_noncausal<T>(cs.eta, cs.k, cs.n, cs.d, cs.gd);
        case ConstructionKind::GdCausal:
            check_emb_override(cs.emb, gd_causal_width(cs.d), "gd_causal");
            return build_gd_causal<T>(cs.eta, cs.k, cs.n, cs.d, cs.gd);
    }
    throw ConfigError("unknown construction kind");
}

}  // namespace

BuiltModel<float> build_construction_single(const ConstructionSpec& cs) {
    return build_any<float>(cs);
}
BuiltModel<double> build_construction_double(const ConstructionSpec& cs) {
    return build_any<double>(cs);
}

template <typename T>
Tensor<T> embed_gd_noncausal(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0) {
    const std::size_t n = a.rows();
    const std::size_t d = a.cols();
    if (b.data.size() != n) throw DimensionError("embed: b must have one entry per row of A");
    if (x0.data.size() != d) throw DimensionError("embed: x0 must have one entry per column of A");
    Tensor<T> u = Tensor<T>::zeros({n, gd_noncausal_width(d)});
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < d; ++c) {
            u.at(p, nc::A(d, c)) = a.at(p, c);
            u.at(p, nc::X(d, c)) = x0.data[c];
        }
        u.at(p, nc::B(d)) = b.data[p];
    }
    return u;
}

template <typename T>
Tensor<T> embed_gd_causal(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0) {
    const std::size_t n = a.rows();
    const std::size_t d = a.cols();
    if (b.data.size() != n) throw DimensionError("embed: b must have one entry per row of A");
    if (x0.data.size() != d) throw DimensionError("embed: x0 must have one entry per column of A");
    Tensor<T> u = Tensor<T>::zeros({n + 1, gd_causal_width(d)});
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < d; ++c) u.at(p, cz::A(d, c)) = a.at(p, c);
        u.at(p, cz::B(d)) = b.data[p];
    }
    for (std::size_t c = 0; c < d; ++c) {
        u.at(n, cz::X(d, c)) = x0.data[c];
        u.at(n, cz::ONES(d, c)) = 1;
    }
    return u;
}

template <typename T>
GdPromptParts<T> extract_gd_noncausal(const Tensor<T>& input, std::size_t d) {
    const std::size_t n = input.rows();
    if (input.cols() != gd_noncausal_width(d))
        throw DimensionError("extract: input width does not match layout");
    GdPromptParts<T> parts{Tensor<T>::zeros({n, d}), Tensor<T>::zeros({n}), Tensor<T>::zeros({d})};
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < d; ++c) parts.a.at(p, c) = input.at(p, nc::A(d, c));
        parts.b.data[p] = input.at(p, nc::B(d));
    }
    for (std::size_t c = 0; c < d; ++c) parts.x0.data[c] = input.at(0, nc::X(d, c));
    return parts;
}

template <typename T>
GdPromptParts<T> extract_gd_causal(const Tensor<T>& input, std::size_t d) {
    if (input.rows() < 2 || input.cols() != gd_causal_width(d))
        throw DimensionError("extract: input shape does not match layout");
    const std::size_t n = input.rows() - 1;
    GdPromptParts<T> parts{Tensor<T>::zeros({n, d}), Tensor<T>::zeros({n}), Tensor<T>::zeros({d})};
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < d; ++c) parts.a.at(p, c) = input.at(p, cz::A(d, c));
        parts.b.data[p] = input.at(p, cz::B(d));
    }
    for (std::size_t c = 0; c < d; ++c) parts.x0.data[c] = input.at(n, cz::X(d, c));
    return parts;
}

template <typename T>
Tensor<T> primitive_read(const Tensor<T>& u, std::size_t i, std::size_t j, std::size_t a,
                         std::size_t b) {
    Tensor<T> out = u;
    for (std::size_t c = a; c < b; ++c) out.at(j, c) = u.at(i, c);
    return out;
}

template <typename T>
Tensor<T> primitive_linear(const Tensor<T>& u, const Tensor<T>& h_matrix) {
    return matmul(u, h_matrix);
}

template <typename T>
Tensor<T> primitive_multiply(const Tensor<T>& u, std::size_t a, std::size_t b,
                             std::size_t d_out) {
    Tensor<T> out = Tensor<T>::zeros({u.rows(), d_out});
    for (std::size_t p = 0; p < u.rows(); ++p)
        for (std::size_t c = 0; c < d_out; ++c) out.at(p, c) = u.at(p, a + c) * u.at(p, b + c);
    return out;
}

template <typename T>
std::vector<Tensor<T>> gd_construction_iterates(const BuiltModel<T>& model,
                                                const Tensor<T>& input) {
    if (model.kind != ConstructionKind::GdNoncausal && model.kind != ConstructionKind::GdCausal)
        throw ConfigError("iterates: model is not a GD construction");
    const std::vector<Tensor<T>> layers = model_eval_layers(model.spec, model.params, input);
    const std::size_t d = model.d;
    const bool causal = model.kind == ConstructionKind::GdCausal;
    const std::size_t row = causal ? model.n : model.n - 1;
    const std::size_t stride = causal ? 1 : 3;
    const std::size_t first = causal ? 2 : 2;  // index of the layer ending iterate 1
    std::vector<Tensor<T>> out;
    for (std::size_t t = 0; t < model.k; ++t) {
        const Tensor<T>& y = layers.at(first + t * stride);
        Tensor<T> x = Tensor<T>::zeros({d});
        const std::size_t x0col = causal ? cz::X(d, 0) : nc::X(d, 0);
        for (std::size_t c = 0; c < d; ++c) x.data[c] = y.at(row, x0col + c);
        out.push_back(std::move(x));
    }
    return out;
}

template <typename T>
VerifyReport verify_construction(const BuiltModel<T>& model,
                                 const std::function<Tensor<T>(const Tensor<T>&)>& oracle_fn,
                                 const std::function<Tensor<T>(SeededRng&)>& sampler,
                                 std::size_t n_samples, SeededRng& rng) {
    VerifyReport report;
    double sse = 0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        const Tensor<T> input = sampler(rng);
        const Tensor<T> pred = apply_readout(model_eval(model.spec, model.params, input),
                                             model.readout);
        const Tensor<T> want = oracle_fn(input);
        if (!pred.same_shape(want))
            throw DimensionError("verify: oracle and model readout shapes differ");
        for (std::size_t idx = 0; idx < pred.data.size(); ++idx) {
            const double e = static_cast<double>(pred.data[idx]) -
                             static_cast<double>(want.data[idx]);
            sse += e * e;
            report.max_abs_err = std::max(report.max_abs_err, std::abs(e));
        }
        count += pred.data.size();
    }
    report.mse = count ? sse / static_cast<double>(count) : 0;
    return report;
}

#define PLS_INSTANTIATE_CONSTRUCTIONS(T)                                                        \
    template BuiltModel<T> build_read<T>(std::size_t, std::size_t, std::size_t, std::size_t,    \
                                         std::size_t, std::size_t);                             \
    template BuiltModel<T> build_linear<T>(const Tensor<T>&, std::size_t);                      \
    template BuiltModel<T> build_multiply<T>(std::size_t, std::size_t, std::size_t,             \
                                             std::size_t, std::size_t);                         \
    template BuiltModel<T> build_gd_noncausal<T>(double, std::size_t, std::size_t, std::size_t, \
                                                 GdOptions);                                    \
    template BuiltModel<T> build_gd_causal<T>(double, std::size_t, std::size_t, std::size_t,    \
                                              GdOptions);                                       \
    template Tensor<T> embed_gd_noncausal<T>(const Tensor<T>&, const Tensor<T>&,                \
                                             const Tensor<T>&);                                 \
    template Tensor<T> embed_gd_causal<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);\
    template GdPromptParts<T> extract_gd_noncausal<T>(const Tensor<T>&, std::size_t);           \
    template GdPromptParts<T> extract_gd_causal<T>(const Tensor<T>&, std::size_t);              \
    template Tensor<T> primitive_read<T>(const Tensor<T>&, std::size_t, std::size_t,            \
                                         std::size_t, std::size_t);                             \
    template Tensor<T> primitive_linear<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> primitive_multiply<T>(const Tensor<T>&, std::size_t, std::size_t,        \
                                             std::size_t);                                      \
    template std::vector<Tensor<T>> gd_construction_iterates<T>(const BuiltModel<T>&,           \
                                                                const Tensor<T>&);              \
    template VerifyReport verify_construction<T>(                                               \
        const BuiltModel<T>&, const std::function<Tensor<T>(const Tensor<T>&)>&,                \
        const std::function<Tensor<T>(SeededRng&)>&, std::size_t, SeededRng&);

PLS_INSTANTIATE_CONSTRUCTIONS(float)
PLS_INSTANTIATE_CONSTRUCTIONS(double)

}  // namespace pls
