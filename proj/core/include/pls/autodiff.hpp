#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pls/tensor.hpp"

namespace pls {

template <typename T>
using GradStore = ParamStore<T>;

enum class Op : std::uint8_t {
    Leaf,
    Matmul,
    CausalConvCols,
    CircularConvCols,
    Hadamard,
    Add,
    Scale,
    Slice,
    Concat,
    Relu,
    SoftmaxRows,
    LayerNormRows,
    MseLoss,
    Transpose,
};

// Eager tape: every recorded op computes its value immediately; backward
// walks the tape once in reverse with fixed-order adjoint accumulation.
template <typename T>
class Tape {
public:
    struct Node {
        Op op = Op::Leaf;
        int a = -1;
        int b = -1;
        Tensor<T> value;
        // op-specific attributes
        double scal = 0.0;
        std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
        int axis = 0;
        double eps = 0.0;
        std::string name;
        bool trainable = false;
    };

    int leaf(Tensor<T> v, std::string name = {}, bool trainable = false);
    int matmul(int a, int b);
    int hadamard(int a, int b);
    int add(int a, int b);
    int scale(int a, double c);
    int slice(int a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
    int concat(int a, int b, int axis);
    int relu(int a);
    int softmax_rows(int a);
    int layer_norm_rows(int a, double eps = 1e-5);
    int causal_conv_cols(int h, int u);
    int circular_conv_cols(int h, int u);
    int transpose(int a);
    // Mean over all elements of (pred - target)^2; value is a length-1 tensor.
    int mse_loss(int pred, int target);

    const Tensor<T>& value(int id) const { return nodes_[check(id)].value; }
    const Node& node(int id) const { return nodes_[check(id)]; }
    std::size_t size() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

    // Gradients of the scalar at loss_id with respect to every trainable
    // leaf, in leaf creation order.  Unused leaves get zero gradients.
    GradStore<T> backward(int loss_id) const;

private:
    int push(Node n);
    std::size_t check(int id) const;

    std::vector<Node> nodes_;
};

// Central finite differences of f over every parameter coordinate.
template <typename T>
GradStore<T> finite_diff_grad(const std::function<double(const ParamStore<T>&)>& f,
                              const ParamStore<T>& params, double eps);

// Records the forward built by `build` (which must create leaves for every
// entry of `params`, in order, and return the loss node), then compares
// reverse-mode gradients against central differences.  Returns the max over
// parameter coordinates of |ad - fd| / max(|ad|, |fd|, 1e-12).
template <typename T>
double grad_check(const std::function<int(Tape<T>&, const ParamStore<T>&)>& build,
                  const ParamStore<T>& params, double eps);

}  // namespace pls
