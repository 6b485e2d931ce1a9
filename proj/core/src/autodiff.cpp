#include "pls/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "pls/errors.hpp"
#include "pls/linalg.hpp"

namespace pls {

template <typename T>
std::size_t Tape<T>::check(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw DimensionError("tape: node id out of range");
    return static_cast<std::size_t>(id);
}

template <typename T>
int Tape<T>::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
}

template <typename T>
int Tape<T>::leaf(Tensor<T> v, std::string name, bool trainable) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.name = std::move(name);
    n.trainable = trainable;
    return push(std::move(n));
}

template <typename T>
int Tape<T>::matmul(int a, int b) {
    Node n;
    n.op = Op::Matmul;
    n.a = a;
    n.b = b;
    n.value = pls::matmul(value(a), value(b));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::hadamard(int a, int b) {
    Node n;
    n.op = Op::Hadamard;
    n.a = a;
    n.b = b;
    n.value = pls::hadamard(value(a), value(b));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::add(int a, int b) {
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.value = pls::add(value(a), value(b));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::scale(int a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.scal = c;
    n.value = pls::scale(value(a), c);
    return push(std::move(n));
}

template <typename T>
int Tape<T>::slice(int a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2)
        throw DimensionError("slice: rank-2 tensor required");
    if (r1 > x.dims[0] || c1 > x.dims[1] || r0 >= r1 || c0 >= c1)
        throw DimensionError("slice: invalid range");
    Node n;
    n.op = Op::Slice;
    n.a = a;
    n.r0 = r0;
    n.r1 = r1;
    n.c0 = c0;
    n.c1 = c1;
    n.value = Tensor<T>({r1 - r0, c1 - c0});
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = c0; j < c1; ++j) n.value.at(i - r0, j - c0) = x.at(i, j);
    return push(std::move(n));
}

template <typename T>
int Tape<T>::concat(int a, int b, int axis) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    if (x.rank() != 2 || y.rank() != 2)
        throw DimensionError("concat: rank-2 tensors required");
    if (axis != 0 && axis != 1)
        throw DimensionError("concat: axis must be 0 or 1");
    Node n;
    n.op = Op::Concat;
    n.a = a;
    n.b = b;
    n.axis = axis;
    if (axis == 0) {
        if (x.dims[1] != y.dims[1])
            throw DimensionError("concat: column counts differ");
        n.value = Tensor<T>({x.dims[0] + y.dims[0], x.dims[1]});
        for (std::size_t i = 0; i < x.dims[0]; ++i)
            for (std::size_t j = 0; j < x.dims[1]; ++j) n.value.at(i, j) = x.at(i, j);
        for (std::size_t i = 0; i < y.dims[0]; ++i)
            for (std::size_t j = 0; j < y.dims[1]; ++j) n.value.at(x.dims[0] + i, j) = y.at(i, j);
    } else {
        if (x.dims[0] != y.dims[0])
            throw DimensionError("concat: row counts differ");
        n.value = Tensor<T>({x.dims[0], x.dims[1] + y.dims[1]});
        for (std::size_t i = 0; i < x.dims[0]; ++i) {
            for (std::size_t j = 0; j < x.dims[1]; ++j) n.value.at(i, j) = x.at(i, j);
            for (std::size_t j = 0; j < y.dims[1]; ++j) n.value.at(i, x.dims[1] + j) = y.at(i, j);
        }
    }
    return push(std::move(n));
}

template <typename T>
int Tape<T>::relu(int a) {
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.value = value(a);
    for (T& x : n.value.data)
        if (x < T(0)) x = T(0);
    return push(std::move(n));
}

template <typename T>
int Tape<T>::softmax_rows(int a) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2)
        throw DimensionError("softmax_rows: rank-2 tensor required");
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a;
    n.value = Tensor<T>(x.dims);
    const std::size_t rows = x.dims[0], cols = x.dims[1];
    for (std::size_t i = 0; i < rows; ++i) {
        T m = x.at(i, 0);
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x.at(i, j));
        T sum = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            const T e = std::exp(x.at(i, j) - m);
            n.value.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < cols; ++j) n.value.at(i, j) /= sum;
    }
    return push(std::move(n));
}

template <typename T>
int Tape<T>::layer_norm_rows(int a, double eps) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2)
        throw DimensionError("layer_norm_rows: rank-2 tensor required");
    Node n;
    n.op = Op::LayerNormRows;
    n.a = a;
    n.eps = eps;
    n.value = Tensor<T>(x.dims);
    const std::size_t rows = x.dims[0], cols = x.dims[1];
    for (std::size_t i = 0; i < rows; ++i) {
        T mean = T(0);
        for (std::size_t j = 0; j < cols; ++j) mean += x.at(i, j);
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            const T d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (std::size_t j = 0; j < cols; ++j) n.value.at(i, j) = (x.at(i, j) - mean) * inv;
    }
    return push(std::move(n));
}

template <typename T>
int Tape<T>::causal_conv_cols(int h, int u) {
    Node n;
    n.op = Op::CausalConvCols;
    n.a = h;
    n.b = u;
    n.value = pls::causal_conv_cols(value(h), value(u));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::circular_conv_cols(int h, int u) {
    Node n;
    n.op = Op::CircularConvCols;
    n.a = h;
    n.b = u;
    n.value = pls::circular_conv_cols(value(h), value(u));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::transpose(int a) {
    Node n;
    n.op = Op::Transpose;
    n.a = a;
    n.value = pls::transpose(value(a));
    return push(std::move(n));
}

template <typename T>
int Tape<T>::mse_loss(int pred, int target) {
    const Tensor<T>& p = value(pred);
    const Tensor<T>& t = value(target);
    if (!p.same_shape(t))
        throw DimensionError("mse_loss: shape mismatch");
    Node n;
    n.op = Op::MseLoss;
    n.a = pred;
    n.b = target;
    T acc = T(0);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        const T d = p.data[i] - t.data[i];
        acc += d * d;
    }
    n.value = Tensor<T>({1});
    n.value.data[0] = acc / static_cast<T>(p.data.size());
    return push(std::move(n));
}

namespace {

template <typename T>
void accumulate(Tensor<T>& slot, const Tensor<T>& contrib) {
    if (slot.data.empty()) {
        slot = contrib;
        return;
    }
    for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += contrib.data[i];
}

}  // namespace

template <typename T>
GradStore<T> Tape<T>::backward(int loss_id) const {
    const std::size_t loss = check(loss_id);
    if (nodes_[loss].value.numel() != 1)
        throw DimensionError("backward: loss must be scalar");

    std::vector<Tensor<T>> adj(nodes_.size());
    adj[loss] = Tensor<T>(nodes_[loss].value.dims);
    adj[loss].data[0] = T(1);

    for (std::size_t idx = loss + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (adj[idx].data.empty() || n.op == Op::Leaf)
            continue;
        const Tensor<T>& g = adj[idx];
        switch (n.op) {
            case Op::Matmul: {
                const Tensor<T>& a = nodes_[n.a].value;
                const Tensor<T>& b = nodes_[n.b].value;
                accumulate(adj[n.a], pls::matmul(g, pls::transpose(b)));
                accumulate(adj[n.b], pls::matmul(pls::transpose(a), g));
                break;
            }
            case Op::Hadamard: {
                accumulate(adj[n.a], pls::hadamard(g, nodes_[n.b].value));
                accumulate(adj[n.b], pls::hadamard(g, nodes_[n.a].value));
                break;
            }
            case Op::Add: {
                accumulate(adj[n.a], g);
                accumulate(adj[n.b], g);
                break;
            }
            case Op::Scale: {
                accumulate(adj[n.a], pls::scale(g, n.scal));
                break;
            }
            case Op::Slice: {
                Tensor<T> ga(nodes_[n.a].value.dims);
                for (std::size_t i = n.r0; i < n.r1; ++i)
                    for (std::size_t j = n.c0; j < n.c1; ++j)
                        ga.at(i, j) = g.at(i - n.r0, j - n.c0);
                accumulate(adj[n.a], ga);
                break;
            }
            case Op::Concat: {
                const Tensor<T>& a = nodes_[n.a].value;
                const Tensor<T>& b = nodes_[n.b].value;
                Tensor<T> ga(a.dims), gb(b.dims);
                if (n.axis == 0) {
                    for (std::size_t i = 0; i < a.dims[0]; ++i)
                        for (std::size_t j = 0; j < a.dims[1]; ++j) ga.at(i, j) = g.at(i, j);
                    for (std::size_t i = 0; i < b.dims[0]; ++i)
                        for (std::size_t j = 0; j < b.dims[1]; ++j) gb.at(i, j) = g.at(a.dims[0] + i, j);
                } else {
                    for (std::size_t i = 0; i < a.dims[0]; ++i) {
                        for (std::size_t j = 0; j < a.dims[1]; ++j) ga.at(i, j) = g.at(i, j);
                        for (std::size_t j = 0; j < b.dims[1]; ++j) gb.at(i, j) = g.at(i, a.dims[1] + j);
                    }
                }
                accumulate(adj[n.a], ga);
                accumulate(adj[n.b], gb);
                break;
            }
            case Op::Relu: {
                const Tensor<T>& x = nodes_[n.a].value;
                Tensor<T> ga(x.dims);
                for (std::size_t i = 0; i < x.data.size(); ++i)
                    ga.data[i] = x.data[i] > T(0) ? g.data[i] : T(0);
                accumulate(adj[n.a], ga);
                break;
            }
            case Op::SoftmaxRows: {
                const Tensor<T>& p = n.value;
                Tensor<T> ga(p.dims);
                const std::size_t rows = p.dims[0], cols = p.dims[1];
                for (std::size_t i = 0; i < rows; ++i) {
                    T inner = T(0);
                    for (std::size_t j = 0; j < cols; ++j) inner += g.at(i, j) * p.at(i, j);
                    for (std::size_t j = 0; j < cols; ++j)
                        ga.at(i, j) = p.at(i, j) * (g.at(i, j) - inner);
                }
                accumulate(adj[n.a], ga);
                break;
            }
            case Op::LayerNormRows: {
                const Tensor<T>& x = nodes_[n.a].value;
                const Tensor<T>& y = n.value;
                Tensor<T> ga(x.dims);
                const std::size_t rows = x.dims[0], cols = x.dims[1];
                for (std::size_t i = 0; i < rows; ++i) {
                    T mean = T(0);
                    for (std::size_t j = 0; j < cols; ++j) mean += x.at(i, j);
                    mean /= static_cast<T>(cols);
                    T var = T(0);
                    for (std::size_t j = 0; j < cols; ++j) {
                        const T d = x.at(i, j) - mean;
                        var += d * d;
                    }
                    var /= static_cast<T>(cols);
                    const T inv = T(1) / std::sqrt(var + static_cast<T>(n.eps));
                    T gmean = T(0), gymean = T(0);
                    for (std::size_t j = 0; j < cols; ++j) {
                        gmean += g.at(i, j);
                        gymean += g.at(i, j) * y.at(i, j);
                    }
                    gmean /= static_cast<T>(cols);
                    gymean /= static_cast<T>(cols);
                    for (std::size_t j = 0; j < cols; ++j)
                        ga.at(i, j) = inv * (g.at(i, j) - gmean - y.at(i, j) * gymean);
                }
                accumulate(adj[n.a], ga);
                break;
            }
            case Op::CausalConvCols: {
                const Tensor<T>& h = nodes_[n.a].value;
                const Tensor<T>& u = nodes_[n.b].value;
                const std::size_t rows = u.dims[0], cols = u.dims[1];
                Tensor<T> gh(h.dims), gu(u.dims);
                for (std::size_t k = 0; k < rows; ++k)
                    for (std::size_t j = 0; j < cols; ++j) {
                        T acc = T(0);
                        for (std::size_t i = k; i < rows; ++i) acc += g.at(i, j) * u.at(i - k, j);
                        gh.at(k, j) = acc;
                    }
                for (std::size_t m = 0; m < rows; ++m)
                    for (std::size_t j = 0; j < cols; ++j) {
                        T acc = T(0);
                        for (std::size_t i = m; i < rows; ++i) acc += g.at(i, j) * h.at(i - m, j);
                        gu.at(m, j) = acc;
                    }
                accumulate(adj[n.a], gh);
                accumulate(adj[n.b], gu);
                break;
            }
            case Op::CircularConvCols: {
                const Tensor<T>& h = nodes_[n.a].value;
                const Tensor<T>& u = nodes_[n.b].value;
                const std::size_t rows = u.dims[0], cols = u.dims[1];
                Tensor<T> gh(h.dims), gu(u.dims);
                for (std::size_t k = 0; k < rows; ++k)
                    for (std::size_t j = 0; j < cols; ++j) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < rows; ++i)
                            acc += g.at(i, j) * u.at((i + rows - k) % rows, j);
                        gh.at(k, j) = acc;
                    }
                for (std::size_t m = 0; m < rows; ++m)
                    for (std::size_t j = 0; j < cols; ++j) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < rows; ++i)
                            acc += g.at(i, j) * h.at((i + rows - m) % rows, j);
                        gu.at(m, j) = acc;
                    }
                accumulate(adj[n.a], gh);
                accumulate(adj[n.b], gu);
                break;
            }
            case Op::Transpose: {
                accumulate(adj[n.a], pls::transpose(g));
                break;
            }
            case Op::MseLoss: {
                const Tensor<T>& p = nodes_[n.a].value;
                const Tensor<T>& t = nodes_[n.b].value;
                const T f = T(2) * g.data[0] / static_cast<T>(p.data.size());
                Tensor<T> gp(p.dims), gt(t.dims);
                for (std::size_t i = 0; i < p.data.size(); ++i) {
                    const T d = f * (p.data[i] - t.data[i]);
                    gp.data[i] = d;
                    gt.data[i] = -d;
                }
                accumulate(adj[n.a], gp);
                accumulate(adj[n.b], gt);
                break;
            }
            case Op::Leaf:
                break;
        }
    }

    GradStore<T> out;
    for (std::size_t idx = 0; idx < nodes_.size(); ++idx) {
        const Node& n = nodes_[idx];
        if (n.op != Op::Leaf || !n.trainable)
            continue;
        if (adj[idx].data.empty())
            out.add(n.name, Tensor<T>(n.value.dims));
        else
            out.add(n.name, std::move(adj[idx]));
    }
    return out;
}

template <typename T>
GradStore<T> finite_diff_grad(const std::function<double(const ParamStore<T>&)>& f,
                              const ParamStore<T>& params, double eps) {
    GradStore<T> out;
    ParamStore<T> work = params;
    for (std::size_t p = 0; p < work.items.size(); ++p) {
        Tensor<T> g(work.items[p].second.dims);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const T orig = work.items[p].second.data[i];
            work.items[p].second.data[i] = orig + static_cast<T>(eps);
            const double fp = f(work);
            work.items[p].second.data[i] = orig - static_cast<T>(eps);
            const double fm = f(work);
            work.items[p].second.data[i] = orig;
            g.data[i] = static_cast<T>((fp - fm) / (2.0 * eps));
        }
        out.add(work.items[p].first, std::move(g));
    }
    return out;
}

template <typename T>
double grad_check(const std::function<int(Tape<T>&, const ParamStore<T>&)>& build,
                  const ParamStore<T>& params, double eps) {
    Tape<T> tape;
    const int loss = build(tape, params);
    GradStore<T> ad = tape.backward(loss);

    const auto f = [&](const ParamStore<T>& p) {
        Tape<T> t;
        const int l = build(t, p);
        return static_cast<double>(t.value(l).data[0]);
    };
    GradStore<T> fd = finite_diff_grad<T>(f, params, eps);

    double worst = 0.0;
    for (std::size_t p = 0; p < ad.items.size(); ++p) {
        const Tensor<T>& ga = ad.items[p].second;
        const Tensor<T>& gf = fd.at(ad.items[p].first);
        for (std::size_t i = 0; i < ga.data.size(); ++i) {
            const double va = static_cast<double>(ga.data[i]);
            const double vf = static_cast<double>(gf.data[i]);
            const double denom = std::max({std::abs(va), std::abs(vf), 1e-12});
            worst = std::max(worst, std::abs(va - vf) / denom);
        }
    }
    return worst;
}

template class Tape<float>;
template class Tape<double>;
template GradStore<float> finite_diff_grad<float>(
    const std::function<double(const ParamStore<float>&)>&, const ParamStore<float>&, double);
template GradStore<double> finite_diff_grad<double>(
    const std::function<double(const ParamStore<double>&)>&, const ParamStore<double>&, double);
template double grad_check<float>(const std::function<int(Tape<float>&, const ParamStore<float>&)>&,
                                  const ParamStore<float>&, double);
template double grad_check<double>(
    const std::function<int(Tape<double>&, const ParamStore<double>&)>&, const ParamStore<double>&,
    double);

}  // namespace pls
