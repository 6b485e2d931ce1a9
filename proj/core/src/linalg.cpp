#include "pls/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pls/errors.hpp"

namespace pls {

namespace {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* what) {
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + ": rank-2 tensor required");
}

template <typename T>
constexpr T jacobi_tol() {
    return std::is_same_v<T, float> ? T(1e-6) : T(1e-10);
}

constexpr int kJacobiMaxSweeps = 100;

}  // namespace

template <typename T>
Tensor<T> eye(std::size_t n) {
    Tensor<T> t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T(1);
    return t;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    const std::size_t m = a.dims[0], k = a.dims[1], n = b.dims[1];
    if (b.dims[0] != k)
        throw DimensionError("matmul: inner dimensions differ");
    Tensor<T> c({m, n});
    // i-k-j order: cache friendly and adds contributions in ascending k for
    // every output element, matching the naive dot-product order.
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &a.data[i * k];
        T* crow = &c.data[i * n];
        for (std::size_t l = 0; l < k; ++l) {
            const T av = arow[l];
            const T* brow = &b.data[l * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

template <typename T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x) {
    require_rank2(a, "matvec lhs");
    if (x.rank() != 1 || x.dims[0] != a.dims[1])
        throw DimensionError("matvec: vector length must equal columns of A");
    const std::size_t m = a.dims[0], n = a.dims[1];
    Tensor<T> y({m});
    for (std::size_t i = 0; i < m; ++i) {
        T acc = T(0);
        const T* arow = &a.data[i * n];
        for (std::size_t j = 0; j < n; ++j) acc += arow[j] * x.data[j];
        y.data[i] = acc;
    }
    return y;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("hadamard: shape mismatch");
    Tensor<T> c(a.dims);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * b.data[i];
    return c;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("add: shape mismatch");
    Tensor<T> c(a.dims);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("sub: shape mismatch");
    Tensor<T> c(a.dims);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
    Tensor<T> out(a.dims);
    const T cv = static_cast<T>(c);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * cv;
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank2(a, "transpose");
    Tensor<T> t({a.dims[1], a.dims[0]});
    for (std::size_t i = 0; i < a.dims[0]; ++i)
        for (std::size_t j = 0; j < a.dims[1]; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

template <typename T>
Tensor<T> causal_conv_cols(const Tensor<T>& h, const Tensor<T>& u) {
    require_rank2(h, "conv filters");
    require_rank2(u, "conv input");
    if (!h.same_shape(u))
        throw DimensionError("causal_conv_cols: filters and input must both be N x D");
    const std::size_t n = u.dims[0], d = u.dims[1];
    Tensor<T> v({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k <= i; ++k) acc += h.at(k, j) * u.at(i - k, j);
            v.at(i, j) = acc;
        }
    return v;
}

template <typename T>
Tensor<T> circular_conv_cols(const Tensor<T>& h, const Tensor<T>& u) {
    require_rank2(h, "conv filters");
    require_rank2(u, "conv input");
    if (!h.same_shape(u))
        throw DimensionError("circular_conv_cols: filters and input must both be N x D");
    const std::size_t n = u.dims[0], d = u.dims[1];
    Tensor<T> h2({2 * n, d});
    Tensor<T> u2({2 * n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            h2.at(i, j) = h.at(i, j);
            u2.at(i, j) = u.at(i, j);
            u2.at(n + i, j) = u.at(i, j);
        }
    Tensor<T> full = causal_conv_cols(h2, u2);
    Tensor<T> v({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) v.at(i, j) = full.at(n + i, j);
    return v;
}

template <typename T>
SvdResult<T> svd_thin(const Tensor<T>& a) {
    require_rank2(a, "svd");
    const std::size_t m = a.dims[0], n = a.dims[1];
    if (m < n)
        throw DimensionError("svd_thin: requires rows >= cols");

    Tensor<T> w = a;
    Tensor<T> v = eye<T>(n);
    const T tol = jacobi_tol<T>();

    bool converged = false;
    double worst = 0.0;
    for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
        converged = true;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                T alpha = T(0), beta = T(0), gamma = T(0);
                for (std::size_t i = 0; i < m; ++i) {
                    const T wp = w.at(i, p), wq = w.at(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                const double denom = std::sqrt(static_cast<double>(alpha)) *
                                     std::sqrt(static_cast<double>(beta));
                if (denom == 0.0)
                    continue;
                const double ratio = std::abs(static_cast<double>(gamma)) / denom;
                if (ratio > worst) worst = ratio;
                if (ratio <= static_cast<double>(tol))
                    continue;
                converged = false;
                const double zeta = (static_cast<double>(beta) - static_cast<double>(alpha)) /
                                    (2.0 * static_cast<double>(gamma));
                const double sgn = zeta >= 0.0 ? 1.0 : -1.0;
                const double t = sgn / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const T c = static_cast<T>(1.0 / std::sqrt(1.0 + t * t));
                const T s = static_cast<T>(t) * c;
                for (std::size_t i = 0; i < m; ++i) {
                    const T wp = w.at(i, p), wq = w.at(i, q);
                    w.at(i, p) = c * wp - s * wq;
                    w.at(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const T vp = v.at(i, p), vq = v.at(i, q);
                    v.at(i, p) = c * vp - s * vq;
                    v.at(i, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged)
        throw NumericalError("svd_thin: Jacobi sweeps did not converge, residual " +
                             std::to_string(worst));

    SvdResult<T> r;
    r.s = Tensor<T>({n});
    r.u = Tensor<T>({m, n});
    for (std::size_t j = 0; j < n; ++j) {
        T norm2 = T(0);
        for (std::size_t i = 0; i < m; ++i) norm2 += w.at(i, j) * w.at(i, j);
        const T norm = std::sqrt(norm2);
        r.s.data[j] = norm;
        if (norm > T(0))
            for (std::size_t i = 0; i < m; ++i) r.u.at(i, j) = w.at(i, j) / norm;
    }

    // Sort singular values descending, permuting U and V columns along.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    for (std::size_t i = 0; i + 1 < n; ++i) {
        std::size_t best = i;
        for (std::size_t j = i + 1; j < n; ++j)
            if (r.s.data[order[j]] > r.s.data[order[best]]) best = j;
        std::swap(order[i], order[best]);
    }
    SvdResult<T> out;
    out.s = Tensor<T>({n});
    out.u = Tensor<T>({m, n});
    out.v = Tensor<T>({n, n});
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s.data[j] = r.s.data[src];
        for (std::size_t i = 0; i < m; ++i) out.u.at(i, j) = r.u.at(i, src);
        for (std::size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
    }
    return out;
}

template <typename T>
Tensor<T> shape_spectrum(const Tensor<T>& a, double smin, double smax) {
    if (smin <= 0.0 || smax < smin)
        throw ConfigError("shape_spectrum: need 0 < smin <= smax");
    SvdResult<T> svd = svd_thin(a);
    const std::size_t m = a.dims[0], n = a.dims[1];
    const double s_lo = static_cast<double>(svd.s.data[n - 1]);
    const double s_hi = static_cast<double>(svd.s.data[0]);
    Tensor<T> mapped({n});
    if (s_hi == s_lo) {
        for (std::size_t j = 0; j < n; ++j) mapped.data[j] = static_cast<T>(smax);
    } else {
        const double slope = (smax - smin) / (s_hi - s_lo);
        for (std::size_t j = 0; j < n; ++j)
            mapped.data[j] = static_cast<T>(smin + (static_cast<double>(svd.s.data[j]) - s_lo) * slope);
    }
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < n; ++k)
                acc += svd.u.at(i, k) * mapped.data[k] * svd.v.at(j, k);
            out.at(i, j) = acc;
        }
    return out;
}

template <typename T>
Tensor<T> ols_solve(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a, "ols_solve lhs");
    const std::size_t m = a.dims[0], n = a.dims[1];
    if (m < n)
        throw DimensionError("ols_solve: requires rows >= cols");
    if (b.rank() != 1 || b.dims[0] != m)
        throw DimensionError("ols_solve: rhs length must equal rows of A");

    Tensor<T> r = a;
    Tensor<T> y = b;
    // Householder QR, applying reflectors to the rhs as they are formed.
    for (std::size_t k = 0; k < n; ++k) {
        T norm2 = T(0);
        for (std::size_t i = k; i < m; ++i) norm2 += r.at(i, k) * r.at(i, k);
        const T norm = std::sqrt(norm2);
        if (norm == T(0))
            throw NumericalError("ols_solve: rank deficient at pivot " + std::to_string(k));
        const T alpha = r.at(k, k) >= T(0) ? -norm : norm;
        std::vector<T> v(m - k);
        v[0] = r.at(k, k) - alpha;
        for (std::size_t i = k + 1; i < m; ++i) v[i - k] = r.at(i, k);
        T vnorm2 = T(0);
        for (const T& x : v) vnorm2 += x * x;
        if (vnorm2 > T(0)) {
            for (std::size_t j = k; j < n; ++j) {
                T proj = T(0);
                for (std::size_t i = k; i < m; ++i) proj += v[i - k] * r.at(i, j);
                const T f = T(2) * proj / vnorm2;
                for (std::size_t i = k; i < m; ++i) r.at(i, j) -= f * v[i - k];
            }
            T proj = T(0);
            for (std::size_t i = k; i < m; ++i) proj += v[i - k] * y.data[i];
            const T f = T(2) * proj / vnorm2;
            for (std::size_t i = k; i < m; ++i) y.data[i] -= f * v[i - k];
        }
        r.at(k, k) = alpha;
        for (std::size_t i = k + 1; i < m; ++i) r.at(i, k) = T(0);
    }

    T diag_max = T(0);
    for (std::size_t k = 0; k < n; ++k)
        diag_max = std::max(diag_max, std::abs(r.at(k, k)));
    const T eps = std::numeric_limits<T>::epsilon();
    const T sing_tol = static_cast<T>(m) * eps * diag_max;

    Tensor<T> x({n});
    for (std::size_t kk = n; kk-- > 0;) {
        if (std::abs(r.at(kk, kk)) <= sing_tol)
            throw NumericalError("ols_solve: rank deficient at pivot " + std::to_string(kk));
        T acc = y.data[kk];
        for (std::size_t j = kk + 1; j < n; ++j) acc -= r.at(kk, j) * x.data[j];
        x.data[kk] = acc / r.at(kk, kk);
    }
    return x;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("dot: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
    return acc;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
    double m = 0.0;
    for (const T& x : a.data) m = std::max(m, std::abs(static_cast<double>(x)));
    return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <typename T>
double fro_norm(const Tensor<T>& a) {
    double acc = 0.0;
    for (const T& x : a.data) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

#define PLS_INSTANTIATE_LINALG(T)                                              \
    template Tensor<T> eye<T>(std::size_t);                                    \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> matvec<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> hadamard<T>(const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);            \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);            \
    template Tensor<T> scale<T>(const Tensor<T>&, double);                    \
    template Tensor<T> transpose<T>(const Tensor<T>&);                        \
    template Tensor<T> causal_conv_cols<T>(const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> circular_conv_cols<T>(const Tensor<T>&, const Tensor<T>&); \
    template SvdResult<T> svd_thin<T>(const Tensor<T>&);                      \
    template Tensor<T> shape_spectrum<T>(const Tensor<T>&, double, double);   \
    template Tensor<T> ols_solve<T>(const Tensor<T>&, const Tensor<T>&);      \
    template double dot<T>(const Tensor<T>&, const Tensor<T>&);               \
    template double max_abs<T>(const Tensor<T>&);                             \
    template double max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);      \
    template double fro_norm<T>(const Tensor<T>&);                            \
    template double mse<T>(const Tensor<T>&, const Tensor<T>&);

PLS_INSTANTIATE_LINALG(float)
PLS_INSTANTIATE_LINALG(double)

#undef PLS_INSTANTIATE_LINALG

}  // namespace pls
