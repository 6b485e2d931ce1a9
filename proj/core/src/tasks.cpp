#include "pls/tasks.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pls/checkpoint.hpp"
#include "pls/constructions.hpp"
#include "pls/errors.hpp"
#include "pls/linalg.hpp"

namespace pls {

namespace {

using json = nlohmann::json;

struct MulParams {
    std::size_t a, b, d_out;
};

MulParams effective_mul(const TaskSpec& t) {
    if (t.mul_d_out != 0) return {t.mul_a, t.mul_b, t.mul_d_out};
    return {0, t.d / 2, t.d / 2};  // default: first half times second half
}

struct ReadParams {
    std::size_t i, j, a, b;
};

ReadParams effective_read(const TaskSpec& t) {
    return {t.read_i, t.read_j, t.read_a, t.read_b == 0 ? t.d : t.read_b};
}

}  // namespace

void DistributionSpec::validate() const {
    if (n < 1 || d < 1) throw ConfigError("dist: n and d must be >= 1");
    if (n < d) throw ConfigError("dist: need n >= d for spectrum shaping");
    if (sigma_max <= 0) throw ConfigError("dist: sigma_max must be > 0");
    if (kappa < 1) throw ConfigError("dist: kappa must be >= 1");
    if (target_sigma <= 0) throw ConfigError("dist: target_sigma must be > 0");
    if (noise_std < 0) throw ConfigError("dist: noise_std must be >= 0");
}

DistributionSpec ood_spec(const DistributionSpec& base, double sigma) {
    if (sigma <= 0) throw ConfigError("ood: sigma must be > 0");
    DistributionSpec out = base;
    out.target_sigma = sigma;
    return out;
}

template <typename T>
LeastSquaresInstance<T> sample_instance(const DistributionSpec& dist, SeededRng& rng) {
    dist.validate();
    LeastSquaresInstance<T> inst;
    inst.dist = dist;
    const Tensor<T> raw = gaussian<T>(rng, {dist.n, dist.d});
    inst.a = shape_spectrum(raw, dist.sigma_max / dist.kappa, dist.sigma_max);
    inst.x_star = gaussian<T>(rng, {dist.d}, dist.target_sigma);
    inst.b = matvec(inst.a, inst.x_star);
    inst.x0 = gaussian<T>(rng, {dist.d});
    if (dist.noise_std > 0) {
        const Tensor<T> noise = gaussian<T>(rng, {dist.n}, dist.noise_std);
        inst.b = add(inst.b, noise);
    }
    return inst;
}

template <typename T>
Tensor<T> grad_oracle(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x,
                      bool normalized) {
    if (a.rank() != 2) throw DimensionError("grad: A must be a matrix");
    if (x.rank() != 1 || x.dims[0] != a.cols())
        throw DimensionError("grad: x length must equal columns of A");
    if (b.rank() != 1 || b.dims[0] != a.rows())
        throw DimensionError("grad: b length must equal rows of A");
    // Accumulated in double regardless of T: the reference algorithm should
    // floor at the storage precision of the iterates, not at the accumulation
    // noise of single-precision dot products.
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < d; ++j)
            acc += static_cast<double>(a.at(i, j)) * static_cast<double>(x.data[j]);
        r[i] = acc - static_cast<double>(b.data[i]);
    }
    Tensor<T> g({d});
    const double inv = normalized ? 1.0 / static_cast<double>(n) : 1.0;
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i)
            acc += static_cast<double>(a.at(i, j)) * r[i];
        g.data[j] = static_cast<T>(normalized ? acc * inv : acc);
    }
    return g;
}

template <typename T>
Tensor<T> gd_update(const Tensor<T>& x, const Tensor<T>& grad, double eta) {
    if (!x.same_shape(grad)) throw DimensionError("gd_update: x and grad shapes differ");
    const T e = static_cast<T>(eta);
    Tensor<T> out = x;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] - e * grad.data[i];
    return out;
}

template <typename T>
void GdIterate<T>::apply(const Tensor<T>& grad, double eta) {
    if (!x.same_shape(grad)) throw DimensionError("gd_update: x and grad shapes differ");
    const T e = static_cast<T>(eta);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T y = -(e * grad.data[i]) - carry.data[i];
        const T t = x.data[i] + y;
        carry.data[i] = (t - x.data[i]) - y;
        x.data[i] = t;
    }
}

template <typename T>
Tensor<T> gd_oracle(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& x0, double eta,
                    std::size_t k, bool normalized, std::vector<Tensor<T>>* trace) {
    if (eta < 0) throw ConfigError("gd: eta must be >= 0");
    GdIterate<T> it(x0);
    for (std::size_t t = 1; t <= k; ++t) {
        it.apply(grad_oracle(a, b, it.x, normalized), eta);
        const double m = max_abs(it.x);
        if (!std::isfinite(m) || m > 1e12)
            throw DivergenceError("gradient descent diverged at iterate " + std::to_string(t) +
                                  " (max |x| = " + std::to_string(m) + ")");
        if (trace) trace->push_back(it.x);
    }
    return it.x;
}

template <typename T>
Tensor<T> newton_oracle(const Tensor<T>& a, std::size_t steps,
                        std::vector<double>* residual_trace) {
    const std::size_t d = a.cols();
    const Tensor<T> gram = matmul(transpose(a), a);
    const double f = fro_norm(gram);
    if (f == 0) throw NumericalError("newton: A^T A is zero");
    Tensor<T> m = scale(gram, 1.0 / (f * f));
    const Tensor<T> two_eye = scale(eye<T>(d), 2.0);
    for (std::size_t t = 0; t < steps; ++t) {
        m = matmul(m, sub(two_eye, matmul(gram, m)));
        const double res = fro_norm(sub(eye<T>(d), matmul(gram, m)));
        if (!std::isfinite(res) || res > 1e12)
            throw DivergenceError("newton iteration diverged at step " + std::to_string(t + 1) +
                                  " (residual " + std::to_string(res) + ")");
        if (residual_trace) residual_trace->push_back(res);
    }
    return m;
}

const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::LeastSquares: return "least_squares";
        case TaskKind::Read: return "read";
        case TaskKind::Linear: return "linear";
        case TaskKind::Multiply: return "multiply";
        case TaskKind::Gradient: return "gradient";
        case TaskKind::KIter: return "k_iter";
    }
    return "?";
}

TaskKind task_from_name(const std::string& s) {
    if (s == "least_squares") return TaskKind::LeastSquares;
    if (s == "read") return TaskKind::Read;
    if (s == "linear") return TaskKind::Linear;
    if (s == "multiply") return TaskKind::Multiply;
    if (s == "gradient") return TaskKind::Gradient;
    if (s == "k_iter") return TaskKind::KIter;
    throw ConfigError("unknown task: " + s);
}

void TaskSpec::validate() const {
    switch (kind) {
        case TaskKind::LeastSquares:
        case TaskKind::Gradient:
        case TaskKind::KIter:
            dist.validate();
            if (eta < 0) throw ConfigError("task: eta must be >= 0");
            break;
        case TaskKind::Read: {
            if (n < 2 || d < 1) throw ConfigError("read task: need n >= 2, d >= 1");
            const ReadParams r = effective_read(*this);
            if (r.i == r.j) throw ConfigError("read task: i and j must differ");
            if (r.i >= n || r.j >= n) throw ConfigError("read task: row index out of range");
            if (!(r.a < r.b && r.b <= d)) throw ConfigError("read task: need 0 <= a < b <= d");
            break;
        }
        case TaskKind::Linear:
            if (h_matrix.dims.size() != 0) {
                if (h_matrix.dims.size() != 2 || h_matrix.rows() != d)
                    throw ConfigError("linear task: h_matrix must be d x d_out");
            }
            break;
        case TaskKind::Multiply: {
            const MulParams m = effective_mul(*this);
            if (m.d_out == 0) throw ConfigError("multiply task: d_out must be >= 1");
            if (m.a + m.d_out > d || m.b + m.d_out > d)
                throw ConfigError("multiply task: ranges must fit in d");
            break;
        }
    }
    if (width != 0 && width < prompt_cols())
        throw CapacityError("task: width " + std::to_string(width) + " is below the prompt width " +
                            std::to_string(prompt_cols()));
}

std::size_t TaskSpec::prompt_rows() const {
    switch (kind) {
        case TaskKind::LeastSquares: return dist.n;
        case TaskKind::Gradient:
        case TaskKind::KIter: return dist.n + 1;
        default: return n;
    }
}

std::size_t TaskSpec::prompt_cols() const {
    switch (kind) {
        case TaskKind::LeastSquares:
        case TaskKind::Gradient:
        case TaskKind::KIter: return dist.d + 1;
        default: return d;
    }
}

std::size_t TaskSpec::out_cols() const {
    switch (kind) {
        case TaskKind::LeastSquares:
        case TaskKind::Gradient:
        case TaskKind::KIter: return dist.d;
        case TaskKind::Read: return d;
        case TaskKind::Linear:
            return h_matrix.dims.size() == 2 ? h_matrix.cols() : 1;
        case TaskKind::Multiply: return effective_mul(*this).d_out;
    }
    return 0;
}

void randomize_task(TaskSpec& task, SeededRng& rng) {
    if (task.kind == TaskKind::Read) {
        task.read_i = static_cast<std::size_t>(rng.next_uniform() * static_cast<double>(task.n));
        std::size_t j = static_cast<std::size_t>(rng.next_uniform() *
                                                 static_cast<double>(task.n - 1));
        if (j >= task.read_i) ++j;
        task.read_j = j;
    }
    if (task.kind == TaskKind::Linear && task.h_matrix.dims.size() == 0)
        task.h_matrix = gaussian<double>(rng, {task.d, 1}, std::sqrt(3.0));
}

ReadoutMask task_readout(const TaskSpec& task) {
    switch (task.kind) {
        case TaskKind::LeastSquares:
            return {task.dist.n - 1, task.dist.n, 0, task.dist.d};
        case TaskKind::Gradient:
        case TaskKind::KIter:
            return {task.dist.n, task.dist.n + 1, 0, task.dist.d};
        default:
            return {0, task.prompt_rows(), 0, task.out_cols()};
    }
}

namespace {

template <typename T>
void put_sample(Tensor<T>& dst, std::size_t s, const Tensor<T>& src) {
    for (std::size_t r = 0; r < src.rows(); ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) dst.at(s, r, c) = src.at(r, c);
}

template <typename T>
Tensor<T> as_row(const Tensor<T>& v) {
    return Tensor<T>({1, v.data.size()}, v.data);
}

}  // namespace

template <typename T>
PromptBatch<T> make_batch(const TaskSpec& task, std::size_t batch, const SeededRng& rng) {
    task.validate();
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    const std::size_t rows = task.prompt_rows();
    const std::size_t nat = task.prompt_cols();
    const std::size_t width = task.width == 0 ? nat : task.width;

    PromptBatch<T> out;
    out.kind = task.kind;
    out.seed = rng.seed();
    out.stream = rng.stream();
    out.readout = task_readout(task);
    out.inputs = Tensor<T>::zeros({batch, rows, width});
    out.targets = Tensor<T>::zeros({batch, out.readout.rows(), out.readout.cols()});

    for (std::size_t s = 0; s < batch; ++s) {
        SeededRng sub = rng.substream(s);
        switch (task.kind) {
            case TaskKind::LeastSquares:
            case TaskKind::Gradient:
            case TaskKind::KIter: {
                LeastSquaresInstance<T> inst = sample_instance<T>(task.dist, sub);
                inst.eta = task.eta;
                const bool ls = task.kind == TaskKind::LeastSquares;
                put_sample(out.inputs, s, pad_prompt(ls ? ls_prompt(inst) : iterate_prompt(inst),
                                                     width));
                Tensor<T> target;
                if (task.kind == TaskKind::LeastSquares) target = inst.x_star;
                else if (task.kind == TaskKind::Gradient)
                    target = grad_oracle(inst.a, inst.b, inst.x0, task.normalized);
                else
                    target = gd_oracle(inst.a, inst.b, inst.x0, task.eta, task.k,
                                       task.normalized);
                put_sample(out.targets, s, as_row(target));
                break;
            }
            default: {
                const Tensor<T> data = gaussian<T>(sub, {task.n, task.d});
                put_sample(out.inputs, s, pad_prompt(data, width));
                put_sample(out.targets, s, primitive_target(task, data));
                break;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> ls_prompt(const LeastSquaresInstance<T>& inst) {
    const std::size_t n = inst.a.rows(), d = inst.a.cols();
    Tensor<T> p = Tensor<T>::zeros({n, d + 1});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) p.at(r, c) = inst.a.at(r, c);
        p.at(r, d) = inst.b.data[r];
    }
    return p;
}

template <typename T>
Tensor<T> iterate_prompt(const LeastSquaresInstance<T>& inst) {
    const std::size_t n = inst.a.rows(), d = inst.a.cols();
    Tensor<T> p = Tensor<T>::zeros({n + 1, d + 1});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) p.at(r, c) = inst.a.at(r, c);
        p.at(r, d) = inst.b.data[r];
    }
    for (std::size_t c = 0; c < d; ++c) p.at(n, c) = inst.x0.data[c];
    return p;
}

template <typename T>
Tensor<T> pad_prompt(const Tensor<T>& prompt, std::size_t width) {
    if (width < prompt.cols())
        throw CapacityError("pad: width " + std::to_string(width) + " is below the prompt width " +
                            std::to_string(prompt.cols()));
    if (width == prompt.cols()) return prompt;
    Tensor<T> out = Tensor<T>::zeros({prompt.rows(), width});
    for (std::size_t r = 0; r < prompt.rows(); ++r)
        for (std::size_t c = 0; c < prompt.cols(); ++c) out.at(r, c) = prompt.at(r, c);
    return out;
}

template <typename T>
PromptParts<T> split_ls_prompt(const Tensor<T>& prompt, std::size_t d) {
    if (prompt.cols() < d + 1) throw DimensionError("split: prompt narrower than d + 1");
    const std::size_t n = prompt.rows();
    PromptParts<T> parts{Tensor<T>::zeros({n, d}), Tensor<T>::zeros({n}), Tensor<T>()};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) parts.a.at(r, c) = prompt.at(r, c);
        parts.b.data[r] = prompt.at(r, d);
    }
    return parts;
}

template <typename T>
PromptParts<T> split_iterate_prompt(const Tensor<T>& prompt, std::size_t d) {
    if (prompt.cols() < d + 1) throw DimensionError("split: prompt narrower than d + 1");
    if (prompt.rows() < 2) throw DimensionError("split: prompt needs a final x0 row");
    const std::size_t n = prompt.rows() - 1;
    PromptParts<T> parts{Tensor<T>::zeros({n, d}), Tensor<T>::zeros({n}),
                         Tensor<T>::zeros({d})};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) parts.a.at(r, c) = prompt.at(r, c);
        parts.b.data[r] = prompt.at(r, d);
    }
    for (std::size_t c = 0; c < d; ++c) parts.x0.data[c] = prompt.at(n, c);
    return parts;
}

template <typename T>
Tensor<T> primitive_target(const TaskSpec& task, const Tensor<T>& data) {
    switch (task.kind) {
        case TaskKind::Read: {
            const ReadParams r = effective_read(task);
            return primitive_read(data, r.i, r.j, r.a, r.b);
        }
        case TaskKind::Linear: {
            if (task.h_matrix.dims.size() != 2)
                throw ConfigError("linear task: h_matrix not set; call randomize_task first");
            return primitive_linear(data, cast_tensor<T>(task.h_matrix));
        }
        case TaskKind::Multiply: {
            const MulParams m = effective_mul(task);
            return primitive_multiply(data, m.a, m.b, m.d_out);
        }
        default:
            throw ConfigError("primitive_target: task is not a primitive");
    }
}

namespace {

json dist_to_json(const DistributionSpec& d) {
    json j;
    j["n"] = d.n;
    j["d"] = d.d;
    j["sigma_max"] = d.sigma_max;
    j["kappa"] = d.kappa;
    j["target_sigma"] = d.target_sigma;
    j["noise_std"] = d.noise_std;
    return j;
}

DistributionSpec dist_from_json(const json& j) {
    DistributionSpec d;
    d.n = j.value("n", d.n);
    d.d = j.value("d", d.d);
    d.sigma_max = j.value("sigma_max", d.sigma_max);
    d.kappa = j.value("kappa", d.kappa);
    d.target_sigma = j.value("target_sigma", d.target_sigma);
    d.noise_std = j.value("noise_std", d.noise_std);
    return d;
}

}  // namespace

std::string task_spec_to_json(const TaskSpec& t) {
    json j;
    j["kind"] = task_name(t.kind);
    j["n"] = t.n;
    j["d"] = t.d;
    j["width"] = t.width;
    j["k"] = t.k;
    j["eta"] = t.eta;
    j["normalized"] = t.normalized;
    j["dist"] = dist_to_json(t.dist);
    j["read_i"] = t.read_i;
    j["read_j"] = t.read_j;
    j["read_a"] = t.read_a;
    j["read_b"] = t.read_b;
    j["mul_a"] = t.mul_a;
    j["mul_b"] = t.mul_b;
    j["mul_d_out"] = t.mul_d_out;
    if (t.h_matrix.dims.size() == 2) {
        j["h_matrix"] = {{"rows", t.h_matrix.rows()},
                         {"cols", t.h_matrix.cols()},
                         {"data", t.h_matrix.data}};
    } else {
        j["h_matrix"] = nullptr;
    }
    return j.dump();
}

TaskSpec task_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("task json: ") + e.what());
    }
    TaskSpec t;
    t.kind = task_from_name(j.value("kind", std::string(task_name(t.kind))));
    t.n = j.value("n", t.n);
    t.d = j.value("d", t.d);
    t.width = j.value("width", t.width);
    t.k = j.value("k", t.k);
    t.eta = j.value("eta", t.eta);
    t.normalized = j.value("normalized", t.normalized);
    if (j.contains("dist")) t.dist = dist_from_json(j.at("dist"));
    t.read_i = j.value("read_i", t.read_i);
    t.read_j = j.value("read_j", t.read_j);
    t.read_a = j.value("read_a", t.read_a);
    t.read_b = j.value("read_b", t.read_b);
    t.mul_a = j.value("mul_a", t.mul_a);
    t.mul_b = j.value("mul_b", t.mul_b);
    t.mul_d_out = j.value("mul_d_out", t.mul_d_out);
    if (j.contains("h_matrix") && !j.at("h_matrix").is_null()) {
        const json& h = j.at("h_matrix");
        Tensor<double> m({h.at("rows").get<std::size_t>(), h.at("cols").get<std::size_t>()});
        const auto data = h.at("data").get<std::vector<double>>();
        if (data.size() != m.data.size()) throw ConfigError("task json: h_matrix size mismatch");
        m.data = data;
        t.h_matrix = std::move(m);
    }
    return t;
}

template <typename T>
void dump_batch(const std::string& path, const PromptBatch<T>& batch, const TaskSpec& task) {
    ParamStore<T> store;
    store.add("inputs", batch.inputs);
    store.add("targets", batch.targets);
    write_pls1(path, to_raw(store));
    json manifest;
    manifest["task"] = json::parse(task_spec_to_json(task));
    manifest["kind"] = task_name(batch.kind);
    manifest["seed"] = batch.seed;
    manifest["stream"] = batch.stream;
    manifest["batch"] = batch.inputs.dims[0];
    manifest["readout"] = {batch.readout.r0, batch.readout.r1, batch.readout.c0,
                           batch.readout.c1};
    std::ofstream f(path + ".json", std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path + ".json");
    f << manifest.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path + ".json");
}

#define PLS_INSTANTIATE_TASKS(T)                                                              \
    template LeastSquaresInstance<T> sample_instance<T>(const DistributionSpec&, SeededRng&); \
    template Tensor<T> grad_oracle<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      bool);                                                  \
    template Tensor<T> gd_update<T>(const Tensor<T>&, const Tensor<T>&, double);              \
    template struct GdIterate<T>;                                                             \
    template Tensor<T> gd_oracle<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    double, std::size_t, bool, std::vector<Tensor<T>>*);      \
    template Tensor<T> newton_oracle<T>(const Tensor<T>&, std::size_t,              \
                                    std::vector<double>*);                       \
    template PromptBatch<T> make_batch<T>(const TaskSpec&, std::size_t, const SeededRng&);    \
    template Tensor<T> ls_prompt<T>(const LeastSquaresInstance<T>&);                          \
    template Tensor<T> iterate_prompt<T>(const LeastSquaresInstance<T>&);                     \
    template Tensor<T> pad_prompt<T>(const Tensor<T>&, std::size_t);                          \
    template PromptParts<T> split_ls_prompt<T>(const Tensor<T>&, std::size_t);                \
    template PromptParts<T> split_iterate_prompt<T>(const Tensor<T>&, std::size_t);           \
    template Tensor<T> primitive_target<T>(const TaskSpec&, const Tensor<T>&);                \
    template void dump_batch<T>(const std::string&, const PromptBatch<T>&, const TaskSpec&);

PLS_INSTANTIATE_TASKS(float)
PLS_INSTANTIATE_TASKS(double)

}  // namespace pls
