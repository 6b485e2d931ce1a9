#include "pls/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <limits>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "pls/checkpoint.hpp"
#include "pls/errors.hpp"
#include "pls/linalg.hpp"
#include "pls/version.hpp"

namespace pls {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

json parse_config(const std::string& text) {
    if (text.empty()) return json::object();
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config is not valid JSON");
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    return j;
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) { ok = true; break; }
        if (!ok) throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "single") return Dtype::Single;
    if (s == "double") return Dtype::Double;
    throw ConfigError("unknown dtype \"" + s + "\" (use single or double)");
}

// Applies CLI overrides onto the parsed config so both paths agree.
void apply_overrides(json& j, const CliOverrides& ov) {
    if (ov.seed) j["seed"] = *ov.seed;
    if (ov.out) j["out"] = *ov.out;
    if (ov.dtype) j["dtype"] = dtype_name(*ov.dtype);
}

std::uint64_t seed_of(const json& j) { return j.value("seed", std::uint64_t{0}); }
std::string out_of(const json& j, const std::string& fallback) {
    return j.value("out", fallback);
}
Dtype dtype_of_cfg(const json& j, Dtype fallback = Dtype::Single) {
    if (!j.contains("dtype")) return fallback;
    return dtype_from_name(j.at("dtype").get<std::string>());
}

DistributionSpec dist_from_json(const json& j) {
    check_keys(j, "dist", {"n", "d", "sigma_max", "kappa", "target_sigma", "noise_std"});
    DistributionSpec dist;
    dist.n = j.value("n", dist.n);
    dist.d = j.value("d", dist.d);
    dist.sigma_max = j.value("sigma_max", dist.sigma_max);
    dist.kappa = j.value("kappa", dist.kappa);
    dist.target_sigma = j.value("target_sigma", dist.target_sigma);
    dist.noise_std = j.value("noise_std", dist.noise_std);
    dist.validate();
    return dist;
}

void check_model_keys(const json& j) {
    check_keys(j, "model",
               {"arch", "layers", "emb", "heads", "use_mlp", "mlp_mult", "use_layernorm",
                "causal", "seq_len", "in_dim", "out_dim", "positional_encoding", "residual"});
}

void check_task_keys(const json& j) {
    check_keys(j, "task",
               {"kind", "n", "d", "width", "k", "eta", "normalized", "dist", "read_i", "read_j",
                "read_a", "read_b", "mul_a", "mul_b", "mul_d_out", "h_matrix", "randomize"});
    if (j.contains("dist")) check_keys(j.at("dist"), "task.dist",
                                       {"n", "d", "sigma_max", "kappa", "target_sigma",
                                        "noise_std"});
    if (j.contains("h_matrix") && j.at("h_matrix").is_object())
        check_keys(j.at("h_matrix"), "task.h_matrix", {"rows", "cols", "data"});
}

TaskSpec task_from_json_strict(const json& j, std::uint64_t seed) {
    check_task_keys(j);
    json clean = j;
    clean.erase("randomize");
    TaskSpec task = task_spec_from_json(clean.dump());
    if (j.value("randomize", false)) {
        SeededRng rng = SeededRng(seed).substream(4);
        randomize_task(task, rng);
    }
    task.validate();
    return task;
}

SchedulerState scheduler_from_json(const json& j) {
    check_keys(j, "scheduler", {"kind", "lr0", "step_rate", "decay", "sigma_th"});
    SchedulerState s;
    s.kind = scheduler_from_name(j.value("kind", std::string(scheduler_name(s.kind))));
    s.lr0 = j.value("lr0", s.lr0);
    s.step_rate = j.value("step_rate", s.step_rate);
    s.decay = j.value("decay", s.decay);
    s.sigma_th = j.value("sigma_th", s.sigma_th);
    s.lr = s.lr0;
    return s;
}

TrainConfig train_config_from_json(const json& top) {
    check_keys(top, "config", {"seed", "dtype", "out", "model", "task", "train"});
    if (!top.contains("model")) throw ConfigError("train config requires a \"model\" object");
    if (!top.contains("task")) throw ConfigError("train config requires a \"task\" object");
    check_model_keys(top.at("model"));

    TrainConfig cfg;
    cfg.seed = seed_of(top);
    cfg.dtype = dtype_of_cfg(top);
    cfg.model = model_spec_from_json(top.at("model").dump());
    cfg.task = task_from_json_strict(top.at("task"), cfg.seed);

    if (top.contains("train")) {
        const json& t = top.at("train");
        check_keys(t, "train",
                   {"batch_size", "total_iters", "probe_count", "probe_interval", "log_interval",
                    "target_mse", "divergence_loss", "reduction", "init", "ema", "scheduler"});
        cfg.batch_size = t.value("batch_size", cfg.batch_size);
        cfg.total_iters = t.value("total_iters", cfg.total_iters);
        cfg.probe_count = t.value("probe_count", cfg.probe_count);
        cfg.probe_interval = t.value("probe_interval", cfg.probe_interval);
        cfg.log_interval = t.value("log_interval", cfg.log_interval);
        cfg.target_mse = t.value("target_mse", cfg.target_mse);
        cfg.divergence_loss = t.value("divergence_loss", cfg.divergence_loss);
        cfg.reduction = t.value("reduction", cfg.reduction);
        cfg.init = init_from_name(t.value("init", std::string(init_name(cfg.init))));
        if (t.contains("ema")) {
            const json& e = t.at("ema");
            check_keys(e, "train.ema", {"decay", "lambda", "enabled", "replace"});
            cfg.ema_decay = e.value("decay", cfg.ema_decay);
            cfg.ema_lambda = e.value("lambda", cfg.ema_lambda);
            cfg.ema_enabled = e.value("enabled", cfg.ema_enabled);
            cfg.ema_replace = e.value("replace", cfg.ema_replace);
        }
        if (t.contains("scheduler")) cfg.scheduler = scheduler_from_json(t.at("scheduler"));
    }
    cfg.validate();
    return cfg;
}

ConstructionSpec construction_from_json(const json& j, Dtype dtype) {
    check_keys(j, "construction",
               {"kind", "i", "j", "a", "b", "d_out", "eta", "k", "n", "d", "emb",
                "emit_gradient", "normalized", "h_matrix"});
    if (!j.contains("kind")) throw ConfigError("construction requires \"kind\"");
    ConstructionSpec cs;
    cs.kind = construction_from_name(j.at("kind").get<std::string>());
    cs.i = j.value("i", cs.i);
    cs.j = j.value("j", cs.j);
    cs.a = j.value("a", cs.a);
    cs.b = j.value("b", cs.b);
    cs.d_out = j.value("d_out", cs.d_out);
    cs.eta = j.value("eta", cs.eta);
    cs.k = j.value("k", cs.k);
    cs.n = j.value("n", cs.n);
    cs.d = j.value("d", cs.d);
    cs.emb = j.value("emb", cs.emb);
    cs.gd.emit_gradient = j.value("emit_gradient", cs.gd.emit_gradient);
    cs.gd.normalized = j.value("normalized", cs.gd.normalized);
    cs.dtype = dtype;
    if (j.contains("h_matrix")) {
        const json& h = j.at("h_matrix");
        check_keys(h, "construction.h_matrix", {"rows", "cols", "data"});
        std::size_t rows = h.at("rows").get<std::size_t>();
        std::size_t cols = h.at("cols").get<std::size_t>();
        auto data = h.at("data").get<std::vector<double>>();
        if (data.size() != rows * cols)
            throw ConfigError("construction.h_matrix data length does not match rows*cols");
        cs.h_matrix = Tensor<double>({rows, cols});
        cs.h_matrix.data = data;
    }
    if (cs.kind == ConstructionKind::Read && cs.b == 0) cs.b = cs.d;
    return cs;
}

json construction_extra(const ConstructionSpec& cs, const ReadoutMask& mask,
                        const std::string& layout_json) {
    json c;
    c["kind"] = construction_name(cs.kind);
    c["n"] = cs.n;
    c["d"] = cs.d;
    c["k"] = cs.k;
    c["eta"] = cs.eta;
    c["emit_gradient"] = cs.gd.emit_gradient;
    c["normalized"] = cs.gd.normalized;
    c["readout"] = {mask.r0, mask.r1, mask.c0, mask.c1};
    c["layout"] = json::parse(layout_json);
    if (cs.kind == ConstructionKind::Read) {
        c["i"] = cs.i;
        c["j"] = cs.j;
        c["a"] = cs.a;
        c["b"] = cs.b;
    }
    if (cs.kind == ConstructionKind::Multiply) {
        c["a"] = cs.a;
        c["b"] = cs.b;
        c["d_out"] = cs.d_out;
    }
    return json{{"construction", c}};
}

// Maps exceptions to the shared exit codes; every command body runs inside.
int guard(const char* cmd, const std::function<int()>& body) {
    try {
        return body();
    } catch (const DivergenceError& e) {
        std::cerr << cmd << ": " << e.what() << "\n";
        return kExitDiverged;
    } catch (const Error& e) {
        std::cerr << cmd << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << cmd << ": " << e.what() << "\n";
        return kExitConfig;
    }
}

ordered_json base_report(const char* command, const json& cfg) {
    ordered_json r;
    r["command"] = command;
    r["version"] = version_string();
    r["config_hash"] = config_hash(cfg.dump());
    return r;
}

template <typename T>
ReadoutMask full_mask(const ModelSpec& spec) {
    return ReadoutMask{0, static_cast<std::size_t>(spec.seq_len), 0,
                       static_cast<std::size_t>(spec.out_dim)};
}

template <typename T>
Tensor<T> as_row(const Tensor<T>& v) {
    Tensor<T> row({1, v.numel()});
    row.data = v.data;
    return row;
}

template <typename T>
Tensor<T> as_vec(const Tensor<T>& row) {
    Tensor<T> v({row.numel()});
    v.data = row.data;
    return v;
}

}  // namespace

const char* stop_name(StopReason r) {
    switch (r) {
        case StopReason::Tol: return "tol";
        case StopReason::MaxIters: return "max_iters";
        case StopReason::Diverged: return "diverged";
    }
    return "unknown";
}

std::string config_hash(const std::string& config_json) {
    json j = json::parse(config_json.empty() ? "{}" : config_json, nullptr, false);
    std::string canon = j.is_discarded() ? config_json : j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

template <typename T>
GradFn<T> oracle_grad_fn(bool normalized) {
    return [normalized](const LeastSquaresInstance<T>& inst, const Tensor<T>& x) {
        return grad_oracle(inst.a, inst.b, x, normalized);
    };
}

template <typename T>
GradFn<T> construction_grad_fn(const BuiltModel<T>& model) {
    if (model.kind != ConstructionKind::GdNoncausal && model.kind != ConstructionKind::GdCausal)
        throw ConfigError("construction_grad_fn needs a gradient-descent construction");
    bool causal = model.kind == ConstructionKind::GdCausal;
    return [model, causal](const LeastSquaresInstance<T>& inst, const Tensor<T>& x) {
        Tensor<T> input = causal ? embed_gd_causal(inst.a, inst.b, x)
                                 : embed_gd_noncausal(inst.a, inst.b, x);
        Tensor<T> out = model_eval(model.spec, model.params, input);
        return as_vec(apply_readout(out, model.readout));
    };
}

template <typename T>
IterationTrace<T> iterative_solve(const GradFn<T>& grad_fn, const LeastSquaresInstance<T>& inst,
                                  double eta, double tol, std::size_t max_iters) {
    IterationTrace<T> trace;
    trace.reason = StopReason::MaxIters;
    GdIterate<T> it(inst.x0);
    for (std::size_t i = 1; i <= max_iters; ++i) {
        Tensor<T> delta = grad_fn(inst, it.x);
        Tensor<T> x_prev = it.x;
        it.apply(delta, eta);
        const Tensor<T>& x = it.x;
        double step_norm = max_abs_diff(x, x_prev);
        trace.steps.push_back({i, step_norm, mse(x, inst.x_star)});
        if (!std::isfinite(step_norm) || max_abs(x) > 1e9) {
            trace.reason = StopReason::Diverged;
            break;
        }
        if (step_norm < tol) {
            trace.reason = StopReason::Tol;
            break;
        }
    }
    trace.x = it.x;
    return trace;
}

template <typename T>
LoadedModel<T> load_model(const std::string& path) {
    CheckpointMeta meta = read_manifest(path);
    if (meta.model_json.empty())
        throw IoError("checkpoint manifest " + path + ".json has no model spec");
    LoadedModel<T> lm;
    lm.spec = model_spec_from_json(meta.model_json);
    lm.params = read_params<T>(path);
    lm.readout = full_mask<T>(lm.spec);

    json extra = meta.extra_json.empty() ? json::object() : json::parse(meta.extra_json);
    if (extra.contains("construction")) {
        const json& c = extra.at("construction");
        lm.is_construction = true;
        lm.ckind = construction_from_name(c.at("kind").get<std::string>());
        lm.n = c.value("n", std::size_t{0});
        lm.d = c.value("d", std::size_t{0});
        lm.k = c.value("k", std::size_t{1});
        lm.eta = c.value("eta", 0.04);
        lm.emit_gradient = c.value("emit_gradient", false);
        lm.normalized = c.value("normalized", false);
        if (c.contains("readout")) {
            auto m = c.at("readout").get<std::vector<std::size_t>>();
            if (m.size() == 4) lm.readout = ReadoutMask{m[0], m[1], m[2], m[3]};
        }
    } else if (extra.contains("task")) {
        lm.has_task = true;
        lm.task = task_spec_from_json(extra.at("task").dump());
        lm.readout = task_readout(lm.task);
    }
    return lm;
}

template <typename T>
GradFn<T> model_grad_fn(const LoadedModel<T>& lm) {
    if (lm.is_construction) {
        if (lm.ckind != ConstructionKind::GdNoncausal && lm.ckind != ConstructionKind::GdCausal)
            throw ConfigError("checkpoint is not a gradient evaluator");
        if (!lm.emit_gradient)
            throw ConfigError(
                "checkpoint emits iterates, not gradients; rebuild with emit_gradient");
        bool causal = lm.ckind == ConstructionKind::GdCausal;
        return [lm, causal](const LeastSquaresInstance<T>& inst, const Tensor<T>& x) {
            Tensor<T> input = causal ? embed_gd_causal(inst.a, inst.b, x)
                                     : embed_gd_noncausal(inst.a, inst.b, x);
            Tensor<T> out = model_eval(lm.spec, lm.params, input);
            return as_vec(apply_readout(out, lm.readout));
        };
    }
    if (lm.has_task && lm.task.kind == TaskKind::Gradient) {
        return [lm](const LeastSquaresInstance<T>& inst, const Tensor<T>& x) {
            LeastSquaresInstance<T> cur = inst;
            cur.x0 = x;
            Tensor<T> prompt = pad_prompt(iterate_prompt(cur), lm.task.width);
            Tensor<T> out = model_eval(lm.spec, lm.params, prompt);
            return as_vec(apply_readout(out, lm.readout));
        };
    }
    throw ConfigError("checkpoint is not a gradient evaluator");
}

int cmd_train(const std::string& config_json, const CliOverrides& ov) {
    return guard("train", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        TrainConfig tc = train_config_from_json(cfg);
        std::string out = out_of(cfg, "out/train");
        ensure_dir(out);

        std::ofstream metrics(out + "/metrics.jsonl", std::ios::binary);
        if (!metrics) throw IoError("cannot open " + out + "/metrics.jsonl");
        MetricsSink sink = [&metrics](const MetricsRecord& r) {
            metrics << metrics_to_json(r) << "\n";
        };

        std::string hash = config_hash(cfg.dump());
        bool diverged = false, early = false;
        double final_loss = 0, best_loss = 0;
        std::size_t best_iter = 0, iters_run = 0;
        std::string abort_reason;

        auto finish = [&](auto&& result) {
            diverged = result.diverged;
            early = result.early_stopped;
            final_loss = result.final_loss;
            best_loss = result.best_loss;
            best_iter = result.best_iter;
            iters_run = result.iters_run;
            abort_reason = result.abort_reason;

            CheckpointMeta meta;
            meta.config_hash = hash;
            meta.seed = tc.seed;
            meta.dtype = tc.dtype;
            meta.model_json = model_spec_to_json(tc.model);
            json extra;
            extra["kind"] = "trained";
            extra["task"] = json::parse(task_spec_to_json(tc.task));
            meta.iter = result.iters_run;
            extra["loss"] = result.final_loss;
            meta.extra_json = extra.dump();
            save_checkpoint(out + "/final.pls1", result.params, meta);
            meta.iter = result.best_iter;
            extra["loss"] = result.best_loss;
            meta.extra_json = extra.dump();
            save_checkpoint(out + "/best.pls1", result.best_params, meta);
        };

        if (tc.dtype == Dtype::Double) finish(train<double>(tc, sink));
        else finish(train<float>(tc, sink));
        metrics.close();

        ordered_json report = base_report("train", cfg);
        report["status"] = diverged ? "diverged" : (early ? "early_stopped" : "ok");
        if (!abort_reason.empty()) report["abort_reason"] = abort_reason;
        report["iters_run"] = iters_run;
        report["final_loss"] = final_loss;
        report["best_loss"] = best_loss;
        report["best_iter"] = best_iter;
        write_text(out + "/report.json", report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return diverged ? kExitDiverged : kExitOk;
    });
}

namespace {

template <typename T>
double eval_checkpoint(const json& cfg, const std::string& path, std::size_t samples) {
    LoadedModel<T> lm = load_model<T>(path);
    TaskSpec task = cfg.contains("task") ? task_from_json_strict(cfg.at("task"), seed_of(cfg))
                                         : (lm.has_task ? lm.task : TaskSpec{});
    if (!cfg.contains("task") && !lm.has_task)
        throw ConfigError("eval needs a \"task\" (checkpoint carries none)");
    PromptBatch<T> batch = make_batch<T>(task, samples, SeededRng(seed_of(cfg)).substream(7));
    return batch_loss(lm.spec, lm.params, batch);
}

}  // namespace

int cmd_eval(const std::string& config_json, const CliOverrides& ov) {
    return guard("eval", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config", {"seed", "dtype", "out", "checkpoint", "task", "samples"});
        if (!cfg.contains("checkpoint")) throw ConfigError("eval requires \"checkpoint\"");
        if (cfg.contains("task")) check_task_keys(cfg.at("task"));
        std::string path = cfg.at("checkpoint").get<std::string>();
        std::size_t samples = cfg.value("samples", std::size_t{256});

        Dtype file_dtype = checkpoint_dtype(path);
        Dtype dtype = dtype_of_cfg(cfg, file_dtype);
        if (dtype != file_dtype)
            throw ConfigError(std::string("checkpoint stores ") + dtype_name(file_dtype) +
                              " but config asks for " + dtype_name(dtype));

        double loss = dtype == Dtype::Double ? eval_checkpoint<double>(cfg, path, samples)
                                             : eval_checkpoint<float>(cfg, path, samples);

        ordered_json report = base_report("eval", cfg);
        report["checkpoint"] = path;
        report["samples"] = samples;
        report["mse"] = loss;
        std::string out = out_of(cfg, "out/eval");
        ensure_dir(out);
        write_text(out + "/report.json", report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return kExitOk;
    });
}

namespace {

template <typename T>
VerifyReport verify_built(const BuiltModel<T>& model, const ConstructionSpec& cs,
                          std::size_t n_samples, SeededRng& rng) {
    std::function<Tensor<T>(const Tensor<T>&)> oracle;
    std::function<Tensor<T>(SeededRng&)> sampler;
    switch (cs.kind) {
        case ConstructionKind::Read:
            sampler = [&cs](SeededRng& r) { return gaussian<T>(r, {cs.n, cs.d}); };
            oracle = [&cs](const Tensor<T>& u) {
                return primitive_read(u, cs.i, cs.j, cs.a, cs.b);
            };
            break;
        case ConstructionKind::Linear: {
            Tensor<T> h = cast_tensor<T>(cs.h_matrix);
            std::size_t n = cs.n, din = h.rows();
            sampler = [n, din](SeededRng& r) { return gaussian<T>(r, {n, din}); };
            oracle = [h](const Tensor<T>& u) { return primitive_linear(u, h); };
            break;
        }
        case ConstructionKind::Multiply: {
            std::size_t d_out = cs.d_out ? cs.d_out : cs.d / 2;
            sampler = [&cs](SeededRng& r) { return gaussian<T>(r, {cs.n, cs.d}); };
            oracle = [&cs, d_out](const Tensor<T>& u) {
                return primitive_multiply(u, cs.a, cs.b, d_out);
            };
            break;
        }
        case ConstructionKind::GdNoncausal:
        case ConstructionKind::GdCausal: {
            bool causal = cs.kind == ConstructionKind::GdCausal;
            DistributionSpec dist;
            dist.n = cs.n;
            dist.d = cs.d;
            sampler = [dist, causal](SeededRng& r) {
                auto inst = sample_instance<T>(dist, r);
                return causal ? embed_gd_causal(inst.a, inst.b, inst.x0)
                              : embed_gd_noncausal(inst.a, inst.b, inst.x0);
            };
            double eta = cs.eta;
            std::size_t k = cs.k, d = cs.d;
            bool emit = cs.gd.emit_gradient, norm = cs.gd.normalized;
            oracle = [causal, eta, k, d, emit, norm](const Tensor<T>& input) {
                GdPromptParts<T> p = causal ? extract_gd_causal(input, d)
                                            : extract_gd_noncausal(input, d);
                if (emit) {
                    Tensor<T> xk = gd_oracle(p.a, p.b, p.x0, eta, k ? k - 1 : 0, norm);
                    return as_row(grad_oracle(p.a, p.b, xk, norm));
                }
                return as_row(gd_oracle(p.a, p.b, p.x0, eta, k, norm));
            };
            break;
        }
    }
    return verify_construction(model, oracle, sampler, n_samples, rng);
}

template <typename T>
int construct_impl(const json& cfg, const ConstructionSpec& cs) {
    BuiltModel<T> model;
    if constexpr (std::is_same_v<T, float>) model = build_construction_single(cs);
    else model = build_construction_double(cs);

    std::string out = out_of(cfg, "out/construct");
    ensure_dir(out);

    CheckpointMeta meta;
    meta.config_hash = config_hash(cfg.dump());
    meta.seed = seed_of(cfg);
    meta.iter = 0;
    meta.dtype = cs.dtype;
    meta.model_json = model_spec_to_json(model.spec);
    meta.extra_json = construction_extra(cs, model.readout, model.layout_json).dump();
    save_checkpoint(out + "/model.pls1", model.params, meta);

    ordered_json report = base_report("construct", cfg);
    report["kind"] = construction_name(cs.kind);
    report["emb"] = model.spec.emb;
    report["layers"] = model.spec.layers;
    report["checkpoint"] = out + "/model.pls1";

    std::size_t n_verify = cfg.value("verify", std::size_t{0});
    if (n_verify > 0) {
        SeededRng rng = SeededRng(seed_of(cfg)).substream(5);
        VerifyReport v = verify_built(model, cs, n_verify, rng);
        report["verify"] = {{"samples", n_verify}, {"mse", v.mse},
                            {"max_abs_err", v.max_abs_err}};
    }
    write_text(out + "/report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int cmd_construct(const std::string& config_json, const CliOverrides& ov) {
    return guard("construct", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config", {"seed", "dtype", "out", "construction", "verify"});
        if (!cfg.contains("construction"))
            throw ConfigError("construct requires a \"construction\" object");
        ConstructionSpec cs = construction_from_json(cfg.at("construction"), dtype_of_cfg(cfg));
        if (cs.dtype == Dtype::Double) return construct_impl<double>(cfg, cs);
        return construct_impl<float>(cfg, cs);
    });
}

namespace {

struct IterateRow {
    double mse = 0;
    std::size_t iters = 0;
    StopReason reason = StopReason::MaxIters;
};

template <typename T>
int iterate_impl(const json& cfg) {
    std::string evaluator = cfg.value("evaluator", std::string("oracle"));
    double eta = cfg.value("eta", 0.04);
    double tol = cfg.value("tol", 1e-12);
    std::size_t max_iters = cfg.value("max_iters", std::size_t{10000});
    std::size_t samples = cfg.value("samples", std::size_t{16});
    bool normalized = cfg.value("normalized", false);
    DistributionSpec dist =
        cfg.contains("dist") ? dist_from_json(cfg.at("dist")) : DistributionSpec{};

    GradFn<T> fn;
    if (evaluator == "oracle") {
        fn = oracle_grad_fn<T>(normalized);
    } else if (evaluator == "checkpoint") {
        if (!cfg.contains("checkpoint"))
            throw ConfigError("evaluator \"checkpoint\" requires \"checkpoint\"");
        LoadedModel<T> lm = load_model<T>(cfg.at("checkpoint").get<std::string>());
        fn = model_grad_fn<T>(lm);
    } else {
        throw ConfigError("unknown evaluator \"" + evaluator + "\" (use oracle or checkpoint)");
    }

    std::string out = out_of(cfg, "out/iterate");
    ensure_dir(out);

    std::vector<IterateRow> rows;
    std::string trace_csv = "iter,delta_norm,mse\n";
    double mse_sum = 0;
    std::size_t converged = 0, diverged = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        SeededRng rng = SeededRng(seed_of(cfg)).substream(s);
        auto inst = sample_instance<T>(dist, rng);
        IterationTrace<T> trace = iterative_solve(fn, inst, eta, tol, max_iters);
        double final_mse =
            trace.steps.empty() ? mse(inst.x0, inst.x_star) : trace.steps.back().mse_to_star;
        rows.push_back({final_mse, trace.steps.size(), trace.reason});
        if (trace.reason == StopReason::Diverged) {
            ++diverged;
        } else {
            mse_sum += final_mse;
            ++converged;
        }
        if (s == 0)
            for (const auto& st : trace.steps)
                trace_csv += std::to_string(st.iter) + "," + fmt_double(st.delta_norm) + "," +
                             fmt_double(st.mse_to_star) + "\n";
    }
    write_text(out + "/trace.csv", trace_csv);

    ordered_json report = base_report("iterate", cfg);
    report["evaluator"] = evaluator;
    report["samples"] = samples;
    report["eta"] = eta;
    report["mean_mse"] = converged ? mse_sum / static_cast<double>(converged) : 0.0;
    report["diverged_fraction"] = static_cast<double>(diverged) / static_cast<double>(samples);
    ordered_json per = ordered_json::array();
    for (const auto& r : rows)
        per.push_back({{"mse", r.mse}, {"iters", r.iters}, {"reason", stop_name(r.reason)}});
    report["per_sample"] = per;
    write_text(out + "/report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int cmd_iterate(const std::string& config_json, const CliOverrides& ov) {
    return guard("iterate", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config",
                   {"seed", "dtype", "out", "evaluator", "checkpoint", "eta", "tol", "max_iters",
                    "samples", "dist", "normalized"});
        Dtype dtype = dtype_of_cfg(cfg, Dtype::Double);
        if (cfg.contains("checkpoint") && !cfg.contains("dtype"))
            dtype = checkpoint_dtype(cfg.at("checkpoint").get<std::string>());
        if (dtype == Dtype::Single) return iterate_impl<float>(cfg);
        return iterate_impl<double>(cfg);
    });
}

namespace {

struct SweepRow {
    std::string evaluator;
    double sigma = 0;
    double mse_val = 0;
    double diverged_fraction = 0;
};

template <typename T>
SweepRow sweep_model_row(const json& cfg, const LoadedModel<T>& lm, const std::string& mode,
                         const DistributionSpec& base, double sigma, std::size_t samples) {
    SweepRow row;
    row.evaluator = "model";
    row.sigma = sigma;
    DistributionSpec dist = ood_spec(base, sigma);
    if (mode == "direct") {
        if (!lm.has_task) throw ConfigError("mode \"direct\" needs a task-trained checkpoint");
        TaskSpec task = lm.task;
        task.dist = dist;
        task.validate();
        PromptBatch<T> batch =
            make_batch<T>(task, samples, SeededRng(seed_of(cfg)).substream(8));
        row.mse_val = batch_loss(lm.spec, lm.params, batch);
        return row;
    }
    GradFn<T> fn = model_grad_fn<T>(lm);
    double eta = cfg.value("eta", 0.04);
    double tol = cfg.value("tol", 1e-12);
    std::size_t max_iters = cfg.value("max_iters", std::size_t{10000});
    double sum = 0;
    std::size_t ok = 0, bad = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        SeededRng rng = SeededRng(seed_of(cfg)).substream(s);
        auto inst = sample_instance<T>(dist, rng);
        IterationTrace<T> trace = iterative_solve(fn, inst, eta, tol, max_iters);
        if (trace.reason == StopReason::Diverged) {
            ++bad;
            continue;
        }
        sum += trace.steps.empty() ? mse(inst.x0, inst.x_star) : trace.steps.back().mse_to_star;
        ++ok;
    }
    row.mse_val = ok ? sum / static_cast<double>(ok) : 0.0;
    row.diverged_fraction = static_cast<double>(bad) / static_cast<double>(samples);
    return row;
}

SweepRow sweep_oracle_row(const json& cfg, const DistributionSpec& base, double sigma,
                          std::size_t samples) {
    SweepRow row;
    row.evaluator = "gd_oracle";
    row.sigma = sigma;
    DistributionSpec dist = ood_spec(base, sigma);
    double eta = cfg.value("eta", 0.04);
    double tol = cfg.value("tol", 1e-12);
    std::size_t max_iters = cfg.value("max_iters", std::size_t{10000});
    GradFn<double> fn = oracle_grad_fn<double>(false);
    double sum = 0;
    std::size_t ok = 0, bad = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        SeededRng rng = SeededRng(seed_of(cfg)).substream(s);
        auto inst = sample_instance<double>(dist, rng);
        IterationTrace<double> trace = iterative_solve(fn, inst, eta, tol, max_iters);
        if (trace.reason == StopReason::Diverged) {
            ++bad;
            continue;
        }
        sum += trace.steps.empty() ? mse(inst.x0, inst.x_star) : trace.steps.back().mse_to_star;
        ++ok;
    }
    row.mse_val = ok ? sum / static_cast<double>(ok) : 0.0;
    row.diverged_fraction = static_cast<double>(bad) / static_cast<double>(samples);
    return row;
}

template <typename T>
int sweep_impl(const json& cfg) {
    if (!cfg.contains("checkpoint")) throw ConfigError("sweep-ood requires \"checkpoint\"");
    LoadedModel<T> lm = load_model<T>(cfg.at("checkpoint").get<std::string>());
    std::string mode = cfg.value("mode", std::string("iterate"));
    if (mode != "iterate" && mode != "direct")
        throw ConfigError("unknown mode \"" + mode + "\" (use iterate or direct)");
    std::vector<double> sigmas =
        cfg.value("sigmas", std::vector<double>{1, 2, 4, 8, 10});
    std::size_t samples = cfg.value("samples", std::size_t{32});
    DistributionSpec base =
        cfg.contains("dist") ? dist_from_json(cfg.at("dist")) : DistributionSpec{};
    bool with_oracle = cfg.value("include_oracle_baseline", true);

    std::vector<SweepRow> rows;
    for (double sigma : sigmas) {
        rows.push_back(sweep_model_row(cfg, lm, mode, base, sigma, samples));
        if (with_oracle) rows.push_back(sweep_oracle_row(cfg, base, sigma, samples));
    }

    std::string out = out_of(cfg, "out/sweep");
    ensure_dir(out);
    std::string csv = "evaluator,sigma,mse,mse_over_sigma_sq,diverged_fraction\n";
    ordered_json jrows = ordered_json::array();
    for (const auto& r : rows) {
        double ratio = r.mse_val / (r.sigma * r.sigma);
        csv += r.evaluator + "," + fmt_double(r.sigma) + "," + fmt_double(r.mse_val) + "," +
               fmt_double(ratio) + "," + fmt_double(r.diverged_fraction) + "\n";
        jrows.push_back({{"evaluator", r.evaluator},
                         {"sigma", r.sigma},
                         {"mse", r.mse_val},
                         {"mse_over_sigma_sq", ratio},
                         {"diverged_fraction", r.diverged_fraction}});
    }
    write_text(out + "/sweep.csv", csv);

    ordered_json report = base_report("sweep-ood", cfg);
    report["mode"] = mode;
    report["samples"] = samples;
    report["rows"] = jrows;
    write_text(out + "/report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int cmd_sweep_ood(const std::string& config_json, const CliOverrides& ov) {
    return guard("sweep-ood", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config",
                   {"seed", "dtype", "out", "evaluator", "checkpoint", "mode", "sigmas",
                    "samples", "dist", "eta", "tol", "max_iters", "include_oracle_baseline"});
        if (!cfg.contains("checkpoint")) throw ConfigError("sweep-ood requires \"checkpoint\"");
        Dtype dtype = cfg.contains("dtype")
                          ? dtype_of_cfg(cfg)
                          : checkpoint_dtype(cfg.at("checkpoint").get<std::string>());
        if (dtype == Dtype::Single) return sweep_impl<float>(cfg);
        return sweep_impl<double>(cfg);
    });
}

namespace {

// Mean oracle MSE after `depth` GD iterates, over fresh instances.
double gd_reference_mse(const TaskSpec& task, std::size_t depth, std::uint64_t seed) {
    double sum = 0;
    std::size_t count = 32;
    for (std::size_t s = 0; s < count; ++s) {
        SeededRng rng = SeededRng(seed).substream(9).substream(s);
        auto inst = sample_instance<double>(task.dist, rng);
        try {
            Tensor<double> xk = gd_oracle(inst.a, inst.b, inst.x0, task.eta, depth,
                                          task.normalized);
            sum += mse(xk, inst.x_star);
        } catch (const DivergenceError&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    }
    return sum / static_cast<double>(count);
}

}  // namespace

int cmd_depth_sweep(const std::string& config_json, const CliOverrides& ov) {
    return guard("depth-sweep", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config", {"seed", "dtype", "out", "model", "task", "train", "depths"});
        std::vector<int> depths = cfg.value("depths", std::vector<int>{1, 2, 3, 4});
        if (depths.empty()) throw ConfigError("depth-sweep needs at least one depth");

        std::string out = out_of(cfg, "out/depth");
        ensure_dir(out);

        std::string csv = "depth,final_mse,best_mse,diverged,gd_reference_mse\n";
        ordered_json jrows = ordered_json::array();
        for (int depth : depths) {
            json run = cfg;
            run.erase("depths");
            run["model"]["layers"] = depth;
            TrainConfig tc = train_config_from_json(run);

            double final_loss = 0, best_loss = 0;
            bool diverged = false;
            auto take = [&](auto&& r) {
                final_loss = r.final_loss;
                best_loss = r.best_loss;
                diverged = r.diverged;
            };
            MetricsSink null_sink = [](const MetricsRecord&) {};
            if (tc.dtype == Dtype::Double) take(train<double>(tc, null_sink));
            else take(train<float>(tc, null_sink));

            bool ls_family = tc.task.kind == TaskKind::LeastSquares ||
                             tc.task.kind == TaskKind::KIter ||
                             tc.task.kind == TaskKind::Gradient;
            TaskSpec ref_task = tc.task;
            ref_task.k = static_cast<std::size_t>(depth);
            double ref = ls_family ? gd_reference_mse(ref_task, static_cast<std::size_t>(depth),
                                                      tc.seed)
                                   : std::numeric_limits<double>::quiet_NaN();

            csv += std::to_string(depth) + "," + fmt_double(final_loss) + "," +
                   fmt_double(best_loss) + "," + (diverged ? "1" : "0") + "," +
                   (std::isnan(ref) ? "" : fmt_double(ref)) + "\n";
            ordered_json row;
            row["depth"] = depth;
            row["final_mse"] = final_loss;
            row["best_mse"] = best_loss;
            row["diverged"] = diverged;
            if (!std::isnan(ref)) row["gd_reference_mse"] = ref;
            jrows.push_back(row);
        }
        write_text(out + "/depths.csv", csv);

        ordered_json report = base_report("depth-sweep", cfg);
        report["rows"] = jrows;
        write_text(out + "/report.json", report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return kExitOk;
    });
}

int cmd_gradcheck(const std::string& config_json, const CliOverrides& ov) {
    return guard("gradcheck", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config", {"seed", "out", "eps", "threshold", "corrupt", "model"});
        double eps = cfg.value("eps", 1e-5);
        double threshold = cfg.value("threshold", 1e-5);
        bool corrupt = cfg.value("corrupt", false);

        ModelSpec spec;
        if (cfg.contains("model")) {
            check_model_keys(cfg.at("model"));
            spec = model_spec_from_json(cfg.at("model").dump());
        } else {
            spec.arch = Arch::BaseConv;
            spec.layers = 2;
            spec.emb = 8;
            spec.seq_len = 6;
            spec.in_dim = 4;
            spec.out_dim = 4;
        }
        spec.validate();

        SeededRng rng(seed_of(cfg));
        SeededRng init_rng = rng.substream(1);
        ParamStore<double> params = init_params<double>(spec, InitScheme::GaussianScaled,
                                                        init_rng);
        SeededRng data_rng = rng.substream(2);
        Tensor<double> input = gaussian<double>(data_rng, {static_cast<std::size_t>(spec.seq_len),
                                                           static_cast<std::size_t>(spec.in_dim)});
        Tensor<double> target = gaussian<double>(
            data_rng, {static_cast<std::size_t>(spec.seq_len),
                       static_cast<std::size_t>(spec.out_dim)});

        Tape<double> tape;
        std::vector<int> ids = bind_params(tape, params, true);
        int in_id = tape.leaf(input);
        int out_id = model_forward(tape, spec, ids, in_id);
        int target_id = tape.leaf(target);
        int loss_id = tape.mse_loss(out_id, target_id);
        GradStore<double> ad = tape.backward(loss_id);
        if (corrupt && !ad.items.empty() && !ad.items[0].second.data.empty())
            ad.items[0].second.data[0] += 1.0;

        auto loss_fn = [&](const ParamStore<double>& p) {
            Tensor<double> out = model_eval(spec, p, input);
            return mse(out, target);
        };
        GradStore<double> fd = finite_diff_grad<double>(loss_fn, params, eps);

        double max_rel = 0;
        std::string worst;
        for (std::size_t i = 0; i < ad.items.size(); ++i) {
            const auto& a = ad.items[i].second;
            const auto& f = fd.items[i].second;
            for (std::size_t e = 0; e < a.data.size(); ++e) {
                double da = a.data[e], df = f.data[e];
                double rel = std::abs(da - df) /
                             std::max({std::abs(da), std::abs(df), 1e-12});
                if (rel > max_rel) {
                    max_rel = rel;
                    worst = ad.items[i].first;
                }
            }
        }

        ordered_json report = base_report("gradcheck", cfg);
        report["eps"] = eps;
        report["threshold"] = threshold;
        report["max_rel_err"] = max_rel;
        report["worst_param"] = worst;
        report["pass"] = max_rel <= threshold;
        if (cfg.contains("out")) {
            std::string out = cfg.at("out").get<std::string>();
            ensure_dir(out);
            write_text(out + "/report.json", report.dump(2) + "\n");
        }
        std::cout << report.dump(2) << "\n";
        return max_rel <= threshold ? kExitOk : kExitGradCheck;
    });
}

int cmd_oracle(const std::string& config_json, const CliOverrides& ov) {
    return guard("oracle", [&] {
        json cfg = parse_config(config_json);
        apply_overrides(cfg, ov);
        check_keys(cfg, "config",
                   {"seed", "out", "kind", "dist", "k", "eta", "steps", "normalized"});
        std::string kind = cfg.value("kind", std::string("gd"));
        DistributionSpec dist =
            cfg.contains("dist") ? dist_from_json(cfg.at("dist")) : DistributionSpec{};
        SeededRng rng = SeededRng(seed_of(cfg)).substream(6);
        auto inst = sample_instance<double>(dist, rng);

        ordered_json report = base_report("oracle", cfg);
        report["kind"] = kind;
        if (kind == "gd") {
            std::size_t k = cfg.value("k", std::size_t{1});
            double eta = cfg.value("eta", inst.eta);
            bool normalized = cfg.value("normalized", false);
            Tensor<double> xk = gd_oracle(inst.a, inst.b, inst.x0, eta, k, normalized);
            report["k"] = k;
            report["eta"] = eta;
            report["x"] = xk.data;
            report["mse_to_star"] = mse(xk, inst.x_star);
        } else if (kind == "grad") {
            bool normalized = cfg.value("normalized", false);
            Tensor<double> g = grad_oracle(inst.a, inst.b, inst.x0, normalized);
            report["grad"] = g.data;
        } else if (kind == "ols") {
            Tensor<double> x = ols_solve(inst.a, inst.b);
            report["x"] = x.data;
            report["mse_to_star"] = mse(x, inst.x_star);
        } else if (kind == "newton") {
            std::size_t steps = cfg.value("steps", std::size_t{8});
            std::vector<double> residuals;
            Tensor<double> m = newton_oracle(inst.a, steps, &residuals);
            report["steps"] = steps;
            report["residuals"] = residuals;
            Tensor<double> x = matvec(m, matvec(transpose(inst.a), inst.b));
            report["mse_to_star"] = mse(x, inst.x_star);
        } else {
            throw ConfigError("unknown oracle kind \"" + kind +
                              "\" (use gd, grad, ols, or newton)");
        }
        if (cfg.contains("out")) {
            std::string out = cfg.at("out").get<std::string>();
            ensure_dir(out);
            write_text(out + "/report.json", report.dump(2) + "\n");
        }
        std::cout << report.dump(2) << "\n";
        return kExitOk;
    });
}

#define PLS_INSTANTIATE_HARNESS(T)                                                            \
    template GradFn<T> oracle_grad_fn<T>(bool);                                              \
    template GradFn<T> construction_grad_fn<T>(const BuiltModel<T>&);                        \
    template IterationTrace<T> iterative_solve<T>(const GradFn<T>&,                          \
                                                  const LeastSquaresInstance<T>&, double,    \
                                                  double, std::size_t);                      \
    template LoadedModel<T> load_model<T>(const std::string&);                               \
    template GradFn<T> model_grad_fn<T>(const LoadedModel<T>&);

PLS_INSTANTIATE_HARNESS(float)
PLS_INSTANTIATE_HARNESS(double)

#undef PLS_INSTANTIATE_HARNESS

}  // namespace pls
