#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pls/checkpoint.hpp"
#include "pls/constructions.hpp"
#include "pls/errors.hpp"
#include "pls/harness.hpp"
#include "pls/linalg.hpp"
#include "pls/models.hpp"
#include "pls/rng.hpp"
#include "pls/tasks.hpp"
#include "pls/tensor.hpp"

using namespace pls;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("pls_harness_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// metrics lines with the timing field stripped, for run-to-run comparison
std::vector<std::string> metrics_without_wall(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        j.erase("wall_ms");
        out.push_back(j.dump());
    }
    return out;
}

const char* kTrainCfg = R"({
  "seed": 5,
  "dtype": "double",
  "model": {"arch": "baseconv", "layers": 1, "emb": 8, "seq_len": 4, "in_dim": 4,
            "out_dim": 1, "causal": false, "residual": false},
  "task": {"kind": "linear", "n": 4, "d": 4,
           "h_matrix": {"rows": 4, "cols": 1, "data": [1.0, 2.0, -1.0, 0.5]}},
  "train": {"batch_size": 8, "total_iters": 12, "log_interval": 3,
            "scheduler": {"kind": "constant", "lr0": 0.02},
            "ema": {"enabled": false}}
})";

}  // namespace

TEST_CASE("stop reasons have stable names") {
    CHECK(std::string(stop_name(StopReason::Tol)) == "tol");
    CHECK(std::string(stop_name(StopReason::MaxIters)) == "max_iters");
    CHECK(std::string(stop_name(StopReason::Diverged)) == "diverged");
}

TEST_CASE("config hashes are canonical over key order and sensitive to values") {
    const std::string h1 = config_hash(R"({"a": 1, "b": {"x": 2, "y": 3}})");
    const std::string h2 = config_hash(R"({"b": {"y": 3, "x": 2}, "a": 1})");
    const std::string h3 = config_hash(R"({"a": 1, "b": {"x": 2, "y": 4}})");
    CHECK(h1.size() == 16);
    CHECK(h1.find_first_not_of("0123456789abcdef") == std::string::npos);
    CHECK(h1 == h2);
    CHECK(h1 != h3);
    CHECK(config_hash("{ }") == config_hash(""));
}

TEST_CASE("the oracle-driven iterator retraces gd_oracle bit for bit") {
    DistributionSpec dist;
    SeededRng rng(21);
    auto inst = sample_instance<double>(dist, rng);
    const std::size_t k = 40;

    std::vector<Tensor<double>> ref;
    auto xk = gd_oracle(inst.a, inst.b, inst.x0, inst.eta, k, false, &ref);

    auto trace = iterative_solve(oracle_grad_fn<double>(), inst, inst.eta, 0.0, k);
    REQUIRE(trace.steps.size() == k);
    CHECK(trace.reason == StopReason::MaxIters);
    CHECK(trace.x.data == xk.data);
    for (std::size_t i = 0; i < k; ++i) {
        CHECK(trace.steps[i].iter == i + 1);
        CHECK(trace.steps[i].mse_to_star == mse(ref[i], inst.x_star));
    }
}

TEST_CASE("starting at the solution stops on the first step") {
    DistributionSpec dist;
    SeededRng rng(22);
    auto inst = sample_instance<double>(dist, rng);
    inst.x0 = inst.x_star;
    auto trace = iterative_solve(oracle_grad_fn<double>(), inst, inst.eta);
    CHECK(trace.reason == StopReason::Tol);
    CHECK(trace.steps.size() == 1);
    CHECK(mse(trace.x, inst.x_star) < 1e-28);
}

TEST_CASE("an unstable step size is reported as divergence, not an error") {
    DistributionSpec dist;
    SeededRng rng(23);
    auto inst = sample_instance<double>(dist, rng);
    auto trace = iterative_solve(oracle_grad_fn<double>(), inst, 1.0, 1e-12, 5000);
    CHECK(trace.reason == StopReason::Diverged);
    CHECK(trace.steps.size() < 5000);
}

TEST_CASE("checkpoints round-trip bit-exactly and rewrite byte-identically") {
    const std::string dir = fresh_dir("ckpt");
    ParamStore<double> params;
    SeededRng rng(31);
    params.add("layers.0.w", gaussian<double>(rng, {5, 3}, 1.0));
    params.add("layers.0.b", gaussian<double>(rng, {1, 3}, 1.0));

    CheckpointMeta meta;
    meta.config_hash = "00ff00ff00ff00ff";
    meta.seed = 31;
    meta.iter = 7;
    meta.dtype = Dtype::Double;
    meta.model_json = R"({"arch":"baseconv"})";
    meta.extra_json = R"({"kind":"test"})";

    const std::string p1 = dir + "/a.pls1", p2 = dir + "/b.pls1";
    save_checkpoint(p1, params, meta);
    auto back = read_params<double>(p1);
    REQUIRE(back.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(back.items[i].first == params.items[i].first);
        CHECK(back.items[i].second.data == params.items[i].second.data);
    }
    save_checkpoint(p2, back, meta);
    CHECK(slurp(p1) == slurp(p2));

    CHECK(checkpoint_dtype(p1) == Dtype::Double);
    auto m = read_manifest(p1);
    CHECK(m.config_hash == meta.config_hash);
    CHECK(m.seed == 31);
    CHECK(m.iter == 7);
    CHECK(json::parse(m.extra_json)["kind"] == "test");
}

TEST_CASE("construct writes a loadable checkpoint that knows what it is") {
    const std::string dir = fresh_dir("construct");
    const std::string cfg = R"({"seed": 1, "dtype": "double", "out": ")" + dir + R"(",
        "verify": 4,
        "construction": {"kind": "gd_noncausal", "n": 8, "d": 3, "k": 2, "eta": 0.04}})";
    REQUIRE(cmd_construct(cfg, {}) == kExitOk);

    auto lm = load_model<double>(dir + "/model.pls1");
    CHECK(lm.is_construction);
    CHECK(lm.ckind == ConstructionKind::GdNoncausal);
    CHECK(lm.n == 8);
    CHECK(lm.d == 3);
    CHECK(lm.k == 2);
    CHECK_FALSE(lm.emit_gradient);
    CHECK(lm.readout.c1 - lm.readout.c0 == 3);

    // iterate-emitting checkpoints cannot serve as gradient evaluators
    try {
        model_grad_fn(lm);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("emit_gradient") != std::string::npos);
    }

    json report = json::parse(slurp(dir + "/report.json"));
    CHECK(report["command"] == "construct");
    CHECK(report["verify"]["mse"].get<double>() < 1e-20);
}

TEST_CASE("a gradient-emitting construction matches the analytic gradient in the loop") {
    ConstructionSpec cs;
    cs.kind = ConstructionKind::GdNoncausal;
    cs.n = 8;
    cs.d = 3;
    cs.k = 1;
    cs.eta = 0.04;
    cs.gd.emit_gradient = true;
    cs.dtype = Dtype::Double;
    auto model = build_construction_double(cs);

    DistributionSpec dist;
    dist.n = 8;
    dist.d = 3;
    SeededRng rng(41);
    auto inst = sample_instance<double>(dist, rng);

    auto ref = iterative_solve(oracle_grad_fn<double>(), inst, inst.eta, 1e-12, 600);
    auto got = iterative_solve(construction_grad_fn(model), inst, inst.eta, 1e-12, 600);
    CHECK(got.steps.size() == ref.steps.size());
    CHECK(max_abs_diff(got.x, ref.x) < 1e-10);
    CHECK(mse(got.x, inst.x_star) < 1e-20);
}

TEST_CASE("train writes its artifacts and reruns to identical metrics") {
    const std::string d1 = fresh_dir("train1"), d2 = fresh_dir("train2");
    json cfg = json::parse(kTrainCfg);
    cfg["out"] = d1;
    REQUIRE(cmd_train(cfg.dump(), {}) == kExitOk);
    cfg["out"] = d2;
    REQUIRE(cmd_train(cfg.dump(), {}) == kExitOk);

    for (const std::string& d : {d1, d2}) {
        CHECK(fs::exists(d + "/metrics.jsonl"));
        CHECK(fs::exists(d + "/final.pls1"));
        CHECK(fs::exists(d + "/final.pls1.json"));
        CHECK(fs::exists(d + "/best.pls1"));
        CHECK(fs::exists(d + "/report.json"));
    }
    CHECK(metrics_without_wall(d1 + "/metrics.jsonl") ==
          metrics_without_wall(d2 + "/metrics.jsonl"));
    CHECK(slurp(d1 + "/final.pls1") == slurp(d2 + "/final.pls1"));
    CHECK(slurp(d1 + "/best.pls1") == slurp(d2 + "/best.pls1"));

    // the only difference between the runs is the output path in the config
    json r1 = json::parse(slurp(d1 + "/report.json"));
    json r2 = json::parse(slurp(d2 + "/report.json"));
    r1.erase("config_hash");
    r2.erase("config_hash");
    CHECK(r1 == r2);

    json report = json::parse(slurp(d1 + "/report.json"));
    CHECK(report["status"] == "ok");
    CHECK(report["iters_run"] == 12);
    cfg["out"] = d1;
    CHECK(report["config_hash"] == config_hash(cfg.dump()));

    auto lm = load_model<double>(d1 + "/final.pls1");
    CHECK_FALSE(lm.is_construction);
    CHECK(lm.has_task);
    CHECK(lm.task.kind == TaskKind::Linear);
    CHECK_THROWS_AS(model_grad_fn(lm), ConfigError);  // not a gradient evaluator
}

TEST_CASE("train distinguishes config errors from divergence in its exit code") {
    CHECK(cmd_train("this is not json", {}) == kExitConfig);
    CHECK(cmd_train(R"({"bogus": 1})", {}) == kExitConfig);

    json cfg = json::parse(kTrainCfg);
    cfg["train"]["scheduler"]["lr0"] = 50.0;
    cfg["train"]["total_iters"] = 400;
    cfg["out"] = fresh_dir("train_div");
    CHECK(cmd_train(cfg.dump(), {}) == kExitDiverged);
    json report = json::parse(slurp(cfg["out"].get<std::string>() + "/report.json"));
    CHECK(report["status"] == "diverged");
    CHECK(report.contains("abort_reason"));
}

TEST_CASE("eval scores a trained checkpoint and enforces the stored dtype") {
    const std::string tdir = fresh_dir("eval_train");
    json cfg = json::parse(kTrainCfg);
    cfg["out"] = tdir;
    cfg["train"]["total_iters"] = 150;
    REQUIRE(cmd_train(cfg.dump(), {}) == kExitOk);

    const std::string edir = fresh_dir("eval_out");
    json ecfg = {{"seed", 9}, {"out", edir}, {"checkpoint", tdir + "/best.pls1"},
                 {"samples", 16}};
    REQUIRE(cmd_eval(ecfg.dump(), {}) == kExitOk);
    json report = json::parse(slurp(edir + "/report.json"));
    CHECK(report["mse"].get<double>() < 10.0);
    CHECK(report["samples"] == 16);

    ecfg["dtype"] = "single";
    CHECK(cmd_eval(ecfg.dump(), {}) == kExitConfig);
    CHECK(cmd_eval(R"({"out": "x"})", {}) == kExitConfig);  // no checkpoint
}

TEST_CASE("gradcheck passes clean and trips its exit code when corrupted") {
    const std::string dir = fresh_dir("gradcheck");
    json cfg = {{"seed", 3}, {"out", dir},
                {"model", {{"arch", "baseconv"}, {"layers", 1}, {"emb", 6}, {"seq_len", 4},
                           {"in_dim", 3}, {"out_dim", 3}, {"causal", false}}}};
    CHECK(cmd_gradcheck(cfg.dump(), {}) == kExitOk);
    json report = json::parse(slurp(dir + "/report.json"));
    CHECK(report["max_rel_err"].get<double>() <= 1e-5);

    cfg["corrupt"] = true;
    cfg["out"] = fresh_dir("gradcheck_bad");
    CHECK(cmd_gradcheck(cfg.dump(), {}) == kExitGradCheck);
}

TEST_CASE("iterate drives a gradient-emitting checkpoint to the solution") {
    const std::string cdir = fresh_dir("iter_construct");
    json ccfg = {{"seed", 2}, {"dtype", "double"}, {"out", cdir},
                 {"construction", {{"kind", "gd_noncausal"}, {"n", 8}, {"d", 3}, {"k", 1},
                                   {"eta", 0.04}, {"emit_gradient", true}}}};
    REQUIRE(cmd_construct(ccfg.dump(), {}) == kExitOk);

    const std::string idir = fresh_dir("iter_out");
    json icfg = {{"seed", 7}, {"out", idir}, {"evaluator", "checkpoint"},
                 {"checkpoint", cdir + "/model.pls1"}, {"samples", 3},
                 {"dist", {{"n", 8}, {"d", 3}}}, {"max_iters", 2000}};
    REQUIRE(cmd_iterate(icfg.dump(), {}) == kExitOk);

    json report = json::parse(slurp(idir + "/report.json"));
    CHECK(report["mean_mse"].get<double>() < 1e-11);
    CHECK(report["diverged_fraction"].get<double>() == 0.0);
    CHECK(report["per_sample"].size() == 3);
    CHECK(fs::exists(idir + "/trace.csv"));

    const std::string header = slurp(idir + "/trace.csv").substr(0, 19);
    CHECK(header == "iter,delta_norm,mse");
}

TEST_CASE("the oracle command reports newton residuals that collapse quadratically") {
    const std::string dir = fresh_dir("oracle_newton");
    json cfg = {{"seed", 4}, {"out", dir}, {"kind", "newton"}, {"steps", 30},
                {"dist", {{"n", 10}, {"d", 4}}}};
    REQUIRE(cmd_oracle(cfg.dump(), {}) == kExitOk);
    json report = json::parse(slurp(dir + "/report.json"));
    auto resid = report["residuals"].get<std::vector<double>>();
    REQUIRE(resid.size() == 30);
    CHECK(resid.back() < 1e-10);
    CHECK(cmd_oracle(R"({"kind": "frobnicate"})", {}) == kExitConfig);
}

TEST_CASE("unknown keys are rejected across commands") {
    CHECK(cmd_eval(R"({"checkpoint": "x", "extra": 1})", {}) == kExitConfig);
    CHECK(cmd_construct(R"({"construction": {"kind": "read"}, "foo": 2})", {}) == kExitConfig);
    CHECK(cmd_iterate(R"({"samples": 1, "betamax": true})", {}) == kExitConfig);
    CHECK(cmd_sweep_ood(R"({"nonsense": []})", {}) == kExitConfig);
    CHECK(cmd_depth_sweep(R"({"depth": [1]})", {}) == kExitConfig);
    CHECK(cmd_gradcheck(R"({"epsilon": 1e-5})", {}) == kExitConfig);
    CHECK(cmd_oracle(R"({"step": 3})", {}) == kExitConfig);
    CHECK(cmd_train(R"([1, 2, 3])", {}) == kExitConfig);  // not an object
}

TEST_CASE("cli overrides replace seed, output directory and dtype") {
    const std::string dir = fresh_dir("override");
    CliOverrides ov;
    ov.out = dir;
    ov.seed = 77;
    json cfg = {{"kind", "gd"}, {"k", 3}, {"out", "somewhere/else"}, {"seed", 1}};
    REQUIRE(cmd_oracle(cfg.dump(), ov) == kExitOk);
    CHECK(fs::exists(dir + "/report.json"));
    json report = json::parse(slurp(dir + "/report.json"));

    json effective = cfg;  // the hash covers the post-override view of the run
    effective["seed"] = 77;
    effective["out"] = dir;
    CHECK(report["config_hash"] == config_hash(effective.dump()));
}
