#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pls/errors.hpp"
#include "pls/linalg.hpp"
#include "pls/models.hpp"
#include "pls/rng.hpp"
#include "pls/tasks.hpp"
#include "pls/tensor.hpp"
#include "pls/training.hpp"

using namespace pls;

namespace {

ParamStore<double> tiny_params() {
    ParamStore<double> p;
    p.add("w", Tensor<double>({2, 2}, {1.0, -2.0, 0.5, 3.0}));
    p.add("b", Tensor<double>({1, 2}, {0.25, -0.75}));
    return p;
}

GradStore<double> grads_like(const ParamStore<double>& p, double fill) {
    GradStore<double> g;
    for (const auto& kv : p.items) {
        Tensor<double> t = Tensor<double>::zeros(kv.second.dims);
        for (auto& x : t.data) x = fill;
        g.add(kv.first, std::move(t));
    }
    return g;
}

GradStore<double> vec_grad(std::vector<double> v) {
    GradStore<double> g;
    g.add("w", Tensor<double>({v.size()}, v));
    return g;
}

bool same_bits(const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].data.size() != b[i].data.size()) return false;
        for (std::size_t j = 0; j < a[i].data.size(); ++j)
            if (a[i].data[j] != b[i].data[j]) return false;
    }
    return true;
}

bool same_bits(const ParamStore<double>& a, const ParamStore<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.items[i].first != b.items[i].first) return false;
        if (a.items[i].second.data != b.items[i].second.data) return false;
    }
    return true;
}

TrainConfig small_linear_config() {
    TrainConfig cfg;
    cfg.model.arch = Arch::BaseConv;
    cfg.model.layers = 1;
    cfg.model.emb = 8;
    cfg.model.seq_len = 4;
    cfg.model.in_dim = 4;
    cfg.model.out_dim = 1;
    cfg.model.causal = false;
    cfg.model.residual = false;
    cfg.task.kind = TaskKind::Linear;
    cfg.task.n = 4;
    cfg.task.d = 4;
    cfg.task.h_matrix = Tensor<double>({4, 1}, {1.0, 2.0, -1.0, 0.5});
    cfg.batch_size = 8;
    cfg.total_iters = 20;
    cfg.probe_count = 2;
    cfg.log_interval = 1;
    cfg.dtype = Dtype::Double;
    cfg.scheduler.kind = SchedulerKind::Constant;
    cfg.scheduler.lr0 = 0.02;
    cfg.ema_enabled = false;
    return cfg;
}

}  // namespace

TEST_CASE("adam's first update is lr times the sign of the gradient") {
    auto params = tiny_params();
    auto state = make_adam(params, 0.01);
    GradStore<double> g;
    g.add("w", Tensor<double>({2, 2}, {3.0, -0.5, 1e-3, -40.0}));
    g.add("b", Tensor<double>({1, 2}, {2.0, -2.0}));
    auto u = adam_step(state, g);
    REQUIRE(u.size() == 2);
    for (std::size_t p = 0; p < u.size(); ++p)
        for (std::size_t i = 0; i < u[p].data.size(); ++i) {
            const double gi = g.items[p].second.data[i];
            const double want = 0.01 * gi / (std::abs(gi) + 1e-8);
            CHECK(u[p].data[i] == doctest::Approx(want).epsilon(1e-12));
            CHECK(std::abs(u[p].data[i]) <= 0.01 * (1 + 1e-12));
        }
    CHECK(state.t == 1);
}

TEST_CASE("adam maps a zero gradient to a zero update") {
    auto params = tiny_params();
    auto state = make_adam(params, 0.5);
    auto u = adam_step(state, grads_like(params, 0.0));
    for (const auto& t : u)
        for (double x : t.data) CHECK(x == 0.0);
}

TEST_CASE("adam is bit-deterministic across fresh runs") {
    auto params = tiny_params();
    SeededRng rng(11);
    GradStore<double> g;
    for (const auto& kv : params.items)
        g.add(kv.first, gaussian<double>(rng, kv.second.dims, 1.0));

    auto s1 = make_adam(params, 0.003);
    auto s2 = make_adam(params, 0.003);
    std::vector<Tensor<double>> u1, u2;
    for (int i = 0; i < 5; ++i) {
        u1 = adam_step(s1, g);
        u2 = adam_step(s2, g);
    }
    CHECK(same_bits(u1, u2));
}

TEST_CASE("adam rejects non-finite gradients, naming the tensor and step") {
    auto params = tiny_params();
    auto state = make_adam(params, 0.01);
    adam_step(state, grads_like(params, 0.5));
    auto bad = grads_like(params, 0.5);
    bad.at("b").data[1] = std::nan("");
    try {
        adam_step(state, bad);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("'b'") != std::string::npos);
        CHECK(msg.find("step 2") != std::string::npos);
    }
    CHECK(state.t == 1);  // the failed step did not advance the clock
}

TEST_CASE("adam rejects a gradient list of the wrong arity") {
    auto params = tiny_params();
    auto state = make_adam(params, 0.01);
    GradStore<double> g;
    g.add("w", Tensor<double>::zeros({2, 2}));
    CHECK_THROWS_AS(adam_step(state, g), DimensionError);
}

TEST_CASE("a disabled ema filter passes updates through untouched") {
    auto params = tiny_params();
    auto ema = make_ema(params, 0.98, 2.0, false, false);
    SeededRng rng(3);
    std::vector<Tensor<double>> u;
    for (const auto& kv : params.items) u.push_back(gaussian<double>(rng, kv.second.dims, 1.0));
    auto applied = ema_filter(ema, u);
    CHECK(same_bits(applied, u));
}

TEST_CASE("ema with lambda zero reduces to the raw update") {
    auto params = tiny_params();
    auto ema = make_ema(params, 0.9, 0.0, true, false);
    SeededRng rng(5);
    for (int step = 0; step < 4; ++step) {
        std::vector<Tensor<double>> u;
        for (const auto& kv : params.items) u.push_back(gaussian<double>(rng, kv.second.dims, 1.0));
        auto applied = ema_filter(ema, u);
        CHECK(same_bits(applied, u));
    }
    // the running average still tracked the updates
    double acc = 0;
    for (const auto& t : ema.ema)
        for (double x : t.data) acc += std::abs(x);
    CHECK(acc > 0);
}

TEST_CASE("ema first step amplifies by exactly 1 + lambda (1 - decay)") {
    auto params = tiny_params();
    const double decay = 0.75, lambda = 2.0;
    auto ema = make_ema(params, decay, lambda, true, false);
    std::vector<Tensor<double>> u;
    SeededRng rng(7);
    for (const auto& kv : params.items) u.push_back(gaussian<double>(rng, kv.second.dims, 1.0));
    auto applied = ema_filter(ema, u);
    const double gain = 1.0 + lambda * (1.0 - decay);
    for (std::size_t p = 0; p < u.size(); ++p)
        for (std::size_t i = 0; i < u[p].data.size(); ++i)
            CHECK(applied[p].data[i] == doctest::Approx(gain * u[p].data[i]).epsilon(1e-14));
}

TEST_CASE("ema under a constant update converges to (1 + lambda) u") {
    auto params = tiny_params();
    const double lambda = 2.0;
    auto ema = make_ema(params, 0.9, lambda, true, false);
    auto u = std::vector<Tensor<double>>();
    for (const auto& kv : params.items) {
        Tensor<double> t = Tensor<double>::zeros(kv.second.dims);
        for (auto& x : t.data) x = 0.125;
        u.push_back(std::move(t));
    }
    std::vector<Tensor<double>> applied;
    for (int step = 0; step < 400; ++step) applied = ema_filter(ema, u);
    for (const auto& t : applied)
        for (double x : t.data)
            CHECK(x == doctest::Approx((1.0 + lambda) * 0.125).epsilon(1e-10));
}

TEST_CASE("ema replace mode returns the running average itself") {
    auto params = tiny_params();
    auto ema = make_ema(params, 0.5, 2.0, true, true);
    std::vector<Tensor<double>> u;
    for (const auto& kv : params.items) {
        Tensor<double> t = Tensor<double>::zeros(kv.second.dims);
        for (auto& x : t.data) x = 1.0;
        u.push_back(std::move(t));
    }
    auto a1 = ema_filter(ema, u);  // ema = 0.5
    auto a2 = ema_filter(ema, u);  // ema = 0.75
    for (const auto& t : a1)
        for (double x : t.data) CHECK(x == 0.5);
    for (const auto& t : a2)
        for (double x : t.data) CHECK(x == 0.75);
}

TEST_CASE("make_ema rejects decay outside [0, 1)") {
    auto params = tiny_params();
    CHECK_THROWS_AS(make_ema(params, 1.0, 2.0, true, false), ConfigError);
    CHECK_THROWS_AS(make_ema(params, -0.1, 2.0, true, false), ConfigError);
}

TEST_CASE("apply_update subtracts the applied step from the parameters") {
    auto params = tiny_params();
    auto before = params;
    std::vector<Tensor<double>> step;
    for (const auto& kv : params.items) {
        Tensor<double> t = Tensor<double>::zeros(kv.second.dims);
        for (auto& x : t.data) x = 0.5;
        step.push_back(std::move(t));
    }
    apply_update(params, step);
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params.items[p].second.data.size(); ++i)
            CHECK(params.items[p].second.data[i] ==
                  before.items[p].second.data[i] - 0.5);
}

TEST_CASE("sigma_g hits the analytic values for aligned, orthogonal and opposed pairs") {
    auto e1 = vec_grad({1.0, 0.0});
    auto e1b = vec_grad({2.5, 0.0});
    auto e2 = vec_grad({0.0, 3.0});
    auto m1 = vec_grad({-4.0, 0.0});

    CHECK(sigma_g(std::vector<GradStore<double>>{e1, e1b}).value == doctest::Approx(1.0));
    CHECK(sigma_g(std::vector<GradStore<double>>{e1, e2}).value == doctest::Approx(0.0));
    CHECK(sigma_g(std::vector<GradStore<double>>{e1, m1}).value == doctest::Approx(-1.0));
}

TEST_CASE("sigma_g is invariant to per-gradient rescaling") {
    SeededRng rng(9);
    GradStore<double> a, b, c;
    a.add("w", gaussian<double>(rng, {6}, 1.0));
    b.add("w", gaussian<double>(rng, {6}, 1.0));
    c.add("w", gaussian<double>(rng, {6}, 1.0));
    const double base = sigma_g(std::vector<GradStore<double>>{a, b, c}).value;

    GradStore<double> a10 = a;
    for (auto& x : a10.at("w").data) x *= 10.0;
    const double scaled = sigma_g(std::vector<GradStore<double>>{a10, b, c}).value;
    CHECK(scaled == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("sigma_g flags zero-norm members and keeps the full pair count") {
    auto g = vec_grad({1.0, 0.0});
    auto z = vec_grad({0.0, 0.0});
    auto r = sigma_g(std::vector<GradStore<double>>{g, g, z});
    CHECK(r.zero_norm_seen);
    CHECK(r.zero_norm_count == 1);
    // one aligned pair out of three total pairs
    CHECK(r.value == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(sigma_g(std::vector<GradStore<double>>{g}), ConfigError);
}

TEST_CASE("the constant scheduler never moves") {
    SchedulerState s;
    s.kind = SchedulerKind::Constant;
    s.lr0 = 0.01;
    s.lr = s.lr0;
    for (std::size_t it = 0; it < 20; ++it)
        CHECK(scheduler_step(s, it, it % 5 == 0 ? std::optional<double>(0.9) : std::nullopt) ==
              0.01);
}

TEST_CASE("step decay follows lr0 * decay^floor(iter / step_rate) exactly") {
    SchedulerState s;
    s.kind = SchedulerKind::StepDecay;
    s.lr0 = 1.0;
    s.lr = s.lr0;
    s.step_rate = 5;
    s.decay = 0.5;  // powers of two stay exact
    for (std::size_t it = 0; it < 17; ++it) {
        const double got = scheduler_step(s, it, std::nullopt);
        CHECK(got == std::pow(0.5, static_cast<double>(it / 5)));
    }
}

TEST_CASE("the adaptive scheduler steps down on high sigma and back up on low") {
    SchedulerState s;
    s.kind = SchedulerKind::Adaptive;
    s.lr0 = 1.0;
    s.lr = s.lr0;
    s.step_rate = 4;
    s.decay = 0.5;
    s.sigma_th = 0.1;

    CHECK(scheduler_step(s, 0, 0.9) == 1.0);  // iteration zero never adjusts
    CHECK(scheduler_step(s, 1, std::nullopt) == 1.0);
    CHECK(scheduler_step(s, 4, 0.9) == 0.5);   // above threshold: decay
    CHECK(scheduler_step(s, 5, std::nullopt) == 0.5);
    CHECK(scheduler_step(s, 8, 0.01) == 1.0);  // below threshold: recover
    CHECK(scheduler_step(s, 12, 0.01) == 2.0);
}

TEST_CASE("the adaptive scheduler demands a probe at adjustment steps") {
    SchedulerState s;
    s.kind = SchedulerKind::Adaptive;
    s.lr0 = 1.0;
    s.lr = s.lr0;
    s.step_rate = 3;
    CHECK_THROWS_AS(scheduler_step(s, 3, std::nullopt), ConfigError);
}

TEST_CASE("scheduler names round-trip and reject unknowns") {
    for (auto k : {SchedulerKind::Constant, SchedulerKind::StepDecay, SchedulerKind::Adaptive})
        CHECK(scheduler_from_name(scheduler_name(k)) == k);
    CHECK_THROWS_AS(scheduler_from_name("cosine"), ConfigError);
}

TEST_CASE("metrics records serialize with a fixed field order") {
    MetricsRecord r;
    r.iter = 7;
    r.loss = 0.5;
    r.lr = 0.01;
    r.grad_norm = 2.0;
    r.wall_ms = 1.5;
    const std::string j = metrics_to_json(r);
    CHECK(j.find("{\"iter\":7,\"loss\":0.5,\"lr\":0.01,\"sigma_g\":null,\"grad_norm\":2.0") == 0);
    r.sigma = 0.25;
    CHECK(metrics_to_json(r).find("\"sigma_g\":0.25") != std::string::npos);
}

TEST_CASE("train config validation rejects bad shapes and settings") {
    auto cfg = small_linear_config();
    CHECK_NOTHROW(cfg.validate());

    auto bad = cfg;
    bad.probe_count = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.reduction = "sum";
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.scheduler.kind = SchedulerKind::Adaptive;
    bad.scheduler.step_rate = 10;
    bad.probe_interval = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.probe_interval = 10;
    CHECK_NOTHROW(bad.validate());

    bad = cfg;
    bad.model.out_dim = 3;
    try {
        bad.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("out_dim 3") != std::string::npos);
    }

    bad = cfg;
    bad.model.seq_len = 9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batch gradients agree with the tape-free loss and are reproducible") {
    auto cfg = small_linear_config();
    SeededRng init = SeededRng(1).substream(1);
    auto params = init_params<double>(cfg.model, InitScheme::GaussianScaled, init);
    auto batch = make_batch<double>(cfg.task, 4, SeededRng(2));

    auto bg1 = batch_forward_backward(cfg.model, params, batch);
    auto bg2 = batch_forward_backward(cfg.model, params, batch);
    CHECK(bg1.loss == bg2.loss);
    CHECK(same_bits(bg1.grads, bg2.grads));
    CHECK(bg1.loss == doctest::Approx(batch_loss(cfg.model, params, batch)).epsilon(1e-13));
}

TEST_CASE("training twice from the same config is bit-identical") {
    auto cfg = small_linear_config();
    cfg.total_iters = 12;
    std::vector<std::string> lines1, lines2;
    auto r1 = train<double>(cfg, [&](const MetricsRecord& r) {
        MetricsRecord c = r;
        c.wall_ms = 0;  // timing is the one nondeterministic field
        lines1.push_back(metrics_to_json(c));
    });
    auto r2 = train<double>(cfg, [&](const MetricsRecord& r) {
        MetricsRecord c = r;
        c.wall_ms = 0;
        lines2.push_back(metrics_to_json(c));
    });
    CHECK(same_bits(r1.params, r2.params));
    CHECK(same_bits(r1.best_params, r2.best_params));
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(r1.best_loss == r2.best_loss);
    CHECK(lines1 == lines2);
}

TEST_CASE("probe batches observe but never perturb the optimization path") {
    auto cfg = small_linear_config();
    cfg.total_iters = 16;
    cfg.probe_interval = 5;  // probes fire at 5, 10, 15
    auto probed = train<double>(cfg, nullptr);

    cfg.probe_interval = 10000;  // never fires
    auto bare = train<double>(cfg, nullptr);

    CHECK(same_bits(probed.params, bare.params));
    CHECK(probed.final_loss == bare.final_loss);
}

TEST_CASE("training reports sigma_g at probe iterations") {
    auto cfg = small_linear_config();
    cfg.total_iters = 9;
    cfg.probe_interval = 4;
    std::vector<MetricsRecord> recs;
    train<double>(cfg, [&](const MetricsRecord& r) { recs.push_back(r); });
    bool saw_probe = false;
    for (const auto& r : recs) {
        if (r.iter == 4 || r.iter == 8) {
            CHECK(r.sigma.has_value());
            if (r.sigma) CHECK(std::abs(*r.sigma) <= 1.0 + 1e-9);
            saw_probe = true;
        } else {
            CHECK_FALSE(r.sigma.has_value());
        }
    }
    CHECK(saw_probe);
}

TEST_CASE("the metrics cadence covers the start, the interval and the last iteration") {
    auto cfg = small_linear_config();
    cfg.total_iters = 10;
    cfg.log_interval = 3;
    std::vector<std::size_t> iters;
    train<double>(cfg, [&](const MetricsRecord& r) { iters.push_back(r.iter); });
    CHECK(iters == std::vector<std::size_t>{0, 3, 6, 9});
}

TEST_CASE("an exploding run flags divergence instead of throwing") {
    auto cfg = small_linear_config();
    cfg.total_iters = 400;
    cfg.scheduler.lr0 = 50.0;  // far beyond stable
    cfg.divergence_loss = 1e6;
    auto r = train<double>(cfg, nullptr);
    CHECK(r.diverged);
    CHECK_FALSE(r.abort_reason.empty());
    CHECK(r.abort_reason.find("iteration") != std::string::npos);
    CHECK(r.iters_run < 400);
    CHECK(std::isfinite(r.best_loss));
}

TEST_CASE("reaching target_mse stops the loop early") {
    auto cfg = small_linear_config();
    cfg.total_iters = 50;
    cfg.target_mse = 1e10;  // satisfied immediately
    auto r = train<double>(cfg, nullptr);
    CHECK(r.early_stopped);
    CHECK(r.iters_run == 1);
    CHECK_FALSE(r.diverged);
}

TEST_CASE("a short run on the linear task reduces the loss") {
    auto cfg = small_linear_config();
    cfg.total_iters = 150;
    cfg.scheduler.lr0 = 0.02;
    double first = -1;
    auto r = train<double>(cfg, [&](const MetricsRecord& rec) {
        if (rec.iter == 0) first = rec.loss;
    });
    CHECK(first > 0);
    CHECK_FALSE(r.diverged);
    CHECK(r.best_loss < first / 10);
}

TEST_CASE("train rejects a dtype mismatch between template and config") {
    auto cfg = small_linear_config();
    cfg.dtype = Dtype::Single;
    CHECK_THROWS_AS(train<double>(cfg, nullptr), ConfigError);
}
