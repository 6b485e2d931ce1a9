#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pls/constructions.hpp"
#include "pls/errors.hpp"
#include "pls/linalg.hpp"
#include "pls/rng.hpp"
#include "pls/tasks.hpp"

#include <nlohmann/json.hpp>

using namespace pls;

namespace {

Tensor<double> worked_example_row() {
    Tensor<double> u({1, 4});
    u.data = {1, 2, 3, 4};
    return u;
}

LeastSquaresInstance<double> small_instance(std::uint64_t seed, std::size_t n = 8,
                                            std::size_t d = 3) {
    DistributionSpec dist;
    dist.n = n;
    dist.d = d;
    SeededRng rng(seed);
    return sample_instance<double>(dist, rng);
}

}  // namespace

TEST_CASE("multiply worked example: [1,2,3,4] with offsets 0,2 gives [3,8]") {
    auto u = worked_example_row();
    auto direct = primitive_multiply(u, 0, 2, std::size_t{2});
    CHECK(direct.at(0, 0) == 3.0);
    CHECK(direct.at(0, 1) == 8.0);

    auto model = build_multiply<double>(0, 2, 2, 1, 4);
    auto out = model_eval(model.spec, model.params, u);
    auto ans = apply_readout(out, model.readout);
    CHECK(ans.at(0, 0) == 3.0);
    CHECK(ans.at(0, 1) == 8.0);
}

TEST_CASE("multiply construction equals the direct product on random prompts") {
    SeededRng rng(1);
    auto model = build_multiply<double>(1, 4, 3, 6, 8);
    for (int t = 0; t < 20; ++t) {
        auto u = gaussian<double>(rng, {6, 8});
        auto want = primitive_multiply(u, 1, 4, std::size_t{3});
        auto got = apply_readout(model_eval(model.spec, model.params, u), model.readout);
        CHECK(max_abs_diff(got, want) <= 1e-14);
    }
}

TEST_CASE("read construction copies the selected block and nothing else") {
    SeededRng rng(2);
    std::size_t n = 7, d = 5, i = 2, j = 5, a = 1, b = 4;
    auto model = build_read<double>(i, j, a, b, n, d);
    for (int t = 0; t < 20; ++t) {
        auto u = gaussian<double>(rng, {n, d});
        auto want = primitive_read(u, i, j, a, b);
        auto got = apply_readout(model_eval(model.spec, model.params, u), model.readout);
        CHECK(max_abs_diff(got, want) <= 1e-13);
        // target row holds source values on [a,b)
        for (std::size_t c = a; c < b; ++c)
            CHECK(std::abs(got.at(j, c) - u.at(i, c)) <= 1e-13);
        // all other rows unchanged
        for (std::size_t r = 0; r < n; ++r) {
            if (r == j) continue;
            for (std::size_t c = 0; c < d; ++c)
                CHECK(std::abs(got.at(r, c) - u.at(r, c)) <= 1e-13);
        }
    }
}

TEST_CASE("read construction handles i > j and full-width copies") {
    SeededRng rng(3);
    auto model = build_read<double>(5, 0, 0, 4, 6, 4);
    auto u = gaussian<double>(rng, {6, 4});
    auto got = apply_readout(model_eval(model.spec, model.params, u), model.readout);
    CHECK(max_abs_diff(got, primitive_read(u, 5, 0, std::size_t{0}, std::size_t{4})) <= 1e-13);
}

TEST_CASE("linear construction applies a fixed matrix to every row") {
    SeededRng rng(4);
    auto h = gaussian<double>(rng, {5, 3});
    auto model = build_linear<double>(h, 6);
    for (int t = 0; t < 20; ++t) {
        auto u = gaussian<double>(rng, {6, 5});
        auto want = primitive_linear(u, h);
        auto got = apply_readout(model_eval(model.spec, model.params, u), model.readout);
        CHECK(max_abs_diff(got, want) <= 1e-13);
    }
}

TEST_CASE("gd constructions reproduce every oracle iterate") {
    for (bool causal : {false, true}) {
        CAPTURE(causal);
        std::size_t n = 8, d = 3, k = 5;
        double eta = 0.04;
        auto model = causal ? build_gd_causal<double>(eta, k, n, d)
                            : build_gd_noncausal<double>(eta, k, n, d);
        for (std::uint64_t seed : {10u, 11u, 12u}) {
            auto inst = small_instance(seed, n, d);
            auto input = causal ? embed_gd_causal(inst.a, inst.b, inst.x0)
                                : embed_gd_noncausal(inst.a, inst.b, inst.x0);
            std::vector<Tensor<double>> oracle_trace;
            gd_oracle(inst.a, inst.b, inst.x0, eta, k, false, &oracle_trace);
            auto model_trace = gd_construction_iterates(model, input);
            REQUIRE(model_trace.size() == k);
            REQUIRE(oracle_trace.size() == k);
            for (std::size_t t = 0; t < k; ++t)
                CHECK(max_abs_diff(model_trace[t], oracle_trace[t]) <= 1e-12);
            // final readout equals the last iterate
            auto out = apply_readout(model_eval(model.spec, model.params, input), model.readout);
            for (std::size_t c = 0; c < d; ++c)
                CHECK(std::abs(out.at(0, c) - oracle_trace.back().data[c]) <= 1e-12);
        }
    }
}

TEST_CASE("gd construction roundoff grows at most linearly in the iterate count") {
    std::size_t n = 8, d = 3;
    double eta = 0.04;
    auto inst = small_instance(42, n, d);
    for (std::size_t k : {1u, 5u, 20u, 50u}) {
        auto model = build_gd_noncausal<double>(eta, k, n, d);
        auto input = embed_gd_noncausal(inst.a, inst.b, inst.x0);
        auto want = gd_oracle(inst.a, inst.b, inst.x0, eta, k);
        auto got = apply_readout(model_eval(model.spec, model.params, input), model.readout);
        double err = 0;
        for (std::size_t c = 0; c < d; ++c)
            err = std::max(err, std::abs(got.at(0, c) - want.data[c]));
        CHECK(err <= 1e-13 * static_cast<double>(k));
    }
}

TEST_CASE("emit-gradient variant outputs the gradient at the previous iterate") {
    std::size_t n = 8, d = 3;
    double eta = 0.04;
    auto inst = small_instance(17, n, d);
    for (bool causal : {false, true}) {
        CAPTURE(causal);
        for (std::size_t k : {1u, 3u}) {
            GdOptions opt;
            opt.emit_gradient = true;
            auto model = causal ? build_gd_causal<double>(eta, k, n, d, opt)
                                : build_gd_noncausal<double>(eta, k, n, d, opt);
            auto input = causal ? embed_gd_causal(inst.a, inst.b, inst.x0)
                                : embed_gd_noncausal(inst.a, inst.b, inst.x0);
            auto xprev = gd_oracle(inst.a, inst.b, inst.x0, eta, k - 1);
            auto want = grad_oracle(inst.a, inst.b, xprev);
            auto got = apply_readout(model_eval(model.spec, model.params, input), model.readout);
            for (std::size_t c = 0; c < d; ++c)
                CHECK(std::abs(got.at(0, c) - want.data[c]) <= 1e-11);
        }
    }
}

TEST_CASE("gradient at the least-squares solution of a consistent system is zero") {
    std::size_t n = 10, d = 4;
    auto inst = small_instance(23, n, d);
    GdOptions opt;
    opt.emit_gradient = true;
    auto model = build_gd_noncausal<double>(0.04, 1, n, d, opt);
    // b was generated as A x_star exactly, so the gradient at x_star vanishes
    auto input = embed_gd_noncausal(inst.a, inst.b, inst.x_star);
    auto got = apply_readout(model_eval(model.spec, model.params, input), model.readout);
    CHECK(max_abs(got) <= 1e-12);
}

TEST_CASE("normalized gd construction matches the averaged-gradient oracle") {
    std::size_t n = 8, d = 3, k = 4;
    double eta = 0.3;  // stable only with the 1/N scaling
    auto inst = small_instance(29, n, d);
    GdOptions opt;
    opt.normalized = true;
    auto model = build_gd_noncausal<double>(eta, k, n, d, opt);
    auto input = embed_gd_noncausal(inst.a, inst.b, inst.x0);
    auto want = gd_oracle(inst.a, inst.b, inst.x0, eta, k, true);
    auto got = apply_readout(model_eval(model.spec, model.params, input), model.readout);
    for (std::size_t c = 0; c < d; ++c)
        CHECK(std::abs(got.at(0, c) - want.data[c]) <= 1e-12);
}

TEST_CASE("causal gd model at the answer row never reads future positions") {
    std::size_t n = 6, d = 3;
    auto model = build_gd_causal<double>(0.04, 2, n, d);
    auto inst = small_instance(31, n, d);
    auto input = embed_gd_causal(inst.a, inst.b, inst.x0);
    auto out = model_eval(model.spec, model.params, input);
    CHECK(out.rows() == n + 1);
    CHECK(out.cols() == d);
    // perturb an early row: rows before it must be unchanged
    Tensor<double> bumped = input;
    bumped.at(2, 0) += 5.0;
    auto out2 = model_eval(model.spec, model.params, bumped);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t c = 0; c < d; ++c) CHECK(out.at(i, c) == out2.at(i, c));
    // and the answer row must change (it aggregates everything)
    double last_diff = 0;
    for (std::size_t c = 0; c < d; ++c)
        last_diff = std::max(last_diff, std::abs(out.at(n, c) - out2.at(n, c)));
    CHECK(last_diff > 0.0);
}

TEST_CASE("causal prefix sums reproduce the gram matrix at the answer row") {
    std::size_t n = 6, d = 3;
    auto model = build_gd_causal<double>(0.04, 1, n, d);
    auto inst = small_instance(37, n, d);
    auto input = embed_gd_causal(inst.a, inst.b, inst.x0);
    auto acts = model_eval_layers(model.spec, model.params, input);
    REQUIRE(acts.size() >= 2);
    const auto& after_sum = acts[1];  // second layer holds the prefix sums
    auto gram = matmul(transpose(inst.a), inst.a);
    std::size_t gram0 = 4 * d + 1;
    double eps = std::numeric_limits<double>::epsilon();
    double scale = max_abs(gram);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c)
            CHECK(std::abs(after_sum.at(n, gram0 + r * d + c) - gram.at(r, c)) <=
                  8 * eps * scale * static_cast<double>(n));
}

TEST_CASE("embedders and extractors are inverse to one another") {
    auto inst = small_instance(41, 5, 3);
    for (bool causal : {false, true}) {
        auto input = causal ? embed_gd_causal(inst.a, inst.b, inst.x0)
                            : embed_gd_noncausal(inst.a, inst.b, inst.x0);
        auto parts = causal ? extract_gd_causal(input, 3) : extract_gd_noncausal(input, 3);
        CHECK(max_abs_diff(parts.a, inst.a) == 0.0);
        CHECK(max_abs_diff(parts.b, inst.b) == 0.0);
        CHECK(max_abs_diff(parts.x0, inst.x0) == 0.0);
    }
}

TEST_CASE("construction spec rejects an embedding override below the layout width") {
    ConstructionSpec cs;
    cs.kind = ConstructionKind::GdNoncausal;
    cs.n = 8;
    cs.d = 3;
    cs.emb = 4;  // layout needs 4*3+1 = 13
    CHECK_THROWS_AS(build_construction_double(cs), CapacityError);
    cs.emb = gd_noncausal_width(3);
    auto model = build_construction_double(cs);
    CHECK(model.spec.emb == 13);
}

TEST_CASE("layout json names every channel block") {
    auto model = build_gd_causal<double>(0.04, 1, 5, 2);
    auto j = nlohmann::json::parse(model.layout_json);
    REQUIRE(j.contains("blocks"));
    const auto& blocks = j["blocks"];
    CHECK(blocks.size() >= 6);
    for (const char* name : {"a", "b", "x", "ones", "ba", "gram"}) {
        REQUIRE(blocks.contains(name));
        REQUIRE(blocks[name].size() == 2);
        CHECK(blocks[name][0].get<std::size_t>() < blocks[name][1].get<std::size_t>());
    }
    // gram block spans d^2 channels
    CHECK(blocks["gram"][1].get<std::size_t>() - blocks["gram"][0].get<std::size_t>() == 4);
}

TEST_CASE("verify_construction reports near-zero error for exact weights") {
    ConstructionSpec cs;
    cs.kind = ConstructionKind::Multiply;
    cs.n = 4;
    cs.d = 6;
    cs.a = 0;
    cs.b = 3;
    cs.d_out = 3;
    auto model = build_construction_double(cs);
    SeededRng rng(55);
    auto report = verify_construction<double>(
        model, [&](const Tensor<double>& u) { return primitive_multiply(u, 0, 3, std::size_t{3}); },
        [&](SeededRng& r) { return gaussian<double>(r, {4, 6}); }, 25, rng);
    CHECK(report.mse <= 1e-28);
    CHECK(report.max_abs_err <= 1e-13);
}

TEST_CASE("float gd construction tracks the double oracle to single precision") {
    std::size_t n = 20, d = 5, k = 10;
    double eta = 0.04;
    auto model = build_gd_noncausal<float>(eta, k, n, d);
    DistributionSpec dist;
    dist.n = n;
    dist.d = d;
    SeededRng rng(61);
    for (int t = 0; t < 5; ++t) {
        auto inst = sample_instance<double>(dist, rng);
        auto want = gd_oracle(inst.a, inst.b, inst.x0, eta, k);
        auto inputf = embed_gd_noncausal(cast_tensor<float>(inst.a), cast_tensor<float>(inst.b),
                                         cast_tensor<float>(inst.x0));
        auto got = apply_readout(model_eval(model.spec, model.params, inputf), model.readout);
        for (std::size_t c = 0; c < d; ++c)
            CHECK(std::abs(static_cast<double>(got.at(0, c)) - want.data[c]) <= 1e-5);
    }
}
