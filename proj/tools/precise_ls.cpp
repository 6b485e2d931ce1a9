// Command-line front end: every subcommand parses a JSON config, runs the
// matching pls:: command, and writes its artifacts under --out.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pls/harness.hpp"
#include "pls/version.hpp"

namespace {

using json = nlohmann::json;

struct CommonArgs {
    std::string config_path;
    std::string out;
    std::string dtype;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "JSON config file");
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--dtype", args.dtype, "single or double")
        ->check(CLI::IsMember({"single", "double"}));
    sub->add_option("--seed", args.seed, "RNG seed")->each([&args](const std::string&) {
        args.seed_set = true;
    });
}

int load_config(const CommonArgs& args, std::string& text) {
    if (args.config_path.empty()) {
        text = "{}";
        return 0;
    }
    std::ifstream in(args.config_path, std::ios::binary);
    if (!in) {
        std::cerr << "cannot read config " << args.config_path << "\n";
        return pls::kExitConfig;
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
    return 0;
}

pls::CliOverrides overrides_of(const CommonArgs& args) {
    pls::CliOverrides ov;
    if (args.seed_set) ov.seed = args.seed;
    if (!args.out.empty()) ov.out = args.out;
    if (args.dtype == "single") ov.dtype = pls::Dtype::Single;
    if (args.dtype == "double") ov.dtype = pls::Dtype::Double;
    return ov;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"precise-ls: exact constructions, oracles, and high-precision training "
                 "for least-squares sequence models"};
    app.set_version_flag("--version", pls::version_string());
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, construct_args, iterate_args, sweep_args, depth_args,
        gradcheck_args, oracle_args;

    CLI::App* train = app.add_subcommand("train", "train a model on a task");
    add_common(train, train_args);

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a task");
    add_common(eval, eval_args);
    std::string eval_checkpoint;
    eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint (.pls1)");

    CLI::App* construct = app.add_subcommand("construct", "compile exact weights");
    add_common(construct, construct_args);
    std::string c_kind;
    std::uint64_t c_i = 0, c_j = 0, c_a = 0, c_b = 0, c_dout = 0, c_k = 0, c_n = 0, c_d = 0;
    double c_eta = 0;
    bool c_emit = false, c_norm = false;
    std::uint64_t c_verify = 0;
    construct->add_option("--kind", c_kind,
                          "read | linear | multiply | gd_noncausal | gd_causal");
    construct->add_option("--i", c_i, "read source row");
    construct->add_option("--j", c_j, "read target row");
    construct->add_option("--a", c_a, "first column index");
    construct->add_option("--b", c_b, "second column index / end column");
    construct->add_option("--dout", c_dout, "output channel count");
    construct->add_option("--eta", c_eta, "gradient-descent step size");
    construct->add_option("--steps,--k", c_k, "gradient-descent iterates");
    construct->add_option("--n", c_n, "prompt rows");
    construct->add_option("--d", c_d, "data channels");
    construct->add_flag("--emit-gradient", c_emit, "emit the raw gradient, not the iterate");
    construct->add_flag("--normalized", c_norm, "use the 1/N-averaged gradient");
    construct->add_option("--verify", c_verify, "check against the oracle on this many samples");

    CLI::App* iterate = app.add_subcommand("iterate", "run the fixed-point solver");
    add_common(iterate, iterate_args);
    std::string it_checkpoint, it_evaluator;
    iterate->add_option("--checkpoint", it_checkpoint, "gradient-emitting checkpoint");
    iterate->add_option("--evaluator", it_evaluator, "oracle | checkpoint");

    CLI::App* sweep = app.add_subcommand("sweep-ood", "loss across solution scales");
    add_common(sweep, sweep_args);
    std::string sw_checkpoint, sw_mode;
    sweep->add_option("--checkpoint", sw_checkpoint, "model checkpoint (.pls1)");
    sweep->add_option("--mode", sw_mode, "iterate | direct");

    CLI::App* depth = app.add_subcommand("depth-sweep", "train at several depths");
    add_common(depth, depth_args);

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "autodiff vs finite differences");
    add_common(gradcheck, gradcheck_args);
    bool gc_corrupt = false;
    gradcheck->add_flag("--corrupt", gc_corrupt, "negative control: perturb one gradient");

    CLI::App* oracle = app.add_subcommand("oracle", "run a reference solver");
    add_common(oracle, oracle_args);
    std::string or_kind;
    oracle->add_option("--kind", or_kind, "gd | grad | ols | newton");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : pls::kExitConfig;
    }

    auto run = [&](const CommonArgs& args, auto&& mutate,
                   int (*cmd)(const std::string&, const pls::CliOverrides&)) {
        std::string text;
        if (int rc = load_config(args, text)) return rc;
        json cfg = json::parse(text, nullptr, false);
        if (cfg.is_discarded() || !cfg.is_object()) {
            std::cerr << "config is not a JSON object\n";
            return pls::kExitConfig;
        }
        mutate(cfg);
        return cmd(cfg.dump(), overrides_of(args));
    };

    if (train->parsed()) return run(train_args, [](json&) {}, pls::cmd_train);
    if (eval->parsed())
        return run(eval_args,
                   [&](json& cfg) {
                       if (!eval_checkpoint.empty()) cfg["checkpoint"] = eval_checkpoint;
                   },
                   pls::cmd_eval);
    if (construct->parsed())
        return run(construct_args,
                   [&](json& cfg) {
                       json& c = cfg["construction"];
                       if (!c.is_object()) c = json::object();
                       if (construct->count("--kind")) c["kind"] = c_kind;
                       if (construct->count("--i")) c["i"] = c_i;
                       if (construct->count("--j")) c["j"] = c_j;
                       if (construct->count("--a")) c["a"] = c_a;
                       if (construct->count("--b")) c["b"] = c_b;
                       if (construct->count("--dout")) c["d_out"] = c_dout;
                       if (construct->count("--eta")) c["eta"] = c_eta;
                       if (construct->count("--steps")) c["k"] = c_k;
                       if (construct->count("--n")) c["n"] = c_n;
                       if (construct->count("--d")) c["d"] = c_d;
                       if (construct->count("--emit-gradient")) c["emit_gradient"] = c_emit;
                       if (construct->count("--normalized")) c["normalized"] = c_norm;
                       if (construct->count("--verify")) cfg["verify"] = c_verify;
                   },
                   pls::cmd_construct);
    if (iterate->parsed())
        return run(iterate_args,
                   [&](json& cfg) {
                       if (!it_checkpoint.empty()) cfg["checkpoint"] = it_checkpoint;
                       if (!it_evaluator.empty()) cfg["evaluator"] = it_evaluator;
                   },
                   pls::cmd_iterate);
    if (sweep->parsed())
        return run(sweep_args,
                   [&](json& cfg) {
                       if (!sw_checkpoint.empty()) cfg["checkpoint"] = sw_checkpoint;
                       if (!sw_mode.empty()) cfg["mode"] = sw_mode;
                   },
                   pls::cmd_sweep_ood);
    if (depth->parsed()) return run(depth_args, [](json&) {}, pls::cmd_depth_sweep);
    if (gradcheck->parsed())
        return run(gradcheck_args,
                   [&](json& cfg) {
                       if (gc_corrupt) cfg["corrupt"] = true;
                   },
                   pls::cmd_gradcheck);
    if (oracle->parsed())
        return run(oracle_args,
                   [&](json& cfg) {
                       if (!or_kind.empty()) cfg["kind"] = or_kind;
                   },
                   pls::cmd_oracle);
    return pls::kExitConfig;
}
