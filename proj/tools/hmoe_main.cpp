#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "hmoe/harness.hpp"

using namespace hmoe;

namespace {

void apply_sets(RunConfig& cfg, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        std::size_t eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        apply_kv(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    finalize_run_config(cfg);
}

void print_eval(const EvalResult& result) {
    std::printf("%8s  %12s  %10s  %8s\n", "snr_db", "token_error", "stderr", "tokens");
    for (const EvalRow& r : result.rows) {
        std::printf("%8.1f  %12.4f  %10.4f  %8d\n", r.snr_db, r.token_error, r.stderr_batches,
                    r.n_tokens);
    }
}


// Rebuilds the run config recorded in a checkpoint (task identity, eval grid),
// leaving anything not recorded at its default.
RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
    RunConfig cfg = default_run_config();
    for (const auto& [k, v] : ckpt.config_kv) {
        if (k.rfind("task.", 0) == 0 || k == "train.eval_snr_grid") {
            apply_kv(cfg, k, v);
        }
    }
    finalize_run_config(cfg);
    return cfg;
}

Strategy strategy_from(const std::string& name) {
    if (name == "flat") return Strategy::Flat;
    if (name == "hard") return Strategy::Hard;
    if (name == "hierarchical" || name == "hier") return Strategy::Hierarchical;
    throw ConfigError("unknown strategy '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical mixture-of-experts trainer and analysis toolkit"};
    app.require_subcommand(1);

    // ---- train ----
    auto* cmd_train = app.add_subcommand("train", "Train a model and write metrics/checkpoint");
    std::string train_config_file;
    std::vector<std::string> train_sets;
    std::string train_out;
    std::string train_strategy;
    std::int64_t train_seed = -1;
    int train_steps = -1;
    cmd_train->add_option("--config", train_config_file, "key=value config file");
    cmd_train->add_option("--set", train_sets, "override: key=value (repeatable)");
    cmd_train->add_option("-o,--out", train_out, "output directory");
    cmd_train->add_option("--strategy", train_strategy, "flat|hard|hierarchical");
    cmd_train->add_option("--seed", train_seed, "seed for model, task and training");
    cmd_train->add_option("--steps", train_steps, "training steps");

    // ---- eval ----
    auto* cmd_eval = app.add_subcommand("eval", "Token error over the SNR grid");
    std::string eval_ckpt, eval_out;
    std::vector<std::string> eval_sets;
    std::uint64_t eval_seed = 1234;
    int eval_batches = 4, eval_bs = 32;
    std::vector<double> eval_grid;
    cmd_eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    cmd_eval->add_option("--set", eval_sets, "task overrides: key=value");
    cmd_eval->add_option("--seed", eval_seed, "evaluation seed");
    cmd_eval->add_option("--batches", eval_batches, "batches per SNR");
    cmd_eval->add_option("--batch-size", eval_bs, "sequences per batch");
    cmd_eval->add_option("--grid", eval_grid, "SNR grid in dB");
    cmd_eval->add_option("--out", eval_out, "CSV output path");

    // ---- analyze-load ----
    auto* cmd_load = app.add_subcommand("analyze-load", "Expert/group load distribution report");
    std::string load_ckpt, load_out = "load_report.csv";
    std::vector<std::string> load_sets;
    std::uint64_t load_seed = 1234;
    int load_batches = 4, load_bs = 32;
    std::vector<double> load_grid;
    std::vector<double> load_force_q;
    cmd_load->add_option("--ckpt", load_ckpt, "checkpoint path")->required();
    cmd_load->add_option("--set", load_sets, "task overrides: key=value");
    cmd_load->add_option("--seed", load_seed, "evaluation seed");
    cmd_load->add_option("--batches", load_batches, "batches per condition");
    cmd_load->add_option("--batch-size", load_bs, "sequences per batch");
    cmd_load->add_option("--grid", load_grid, "SNR grid in dB");
    cmd_load->add_option("--force-q", load_force_q, "fixed inter-modal group weights");
    cmd_load->add_option("--out", load_out, "CSV output path");

    // ---- sweep-hard ----
    auto* cmd_sweep = app.add_subcommand("sweep-hard", "Hard-routing AV weight sweep");
    std::string sweep_ckpt, sweep_out = "hard_sweep.csv";
    std::vector<std::string> sweep_sets;
    std::uint64_t sweep_seed = 1234;
    int sweep_batches = 4, sweep_bs = 32;
    std::vector<double> sweep_grid, sweep_weights;
    cmd_sweep->add_option("--ckpt", sweep_ckpt, "hard-routing checkpoint")->required();
    cmd_sweep->add_option("--set", sweep_sets, "task overrides: key=value");
    cmd_sweep->add_option("--seed", sweep_seed, "evaluation seed");
    cmd_sweep->add_option("--batches", sweep_batches, "batches per cell");
    cmd_sweep->add_option("--batch-size", sweep_bs, "sequences per batch");
    cmd_sweep->add_option("--grid", sweep_grid, "SNR grid in dB");
    cmd_sweep->add_option("--weights", sweep_weights, "audio group weights to sweep");
    cmd_sweep->add_option("--out", sweep_out, "CSV output path");

    // ---- flops ----
    auto* cmd_flops = app.add_subcommand("flops", "FLOPs accounting per sequence");
    int fl_dmodel = 768, fl_dff = 3072, fl_layers = 1, fl_frames = 500, fl_tokens = 50;
    std::string fl_strategy = "flat", fl_out;
    int fl_groups = 2, fl_epg = 4, fl_k = 2, fl_m = 2;
    std::vector<int> fl_kwithin = {1, 1};
    cmd_flops->add_option("--d-model", fl_dmodel, "hidden width");
    cmd_flops->add_option("--d-ff", fl_dff, "FFN width");
    cmd_flops->add_option("--layers", fl_layers, "decoder layers (totals only)");
    cmd_flops->add_option("--frames", fl_frames, "audio-visual frames");
    cmd_flops->add_option("--text-tokens", fl_tokens, "text tokens");
    cmd_flops->add_option("--strategy", fl_strategy, "flat|hard|hierarchical");
    cmd_flops->add_option("--n-groups", fl_groups, "expert groups");
    cmd_flops->add_option("--experts-per-group", fl_epg, "experts per group");
    cmd_flops->add_option("--k-flat", fl_k, "flat top-k");
    cmd_flops->add_option("--m-groups", fl_m, "hierarchical top-m");
    cmd_flops->add_option("--k-within", fl_kwithin, "per-group activation counts");
    cmd_flops->add_option("--out", fl_out, "CSV output path");

    // ---- gradcheck ----
    auto* cmd_grad = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
    std::string grad_strategy = "all";
    std::uint64_t grad_seed = 7;
    double grad_eps = 1e-5, grad_tol = 1e-5;
    cmd_grad->add_option("--strategy", grad_strategy, "flat|hard|hierarchical|all");
    cmd_grad->add_option("--seed", grad_seed, "seed");
    cmd_grad->add_option("--eps", grad_eps, "finite-difference epsilon");
    cmd_grad->add_option("--tol", grad_tol, "max relative error tolerance");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_train) {
            RunConfig cfg = train_config_file.empty() ? default_run_config()
                                                      : load_run_config_file(train_config_file);
            apply_sets(cfg, train_sets);
            if (!train_strategy.empty()) {
                cfg.model.moe.strategy = strategy_from(train_strategy);
            }
            if (train_seed >= 0) apply_kv(cfg, "seed", std::to_string(train_seed));
            if (train_steps >= 0) cfg.train.steps = train_steps;
            if (!train_out.empty()) cfg.train.out_dir = train_out;
            finalize_run_config(cfg);

            TrainResult result = train(cfg);
            if (result.diverged) {
                std::fprintf(stderr, "training diverged at step %d; last good checkpoint kept\n",
                             result.steps_run);
                return 2;
            }
            std::printf("trained %d steps; l_tot %.6f (ce %.6f lb %.6f ls %.6f lz %.6f)\n",
                        result.steps_run, result.final_losses.tot, result.final_losses.ce,
                        result.final_losses.lb, result.final_losses.ls, result.final_losses.lz);

            Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
            EvalResult ev = evaluate(*ckpt.model, cfg.task, cfg.train.eval_snr_grid,
                                     mix_seed(cfg.train.seed, 0x90, 0), cfg.train.eval_batches,
                                     cfg.train.eval_batch_size);
            write_eval_csv(cfg.train.out_dir + "/eval.csv", ev);
            LoadReport report = analyze_load(*ckpt.model, cfg.task, cfg.train.eval_snr_grid,
                                             mix_seed(cfg.train.seed, 0x91, 0),
                                             cfg.train.eval_batches, cfg.train.eval_batch_size);
            write_load_report_csv(cfg.train.out_dir + "/load_report.csv", report);
            print_eval(ev);
            std::printf("outputs in %s\n", cfg.train.out_dir.c_str());
        } else if (*cmd_eval) {
            Checkpoint ckpt = load_checkpoint(eval_ckpt);
            RunConfig cfg = config_from_checkpoint(ckpt);
            apply_sets(cfg, eval_sets);
            std::vector<double> grid = eval_grid.empty() ? cfg.train.eval_snr_grid : eval_grid;
            EvalResult ev = evaluate(*ckpt.model, cfg.task, grid, eval_seed, eval_batches, eval_bs);
            print_eval(ev);
            if (!eval_out.empty()) write_eval_csv(eval_out, ev);
        } else if (*cmd_load) {
            Checkpoint ckpt = load_checkpoint(load_ckpt);
            RunConfig cfg = config_from_checkpoint(ckpt);
            apply_sets(cfg, load_sets);
            std::vector<double> grid = load_grid.empty() ? cfg.train.eval_snr_grid : load_grid;
            LoadReport report = analyze_load(*ckpt.model, cfg.task, grid, load_seed, load_batches,
                                             load_bs, load_force_q.empty() ? nullptr : &load_force_q);
            write_load_report_csv(load_out, report);
            std::printf("wrote %zu rows to %s\n", report.rows.size(), load_out.c_str());
        } else if (*cmd_sweep) {
            Checkpoint ckpt = load_checkpoint(sweep_ckpt);
            RunConfig cfg = config_from_checkpoint(ckpt);
            apply_sets(cfg, sweep_sets);
            std::vector<double> grid = sweep_grid.empty() ? cfg.train.eval_snr_grid : sweep_grid;
            if (sweep_weights.empty()) {
                for (int i = 1; i <= 9; ++i) sweep_weights.push_back(0.1 * i);
            }
            SweepResult sw = hard_weight_sweep(*ckpt.model, cfg.task, sweep_weights, grid,
                                               sweep_seed, sweep_batches, sweep_bs);
            write_sweep_csv(sweep_out, sw);
            std::printf("wrote %zu rows to %s\n", sw.rows.size(), sweep_out.c_str());
        } else if (*cmd_flops) {
            ModelConfig mc;
            mc.d_model = fl_dmodel;
            mc.d_ff = fl_dff;
            mc.n_decoder_layers = fl_layers;
            mc.moe.strategy = strategy_from(fl_strategy);
            mc.moe.d_model = fl_dmodel;
            mc.moe.d_ff = fl_dff;
            mc.moe.n_groups = fl_groups;
            mc.moe.experts_per_group = fl_epg;
            mc.moe.k_flat = fl_k;
            mc.moe.m_groups = fl_m;
            mc.moe.k_within = fl_kwithin;
            FlopsReport r = flops(mc, fl_frames, fl_tokens);
            std::printf("assumptions: %d frames, %d text tokens, MAC = 2 FLOPs\n", r.frames,
                        r.text_tokens);
            std::printf("dense FFN            %10.1f MFLOPs/seq\n", r.dense_ffn_mflops());
            std::printf("MoE FFN              %10.1f MFLOPs/seq (%d experts active + router)\n",
                        r.moe_ffn_mflops(), r.activated_experts);
            std::printf("router overhead      %10.1f MFLOPs/seq\n", r.router / 1e6);
            std::printf("MoE / dense ratio    %10.4f\n", r.moe_to_dense_ratio());
            std::printf("attention (info)     %10.1f MFLOPs/seq\n", r.attention / 1e6);
            std::printf("decoder dense total  %10.1f MFLOPs/seq over %d layers (info)\n",
                        r.dense_decoder_total / 1e6, r.n_layers);
            std::printf("decoder MoE total    %10.1f MFLOPs/seq over %d layers (info)\n",
                        r.moe_decoder_total / 1e6, r.n_layers);
            if (!fl_out.empty()) write_flops_csv(fl_out, r);
        } else if (*cmd_grad) {
            std::vector<Strategy> strategies;
            if (grad_strategy == "all") {
                strategies = {Strategy::Flat, Strategy::Hard, Strategy::Hierarchical};
            } else {
                strategies = {strategy_from(grad_strategy)};
            }
            bool all_pass = true;
            for (Strategy s : strategies) {
                GradCheckSummary sum = run_gradcheck(s, grad_seed, grad_eps, grad_tol);
                const char* name = s == Strategy::Flat ? "flat"
                                   : s == Strategy::Hard ? "hard" : "hierarchical";
                std::printf("%-13s params %5lld  checked %5d  skipped %3d  max rel err %.3e  %s\n",
                            name, static_cast<long long>(sum.n_params), sum.report.checked,
                            sum.report.skipped, sum.report.max_rel_err,
                            sum.passed ? "PASS" : "FAIL");
                if (!sum.passed) {
                    for (const std::string& f : sum.report.failures) {
                        std::printf("  %s\n", f.c_str());
                    }
                    all_pass = false;
                }
            }
            return all_pass ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
