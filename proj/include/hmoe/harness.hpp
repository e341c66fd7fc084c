#pragma once

#include <string>
#include <vector>

#include "hmoe/gradcheck.hpp"
#include "hmoe/model.hpp"
#include "hmoe/model_io.hpp"
#include "hmoe/optim.hpp"
#include "hmoe/synthdata.hpp"

namespace hmoe {

struct TrainConfig {
    int steps = 3000;
    int batch_size = 32;
    AdamConfig adam;
    LossWeights weights;
    std::vector<double> eval_snr_grid = {-10, -5, 0, 5, 10};
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    int checkpoint_interval = 500;
    int eval_batches = 4;
    int eval_batch_size = 32;
    int metrics_every = 1;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TaskConfig task;
    TrainConfig train;
};

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    LossBreakdown final_losses;
    bool diverged = false;
    int steps_run = 0;
};

// Full training run: per-step metrics CSV, config snapshot, periodic and
// final checkpoints in train.out_dir. On divergence (non-finite loss or
// gradient) the last periodic checkpoint is kept as the final one and the
// result is marked diverged.
TrainResult train(const RunConfig& cfg);

struct EvalRow {
    double snr_db = 0.0;
    double token_error = 0.0;
    double stderr_batches = 0.0;  // standard error over eval batches
    int n_tokens = 0;
};
struct EvalResult {
    std::vector<EvalRow> rows;
};

// Teacher-forced greedy decoding over the SNR grid; audio-visual inputs.
EvalResult evaluate(Model& model, const TaskConfig& task, const std::vector<double>& snr_grid,
                    std::uint64_t eval_seed, int n_batches, int batch_size);

// Token error of one batch under given tags (teacher-forced greedy argmax).
double token_error(Model& model, const SampleBatch& batch, const std::vector<ModalityTag>& tags);

struct LoadReportRow {
    std::string kind;       // "expert" or "group"
    int layer = 0;
    std::string condition;  // audio_only / video_only / audio_visual
    double snr_db = 0.0;    // group rows only
    int group = 0;
    int expert = -1;        // expert rows only
    double value = 0.0;
};
struct LoadReport {
    std::vector<LoadReportRow> rows;
};

// Expert frequencies weighted by the inter-modal mass, per modality
// condition, plus per-SNR group token-mass shares on audio-visual inputs.
// force_q overrides the hierarchical gate (analysis-only).
LoadReport analyze_load(Model& model, const TaskConfig& task, const std::vector<double>& snr_grid,
                        std::uint64_t eval_seed, int n_batches, int batch_size,
                        const std::vector<double>* force_q = nullptr);

struct SweepRow {
    double audio_weight = 0.0;
    double snr_db = 0.0;
    double token_error = 0.0;
};
struct SweepResult {
    std::vector<SweepRow> rows;
};

// Hard-routing AV group-weight sweep: evaluate with (p_A, 1-p_A) splits.
SweepResult hard_weight_sweep(Model& model, const TaskConfig& task,
                              const std::vector<double>& audio_weights,
                              const std::vector<double>& snr_grid, std::uint64_t eval_seed,
                              int n_batches, int batch_size);

struct FlopsReport {
    int frames = 500;
    int text_tokens = 50;
    int d_model = 0;
    int d_ff = 0;
    int n_layers = 0;
    int activated_experts = 0;
    // Per-sequence FLOP counts, MAC = 2 FLOPs.
    double dense_ffn = 0.0;   // one FFN (two linear layers) over the text tokens
    double router = 0.0;      // all router logits consulted per token
    double moe_ffn = 0.0;     // activated_experts * dense_ffn + router
    double attention = 0.0;   // informational: one cross-attention block
    double dense_decoder_total = 0.0;  // informational
    double moe_decoder_total = 0.0;    // informational

    double dense_ffn_mflops() const { return dense_ffn / 1e6; }
    double moe_ffn_mflops() const { return moe_ffn / 1e6; }
    double moe_to_dense_ratio() const { return moe_ffn / dense_ffn; }
};

FlopsReport flops(const ModelConfig& cfg, int frames = 500, int text_tokens = 50);

struct GradCheckSummary {
    Strategy strategy;
    GradCheckReport report;
    std::int64_t n_params = 0;
    double tolerance = 0.0;
    bool passed = false;
};

// Finite-difference check of the full training loss on a small built-in
// model (well under 10^4 parameters) for one routing strategy.
GradCheckSummary run_gradcheck(Strategy strategy, std::uint64_t seed, double epsilon = 1e-5,
                               double tolerance = 1e-5);

// --- CSV + config plumbing ---
std::string csv_double(double v);
void write_metrics_csv(const std::string& path, const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows);
void write_eval_csv(const std::string& path, const EvalResult& result);
void write_load_report_csv(const std::string& path, const LoadReport& report);
void write_sweep_csv(const std::string& path, const SweepResult& result);
void write_flops_csv(const std::string& path, const FlopsReport& report);

RunConfig default_run_config();
// Dot-separated key=value assignment; throws ConfigError on unknown keys.
void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig load_run_config_file(const std::string& path);
// Synchronizes coupled fields (MoE dims, vocab, feature dims, positions).
void finalize_run_config(RunConfig& cfg);
std::string run_config_text(const RunConfig& cfg, bool include_output_paths = true);

}  // namespace hmoe
