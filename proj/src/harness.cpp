#include "hmoe/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace hmoe {

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(adam.lr > 0.0) || !(adam.beta1 > 0.0) || !(adam.beta2 > 0.0) || !(adam.eps > 0.0)) {
        throw ConfigError("optimizer rates must be positive");
    }
    if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
    if (eval_batches < 1 || eval_batch_size < 1) throw ConfigError("eval sizing must be >= 1");
    if (metrics_every < 1) throw ConfigError("metrics_every must be >= 1");
    weights.validate();
}

// ------------------------------------------------------------------ csv

std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_metrics_csv(const std::string& path, const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << "\n";
    }
}

void write_eval_csv(const std::string& path, const EvalResult& result) {
    std::vector<std::vector<std::string>> rows;
    for (const EvalRow& r : result.rows) {
        rows.push_back({csv_double(r.snr_db), csv_double(r.token_error), csv_double(r.stderr_batches),
                        std::to_string(r.n_tokens)});
    }
    write_metrics_csv(path, {"snr_db", "token_error", "stderr", "n_tokens"}, rows);
}

void write_load_report_csv(const std::string& path, const LoadReport& report) {
    std::vector<std::vector<std::string>> rows;
    for (const LoadReportRow& r : report.rows) {
        rows.push_back({r.kind, std::to_string(r.layer), r.condition,
                        r.kind == "group" ? csv_double(r.snr_db) : std::string(),
                        std::to_string(r.group),
                        r.expert >= 0 ? std::to_string(r.expert) : std::string(), csv_double(r.value)});
    }
    write_metrics_csv(path, {"kind", "layer", "condition", "snr_db", "group", "expert", "value"}, rows);
}

void write_sweep_csv(const std::string& path, const SweepResult& result) {
    std::vector<std::vector<std::string>> rows;
    for (const SweepRow& r : result.rows) {
        rows.push_back({csv_double(r.audio_weight), csv_double(r.snr_db), csv_double(r.token_error)});
    }
    write_metrics_csv(path, {"audio_weight", "snr_db", "token_error"}, rows);
}

void write_flops_csv(const std::string& path, const FlopsReport& r) {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"dense_ffn_mflops", csv_double(r.dense_ffn_mflops())});
    rows.push_back({"moe_ffn_mflops", csv_double(r.moe_ffn_mflops())});
    rows.push_back({"router_mflops", csv_double(r.router / 1e6)});
    rows.push_back({"moe_to_dense_ratio", csv_double(r.moe_to_dense_ratio())});
    rows.push_back({"attention_mflops", csv_double(r.attention / 1e6)});
    rows.push_back({"dense_decoder_total_mflops", csv_double(r.dense_decoder_total / 1e6)});
    rows.push_back({"moe_decoder_total_mflops", csv_double(r.moe_decoder_total / 1e6)});
    rows.push_back({"activated_experts", std::to_string(r.activated_experts)});
    rows.push_back({"frames", std::to_string(r.frames)});
    rows.push_back({"text_tokens", std::to_string(r.text_tokens)});
    write_metrics_csv(path, {"quantity", "value"}, rows);
}

// ---------------------------------------------------------------- flops

FlopsReport flops(const ModelConfig& cfg, int frames, int text_tokens) {
    if (cfg.d_model < 1 || cfg.d_ff < 1 || frames < 1 || text_tokens < 1) {
        throw ConfigError("flops needs positive dims");
    }
    FlopsReport r;
    r.frames = frames;
    r.text_tokens = text_tokens;
    r.d_model = cfg.d_model;
    r.d_ff = cfg.d_ff;
    r.n_layers = cfg.n_decoder_layers;
    r.activated_experts = cfg.moe.activated_per_token();

    double d = cfg.d_model, ff = cfg.d_ff, T = text_tokens, F = frames;
    // One FFN = two linear layers, MAC = 2 FLOPs.
    r.dense_ffn = 2.0 * 2.0 * d * ff * T;

    int n_logits = 0;
    switch (cfg.moe.strategy) {
        case Strategy::Flat:
            n_logits = cfg.moe.total_experts();
            break;
        case Strategy::Hard:
            // an audio-visual sequence consults both intra-modal routers
            n_logits = cfg.moe.n_groups * cfg.moe.experts_per_group;
            break;
        case Strategy::Hierarchical:
            n_logits = cfg.moe.n_groups + cfg.moe.n_groups * cfg.moe.experts_per_group;
            break;
    }
    r.router = 2.0 * d * n_logits * T;
    r.moe_ffn = r.activated_experts * r.dense_ffn + r.router;

    // Informational: single-head cross-attention (q/o over text, k/v over frames).
    r.attention = 2.0 * d * d * (2.0 * T + 2.0 * F) + 2.0 * 2.0 * T * F * d;
    r.dense_decoder_total = r.n_layers * (r.attention + r.dense_ffn);
    r.moe_decoder_total = r.n_layers * (r.attention + r.moe_ffn);
    return r;
}

// ------------------------------------------------------------- gradcheck

namespace {

ModelConfig gradcheck_config(Strategy strategy, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.n_decoder_layers = 1;
    cfg.vocab_size = 6;
    cfg.d_audio = 4;
    cfg.d_video = 4;
    cfg.max_positions = 2;
    cfg.moe.strategy = strategy;
    cfg.moe.d_model = cfg.d_model;
    cfg.moe.d_ff = cfg.d_ff;
    cfg.moe.n_groups = strategy == Strategy::Flat ? 1 : 2;
    cfg.moe.experts_per_group = strategy == Strategy::Flat ? 4 : 2;
    cfg.moe.k_flat = 2;
    cfg.moe.m_groups = 2;
    cfg.moe.k_within = {1, 1};
    cfg.seed = seed;
    return cfg;
}

}  // namespace

GradCheckSummary run_gradcheck(Strategy strategy, std::uint64_t seed, double epsilon, double tolerance) {
    ModelConfig cfg = gradcheck_config(strategy, seed);
    Model model(cfg);

    std::mt19937_64 rng(mix_seed(seed, 0x60, 0));
    std::normal_distribution<double> dist(0.0, 1.0);
    std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
    const int n_seq = 2, frames = 2;
    Tensor audio = Tensor::zeros({n_seq * frames, cfg.d_audio});
    Tensor video = Tensor::zeros({n_seq * frames, cfg.d_video});
    for (double& v : audio.data) v = dist(rng);
    for (double& v : video.data) v = dist(rng);
    std::vector<int> targets;
    for (int i = 0; i < n_seq * frames; ++i) targets.push_back(tok(rng));
    std::vector<ModalityTag> tags = {ModalityTag::AudioOnly, ModalityTag::AudioVisual};
    LossWeights w;

    auto loss = [&](std::vector<int>* sig) {
        Tape tape;
        EncodedSequence enc = model.encode(tape, audio, video, tags);
        ForwardResult fwd = model.forward(tape, enc, targets);
        LossBreakdown bd = model.losses(tape, fwd, targets, w);
        if (sig) *sig = tape.selection_signature();
        return bd.tot;
    };

    zero_grads(model.params());
    {
        Tape tape;
        EncodedSequence enc = model.encode(tape, audio, video, tags);
        ForwardResult fwd = model.forward(tape, enc, targets);
        LossBreakdown bd = model.losses(tape, fwd, targets, w);
        tape.backward(bd.total);
    }

    GradCheckSummary summary;
    summary.strategy = strategy;
    summary.n_params = model.n_params();
    summary.tolerance = tolerance;
    summary.report = finite_diff_check(loss, model.params(), epsilon, tolerance);
    summary.passed = summary.report.passed(tolerance);
    return summary;
}

// ------------------------------------------------------------- evaluate

namespace {

void check_compat(const Model& model, const TaskConfig& task) {
    const ModelConfig& mc = model.config();
    if (mc.vocab_size != task.vocab) {
        throw ConfigError("checkpoint vocab " + std::to_string(mc.vocab_size) +
                          " incompatible with task vocab " + std::to_string(task.vocab));
    }
    if (mc.d_audio != task.d_audio || mc.d_video != task.d_video) {
        throw ConfigError("checkpoint feature dims incompatible with the task");
    }
    if (task.seq_len > mc.max_positions) {
        throw ConfigError("task seq_len exceeds the checkpoint's max_positions");
    }
}

double batch_token_error(Model& model, const SampleBatch& batch, const std::vector<ModalityTag>& tags,
                         double av_audio_weight, const std::vector<double>* force_q) {
    Tape tape;
    EncodedSequence enc = model.encode(tape, batch.audio, batch.video, tags);
    ForwardResult fwd = model.forward(tape, enc, batch.targets, av_audio_weight, force_q);
    const Tensor& logits = tape.value(fwd.logits);
    int wrong = 0;
    for (int row = 0; row < logits.rows(); ++row) {
        int pred = argmax_index(logits.data.data() + static_cast<std::size_t>(row) * logits.cols(),
                                logits.cols());
        if (pred != batch.targets[static_cast<std::size_t>(row)]) ++wrong;
    }
    return static_cast<double>(wrong) / logits.rows();
}

EvalResult evaluate_impl(Model& model, const TaskConfig& task, const std::vector<double>& snr_grid,
                         std::uint64_t eval_seed, int n_batches, int batch_size,
                         double av_audio_weight, const std::vector<double>* force_q) {
    check_compat(model, task);
    // The codebook is the task's identity (task.seed); eval_seed only selects
    // which held-out batches are drawn.
    Codebook cb = make_codebook(task);
    EvalResult result;
    for (double snr : snr_grid) {
        std::vector<double> errs;
        int tokens = 0;
        for (int b = 0; b < n_batches; ++b) {
            SampleBatch batch = generate_eval_batch(task, cb, batch_size, snr,
                                                    mix_seed(eval_seed, 0xE1, static_cast<std::uint64_t>(b)));
            std::vector<ModalityTag> tags(static_cast<std::size_t>(batch_size),
                                          ModalityTag::AudioVisual);
            errs.push_back(batch_token_error(model, batch, tags, av_audio_weight, force_q));
            tokens += batch_size * task.seq_len;
        }
        double mean = 0.0;
        for (double e : errs) mean += e;
        mean /= static_cast<double>(errs.size());
        double var = 0.0;
        for (double e : errs) var += (e - mean) * (e - mean);
        double se = errs.size() > 1 ? std::sqrt(var / (static_cast<double>(errs.size()) - 1.0) /
                                                static_cast<double>(errs.size()))
                                    : 0.0;
        result.rows.push_back(EvalRow{snr, mean, se, tokens});
    }
    return result;
}

}  // namespace

double token_error(Model& model, const SampleBatch& batch, const std::vector<ModalityTag>& tags) {
    return batch_token_error(model, batch, tags, 0.5, nullptr);
}

EvalResult evaluate(Model& model, const TaskConfig& task, const std::vector<double>& snr_grid,
                    std::uint64_t eval_seed, int n_batches, int batch_size) {
    return evaluate_impl(model, task, snr_grid, eval_seed, n_batches, batch_size, 0.5, nullptr);
}

// ---------------------------------------------------------- analyze_load

LoadReport analyze_load(Model& model, const TaskConfig& task, const std::vector<double>& snr_grid,
                        std::uint64_t eval_seed, int n_batches, int batch_size,
                        const std::vector<double>* force_q) {
    check_compat(model, task);
    Strategy strategy = model.config().moe.strategy;
    int n_layers = model.config().n_decoder_layers;
    int n_groups = strategy == Strategy::Flat ? 1 : model.config().moe.n_groups;
    int epg = model.config().moe.experts_per_group;

    LoadReport report;

    // Expert frequencies weighted by the inter-modal mass, per input condition.
    struct Cond {
        ModalityTag tag;
        const char* name;
    };
    const Cond conds[] = {{ModalityTag::AudioOnly, "audio_only"},
                          {ModalityTag::VideoOnly, "video_only"},
                          {ModalityTag::AudioVisual, "audio_visual"}};
    Codebook cb = make_codebook(task);
    for (std::size_t ci = 0; ci < 3; ++ci) {
        TaskConfig clean = task;
        clean.sigma_audio = 0.0;  // condition rows use clean audio
        clean.snr_db.reset();

        std::vector<std::vector<double>> freq(
            static_cast<std::size_t>(n_layers),
            std::vector<double>(static_cast<std::size_t>(n_groups * epg), 0.0));
        int total_tokens = 0;
        for (int b = 0; b < n_batches; ++b) {
            SampleBatch batch = generate_batch(clean, cb, batch_size,
                                               mix_seed(eval_seed, 0x70 + ci, static_cast<std::uint64_t>(b)));
            std::vector<ModalityTag> tags(static_cast<std::size_t>(batch_size), conds[ci].tag);
            Tape tape;
            EncodedSequence enc = model.encode(tape, batch.audio, batch.video, tags);
            ForwardResult fwd = model.forward(tape, enc, batch.targets, 0.5, force_q);
            for (int l = 0; l < n_layers; ++l) {
                const ExpertSelection& sel = fwd.selections[static_cast<std::size_t>(l)];
                for (const auto& token_slots : sel.slots) {
                    for (const SlotRef& s : token_slots) {
                        freq[static_cast<std::size_t>(l)]
                            [static_cast<std::size_t>(s.group * epg + s.expert)] += s.weight;
                    }
                }
            }
            total_tokens += batch_size * clean.seq_len;
        }
        for (int l = 0; l < n_layers; ++l) {
            for (int g = 0; g < n_groups; ++g) {
                for (int e = 0; e < epg; ++e) {
                    LoadReportRow row;
                    row.kind = "expert";
                    row.layer = l;
                    row.condition = conds[ci].name;
                    row.group = g;
                    row.expert = e;
                    row.value = freq[static_cast<std::size_t>(l)]
                                    [static_cast<std::size_t>(g * epg + e)] / total_tokens;
                    report.rows.push_back(row);
                }
            }
        }
    }

    // Group token-mass share per SNR on audio-visual inputs (needs groups).
    if (strategy != Strategy::Flat) {
        for (double snr : snr_grid) {
            std::vector<std::vector<double>> mass(
                static_cast<std::size_t>(n_layers),
                std::vector<double>(static_cast<std::size_t>(n_groups), 0.0));
            int total_tokens = 0;
            for (int b = 0; b < n_batches; ++b) {
                SampleBatch batch = generate_eval_batch(task, cb, batch_size, snr,
                                                        mix_seed(eval_seed, 0xE2, static_cast<std::uint64_t>(b)));
                std::vector<ModalityTag> tags(static_cast<std::size_t>(batch_size),
                                              ModalityTag::AudioVisual);
                Tape tape;
                EncodedSequence enc = model.encode(tape, batch.audio, batch.video, tags);
                ForwardResult fwd = model.forward(tape, enc, batch.targets, 0.5, force_q);
                for (int l = 0; l < n_layers; ++l) {
                    const ExpertSelection& sel = fwd.selections[static_cast<std::size_t>(l)];
                    for (const auto& token_mass : sel.group_mass) {
                        for (int g = 0; g < n_groups; ++g) {
                            mass[static_cast<std::size_t>(l)][static_cast<std::size_t>(g)] +=
                                token_mass[static_cast<std::size_t>(g)];
                        }
                    }
                }
                total_tokens += batch_size * task.seq_len;
            }
            for (int l = 0; l < n_layers; ++l) {
                for (int g = 0; g < n_groups; ++g) {
                    LoadReportRow row;
                    row.kind = "group";
                    row.layer = l;
                    row.condition = "audio_visual";
                    row.snr_db = snr;
                    row.group = g;
                    row.value = mass[static_cast<std::size_t>(l)][static_cast<std::size_t>(g)] /
                                total_tokens;
                    report.rows.push_back(row);
                }
            }
        }
    }
    return report;
}

// ----------------------------------------------------------------- sweep

SweepResult hard_weight_sweep(Model& model, const TaskConfig& task,
                              const std::vector<double>& audio_weights,
                              const std::vector<double>& snr_grid, std::uint64_t eval_seed,
                              int n_batches, int batch_size) {
    if (model.config().moe.strategy != Strategy::Hard) {
        throw ConfigError("hard_weight_sweep needs a hard-routing checkpoint");
    }
    SweepResult result;
    for (double w : audio_weights) {
        EvalResult ev = evaluate_impl(model, task, snr_grid, eval_seed, n_batches, batch_size, w,
                                      nullptr);
        for (const EvalRow& row : ev.rows) {
            result.rows.push_back(SweepRow{w, row.snr_db, row.token_error});
        }
    }
    return result;
}

// ----------------------------------------------------------------- train

TrainResult train(const RunConfig& run) {
    run.train.validate();
    run.task.validate();
    run.model.validate();
    if (run.task.seq_len > run.model.max_positions) {
        throw ConfigError("task seq_len exceeds model max_positions");
    }

    namespace fs = std::filesystem;
    fs::create_directories(run.train.out_dir);
    std::string metrics_path = run.train.out_dir + "/metrics.csv";
    std::string ckpt_path = run.train.out_dir + "/checkpoint.bin";
    {
        std::ofstream cfg_os(run.train.out_dir + "/config.txt", std::ios::trunc);
        cfg_os << run_config_text(run);
    }

    Model model(run.model);
    AdamState adam = adam_init(model.params());
    Codebook cb = make_codebook(run.task);
    std::mt19937_64 dropout_rng(mix_seed(run.train.seed, 0x80, 0));

    int n_groups = run.model.moe.strategy == Strategy::Flat ? 0 : run.model.moe.n_groups;
    std::vector<std::string> header = {"step", "l_ce", "l_b", "l_s", "l_z", "l_tot"};
    for (int l = 0; l < run.model.n_decoder_layers; ++l) {
        for (int g = 0; g < n_groups; ++g) {
            header.push_back("l" + std::to_string(l) + "_g" + std::to_string(g) + "_share");
        }
    }

    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open " + metrics_path);
    for (std::size_t i = 0; i < header.size(); ++i) metrics << (i ? "," : "") << header[i];
    metrics << "\n";

    std::string run_text = run_config_text(run, /*include_output_paths=*/false);
    auto save = [&](const std::string& rng_state) {
        save_checkpoint(ckpt_path, model, &adam, rng_state, run_text);
    };

    TrainResult result;
    result.checkpoint_path = ckpt_path;
    result.metrics_path = metrics_path;

    std::ostringstream rng_text;
    rng_text << dropout_rng;
    if (run.train.steps == 0) {
        save(rng_text.str());  // checkpoint equals initialization
        return result;
    }

    bool have_good_ckpt = false;
    for (int step = 0; step < run.train.steps; ++step) {
        SampleBatch batch = generate_train_batch(run.task, cb, run.train.batch_size,
                                                 static_cast<std::uint64_t>(step));
        std::vector<ModalityTag> tags = modality_dropout(run.train.batch_size,
                                                         run.model.dropout_prob,
                                                         run.model.dropout_audio_frac, dropout_rng);
        LossBreakdown bd;
        try {
            Tape tape;
            EncodedSequence enc = model.encode(tape, batch.audio, batch.video, tags);
            ForwardResult fwd = model.forward(tape, enc, batch.targets);
            bd = model.losses(tape, fwd, batch.targets, run.train.weights);
            zero_grads(model.params());
            tape.backward(bd.total);
            adam_step(model.params(), adam, run.train.adam);

            if (step % run.train.metrics_every == 0 || step == run.train.steps - 1) {
                metrics << step << "," << csv_double(bd.ce) << "," << csv_double(bd.lb) << ","
                        << csv_double(bd.ls) << "," << csv_double(bd.lz) << ","
                        << csv_double(bd.tot);
                for (int l = 0; l < run.model.n_decoder_layers; ++l) {
                    const ExpertSelection& sel = fwd.selections[static_cast<std::size_t>(l)];
                    for (int g = 0; g < n_groups; ++g) {
                        double share = 0.0;
                        for (const auto& tm : sel.group_mass) share += tm[static_cast<std::size_t>(g)];
                        metrics << "," << csv_double(share / sel.n_tokens);
                    }
                }
                metrics << "\n";
            }
        } catch (const NumericError&) {
            // Divergence: keep the last good checkpoint as the final artifact.
            metrics.flush();
            if (!have_good_ckpt) {
                Model fresh(run.model);
                AdamState fresh_adam = adam_init(fresh.params());
                save_checkpoint(ckpt_path, fresh, &fresh_adam, "", run_text);
            }
            result.diverged = true;
            result.steps_run = step;
            return result;
        }
        result.final_losses = bd;
        result.steps_run = step + 1;

        if ((step + 1) % run.train.checkpoint_interval == 0) {
            std::ostringstream rt;
            rt << dropout_rng;
            save(rt.str());
            have_good_ckpt = true;
        }
    }
    std::ostringstream rt;
    rt << dropout_rng;
    save(rt.str());
    return result;
}

// ---------------------------------------------------------------- config

RunConfig default_run_config() {
    RunConfig cfg;
    finalize_run_config(cfg);
    return cfg;
}

void finalize_run_config(RunConfig& cfg) {
    cfg.model.moe.d_model = cfg.model.d_model;
    cfg.model.moe.d_ff = cfg.model.d_ff;
    cfg.model.vocab_size = cfg.task.vocab;
    cfg.model.d_audio = cfg.task.d_audio;
    cfg.model.d_video = cfg.task.d_video;
    if (cfg.model.max_positions < cfg.task.seq_len) cfg.model.max_positions = cfg.task.seq_len;
    if (static_cast<int>(cfg.model.moe.k_within.size()) != cfg.model.moe.n_groups) {
        cfg.model.moe.k_within.assign(static_cast<std::size_t>(cfg.model.moe.n_groups),
                                      cfg.model.moe.k_within.empty() ? 1 : cfg.model.moe.k_within[0]);
    }
}

namespace {

bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError("expected boolean, got '" + v + "'");
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

Strategy parse_strategy_name(const std::string& v) {
    if (v == "flat") return Strategy::Flat;
    if (v == "hard") return Strategy::Hard;
    if (v == "hierarchical" || v == "hier") return Strategy::Hierarchical;
    throw ConfigError("unknown strategy '" + v + "'");
}

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += csv_double(v[i]);
    }
    return out;
}

std::string join_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "seed") {
            std::uint64_t s = std::stoull(value);
            cfg.model.seed = s;
            cfg.task.seed = s;
            cfg.train.seed = s;
        } else if (key == "model.d_model") cfg.model.d_model = std::stoi(value);
        else if (key == "model.d_ff") cfg.model.d_ff = std::stoi(value);
        else if (key == "model.layers") cfg.model.n_decoder_layers = std::stoi(value);
        else if (key == "model.heads") cfg.model.n_heads = std::stoi(value);
        else if (key == "model.max_positions") cfg.model.max_positions = std::stoi(value);
        else if (key == "model.dropout") cfg.model.dropout_prob = std::stod(value);
        else if (key == "model.dropout_audio_frac") cfg.model.dropout_audio_frac = std::stod(value);
        else if (key == "model.activation") {
            if (value == "relu") cfg.model.act = Activation::Relu;
            else if (value == "gelu") cfg.model.act = Activation::Gelu;
            else throw ConfigError("unknown activation '" + value + "'");
        }
        else if (key == "model.self_attention") cfg.model.use_self_attention = parse_bool(value);
        else if (key == "model.seed") cfg.model.seed = std::stoull(value);
        else if (key == "model.moe.strategy") cfg.model.moe.strategy = parse_strategy_name(value);
        else if (key == "model.moe.n_groups") cfg.model.moe.n_groups = std::stoi(value);
        else if (key == "model.moe.experts_per_group") cfg.model.moe.experts_per_group = std::stoi(value);
        else if (key == "model.moe.k_flat") cfg.model.moe.k_flat = std::stoi(value);
        else if (key == "model.moe.m_groups") cfg.model.moe.m_groups = std::stoi(value);
        else if (key == "model.moe.k_within") cfg.model.moe.k_within = parse_int_list(value);
        else if (key == "task.vocab") cfg.task.vocab = std::stoi(value);
        else if (key == "task.clusters") cfg.task.clusters = std::stoi(value);
        else if (key == "task.seq_len") cfg.task.seq_len = std::stoi(value);
        else if (key == "task.d_audio") cfg.task.d_audio = std::stoi(value);
        else if (key == "task.d_video") cfg.task.d_video = std::stoi(value);
        else if (key == "task.sigma_audio") cfg.task.sigma_audio = std::stod(value);
        else if (key == "task.sigma_video") cfg.task.sigma_video = std::stod(value);
        else if (key == "task.snr_db") cfg.task.snr_db = std::stod(value);
        else if (key == "task.train_noisy_frac") cfg.task.train_noisy_frac = std::stod(value);
        else if (key == "task.train_snr_mean_db") cfg.task.train_snr_mean_db = std::stod(value);
        else if (key == "task.train_snr_std_db") cfg.task.train_snr_std_db = std::stod(value);
        else if (key == "task.seed") cfg.task.seed = std::stoull(value);
        else if (key == "train.steps") cfg.train.steps = std::stoi(value);
        else if (key == "train.batch_size") cfg.train.batch_size = std::stoi(value);
        else if (key == "train.lr") cfg.train.adam.lr = std::stod(value);
        else if (key == "train.beta1") cfg.train.adam.beta1 = std::stod(value);
        else if (key == "train.beta2") cfg.train.adam.beta2 = std::stod(value);
        else if (key == "train.eps") cfg.train.adam.eps = std::stod(value);
        else if (key == "train.c_b") cfg.train.weights.c_B = std::stod(value);
        else if (key == "train.c_s") cfg.train.weights.c_S = std::stod(value);
        else if (key == "train.c_z") cfg.train.weights.c_Z = std::stod(value);
        else if (key == "train.z_on_flat") cfg.train.weights.z_on_flat = parse_bool(value);
        else if (key == "train.z_on_intra") cfg.train.weights.z_on_intra = parse_bool(value);
        else if (key == "train.z_on_inter") cfg.train.weights.z_on_inter = parse_bool(value);
        else if (key == "train.eval_snr_grid") cfg.train.eval_snr_grid = parse_double_list(value);
        else if (key == "train.seed") cfg.train.seed = std::stoull(value);
        else if (key == "train.out_dir") cfg.train.out_dir = value;
        else if (key == "train.checkpoint_interval") cfg.train.checkpoint_interval = std::stoi(value);
        else if (key == "train.eval_batches") cfg.train.eval_batches = std::stoi(value);
        else if (key == "train.eval_batch_size") cfg.train.eval_batch_size = std::stoi(value);
        else if (key == "train.metrics_every") cfg.train.metrics_every = std::stoi(value);
        else throw ConfigError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad value '" + value + "' for key '" + key + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("value out of range for key '" + key + "'");
    }
}

RunConfig load_run_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    RunConfig cfg;
    for (const auto& [k, v] : parse_kv_lines(ss.str())) apply_kv(cfg, k, v);
    finalize_run_config(cfg);
    return cfg;
}

std::string run_config_text(const RunConfig& cfg, bool include_output_paths) {
    std::string t;
    t += "model.d_model=" + std::to_string(cfg.model.d_model) + "\n";
    t += "model.d_ff=" + std::to_string(cfg.model.d_ff) + "\n";
    t += "model.layers=" + std::to_string(cfg.model.n_decoder_layers) + "\n";
    t += "model.heads=" + std::to_string(cfg.model.n_heads) + "\n";
    t += "model.max_positions=" + std::to_string(cfg.model.max_positions) + "\n";
    t += "model.dropout=" + format_double(cfg.model.dropout_prob) + "\n";
    t += "model.dropout_audio_frac=" + format_double(cfg.model.dropout_audio_frac) + "\n";
    t += std::string("model.activation=") + (cfg.model.act == Activation::Relu ? "relu" : "gelu") + "\n";
    t += std::string("model.self_attention=") + (cfg.model.use_self_attention ? "1" : "0") + "\n";
    t += "model.seed=" + std::to_string(cfg.model.seed) + "\n";
    const char* strat = cfg.model.moe.strategy == Strategy::Flat
                            ? "flat"
                            : cfg.model.moe.strategy == Strategy::Hard ? "hard" : "hierarchical";
    t += std::string("model.moe.strategy=") + strat + "\n";
    t += "model.moe.n_groups=" + std::to_string(cfg.model.moe.n_groups) + "\n";
    t += "model.moe.experts_per_group=" + std::to_string(cfg.model.moe.experts_per_group) + "\n";
    t += "model.moe.k_flat=" + std::to_string(cfg.model.moe.k_flat) + "\n";
    t += "model.moe.m_groups=" + std::to_string(cfg.model.moe.m_groups) + "\n";
    t += "model.moe.k_within=" + join_int_list(cfg.model.moe.k_within) + "\n";
    t += "task.vocab=" + std::to_string(cfg.task.vocab) + "\n";
    t += "task.clusters=" + std::to_string(cfg.task.clusters) + "\n";
    t += "task.seq_len=" + std::to_string(cfg.task.seq_len) + "\n";
    t += "task.d_audio=" + std::to_string(cfg.task.d_audio) + "\n";
    t += "task.d_video=" + std::to_string(cfg.task.d_video) + "\n";
    t += "task.sigma_audio=" + format_double(cfg.task.sigma_audio) + "\n";
    t += "task.sigma_video=" + format_double(cfg.task.sigma_video) + "\n";
    if (cfg.task.snr_db) t += "task.snr_db=" + format_double(*cfg.task.snr_db) + "\n";
    t += "task.train_noisy_frac=" + format_double(cfg.task.train_noisy_frac) + "\n";
    t += "task.train_snr_mean_db=" + format_double(cfg.task.train_snr_mean_db) + "\n";
    t += "task.train_snr_std_db=" + format_double(cfg.task.train_snr_std_db) + "\n";
    t += "task.seed=" + std::to_string(cfg.task.seed) + "\n";
    t += "train.steps=" + std::to_string(cfg.train.steps) + "\n";
    t += "train.batch_size=" + std::to_string(cfg.train.batch_size) + "\n";
    t += "train.lr=" + format_double(cfg.train.adam.lr) + "\n";
    t += "train.beta1=" + format_double(cfg.train.adam.beta1) + "\n";
    t += "train.beta2=" + format_double(cfg.train.adam.beta2) + "\n";
    t += "train.eps=" + format_double(cfg.train.adam.eps) + "\n";
    t += "train.c_b=" + format_double(cfg.train.weights.c_B) + "\n";
    t += "train.c_s=" + format_double(cfg.train.weights.c_S) + "\n";
    t += "train.c_z=" + format_double(cfg.train.weights.c_Z) + "\n";
    t += std::string("train.z_on_flat=") + (cfg.train.weights.z_on_flat ? "1" : "0") + "\n";
    t += std::string("train.z_on_intra=") + (cfg.train.weights.z_on_intra ? "1" : "0") + "\n";
    t += std::string("train.z_on_inter=") + (cfg.train.weights.z_on_inter ? "1" : "0") + "\n";
    t += "train.eval_snr_grid=" + join_doubles(cfg.train.eval_snr_grid) + "\n";
    t += "train.seed=" + std::to_string(cfg.train.seed) + "\n";
    if (include_output_paths) t += "train.out_dir=" + cfg.train.out_dir + "\n";
    t += "train.checkpoint_interval=" + std::to_string(cfg.train.checkpoint_interval) + "\n";
    t += "train.eval_batches=" + std::to_string(cfg.train.eval_batches) + "\n";
    t += "train.eval_batch_size=" + std::to_string(cfg.train.eval_batch_size) + "\n";
    t += "train.metrics_every=" + std::to_string(cfg.train.metrics_every) + "\n";
    return t;
}

}  // namespace hmoe
