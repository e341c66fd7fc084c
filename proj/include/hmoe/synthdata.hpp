#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmoe/tensor.hpp"

namespace hmoe {

// Two-modality transcription task. Audio features identify the token up to
// noise; video features identify only its cluster (token mod n_clusters), so
// the video channel carries genuinely partial information.
struct TaskConfig {
    int vocab = 32;
    int clusters = 8;
    int seq_len = 24;
    int d_audio = 16;
    int d_video = 16;
    double sigma_audio = 0.0;
    double sigma_video = 0.1;
    std::optional<double> snr_db;  // when set, overrides sigma_audio via snr_to_sigma
    std::uint64_t seed = 0;

    // Training noise protocol: this fraction of training sequences gets audio
    // noise with SNR drawn from Normal(mean_db, std_db^2); the rest stay clean.
    double train_noisy_frac = 0.25;
    double train_snr_mean_db = 0.0;
    double train_snr_std_db = 5.0;

    void validate() const;
};

// Frozen per-seed code vectors (unit rows).
struct Codebook {
    Tensor token_codes;    // vocab x d_audio
    Tensor cluster_codes;  // clusters x d_video
};

struct SampleBatch {
    int n_sequences = 0;
    int seq_len = 0;
    std::vector<int> targets;           // n_sequences * seq_len
    Tensor audio;                       // (n_sequences*seq_len) x d_audio
    Tensor video;                       // (n_sequences*seq_len) x d_video
    std::vector<double> audio_sigma;    // noise record per sequence
};

double snr_to_sigma(double snr_db, double signal_rms);

Codebook make_codebook(const TaskConfig& cfg);

// Per-component RMS of the clean audio features (the SNR reference signal).
double audio_signal_rms(const TaskConfig& cfg);

// Fixed-noise batch (cfg.sigma_audio / cfg.sigma_video, or cfg.snr_db when
// set). Deterministic per (cfg.seed, batch_index).
SampleBatch generate_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                           std::uint64_t batch_index);

// Training protocol batch: train_noisy_frac of the sequences get audio noise
// at SNR ~ Normal(train_snr_mean_db, train_snr_std_db^2), the rest are clean.
SampleBatch generate_train_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                                 std::uint64_t step);

// Evaluation batch with every sequence at the given SNR.
SampleBatch generate_eval_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                                double snr_db, std::uint64_t batch_index);

// Nearest-code classification (test oracle): index of the closest code row.
int nearest_code(const Tensor& codes, const double* feature);

// Exact replay: batch dump/load in the tensor-container format with a
// TaskConfig header.
void dump_batch(const std::string& path, const TaskConfig& cfg, const SampleBatch& batch);
SampleBatch load_batch(const std::string& path, TaskConfig* cfg_out = nullptr);

// Derives an independent RNG stream from (seed, stream, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace hmoe
