#include "hmoe/synthdata.hpp"

#include <cmath>
#include <random>

#include "hmoe/checkpoint.hpp"

namespace hmoe {

void TaskConfig::validate() const {
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (clusters < 1 || clusters >= vocab) throw ConfigError("clusters must satisfy 1 <= C < V");
    if (vocab % clusters != 0) throw ConfigError("vocab must be divisible by clusters");
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (d_audio < 1 || d_video < 1) throw ConfigError("feature dims must be >= 1");
    if (sigma_audio < 0 || sigma_video < 0) throw ConfigError("noise sigmas must be >= 0");
    if (!(train_noisy_frac >= 0.0 && train_noisy_frac <= 1.0)) {
        throw ConfigError("train_noisy_frac must lie in [0, 1]");
    }
}

double snr_to_sigma(double snr_db, double signal_rms) {
    if (!std::isfinite(snr_db) || !std::isfinite(signal_rms)) {
        throw NumericError("snr_to_sigma with non-finite input");
    }
    return signal_rms * std::pow(10.0, -snr_db / 20.0);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1) + 0xBF58476D1CE4E5B9ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

constexpr std::uint64_t kCodebookStream = 0x10;
constexpr std::uint64_t kBatchStream = 0x20;
constexpr std::uint64_t kTrainStream = 0x30;
constexpr std::uint64_t kEvalStream = 0x40;

Tensor unit_codes(int n, int d, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor codes = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        double norm2 = 0.0;
        for (int j = 0; j < d; ++j) {
            codes.at(i, j) = dist(rng);
            norm2 += codes.at(i, j) * codes.at(i, j);
        }
        double inv = 1.0 / std::sqrt(norm2);
        for (int j = 0; j < d; ++j) codes.at(i, j) *= inv;
    }
    return codes;
}

SampleBatch fill_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                       std::mt19937_64& rng, const std::vector<double>& sigma_per_seq) {
    SampleBatch batch;
    batch.n_sequences = n_sequences;
    batch.seq_len = cfg.seq_len;
    batch.audio_sigma = sigma_per_seq;
    int rows = n_sequences * cfg.seq_len;
    batch.targets.resize(static_cast<std::size_t>(rows));
    batch.audio = Tensor::zeros({rows, cfg.d_audio});
    batch.video = Tensor::zeros({rows, cfg.d_video});

    std::uniform_int_distribution<int> tok(0, cfg.vocab - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int s = 0; s < n_sequences; ++s) {
        double sa = sigma_per_seq[static_cast<std::size_t>(s)];
        for (int f = 0; f < cfg.seq_len; ++f) {
            int row = s * cfg.seq_len + f;
            int t = tok(rng);
            batch.targets[static_cast<std::size_t>(row)] = t;
            int c = t % cfg.clusters;
            for (int j = 0; j < cfg.d_audio; ++j) {
                batch.audio.at(row, j) = cb.token_codes.at(t, j) + sa * noise(rng);
            }
            for (int j = 0; j < cfg.d_video; ++j) {
                batch.video.at(row, j) = cb.cluster_codes.at(c, j) + cfg.sigma_video * noise(rng);
            }
        }
    }
    return batch;
}

}  // namespace

Codebook make_codebook(const TaskConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, kCodebookStream, 0));
    Codebook cb;
    cb.token_codes = unit_codes(cfg.vocab, cfg.d_audio, rng);
    cb.cluster_codes = unit_codes(cfg.clusters, cfg.d_video, rng);
    return cb;
}

double audio_signal_rms(const TaskConfig& cfg) {
    // Unit-norm rows: mean squared component is exactly 1/d.
    return 1.0 / std::sqrt(static_cast<double>(cfg.d_audio));
}

SampleBatch generate_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                           std::uint64_t batch_index) {
    cfg.validate();
    double sigma = cfg.snr_db ? snr_to_sigma(*cfg.snr_db, audio_signal_rms(cfg)) : cfg.sigma_audio;
    std::mt19937_64 rng(mix_seed(cfg.seed, kBatchStream, batch_index));
    std::vector<double> sigmas(static_cast<std::size_t>(n_sequences), sigma);
    return fill_batch(cfg, cb, n_sequences, rng, sigmas);
}

SampleBatch generate_train_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                                 std::uint64_t step) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, kTrainStream, step));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::normal_distribution<double> snr(cfg.train_snr_mean_db, cfg.train_snr_std_db);
    double rms = audio_signal_rms(cfg);
    std::vector<double> sigmas(static_cast<std::size_t>(n_sequences), 0.0);
    for (double& s : sigmas) {
        if (coin(rng) < cfg.train_noisy_frac) s = snr_to_sigma(snr(rng), rms);
    }
    return fill_batch(cfg, cb, n_sequences, rng, sigmas);
}

SampleBatch generate_eval_batch(const TaskConfig& cfg, const Codebook& cb, int n_sequences,
                                double snr_db, std::uint64_t batch_index) {
    cfg.validate();
    // Separate stream per SNR cell so grid cells are independent but replayable.
    std::uint64_t cell = static_cast<std::uint64_t>(static_cast<std::int64_t>(snr_db * 1000.0) + (1 << 20));
    std::mt19937_64 rng(mix_seed(cfg.seed, kEvalStream + cell, batch_index));
    double sigma = snr_to_sigma(snr_db, audio_signal_rms(cfg));
    std::vector<double> sigmas(static_cast<std::size_t>(n_sequences), sigma);
    return fill_batch(cfg, cb, n_sequences, rng, sigmas);
}

int nearest_code(const Tensor& codes, const double* feature) {
    int best = -1;
    double best_d = 0.0;
    for (int i = 0; i < codes.rows(); ++i) {
        double d2 = 0.0;
        for (int j = 0; j < codes.cols(); ++j) {
            double diff = codes.at(i, j) - feature[j];
            d2 += diff * diff;
        }
        if (best < 0 || d2 < best_d) {
            best = i;
            best_d = d2;
        }
    }
    return best;
}

void dump_batch(const std::string& path, const TaskConfig& cfg, const SampleBatch& batch) {
    TensorContainer c;
    std::string text;
    text += "kind=dataset\n";
    text += "vocab=" + std::to_string(cfg.vocab) + "\n";
    text += "clusters=" + std::to_string(cfg.clusters) + "\n";
    text += "seq_len=" + std::to_string(cfg.seq_len) + "\n";
    text += "d_audio=" + std::to_string(cfg.d_audio) + "\n";
    text += "d_video=" + std::to_string(cfg.d_video) + "\n";
    text += "sigma_audio=" + format_double(cfg.sigma_audio) + "\n";
    text += "sigma_video=" + format_double(cfg.sigma_video) + "\n";
    text += "seed=" + std::to_string(cfg.seed) + "\n";
    text += "n_sequences=" + std::to_string(batch.n_sequences) + "\n";
    c.config_text = std::move(text);

    Tensor targets = Tensor::zeros({static_cast<int>(batch.targets.size())});
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
        targets.data[i] = static_cast<double>(batch.targets[i]);
    }
    Tensor sigmas = Tensor::zeros({static_cast<int>(batch.audio_sigma.size())});
    for (std::size_t i = 0; i < batch.audio_sigma.size(); ++i) sigmas.data[i] = batch.audio_sigma[i];
    c.tensors.emplace_back("targets", std::move(targets));
    c.tensors.emplace_back("audio", batch.audio);
    c.tensors.emplace_back("video", batch.video);
    c.tensors.emplace_back("audio_sigma", std::move(sigmas));
    write_container(path, c);
}

SampleBatch load_batch(const std::string& path, TaskConfig* cfg_out) {
    TensorContainer c = read_container(path);
    TaskConfig cfg;
    int n_sequences = 0;
    bool is_dataset = false;
    for (const auto& [k, v] : parse_kv_lines(c.config_text)) {
        if (k == "kind") is_dataset = (v == "dataset");
        else if (k == "vocab") cfg.vocab = std::stoi(v);
        else if (k == "clusters") cfg.clusters = std::stoi(v);
        else if (k == "seq_len") cfg.seq_len = std::stoi(v);
        else if (k == "d_audio") cfg.d_audio = std::stoi(v);
        else if (k == "d_video") cfg.d_video = std::stoi(v);
        else if (k == "sigma_audio") cfg.sigma_audio = std::stod(v);
        else if (k == "sigma_video") cfg.sigma_video = std::stod(v);
        else if (k == "seed") cfg.seed = std::stoull(v);
        else if (k == "n_sequences") n_sequences = std::stoi(v);
    }
    if (!is_dataset) throw IoError("not a dataset dump: " + path);

    const Tensor* targets = c.find("targets");
    const Tensor* audio = c.find("audio");
    const Tensor* video = c.find("video");
    const Tensor* sigmas = c.find("audio_sigma");
    if (!targets || !audio || !video || !sigmas) throw IoError("dataset dump missing tensors");

    SampleBatch batch;
    batch.n_sequences = n_sequences;
    batch.seq_len = cfg.seq_len;
    batch.audio = *audio;
    batch.video = *video;
    batch.targets.resize(targets->data.size());
    for (std::size_t i = 0; i < targets->data.size(); ++i) {
        batch.targets[i] = static_cast<int>(targets->data[i]);
    }
    batch.audio_sigma.assign(sigmas->data.begin(), sigmas->data.end());
    if (cfg_out) *cfg_out = cfg;
    return batch;
}

}  // namespace hmoe
