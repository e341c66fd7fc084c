#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "hmoe/synthdata.hpp"

using namespace hmoe;

TEST_CASE("snr to sigma closed form") {
    CHECK(snr_to_sigma(0.0, 1.0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(snr_to_sigma(20.0, 1.0) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(snr_to_sigma(-20.0, 1.0) == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(snr_to_sigma(-10.0, 0.25) == doctest::Approx(0.25 * std::sqrt(10.0)).epsilon(1e-12));
    CHECK_THROWS_AS(snr_to_sigma(std::numeric_limits<double>::infinity(), 1.0), NumericError);
}

TEST_CASE("config validation") {
    TaskConfig cfg;
    cfg.vocab = 30;
    cfg.clusters = 8;  // 30 % 8 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.vocab = 32;
    CHECK_NOTHROW(cfg.validate());
    cfg.clusters = 32;  // C must be < V
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("noiseless batch reproduces the token codes exactly") {
    TaskConfig cfg;
    cfg.sigma_audio = 0.0;
    cfg.sigma_video = 0.0;
    cfg.seed = 5;
    Codebook cb = make_codebook(cfg);
    SampleBatch batch = generate_batch(cfg, cb, 8, 0);
    int errors = 0;
    for (int row = 0; row < batch.audio.rows(); ++row) {
        int t = batch.targets[static_cast<std::size_t>(row)];
        for (int j = 0; j < cfg.d_audio; ++j) {
            CHECK(batch.audio.at(row, j) == cb.token_codes.at(t, j));
        }
        if (nearest_code(cb.token_codes, batch.audio.data.data() +
                         static_cast<std::size_t>(row) * cfg.d_audio) != t) ++errors;
    }
    CHECK(errors == 0);
}

TEST_CASE("destroyed audio leaves only cluster information") {
    TaskConfig cfg;
    cfg.sigma_audio = 1e3;
    cfg.sigma_video = 0.0;
    cfg.seed = 9;
    Codebook cb = make_codebook(cfg);
    // 10000 tokens
    SampleBatch batch = generate_batch(cfg, cb, 10000 / cfg.seq_len + 1, 0);
    int rows = batch.audio.rows();
    int cluster_errors = 0;
    int token_errors = 0;
    for (int row = 0; row < rows; ++row) {
        int t = batch.targets[static_cast<std::size_t>(row)];
        int c = nearest_code(cb.cluster_codes,
                             batch.video.data.data() + static_cast<std::size_t>(row) * cfg.d_video);
        if (c != t % cfg.clusters) ++cluster_errors;
        // cluster-informed guess: the canonical token of the observed cluster
        if (c != t) ++token_errors;
    }
    CHECK(cluster_errors == 0);  // clean video identifies the cluster perfectly
    double token_err = static_cast<double>(token_errors) / rows;
    double floor = 1.0 - 1.0 / (static_cast<double>(cfg.vocab) / cfg.clusters);
    CHECK(std::fabs(token_err - floor) < 0.02);
}

TEST_CASE("generation is deterministic per seed and batch index") {
    TaskConfig cfg;
    cfg.sigma_audio = 0.3;
    cfg.seed = 123;
    Codebook cb = make_codebook(cfg);
    SampleBatch a = generate_batch(cfg, cb, 4, 7);
    SampleBatch b = generate_batch(cfg, cb, 4, 7);
    CHECK(a.targets == b.targets);
    CHECK(a.audio.data == b.audio.data);
    CHECK(a.video.data == b.video.data);

    SampleBatch c = generate_batch(cfg, cb, 4, 8);
    CHECK(a.audio.data != c.audio.data);

    SampleBatch t1 = generate_train_batch(cfg, cb, 16, 3);
    SampleBatch t2 = generate_train_batch(cfg, cb, 16, 3);
    CHECK(t1.audio.data == t2.audio.data);
    CHECK(t1.audio_sigma == t2.audio_sigma);
}

TEST_CASE("train protocol noises about a quarter of sequences") {
    TaskConfig cfg;
    cfg.seed = 77;
    cfg.seq_len = 2;  // keep the batch cheap
    Codebook cb = make_codebook(cfg);
    int noisy = 0, total = 0;
    for (std::uint64_t step = 0; step < 100; ++step) {
        SampleBatch b = generate_train_batch(cfg, cb, 100, step);
        for (double s : b.audio_sigma) {
            noisy += s > 0.0 ? 1 : 0;
            ++total;
        }
    }
    double frac = static_cast<double>(noisy) / total;
    CHECK(std::fabs(frac - 0.25) < 0.02);
}

TEST_CASE("noise is zero-mean around the codes") {
    TaskConfig cfg;
    cfg.vocab = 4;
    cfg.clusters = 2;
    cfg.seq_len = 10;
    cfg.sigma_audio = 0.5;
    cfg.seed = 31;
    Codebook cb = make_codebook(cfg);
    // ~1e5 frames
    SampleBatch batch = generate_batch(cfg, cb, 10000, 0);
    std::vector<std::vector<double>> sums(4, std::vector<double>(static_cast<std::size_t>(cfg.d_audio), 0.0));
    std::vector<int> counts(4, 0);
    for (int row = 0; row < batch.audio.rows(); ++row) {
        int t = batch.targets[static_cast<std::size_t>(row)];
        counts[static_cast<std::size_t>(t)]++;
        for (int j = 0; j < cfg.d_audio; ++j) {
            sums[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] += batch.audio.at(row, j);
        }
    }
    for (int t = 0; t < 4; ++t) {
        REQUIRE(counts[static_cast<std::size_t>(t)] > 1000);
        double bound = 3.0 * cfg.sigma_audio / std::sqrt(static_cast<double>(counts[static_cast<std::size_t>(t)]));
        double mean_dev = 0.0;
        for (int j = 0; j < cfg.d_audio; ++j) {
            double mean = sums[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] /
                          counts[static_cast<std::size_t>(t)];
            mean_dev += std::fabs(mean - cb.token_codes.at(t, j));
        }
        mean_dev /= cfg.d_audio;
        CHECK(mean_dev < bound);
    }
}

TEST_CASE("dataset dump and load round-trips") {
    TaskConfig cfg;
    cfg.sigma_audio = 0.2;
    cfg.seed = 55;
    Codebook cb = make_codebook(cfg);
    SampleBatch batch = generate_eval_batch(cfg, cb, 3, -5.0, 2);
    std::string path = "synthdata_roundtrip.bin";
    dump_batch(path, cfg, batch);
    TaskConfig loaded_cfg;
    SampleBatch loaded = load_batch(path, &loaded_cfg);
    CHECK(loaded.targets == batch.targets);
    CHECK(loaded.audio.data == batch.audio.data);
    CHECK(loaded.video.data == batch.video.data);
    CHECK(loaded.audio_sigma == batch.audio_sigma);
    CHECK(loaded_cfg.vocab == cfg.vocab);
    CHECK(loaded_cfg.seq_len == cfg.seq_len);
    std::remove(path.c_str());
}
