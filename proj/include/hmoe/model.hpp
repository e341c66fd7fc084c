#pragma once

#include <deque>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmoe/losses.hpp"
#include "hmoe/routing.hpp"
#include "hmoe/synthdata.hpp"
#include "hmoe/tape.hpp"

namespace hmoe {

struct ModelConfig {
    int d_model = 64;
    int d_ff = 256;  // 4 * d_model by default
    int n_decoder_layers = 2;
    int vocab_size = 32;
    int n_heads = 1;  // fixed single-head
    int d_audio = 16;
    int d_video = 16;
    int max_positions = 64;
    MoEConfig moe;
    double dropout_prob = 0.25;        // total unimodal fraction
    double dropout_audio_frac = 0.5;   // P(audio-only | dropped)
    Activation act = Activation::Gelu;
    bool use_self_attention = false;
    std::uint64_t seed = 0;

    void validate() const;
};

// Fused per-frame audio-visual embeddings with the drop mask that produced
// them. A dropped modality contributes an exact zero tensor.
struct EncodedSequence {
    Var enc;  // (n_sequences * frames) x d_model
    int n_sequences = 0;
    int frames = 0;
    std::vector<ModalityTag> tags;  // per sequence
};

struct ForwardResult {
    Var logits;  // (n_tokens x vocab)
    std::vector<ExpertSelection> selections;     // per MoE layer
    std::vector<ModalityTag> token_tags;         // per token
    int n_sequences = 0;
    int frames = 0;
};

// Per-sequence modality dropout: with probability p the sequence becomes
// unimodal; audio-only vs video-only is then chosen with audio_frac.
std::vector<ModalityTag> modality_dropout(int n_sequences, double p, double audio_frac,
                                          std::mt19937_64& rng);

// Toy multimodal encoder-decoder. The decoder replaces every FFN with an MoE
// layer: [token embedding -> single-head cross-attention over the encoded
// frames -> MoE FFN] x n_layers with residual connections, then an output
// projection. Learned positions enter the decoder queries and attention keys.
class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<Param*>& params() { return order_; }
    Param& param(const std::string& name);
    bool has_param(const std::string& name) const;
    std::int64_t n_params() const;

    EncodedSequence encode(Tape& tape, const Tensor& audio, const Tensor& video,
                           const std::vector<ModalityTag>& tags);

    // Teacher forcing: position t consumes target t-1 (BOS at t=0).
    // av_audio_weight overrides the hard-routing AV split; force_q overrides
    // the hierarchical inter-modal weights (both analysis-only).
    ForwardResult forward(Tape& tape, const EncodedSequence& enc, const std::vector<int>& targets,
                          double av_audio_weight = 0.5, const std::vector<double>* force_q = nullptr);

    // Cross-entropy plus per-layer auxiliary losses for a completed forward.
    LossBreakdown losses(Tape& tape, const ForwardResult& fwd, const std::vector<int>& targets,
                         const LossWeights& weights);

private:
    ModelConfig cfg_;
    std::deque<Param> store_;
    std::vector<Param*> order_;
    std::unordered_map<std::string, Param*> by_name_;

    struct Layer {
        Param* wq = nullptr;
        Param* wk = nullptr;
        Param* wv = nullptr;
        Param* wo = nullptr;
        Param* sq = nullptr;  // optional causal self-attention
        Param* sk = nullptr;
        Param* sv = nullptr;
        Param* so = nullptr;
        RouterBank routers;
        ExpertBank experts;
    };
    std::vector<Layer> layers_;
    Param* enc_audio_ = nullptr;
    Param* enc_video_ = nullptr;
    Param* enc_pos_ = nullptr;
    Param* dec_embed_ = nullptr;  // (vocab+1) x d_model, last row is BOS
    Param* dec_pos_ = nullptr;
    Param* head_ = nullptr;

    Param* add_param(const std::string& name, std::vector<int> shape);
    void init_params();
};

}  // namespace hmoe
