#include "hmoe/model.hpp"

#include <cmath>

namespace hmoe {

void ModelConfig::validate() const {
    if (d_model < 1 || d_ff < 1) throw ConfigError("model dims must be positive");
    if (n_decoder_layers < 1) throw ConfigError("need at least one decoder layer");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (n_heads != 1) throw ConfigError("only single-head attention is supported");
    if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("dropout_prob must lie in [0, 1)");
    if (!(dropout_audio_frac >= 0.0 && dropout_audio_frac <= 1.0)) {
        throw ConfigError("dropout_audio_frac must lie in [0, 1]");
    }
    if (moe.d_model != d_model || moe.d_ff != d_ff) {
        throw ConfigError("MoE dims must match the model dims");
    }
    moe.validate();
}

std::vector<ModalityTag> modality_dropout(int n_sequences, double p, double audio_frac,
                                          std::mt19937_64& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout p must lie in [0, 1]");
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<ModalityTag> tags(static_cast<std::size_t>(n_sequences), ModalityTag::AudioVisual);
    for (auto& tag : tags) {
        if (coin(rng) < p) {
            tag = coin(rng) < audio_frac ? ModalityTag::AudioOnly : ModalityTag::VideoOnly;
        }
    }
    return tags;
}

Param* Model::add_param(const std::string& name, std::vector<int> shape) {
    store_.emplace_back(name, Tensor::zeros(std::move(shape)));
    Param* p = &store_.back();
    order_.push_back(p);
    by_name_.emplace(name, p);
    return p;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int d = cfg_.d_model;

    enc_audio_ = add_param("enc.audio_proj", {cfg_.d_audio, d});
    enc_video_ = add_param("enc.video_proj", {cfg_.d_video, d});
    enc_pos_ = add_param("enc.pos", {cfg_.max_positions, d});
    dec_embed_ = add_param("dec.embed", {cfg_.vocab_size + 1, d});
    dec_pos_ = add_param("dec.pos", {cfg_.max_positions, d});

    const MoEConfig& moe = cfg_.moe;
    int n_groups = moe.strategy == Strategy::Flat ? 1 : moe.n_groups;
    for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
        Layer layer;
        std::string prefix = "dec.l" + std::to_string(l) + ".";
        layer.wq = add_param(prefix + "attn.wq", {d, d});
        layer.wk = add_param(prefix + "attn.wk", {d, d});
        layer.wv = add_param(prefix + "attn.wv", {d, d});
        layer.wo = add_param(prefix + "attn.wo", {d, d});
        if (cfg_.use_self_attention) {
            layer.sq = add_param(prefix + "self.wq", {d, d});
            layer.sk = add_param(prefix + "self.wk", {d, d});
            layer.sv = add_param(prefix + "self.wv", {d, d});
            layer.so = add_param(prefix + "self.wo", {d, d});
        }
        switch (moe.strategy) {
            case Strategy::Flat:
                layer.routers.flat = add_param(prefix + "router.flat", {d, moe.total_experts()});
                break;
            case Strategy::Hard:
                for (int g = 0; g < n_groups; ++g) {
                    layer.routers.intra.push_back(
                        add_param(prefix + "router.intra" + std::to_string(g), {d, moe.experts_per_group}));
                }
                break;
            case Strategy::Hierarchical:
                layer.routers.inter = add_param(prefix + "router.inter", {d, n_groups});
                for (int g = 0; g < n_groups; ++g) {
                    layer.routers.intra.push_back(
                        add_param(prefix + "router.intra" + std::to_string(g), {d, moe.experts_per_group}));
                }
                break;
        }
        layer.experts.act = cfg_.act;
        layer.experts.groups.resize(static_cast<std::size_t>(n_groups));
        for (int g = 0; g < n_groups; ++g) {
            for (int e = 0; e < moe.experts_per_group; ++e) {
                std::string ep = prefix + "expert.g" + std::to_string(g) + ".e" + std::to_string(e) + ".";
                Param* w1 = add_param(ep + "w1", {d, cfg_.d_ff});
                Param* w2 = add_param(ep + "w2", {cfg_.d_ff, d});
                layer.experts.groups[static_cast<std::size_t>(g)].push_back(ExpertFfn{w1, w2});
            }
        }
        layers_.push_back(layer);
    }
    head_ = add_param("dec.head", {d, cfg_.vocab_size});
    init_params();
}

void Model::init_params() {
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (Param* p : order_) {
        for (double& v : p->value.data) v = dist(rng);
    }
    // Experts start as copies of one FFN per layer (upcycling-style): groups
    // can only drift apart through routing, so the early inter-modal gradient
    // carries no spurious expert-asymmetry signal.
    for (Layer& layer : layers_) {
        const ExpertFfn& proto = layer.experts.groups[0][0];
        for (auto& group : layer.experts.groups) {
            for (ExpertFfn& ffn : group) {
                ffn.w1->value = proto.w1->value;
                ffn.w2->value = proto.w2->value;
            }
        }
    }
}

Param& Model::param(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw IndexError("unknown parameter " + name);
    return *it->second;
}

bool Model::has_param(const std::string& name) const { return by_name_.count(name) > 0; }

std::int64_t Model::n_params() const {
    std::int64_t n = 0;
    for (const Param& p : store_) n += p.numel();
    return n;
}

EncodedSequence Model::encode(Tape& tape, const Tensor& audio, const Tensor& video,
                              const std::vector<ModalityTag>& tags) {
    if (audio.rank() != 2 || video.rank() != 2 || audio.rows() != video.rows()) {
        throw DimError("encode frame-count mismatch: audio " + audio.shape_str() + " video " +
                       video.shape_str());
    }
    if (audio.cols() != cfg_.d_audio || video.cols() != cfg_.d_video) {
        throw DimError("encode feature dims do not match the config");
    }
    int n_seq = static_cast<int>(tags.size());
    if (n_seq == 0 || audio.rows() % n_seq != 0) throw DimError("encode rows not divisible by sequences");
    int frames = audio.rows() / n_seq;
    if (frames > cfg_.max_positions) throw ConfigError("sequence longer than max_positions");

    // Masking the inputs zeroes both the contribution and its gradient.
    Tensor a = audio, v = video;
    for (int s = 0; s < n_seq; ++s) {
        ModalityTag tag = tags[static_cast<std::size_t>(s)];
        if (tag == ModalityTag::VideoOnly) {
            for (int f = 0; f < frames; ++f) {
                for (int j = 0; j < cfg_.d_audio; ++j) a.at(s * frames + f, j) = 0.0;
            }
        } else if (tag == ModalityTag::AudioOnly) {
            for (int f = 0; f < frames; ++f) {
                for (int j = 0; j < cfg_.d_video; ++j) v.at(s * frames + f, j) = 0.0;
            }
        }
    }

    Var fused = tape.add(tape.matmul(tape.constant(std::move(a)), tape.param(*enc_audio_)),
                         tape.matmul(tape.constant(std::move(v)), tape.param(*enc_video_)));
    EncodedSequence out;
    out.enc = tape.activation(fused, cfg_.act);
    out.n_sequences = n_seq;
    out.frames = frames;
    out.tags = tags;
    return out;
}

ForwardResult Model::forward(Tape& tape, const EncodedSequence& enc, const std::vector<int>& targets,
                             double av_audio_weight, const std::vector<double>* force_q) {
    int n_seq = enc.n_sequences;
    int frames = enc.frames;
    int n_tokens = n_seq * frames;
    if (static_cast<int>(targets.size()) != n_tokens) throw DimError("forward target count mismatch");
    for (int t : targets) {
        if (t < 0 || t >= cfg_.vocab_size) throw IndexError("target " + std::to_string(t));
    }

    // Teacher forcing: shift targets right, BOS (embedding row vocab_size) first.
    std::vector<int> inputs(static_cast<std::size_t>(n_tokens));
    std::vector<int> positions(static_cast<std::size_t>(n_tokens));
    for (int s = 0; s < n_seq; ++s) {
        for (int f = 0; f < frames; ++f) {
            int row = s * frames + f;
            inputs[static_cast<std::size_t>(row)] =
                f == 0 ? cfg_.vocab_size : targets[static_cast<std::size_t>(row - 1)];
            positions[static_cast<std::size_t>(row)] = f;
        }
    }

    Var x = tape.add(tape.embedding(tape.param(*dec_embed_), inputs),
                     tape.select_rows(tape.param(*dec_pos_), positions));
    Var enc_pos = tape.select_rows(tape.param(*enc_pos_), positions);
    Var keys_in = tape.add(enc.enc, enc_pos);

    ForwardResult out;
    out.n_sequences = n_seq;
    out.frames = frames;
    out.token_tags.resize(static_cast<std::size_t>(n_tokens));
    for (int s = 0; s < n_seq; ++s) {
        for (int f = 0; f < frames; ++f) {
            out.token_tags[static_cast<std::size_t>(s * frames + f)] = enc.tags[static_cast<std::size_t>(s)];
        }
    }

    std::vector<std::vector<int>> seq_rows(static_cast<std::size_t>(n_seq));
    for (int s = 0; s < n_seq; ++s) {
        for (int f = 0; f < frames; ++f) seq_rows[static_cast<std::size_t>(s)].push_back(s * frames + f);
    }

    for (Layer& layer : layers_) {
        if (cfg_.use_self_attention) {
            Var q_all = tape.matmul(x, tape.param(*layer.sq));
            Var k_all = tape.matmul(x, tape.param(*layer.sk));
            Var v_all = tape.matmul(x, tape.param(*layer.sv));
            std::vector<Var> outs;
            outs.reserve(static_cast<std::size_t>(n_seq));
            for (int s = 0; s < n_seq; ++s) {
                const std::vector<int>& rows = seq_rows[static_cast<std::size_t>(s)];
                outs.push_back(tape.attention(tape.select_rows(q_all, rows),
                                              tape.select_rows(k_all, rows),
                                              tape.select_rows(v_all, rows), /*causal=*/true));
            }
            x = tape.add(x, tape.matmul(tape.concat_rows(outs), tape.param(*layer.so)));
        }

        // Cross-attention over the encoded frames; projections batched over
        // the whole batch, the attention core per sequence.
        Var q_all = tape.matmul(x, tape.param(*layer.wq));
        Var k_all = tape.matmul(keys_in, tape.param(*layer.wk));
        Var v_all = tape.matmul(enc.enc, tape.param(*layer.wv));
        std::vector<Var> outs;
        outs.reserve(static_cast<std::size_t>(n_seq));
        for (int s = 0; s < n_seq; ++s) {
            const std::vector<int>& rows = seq_rows[static_cast<std::size_t>(s)];
            outs.push_back(tape.attention(tape.select_rows(q_all, rows),
                                          tape.select_rows(k_all, rows),
                                          tape.select_rows(v_all, rows), /*causal=*/false));
        }
        x = tape.add(x, tape.matmul(tape.concat_rows(outs), tape.param(*layer.wo)));

        ExpertSelection sel;
        switch (cfg_.moe.strategy) {
            case Strategy::Flat:
                sel = route_flat(tape, x, *layer.routers.flat, cfg_.moe.k_flat, cfg_.moe);
                break;
            case Strategy::Hard:
                sel = route_hard(tape, x, out.token_tags, layer.routers.intra, cfg_.moe.k_flat,
                                 cfg_.moe, av_audio_weight);
                break;
            case Strategy::Hierarchical:
                sel = route_hierarchical(tape, x, out.token_tags, *layer.routers.inter,
                                         layer.routers.intra, cfg_.moe.m_groups, cfg_.moe.k_within,
                                         cfg_.moe, force_q);
                break;
        }
        x = tape.add(x, dispatch(tape, x, layer.experts, sel));
        out.selections.push_back(std::move(sel));
    }

    out.logits = tape.matmul(x, tape.param(*head_));
    return out;
}

LossBreakdown Model::losses(Tape& tape, const ForwardResult& fwd, const std::vector<int>& targets,
                            const LossWeights& weights) {
    Var ce = tape.cross_entropy(fwd.logits, targets);
    std::vector<Var> lb, ls, lz;
    for (const ExpertSelection& sel : fwd.selections) {
        LayerAuxLosses aux = moe_aux_losses(tape, sel, fwd.token_tags, weights);
        lb.push_back(aux.lb);
        ls.push_back(aux.ls);
        lz.push_back(aux.lz);
    }
    return total_loss(tape, ce, lb, ls, lz, weights);
}

}  // namespace hmoe
