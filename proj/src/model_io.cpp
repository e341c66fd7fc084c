#include "hmoe/model_io.hpp"

#include <set>
#include <sstream>

namespace hmoe {

namespace {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Flat: return "flat";
        case Strategy::Hard: return "hard";
        case Strategy::Hierarchical: return "hierarchical";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "flat") return Strategy::Flat;
    if (s == "hard") return Strategy::Hard;
    if (s == "hierarchical") return Strategy::Hierarchical;
    throw IoError("unknown strategy '" + s + "'");
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

}  // namespace

std::string model_config_text(const ModelConfig& cfg) {
    std::string t;
    t += "kind=model\n";
    t += "d_model=" + std::to_string(cfg.d_model) + "\n";
    t += "d_ff=" + std::to_string(cfg.d_ff) + "\n";
    t += "n_decoder_layers=" + std::to_string(cfg.n_decoder_layers) + "\n";
    t += "vocab_size=" + std::to_string(cfg.vocab_size) + "\n";
    t += "n_heads=" + std::to_string(cfg.n_heads) + "\n";
    t += "d_audio=" + std::to_string(cfg.d_audio) + "\n";
    t += "d_video=" + std::to_string(cfg.d_video) + "\n";
    t += "max_positions=" + std::to_string(cfg.max_positions) + "\n";
    t += std::string("moe.strategy=") + strategy_name(cfg.moe.strategy) + "\n";
    t += "moe.n_groups=" + std::to_string(cfg.moe.n_groups) + "\n";
    t += "moe.experts_per_group=" + std::to_string(cfg.moe.experts_per_group) + "\n";
    t += "moe.k_flat=" + std::to_string(cfg.moe.k_flat) + "\n";
    t += "moe.m_groups=" + std::to_string(cfg.moe.m_groups) + "\n";
    t += "moe.k_within=" + join_ints(cfg.moe.k_within) + "\n";
    t += "dropout_prob=" + format_double(cfg.dropout_prob) + "\n";
    t += "dropout_audio_frac=" + format_double(cfg.dropout_audio_frac) + "\n";
    t += std::string("activation=") + (cfg.act == Activation::Relu ? "relu" : "gelu") + "\n";
    t += std::string("use_self_attention=") + (cfg.use_self_attention ? "1" : "0") + "\n";
    t += "seed=" + std::to_string(cfg.seed) + "\n";
    return t;
}

ModelConfig parse_model_config(const std::vector<std::pair<std::string, std::string>>& kv) {
    ModelConfig cfg;
    for (const auto& [k, v] : kv) {
        if (k == "d_model") cfg.d_model = std::stoi(v);
        else if (k == "d_ff") cfg.d_ff = std::stoi(v);
        else if (k == "n_decoder_layers") cfg.n_decoder_layers = std::stoi(v);
        else if (k == "vocab_size") cfg.vocab_size = std::stoi(v);
        else if (k == "n_heads") cfg.n_heads = std::stoi(v);
        else if (k == "d_audio") cfg.d_audio = std::stoi(v);
        else if (k == "d_video") cfg.d_video = std::stoi(v);
        else if (k == "max_positions") cfg.max_positions = std::stoi(v);
        else if (k == "moe.strategy") cfg.moe.strategy = parse_strategy(v);
        else if (k == "moe.n_groups") cfg.moe.n_groups = std::stoi(v);
        else if (k == "moe.experts_per_group") cfg.moe.experts_per_group = std::stoi(v);
        else if (k == "moe.k_flat") cfg.moe.k_flat = std::stoi(v);
        else if (k == "moe.m_groups") cfg.moe.m_groups = std::stoi(v);
        else if (k == "moe.k_within") cfg.moe.k_within = split_ints(v);
        else if (k == "dropout_prob") cfg.dropout_prob = std::stod(v);
        else if (k == "dropout_audio_frac") cfg.dropout_audio_frac = std::stod(v);
        else if (k == "activation") cfg.act = (v == "relu" ? Activation::Relu : Activation::Gelu);
        else if (k == "use_self_attention") cfg.use_self_attention = (v == "1");
        else if (k == "seed") cfg.seed = std::stoull(v);
    }
    cfg.moe.d_model = cfg.d_model;
    cfg.moe.d_ff = cfg.d_ff;
    return cfg;
}

void save_checkpoint(const std::string& path, Model& model, const AdamState* adam,
                     const std::string& rng_state, const std::string& extra_config_text) {
    TensorContainer c;
    std::string text = model_config_text(model.config());
    text += "rng=" + rng_state + "\n";
    text += "adam_t=" + std::to_string(adam ? adam->t : 0) + "\n";
    text += std::string("has_adam=") + (adam ? "1" : "0") + "\n";
    text += extra_config_text;
    c.config_text = std::move(text);

    const auto& params = model.params();
    for (Param* p : params) c.tensors.emplace_back(p->name, p->value);
    if (adam) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            c.tensors.emplace_back("adam.m." + params[i]->name, adam->m[i]);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            c.tensors.emplace_back("adam.v." + params[i]->name, adam->v[i]);
        }
    }
    write_container(path, c);
}

void load_params_into(Model& model, const TensorContainer& container) {
    std::set<std::string> seen;
    for (const auto& [name, t] : container.tensors) {
        if (name.rfind("adam.", 0) == 0) continue;
        if (!model.has_param(name)) throw IoError("checkpoint has unknown parameter '" + name + "'");
        Param& p = model.param(name);
        if (p.value.shape != t.shape) {
            throw IoError("shape mismatch for '" + name + "': checkpoint " + t.shape_str() +
                          " vs model " + p.value.shape_str());
        }
        p.value = t;
        seen.insert(name);
    }
    for (Param* p : model.params()) {
        if (!seen.count(p->name)) throw IoError("checkpoint missing parameter '" + p->name + "'");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    TensorContainer c = read_container(path);
    auto kv = parse_kv_lines(c.config_text);

    bool is_model = false;
    std::string rng;
    bool has_adam = false;
    std::int64_t adam_t = 0;
    for (const auto& [k, v] : kv) {
        if (k == "kind") is_model = (v == "model");
        else if (k == "rng") rng = v;
        else if (k == "has_adam") has_adam = (v == "1");
        else if (k == "adam_t") adam_t = std::stoll(v);
    }
    if (!is_model) throw IoError("not a model checkpoint: " + path);

    Checkpoint ckpt;
    ckpt.config = parse_model_config(kv);
    ckpt.model = std::make_unique<Model>(ckpt.config);
    ckpt.rng_state = rng;
    ckpt.config_kv = std::move(kv);
    load_params_into(*ckpt.model, c);

    if (has_adam) {
        AdamState state = adam_init(ckpt.model->params());
        state.t = adam_t;
        const auto& params = ckpt.model->params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor* m = c.find("adam.m." + params[i]->name);
            const Tensor* v = c.find("adam.v." + params[i]->name);
            if (!m || !v) throw IoError("checkpoint missing adam state for " + params[i]->name);
            if (m->shape != params[i]->value.shape || v->shape != params[i]->value.shape) {
                throw IoError("adam state shape mismatch for " + params[i]->name);
            }
            state.m[i] = *m;
            state.v[i] = *v;
        }
        ckpt.adam = std::move(state);
    }
    return ckpt;
}

}  // namespace hmoe
