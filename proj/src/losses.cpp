#include "hmoe/losses.hpp"

#include <cmath>
#include <string>

namespace hmoe {

void LossWeights::validate() const {
    if (!(c_B >= 0.0) || !(c_S >= 0.0) || !(c_Z >= 0.0)) {
        throw ConfigError("loss weights must be nonnegative");
    }
}

LoadStats expert_stats(Tape& tape, Var probs) {
    const Tensor& pv = tape.value(probs);
    if (pv.rank() != 2) throw DimError("expert_stats on rank " + std::to_string(pv.rank()));
    int n_tokens = pv.rows(), n_experts = pv.cols();
    if (n_tokens < 1) throw StatError("expert_stats over an empty batch");

    LoadStats stats;
    stats.n_tokens = n_tokens;
    stats.f.assign(static_cast<std::size_t>(n_experts), 0.0);
    for (int t = 0; t < n_tokens; ++t) {
        int top = argmax_index(pv.data.data() + static_cast<std::size_t>(t) * n_experts, n_experts);
        tape.note_selection(top);
        stats.f[static_cast<std::size_t>(top)] += 1.0;
    }
    for (double& v : stats.f) v /= static_cast<double>(n_tokens);
    stats.P = tape.mean_axis0(probs);
    return stats;
}

Var load_balance_loss(Tape& tape, const LoadStats& stats) {
    int n_experts = static_cast<int>(stats.f.size());
    Var f = tape.constant(Tensor({n_experts}, stats.f));
    // |E| * sum_i f_i P_i == |E|^2 * mean(f .* P)
    return tape.scale(tape.mean_all(tape.mul(f, stats.P)),
                      static_cast<double>(n_experts) * static_cast<double>(n_experts));
}

Var z_loss(Tape& tape, Var logits) {
    Var lse = tape.logsumexp_rows(logits);
    return tape.mean_all(tape.mul(lse, lse));
}

GroupLoadStats group_stats(Tape& tape, Var inter_probs, const std::vector<int>& token_ids,
                           const std::vector<ModalityTag>& tags) {
    const Tensor& qv = tape.value(inter_probs);
    if (qv.rank() != 2) throw DimError("group_stats on rank " + std::to_string(qv.rank()));
    if (static_cast<int>(token_ids.size()) != qv.rows()) throw DimError("group_stats token count mismatch");
    int n_groups = qv.cols();

    auto build = [&](ModalityTag want) -> std::optional<GroupLoadStats::Subset> {
        std::vector<int> rows;
        for (std::size_t i = 0; i < token_ids.size(); ++i) {
            if (tags[static_cast<std::size_t>(token_ids[i])] == want) rows.push_back(static_cast<int>(i));
        }
        if (rows.empty()) return std::nullopt;
        GroupLoadStats::Subset s;
        s.n_tokens = static_cast<int>(rows.size());
        s.g.assign(static_cast<std::size_t>(n_groups), 0.0);
        for (int r : rows) {
            int top = argmax_index(qv.data.data() + static_cast<std::size_t>(r) * n_groups, n_groups);
            tape.note_selection(top);
            s.g[static_cast<std::size_t>(top)] += 1.0;
        }
        for (double& v : s.g) v /= static_cast<double>(s.n_tokens);
        s.Q = tape.mean_axis0(tape.select_rows(inter_probs, rows));
        return s;
    };

    GroupLoadStats gs;
    gs.audio = build(ModalityTag::AudioOnly);
    gs.visual = build(ModalityTag::VideoOnly);
    return gs;
}

Var load_bias_loss(Tape& tape, const GroupLoadStats& gs) {
    Var ls;
    auto term = [&](const GroupLoadStats::Subset& s, int group) {
        Var picked = tape.gather_elems(s.Q, std::vector<int>{group});
        Var t = tape.sub(tape.constant(Tensor::scalar(1.0)),
                         tape.scale(picked, s.g[static_cast<std::size_t>(group)]));
        ls = ls.valid() ? tape.add(ls, t) : t;
    };
    if (gs.audio) term(*gs.audio, kAudioGroup);
    if (gs.visual) term(*gs.visual, kVisualGroup);
    if (!ls.valid()) ls = tape.constant(Tensor::scalar(0.0));
    return ls;
}

LayerAuxLosses moe_aux_losses(Tape& tape, const ExpertSelection& sel,
                              const std::vector<ModalityTag>& tags, const LossWeights& w) {
    LayerAuxLosses out;

    // Load balancing: one term per router that processed tokens.
    Var lb;
    for (const RouterTrace& trace : sel.intra) {
        if (trace.token_ids.empty()) continue;
        LoadStats stats = expert_stats(tape, trace.probs);
        Var term = load_balance_loss(tape, stats);
        lb = lb.valid() ? tape.add(lb, term) : term;
    }
    // Audio-visual sequences are excluded from load biasing but enter the
    // load balancing at the group level: their inter-modal usage is pushed
    // toward uniform, which keeps both groups alive for multimodal inputs.
    if (sel.inter) {
        std::vector<int> av_rows;
        for (std::size_t i = 0; i < sel.inter->token_ids.size(); ++i) {
            if (tags[static_cast<std::size_t>(sel.inter->token_ids[i])] == ModalityTag::AudioVisual) {
                av_rows.push_back(static_cast<int>(i));
            }
        }
        if (!av_rows.empty()) {
            LoadStats gstats = expert_stats(tape, tape.select_rows(sel.inter->probs, av_rows));
            Var term = load_balance_loss(tape, gstats);
            lb = lb.valid() ? tape.add(lb, term) : term;
        }
    }
    out.lb = lb.valid() ? lb : tape.constant(Tensor::scalar(0.0));

    // Router z-loss over every router's computed logits.
    Var lz;
    auto add_z = [&](Var logits) {
        Var term = z_loss(tape, logits);
        lz = lz.valid() ? tape.add(lz, term) : term;
    };
    bool intra_on = sel.strategy == Strategy::Flat ? w.z_on_flat : w.z_on_intra;
    if (intra_on) {
        for (const RouterTrace& trace : sel.intra) {
            if (!trace.token_ids.empty()) add_z(trace.logits);
        }
    }
    if (sel.inter && w.z_on_inter) add_z(sel.inter->logits);
    out.lz = lz.valid() ? lz : tape.constant(Tensor::scalar(0.0));

    // Load biasing needs the inter-modal gate; flat and hard routing have none.
    if (sel.inter) {
        GroupLoadStats gs = group_stats(tape, sel.inter->probs, sel.inter->token_ids, tags);
        out.ls = load_bias_loss(tape, gs);
        out.has_ls = true;
    } else {
        out.ls = tape.constant(Tensor::scalar(0.0));
    }
    return out;
}

namespace {

Var mean_of(Tape& tape, const std::vector<Var>& terms) {
    if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
    Var acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
    return tape.scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void check_term(Tape& tape, Var v, const char* name) {
    if (!std::isfinite(tape.scalar(v))) {
        throw NumericError(std::string("total_loss term ") + name + " is non-finite");
    }
}

}  // namespace

LossBreakdown total_loss(Tape& tape, Var ce, const std::vector<Var>& lb_layers,
                         const std::vector<Var>& ls_layers, const std::vector<Var>& lz_layers,
                         const LossWeights& w) {
    if (!std::isfinite(w.c_B) || !std::isfinite(w.c_S) || !std::isfinite(w.c_Z)) {
        throw NumericError("total_loss weight is non-finite");
    }
    w.validate();
    check_term(tape, ce, "L_CE");
    for (Var v : lb_layers) check_term(tape, v, "L_B");
    for (Var v : ls_layers) check_term(tape, v, "L_S");
    for (Var v : lz_layers) check_term(tape, v, "L_Z");

    LossBreakdown bd;
    Var lb = mean_of(tape, lb_layers);
    Var ls = mean_of(tape, ls_layers);
    Var lz = mean_of(tape, lz_layers);
    bd.total = tape.add(tape.add(ce, tape.scale(lb, w.c_B)),
                        tape.add(tape.scale(ls, w.c_S), tape.scale(lz, w.c_Z)));
    bd.ce = tape.scalar(ce);
    bd.lb = tape.scalar(lb);
    bd.ls = tape.scalar(ls);
    bd.lz = tape.scalar(lz);
    bd.tot = tape.scalar(bd.total);
    for (Var v : lb_layers) bd.lb_layers.push_back(tape.scalar(v));
    for (Var v : ls_layers) bd.ls_layers.push_back(tape.scalar(v));
    for (Var v : lz_layers) bd.lz_layers.push_back(tape.scalar(v));
    return bd;
}

}  // namespace hmoe
