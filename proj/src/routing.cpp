#include "hmoe/routing.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace hmoe {

int MoEConfig::activated_per_token() const {
    switch (strategy) {
        case Strategy::Flat:
            return k_flat;
        case Strategy::Hard:
            return k_flat;  // unimodal top-k; AV tokens also activate k (k/2 per group)
        case Strategy::Hierarchical: {
            // top-m groups by definition engage their full k_within counts;
            // count the m largest k_within (ties by group order).
            std::vector<int> ks = k_within;
            std::sort(ks.begin(), ks.end(), std::greater<int>());
            int total = 0;
            for (int i = 0; i < m_groups && i < static_cast<int>(ks.size()); ++i) total += ks[i];
            return total;
        }
    }
    return 0;
}

void MoEConfig::validate() const {
    if (d_model < 1 || d_ff < 1) throw ConfigError("MoE dims must be positive");
    if (experts_per_group < 1) throw ConfigError("experts_per_group must be >= 1");
    if (strategy == Strategy::Flat) {
        if (k_flat < 1 || k_flat > total_experts()) {
            throw ConfigError("k_flat " + std::to_string(k_flat) + " out of range for " +
                              std::to_string(total_experts()) + " experts");
        }
        return;
    }
    if (n_groups < 1) throw ConfigError("n_groups must be >= 1");
    if (strategy == Strategy::Hard) {
        if (k_flat < 1 || k_flat > experts_per_group) {
            throw ConfigError("hard-routing k out of range for group size");
        }
        return;
    }
    if (m_groups < 1 || m_groups > n_groups) {
        throw ConfigError("m_groups " + std::to_string(m_groups) + " out of range for " +
                          std::to_string(n_groups) + " groups");
    }
    if (static_cast<int>(k_within.size()) != n_groups) {
        throw ConfigError("k_within must have one entry per group");
    }
    for (int k : k_within) {
        if (k < 1 || k > experts_per_group) throw ConfigError("k_within entry out of range");
    }
}

int argmax_index(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

std::vector<int> topk_indices(const double* row, int n, int k) {
    // Repeated strict-max scan; lowest index wins ties.
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int s = 0; s < k; ++s) {
        int best = -1;
        for (int j = 0; j < n; ++j) {
            if (taken[static_cast<std::size_t>(j)]) continue;
            if (best < 0 || row[j] > row[best]) best = j;
        }
        taken[static_cast<std::size_t>(best)] = 1;
        out.push_back(best);
    }
    return out;
}

std::vector<int> topk_oracle(const std::vector<double>& p, int k) {
    if (k > static_cast<int>(p.size())) throw ConfigError("topk_oracle k exceeds length");
    std::vector<int> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&p](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

namespace {

// Builds per-expert assignments from a combine-weight matrix over a token
// class: token_ids[i] selected experts expert_ids[i*k+s] with weight
// combine[i][s]. group_weight scales every weight (hard-routing AV split).
void add_assignments(Tape& tape, ExpertSelection& sel, int group, const std::vector<int>& token_ids,
                     const std::vector<int>& expert_ids, int k, Var combine, double group_weight,
                     const Var* group_weight_var, const std::vector<int>* gw_rows,
                     const std::vector<int>* gw_cols) {
    int n_experts = static_cast<int>(sel.plan[static_cast<std::size_t>(group)].size());
    std::vector<std::vector<int>> rows_per_expert(static_cast<std::size_t>(n_experts));
    std::vector<std::vector<int>> cols_per_expert(static_cast<std::size_t>(n_experts));
    std::vector<std::vector<int>> tokens_per_expert(static_cast<std::size_t>(n_experts));

    const Tensor& cv = tape.value(combine);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        for (int s = 0; s < k; ++s) {
            int e = expert_ids[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(s)];
            rows_per_expert[static_cast<std::size_t>(e)].push_back(static_cast<int>(i));
            cols_per_expert[static_cast<std::size_t>(e)].push_back(s);
            tokens_per_expert[static_cast<std::size_t>(e)].push_back(token_ids[i]);

            double w = cv.at(static_cast<int>(i), s);
            double gw = group_weight;
            if (group_weight_var != nullptr) {
                const Tensor& gv = tape.value(*group_weight_var);
                gw = gv.at((*gw_rows)[i], (*gw_cols)[i]);
            }
            sel.slots[static_cast<std::size_t>(token_ids[i])].push_back(SlotRef{group, e, w * gw});
        }
    }

    for (int e = 0; e < n_experts; ++e) {
        if (tokens_per_expert[static_cast<std::size_t>(e)].empty()) continue;
        Var w = tape.gather_elems(combine, rows_per_expert[static_cast<std::size_t>(e)],
                                  cols_per_expert[static_cast<std::size_t>(e)]);
        if (group_weight_var != nullptr) {
            std::vector<int> grows, gcols;
            grows.reserve(rows_per_expert[static_cast<std::size_t>(e)].size());
            gcols.reserve(grows.capacity());
            for (int i : rows_per_expert[static_cast<std::size_t>(e)]) {
                grows.push_back((*gw_rows)[static_cast<std::size_t>(i)]);
                gcols.push_back((*gw_cols)[static_cast<std::size_t>(i)]);
            }
            w = tape.mul(w, tape.gather_elems(*group_weight_var, grows, gcols));
        } else if (group_weight != 1.0) {
            w = tape.scale(w, group_weight);
        }
        sel.plan[static_cast<std::size_t>(group)][static_cast<std::size_t>(e)].push_back(
            ExpertSelection::Assignment{tokens_per_expert[static_cast<std::size_t>(e)], w});
    }
}

// Top-k selection over the rows of a probability matrix; records the picks in
// the tape's selection log.
std::vector<int> select_topk(Tape& tape, const Tensor& probs, int k) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(probs.rows()) * static_cast<std::size_t>(k));
    for (int t = 0; t < probs.rows(); ++t) {
        std::vector<int> picks = topk_indices(probs.data.data() + static_cast<std::size_t>(t) * probs.cols(),
                                              probs.cols(), k);
        idx.insert(idx.end(), picks.begin(), picks.end());
    }
    tape.note_selection(idx);
    return idx;
}

}  // namespace

ExpertSelection route_flat(Tape& tape, Var x, Param& router, int k, const MoEConfig& cfg) {
    const Tensor& tx = tape.value(x);
    int n_tokens = tx.rows();
    int n_experts = router.value.cols();
    if (k < 1 || k > n_experts) {
        throw ConfigError("route_flat k=" + std::to_string(k) + " with " + std::to_string(n_experts) +
                          " experts");
    }

    Var h = tape.matmul(x, tape.param(router));
    Var p = tape.softmax_rows(h);
    std::vector<int> idx = select_topk(tape, tape.value(p), k);
    Var combine = tape.softmax_rows(tape.gather_cols(h, idx, k));  // renormalized top-k of p

    ExpertSelection sel;
    sel.strategy = Strategy::Flat;
    sel.n_tokens = n_tokens;
    sel.plan.assign(1, std::vector<std::vector<ExpertSelection::Assignment>>(
                           static_cast<std::size_t>(n_experts)));
    sel.slots.assign(static_cast<std::size_t>(n_tokens), {});
    sel.group_mass.assign(static_cast<std::size_t>(n_tokens), {1.0});

    std::vector<int> all_tokens(static_cast<std::size_t>(n_tokens));
    std::iota(all_tokens.begin(), all_tokens.end(), 0);
    sel.intra.push_back(RouterTrace{all_tokens, h, p});
    add_assignments(tape, sel, 0, all_tokens, idx, k, combine, 1.0, nullptr, nullptr, nullptr);
    (void)cfg;
    return sel;
}

ExpertSelection route_hard(Tape& tape, Var x, const std::vector<ModalityTag>& tags,
                           const std::vector<Param*>& intra_routers, int k, const MoEConfig& cfg,
                           double av_audio_weight) {
    const Tensor& tx = tape.value(x);
    int n_tokens = tx.rows();
    if (static_cast<int>(tags.size()) != n_tokens) throw DimError("route_hard tag count mismatch");
    if (intra_routers.size() != 2) throw ConfigError("route_hard needs audio and visual routers");
    if (!(av_audio_weight >= 0.0 && av_audio_weight <= 1.0)) {
        throw ConfigError("av_audio_weight must lie in [0, 1]");
    }
    int epg = cfg.experts_per_group;
    bool any_av = std::find(tags.begin(), tags.end(), ModalityTag::AudioVisual) != tags.end();
    if (any_av && k % 2 != 0) {
        throw ConfigError("hard routing requires even k when audio-visual tokens are present");
    }
    if (k > epg || (any_av && k / 2 > epg)) throw ConfigError("hard routing k exceeds group size");

    ExpertSelection sel;
    sel.strategy = Strategy::Hard;
    sel.n_tokens = n_tokens;
    sel.intra.resize(2);
    sel.plan.assign(2, std::vector<std::vector<ExpertSelection::Assignment>>(
                           static_cast<std::size_t>(epg)));
    sel.slots.assign(static_cast<std::size_t>(n_tokens), {});
    sel.group_mass.assign(static_cast<std::size_t>(n_tokens), {0.0, 0.0});

    for (int g = 0; g < 2; ++g) {
        ModalityTag own = (g == kAudioGroup) ? ModalityTag::AudioOnly : ModalityTag::VideoOnly;
        double av_w = (g == kAudioGroup) ? av_audio_weight : 1.0 - av_audio_weight;

        std::vector<int> router_tokens;       // tokens this router processes
        std::vector<int> uni_pos, av_pos;     // positions within router_tokens
        std::vector<int> uni_tokens, av_tokens;
        for (int t = 0; t < n_tokens; ++t) {
            if (tags[static_cast<std::size_t>(t)] == own) {
                uni_pos.push_back(static_cast<int>(router_tokens.size()));
                uni_tokens.push_back(t);
                router_tokens.push_back(t);
            } else if (tags[static_cast<std::size_t>(t)] == ModalityTag::AudioVisual) {
                av_pos.push_back(static_cast<int>(router_tokens.size()));
                av_tokens.push_back(t);
                router_tokens.push_back(t);
            }
        }
        for (int t : uni_tokens) sel.group_mass[static_cast<std::size_t>(t)][static_cast<std::size_t>(g)] = 1.0;
        for (int t : av_tokens) sel.group_mass[static_cast<std::size_t>(t)][static_cast<std::size_t>(g)] = av_w;

        if (router_tokens.empty()) {
            sel.intra[static_cast<std::size_t>(g)] = RouterTrace{{}, Var{}, Var{}};
            continue;
        }

        Var h = tape.matmul(tape.select_rows(x, router_tokens), tape.param(*intra_routers[static_cast<std::size_t>(g)]));
        Var p = tape.softmax_rows(h);
        sel.intra[static_cast<std::size_t>(g)] = RouterTrace{router_tokens, h, p};
        const Tensor& pv = tape.value(p);

        if (!uni_tokens.empty()) {
            Tensor puni = Tensor::zeros({static_cast<int>(uni_tokens.size()), epg});
            for (std::size_t i = 0; i < uni_pos.size(); ++i) {
                for (int j = 0; j < epg; ++j) puni.at(static_cast<int>(i), j) = pv.at(uni_pos[i], j);
            }
            std::vector<int> idx = select_topk(tape, puni, k);
            Var combine = tape.softmax_rows(tape.gather_cols(tape.select_rows(h, uni_pos), idx, k));
            add_assignments(tape, sel, g, uni_tokens, idx, k, combine, 1.0, nullptr, nullptr, nullptr);
        }
        if (!av_tokens.empty()) {
            int half = k / 2;
            Tensor pav = Tensor::zeros({static_cast<int>(av_tokens.size()), epg});
            for (std::size_t i = 0; i < av_pos.size(); ++i) {
                for (int j = 0; j < epg; ++j) pav.at(static_cast<int>(i), j) = pv.at(av_pos[i], j);
            }
            std::vector<int> idx = select_topk(tape, pav, half);
            Var combine = tape.softmax_rows(tape.gather_cols(tape.select_rows(h, av_pos), idx, half));
            add_assignments(tape, sel, g, av_tokens, idx, half, combine, av_w, nullptr, nullptr, nullptr);
        }
    }
    return sel;
}

ExpertSelection route_hierarchical(Tape& tape, Var x, const std::vector<ModalityTag>& tags,
                                   Param& inter_router, const std::vector<Param*>& intra_routers,
                                   int m, const std::vector<int>& k_within, const MoEConfig& cfg,
                                   const std::vector<double>* force_q) {
    const Tensor& tx = tape.value(x);
    int n_tokens = tx.rows();
    int n_groups = static_cast<int>(intra_routers.size());
    if (m < 1 || m > n_groups) {
        throw ConfigError("route_hierarchical m=" + std::to_string(m) + " with " +
                          std::to_string(n_groups) + " groups");
    }
    if (static_cast<int>(k_within.size()) != n_groups) throw ConfigError("k_within size mismatch");
    for (int kg : k_within) {
        if (kg < 1 || kg > cfg.experts_per_group) throw ConfigError("k_within out of range");
    }
    (void)tags;  // gating never consults modality; tags matter only for loss statistics

    ExpertSelection sel;
    sel.strategy = Strategy::Hierarchical;
    sel.n_tokens = n_tokens;
    sel.plan.assign(static_cast<std::size_t>(n_groups),
                    std::vector<std::vector<ExpertSelection::Assignment>>(
                        static_cast<std::size_t>(cfg.experts_per_group)));
    sel.slots.assign(static_cast<std::size_t>(n_tokens), {});
    sel.group_mass.assign(static_cast<std::size_t>(n_tokens),
                          std::vector<double>(static_cast<std::size_t>(n_groups), 0.0));

    // Inter-modal gate.
    Var u = tape.matmul(x, tape.param(inter_router));
    Var q = tape.softmax_rows(u);
    std::vector<int> all_tokens(static_cast<std::size_t>(n_tokens));
    std::iota(all_tokens.begin(), all_tokens.end(), 0);
    sel.inter = RouterTrace{all_tokens, u, q};

    std::vector<int> group_sel;  // (n_tokens x m) selected group ids
    Var qtilde;
    if (force_q != nullptr) {
        if (static_cast<int>(force_q->size()) != n_groups) throw ConfigError("force_q size mismatch");
        std::vector<int> picks = topk_indices(force_q->data(), n_groups, m);
        double z = 0.0;
        for (int gidx : picks) z += (*force_q)[static_cast<std::size_t>(gidx)];
        if (z <= 0.0) throw ConfigError("force_q weights must have positive mass");
        Tensor qt = Tensor::zeros({n_tokens, m});
        group_sel.reserve(static_cast<std::size_t>(n_tokens) * static_cast<std::size_t>(m));
        for (int t = 0; t < n_tokens; ++t) {
            for (int s = 0; s < m; ++s) {
                group_sel.push_back(picks[static_cast<std::size_t>(s)]);
                qt.at(t, s) = (*force_q)[static_cast<std::size_t>(picks[static_cast<std::size_t>(s)])] / z;
            }
        }
        tape.note_selection(group_sel);
        qtilde = tape.constant(std::move(qt));
    } else {
        group_sel = select_topk(tape, tape.value(q), m);
        qtilde = tape.softmax_rows(tape.gather_cols(u, group_sel, m));
    }

    const Tensor& qtv = tape.value(qtilde);
    for (int t = 0; t < n_tokens; ++t) {
        for (int s = 0; s < m; ++s) {
            int g = group_sel[static_cast<std::size_t>(t) * static_cast<std::size_t>(m) + static_cast<std::size_t>(s)];
            sel.group_mass[static_cast<std::size_t>(t)][static_cast<std::size_t>(g)] = qtv.at(t, s);
        }
    }

    // Intra-modal routers process every token (their statistics feed the
    // load balancing loss over the whole batch).
    for (int g = 0; g < n_groups; ++g) {
        Var h = tape.matmul(x, tape.param(*intra_routers[static_cast<std::size_t>(g)]));
        Var p = tape.softmax_rows(h);
        sel.intra.push_back(RouterTrace{all_tokens, h, p});
    }

    for (int g = 0; g < n_groups; ++g) {
        std::vector<int> sel_tokens;  // tokens that picked group g
        std::vector<int> sel_slot;    // their slot position in the top-m list
        for (int t = 0; t < n_tokens; ++t) {
            for (int s = 0; s < m; ++s) {
                if (group_sel[static_cast<std::size_t>(t) * static_cast<std::size_t>(m) +
                              static_cast<std::size_t>(s)] == g) {
                    sel_tokens.push_back(t);
                    sel_slot.push_back(s);
                }
            }
        }
        if (sel_tokens.empty()) continue;

        int kg = k_within[static_cast<std::size_t>(g)];
        const Tensor& pv = tape.value(sel.intra[static_cast<std::size_t>(g)].probs);
        Tensor psel = Tensor::zeros({static_cast<int>(sel_tokens.size()), cfg.experts_per_group});
        for (std::size_t i = 0; i < sel_tokens.size(); ++i) {
            for (int j = 0; j < cfg.experts_per_group; ++j) {
                psel.at(static_cast<int>(i), j) = pv.at(sel_tokens[i], j);
            }
        }
        std::vector<int> idx = select_topk(tape, psel, kg);
        Var hsel = tape.select_rows(sel.intra[static_cast<std::size_t>(g)].logits, sel_tokens);
        // With kg == 1 this collapses to the Kronecker delta: a one-column
        // softmax is identically 1 and carries no gradient.
        Var combine = tape.softmax_rows(tape.gather_cols(hsel, idx, kg));
        add_assignments(tape, sel, g, sel_tokens, idx, kg, combine, 1.0, &qtilde, &sel_tokens, &sel_slot);
    }
    return sel;
}

Var dispatch(Tape& tape, Var x, const ExpertBank& experts, const ExpertSelection& sel) {
    const Tensor& tx = tape.value(x);
    if (sel.n_tokens != tx.rows()) throw DimError("dispatch token count mismatch");
    if (experts.groups.size() < sel.plan.size()) throw IndexError("dispatch plan exceeds expert bank");
    int d = tx.cols();

    std::vector<Var> pieces;
    std::vector<std::vector<int>> piece_rows;
    for (std::size_t g = 0; g < sel.plan.size(); ++g) {
        if (experts.groups[g].size() < sel.plan[g].size()) {
            throw IndexError("dispatch plan exceeds group " + std::to_string(g));
        }
        for (std::size_t e = 0; e < sel.plan[g].size(); ++e) {
            for (const auto& batch : sel.plan[g][e]) {
                if (batch.token_ids.empty()) continue;
                const ExpertFfn& ffn = experts.groups[g][e];
                Var rows = tape.select_rows(x, batch.token_ids);
                Var hidden = tape.activation(tape.matmul(rows, tape.param(*ffn.w1)), experts.act);
                Var out = tape.matmul(hidden, tape.param(*ffn.w2));
                pieces.push_back(tape.row_scale(out, batch.weights));
                piece_rows.push_back(batch.token_ids);
            }
        }
    }
    if (pieces.empty()) return tape.constant(Tensor::zeros({sel.n_tokens, d}));
    return tape.scatter_sum(pieces, std::move(piece_rows), sel.n_tokens);
}

}  // namespace hmoe
