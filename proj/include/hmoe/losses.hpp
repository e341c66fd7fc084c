#pragma once

#include <optional>
#include <vector>

#include "hmoe/routing.hpp"
#include "hmoe/tape.hpp"

namespace hmoe {

// Per-expert usage statistics of one router over its token set. f is the
// top-1 selection frequency (detached from gradients); P is the mean assigned
// probability (differentiable).
struct LoadStats {
    std::vector<double> f;
    Var P;
    int n_tokens = 0;
};

// Inter-modal router statistics per unimodal subset. Audio-visual tokens are
// excluded. A subset that is empty in this batch carries no stats and
// contributes nothing to the load biasing loss.
struct GroupLoadStats {
    struct Subset {
        std::vector<double> g;  // argmax frequency per group, detached
        Var Q;                  // mean probability per group, differentiable
        int n_tokens = 0;
    };
    std::optional<Subset> audio;
    std::optional<Subset> visual;
};

struct LossWeights {
    double c_B = 1e-2;
    double c_S = 1e-2;
    double c_Z = 1e-3;
    // The z-loss covers every router by default; per-router toggles.
    bool z_on_flat = true;
    bool z_on_intra = true;
    bool z_on_inter = true;
    void validate() const;
};

struct LossBreakdown {
    double ce = 0.0, lb = 0.0, ls = 0.0, lz = 0.0, tot = 0.0;
    std::vector<double> lb_layers, ls_layers, lz_layers;
    Var total;  // differentiable L_tot
};

LoadStats expert_stats(Tape& tape, Var probs);

// L_B = |E| * sum_i f_i P_i for one router; callers sum per-group results.
Var load_balance_loss(Tape& tape, const LoadStats& stats);

// L_Z = mean over tokens of logsumexp(logits)^2.
Var z_loss(Tape& tape, Var logits);

GroupLoadStats group_stats(Tape& tape, Var inter_probs, const std::vector<int>& token_ids,
                           const std::vector<ModalityTag>& tags);

// L_S = (1 - g^A_audio Q^A_audio) + (1 - g^V_visual Q^V_visual), empty
// subsets contributing zero.
Var load_bias_loss(Tape& tape, const GroupLoadStats& gs);

// One MoE layer's auxiliary losses from its routing artifacts.
struct LayerAuxLosses {
    Var lb, ls, lz;
    bool has_ls = false;
};
LayerAuxLosses moe_aux_losses(Tape& tape, const ExpertSelection& sel,
                              const std::vector<ModalityTag>& tags, const LossWeights& w);

// Combines cross-entropy with per-layer auxiliary losses: each auxiliary kind
// is arithmetic-averaged across MoE layers, then weighted into the total.
LossBreakdown total_loss(Tape& tape, Var ce, const std::vector<Var>& lb_layers,
                         const std::vector<Var>& ls_layers, const std::vector<Var>& lz_layers,
                         const LossWeights& w);

}  // namespace hmoe
