#pragma once

#include <optional>
#include <vector>

#include "hmoe/tape.hpp"

namespace hmoe {

// Modality carried by a whole sequence; every token inherits it.
enum class ModalityTag { AudioOnly, VideoOnly, AudioVisual };

enum class Strategy { Flat, Hard, Hierarchical };

constexpr int kAudioGroup = 0;   // "first group" in the load-biasing convention
constexpr int kVisualGroup = 1;  // "second group"

struct MoEConfig {
    Strategy strategy = Strategy::Hierarchical;
    int n_groups = 2;
    int experts_per_group = 4;
    int k_flat = 2;                      // flat top-k
    int m_groups = 2;                    // hierarchical top-m
    std::vector<int> k_within = {1, 1};  // per-group activation counts (k^A, k^V)
    int d_model = 64;
    int d_ff = 256;

    int total_experts() const {
        return strategy == Strategy::Flat ? experts_per_group : n_groups * experts_per_group;
    }
    // Experts activated per token (compute accounting and selection counts).
    int activated_per_token() const;
    void validate() const;
};

// Router parameter matrices, each shaped hidden-dim by number of choices.
struct RouterBank {
    Param* flat = nullptr;            // d_model x n_experts
    std::vector<Param*> intra;        // per group: d_model x experts_per_group
    Param* inter = nullptr;           // d_model x n_groups
};

// One expert: two linear layers around an activation.
struct ExpertFfn {
    Param* w1 = nullptr;  // d_model x d_ff
    Param* w2 = nullptr;  // d_ff x d_model
};

struct ExpertBank {
    std::vector<std::vector<ExpertFfn>> groups;  // [group][expert]
    Activation act = Activation::Gelu;
};

// One router's logits/probabilities over a subset of the batch.
struct RouterTrace {
    std::vector<int> token_ids;  // global token rows this router processed
    Var logits;                  // (|token_ids| x n_choices)
    Var probs;                   // softmax_rows(logits)
};

// Evaluated view of one per-token routing slot.
struct SlotRef {
    int group = 0;
    int expert = 0;     // index within the group
    double weight = 0;  // combine weight
};

// Output of a routing strategy: everything dispatch and the losses consume.
struct ExpertSelection {
    Strategy strategy = Strategy::Flat;
    int n_tokens = 0;

    // Differentiable traces. Flat routing fills intra[0] over all tokens.
    // Hard routing fills intra[group] over the tokens that consulted that
    // group's router. Hierarchical fills intra[group] over all tokens plus
    // the inter trace.
    std::vector<RouterTrace> intra;
    std::optional<RouterTrace> inter;

    // Dispatch plan: per (group, expert) one or more token batches, each with
    // a combine-weight vector aligned to its token list.
    struct Assignment {
        std::vector<int> token_ids;
        Var weights;  // (|token_ids|,)
    };
    std::vector<std::vector<std::vector<Assignment>>> plan;  // [group][expert][batch]

    // Evaluated per-token combine slots, for statistics and tests.
    std::vector<std::vector<SlotRef>> slots;  // [token][slot]

    // Per-token inter-modal combine weight per group (hierarchical: renormalized
    // q-tilde; hard: the fixed split; flat: 1.0 on group 0). Evaluated view.
    std::vector<std::vector<double>> group_mass;  // [token][group]
};

// Flat top-k routing: h = x W_r, p = softmax(h), top-k by p with lowest-index
// tie break, combine weights are the renormalized top-k probabilities.
ExpertSelection route_flat(Tape& tape, Var x, Param& router, int k, const MoEConfig& cfg);

// Modality-hard routing: unimodal tokens take top-k within their group;
// audio-visual tokens take top-(k/2) from each group with the group split
// fixed at av_audio_weight / 1 - av_audio_weight (0.5 reproduces the paper's
// averaging; other values are an analysis-only override).
ExpertSelection route_hard(Tape& tape, Var x, const std::vector<ModalityTag>& tags,
                           const std::vector<Param*>& intra_routers, int k, const MoEConfig& cfg,
                           double av_audio_weight = 0.5);

// Two-level gating: q = softmax(V_r x) picks top-m groups (renormalized to
// q-tilde); within each selected group the intra router picks top-k_within
// experts whose renormalized weights multiply q-tilde. Tags are not consulted
// for gating. force_q, when set, replaces the inter-modal decision with fixed
// group weights (analysis override).
ExpertSelection route_hierarchical(Tape& tape, Var x, const std::vector<ModalityTag>& tags,
                                   Param& inter_router, const std::vector<Param*>& intra_routers,
                                   int m, const std::vector<int>& k_within, const MoEConfig& cfg,
                                   const std::vector<double>* force_q = nullptr);

// Runs the selected experts and combines their outputs with the plan weights.
// Gradients reach x through both the expert path and the combine weights.
Var dispatch(Tape& tape, Var x, const ExpertBank& experts, const ExpertSelection& sel);

// Brute-force top-k by full stable sort; test oracle only.
std::vector<int> topk_oracle(const std::vector<double>& p, int k);

// Shared helper: indices of the k largest entries of row, lowest index wins ties.
std::vector<int> topk_indices(const double* row, int n, int k);
int argmax_index(const double* row, int n);

}  // namespace hmoe
