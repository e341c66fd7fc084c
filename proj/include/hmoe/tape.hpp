#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "hmoe/tensor.hpp"

namespace hmoe {

enum class Activation { Relu, Gelu };

// Handle to a value recorded on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over a fixed operator set in 64-bit floats.
//
// Every operation validates its inputs, computes the forward value, verifies
// the result is finite, and records a closure that accumulates gradients into
// its inputs. backward() replays those closures in exact reverse execution
// order (single-threaded, so accumulation order is deterministic) and then
// flushes leaf gradients into their Params. A tape can be replayed backward
// only once; build a fresh tape per forward pass.
//
// Discrete decisions (top-k picks, argmax statistics) are made outside the
// tape on current values and enter operations as constant index arguments.
// note_selection() records them so callers can detect selection changes
// between two evaluations (finite-difference stability checks).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // --- leaves ---
    Var constant(Tensor t);
    Var param(Param& p);

    // --- operator set ---
    Var matmul(Var a, Var b);                        // (m,k)x(k,n) -> (m,n)
    Var add(Var a, Var b);                           // same shape
    Var sub(Var a, Var b);                           // same shape
    Var mul(Var a, Var b);                           // elementwise, same shape
    Var scale(Var a, double s);
    Var row_scale(Var m, Var w);                     // (T,d) * (T,) -> (T,d)
    Var transpose(Var a);                            // rank 2
    Var relu(Var a);
    Var gelu(Var a);                                 // exact erf form
    Var activation(Var a, Activation act);
    Var softmax_rows(Var a);                         // per row (rank 2) or whole vector (rank 1)
    Var logsumexp_rows(Var a);                       // (T,n) -> (T,), (n,) -> (1,)
    Var gather_cols(Var a, const std::vector<int>& idx, int k);     // (T,n) + T*k indices -> (T,k)
    Var gather_elems(Var a, const std::vector<int>& rows, const std::vector<int>& cols);  // -> (n,)
    Var gather_elems(Var a, const std::vector<int>& idx);           // rank-1 source -> (n,)
    Var select_rows(Var a, const std::vector<int>& rows);           // duplicates allowed
    Var scatter_rows(Var a, const std::vector<int>& rows, int total_rows);  // adjoint of select
    Var mean_all(Var a);                             // -> (1,)
    Var mean_axis0(Var a);                           // (T,n) -> (n,)
    // Fused forms of stacked select/scatter chains (one node instead of many).
    Var concat_rows(const std::vector<Var>& parts);
    Var scatter_sum(const std::vector<Var>& parts, std::vector<std::vector<int>> rows,
                    int total_rows);

    // --- composed helpers ---
    Var embedding(Var table, const std::vector<int>& ids) { return select_rows(table, ids); }
    Var cross_entropy(Var logits, const std::vector<int>& targets);  // mean over tokens
    Var attention(Var q, Var k, Var v, bool causal);                 // softmax(q k^T / sqrt(d)) v

    // --- access ---
    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;  // valid after backward()
    double scalar(Var v) const;       // value of a single-element tensor

    void backward(Var loss);
    bool backward_done() const { return backward_done_; }
    std::size_t size() const { return nodes_.size(); }

    // --- selection log ---
    void note_selection(int v) { signature_.push_back(v); }
    void note_selection(const std::vector<int>& v);
    const std::vector<int>& selection_signature() const { return signature_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        std::function<void(Tape&)> back;  // empty for leaves
    };

    // Deque keeps references returned by value()/grad() stable while ops push.
    std::deque<Node> nodes_;
    std::vector<std::pair<Param*, int>> param_leaves_;
    std::unordered_map<const Param*, int> param_ids_;
    std::vector<int> signature_;
    bool backward_done_ = false;

    int push(Tensor value, std::function<void(Tape&)> back, const char* op);
    const Node& node(Var v) const;
    Tensor& grad_buf(int id);
    void check(Var v, const char* op) const;
};

}  // namespace hmoe
