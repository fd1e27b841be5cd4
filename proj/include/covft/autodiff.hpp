#pragma once

// Tape-based reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is an append-only list of nodes. Each op evaluates eagerly, appends a
// node holding its value, and registers a backward closure that reads the node's
// output gradient and accumulates into its inputs. backward() walks the tape in
// reverse append order, so every node is visited at most once and the graph is
// acyclic by construction.
//
// Parameters enter as leaves bound to ParameterStore storage (no copy). Their
// gradients stay on the graph until collect_param_grads() moves them into a
// GradBuffer, which keeps one graph per sample independent of every other.

#include "covft/params.hpp"
#include "covft/tensor.hpp"

#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace covft::ad {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid for the graph's lifetime.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const noexcept { return graph != nullptr && id >= 0; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    /// With grad_enabled == false every node is created without gradient tracking.
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value, bool requires_grad = true);
    /// Leaf bound to a stored parameter; requires grad iff the parameter is trainable.
    /// Repeated calls for the same id return the same node.
    Var param(const ParameterStore& store, ParamId id);

    const Tensor& value(Var v) const;
    /// Gradient accumulated at v by backward(), or nullptr if none reached it.
    const Tensor* grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed each call.
    void backward(Var loss);
    /// Clears every gradient on the tape, including leaves.
    void zero_grad();

    /// Adds parameter-leaf gradients into `out`.
    void collect_param_grads(GradBuffer& out) const;

    // Op-author interface ---------------------------------------------------
    /// Appends a node; it requires grad when any input does.
    Var emit(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var emit(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    bool needs_grad(int id) const { return nodes_[id].requires_grad; }
    const Tensor& value_of(int id) const;
    const Tensor& grad_of(int id) const { return nodes_[id].grad; }
    /// Gradient accumulator for `id`, zero-allocated on first use.
    Tensor& grad_acc(int id);

private:
    struct Node {
        Tensor own;
        const Tensor* external = nullptr;
        Tensor grad;
        bool requires_grad = false;
        bool is_leaf = false;
        ParamId param = static_cast<ParamId>(-1);
        BackwardFn backward;
    };

    int check(Var v) const;
    Var push(Node node);

    std::vector<Node> nodes_;
    std::vector<int> param_nodes_;
    bool grad_enabled_;
};

/// Disable tracking for a tensor computed by a sub-graph (treat it as data).
Var detach(Var x);

// Linear algebra ---------------------------------------------------------
Var matmul(Var a, Var b);
Var transpose(Var x);
Var reshape(Var x, Shape shape);

// Elementwise ------------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
/// x[m,n] + bias[n] broadcast over rows.
Var add_bias(Var x, Var bias);
/// Exact (erf) GELU.
Var gelu(Var x);

// Normalisation & attention helpers -------------------------------------
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax(Var x, std::size_t axis);
/// Entries with column > row + offset become -inf (pre-softmax causal mask).
Var causal_mask(Var scores, std::ptrdiff_t offset = 0);

// Reductions & structural ------------------------------------------------
Var sum(Var x);
/// Column means of a 2-D tensor, returned as a vector of width cols.
Var mean_rows(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Row `r` of a 2-D tensor as a vector.
Var row(Var x, std::size_t r);
/// Embedding lookup: rows of `table` selected by `ids`.
Var gather_rows(Var table, std::span<const int> ids);

// Losses & gating --------------------------------------------------------
/// Sum over rows of -log softmax(logits[r])[targets[r]]. Scalar.
Var cross_entropy(Var logits, std::span<const int> targets);
/// weights[index] * x.
Var scale_by(Var x, Var weights, std::size_t index);
/// Keeps `active` entries of a non-negative vector, renormalised to sum to 1; others become 0.
Var renormalize_subset(Var weights, std::span<const std::size_t> active);

}  // namespace covft::ad
