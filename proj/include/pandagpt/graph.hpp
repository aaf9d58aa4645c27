#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "pandagpt/tensor.hpp"

namespace pgpt {

using NodeId = int32_t;

// Tape-based reverse-mode autodiff over Tensors. The tape is append-only, so
// node creation order is a topological order and backward is a single reverse
// sweep. A Graph is rebuilt per training step and confined to one thread.
//
// Values are stored in 32-bit floats; reductions inside each op accumulate in
// 64-bit before rounding, and scalar loss nodes keep their unrounded 64-bit
// value (value_f64). A Graph constructed with track_f64=true additionally
// carries a full 64-bit value pipeline next to the float one; finite
// difference oracles probe that track so their step arithmetic is exact.
class Graph {
public:
    explicit Graph(bool track_f64 = false) : track_f64_(track_f64) {}

    // Leaf holding a value. Parameters are leaves with requires_grad=true.
    NodeId input(Tensor v, bool requires_grad);
    NodeId constant(Tensor v) { return input(std::move(v), false); }
    NodeId param(const Tensor& v) { return input(v, true); }

    // c = a * b, shapes [m x k] x [k x n].
    NodeId matmul(NodeId a, NodeId b);
    // c = a * b^T, shapes [m x k] x [n x k]. Used for tied heads and attention scores.
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    // a: [n x d], bias: [d], broadcast over rows.
    NodeId add_bias(NodeId a, NodeId bias);
    NodeId scale(NodeId a, double c);
    NodeId tanh_act(NodeId a);
    NodeId gelu(NodeId a);
    // Softmax along axis of a 1-D or 2-D tensor; axis 1 (rows) or 0 (columns) for 2-D.
    NodeId softmax(NodeId a, int axis);
    NodeId softmax_rows(NodeId a);
    // y = gain ⊙ x / sqrt(mean(x^2) + eps), per row.
    NodeId rmsnorm_rows(NodeId x, NodeId gain);
    NodeId l2normalize_rows(NodeId a);
    // y[t] = table[ids[t]]; backward scatter-adds into the table rows.
    NodeId gather_rows(NodeId table, std::vector<int> ids);
    NodeId slice_rows(NodeId a, int r0, int h);
    NodeId slice_cols(NodeId a, int c0, int w);
    NodeId concat_rows(const std::vector<NodeId>& parts);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    // [n x d] -> [1 x d] column means.
    NodeId mean_rows(NodeId a);
    // Mean over masked rows of -log softmax(logits_row)[target]. Rows with
    // mask 0 contribute exactly zero to the value and the gradient.
    NodeId masked_cross_entropy(NodeId logits, std::vector<int> targets, std::vector<uint8_t> mask);

    // Reverse sweep from a scalar root. Fills gradients for every node that
    // requires grad and was reached; parameters never touched read back as zeros.
    void backward(NodeId root);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    // 64-bit value of a scalar node. Exact for loss roots; exact end to end
    // when the graph tracks the 64-bit pipeline.
    double value_f64(NodeId id) const;
    // Gradient of a node after backward; zeros if the node was never reached.
    const Tensor& grad(NodeId id);
    bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    bool tracks_f64() const { return track_f64_; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> value64;  // filled when track_f64_
        Tensor grad;                  // empty until first contribution
        bool requires_grad = false;
        bool has_scalar64 = false;
        double scalar64 = 0.0;
        std::function<void(Graph&)> backward_fn;  // empty for leaves
    };

    NodeId push(Tensor v, bool requires_grad, const char* tag);
    Tensor& grad_buf(NodeId id);
    Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    void set_scalar64(NodeId id, double v);
    const std::vector<double>& v64(NodeId id) const { return nodes_[static_cast<size_t>(id)].value64; }
    std::vector<double>& v64_buf(NodeId id) { return nodes_[static_cast<size_t>(id)].value64; }

    std::deque<Node> nodes_;  // deque: references stay valid as the tape grows
    bool track_f64_ = false;
};

}  // namespace pgpt
