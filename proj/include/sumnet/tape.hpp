#pragma once

#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sumnet/tensor.hpp"

namespace sumnet {

namespace detail {

inline std::span<double> grad_span(const Tensor& t) { return t.impl()->grad; }

// Accumulation target, or empty if this tensor's gradient is never read.
inline bool grad_needed(const Tensor& t) { return !t.impl()->grad.empty(); }

}  // namespace detail

// Record of a forward computation, replayed in reverse to accumulate
// gradients. Ops append nodes in execution order, so the list is already
// topologically sorted. A tape is single-threaded: recording and backward
// must not interleave across threads.
class Tape {
  public:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward_fn;
    };

    void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward_fn) {
        nodes_.push_back({std::move(inputs), std::move(output), std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and walks the nodes once in reverse,
    // accumulating into the grad buffer of every tensor that either requires
    // grad or was produced on this tape. Gradients of multiply-used tensors
    // sum across their uses.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw validation_error("Tape::backward: loss must be scalar, got shape " +
                                   loss.shape().str());
        bool found = false;
        for (const Node& node : nodes_)
            if (node.output.impl() == loss.impl()) found = true;
        if (!found)
            throw validation_error(
                "Tape::backward: loss was not produced on this tape (detached graph)");

        std::unordered_set<detail::TensorImpl*> needs_grad;
        for (const Node& node : nodes_) {
            needs_grad.insert(node.output.impl());
            for (const Tensor& in : node.inputs)
                if (in.requires_grad()) needs_grad.insert(in.impl());
        }
        for (detail::TensorImpl* impl : needs_grad)
            impl->grad.assign(impl->values.size(), 0.0);

        loss.impl()->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->backward_fn) it->backward_fn();
    }

  private:
    std::vector<Node> nodes_;
};

}  // namespace sumnet
