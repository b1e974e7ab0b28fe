#pragma once

#include <deque>
#include <functional>
#include <unordered_map>

#include "acdc/params.hpp"
#include "acdc/tensor.hpp"

namespace acdc {

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid for the graph's lifetime.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr; }
    const Shape& shape() const;
    int64_t size() const;
    std::vector<T>& values();
    const std::vector<T>& values() const;
    const std::vector<T>& grad() const;
};

/// Reverse-mode differentiation graph. Nodes are created in topological order
/// by the operator functions; backward() visits them exactly once in reverse
/// creation order, which makes gradient accumulation deterministic.
///
/// A Graph and its tensors form a single-owner unit: one forward/backward at
/// a time, no concurrent mutation. Distinct graphs may live on distinct
/// threads.
template <typename T>
class Graph {
public:
    struct Node {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad; // sized lazily by backward()
        std::function<void(Graph&)> backward;
    };

    /// Constant leaf (inputs, targets). Participates in gradient flow so that
    /// finite-difference checks can probe inputs too.
    Var<T> leaf(const Tensor<T>& t) {
        return make_node(t.shape, t.values, nullptr);
    }

    Var<T> leaf(Tensor<T>&& t) {
        return make_node(std::move(t.shape), std::move(t.values), nullptr);
    }

    /// Leaf bound to parameter storage. Repeat bindings of the same storage
    /// (aliased parameters, or the same parameter used by several stages)
    /// return the same node, so gradients accumulate jointly.
    Var<T> param(Parameter<T>& p) {
        auto* storage = p.storage.get();
        auto it = param_nodes_.find(storage);
        if (it != param_nodes_.end()) return Var<T>{this, it->second};
        Var<T> v = make_node(storage->value.shape, storage->value.values, nullptr);
        param_nodes_.emplace(storage, v.id);
        bound_.push_back(storage);
        return v;
    }

    Var<T> make_node(Shape shape, std::vector<T> values, std::function<void(Graph&)> backward_fn) {
        ACDC_REQUIRE(static_cast<int64_t>(values.size()) == numel(shape),
                     "node value count ", values.size(), " does not match shape ", shape_str(shape));
        nodes_.push_back(Node{std::move(shape), std::move(values), {}, std::move(backward_fn)});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int node_count() const { return static_cast<int>(nodes_.size()); }

    std::vector<T>& grad_of(int id) { return nodes_[static_cast<size_t>(id)].grad; }

    /// Populates gradients of every node reachable below `root` and
    /// accumulates into the grad buffers of all bound parameters.
    void backward(Var<T> root) {
        ACDC_REQUIRE(root.graph == this, "backward root belongs to another graph");
        auto& r = node(root.id);
        ACDC_REQUIRE(numel(r.shape) == 1, "backward requires a scalar root, got shape ", shape_str(r.shape));
        for (int i = 0; i <= root.id; ++i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            n.grad.assign(n.values.size(), T(0));
        }
        r.grad[0] = T(1);
        for (int i = root.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (n.backward) n.backward(*this);
        }
        for (auto* storage : bound_) {
            const auto& g = nodes_[static_cast<size_t>(param_nodes_[storage])].grad;
            auto& dst = storage->grad.values;
            for (size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
        }
    }

private:
    std::deque<Node> nodes_;
    std::unordered_map<ParamStorage<T>*, int> param_nodes_;
    std::vector<ParamStorage<T>*> bound_; // deterministic export order
};

template <typename T>
const Shape& Var<T>::shape() const { return graph->node(id).shape; }
template <typename T>
int64_t Var<T>::size() const { return static_cast<int64_t>(graph->node(id).values.size()); }
template <typename T>
std::vector<T>& Var<T>::values() { return graph->node(id).values; }
template <typename T>
const std::vector<T>& Var<T>::values() const { return graph->node(id).values; }
template <typename T>
const std::vector<T>& Var<T>::grad() const { return graph->node(id).grad; }

} // namespace acdc
