#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "eduvqa/tensor.hpp"

namespace eduvqa::numerics {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
class Var {
public:
    Var() = default;

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape& tape() const;
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    double item() const { return value().item(); }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Named trainable tensors in insertion-independent (sorted) order.
class ParameterSet {
public:
    void add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    std::vector<std::string> names() const;
    std::size_t size() const noexcept { return tensors_.size(); }
    std::size_t scalar_count() const;

    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }

private:
    std::map<std::string, Tensor> tensors_;
};

using Gradients = std::map<std::string, Tensor>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// node list backwards is a reverse topological traversal. Single writer.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    explicit Tape(const ParameterSet* params = nullptr) : params_(params) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Differentiable leaf that is not backed by a ParameterSet entry.
    Var leaf(Tensor value);
    /// Leaf bound to a named parameter; repeated calls return the same node.
    Var parameter(const std::string& name);
    bool has_parameter(const std::string& name) const;

    void backward(Var loss);

    /// Gradient of the last backward pass; zeros for nodes off every path to the loss.
    Tensor grad(Var v) const;
    /// Gradient for every entry of the bound ParameterSet (zeros when unused).
    Gradients parameter_grads() const;

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    /// Label prefixed to non-finite-value errors raised by subsequent ops.
    void set_scope(std::string scope) { scope_ = std::move(scope); }
    const std::string& scope() const noexcept { return scope_; }

    /// Appends an op result. `backward` is kept only when some parent needs a gradient.
    Var record(Tensor value, std::string_view op, const std::vector<Var>& parents,
               BackwardFn backward);
    /// Adds `g` into the gradient accumulator of node `id`.
    void accumulate(std::size_t id, const Tensor& g);
    Tensor& grad_slot(std::size_t id);
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

private:
    struct Node {
        Tensor value;
        BackwardFn backward;
        bool requires_grad = false;
        std::optional<Tensor> grad;
    };

    const ParameterSet* params_;
    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> param_nodes_;
    std::string scope_;
};

/// Restores the tape scope on destruction.
class ScopeGuard {
public:
    ScopeGuard(Tape& tape, std::string scope) : tape_(tape), previous_(tape.scope()) {
        tape_.set_scope(std::move(scope));
    }
    ~ScopeGuard() { tape_.set_scope(previous_); }
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

private:
    Tape& tape_;
    std::string previous_;
};

// Primitive operations. Every op records its gradient rule on the operands' tape.

/// [..., m, k] x [k, n] or [..., m, k] x [..., k, n] -> [..., m, n].
Var matmul(Var a, Var b);
Var transpose_last2(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x[..., n] + bias[n].
Var add_bias(Var x, Var bias);
/// Adds a one-element tensor to every entry.
Var add_scalar(Var x, Var s);
Var mul_scalar(Var x, Var s);
Var div_scalar(Var x, Var s);
Var scale(Var x, double factor);
Var relu(Var x);
Var sqrt(Var x);
Var softmax(Var x, std::size_t axis);
/// Softmax over every entry of x, keeping its shape.
Var softmax_all(Var x);
/// Arithmetic mean over a set of distinct axes; the other axes keep their order.
Var mean_pool(Var x, std::vector<std::size_t> axes);
Var sum_all(Var x);
Var mean_all(Var x);
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// Stacks equally shaped tensors along a new leading axis.
Var stack(const std::vector<Var>& parts);
Var reshape(Var x, Shape shape);
/// Picks `index` along `axis` and drops that axis.
Var select(Var x, std::size_t axis, std::size_t index);
/// Entries of the flattened x at `indices`, as a 1-D tensor.
Var gather(Var x, const std::vector<std::size_t>& indices);
/// Normalizes over the last axis, then applies gamma[n] and beta[n].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// sum_j weights[j] * terms[j]; per-entry accumulation independent of term order.
Var weighted_sum(const std::vector<Var>& terms, Var weights);

/// x @ w (+ b) for x of shape [..., in]; w is [in, out].
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);

}  // namespace eduvqa::numerics
