#include "eduvqa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "eduvqa/errors.hpp"

namespace eduvqa::numerics {

// ---------------------------------------------------------------------------
// Var / ParameterSet

Tape& Var::tape() const {
    if (!tape_) throw UsageError("use of an unbound Var");
    return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

void ParameterSet::add(const std::string& name, Tensor value) {
    if (!tensors_.emplace(name, std::move(value)).second) {
        throw ConfigError("duplicate parameter '" + name + "'");
    }
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) out.push_back(name);
    return out;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NumericalError((scope_.empty() ? std::string() : scope_ + ": ") + "non-finite constant");
    nodes_.push_back(Node{std::move(value), nullptr, false, std::nullopt});
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
    if (!value.all_finite()) throw NumericalError((scope_.empty() ? std::string() : scope_ + ": ") + "non-finite leaf");
    nodes_.push_back(Node{std::move(value), nullptr, true, std::nullopt});
    return Var(this, nodes_.size() - 1);
}

bool Tape::has_parameter(const std::string& name) const {
    return params_ && params_->contains(name);
}

Var Tape::parameter(const std::string& name) {
    if (!params_) throw UsageError("tape has no parameter set bound");
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = leaf(params_->at(name));
    param_nodes_.emplace(name, v.id());
    return v;
}

Var Tape::record(Tensor value, std::string_view op, const std::vector<Var>& parents,
                 BackwardFn backward) {
    if (!value.all_finite()) {
        throw NumericalError((scope_.empty() ? std::string() : scope_ + ": ") + std::string(op) +
                             " produced a non-finite value");
    }
    bool needs = false;
    for (const Var& p : parents) {
        if (&p.tape() != this) throw UsageError(std::string(op) + ": operands on different tapes");
        needs = needs || nodes_[p.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), needs ? std::move(backward) : nullptr, needs,
                          std::nullopt});
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(std::size_t id) {
    Node& node = nodes_.at(id);
    if (!node.grad) node.grad = Tensor(node.value.shape(), std::vector<double>(node.value.size()));
    return *node.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_.at(id).requires_grad) return;
    Tensor& slot = grad_slot(id);
    if (slot.size() != g.size()) {
        throw ShapeError("gradient of shape " + shape_to_string(g.shape()) +
                         " does not match value " + shape_to_string(slot.shape()));
    }
    auto dst = slot.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
    if (nodes_.empty()) throw UsageError("backward called before any forward computation");
    if (&loss.tape() != this) throw UsageError("loss belongs to a different tape");
    if (loss.size() != 1) {
        throw UsageError("backward needs a scalar loss, got shape " +
                         shape_to_string(loss.shape()));
    }
    for (Node& n : nodes_) n.grad.reset();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_slot(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.grad || !node.backward) continue;
        const Tensor out_grad = *node.grad;
        node.backward(*this, out_grad);
    }
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad) return *node.grad;
    return Tensor(node.value.shape(), std::vector<double>(node.value.size()));
}

Gradients Tape::parameter_grads() const {
    Gradients out;
    if (!params_) return out;
    for (const auto& [name, value] : *params_) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end() && nodes_[it->second].grad) {
            out.emplace(name, *nodes_[it->second].grad);
        } else {
            out.emplace(name, Tensor(value.shape(), std::vector<double>(value.size())));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

Tape& common_tape(std::initializer_list<Var> vars) {
    Tape* tape = nullptr;
    for (const Var& v : vars) {
        if (!tape) tape = &v.tape();
        else if (tape != &v.tape()) throw UsageError("operands on different tapes");
    }
    return *tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

void require_scalar(const char* op, const Tensor& s) {
    if (s.size() != 1) {
        throw ShapeError(std::string(op) + ": expected a one-element tensor, got " +
                         shape_to_string(s.shape()));
    }
}

// C[m,n] (+)= op(A) op(B), row-major; op = transpose when the flag is set.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = trans_a ? a[p * m + i] : a[i * k + p];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            if (trans_b) {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            } else {
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), std::vector<double>(t.size())); }

Shape without_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    return out;
}

std::size_t product(const Shape& shape, std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= shape[i];
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
    Tape& tape = common_tape({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() < 2 || bv.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands, got " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()));
    }
    const std::size_t m = av.shape()[av.rank() - 2];
    const std::size_t k = av.shape()[av.rank() - 1];
    const std::size_t kb = bv.shape()[bv.rank() - 2];
    const std::size_t n = bv.shape()[bv.rank() - 1];
    if (k != kb) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_to_string(av.shape()) +
                         " x " + shape_to_string(bv.shape()) + " (" + std::to_string(k) +
                         " != " + std::to_string(kb) + ")");
    }
    const Shape batch(av.shape().begin(), av.shape().end() - 2);
    const bool broadcast_b = bv.rank() == 2;
    if (!broadcast_b && Shape(bv.shape().begin(), bv.shape().end() - 2) != batch) {
        throw ShapeError("matmul batch dimensions differ: " + shape_to_string(av.shape()) +
                         " x " + shape_to_string(bv.shape()));
    }
    const std::size_t batches = shape_size(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (std::size_t bi = 0; bi < batches; ++bi) {
        gemm(av.values().data() + bi * m * k,
             bv.values().data() + (broadcast_b ? 0 : bi * k * n),
             out.values().data() + bi * m * n, m, k, n, false, false);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), "matmul", {a, b},
                       [ia, ib, m, k, n, batches, broadcast_b](Tape& t, const Tensor& g) {
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           if (t.requires_grad(ia)) {
                               Tensor ga = zeros_like(av);
                               for (std::size_t bi = 0; bi < batches; ++bi) {
                                   gemm(g.values().data() + bi * m * n,
                                        bv.values().data() + (broadcast_b ? 0 : bi * k * n),
                                        ga.values().data() + bi * m * k, m, n, k, false, true);
                               }
                               t.accumulate(ia, ga);
                           }
                           if (t.requires_grad(ib)) {
                               Tensor gb = zeros_like(bv);
                               for (std::size_t bi = 0; bi < batches; ++bi) {
                                   gemm(av.values().data() + bi * m * k,
                                        g.values().data() + bi * m * n,
                                        gb.values().data() + (broadcast_b ? 0 : bi * k * n), k,
                                        m, n, true, false);
                               }
                               t.accumulate(ib, gb);
                           }
                       });
}

Var transpose_last2(Var x) {
    Tape& tape = x.tape();
    const Tensor& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("transpose needs rank >= 2");
    const std::size_t m = xv.shape()[xv.rank() - 2];
    const std::size_t n = xv.shape()[xv.rank() - 1];
    const std::size_t batches = xv.size() / (m * n);
    Shape out_shape = xv.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    auto transpose = [](const Tensor& src, Tensor& dst, std::size_t batches, std::size_t rows,
                        std::size_t cols) {
        for (std::size_t b = 0; b < batches; ++b) {
            const double* s = src.values().data() + b * rows * cols;
            double* d = dst.values().data() + b * rows * cols;
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) d[j * rows + i] = s[i * cols + j];
            }
        }
    };
    Tensor out(out_shape);
    transpose(xv, out, batches, m, n);
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "transpose", {x},
                       [ix, m, n, batches, transpose](Tape& t, const Tensor& g) {
                           Tensor gx = zeros_like(t.value(ix));
                           transpose(g, gx, batches, n, m);
                           t.accumulate(ix, gx);
                       });
}

namespace {

template <typename Fwd, typename Bwd>
Var binary_same_shape(const char* op, Var a, Var b, Fwd fwd, Bwd bwd) {
    Tape& tape = common_tape({a, b});
    require_same_shape(op, a.value(), b.value());
    Tensor out(a.value().shape());
    auto av = a.value().values();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), op, {a, b}, [ia, ib, bwd](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        Tensor ga = zeros_like(av), gb = zeros_like(bv);
        for (std::size_t i = 0; i < g.size(); ++i) {
            auto [da, db] = bwd(av[i], bv[i], g[i]);
            ga[i] = da;
            gb[i] = db;
        }
        t.accumulate(ia, ga);
        t.accumulate(ib, gb);
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary_same_shape(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g) { return std::pair{g, g}; });
}

Var sub(Var a, Var b) {
    return binary_same_shape(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g) { return std::pair{g, -g}; });
}

Var mul(Var a, Var b) {
    return binary_same_shape(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Var add_bias(Var x, Var bias) {
    Tape& tape = common_tape({x, bias});
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.rank() < 1 || bv.rank() != 1 || bv.size() != xv.shape().back()) {
        throw ShapeError("add_bias: bias " + shape_to_string(bv.shape()) +
                         " does not match last axis of " + shape_to_string(xv.shape()));
    }
    const std::size_t n = bv.size();
    Tensor out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
    const std::size_t ix = x.id(), ib = bias.id();
    return tape.record(std::move(out), "add_bias", {x, bias},
                       [ix, ib, n](Tape& t, const Tensor& g) {
                           t.accumulate(ix, g);
                           if (t.requires_grad(ib)) {
                               Tensor gb(Shape{n});
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                               t.accumulate(ib, gb);
                           }
                       });
}

Var add_scalar(Var x, Var s) {
    Tape& tape = common_tape({x, s});
    require_scalar("add_scalar", s.value());
    Tensor out = x.value();
    const double sv = s.value()[0];
    for (double& v : out.values()) v += sv;
    const std::size_t ix = x.id(), is = s.id();
    return tape.record(std::move(out), "add_scalar", {x, s}, [ix, is](Tape& t, const Tensor& g) {
        t.accumulate(ix, g);
        Tensor gs = zeros_like(t.value(is));
        gs[0] = ordered_sum(g.values());
        t.accumulate(is, gs);
    });
}

Var mul_scalar(Var x, Var s) {
    Tape& tape = common_tape({x, s});
    require_scalar("mul_scalar", s.value());
    Tensor out = x.value();
    const double sv = s.value()[0];
    for (double& v : out.values()) v *= sv;
    const std::size_t ix = x.id(), is = s.id();
    return tape.record(std::move(out), "mul_scalar", {x, s}, [ix, is](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(ix);
        const double sv = t.value(is)[0];
        Tensor gx = zeros_like(xv);
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] = g[i] * sv;
            gs += g[i] * xv[i];
        }
        t.accumulate(ix, gx);
        Tensor gst = zeros_like(t.value(is));
        gst[0] = gs;
        t.accumulate(is, gst);
    });
}

Var div_scalar(Var x, Var s) {
    Tape& tape = common_tape({x, s});
    require_scalar("div_scalar", s.value());
    const double sv = s.value()[0];
    if (sv == 0.0) throw NumericalError(tape.scope() + ": division by zero in div_scalar");
    Tensor out = x.value();
    for (double& v : out.values()) v /= sv;
    const std::size_t ix = x.id(), is = s.id();
    return tape.record(std::move(out), "div_scalar", {x, s}, [ix, is](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(ix);
        const double sv = t.value(is)[0];
        Tensor gx = zeros_like(xv);
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] = g[i] / sv;
            gs -= g[i] * xv[i] / (sv * sv);
        }
        t.accumulate(ix, gx);
        Tensor gst = zeros_like(t.value(is));
        gst[0] = gs;
        t.accumulate(is, gst);
    });
}

Var scale(Var x, double factor) {
    Tape& tape = x.tape();
    Tensor out = x.value();
    for (double& v : out.values()) v *= factor;
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "scale", {x}, [ix, factor](Tape& t, const Tensor& g) {
        Tensor gx = g;
        for (double& v : gx.values()) v *= factor;
        t.accumulate(ix, gx);
    });
}

Var relu(Var x) {
    Tape& tape = x.tape();
    Tensor out = x.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "relu", {x}, [ix](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(ix);
        Tensor gx = zeros_like(xv);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
        t.accumulate(ix, gx);
    });
}

Var sqrt(Var x) {
    Tape& tape = x.tape();
    Tensor out = x.value();
    for (double& v : out.values()) {
        if (v < 0.0) throw NumericalError(tape.scope() + ": sqrt of negative value");
        v = std::sqrt(v);
    }
    const std::size_t ix = x.id(), iy = tape.size();
    return tape.record(std::move(out), "sqrt", {x}, [ix, iy](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(iy);
        Tensor gx = zeros_like(y);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (y[i] == 0.0) throw NumericalError("sqrt gradient at zero");
            gx[i] = 0.5 * g[i] / y[i];
        }
        t.accumulate(ix, gx);
    });
}

namespace {

// Softmax over the middle axis of an [outer, n, inner] view.
Var softmax_view(const char* op, Var x, std::size_t outer, std::size_t n, std::size_t inner) {
    Tape& tape = x.tape();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<double> column(n);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            for (std::size_t j = 0; j < n; ++j) column[j] = std::exp(xv[base + j * inner] - mx);
            const double denom = ordered_sum(column);
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = column[j] / denom;
        }
    }
    const std::size_t ix = x.id(), iy = tape.size();
    return tape.record(std::move(out), op, {x},
                       [ix, iy, outer, n, inner](Tape& t, const Tensor& g) {
                           const Tensor& y = t.value(iy);
                           Tensor gx = zeros_like(y);
                           for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * n * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       dot += g[base + j * inner] * y[base + j * inner];
                                   }
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const std::size_t idx = base + j * inner;
                                       gx[idx] = y[idx] * (g[idx] - dot);
                                   }
                               }
                           }
                           t.accumulate(ix, gx);
                       });
}

}  // namespace

Var softmax(Var x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) {
        throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(s));
    }
    return softmax_view("softmax", x, product(s, 0, axis), s[axis],
                        product(s, axis + 1, s.size()));
}

Var softmax_all(Var x) { return softmax_view("softmax_all", x, 1, x.size(), 1); }

Var mean_pool(Var x, std::vector<std::size_t> axes) {
    Tape& tape = x.tape();
    const Tensor& xv = x.value();
    const Shape& shape = xv.shape();
    std::sort(axes.begin(), axes.end());
    if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
        throw ShapeError("mean_pool: repeated axis");
    }
    std::vector<bool> pooled(shape.size(), false);
    std::size_t count = 1;
    for (std::size_t a : axes) {
        if (a >= shape.size()) {
            throw ShapeError("mean_pool: axis " + std::to_string(a) + " out of range for " +
                             shape_to_string(shape));
        }
        pooled[a] = true;
        count *= shape[a];
    }
    if (count == 0) throw DegenerateInputError("mean_pool over an empty axis");
    Shape out_shape;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (!pooled[i]) out_shape.push_back(shape[i]);
    }
    const std::size_t out_size = shape_size(out_shape);

    // Map every input entry to its output slot by walking the multi-index.
    std::vector<std::size_t> target(xv.size());
    std::vector<std::size_t> idx(shape.size(), 0);
    std::vector<std::size_t> out_stride(shape.size(), 0);
    {
        std::size_t stride = 1;
        for (std::size_t i = shape.size(); i-- > 0;) {
            if (!pooled[i]) {
                out_stride[i] = stride;
                stride *= shape[i];
            }
        }
    }
    for (std::size_t flat = 0; flat < xv.size(); ++flat) {
        std::size_t o = 0;
        for (std::size_t i = 0; i < shape.size(); ++i) o += idx[i] * out_stride[i];
        target[flat] = o;
        for (std::size_t i = shape.size(); i-- > 0;) {
            if (++idx[i] < shape[i]) break;
            idx[i] = 0;
        }
    }

    std::vector<double> buckets(xv.size());
    std::vector<std::size_t> fill(out_size, 0);
    for (std::size_t flat = 0; flat < xv.size(); ++flat) {
        buckets[target[flat] * count + fill[target[flat]]++] = xv[flat];
    }
    Tensor out(out_shape);
    for (std::size_t o = 0; o < out_size; ++o) {
        out[o] = ordered_sum(std::span<const double>(buckets).subspan(o * count, count)) /
                 static_cast<double>(count);
    }
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "mean_pool", {x},
                       [ix, target = std::move(target), count](Tape& t, const Tensor& g) {
                           Tensor gx = zeros_like(t.value(ix));
                           const double inv = 1.0 / static_cast<double>(count);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[target[i]] * inv;
                           t.accumulate(ix, gx);
                       });
}

Var sum_all(Var x) {
    Tape& tape = x.tape();
    Tensor out = Tensor::scalar(ordered_sum(x.value().values()));
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "sum_all", {x}, [ix](Tape& t, const Tensor& g) {
        Tensor gx = zeros_like(t.value(ix));
        for (double& v : gx.values()) v = g[0];
        t.accumulate(ix, gx);
    });
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Tape& tape = parts.front().tape();
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != first[i]) {
                throw ShapeError("concat extent mismatch: " + shape_to_string(s) + " vs " +
                                 shape_to_string(first));
            }
        }
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = product(first, 0, axis);
    const std::size_t inner = product(first, axis + 1, first.size());
    Tensor out(out_shape);
    std::vector<std::size_t> ids, widths;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const std::size_t w = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.value().values().data() + o * w, w,
                        out.values().data() + o * out_shape[axis] * inner + offset);
        }
        offset += w;
        ids.push_back(p.id());
        widths.push_back(w);
    }
    const std::size_t row = out_shape[axis] * inner;
    return tape.record(std::move(out), "concat", parts,
                       [ids, widths, outer, row](Tape& t, const Tensor& g) {
                           std::size_t offset = 0;
                           for (std::size_t p = 0; p < ids.size(); ++p) {
                               Tensor gp = zeros_like(t.value(ids[p]));
                               for (std::size_t o = 0; o < outer; ++o) {
                                   std::copy_n(g.values().data() + o * row + offset, widths[p],
                                               gp.values().data() + o * widths[p]);
                               }
                               t.accumulate(ids[p], gp);
                               offset += widths[p];
                           }
                       });
}

Var stack(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    std::vector<Var> expanded;
    expanded.reserve(parts.size());
    for (const Var& p : parts) {
        if (p.shape() != parts.front().shape()) throw ShapeError("stack shape mismatch");
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, 0);
}

Var reshape(Var x, Shape shape) {
    Tape& tape = x.tape();
    Tensor out = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "reshape", {x}, [ix](Tape& t, const Tensor& g) {
        t.accumulate(ix, g.reshaped(t.value(ix).shape()));
    });
}

Var select(Var x, std::size_t axis, std::size_t index) {
    Tape& tape = x.tape();
    const Shape& s = x.shape();
    if (axis >= s.size() || index >= s[axis]) {
        throw ShapeError("select index " + std::to_string(index) + " on axis " +
                         std::to_string(axis) + " out of range for " + shape_to_string(s));
    }
    const std::size_t outer = product(s, 0, axis);
    const std::size_t inner = product(s, axis + 1, s.size());
    const std::size_t n = s[axis];
    Tensor out(without_axis(s, axis));
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.value().values().data() + (o * n + index) * inner, inner,
                    out.values().data() + o * inner);
    }
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "select", {x},
                       [ix, outer, inner, n, index](Tape& t, const Tensor& g) {
                           Tensor gx = zeros_like(t.value(ix));
                           for (std::size_t o = 0; o < outer; ++o) {
                               std::copy_n(g.values().data() + o * inner, inner,
                                           gx.values().data() + (o * n + index) * inner);
                           }
                           t.accumulate(ix, gx);
                       });
}

Var gather(Var x, const std::vector<std::size_t>& indices) {
    Tape& tape = x.tape();
    if (indices.empty()) throw ShapeError("gather with no indices");
    Tensor out(Shape{indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.size()) throw ShapeError("gather index out of range");
        out[i] = x.value()[indices[i]];
    }
    const std::size_t ix = x.id();
    return tape.record(std::move(out), "gather", {x}, [ix, indices](Tape& t, const Tensor& g) {
        Tensor gx = zeros_like(t.value(ix));
        for (std::size_t i = 0; i < indices.size(); ++i) gx[indices[i]] += g[i];
        t.accumulate(ix, gx);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& tape = common_tape({x, gamma, beta});
    const Tensor& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
    const std::size_t n = xv.shape().back();
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
        throw ShapeError("layer_norm affine parameters must have shape [" + std::to_string(n) +
                         "]");
    }
    const std::size_t rows = xv.size() / n;
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.values().data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mean) * inv_std[r];
            xhat[r * n + j] = h;
            out[r * n + j] = gv[j] * h + bv[j];
        }
    }
    const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
    return tape.record(
        std::move(out), "layer_norm", {x, gamma, beta},
        [ix, ig, ib, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
            Tape& t, const Tensor& g) {
            const Tensor& gv = t.value(ig);
            Tensor gx = zeros_like(t.value(ix));
            Tensor ggamma(Shape{n}), gbeta(Shape{n});
            std::vector<double> gh(n);
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_gh = 0.0, sum_gh_h = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = r * n + j;
                    gbeta[j] += g[idx];
                    ggamma[j] += g[idx] * xhat[idx];
                    gh[j] = g[idx] * gv[j];
                    sum_gh += gh[j];
                    sum_gh_h += gh[j] * xhat[idx];
                }
                const double nn = static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = r * n + j;
                    gx[idx] = inv_std[r] / nn * (nn * gh[j] - sum_gh - xhat[idx] * sum_gh_h);
                }
            }
            t.accumulate(ix, gx);
            t.accumulate(ig, ggamma);
            t.accumulate(ib, gbeta);
        });
}

Var weighted_sum(const std::vector<Var>& terms, Var weights) {
    if (terms.empty()) throw ShapeError("weighted_sum of zero terms");
    Tape& tape = weights.tape();
    if (weights.shape() != Shape{terms.size()}) {
        throw ShapeError("weighted_sum: weights " + shape_to_string(weights.shape()) +
                         " do not match " + std::to_string(terms.size()) + " terms");
    }
    const Shape& shape = terms.front().shape();
    for (const Var& term : terms) {
        if (term.shape() != shape) throw ShapeError("weighted_sum: term shape mismatch");
    }
    Tensor out(shape);
    std::vector<double> products(terms.size());
    const Tensor& wv = weights.value();
    for (std::size_t e = 0; e < out.size(); ++e) {
        for (std::size_t j = 0; j < terms.size(); ++j) products[j] = wv[j] * terms[j].value()[e];
        out[e] = ordered_sum(products);
    }
    std::vector<std::size_t> ids;
    std::vector<Var> parents = terms;
    parents.push_back(weights);
    for (const Var& term : terms) ids.push_back(term.id());
    const std::size_t iw = weights.id();
    return tape.record(std::move(out), "weighted_sum", parents,
                       [ids, iw](Tape& t, const Tensor& g) {
                           const Tensor& wv = t.value(iw);
                           Tensor gw = zeros_like(wv);
                           for (std::size_t j = 0; j < ids.size(); ++j) {
                               const Tensor& term = t.value(ids[j]);
                               Tensor gt = zeros_like(term);
                               double acc = 0.0;
                               for (std::size_t e = 0; e < g.size(); ++e) {
                                   gt[e] = wv[j] * g[e];
                                   acc += g[e] * term[e];
                               }
                               gw[j] = acc;
                               t.accumulate(ids[j], gt);
                           }
                           t.accumulate(iw, gw);
                       });
}

Var linear(Var x, Var w, std::optional<Var> b) {
    if (w.value().rank() != 2) throw ShapeError("linear weight must be a matrix");
    Var y;
    if (x.value().rank() == 1) {
        y = reshape(matmul(reshape(x, {1, x.size()}), w), {w.shape()[1]});
    } else {
        y = matmul(x, w);
    }
    return b ? add_bias(y, *b) : y;
}

}  // namespace eduvqa::numerics
