#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "polypflow/tensor.hpp"

namespace pf {

// Named trainable (or buffer) array. Modules own Params; the optimizer and
// checkpoint code see them through a ParamRegistry.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
    bool trainable = true;  // buffers (BN running stats) are not
    bool frozen = false;    // trainable but temporarily excluded from gradients

    void zero_grad() {
        grad = Tensor::zeros(value.shape);
        if (adam_m.shape.empty()) {
            adam_m = Tensor::zeros(value.shape);
            adam_v = Tensor::zeros(value.shape);
        }
    }
};

struct ParamRegistry {
    std::vector<Param*> items;

    void add(Param* p) { items.push_back(p); }

    Param* find(const std::string& name) const {
        for (Param* p : items)
            if (p->name == name) return p;
        return nullptr;
    }

    void zero_grads() {
        for (Param* p : items) p->zero_grad();
    }

    bool all_finite() const {
        for (Param* p : items)
            if (!p->value.all_finite()) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Reverse-mode tape

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backfn;  // accumulates into parents' grads
    Param* param = nullptr;        // set on parameter leaves
};

inline void ensure_grad(const std::shared_ptr<Node>& n) {
    if (n->grad.shape.empty()) n->grad = Tensor::zeros(n->value.shape);
}

struct Var {
    std::shared_ptr<Node> node;

    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node(std::move(n)) {}

    const Tensor& val() const { return node->value; }
    const Tensor& grad() const { return node->grad; }
    bool defined() const { return node != nullptr; }
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(n);
}

inline Var leaf(Tensor t, bool needs_grad = true) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->needs_grad = needs_grad && g_grad_enabled;
    return Var(n);
}

inline Var use(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->needs_grad = g_grad_enabled && !p.frozen && p.trainable;
    n->param = &p;
    return Var(n);
}

// Runs reverse-mode accumulation from a scalar root. Parameter-leaf grads are
// added into their Param::grad.
inline void backward(const Var& root) {
    if (!root.node->needs_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.node.get(), 0});
    seen.insert(root.node.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node->grad = Tensor::full(root.node->value.shape, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->grad.shape.empty()) continue;
        if (n->backfn) n->backfn();
        if (n->param && !n->param->frozen && n->param->trainable) {
            if (n->param->grad.shape.empty()) n->param->grad = Tensor::zeros(n->value.shape);
            for (std::size_t i = 0; i < n->grad.size(); ++i) n->param->grad[i] += n->grad[i];
        }
    }
}

// Helper shared by op implementations.
inline std::shared_ptr<Node> make_op(Tensor value, std::vector<Var> inputs,
                                     std::function<void(Node*)> make_back) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.node->needs_grad;
        if (any) {
            n->needs_grad = true;
            for (auto& v : inputs) n->parents.push_back(v.node);
            make_back(n.get());
        }
    }
    return n;
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("add: shape mismatch " + a.val().shape_str() + " vs " +
                                    b.val().shape_str());
    Tensor y(a.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.val()[i] + b.val()[i];
    auto an = a.node, bn = b.node;
    auto n = make_op(std::move(y), {a, b}, [an, bn](Node* self) {
        self->backfn = [self, an, bn]() {
            if (an->needs_grad) {
                ensure_grad(an);
                for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i];
            }
        };
    });
    return Var(n);
}

inline Var sub(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("sub: shape mismatch");
    Tensor y(a.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.val()[i] - b.val()[i];
    auto an = a.node, bn = b.node;
    auto n = make_op(std::move(y), {a, b}, [an, bn](Node* self) {
        self->backfn = [self, an, bn]() {
            if (an->needs_grad) {
                ensure_grad(an);
                for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] -= self->grad[i];
            }
        };
    });
    return Var(n);
}

inline Var mul(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
    Tensor y(a.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.val()[i] * b.val()[i];
    auto an = a.node, bn = b.node;
    auto n = make_op(std::move(y), {a, b}, [an, bn](Node* self) {
        self->backfn = [self, an, bn]() {
            if (an->needs_grad) {
                ensure_grad(an);
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    an->grad[i] += self->grad[i] * bn->value[i];
            }
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    bn->grad[i] += self->grad[i] * an->value[i];
            }
        };
    });
    return Var(n);
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor y(a.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.val()[i] * s;
    auto an = a.node;
    auto n = make_op(std::move(y), {a}, [an, s](Node* self) {
        self->backfn = [self, an, s]() {
            ensure_grad(an);
            for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i] * s;
        };
    });
    return Var(n);
}

inline Var relu(const Var& x) {
    Tensor y(x.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.val()[i] > 0 ? x.val()[i] : 0.0;
    auto xn = x.node;
    auto n = make_op(std::move(y), {x}, [xn](Node* self) {
        self->backfn = [self, xn]() {
            ensure_grad(xn);
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                if (xn->value[i] > 0) xn->grad[i] += self->grad[i];
        };
    });
    return Var(n);
}

inline Var sigmoid(const Var& x) {
    Tensor y(x.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_scalar(x.val()[i]);
    auto xn = x.node;
    auto n = make_op(std::move(y), {x}, [xn](Node* self) {
        self->backfn = [self, xn]() {
            ensure_grad(xn);
            for (std::size_t i = 0; i < self->grad.size(); ++i) {
                double s = self->value[i];
                xn->grad[i] += self->grad[i] * s * (1.0 - s);
            }
        };
    });
    return Var(n);
}

// mean of squared entries, as a 1-element tensor
inline Var mean_sq(const Var& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.val().size(); ++i) acc += x.val()[i] * x.val()[i];
    double inv_n = 1.0 / static_cast<double>(x.val().size());
    Tensor y({1});
    y[0] = acc * inv_n;
    auto xn = x.node;
    auto n = make_op(std::move(y), {x}, [xn, inv_n](Node* self) {
        self->backfn = [self, xn, inv_n]() {
            ensure_grad(xn);
            double g = self->grad[0] * 2.0 * inv_n;
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g * xn->value[i];
        };
    });
    return Var(n);
}

inline Var add_weighted(const Var& a, const Var& b, double wa, double wb) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("add_weighted: shape mismatch");
    Tensor y(a.val().shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = wa * a.val()[i] + wb * b.val()[i];
    auto an = a.node, bn = b.node;
    auto n = make_op(std::move(y), {a, b}, [an, bn, wa, wb](Node* self) {
        self->backfn = [self, an, bn, wa, wb]() {
            if (an->needs_grad) {
                ensure_grad(an);
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    an->grad[i] += wa * self->grad[i];
            }
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    bn->grad[i] += wb * self->grad[i];
            }
        };
    });
    return Var(n);
}

}  // namespace pf
