#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "popdefer/error.hpp"
#include "popdefer/mathfn.hpp"
#include "popdefer/tensor.hpp"

namespace popdefer {

using NodeId = std::size_t;

// Reverse-mode tape. One forward pass appends nodes in topological order;
// backward() walks the tape in reverse. The tape owns all values and
// gradients; nodes are immutable once created.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    NodeId leaf(Tensor v) {
        const bool rg = v.requires_grad();
        return push(std::move(v), rg, {});
    }

    NodeId leaf(Tensor v, bool requires_grad) { return push(std::move(v), requires_grad, {}); }

    NodeId constant(Tensor v) { return push(std::move(v), false, {}); }

    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(NodeId id) const { return slots_[id].value; }

    const Tensor& grad(NodeId id) const {
        const Slot& s = slots_[id];
        if (!s.requires_grad) throw StateError("grad requested for a non-differentiable node");
        if (s.grad.numel() == 0) throw StateError("grad requested before backward()");
        return s.grad;
    }

    std::size_t size() const { return slots_.size(); }

    // ---- elementwise ----

    NodeId add(NodeId a, NodeId b) {
        check_same_shape(a, b, "add");
        Tensor out = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] += vb.data()[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            t.accumulate(a, [&](std::size_t i) { return g.data()[i]; });
            t.accumulate(b, [&](std::size_t i) { return g.data()[i]; });
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        check_same_shape(a, b, "sub");
        Tensor out = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] -= vb.data()[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            t.accumulate(a, [&](std::size_t i) { return g.data()[i]; });
            t.accumulate(b, [&](std::size_t i) { return -g.data()[i]; });
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        check_same_shape(a, b, "mul");
        Tensor out = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] *= vb.data()[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const Tensor& va = t.slots_[a].value;
            const Tensor& vb2 = t.slots_[b].value;
            t.accumulate(a, [&](std::size_t i) { return g.data()[i] * vb2.data()[i]; });
            t.accumulate(b, [&](std::size_t i) { return g.data()[i] * va.data()[i]; });
        });
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = slots_[a].value;
        for (double& v : out.data()) v *= c;
        return push(std::move(out), needs(a), [a, c](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            t.accumulate(a, [&](std::size_t i) { return c * g.data()[i]; });
        });
    }

    // a (m,n) + bias row (1,n), broadcast over rows.
    NodeId add_rowvec(NodeId a, NodeId b) {
        const Tensor& va = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        if (vb.rows() != 1 || vb.cols() != va.cols())
            throw StructuralError("add_rowvec: bias shape " + vb.shape_str() +
                                  " does not broadcast over " + va.shape_str());
        Tensor out = va;
        const std::size_t n = va.cols();
        for (std::size_t r = 0; r < va.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) out.data()[r * n + c] += vb.data()[c];
        return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const std::size_t n = g.cols();
            t.accumulate(a, [&](std::size_t i) { return g.data()[i]; });
            if (t.needs(b)) {
                Tensor& gb = t.slots_[b].grad;
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < n; ++c) gb.data()[c] += g.data()[r * n + c];
            }
        });
    }

    NodeId relu(NodeId a) {
        Tensor out = slots_[a].value;
        for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
        return push(std::move(out), needs(a), [a](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const Tensor& va = t.slots_[a].value;
            t.accumulate(a, [&](std::size_t i) { return va.data()[i] > 0.0 ? g.data()[i] : 0.0; });
        });
    }

    NodeId tanh_act(NodeId a) {
        Tensor out = slots_[a].value;
        for (double& v : out.data()) v = std::tanh(v);
        return push(std::move(out), needs(a), [a](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const Tensor& y = t.slots_[self].value;
            t.accumulate(a, [&](std::size_t i) {
                return g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
            });
        });
    }

    // ---- linear algebra ----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& va = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        if (va.cols() != vb.rows())
            throw StructuralError("matmul: inner dimensions disagree, " + va.shape_str() + " x " +
                                  vb.shape_str());
        const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
        Tensor out = Tensor::zeros(m, n);
        const double* pa = va.raw();
        const double* pb = vb.raw();
        double* po = out.raw();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = pa[i * k + p];
                if (aip == 0.0) continue;
                const double* brow = pb + p * n;
                double* orow = po + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
        return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const Tensor& va2 = t.slots_[a].value;
            const Tensor& vb2 = t.slots_[b].value;
            const std::size_t m = va2.rows(), k = va2.cols(), n = vb2.cols();
            if (t.needs(a)) {  // da[i,p] += sum_j g[i,j] * b[p,j]
                double* da = t.slots_[a].grad.raw();
                const double* pg = g.raw();
                const double* pb = vb2.raw();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* grow = pg + i * n;
                        const double* brow = pb + p * n;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        da[i * k + p] += s;
                    }
            }
            if (t.needs(b)) {  // db[p,j] += sum_i a[i,p] * g[i,j]
                double* db = t.slots_[b].grad.raw();
                const double* pg = g.raw();
                const double* pa = va2.raw();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa[i * k + p];
                        if (aip == 0.0) continue;
                        const double* grow = pg + i * n;
                        double* brow = db + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                    }
            }
        });
    }

    NodeId transpose(NodeId a) {
        const Tensor& va = slots_[a].value;
        const std::size_t m = va.rows(), n = va.cols();
        Tensor out = Tensor::zeros(n, m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = va.data()[i * n + j];
        return push(std::move(out), needs(a), [a](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const Tensor& g = t.slots_[self].grad;
            Tensor& ga = t.slots_[a].grad;
            const std::size_t m = ga.rows(), n = ga.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga.data()[i * n + j] += g.data()[j * m + i];
        });
    }

    // ---- structure ----

    NodeId gather_rows(NodeId table, std::vector<std::size_t> indices) {
        const Tensor& vt = slots_[table].value;
        const std::size_t n = vt.cols();
        Tensor out = Tensor::zeros(indices.size(), n);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            if (indices[r] >= vt.rows())
                throw StructuralError("gather_rows: index " + std::to_string(indices[r]) +
                                      " out of range for " + vt.shape_str());
            for (std::size_t c = 0; c < n; ++c)
                out.data()[r * n + c] = vt.data()[indices[r] * n + c];
        }
        return push(std::move(out), needs(table),
                    [table, idx = std::move(indices)](Tape& t, NodeId self) {
                        if (!t.needs(table)) return;
                        const Tensor& g = t.slots_[self].grad;
                        Tensor& gt = t.slots_[table].grad;
                        const std::size_t n = gt.cols();
                        for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t c = 0; c < n; ++c)
                                gt.data()[idx[r] * n + c] += g.data()[r * n + c];
                    });
    }

    NodeId concat_cols(NodeId a, NodeId b) {
        const Tensor& va = slots_[a].value;
        const Tensor& vb = slots_[b].value;
        if (va.rows() != vb.rows())
            throw StructuralError("concat_cols: row counts differ, " + va.shape_str() + " vs " +
                                  vb.shape_str());
        const std::size_t m = va.rows(), p = va.cols(), q = vb.cols();
        Tensor out = Tensor::zeros(m, p + q);
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < p; ++c) out.data()[r * (p + q) + c] = va.data()[r * p + c];
            for (std::size_t c = 0; c < q; ++c)
                out.data()[r * (p + q) + p + c] = vb.data()[r * q + c];
        }
        return push(std::move(out), needs(a) || needs(b), [a, b, p, q](Tape& t, NodeId self) {
            const Tensor& g = t.slots_[self].grad;
            const std::size_t m = g.rows();
            if (t.needs(a)) {
                Tensor& ga = t.slots_[a].grad;
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < p; ++c)
                        ga.data()[r * p + c] += g.data()[r * (p + q) + c];
            }
            if (t.needs(b)) {
                Tensor& gb = t.slots_[b].grad;
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < q; ++c)
                        gb.data()[r * q + c] += g.data()[r * (p + q) + p + c];
            }
        });
    }

    NodeId mean_rows(NodeId a) {
        const Tensor& va = slots_[a].value;
        const std::size_t m = va.rows(), n = va.cols();
        Tensor out = Tensor::zeros(1, n);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) out.data()[c] += va.data()[r * n + c] / double(m);
        return push(std::move(out), needs(a), [a, m, n](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const Tensor& g = t.slots_[self].grad;
            Tensor& ga = t.slots_[a].grad;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) ga.data()[r * n + c] += g.data()[c] / double(m);
        });
    }

    NodeId sum_all(NodeId a) {
        const Tensor& va = slots_[a].value;
        double s = 0.0;
        for (double v : va.data()) s += v;
        return push(Tensor::scalar(s), needs(a), [a](Tape& t, NodeId self) {
            const double g = t.slots_[self].grad.data()[0];
            t.accumulate(a, [&](std::size_t) { return g; });
        });
    }

    NodeId mean_all(NodeId a) { return scale(sum_all(a), 1.0 / double(slots_[a].value.numel())); }

    // ---- softmax family (all log-sum-exp stabilized) ----

    NodeId row_softmax(NodeId a) {
        const Tensor& va = slots_[a].value;
        const std::size_t m = va.rows(), n = va.cols();
        Tensor out = Tensor::zeros(m, n);
        for (std::size_t r = 0; r < m; ++r) {
            auto p = softmax(std::span<const double>(va.raw() + r * n, n));
            for (std::size_t c = 0; c < n; ++c) out.data()[r * n + c] = p[c];
        }
        return push(std::move(out), needs(a), [a](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const Tensor& g = t.slots_[self].grad;
            const Tensor& s = t.slots_[self].value;
            Tensor& ga = t.slots_[a].grad;
            const std::size_t m = s.rows(), n = s.cols();
            for (std::size_t r = 0; r < m; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < n; ++c)
                    dot += g.data()[r * n + c] * s.data()[r * n + c];
                for (std::size_t c = 0; c < n; ++c)
                    ga.data()[r * n + c] += s.data()[r * n + c] * (g.data()[r * n + c] - dot);
            }
        });
    }

    // Per-row cross-entropy against integer targets: out (m,1).
    NodeId ce_rows(NodeId logits, std::vector<std::size_t> targets) {
        const Tensor& vl = slots_[logits].value;
        const std::size_t m = vl.rows(), n = vl.cols();
        if (targets.size() != m)
            throw StructuralError("ce_rows: " + std::to_string(targets.size()) +
                                  " targets for " + std::to_string(m) + " rows");
        vl.require_finite("ce_rows logits");
        Tensor out = Tensor::zeros(m, 1);
        for (std::size_t r = 0; r < m; ++r)
            out.data()[r] =
                softmax_cross_entropy(std::span<const double>(vl.raw() + r * n, n), targets[r]);
        return push(std::move(out), needs(logits),
                    [logits, tg = std::move(targets)](Tape& t, NodeId self) {
                        if (!t.needs(logits)) return;
                        const Tensor& g = t.slots_[self].grad;
                        const Tensor& vl2 = t.slots_[logits].value;
                        Tensor& gl = t.slots_[logits].grad;
                        const std::size_t m = vl2.rows(), n = vl2.cols();
                        for (std::size_t r = 0; r < m; ++r) {
                            auto p = softmax(std::span<const double>(vl2.raw() + r * n, n));
                            const double gr = g.data()[r];
                            for (std::size_t c = 0; c < n; ++c)
                                gl.data()[r * n + c] += gr * (p[c] - (c == tg[r] ? 1.0 : 0.0));
                        }
                    });
    }

    // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse creation order.
    void backward(NodeId root) {
        Slot& rs = slots_[root];
        if (rs.value.numel() != 1) throw StructuralError("backward: root must be a scalar");
        if (!rs.requires_grad) throw StateError("backward: root does not require grad");
        rs.value.require_finite("backward root value");
        for (Slot& s : slots_)
            if (s.requires_grad)
                s.grad = Tensor(s.value.shape(), std::vector<double>(s.value.numel(), 0.0));
        rs.grad.data()[0] = 1.0;
        for (std::size_t i = root + 1; i-- > 0;) {
            Slot& s = slots_[i];
            if (s.requires_grad && s.back) s.back(*this, i);
        }
    }

private:
    struct Slot {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&, NodeId)> back;
        bool requires_grad = false;
    };

    bool needs(NodeId id) const { return slots_[id].requires_grad; }

    template <typename F>
    void accumulate(NodeId id, F&& contribution) {
        if (!needs(id)) return;
        Tensor& g = slots_[id].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g.data()[i] += contribution(i);
    }

    void check_same_shape(NodeId a, NodeId b, const char* op) const {
        if (!slots_[a].value.same_shape(slots_[b].value))
            throw StructuralError(std::string(op) + ": shape mismatch, " +
                                  slots_[a].value.shape_str() + " vs " +
                                  slots_[b].value.shape_str());
    }

    NodeId push(Tensor v, bool requires_grad, std::function<void(Tape&, NodeId)> back) {
        slots_.push_back(Slot{std::move(v), Tensor{}, std::move(back), requires_grad});
        return slots_.size() - 1;
    }

    std::vector<Slot> slots_;
};

}  // namespace popdefer
