#pragma once

// Reverse-mode autodiff over TensorT. A TapeT owns the nodes of one forward
// pass; ops append nodes in topological order, so backward() is a single
// reverse sweep. Nodes whose inputs are all constants carry no gradient
// state, which keeps frozen subgraphs (fixed feature extractors, frozen
// backbones applied to plain data) free of gradient work.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "flowsr/tensor.hpp"

namespace flowsr {

template <typename T>
class TapeT;

template <typename T>
struct VarT {
    TapeT<T>* tape = nullptr;
    int id = -1;
    const TensorT<T>& value() const;
    const TensorT<T>& grad() const;
};

template <typename T>
class TapeT {
public:
    using Var = VarT<T>;
    using BackFn = std::function<void(TapeT&)>;

    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        BackFn backward;
    };

    Var constant(TensorT<T> v) { return push(std::move(v), false); }
    Var leaf(TensorT<T> v) { return push(std::move(v), true); }

    Var push(TensorT<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        if (requires_grad) n.grad = TensorT<T>(n.value.shape);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_backward(Var v, BackFn fn) {
        if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(fn);
    }

    const TensorT<T>& value(int id) const { return nodes_[id].value; }
    TensorT<T>& grad(int id) {
        if (!nodes_[id].requires_grad)
            throw std::logic_error("tape: gradient requested for a constant node");
        return nodes_[id].grad;
    }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Root must be
    // a scalar node.
    void backward(int root_id) {
        if (nodes_[root_id].value.numel() != 1)
            throw std::invalid_argument("tape::backward: root must be a scalar");
        if (!nodes_[root_id].requires_grad) return;
        nodes_[root_id].grad.data[0] = T(1);
        for (int i = root_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward) n.backward(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

template <typename T>
const TensorT<T>& VarT<T>::value() const { return tape->value(id); }
template <typename T>
const TensorT<T>& VarT<T>::grad() const { return const_cast<TapeT<T>*>(tape)->grad(id); }

namespace tapedetail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

// Either both shapes match or one operand is a scalar (numel 1).
template <typename T>
void check_binary(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.numel() == 1 || b.numel() == 1) return;
    require_same_shape(a, b, op);
}

// Accumulate output-shaped gradient g into an operand gradient (which may be
// scalar-shaped when the operand was broadcast).
template <typename T>
void add_reduced(TensorT<T>& dst, const TensorT<T>& g, T sign) {
    if (dst.numel() == g.numel()) {
        for (std::size_t i = 0; i < g.numel(); ++i) dst.data[i] += sign * g.data[i];
    } else {
        T s = 0;
        for (std::size_t i = 0; i < g.numel(); ++i) s += g.data[i];
        dst.data[0] += sign * s;
    }
}

}  // namespace tapedetail

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    tapedetail::check_binary(va, vb, "add");
    const bool sa = va.numel() == 1 && vb.numel() > 1;
    TensorT<T> out(sa ? vb.shape : va.shape);
    const bool bs = vb.numel() == 1;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = va.data[sa ? 0 : i] + vb.data[bs ? 0 : i];
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(std::move(out), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        if (t.requires_grad(aid)) tapedetail::add_reduced(t.grad(aid), g, T(1));
        if (t.requires_grad(bid)) tapedetail::add_reduced(t.grad(bid), g, T(1));
    });
    return o;
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    tapedetail::check_binary(va, vb, "sub");
    const bool sa = va.numel() == 1 && vb.numel() > 1;
    TensorT<T> out(sa ? vb.shape : va.shape);
    const bool bs = vb.numel() == 1;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = va.data[sa ? 0 : i] - vb.data[bs ? 0 : i];
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(std::move(out), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        if (t.requires_grad(aid)) tapedetail::add_reduced(t.grad(aid), g, T(1));
        if (t.requires_grad(bid)) tapedetail::add_reduced(t.grad(bid), g, T(-1));
    });
    return o;
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    tapedetail::check_binary(va, vb, "mul");
    const bool as = va.numel() == 1 && vb.numel() > 1;
    const bool bs = vb.numel() == 1 && va.numel() > 1;
    TensorT<T> out(as ? vb.shape : va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = va.data[as ? 0 : i] * vb.data[bs ? 0 : i];
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(std::move(out), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto &xa = t.value(aid), &xb = t.value(bid);
        const bool as2 = xa.numel() == 1 && xb.numel() > 1;
        const bool bs2 = xb.numel() == 1 && xa.numel() > 1;
        if (t.requires_grad(aid)) {
            auto& ga = t.grad(aid);
            if (as2) {
                T s = 0;
                for (std::size_t i = 0; i < g.numel(); ++i) s += g.data[i] * xb.data[i];
                ga.data[0] += s;
            } else {
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga.data[i] += g.data[i] * xb.data[bs2 ? 0 : i];
            }
        }
        if (t.requires_grad(bid)) {
            auto& gb = t.grad(bid);
            if (bs2) {
                T s = 0;
                for (std::size_t i = 0; i < g.numel(); ++i) s += g.data[i] * xa.data[i];
                gb.data[0] += s;
            } else {
                for (std::size_t i = 0; i < g.numel(); ++i)
                    gb.data[i] += g.data[i] * xa.data[as2 ? 0 : i];
            }
        }
    });
    return o;
}

template <typename T>
VarT<T> scale(VarT<T> a, double c) {
    TapeT<T>& tp = *a.tape;
    TensorT<T> out = tp.value(a.id);
    for (auto& v : out.data) v = static_cast<T>(v * c);
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, c](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += static_cast<T>(c) * g.data[i];
    });
    return o;
}

template <typename T>
VarT<T> add_const(VarT<T> a, double c) {
    TapeT<T>& tp = *a.tape;
    TensorT<T> out = tp.value(a.id);
    for (auto& v : out.data) v = static_cast<T>(v + c);
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    });
    return o;
}

template <typename T>
VarT<T> neg(VarT<T> a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// unary elementwise
// ---------------------------------------------------------------------------

namespace tapedetail {

// fwd(x) -> y; dfwd(x, y) -> dy/dx
template <typename T, typename F, typename DF>
VarT<T> unary_op(VarT<T> a, F fwd, DF dfwd) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    TensorT<T> out(va.shape);
    for (std::size_t i = 0; i < va.numel(); ++i) out.data[i] = fwd(va.data[i]);
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, dfwd](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto& x = t.value(aid);
        const auto& y = t.value(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] += g.data[i] * dfwd(x.data[i], y.data[i]);
    });
    return o;
}

}  // namespace tapedetail

template <typename T>
VarT<T> abs_op(VarT<T> a) {
    return tapedetail::unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
VarT<T> square(VarT<T> a) {
    return tapedetail::unary_op(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
VarT<T> exp_op(VarT<T> a) {
    return tapedetail::unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// log(max(x, floor)); zero gradient below the floor.
template <typename T>
VarT<T> log_clamped(VarT<T> a, double floor) {
    T f = static_cast<T>(floor);
    return tapedetail::unary_op(
        a, [f](T x) { return std::log(x < f ? f : x); },
        [f](T x, T) { return x < f ? T(0) : T(1) / x; });
}

template <typename T>
VarT<T> sigmoid(VarT<T> a) {
    return tapedetail::unary_op(
        a,
        [](T x) {
            if (x >= 0) {
                T e = std::exp(-x);
                return T(1) / (T(1) + e);
            }
            T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
VarT<T> tanh_op(VarT<T> a) {
    return tapedetail::unary_op(
        a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
VarT<T> silu(VarT<T> a) {
    return tapedetail::unary_op(
        a,
        [](T x) {
            T s;
            if (x >= 0) {
                s = T(1) / (T(1) + std::exp(-x));
            } else {
                T e = std::exp(x);
                s = e / (T(1) + e);
            }
            return x * s;
        },
        [](T x, T) {
            T s;
            if (x >= 0) {
                s = T(1) / (T(1) + std::exp(-x));
            } else {
                T e = std::exp(x);
                s = e / (T(1) + e);
            }
            return s * (T(1) + x * (T(1) - s));
        });
}

// ---------------------------------------------------------------------------
// binary elementwise used by spectra: modulus and argument of (re, im)
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> hypot_op(VarT<T> re, VarT<T> im) {
    TapeT<T>& tp = *re.tape;
    const auto &vr = tp.value(re.id), &vi = tp.value(im.id);
    require_same_shape(vr, vi, "hypot_op");
    TensorT<T> out(vr.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = std::hypot(vr.data[i], vi.data[i]);
    bool rg = tp.requires_grad(re.id) || tp.requires_grad(im.id);
    auto o = tp.push(std::move(out), rg);
    int rid = re.id, iid = im.id, oid = o.id;
    tp.set_backward(o, [rid, iid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto &r = t.value(rid), &im2 = t.value(iid), &h = t.value(oid);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            T d = h.data[i];
            if (d <= T(0)) continue;  // non-differentiable at the origin
            if (t.requires_grad(rid)) t.grad(rid).data[i] += g.data[i] * r.data[i] / d;
            if (t.requires_grad(iid)) t.grad(iid).data[i] += g.data[i] * im2.data[i] / d;
        }
    });
    return o;
}

// atan2(im, re); gradient zeroed where the modulus vanishes.
template <typename T>
VarT<T> atan2_op(VarT<T> im, VarT<T> re) {
    TapeT<T>& tp = *im.tape;
    const auto &vi = tp.value(im.id), &vr = tp.value(re.id);
    require_same_shape(vi, vr, "atan2_op");
    TensorT<T> out(vi.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = std::atan2(vi.data[i], vr.data[i]);
    bool rg = tp.requires_grad(im.id) || tp.requires_grad(re.id);
    auto o = tp.push(std::move(out), rg);
    int iid = im.id, rid = re.id, oid = o.id;
    tp.set_backward(o, [iid, rid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto &y = t.value(iid), &x = t.value(rid);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            T d = x.data[i] * x.data[i] + y.data[i] * y.data[i];
            if (d <= T(0)) continue;
            if (t.requires_grad(iid)) t.grad(iid).data[i] += g.data[i] * x.data[i] / d;
            if (t.requires_grad(rid)) t.grad(rid).data[i] -= g.data[i] * y.data[i] / d;
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> sum_all(VarT<T> a) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    T s = 0;
    for (const T& v : va.data) s += v;
    auto o = tp.push(TensorT<T>::scalar(s), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid](TapeT<T>& t) {
        T g = t.grad(oid).data[0];
        auto& ga = t.grad(aid);
        for (auto& v : ga.data) v += g;
    });
    return o;
}

template <typename T>
VarT<T> mean_all(VarT<T> a) {
    std::size_t n = a.tape->value(a.id).numel();
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

template <typename T>
VarT<T> mean_abs_diff(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    require_same_shape(va, vb, "mean_abs_diff");
    const std::size_t n = va.numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(va.data[i] - vb.data[i]);
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(TensorT<T>::scalar(s / static_cast<T>(n)), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid, n](TapeT<T>& t) {
        T g = t.grad(oid).data[0] / static_cast<T>(n);
        const auto &x = t.value(aid), &y = t.value(bid);
        for (std::size_t i = 0; i < n; ++i) {
            T d = x.data[i] - y.data[i];
            T s2 = d > 0 ? g : (d < 0 ? -g : T(0));
            if (t.requires_grad(aid)) t.grad(aid).data[i] += s2;
            if (t.requires_grad(bid)) t.grad(bid).data[i] -= s2;
        }
    });
    return o;
}

template <typename T>
VarT<T> mean_sq_diff(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    require_same_shape(va, vb, "mean_sq_diff");
    const std::size_t n = va.numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        T d = va.data[i] - vb.data[i];
        s += d * d;
    }
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(TensorT<T>::scalar(s / static_cast<T>(n)), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid, n](TapeT<T>& t) {
        T g = T(2) * t.grad(oid).data[0] / static_cast<T>(n);
        const auto &x = t.value(aid), &y = t.value(bid);
        for (std::size_t i = 0; i < n; ++i) {
            T d = g * (x.data[i] - y.data[i]);
            if (t.requires_grad(aid)) t.grad(aid).data[i] += d;
            if (t.requires_grad(bid)) t.grad(bid).data[i] -= d;
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> reshape(VarT<T> a, std::vector<int> shape) {
    TapeT<T>& tp = *a.tape;
    TensorT<T> out = tp.value(a.id).reshaped(std::move(shape));
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    });
    return o;
}

template <typename T>
VarT<T> transpose2d(VarT<T> a) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    if (va.ndim() != 2) throw std::invalid_argument("transpose2d: expects a matrix");
    const int m = va.dim(0), n = va.dim(1);
    TensorT<T> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, m, n](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    });
    return o;
}

template <typename T>
VarT<T> slice_rows(VarT<T> a, int r0, int r1) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    if (va.ndim() != 2 || r0 < 0 || r1 > va.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    const int n = va.dim(1);
    TensorT<T> out({r1 - r0, n});
    std::copy(va.data.begin() + static_cast<std::size_t>(r0) * n,
              va.data.begin() + static_cast<std::size_t>(r1) * n, out.data.begin());
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, r0, n](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        std::size_t off = static_cast<std::size_t>(r0) * n;
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[off + i] += g.data[i];
    });
    return o;
}

template <typename T>
VarT<T> concat_rows(std::vector<VarT<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    TapeT<T>& tp = *parts[0].tape;
    const int n = tp.value(parts[0].id).dim(1);
    int rows = 0;
    bool rg = false;
    for (const auto& p : parts) {
        const auto& v = tp.value(p.id);
        if (v.ndim() != 2 || v.dim(1) != n)
            throw std::invalid_argument("concat_rows: column mismatch");
        rows += v.dim(0);
        rg = rg || tp.requires_grad(p.id);
    }
    TensorT<T> out({rows, n});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<int> sizes;
    for (const auto& p : parts) {
        const auto& v = tp.value(p.id);
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
        off += v.numel();
        ids.push_back(p.id);
        sizes.push_back(static_cast<int>(v.numel()));
    }
    auto o = tp.push(std::move(out), rg);
    int oid = o.id;
    tp.set_backward(o, [ids, sizes, oid](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        std::size_t off2 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                auto& gp = t.grad(ids[k]);
                for (int i = 0; i < sizes[k]; ++i) gp.data[i] += g.data[off2 + i];
            }
            off2 += static_cast<std::size_t>(sizes[k]);
        }
    });
    return o;
}

template <typename T>
VarT<T> concat_rows(std::initializer_list<VarT<T>> parts) {
    return concat_rows(std::vector<VarT<T>>(parts));
}

template <typename T>
VarT<T> slice_cols(VarT<T> a, int c0, int c1) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    if (va.ndim() != 2 || c0 < 0 || c1 > va.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const int m = va.dim(0), n = va.dim(1), w = c1 - c0;
    TensorT<T> out({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = va.at(i, c0 + j);
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, c0, m, n, w](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        (void)n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) ga.at(i, c0 + j) += g.at(i, j);
    });
    return o;
}

template <typename T>
VarT<T> concat_cols(std::vector<VarT<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    TapeT<T>& tp = *parts[0].tape;
    const int m = tp.value(parts[0].id).dim(0);
    int cols = 0;
    bool rg = false;
    for (const auto& p : parts) {
        const auto& v = tp.value(p.id);
        if (v.ndim() != 2 || v.dim(0) != m)
            throw std::invalid_argument("concat_cols: row mismatch");
        cols += v.dim(1);
        rg = rg || tp.requires_grad(p.id);
    }
    TensorT<T> out({m, cols});
    std::vector<int> ids, widths;
    int coff = 0;
    for (const auto& p : parts) {
        const auto& v = tp.value(p.id);
        const int w = v.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out.at(i, coff + j) = v.at(i, j);
        coff += w;
        ids.push_back(p.id);
        widths.push_back(w);
    }
    auto o = tp.push(std::move(out), rg);
    int oid = o.id;
    tp.set_backward(o, [ids, widths, oid, m](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        int c0 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                auto& gp = t.grad(ids[k]);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < widths[k]; ++j) gp.at(i, j) += g.at(i, c0 + j);
            }
            c0 += widths[k];
        }
    });
    return o;
}

template <typename T>
VarT<T> concat_cols(std::initializer_list<VarT<T>> parts) {
    return concat_cols(std::vector<VarT<T>>(parts));
}

// x: [L, d], r: [d] (or [1, d]); adds r to every row of x.
template <typename T>
VarT<T> add_row_broadcast(VarT<T> x, VarT<T> r) {
    TapeT<T>& tp = *x.tape;
    const auto &vx = tp.value(x.id), &vr = tp.value(r.id);
    if (vx.ndim() != 2 || static_cast<int>(vr.numel()) != vx.dim(1))
        throw std::invalid_argument("add_row_broadcast: shape mismatch");
    const int m = vx.dim(0), n = vx.dim(1);
    TensorT<T> out(vx.shape);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = vx.at(i, j) + vr.data[j];
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(r.id);
    auto o = tp.push(std::move(out), rg);
    int xid = x.id, rid = r.id, oid = o.id;
    tp.set_backward(o, [xid, rid, oid, m, n](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        if (t.requires_grad(xid)) {
            auto& gx = t.grad(xid);
            for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
        }
        if (t.requires_grad(rid)) {
            auto& gr = t.grad(rid);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gr.data[j] += g.at(i, j);
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// matmul (Eigen-backed)
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
    TapeT<T>& tp = *a.tape;
    const auto &va = tp.value(a.id), &vb = tp.value(b.id);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + va.shape_str() + " * " +
                                    vb.shape_str());
    const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    TensorT<T> out({m, n});
    {
        tapedetail::MapCM<T> A(va.data.data(), m, k), B(vb.data.data(), k, n);
        tapedetail::MapM<T> C(out.data.data(), m, n);
        C.noalias() = A * B;
    }
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    auto o = tp.push(std::move(out), rg);
    int aid = a.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [aid, bid, oid, m, k, n](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        tapedetail::MapCM<T> G(g.data.data(), m, n);
        if (t.requires_grad(aid)) {
            tapedetail::MapCM<T> B(t.value(bid).data.data(), k, n);
            tapedetail::MapM<T> GA(t.grad(aid).data.data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (t.requires_grad(bid)) {
            tapedetail::MapCM<T> A(t.value(aid).data.data(), m, k);
            tapedetail::MapM<T> GB(t.grad(bid).data.data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> softmax_rows(VarT<T> a) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    if (va.ndim() != 2) throw std::invalid_argument("softmax_rows: expects a matrix");
    const int m = va.dim(0), n = va.dim(1);
    TensorT<T> out(va.shape);
    for (int i = 0; i < m; ++i) {
        T mx = va.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, va.at(i, j));
        T s = 0;
        for (int j = 0; j < n; ++j) {
            T e = std::exp(va.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= s;
    }
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, m, n](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto& y = t.value(oid);
        auto& ga = t.grad(aid);
        for (int i = 0; i < m; ++i) {
            T dot = 0;
            for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
    return o;
}

// Per-row layer norm with affine parameters gain[d], bias[d].
template <typename T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gain, VarT<T> bias, double eps = 1e-5) {
    TapeT<T>& tp = *x.tape;
    const auto& vx = tp.value(x.id);
    if (vx.ndim() != 2) throw std::invalid_argument("layer_norm: expects a matrix");
    const int m = vx.dim(0), n = vx.dim(1);
    const auto &vg = tp.value(gain.id), &vb = tp.value(bias.id);
    if (static_cast<int>(vg.numel()) != n || static_cast<int>(vb.numel()) != n)
        throw std::invalid_argument("layer_norm: affine parameter size mismatch");
    TensorT<T> out(vx.shape);
    auto xhat = std::make_shared<TensorT<T>>(vx.shape);
    auto inv_std = std::make_shared<std::vector<T>>(m);
    for (int i = 0; i < m; ++i) {
        T mu = 0;
        for (int j = 0; j < n; ++j) mu += vx.at(i, j);
        mu /= static_cast<T>(n);
        T var = 0;
        for (int j = 0; j < n; ++j) {
            T d = vx.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*inv_std)[i] = is;
        for (int j = 0; j < n; ++j) {
            T h = (vx.at(i, j) - mu) * is;
            xhat->at(i, j) = h;
            out.at(i, j) = h * vg.data[j] + vb.data[j];
        }
    }
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(gain.id) || tp.requires_grad(bias.id);
    auto o = tp.push(std::move(out), rg);
    int xid = x.id, gid = gain.id, bid = bias.id, oid = o.id;
    tp.set_backward(o, [xid, gid, bid, oid, m, n, xhat, inv_std](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        const auto& vg2 = t.value(gid);
        if (t.requires_grad(gid)) {
            auto& gg = t.grad(gid);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gg.data[j] += g.at(i, j) * xhat->at(i, j);
        }
        if (t.requires_grad(bid)) {
            auto& gb = t.grad(bid);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb.data[j] += g.at(i, j);
        }
        if (t.requires_grad(xid)) {
            auto& gx = t.grad(xid);
            for (int i = 0; i < m; ++i) {
                T sum_gh = 0, sum_ghx = 0;
                for (int j = 0; j < n; ++j) {
                    T gh = g.at(i, j) * vg2.data[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat->at(i, j);
                }
                T is = (*inv_std)[i];
                for (int j = 0; j < n; ++j) {
                    T gh = g.at(i, j) * vg2.data[j];
                    gx.at(i, j) += is * (gh - (sum_gh + xhat->at(i, j) * sum_ghx) /
                                                  static_cast<T>(n));
                }
            }
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// convolution (HWC layout, zero padding, im2col + GEMM)
// ---------------------------------------------------------------------------

// x: [H, W, Cin], w: [Kh, Kw, Cin, Cout], b: [Cout]
template <typename T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> b, int stride, int pad) {
    TapeT<T>& tp = *x.tape;
    const auto &vx = tp.value(x.id), &vw = tp.value(w.id), &vb = tp.value(b.id);
    if (vx.ndim() != 3 || vw.ndim() != 4)
        throw std::invalid_argument("conv2d: expects HWC input and KhKwCinCout weight");
    const int H = vx.dim(0), W = vx.dim(1), Ci = vx.dim(2);
    const int Kh = vw.dim(0), Kw = vw.dim(1), Co = vw.dim(3);
    if (vw.dim(2) != Ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (static_cast<int>(vb.numel()) != Co)
        throw std::invalid_argument("conv2d: bias size mismatch");
    const int Ho = (H + 2 * pad - Kh) / stride + 1;
    const int Wo = (W + 2 * pad - Kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");

    const int patch = Kh * Kw * Ci;
    auto col = std::make_shared<TensorT<T>>(std::vector<int>{Ho * Wo, patch});
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            T* row = &col->at(oy * Wo + ox, 0);
            int idx = 0;
            for (int ky = 0; ky < Kh; ++ky) {
                const int iy = oy * stride + ky - pad;
                for (int kx = 0; kx < Kw; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                        for (int c = 0; c < Ci; ++c) row[idx++] = T(0);
                    } else {
                        const T* src = &vx.at(iy, ix, 0);
                        for (int c = 0; c < Ci; ++c) row[idx++] = src[c];
                    }
                }
            }
        }
    }
    TensorT<T> out({Ho, Wo, Co});
    {
        tapedetail::MapCM<T> C(col->data.data(), Ho * Wo, patch);
        tapedetail::MapCM<T> Wm(vw.data.data(), patch, Co);
        tapedetail::MapM<T> O(out.data.data(), Ho * Wo, Co);
        O.noalias() = C * Wm;
        for (int i = 0; i < Ho * Wo; ++i)
            for (int c = 0; c < Co; ++c) out.data[static_cast<std::size_t>(i) * Co + c] +=
                vb.data[c];
    }
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(w.id) || tp.requires_grad(b.id);
    auto o = tp.push(std::move(out), rg);
    int xid = x.id, wid = w.id, bid = b.id, oid = o.id;
    tp.set_backward(o, [xid, wid, bid, oid, col, H, W, Ci, Kh, Kw, Co, Ho, Wo, stride,
                        pad, patch](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        tapedetail::MapCM<T> G(g.data.data(), Ho * Wo, Co);
        if (t.requires_grad(bid)) {
            auto& gb = t.grad(bid);
            for (int i = 0; i < Ho * Wo; ++i)
                for (int c = 0; c < Co; ++c) gb.data[c] += g.data[static_cast<std::size_t>(i) * Co + c];
        }
        if (t.requires_grad(wid)) {
            tapedetail::MapCM<T> C(col->data.data(), Ho * Wo, patch);
            tapedetail::MapM<T> GW(t.grad(wid).data.data(), patch, Co);
            GW.noalias() += C.transpose() * G;
        }
        if (t.requires_grad(xid)) {
            TensorT<T> dcol({Ho * Wo, patch});
            {
                tapedetail::MapCM<T> Wm(t.value(wid).data.data(), patch, Co);
                tapedetail::MapM<T> DC(dcol.data.data(), Ho * Wo, patch);
                DC.noalias() = G * Wm.transpose();
            }
            auto& gx = t.grad(xid);
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    const T* row = &dcol.at(oy * Wo + ox, 0);
                    int idx = 0;
                    for (int ky = 0; ky < Kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        for (int kx = 0; kx < Kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                                idx += Ci;
                            } else {
                                T* dst = &gx.at(iy, ix, 0);
                                for (int c = 0; c < Ci; ++c) dst[c] += row[idx++];
                            }
                        }
                    }
                }
            }
        }
    });
    return o;
}

// Mean over spatial positions of an HWC map -> [1, C].
template <typename T>
VarT<T> global_mean_pool(VarT<T> x) {
    TapeT<T>& tp = *x.tape;
    const auto& vx = tp.value(x.id);
    if (vx.ndim() != 3) throw std::invalid_argument("global_mean_pool: expects HWC");
    const int H = vx.dim(0), W = vx.dim(1), C = vx.dim(2);
    TensorT<T> out({1, C});
    for (int i = 0; i < H * W; ++i)
        for (int c = 0; c < C; ++c) out.data[c] += vx.data[static_cast<std::size_t>(i) * C + c];
    for (int c = 0; c < C; ++c) out.data[c] /= static_cast<T>(H * W);
    auto o = tp.push(std::move(out), tp.requires_grad(x.id));
    int xid = x.id, oid = o.id;
    tp.set_backward(o, [xid, oid, H, W, C](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        const T inv = T(1) / static_cast<T>(H * W);
        for (int i = 0; i < H * W; ++i)
            for (int c = 0; c < C; ++c)
                gx.data[static_cast<std::size_t>(i) * C + c] += g.data[c] * inv;
    });
    return o;
}

// ---------------------------------------------------------------------------
// permutation ops shared by the latent codec, patchify, and their inverses.
// All are pure index shuffles, so backward applies the inverse permutation.
// ---------------------------------------------------------------------------

namespace tapedetail {

// maps output flat index -> input flat index
template <typename T>
VarT<T> permute_op(VarT<T> a, std::vector<int> out_shape,
                   std::shared_ptr<std::vector<std::size_t>> src_of, const char* name) {
    TapeT<T>& tp = *a.tape;
    const auto& va = tp.value(a.id);
    TensorT<T> out(std::move(out_shape));
    if (out.numel() != va.numel()) throw std::invalid_argument(std::string(name) + ": size mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = va.data[(*src_of)[i]];
    auto o = tp.push(std::move(out), tp.requires_grad(a.id));
    int aid = a.id, oid = o.id;
    tp.set_backward(o, [aid, oid, src_of](TapeT<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[(*src_of)[i]] += g.data[i];
    });
    return o;
}

}  // namespace tapedetail

// [H, W, C] -> [H/f, W/f, C*f*f]; output channel = (dy*f + dx)*C + c.
inline std::shared_ptr<std::vector<std::size_t>> space_to_depth_indices(int H, int W, int C,
                                                                        int f) {
    auto idx = std::make_shared<std::vector<std::size_t>>(
        static_cast<std::size_t>(H) * W * C);
    const int h = H / f, w = W / f;
    std::size_t o = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    for (int c = 0; c < C; ++c)
                        (*idx)[o++] = (static_cast<std::size_t>(y * f + dy) * W +
                                       (x * f + dx)) * C + c;
    return idx;
}

template <typename T>
VarT<T> space_to_depth(VarT<T> a, int f) {
    const auto& v = a.tape->value(a.id);
    if (v.ndim() != 3) throw std::invalid_argument("space_to_depth: expects HWC");
    const int H = v.dim(0), W = v.dim(1), C = v.dim(2);
    if (H % f != 0 || W % f != 0)
        throw std::invalid_argument("space_to_depth: dims " + v.shape_str() +
                                    " not divisible by f=" + std::to_string(f));
    return tapedetail::permute_op(a, {H / f, W / f, C * f * f},
                                  space_to_depth_indices(H, W, C, f), "space_to_depth");
}

template <typename T>
VarT<T> depth_to_space(VarT<T> a, int f) {
    const auto& v = a.tape->value(a.id);
    if (v.ndim() != 3) throw std::invalid_argument("depth_to_space: expects HWC");
    const int h = v.dim(0), w = v.dim(1), Cf = v.dim(2);
    if (Cf % (f * f) != 0)
        throw std::invalid_argument("depth_to_space: channels not divisible by f^2");
    const int C = Cf / (f * f), H = h * f, W = w * f;
    // output (y, x, c) <- input (y/f, x/f, (y%f*f + x%f)*C + c)
    auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(H) * W * C);
    std::size_t o = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                (*idx)[o++] = (static_cast<std::size_t>(y / f) * w + (x / f)) * Cf +
                              ((y % f) * f + (x % f)) * C + c;
    return tapedetail::permute_op(a, {H, W, C}, idx, "depth_to_space");
}

// [h, w, c] -> [(h/p)*(w/p), p*p*c]; within a token: (dy, dx) raster, then channel.
template <typename T>
VarT<T> patchify_op(VarT<T> a, int p) {
    const auto& v = a.tape->value(a.id);
    if (v.ndim() != 3) throw std::invalid_argument("patchify: expects HWC");
    const int h = v.dim(0), w = v.dim(1), c = v.dim(2);
    if (h % p != 0 || w % p != 0)
        throw std::invalid_argument("patchify: grid " + v.shape_str() +
                                    " not divisible by p=" + std::to_string(p));
    const int gh = h / p, gw = w / p;
    auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(h) * w * c);
    std::size_t o = 0;
    for (int ty = 0; ty < gh; ++ty)
        for (int tx = 0; tx < gw; ++tx)
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        (*idx)[o++] = (static_cast<std::size_t>(ty * p + dy) * w +
                                       (tx * p + dx)) * c + ch;
    return tapedetail::permute_op(a, {gh * gw, p * p * c}, idx, "patchify");
}

template <typename T>
VarT<T> unpatchify_op(VarT<T> a, int h, int w, int c, int p) {
    const auto& v = a.tape->value(a.id);
    const int gh = h / p, gw = w / p;
    if (v.ndim() != 2 || v.dim(0) != gh * gw || v.dim(1) != p * p * c)
        throw std::invalid_argument("unpatchify: token shape mismatch");
    auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(h) * w * c);
    std::size_t o = 0;
    const int tokw = p * p * c;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                const int ty = y / p, tx = x / p, dy = y % p, dx = x % p;
                (*idx)[o++] = static_cast<std::size_t>(ty * gw + tx) * tokw +
                              (dy * p + dx) * c + ch;
            }
    return tapedetail::permute_op(a, {h, w, c}, idx, "unpatchify");
}

}  // namespace flowsr
