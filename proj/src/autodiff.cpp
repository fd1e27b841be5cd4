#include "covft/autodiff.hpp"

#include "covft/error.hpp"
#include "covft/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace covft::ad {

const Tensor& Var::value() const { return graph->value(*this); }

int Graph::check(Var v) const {
    if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw ContractError("variable does not belong to this graph");
    return v.id;
}

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
    Node n;
    n.own = std::move(value);
    n.is_leaf = true;
    return push(std::move(n));
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.is_leaf = true;
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
}

Var Graph::param(const ParameterStore& store, ParamId id) {
    if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), -1);
    if (param_nodes_[id] >= 0) return Var{this, param_nodes_[id]};
    Node n;
    n.external = &store[id].value;
    n.is_leaf = true;
    n.param = id;
    n.requires_grad = store[id].trainable && grad_enabled_;
    Var v = push(std::move(n));
    param_nodes_[id] = v.id;
    return v;
}

const Tensor& Graph::value_of(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.own;
}

const Tensor& Graph::value(Var v) const { return value_of(check(v)); }

const Tensor* Graph::grad(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.grad.data.empty() ? nullptr : &n.grad;
}

Tensor& Graph::grad_acc(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(value_of(id).shape);
    return n.grad;
}

Var Graph::emit(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return emit(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::emit(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    for (const Var& in : inputs) n.requires_grad = n.requires_grad || nodes_[check(in)].requires_grad;
    n.requires_grad = n.requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

void Graph::backward(Var loss) {
    const int root = check(loss);
    if (value_of(root).numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(value_of(root).shape));
    if (!nodes_[root].requires_grad) return;
    for (auto& n : nodes_)
        if (!n.is_leaf) n.grad.data.clear();
    grad_acc(root).data[0] += 1.0;
    for (int id = root; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.is_leaf || n.grad.data.empty() || !n.backward) continue;
        n.backward(*this, id);
    }
}

void Graph::zero_grad() {
    for (auto& n : nodes_) n.grad.data.clear();
}

void Graph::collect_param_grads(GradBuffer& out) const {
    for (const Node& n : nodes_) {
        if (n.param == static_cast<ParamId>(-1) || n.grad.data.empty()) continue;
        auto& dst = out.at(n.param, n.grad.numel());
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad.data[i];
    }
}

// ---------------------------------------------------------------------------

namespace {

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double s = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace

Var detach(Var x) { return x.graph->constant(x.value()); }

Var matmul(Var a, Var b) {
    Graph& g = *a.graph;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_rank2(A, "matmul");
    require_rank2(B, "matmul");
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    if (B.shape[0] != k)
        throw DimensionError("matmul: inner dimensions disagree " + shape_str(A.shape) + " x " +
                             shape_str(B.shape));
    Tensor C({m, n});
    kernels::gemm_nn(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    const int ia = a.id, ib = b.id;
    return g.emit(std::move(C), {a, b}, [ia, ib, m, k, n](Graph& g, int self) {
        const Tensor& gc = g.grad_of(self);
        if (g.needs_grad(ia))
            kernels::gemm_nt(gc.data.data(), g.value_of(ib).data.data(), g.grad_acc(ia).data.data(), m, n, k);
        if (g.needs_grad(ib))
            kernels::gemm_tn(g.value_of(ia).data.data(), gc.data.data(), g.grad_acc(ib).data.data(), m, k, n);
    });
}

Var transpose(Var x) {
    const Tensor& X = x.value();
    require_rank2(X, "transpose");
    const std::size_t m = X.shape[0], n = X.shape[1];
    Tensor Y({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) Y.data[j * m + i] = X.data[i * n + j];
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, m, n](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx.data[i * n + j] += gy.data[j * m + i];
    });
}

Var reshape(Var x, Shape shape) {
    const Tensor& X = x.value();
    if (shape_numel(shape) != X.numel())
        throw DimensionError("reshape: " + shape_str(X.shape) + " to " + shape_str(shape));
    Tensor Y(std::move(shape), X.data);
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix](Graph& g, int self) {
        axpy(g.grad_acc(ix).data, g.grad_of(self).data);
    });
}

Var add(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same(A, B, "add");
    Tensor C = A;
    axpy(C.data, B.data);
    const int ia = a.id, ib = b.id;
    return a.graph->emit(std::move(C), {a, b}, [ia, ib](Graph& g, int self) {
        const Tensor& gc = g.grad_of(self);
        if (g.needs_grad(ia)) axpy(g.grad_acc(ia).data, gc.data);
        if (g.needs_grad(ib)) axpy(g.grad_acc(ib).data, gc.data);
    });
}

Var sub(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same(A, B, "sub");
    Tensor C = A;
    axpy(C.data, B.data, -1.0);
    const int ia = a.id, ib = b.id;
    return a.graph->emit(std::move(C), {a, b}, [ia, ib](Graph& g, int self) {
        const Tensor& gc = g.grad_of(self);
        if (g.needs_grad(ia)) axpy(g.grad_acc(ia).data, gc.data);
        if (g.needs_grad(ib)) axpy(g.grad_acc(ib).data, gc.data, -1.0);
    });
}

Var mul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same(A, B, "mul");
    Tensor C = A;
    for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] *= B.data[i];
    const int ia = a.id, ib = b.id;
    return a.graph->emit(std::move(C), {a, b}, [ia, ib](Graph& g, int self) {
        const Tensor& gc = g.grad_of(self);
        if (g.needs_grad(ia)) {
            const Tensor& Bv = g.value_of(ib);
            Tensor& ga = g.grad_acc(ia);
            for (std::size_t i = 0; i < gc.numel(); ++i) ga.data[i] += gc.data[i] * Bv.data[i];
        }
        if (g.needs_grad(ib)) {
            const Tensor& Av = g.value_of(ia);
            Tensor& gb = g.grad_acc(ib);
            for (std::size_t i = 0; i < gc.numel(); ++i) gb.data[i] += gc.data[i] * Av.data[i];
        }
    });
}

Var scale(Var x, double s) {
    Tensor Y = x.value();
    for (double& v : Y.data) v *= s;
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, s](Graph& g, int self) {
        axpy(g.grad_acc(ix).data, g.grad_of(self).data, s);
    });
}

Var add_bias(Var x, Var bias) {
    const Tensor& X = x.value();
    const Tensor& Bv = bias.value();
    const std::size_t n = X.cols();
    if (Bv.numel() != n)
        throw DimensionError("add_bias: bias " + shape_str(Bv.shape) + " vs input " + shape_str(X.shape));
    Tensor Y = X;
    const std::size_t m = X.numel() / std::max<std::size_t>(n, 1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] += Bv.data[j];
    const int ix = x.id, ib = bias.id;
    return x.graph->emit(std::move(Y), {x, bias}, [ix, ib, m, n](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        if (g.needs_grad(ix)) axpy(g.grad_acc(ix).data, gy.data);
        if (g.needs_grad(ib)) {
            Tensor& gb = g.grad_acc(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb.data[j] += gy.data[i * n + j];
        }
    });
}

Var gelu(Var x) {
    Tensor Y = x.value();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (double& v : Y.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix](Graph& g, int self) {
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const Tensor& X = g.value_of(ix);
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t i = 0; i < X.numel(); ++i) {
            const double v = X.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx.data[i] += gy.data[i] * (cdf + v * pdf);
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& X = x.value();
    const std::size_t n = X.cols();
    if (X.rank() == 0 || n == 0) throw DimensionError("layer_norm: zero-width last axis " + shape_str(X.shape));
    if (gamma.value().numel() != n || beta.value().numel() != n)
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.value().shape) + " for input " +
                             shape_str(X.shape));
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    const std::size_t m = X.numel() / n;
    const Tensor& G = gamma.value();
    const Tensor& Bt = beta.value();
    Tensor Y(X.shape);
    std::vector<double> xhat(X.numel());
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = X.data.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xi[j] - mean) * inv_std[i];
            xhat[i * n + j] = h;
            Y.data[i * n + j] = h * G.data[j] + Bt.data[j];
        }
    }
    const int ix = x.id, ig = gamma.id, ib = beta.id;
    return x.graph->emit(
        std::move(Y), {x, gamma, beta},
        [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
            const Tensor& gy = g.grad_of(self);
            const Tensor& Gm = g.value_of(ig);
            if (g.needs_grad(ig)) {
                Tensor& gg = g.grad_acc(ig);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg.data[j] += gy.data[i * n + j] * xhat[i * n + j];
            }
            if (g.needs_grad(ib)) {
                Tensor& gb = g.grad_acc(ib);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb.data[j] += gy.data[i * n + j];
            }
            if (g.needs_grad(ix)) {
                Tensor& gx = g.grad_acc(ix);
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = gy.data[i * n + j] * Gm.data[j];
                        mean_d += d;
                        mean_dh += d * xhat[i * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = gy.data[i * n + j] * Gm.data[j];
                        gx.data[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dh);
                    }
                }
            }
        });
}

Var softmax(Var x, std::size_t axis) {
    const Tensor& X = x.value();
    if (axis >= X.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " for " + shape_str(X.shape));
    const std::size_t len = X.shape[axis];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < X.rank(); ++d) inner *= X.shape[d];
    const std::size_t outer = len ? X.numel() / (len * inner) : 0;
    Tensor Y(X.shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, X.data[base + t * inner]);
            double s = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                const double e = std::exp(X.data[base + t * inner] - mx);
                Y.data[base + t * inner] = e;
                s += e;
            }
            for (std::size_t t = 0; t < len; ++t) Y.data[base + t * inner] /= s;
        }
    }
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, outer, inner, len](Graph& g, int self) {
        const Tensor& Yv = g.value_of(self);
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double s = 0.0;
                for (std::size_t t = 0; t < len; ++t) s += gy.data[base + t * inner] * Yv.data[base + t * inner];
                for (std::size_t t = 0; t < len; ++t) {
                    const std::size_t p = base + t * inner;
                    gx.data[p] += Yv.data[p] * (gy.data[p] - s);
                }
            }
        }
    });
}

Var causal_mask(Var scores, std::ptrdiff_t offset) {
    const Tensor& S = scores.value();
    require_rank2(S, "causal_mask");
    const std::size_t m = S.shape[0], n = S.shape[1];
    Tensor Y = S;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (static_cast<std::ptrdiff_t>(j) > static_cast<std::ptrdiff_t>(i) + offset)
                Y.data[i * n + j] = -std::numeric_limits<double>::infinity();
    const int is = scores.id;
    return scores.graph->emit(std::move(Y), {scores}, [is, m, n, offset](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(is);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (static_cast<std::ptrdiff_t>(j) <= static_cast<std::ptrdiff_t>(i) + offset)
                    gx.data[i * n + j] += gy.data[i * n + j];
    });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    const int ix = x.id;
    return x.graph->emit(Tensor(Shape{}, s), {x}, [ix](Graph& g, int self) {
        const double gs = g.grad_of(self).data[0];
        for (double& v : g.grad_acc(ix).data) v += gs;
    });
}

Var mean_rows(Var x) {
    const Tensor& X = x.value();
    require_rank2(X, "mean_rows");
    const std::size_t m = X.shape[0], n = X.shape[1];
    if (m == 0) throw ContractError("mean_rows: empty tensor");
    Tensor Y({n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) Y.data[j] += X.data[i * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (double& v : Y.data) v *= inv;
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, m, n, inv](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx.data[i * n + j] += gy.data[j] * inv;
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Tensor& X = x.value();
    require_rank2(X, "slice_rows");
    const std::size_t n = X.shape[1];
    if (begin > end || end > X.shape[0])
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(X.shape));
    Tensor Y({end - begin, n});
    std::copy(X.data.begin() + static_cast<std::ptrdiff_t>(begin * n),
              X.data.begin() + static_cast<std::ptrdiff_t>(end * n), Y.data.begin());
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, begin, n](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t i = 0; i < gy.numel(); ++i) gx.data[begin * n + i] += gy.data[i];
    });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& X = x.value();
    require_rank2(X, "slice_cols");
    const std::size_t m = X.shape[0], n = X.shape[1];
    if (begin > end || end > n)
        throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(X.shape));
    const std::size_t w = end - begin;
    Tensor Y({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) Y.data[i * w + j] = X.data[i * n + begin + j];
    const int ix = x.id;
    return x.graph->emit(std::move(Y), {x}, [ix, begin, m, n, w](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gx = g.grad_acc(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx.data[i * n + begin + j] += gy.data[i * w + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t n = parts[0].value().cols();
    std::size_t m = 0;
    for (const Var& p : parts) {
        require_rank2(p.value(), "concat_rows");
        if (p.value().cols() != n)
            throw DimensionError("concat_rows: width " + shape_str(p.value().shape) + " vs " + std::to_string(n));
        m += p.value().rows();
    }
    Tensor Y({m, n});
    std::vector<int> ids;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(off));
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.value().numel();
    }
    return parts[0].graph->emit(std::move(Y), parts, [ids, offsets](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            Tensor& gx = g.grad_acc(ids[k]);
            for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[offsets[k] + i];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts[0].value().rows();
    std::size_t n = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths, offsets;
    for (const Var& p : parts) {
        const Tensor& P = p.value();
        if (P.rows() != m || P.rank() > 2)
            throw DimensionError("concat_cols: height " + shape_str(P.shape) + " vs " + std::to_string(m));
        ids.push_back(p.id);
        offsets.push_back(n);
        widths.push_back(P.cols());
        n += P.cols();
    }
    Tensor Y({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& P = parts[k].value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) Y.data[i * n + offsets[k] + j] = P.data[i * widths[k] + j];
    }
    return parts[0].graph->emit(std::move(Y), parts, [ids, widths, offsets, m, n](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            Tensor& gx = g.grad_acc(ids[k]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < widths[k]; ++j) gx.data[i * widths[k] + j] += gy.data[i * n + offsets[k] + j];
        }
    });
}

Var row(Var x, std::size_t r) {
    Var s = slice_rows(x, r, r + 1);
    return reshape(s, {x.value().cols()});
}

Var gather_rows(Var table, std::span<const int> ids) {
    const Tensor& T = table.value();
    require_rank2(T, "gather_rows");
    const std::size_t v = T.shape[0], n = T.shape[1];
    Tensor Y({ids.size(), n});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
        std::copy_n(T.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * n), n,
                    Y.data.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    const int it = table.id;
    std::vector<int> idv(ids.begin(), ids.end());
    return table.graph->emit(std::move(Y), {table}, [it, n, idv = std::move(idv)](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        Tensor& gt = g.grad_acc(it);
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                gt.data[static_cast<std::size_t>(idv[i]) * n + j] += gy.data[i * n + j];
    });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
    const Tensor& L = logits.value();
    require_rank2(L, "cross_entropy");
    const std::size_t m = L.shape[0], v = L.shape[1];
    if (targets.size() != m)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(L.shape));
    std::vector<double> probs(L.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const int t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= v) throw InputError("cross_entropy: target out of range");
        const double* li = L.data.data() + i * v;
        const double mx = *std::max_element(li, li + v);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(li[j] - mx);
            s += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
        loss -= li[t] - mx - std::log(s);
    }
    const int il = logits.id;
    std::vector<int> tv(targets.begin(), targets.end());
    return logits.graph->emit(Tensor(Shape{}, loss), {logits},
                              [il, v, probs = std::move(probs), tv = std::move(tv)](Graph& g, int self) {
                                  const double gs = g.grad_of(self).data[0];
                                  Tensor& gl = g.grad_acc(il);
                                  for (std::size_t i = 0; i < tv.size(); ++i) {
                                      for (std::size_t j = 0; j < v; ++j) gl.data[i * v + j] += gs * probs[i * v + j];
                                      gl.data[i * v + static_cast<std::size_t>(tv[i])] -= gs;
                                  }
                              });
}

Var scale_by(Var x, Var weights, std::size_t index) {
    const Tensor& W = weights.value();
    if (index >= W.numel()) throw DimensionError("scale_by: index outside weight vector");
    const double w = W.data[index];
    Tensor Y = x.value();
    for (double& v : Y.data) v *= w;
    const int ix = x.id, iw = weights.id;
    return x.graph->emit(std::move(Y), {x, weights}, [ix, iw, index](Graph& g, int self) {
        const Tensor& gy = g.grad_of(self);
        if (g.needs_grad(ix)) axpy(g.grad_acc(ix).data, gy.data, g.value_of(iw).data[index]);
        if (g.needs_grad(iw)) {
            const Tensor& X = g.value_of(ix);
            double s = 0.0;
            for (std::size_t i = 0; i < X.numel(); ++i) s += gy.data[i] * X.data[i];
            g.grad_acc(iw).data[index] += s;
        }
    });
}

Var renormalize_subset(Var weights, std::span<const std::size_t> active) {
    const Tensor& W = weights.value();
    if (active.empty()) throw ContractError("renormalize_subset: empty active set");
    double s = 0.0;
    for (std::size_t i : active) {
        if (i >= W.numel()) throw DimensionError("renormalize_subset: index outside weight vector");
        s += W.data[i];
    }
    if (!(s > 0.0)) throw NumericError("renormalize_subset: active weights sum to zero");
    Tensor Y(W.shape);
    for (std::size_t i : active) Y.data[i] = W.data[i] / s;
    const int iw = weights.id;
    std::vector<std::size_t> act(active.begin(), active.end());
    return weights.graph->emit(std::move(Y), {weights}, [iw, s, act = std::move(act)](Graph& g, int self) {
        const Tensor& Yv = g.value_of(self);
        const Tensor& gy = g.grad_of(self);
        double dotp = 0.0;
        for (std::size_t i : act) dotp += gy.data[i] * Yv.data[i];
        Tensor& gw = g.grad_acc(iw);
        for (std::size_t j : act) gw.data[j] += (gy.data[j] - dotp) / s;
    });
}

}  // namespace covft::ad
