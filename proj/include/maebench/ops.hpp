#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "maebench/tensor.hpp"

// Differentiable kernels. The surface is deliberately small: broadcasting
// exists only for the leading-batch / trailing-vector patterns the model
// actually uses, and every op here has a central-difference test.
namespace maebench {

namespace detail {

// True when `small` equals the trailing dimensions of `big`.
inline bool is_suffix(const shape_t& small, const shape_t& big) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[off + i]) return false;
    return true;
}

template <class S, class F, class DF>
tensor<S> binary_ew(const tensor<S>& a, const tensor<S>& b, F f, DF df, const char* name) {
    // df(da, db, ia, ib, go, av, bv): accumulate input grads for one element
    const bool same = a.shape() == b.shape();
    const tensor<S>*big = &a, *small = &b;
    if (!same) {
        if (is_suffix(b.shape(), a.shape())) {
            big = &a;
            small = &b;
        } else if (is_suffix(a.shape(), b.shape())) {
            big = &b;
            small = &a;
        } else {
            throw dim_error(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()) + " do not broadcast");
        }
    }
    const std::size_t n = big->numel();
    const std::size_t nb = small->numel() == 0 ? 1 : small->numel();
    const bool a_is_big = (big == &a);

    std::vector<S> out(n);
    {
        const S* pa = a.data().data();
        const S* pb = b.data().data();
        if (same) {
            for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
        } else if (a_is_big) {
            for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i % nb]);
        } else {
            for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i % nb], pb[i]);
        }
    }
    tensor<S> r = tensor<S>::from(big->shape(), std::move(out));
    detail::attach(r, {a, b}, [an = a.node(), bn = b.node(), same, a_is_big, nb, df](tensor_node<S>* on) {
        return [an, bn, on, same, a_is_big, nb, df] {
            const std::size_t n = on->numel();
            S* da = an->requires_grad ? (an->ensure_grad(), an->grad.data()) : nullptr;
            S* db = bn->requires_grad ? (bn->ensure_grad(), bn->grad.data()) : nullptr;
            const S* av = an->value.data();
            const S* bv = bn->value.data();
            const S* go = on->grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = (same || a_is_big) ? i : i % nb;
                const std::size_t ib = (same || !a_is_big) ? i : i % nb;
                df(da, db, ia, ib, go[i], av[ia], bv[ib]);
            }
        };
    });
    return r;
}

}  // namespace detail

template <class S>
tensor<S> add(const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_ew(
        a, b, [](S x, S y) { return x + y; },
        [](S* da, S* db, std::size_t ia, std::size_t ib, S g, S, S) {
            if (da) da[ia] += g;
            if (db) db[ib] += g;
        },
        "add");
}

template <class S>
tensor<S> sub(const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_ew(
        a, b, [](S x, S y) { return x - y; },
        [](S* da, S* db, std::size_t ia, std::size_t ib, S g, S, S) {
            if (da) da[ia] += g;
            if (db) db[ib] -= g;
        },
        "sub");
}

template <class S>
tensor<S> mul(const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_ew(
        a, b, [](S x, S y) { return x * y; },
        [](S* da, S* db, std::size_t ia, std::size_t ib, S g, S av, S bv) {
            if (da) da[ia] += g * bv;
            if (db) db[ib] += g * av;
        },
        "mul");
}

template <class S>
tensor<S> add_scalar(const tensor<S>& a, S c) {
    std::vector<S> out(a.data());
    for (S& v : out) v += c;
    tensor<S> r = tensor<S>::from(a.shape(), std::move(out));
    detail::attach(r, {a}, [an = a.node()](tensor_node<S>* on) {
        return [an, on] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->numel(); ++i) an->grad[i] += on->grad[i];
        };
    });
    return r;
}

template <class S>
tensor<S> mul_scalar(const tensor<S>& a, S c) {
    std::vector<S> out(a.data());
    for (S& v : out) v *= c;
    tensor<S> r = tensor<S>::from(a.shape(), std::move(out));
    detail::attach(r, {a}, [an = a.node(), c](tensor_node<S>* on) {
        return [an, on, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->numel(); ++i) an->grad[i] += c * on->grad[i];
        };
    });
    return r;
}

template <class S>
tensor<S> neg(const tensor<S>& a) {
    return mul_scalar(a, S(-1));
}

template <class S>
tensor<S> operator+(const tensor<S>& a, const tensor<S>& b) { return add(a, b); }
template <class S>
tensor<S> operator-(const tensor<S>& a, const tensor<S>& b) { return sub(a, b); }
template <class S>
tensor<S> operator*(const tensor<S>& a, const tensor<S>& b) { return mul(a, b); }
template <class S>
tensor<S> operator*(const tensor<S>& a, S c) { return mul_scalar(a, c); }
template <class S>
tensor<S> operator*(S c, const tensor<S>& a) { return mul_scalar(a, c); }

// ---------------------------------------------------------------- matmul

template <class S>
tensor<S> matmul(const tensor<S>& a, const tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw dim_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n, S(0));
    {
        const S* pa = a.data().data();
        const S* pb = b.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            S* po = out.data() + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const S aik = pa[i * k + kk];
                const S* pbr = pb + kk * n;
                for (std::size_t j = 0; j < n; ++j) po[j] += aik * pbr[j];
            }
        }
    }
    tensor<S> r = tensor<S>::from({m, n}, std::move(out));
    detail::attach(r, {a, b}, [an = a.node(), bn = b.node(), m, k, n](tensor_node<S>* on) {
        return [an, bn, on, m, k, n] {
            const S* go = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                S* da = an->grad.data();
                const S* pb = bn->value.data();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        S acc = S(0);
                        const S* gr = go + i * n;
                        const S* br = pb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                        da[i * k + kk] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                S* db = bn->grad.data();
                const S* pa = an->value.data();
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const S aik = pa[i * k + kk];
                        const S* gr = go + i * n;
                        S* dbr = db + kk * n;
                        for (std::size_t j = 0; j < n; ++j) dbr[j] += aik * gr[j];
                    }
            }
        };
    });
    return r;
}

// Batched matmul over a shared leading dimension.
template <class S>
tensor<S> bmm(const tensor<S>& a, const tensor<S>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw dim_error("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<S> out(bs * m * n, S(0));
    {
        const S* pa = a.data().data();
        const S* pb = b.data().data();
        for (std::size_t t = 0; t < bs; ++t) {
            const S* ta = pa + t * m * k;
            const S* tb = pb + t * k * n;
            S* to = out.data() + t * m * n;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const S aik = ta[i * k + kk];
                    const S* pbr = tb + kk * n;
                    S* po = to + i * n;
                    for (std::size_t j = 0; j < n; ++j) po[j] += aik * pbr[j];
                }
        }
    }
    tensor<S> r = tensor<S>::from({bs, m, n}, std::move(out));
    detail::attach(r, {a, b}, [an = a.node(), bn = b.node(), bs, m, k, n](tensor_node<S>* on) {
        return [an, bn, on, bs, m, k, n] {
            const S* go = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t t = 0; t < bs; ++t) {
                    S* da = an->grad.data() + t * m * k;
                    const S* tb = bn->value.data() + t * k * n;
                    const S* tg = go + t * m * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            S acc = S(0);
                            for (std::size_t j = 0; j < n; ++j) acc += tg[i * n + j] * tb[kk * n + j];
                            da[i * k + kk] += acc;
                        }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t t = 0; t < bs; ++t) {
                    const S* ta = an->value.data() + t * m * k;
                    S* db = bn->grad.data() + t * k * n;
                    const S* tg = go + t * m * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const S aik = ta[i * k + kk];
                            for (std::size_t j = 0; j < n; ++j) db[kk * n + j] += aik * tg[i * n + j];
                        }
                }
            }
        };
    });
    return r;
}

// ------------------------------------------------------- shape plumbing

namespace detail {

template <class S>
std::vector<S> permute_values(const std::vector<S>& in, const shape_t& in_shape,
                              const std::vector<std::size_t>& axes) {
    const std::size_t rank = in_shape.size();
    shape_t out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    for (std::size_t i = rank - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    std::vector<S> out(in.size());
    const std::size_t n = in.size();
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            const std::size_t idx = rem / out_strides[d];
            rem %= out_strides[d];
            src += idx * in_strides[axes[d]];
        }
        out[o] = in[src];
    }
    return out;
}

}  // namespace detail

template <class S>
tensor<S> transpose(const tensor<S>& a, const std::vector<std::size_t>& axes) {
    const std::size_t rank = a.rank();
    if (axes.size() != rank) throw dim_error("transpose: axes rank mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t ax : axes) {
        if (ax >= rank || seen[ax]) throw dim_error("transpose: invalid axes");
        seen[ax] = true;
    }
    shape_t out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.dim(axes[i]);
    tensor<S> r = tensor<S>::from(out_shape, detail::permute_values(a.data(), a.shape(), axes));
    detail::attach(r, {a}, [an = a.node(), axes, out_shape](tensor_node<S>* on) {
        return [an, on, axes, out_shape] {
            an->ensure_grad();
            std::vector<std::size_t> inv(axes.size());
            for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
            std::vector<S> g = detail::permute_values(on->grad, out_shape, inv);
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        };
    });
    return r;
}

// 2-D transpose shorthand.
template <class S>
tensor<S> transpose(const tensor<S>& a) {
    return transpose(a, {1, 0});
}

template <class S>
tensor<S> reshape(const tensor<S>& a, const shape_t& shape) {
    if (shape_numel(shape) != a.numel())
        throw dim_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    tensor<S> r = tensor<S>::from(shape, a.data());
    detail::attach(r, {a}, [an = a.node()](tensor_node<S>* on) {
        return [an, on] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->numel(); ++i) an->grad[i] += on->grad[i];
        };
    });
    return r;
}

// Expand size-1 dimensions (after left-padding the input shape with 1s)
// up to `shape`. Gradient sums over the expanded positions.
template <class S>
tensor<S> broadcast_to(const tensor<S>& a, const shape_t& shape) {
    const std::size_t rank = shape.size();
    if (a.rank() > rank) throw dim_error("broadcast_to: rank shrinks");
    shape_t in(rank, 1);
    for (std::size_t i = 0; i < a.rank(); ++i) in[rank - a.rank() + i] = a.dim(i);
    for (std::size_t i = 0; i < rank; ++i)
        if (in[i] != shape[i] && in[i] != 1)
            throw dim_error("broadcast_to: " + shape_str(a.shape()) + " vs " + shape_str(shape));

    std::vector<std::size_t> in_strides(rank, 0), tmp(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) tmp[i] = tmp[i + 1] * in[i + 1];
    for (std::size_t i = 0; i < rank; ++i) in_strides[i] = (in[i] == 1) ? 0 : tmp[i];
    std::vector<std::size_t> out_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * shape[i + 1];

    const std::size_t n = shape_numel(shape);
    std::vector<S> out(n);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            src += (rem / out_strides[d]) * in_strides[d];
            rem %= out_strides[d];
        }
        out[o] = a.data()[src];
    }
    tensor<S> r = tensor<S>::from(shape, std::move(out));
    detail::attach(r, {a}, [an = a.node(), in_strides, out_strides, rank, n](tensor_node<S>* on) {
        return [an, on, in_strides, out_strides, rank, n] {
            an->ensure_grad();
            for (std::size_t o = 0; o < n; ++o) {
                std::size_t rem = o, src = 0;
                for (std::size_t d = 0; d < rank; ++d) {
                    src += (rem / out_strides[d]) * in_strides[d];
                    rem %= out_strides[d];
                }
                an->grad[src] += on->grad[o];
            }
        };
    });
    return r;
}

template <class S>
tensor<S> concat(const std::vector<tensor<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw contract_error("concat: no inputs");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw dim_error("concat: axis out of range");
    shape_t out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const tensor<S>& p : parts) {
        if (p.rank() != rank) throw dim_error("concat: rank mismatch");
        for (std::size_t d = 0; d < rank; ++d)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw dim_error("concat: shape mismatch at axis " + std::to_string(d));
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::size_t d = axis + 1; d < rank; ++d) inner *= out_shape[d];

    std::vector<S> out(shape_numel(out_shape));
    const std::size_t total_axis = out_shape[axis];
    std::size_t offset = 0;
    for (const tensor<S>& p : parts) {
        const std::size_t na = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(p.data().begin() + o * na * inner, p.data().begin() + (o + 1) * na * inner,
                      out.begin() + (o * total_axis + offset) * inner);
        offset += na;
    }

    tensor<S> r = tensor<S>::from(out_shape, std::move(out));
    bool needs = false;
    for (const tensor<S>& p : parts) needs = needs || p.requires_grad();
    if (needs) {
        auto node = r.node();
        node->requires_grad = true;
        node->leaf = false;
        std::vector<std::size_t> sizes;
        for (const tensor<S>& p : parts) {
            node->parents.push_back(p.node());
            sizes.push_back(p.dim(axis));
        }
        tensor_node<S>* on = node.get();
        node->backprop = [on, sizes, outer, inner, total_axis] {
            std::size_t offset = 0;
            for (std::size_t pi = 0; pi < sizes.size(); ++pi) {
                tensor_node<S>* pn = on->parents[pi].get();
                const std::size_t na = sizes[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* g = on->grad.data() + (o * total_axis + offset) * inner;
                        S* dst = pn->grad.data() + o * na * inner;
                        for (std::size_t i = 0; i < na * inner; ++i) dst[i] += g[i];
                    }
                }
                offset += na;
            }
        };
    }
    return r;
}

template <class S>
tensor<S> slice(const tensor<S>& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank()) throw dim_error("slice: axis out of range");
    if (start + len > a.dim(axis)) throw index_error("slice: range [" + std::to_string(start) + ", " +
                                                     std::to_string(start + len) + ") exceeds axis size " +
                                                     std::to_string(a.dim(axis)));
    shape_t out_shape = a.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    const std::size_t na = a.dim(axis);

    std::vector<S> out(shape_numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(a.data().begin() + (o * na + start) * inner,
                  a.data().begin() + (o * na + start + len) * inner, out.begin() + o * len * inner);

    tensor<S> r = tensor<S>::from(out_shape, std::move(out));
    detail::attach(r, {a}, [an = a.node(), outer, inner, na, start, len](tensor_node<S>* on) {
        return [an, on, outer, inner, na, start, len] {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const S* g = on->grad.data() + o * len * inner;
                S* dst = an->grad.data() + (o * na + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        };
    });
    return r;
}

// ----------------------------------------------------- row reindexing

namespace detail {

template <class S>
tensor<S> take_rows(const tensor<S>& a, const std::vector<std::size_t>& ids, const char* name) {
    if (a.rank() != 2) throw dim_error(std::string(name) + ": expects a 2-D tensor");
    const std::size_t n = a.dim(0), d = a.dim(1);
    for (std::size_t id : ids)
        if (id >= n)
            throw index_error(std::string(name) + ": index " + std::to_string(id) +
                              " out of range for " + std::to_string(n) + " rows");
    std::vector<S> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(a.data().begin() + ids[i] * d, a.data().begin() + (ids[i] + 1) * d,
                  out.begin() + i * d);
    tensor<S> r = tensor<S>::from({ids.size(), d}, std::move(out));
    detail::attach(r, {a}, [an = a.node(), ids, d](tensor_node<S>* on) {
        return [an, on, ids, d] {
            an->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const S* g = on->grad.data() + i * d;
                S* dst = an->grad.data() + ids[i] * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    });
    return r;
}

}  // namespace detail

// out[i, :] = a[ids[i], :]. Indices may repeat; gradient scatter-adds.
template <class S>
tensor<S> gather_rows(const tensor<S>& a, const std::vector<std::size_t>& ids) {
    return detail::take_rows(a, ids, "gather_rows");
}

// Permutation restore: out[i, :] = a[ids[i], :] where ids must be a
// permutation of the row range. Together with gather_rows this gives the
// exact shuffle/unshuffle round trip: scatter_rows(gather_rows(x, p),
// inverse(p)) == x bitwise.
template <class S>
tensor<S> scatter_rows(const tensor<S>& a, const std::vector<std::size_t>& ids) {
    if (a.rank() != 2) throw dim_error("scatter_rows: expects a 2-D tensor");
    if (ids.size() != a.dim(0))
        throw contract_error("scatter_rows: got " + std::to_string(ids.size()) + " indices for " +
                             std::to_string(a.dim(0)) + " rows");
    std::vector<bool> seen(a.dim(0), false);
    for (std::size_t id : ids) {
        if (id >= a.dim(0)) throw index_error("scatter_rows: index " + std::to_string(id) + " out of range");
        if (seen[id]) throw contract_error("scatter_rows: indices are not a permutation");
        seen[id] = true;
    }
    return detail::take_rows(a, ids, "scatter_rows");
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
    std::vector<std::size_t> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

// Batched row lookup on [B, T, D]: out[b, i, :] = a[b, ids[b][i], :].
template <class S>
tensor<S> gather_tokens(const tensor<S>& a, const std::vector<std::vector<std::size_t>>& ids) {
    if (a.rank() != 3) throw dim_error("gather_tokens: expects a 3-D tensor");
    const std::size_t bs = a.dim(0), t = a.dim(1), d = a.dim(2);
    if (ids.size() != bs) throw contract_error("gather_tokens: one index list per batch row required");
    const std::size_t k = ids.empty() ? 0 : ids[0].size();
    for (const auto& row : ids) {
        if (row.size() != k) throw contract_error("gather_tokens: ragged index lists");
        for (std::size_t id : row)
            if (id >= t) throw index_error("gather_tokens: index " + std::to_string(id) + " out of range");
    }
    std::vector<S> out(bs * k * d);
    for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t i = 0; i < k; ++i)
            std::copy(a.data().begin() + (b * t + ids[b][i]) * d,
                      a.data().begin() + (b * t + ids[b][i] + 1) * d, out.begin() + (b * k + i) * d);
    tensor<S> r = tensor<S>::from({bs, k, d}, std::move(out));
    detail::attach(r, {a}, [an = a.node(), ids, t, d, k](tensor_node<S>* on) {
        return [an, on, ids, t, d, k] {
            an->ensure_grad();
            for (std::size_t b = 0; b < ids.size(); ++b)
                for (std::size_t i = 0; i < k; ++i) {
                    const S* g = on->grad.data() + (b * k + i) * d;
                    S* dst = an->grad.data() + (b * t + ids[b][i]) * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                }
        };
    });
    return r;
}

// ----------------------------------------------------------- reductions

template <class S>
tensor<S> sum(const tensor<S>& a) {
    S acc = S(0);
    for (S v : a.data()) acc += v;
    tensor<S> r = tensor<S>::scalar(acc);
    detail::attach(r, {a}, [an = a.node()](tensor_node<S>* on) {
        return [an, on] {
            an->ensure_grad();
            const S g = on->grad[0];
            for (std::size_t i = 0; i < an->numel(); ++i) an->grad[i] += g;
        };
    });
    return r;
}

template <class S>
tensor<S> mean(const tensor<S>& a) {
    if (a.numel() == 0) throw contract_error("mean: empty tensor");
    return mul_scalar(sum(a), S(1) / static_cast<S>(a.numel()));
}

namespace detail {

template <class S>
void reduce_axis_dims(const tensor<S>& a, std::size_t axis, std::size_t& outer, std::size_t& n,
                      std::size_t& inner, shape_t& out_shape) {
    if (axis >= a.rank()) throw dim_error("reduce: axis out of range");
    outer = 1;
    inner = 1;
    n = a.dim(axis);
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    out_shape.clear();
    for (std::size_t d = 0; d < a.rank(); ++d)
        if (d != axis) out_shape.push_back(a.dim(d));
}

}  // namespace detail

template <class S>
tensor<S> sum_axis(const tensor<S>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    shape_t out_shape;
    detail::reduce_axis_dims(a, axis, outer, n, inner, out_shape);
    std::vector<S> out(outer * inner, S(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
            const S* src = a.data().data() + (o * n + j) * inner;
            S* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    tensor<S> r = tensor<S>::from(out_shape, std::move(out));
    detail::attach(r, {a}, [an = a.node(), outer, n, inner](tensor_node<S>* on) {
        return [an, on, outer, n, inner] {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < n; ++j) {
                    const S* g = on->grad.data() + o * inner;
                    S* dst = an->grad.data() + (o * n + j) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
        };
    });
    return r;
}

template <class S>
tensor<S> mean_axis(const tensor<S>& a, std::size_t axis) {
    if (a.dim(axis) == 0) throw dim_error("mean_axis: zero-length axis");
    return mul_scalar(sum_axis(a, axis), S(1) / static_cast<S>(a.dim(axis)));
}

// ----------------------------------------------------- nonlinearities

namespace detail {

template <class S, class F, class DF>
tensor<S> unary_ew(const tensor<S>& a, F f, DF df) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a.data()[i]);
    tensor<S> r = tensor<S>::from(a.shape(), std::move(out));
    detail::attach(r, {a}, [an = a.node(), df](tensor_node<S>* on) {
        return [an, on, df] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->numel(); ++i)
                an->grad[i] += on->grad[i] * df(an->value[i], on->value[i]);
        };
    });
    return r;
}

}  // namespace detail

// Exact (erf-based) GELU.
template <class S>
tensor<S> gelu(const tensor<S>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_ew(
        a,
        [](S x) {
            return static_cast<S>(0.5 * static_cast<double>(x) *
                                  (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
        },
        [](S x, S) {
            const double xd = static_cast<double>(x);
            const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<S>(cdf + xd * pdf);
        });
}

template <class S>
tensor<S> sigmoid(const tensor<S>& a) {
    return detail::unary_ew(
        a,
        [](S x) {
            if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
            const S e = std::exp(x);
            return e / (S(1) + e);
        },
        [](S, S y) { return y * (S(1) - y); });
}

// softplus(x) = log(1 + exp(x)), computed as max(x,0) + log1p(exp(-|x|)).
template <class S>
tensor<S> softplus(const tensor<S>& a) {
    return detail::unary_ew(
        a,
        [](S x) {
            return std::max(x, S(0)) + static_cast<S>(std::log1p(std::exp(-std::abs(static_cast<double>(x)))));
        },
        [](S x, S) {
            if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
            const S e = std::exp(x);
            return e / (S(1) + e);
        });
}

namespace detail {

template <class S>
void softmax_dims(const tensor<S>& a, std::size_t axis, std::size_t& outer, std::size_t& n,
                  std::size_t& inner) {
    if (axis >= a.rank()) throw dim_error("softmax: axis " + std::to_string(axis) +
                                          " out of range for " + shape_str(a.shape()));
    outer = 1;
    inner = 1;
    n = a.dim(axis);
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
}

}  // namespace detail

// Max-subtracted softmax along one axis; each slice sums to 1.
template <class S>
tensor<S> softmax(const tensor<S>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::softmax_dims(a, axis, outer, n, inner);
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            S m = pa[(o * n) * inner + i];
            for (std::size_t j = 1; j < n; ++j) m = std::max(m, pa[(o * n + j) * inner + i]);
            S s = S(0);
            for (std::size_t j = 0; j < n; ++j) {
                const S e = std::exp(pa[(o * n + j) * inner + i] - m);
                out[(o * n + j) * inner + i] = e;
                s += e;
            }
            const S invs = S(1) / s;
            for (std::size_t j = 0; j < n; ++j) out[(o * n + j) * inner + i] *= invs;
        }
    tensor<S> r = tensor<S>::from(a.shape(), std::move(out));
    detail::attach(r, {a}, [an = a.node(), outer, n, inner](tensor_node<S>* on) {
        return [an, on, outer, n, inner] {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    S dot = S(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = (o * n + j) * inner + i;
                        dot += on->grad[idx] * on->value[idx];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = (o * n + j) * inner + i;
                        an->grad[idx] += on->value[idx] * (on->grad[idx] - dot);
                    }
                }
        };
    });
    return r;
}

template <class S>
tensor<S> log_softmax(const tensor<S>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::softmax_dims(a, axis, outer, n, inner);
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            S m = pa[(o * n) * inner + i];
            for (std::size_t j = 1; j < n; ++j) m = std::max(m, pa[(o * n + j) * inner + i]);
            S s = S(0);
            for (std::size_t j = 0; j < n; ++j) s += std::exp(pa[(o * n + j) * inner + i] - m);
            const S lse = m + std::log(s);
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t idx = (o * n + j) * inner + i;
                out[idx] = pa[idx] - lse;
            }
        }
    tensor<S> r = tensor<S>::from(a.shape(), std::move(out));
    detail::attach(r, {a}, [an = a.node(), outer, n, inner](tensor_node<S>* on) {
        return [an, on, outer, n, inner] {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    S gsum = S(0);
                    for (std::size_t j = 0; j < n; ++j) gsum += on->grad[(o * n + j) * inner + i];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = (o * n + j) * inner + i;
                        an->grad[idx] += on->grad[idx] - std::exp(on->value[idx]) * gsum;
                    }
                }
        };
    });
    return r;
}

// Layer normalization over the last dimension with affine parameters.
template <class S>
tensor<S> layer_norm(const tensor<S>& x, const tensor<S>& gamma, const tensor<S>& beta,
                     S eps = S(1e-5)) {
    if (x.rank() == 0 || x.dim(x.rank() - 1) == 0)
        throw dim_error("layer_norm: zero-length normalized dimension");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw dim_error("layer_norm: gamma/beta must have " + std::to_string(d) + " entries, got " +
                        shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
    const std::size_t rows = x.numel() / d;

    std::vector<S> out(x.numel());
    std::vector<S> xhat(x.numel());
    std::vector<S> inv_std(rows);
    const S* px = x.data().data();
    const S* pg = gamma.data().data();
    const S* pb = beta.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = px + r * d;
        S mu = S(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S inv = S(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const S xh = (row[j] - mu) * inv;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * pg[j] + pb[j];
        }
    }
    tensor<S> result = tensor<S>::from(x.shape(), std::move(out));
    detail::attach(result, {x, gamma, beta},
                   [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                    inv_std = std::move(inv_std), rows, d](tensor_node<S>* on) {
                       return [xn, gn, bn, on, xhat, inv_std, rows, d] {
                           const S* go = on->grad.data();
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) bn->grad[j] += go[r * d + j];
                           }
                           if (gn->requires_grad) {
                               gn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gn->grad[j] += go[r * d + j] * xhat[r * d + j];
                           }
                           if (xn->requires_grad) {
                               xn->ensure_grad();
                               const S* pg = gn->value.data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   S mean_g = S(0), mean_gx = S(0);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const S g = go[r * d + j] * pg[j];
                                       mean_g += g;
                                       mean_gx += g * xhat[r * d + j];
                                   }
                                   mean_g /= static_cast<S>(d);
                                   mean_gx /= static_cast<S>(d);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const S g = go[r * d + j] * pg[j];
                                       xn->grad[r * d + j] +=
                                           inv_std[r] * (g - mean_g - xhat[r * d + j] * mean_gx);
                                   }
                               }
                           }
                       };
                   });
    return result;
}

// x[..., D_in] * w[D_in, D_out] + b, flattening leading dims through matmul.
template <class S>
tensor<S> linear(const tensor<S>& x, const tensor<S>& w, const tensor<S>& b) {
    if (w.rank() != 2) throw dim_error("linear: weight must be 2-D");
    const std::size_t din = w.dim(0), dout = w.dim(1);
    if (x.dim(x.rank() - 1) != din)
        throw dim_error("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    shape_t out_shape = x.shape();
    out_shape.back() = dout;
    tensor<S> flat = reshape(x, {x.numel() / din, din});
    tensor<S> y = add(matmul(flat, w), b);
    return reshape(y, out_shape);
}

}  // namespace maebench
