// Dense rank-1/rank-2 tensors with reverse-mode autodiff.
//
// Ops build a DAG of shared_ptr nodes; backward() topo-sorts and pulls
// gradients into every leaf that requires_grad. Scalar type is a template
// parameter: training runs float, gradient verification runs double.
// Every op validates its output for NaN/Inf and throws NumericError so a
// blown-up step can never silently poison training.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "recap/core/errors.hpp"

namespace recap {

template <typename S>
struct Tensor;

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <typename S>
struct Tensor {
    std::vector<int> shape;  // rank 1 ([n]) or rank 2 ([m, n]); scalars are [1]
    std::vector<S> data;
    std::vector<S> grad;  // same length as data once touched by backward()
    bool requires_grad = false;
    std::vector<TensorPtr<S>> parents;
    std::function<void(Tensor<S>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : shape[0]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

namespace ag {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables graph construction in scope (rollouts, reward eval, FD probes).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

template <typename S>
TensorPtr<S> leaf(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw DimensionError("leaf: data length does not match shape");
    auto t = std::make_shared<Tensor<S>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

template <typename S>
TensorPtr<S> zeros(std::vector<int> shape, bool requires_grad = false) {
    int64_t n = shape_numel(shape);
    return leaf<S>(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
}

template <typename S>
TensorPtr<S> scalar(S v) {
    return leaf<S>({1}, {v});
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
    for (S v : t.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

template <typename S>
TensorPtr<S> make_node(std::vector<int> shape, std::vector<TensorPtr<S>> parents) {
    auto t = std::make_shared<Tensor<S>>();
    t->shape = std::move(shape);
    t->data.resize(shape_numel(t->shape));
    bool rg = false;
    if (grad_mode()) {
        for (const auto& p : parents) rg = rg || p->requires_grad;
    }
    t->requires_grad = rg;
    if (rg) t->parents = std::move(parents);
    return t;
}

// ---- raw kernels (double accumulation for all reductions) ----

template <typename S>
void matmul_kernel(const S* a, const S* b, S* c, int m, int k, int n) {
    std::vector<double> acc(n);
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const S* arow = a + static_cast<int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = static_cast<double>(arow[p]);
            const S* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        S* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = static_cast<S>(acc[j]);
    }
}

// ---- core ops ----

template <typename S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw DimensionError("matmul: inner dimensions disagree");
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_node<S>({m, n}, {a, b});
    matmul_kernel(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    check_finite(*out, "matmul");
    if (out->requires_grad) {
        out->backward_fn = [a, b, m, k, n](Tensor<S>& self) {
            const S* g = self.grad.data();
            if (a->requires_grad) {
                a->ensure_grad();
                // dA[i,p] = dot(G row i, B row p)
                for (int i = 0; i < m; ++i) {
                    const S* grow = g + static_cast<int64_t>(i) * n;
                    S* darow = a->grad.data() + static_cast<int64_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const S* brow = b->data.data() + static_cast<int64_t>(p) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
                        darow[p] += static_cast<S>(acc);
                    }
                }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                // dB[p,:] = sum_i A[i,p] * G row i
                std::vector<double> acc(n);
                for (int p = 0; p < k; ++p) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int i = 0; i < m; ++i) {
                        const double av = static_cast<double>(a->data[static_cast<int64_t>(i) * k + p]);
                        const S* grow = g + static_cast<int64_t>(i) * n;
                        for (int j = 0; j < n; ++j) acc[j] += av * static_cast<double>(grow[j]);
                    }
                    S* dbrow = b->grad.data() + static_cast<int64_t>(p) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += static_cast<S>(acc[j]);
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> transpose(const TensorPtr<S>& a) {
    if (a->shape.size() != 2) throw DimensionError("transpose: rank-2 required");
    const int m = a->shape[0], n = a->shape[1];
    auto out = make_node<S>({n, m}, {a});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[static_cast<int64_t>(j) * m + i] = a->data[static_cast<int64_t>(i) * n + j];
    if (out->requires_grad) {
        out->backward_fn = [a, m, n](Tensor<S>& self) {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    a->grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(j) * m + i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> reshape(const TensorPtr<S>& a, std::vector<int> shape) {
    if (shape_numel(shape) != a->numel()) throw DimensionError("reshape: element count mismatch");
    auto out = make_node<S>(std::move(shape), {a});
    out->data = a->data;
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> flatten(const TensorPtr<S>& a) {
    return reshape(a, {static_cast<int>(a->numel())});
}

template <typename S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->numel() != b->numel()) throw DimensionError("add: shape mismatch");
    auto out = make_node<S>(a->shape, {a, b});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    if (out->requires_grad) {
        out->backward_fn = [a, b](Tensor<S>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->numel(); ++i) b->grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> sub(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->numel() != b->numel()) throw DimensionError("sub: shape mismatch");
    auto out = make_node<S>(a->shape, {a, b});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(*out, "sub");
    if (out->requires_grad) {
        out->backward_fn = [a, b](Tensor<S>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->numel(); ++i) b->grad[i] -= self.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> mul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->numel() != b->numel()) throw DimensionError("mul: shape mismatch");
    auto out = make_node<S>(a->shape, {a, b});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(*out, "mul");
    if (out->requires_grad) {
        out->backward_fn = [a, b](Tensor<S>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->numel(); ++i) b->grad[i] += self.grad[i] * a->data[i];
            }
        };
    }
    return out;
}

// Broadcast a row vector [n] over every row of a [m, n] matrix.
template <typename S>
TensorPtr<S> add_rowvec(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    const int m = a->rows(), n = a->cols();
    if (b->numel() != n) throw DimensionError("add_rowvec: vector length != cols");
    auto out = make_node<S>(a->shape, {a, b});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<int64_t>(i) * n + j] = a->data[static_cast<int64_t>(i) * n + j] + b->data[j];
    check_finite(*out, "add_rowvec");
    if (out->requires_grad) {
        out->backward_fn = [a, b, m, n](Tensor<S>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += static_cast<double>(self.grad[static_cast<int64_t>(i) * n + j]);
                    b->grad[j] += static_cast<S>(acc);
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> scale(const TensorPtr<S>& a, S c) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * c;
    check_finite(*out, "scale");
    if (out->requires_grad) {
        out->backward_fn = [a, c](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i] * c;
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> add_const(const TensorPtr<S>& a, S c) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + c;
    check_finite(*out, "add_const");
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> neg(const TensorPtr<S>& a) {
    return scale(a, S(-1));
}

template <typename S>
TensorPtr<S> silu(const TensorPtr<S>& a) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) {
        const double x = static_cast<double>(a->data[i]);
        out->data[i] = static_cast<S>(x / (1.0 + std::exp(-x)));
    }
    check_finite(*out, "silu");
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) {
                const double x = static_cast<double>(a->data[i]);
                const double sig = 1.0 / (1.0 + std::exp(-x));
                a->grad[i] += self.grad[i] * static_cast<S>(sig * (1.0 + x * (1.0 - sig)));
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> exp(const TensorPtr<S>& a) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = static_cast<S>(std::exp(static_cast<double>(a->data[i])));
    check_finite(*out, "exp");
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i] * self.data[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> square(const TensorPtr<S>& a) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * a->data[i];
    check_finite(*out, "square");
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i] * S(2) * a->data[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> sum_all(const TensorPtr<S>& a) {
    auto out = make_node<S>({1}, {a});
    double acc = 0.0;
    for (int64_t i = 0; i < a->numel(); ++i) acc += static_cast<double>(a->data[i]);
    out->data[0] = static_cast<S>(acc);
    check_finite(*out, "sum_all");
    if (out->requires_grad) {
        out->backward_fn = [a](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[0];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> mean_all(const TensorPtr<S>& a) {
    return scale(sum_all(a), S(1.0 / static_cast<double>(a->numel())));
}

template <typename S>
TensorPtr<S> min_elem(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->numel() != b->numel()) throw DimensionError("min_elem: shape mismatch");
    auto out = make_node<S>(a->shape, {a, b});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = std::min(a->data[i], b->data[i]);
    if (out->requires_grad) {
        out->backward_fn = [a, b](Tensor<S>& self) {
            // ties route to a (subgradient choice)
            for (int64_t i = 0; i < a->numel(); ++i) {
                if (a->data[i] <= b->data[i]) {
                    if (a->requires_grad) {
                        a->ensure_grad();
                        a->grad[i] += self.grad[i];
                    }
                } else if (b->requires_grad) {
                    b->ensure_grad();
                    b->grad[i] += self.grad[i];
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> clamp(const TensorPtr<S>& a, S lo, S hi) {
    auto out = make_node<S>(a->shape, {a});
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = std::min(hi, std::max(lo, a->data[i]));
    if (out->requires_grad) {
        out->backward_fn = [a, lo, hi](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) {
                if (a->data[i] > lo && a->data[i] < hi) a->grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> concat_rows(const std::vector<TensorPtr<S>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty input");
    const int n = parts[0]->cols();
    int m = 0;
    for (const auto& p : parts) {
        if (p->cols() != n) throw DimensionError("concat_rows: column mismatch");
        m += p->rows();
    }
    auto out = make_node<S>({m, n}, parts);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->numel();
    }
    if (out->requires_grad) {
        auto parts_copy = parts;
        out->backward_fn = [parts_copy](Tensor<S>& self) {
            int64_t off = 0;
            for (const auto& p : parts_copy) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int64_t i = 0; i < p->numel(); ++i) p->grad[i] += self.grad[off + i];
                }
                off += p->numel();
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> slice_rows(const TensorPtr<S>& a, int r0, int r1) {
    const int m = a->rows(), n = a->cols();
    if (r0 < 0 || r1 > m || r0 >= r1) throw DimensionError("slice_rows: bad range");
    auto out = make_node<S>({r1 - r0, n}, {a});
    std::copy(a->data.begin() + static_cast<int64_t>(r0) * n, a->data.begin() + static_cast<int64_t>(r1) * n,
              out->data.begin());
    if (out->requires_grad) {
        out->backward_fn = [a, r0, n](Tensor<S>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i) a->grad[static_cast<int64_t>(r0) * n + i] += self.grad[i];
        };
    }
    return out;
}

// Tile a vector [n] into m identical rows; backward sums rows back.
template <typename S>
TensorPtr<S> broadcast_rows(const TensorPtr<S>& v, int m) {
    const int n = static_cast<int>(v->numel());
    auto out = make_node<S>({m, n}, {v});
    for (int i = 0; i < m; ++i) std::copy(v->data.begin(), v->data.end(), out->data.begin() + static_cast<int64_t>(i) * n);
    if (out->requires_grad) {
        out->backward_fn = [v, m, n](Tensor<S>& self) {
            v->ensure_grad();
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i) acc += static_cast<double>(self.grad[static_cast<int64_t>(i) * n + j]);
                v->grad[j] += static_cast<S>(acc);
            }
        };
    }
    return out;
}

// Multiply each row i by a constant factor f[i].
template <typename S>
TensorPtr<S> scale_rows(const TensorPtr<S>& a, const std::vector<S>& factors) {
    const int m = a->rows(), n = a->cols();
    if (static_cast<int>(factors.size()) != m) throw DimensionError("scale_rows: one factor per row required");
    auto out = make_node<S>(a->shape, {a});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<int64_t>(i) * n + j] = a->data[static_cast<int64_t>(i) * n + j] * factors[i];
    check_finite(*out, "scale_rows");
    if (out->requires_grad) {
        out->backward_fn = [a, factors, m, n](Tensor<S>& self) {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    a->grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(i) * n + j] * factors[i];
        };
    }
    return out;
}

// Row-wise sum: [m, n] -> [m].
template <typename S>
TensorPtr<S> row_sums(const TensorPtr<S>& a) {
    const int m = a->rows(), n = a->cols();
    auto out = make_node<S>({m}, {a});
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += static_cast<double>(a->data[static_cast<int64_t>(i) * n + j]);
        out->data[i] = static_cast<S>(acc);
    }
    check_finite(*out, "row_sums");
    if (out->requires_grad) {
        out->backward_fn = [a, m, n](Tensor<S>& self) {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) a->grad[static_cast<int64_t>(i) * n + j] += self.grad[i];
        };
    }
    return out;
}

// Embedding lookup: rows of `table` selected by `ids`.
template <typename S>
TensorPtr<S> gather_rows(const TensorPtr<S>& table, const std::vector<int>& ids) {
    const int v = table->rows(), n = table->cols();
    for (int id : ids) {
        if (id < 0 || id >= v) throw InputError("gather_rows: index out of range");
    }
    auto out = make_node<S>({static_cast<int>(ids.size()), n}, {table});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table->data.begin() + static_cast<int64_t>(ids[i]) * n,
                  table->data.begin() + static_cast<int64_t>(ids[i] + 1) * n, out->data.begin() + i * n);
    if (out->requires_grad) {
        out->backward_fn = [table, ids, n](Tensor<S>& self) {
            table->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < n; ++j)
                    table->grad[static_cast<int64_t>(ids[i]) * n + j] += self.grad[i * n + j];
        };
    }
    return out;
}

// Row-wise softmax over the causal prefix: row i attends to columns [0, i + offset].
// offset is the number of always-visible leading columns minus zero; for a plain
// causal square matrix use offset 0, for queries shifted right of keys use >0.
template <typename S>
TensorPtr<S> causal_softmax_rows(const TensorPtr<S>& scores, int offset = 0) {
    const int m = scores->rows(), n = scores->cols();
    auto out = make_node<S>(scores->shape, {scores});
    std::fill(out->data.begin(), out->data.end(), S(0));
    for (int i = 0; i < m; ++i) {
        const int len = std::min(n, i + 1 + offset);
        const S* srow = scores->data.data() + static_cast<int64_t>(i) * n;
        S* orow = out->data.data() + static_cast<int64_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(srow[j]));
        double denom = 0.0;
        for (int j = 0; j < len; ++j) denom += std::exp(static_cast<double>(srow[j]) - mx);
        for (int j = 0; j < len; ++j) orow[j] = static_cast<S>(std::exp(static_cast<double>(srow[j]) - mx) / denom);
    }
    check_finite(*out, "causal_softmax_rows");
    if (out->requires_grad) {
        out->backward_fn = [scores, m, n, offset](Tensor<S>& self) {
            scores->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const int len = std::min(n, i + 1 + offset);
                const S* p = self.data.data() + static_cast<int64_t>(i) * n;
                const S* g = self.grad.data() + static_cast<int64_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < len; ++j) dot += static_cast<double>(g[j]) * static_cast<double>(p[j]);
                S* ds = scores->grad.data() + static_cast<int64_t>(i) * n;
                for (int j = 0; j < len; ++j)
                    ds[j] += static_cast<S>(static_cast<double>(p[j]) * (static_cast<double>(g[j]) - dot));
            }
        };
    }
    return out;
}

// LayerNorm over each row with learned gain/bias.
template <typename S>
TensorPtr<S> layer_norm_rows(const TensorPtr<S>& x, const TensorPtr<S>& gain, const TensorPtr<S>& bias, S eps = S(1e-5)) {
    const int m = x->rows(), n = x->cols();
    if (gain->numel() != n || bias->numel() != n) throw DimensionError("layer_norm_rows: gain/bias length != cols");
    auto out = make_node<S>(x->shape, {x, gain, bias});
    std::vector<double> invstd(m);
    std::vector<S> norm(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const S* xr = x->data.data() + static_cast<int64_t>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += static_cast<double>(xr[j]);
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = static_cast<double>(xr[j]) - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        invstd[i] = is;
        for (int j = 0; j < n; ++j) {
            const S y = static_cast<S>((static_cast<double>(xr[j]) - mu) * is);
            norm[static_cast<int64_t>(i) * n + j] = y;
            out->data[static_cast<int64_t>(i) * n + j] = gain->data[j] * y + bias->data[j];
        }
    }
    check_finite(*out, "layer_norm_rows");
    if (out->requires_grad) {
        out->backward_fn = [x, gain, bias, m, n, invstd, norm](Tensor<S>& self) {
            if (gain->requires_grad) gain->ensure_grad();
            if (bias->requires_grad) bias->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const S* g = self.grad.data() + static_cast<int64_t>(i) * n;
                const S* y = norm.data() + static_cast<int64_t>(i) * n;
                if (gain->requires_grad || bias->requires_grad) {
                    for (int j = 0; j < n; ++j) {
                        if (gain->requires_grad) gain->grad[j] += g[j] * y[j];
                        if (bias->requires_grad) bias->grad[j] += g[j];
                    }
                }
                if (x->requires_grad) {
                    double mean_h = 0.0, mean_hy = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double h = static_cast<double>(g[j]) * static_cast<double>(gain->data[j]);
                        mean_h += h;
                        mean_hy += h * static_cast<double>(y[j]);
                    }
                    mean_h /= n;
                    mean_hy /= n;
                    S* dx = x->grad.data() + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        const double h = static_cast<double>(g[j]) * static_cast<double>(gain->data[j]);
                        dx[j] += static_cast<S>((h - mean_h - static_cast<double>(y[j]) * mean_hy) * invstd[i]);
                    }
                }
            }
        };
    }
    return out;
}

// Per-row log-probability of a target column under log-softmax(logits / temperature).
// One code path serves next-token cross-entropy and RL log-prob recomputation.
template <typename S>
TensorPtr<S> token_logprobs(const TensorPtr<S>& logits, const std::vector<int>& targets, S temperature = S(1)) {
    const int m = logits->rows(), n = logits->cols();
    if (static_cast<int>(targets.size()) != m) throw DimensionError("token_logprobs: one target per row required");
    if (!(temperature > S(0))) throw DomainError("token_logprobs: temperature must be positive");
    for (int t : targets) {
        if (t < 0 || t >= n) throw InputError("token_logprobs: target id out of range");
    }
    auto out = make_node<S>({m}, {logits});
    std::vector<double> lse(m);
    const double invt = 1.0 / static_cast<double>(temperature);
    for (int i = 0; i < m; ++i) {
        const S* row = logits->data.data() + static_cast<int64_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]) * invt);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) * invt - mx);
        lse[i] = mx + std::log(denom);
        out->data[i] = static_cast<S>(static_cast<double>(row[targets[i]]) * invt - lse[i]);
    }
    check_finite(*out, "token_logprobs");
    if (out->requires_grad) {
        out->backward_fn = [logits, targets, lse, m, n, invt](Tensor<S>& self) {
            logits->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const S* row = logits->data.data() + static_cast<int64_t>(i) * n;
                S* drow = logits->grad.data() + static_cast<int64_t>(i) * n;
                const double g = static_cast<double>(self.grad[i]);
                if (g == 0.0) continue;
                for (int j = 0; j < n; ++j) {
                    const double p = std::exp(static_cast<double>(row[j]) * invt - lse[i]);
                    const double oneh = (j == targets[i]) ? 1.0 : 0.0;
                    drow[j] += static_cast<S>(g * invt * (oneh - p));
                }
            }
        };
    }
    return out;
}

template <typename S>
void backward(const TensorPtr<S>& root) {
    if (root->numel() != 1) throw DimensionError("backward: root must be scalar");
    if (!root->requires_grad) return;
    // iterative post-order topo sort
    std::vector<TensorPtr<S>> topo;
    std::unordered_set<const Tensor<S>*> visited;
    std::vector<std::pair<TensorPtr<S>, size_t>> stack;
    stack.push_back({root, 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            auto& p = node->parents[idx++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        auto& node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace ag

// Numerically stable softmax with temperature (plain vector form, used by
// samplers; the graph version lives in ag::causal_softmax_rows).
template <typename S>
std::vector<S> softmax(const std::vector<S>& logits, S temperature) {
    if (!(temperature > S(0))) throw DomainError("softmax: temperature must be positive");
    for (S v : logits) {
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("softmax: non-finite logit");
    }
    const double invt = 1.0 / static_cast<double>(temperature);
    double mx = -std::numeric_limits<double>::infinity();
    for (S v : logits) mx = std::max(mx, static_cast<double>(v) * invt);
    std::vector<S> out(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) denom += std::exp(static_cast<double>(logits[i]) * invt - mx);
    for (size_t i = 0; i < logits.size(); ++i)
        out[i] = static_cast<S>(std::exp(static_cast<double>(logits[i]) * invt - mx) / denom);
    return out;
}

}  // namespace recap
