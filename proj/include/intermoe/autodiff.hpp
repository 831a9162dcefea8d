#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "intermoe/tensor.hpp"

namespace intermoe {

// ----------------------------- grad mode -----------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard: ops executed under it record no tape (pure forward).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ----------------------------- tape node -----------------------------

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::string op;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
    }
};

// Handle to a tape node. Copy is cheap (shared ownership); the tape for one
// training step is the DAG reachable from that step's loss and is freed when
// the loss handle goes out of scope. Parameter leaves outlive the tape.
template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->op = "leaf";
        return Var(std::move(n));
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return static_cast<bool>(n_); }
    Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<Node<T>>& handle() const { return n_; }

    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& mutable_value() { return n_->value; }
    const std::vector<int>& shape() const { return n_->value.shape; }
    int64_t numel() const { return n_->value.numel(); }
    bool requires_grad() const { return n_->requires_grad; }

    const Tensor<T>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (!n_->grad.data.empty()) std::fill(n_->grad.data.begin(), n_->grad.data.end(), T(0));
    }
    void set_value(Tensor<T> v) {
        if (v.shape != n_->value.shape)
            throw ShapeError("set_value: " + shape_to_string(n_->value.shape) + " -> " +
                             shape_to_string(v.shape));
        n_->value = std::move(v);
    }

  private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
    for (T v : t.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericsError(std::string(op) + ": non-finite value in output of shape " +
                                shape_to_string(t.shape));
    }
}

template <typename T>
inline Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
                      std::function<void(Node<T>&)> bw) {
    check_finite(op, value);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    if (grad_mode_flag()) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.handle());
        n->backward_fn = std::move(bw);
    }
    return Var<T>(std::move(n));
}

// Fixed-lane dot product: deterministic reduction order for a given build.
template <typename T>
inline T dot8(const T* a, const T* b, int n) {
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        acc[0] += a[i + 0] * b[i + 0];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        acc[4] += a[i + 4] * b[i + 4];
        acc[5] += a[i + 5] * b[i + 5];
        acc[6] += a[i + 6] * b[i + 6];
        acc[7] += a[i + 7] * b[i + 7];
    }
    for (int j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// out[n...] += s * x[n...]
template <typename T>
inline void axpy(T* out, const T* x, T s, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) out[i] += s * x[i];
}

// Four outputs share one streamed x row (quarter the x traffic of four axpy
// calls); per-cell accumulation order matches the sequential form.
template <typename T>
inline void axpy4(T* o0, T* o1, T* o2, T* o3, const T* x, T s0, T s1, T s2, T s3, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) {
        const T xi = x[i];
        o0[i] += s0 * xi;
        o1[i] += s1 * xi;
        o2[i] += s2 * xi;
        o3[i] += s3 * xi;
    }
}

// One output accumulates four scaled rows in a single pass.
template <typename T>
inline void axpy_rows4(T* out, const T* x0, const T* x1, const T* x2, const T* x3, T s0, T s1,
                       T s2, T s3, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) out[i] += s0 * x0[i] + s1 * x1[i] + s2 * x2[i] + s3 * x3[i];
}

}  // namespace detail

// ----------------------------- elementwise -----------------------------

// add/sub/mul broadcast rule: b's shape must equal a's shape or be a suffix of
// it (b is then tiled over a's leading dims).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!is_suffix_shape(av.shape, bv.shape))
        throw ShapeError("add: " + shape_to_string(av.shape) + " vs " + shape_to_string(bv.shape));
    const int64_t bn = bv.numel();
    Tensor<T> out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i % bn];
    return detail::make_op<T>("add", std::move(out), {a, b}, [bn](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pb.grad[i % bn] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!is_suffix_shape(av.shape, bv.shape))
        throw ShapeError("sub: " + shape_to_string(av.shape) + " vs " + shape_to_string(bv.shape));
    const int64_t bn = bv.numel();
    Tensor<T> out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i % bn];
    return detail::make_op<T>("sub", std::move(out), {a, b}, [bn](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pb.grad[i % bn] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!is_suffix_shape(av.shape, bv.shape))
        throw ShapeError("mul: " + shape_to_string(av.shape) + " vs " + shape_to_string(bv.shape));
    const int64_t bn = bv.numel();
    Tensor<T> out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i % bn];
    Tensor<T> asaved = av, bsaved = bv;
    return detail::make_op<T>(
        "mul", std::move(out), {a, b},
        [bn, asaved = std::move(asaved), bsaved = std::move(bsaved)](Node<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (int64_t i = 0; i < n.grad.numel(); ++i)
                    pa.grad[i] += n.grad[i] * bsaved[i % bn];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int64_t i = 0; i < n.grad.numel(); ++i)
                    pb.grad[i % bn] += n.grad[i] * asaved[i];
            }
        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= s;
    return detail::make_op<T>("scale", std::move(out), {a}, [s](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += s * n.grad[i];
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v += s;
    return detail::make_op<T>("add_scalar", std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += n.grad[i];
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

// ----------------------------- nonlinearities -----------------------------

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    Tensor<T> y = out;
    return detail::make_op<T>("sigmoid", std::move(out), {a}, [y = std::move(y)](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            p.grad[i] += n.grad[i] * y[i] * (T(1) - y[i]);
    });
}

// tanh-approximation GELU; smooth everywhere so finite-difference checks hold.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    Tensor<T> out = a.value();
    const Tensor<T>& x = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T xi = x[i];
        out[i] = T(0.5) * xi * (T(1) + std::tanh(c * (xi + k * xi * xi * xi)));
    }
    Tensor<T> xsaved = x;
    return detail::make_op<T>("gelu", std::move(out), {a},
                              [c, k, xsaved = std::move(xsaved)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t i = 0; i < n.grad.numel(); ++i) {
                                      T xi = xsaved[i];
                                      T u = c * (xi + k * xi * xi * xi);
                                      T t = std::tanh(u);
                                      T du = c * (T(1) + T(3) * k * xi * xi);
                                      T d = T(0.5) * (T(1) + t) + T(0.5) * xi * (T(1) - t * t) * du;
                                      p.grad[i] += n.grad[i] * d;
                                  }
                              });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.value();
    const Tensor<T>& x = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T s = T(1) / (T(1) + std::exp(-x[i]));
        out[i] = x[i] * s;
    }
    Tensor<T> xsaved = x;
    return detail::make_op<T>("silu", std::move(out), {a},
                              [xsaved = std::move(xsaved)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t i = 0; i < n.grad.numel(); ++i) {
                                      T s = T(1) / (T(1) + std::exp(-xsaved[i]));
                                      p.grad[i] += n.grad[i] * s * (T(1) + xsaved[i] * (T(1) - s));
                                  }
                              });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::exp(v);
    Tensor<T> y = out;
    return detail::make_op<T>("exp", std::move(out), {a}, [y = std::move(y)](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += n.grad[i] * y[i];
    });
}

// |x| with subgradient 0 at exactly 0.
template <typename T>
Var<T> abs_(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::abs(v);
    Tensor<T> xsaved = a.value();
    return detail::make_op<T>("abs", std::move(out), {a},
                              [xsaved = std::move(xsaved)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t i = 0; i < n.grad.numel(); ++i) {
                                      T x = xsaved[i];
                                      T s = (x > T(0)) ? T(1) : (x < T(0) ? T(-1) : T(0));
                                      p.grad[i] += n.grad[i] * s;
                                  }
                              });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return mul(a, a);
}

// ----------------------------- matmul / transpose -----------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: " + shape_to_string(av.shape) + " vs " +
                         shape_to_string(bv.shape));
    const int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor<T> out = Tensor<T>::zeros({M, N});
    // k-ascending accumulation per output element; SIMD across independent n.
    // Rows are processed four at a time so each pass streams B only once.
    const T* bd = bv.data.data();
    int m = 0;
    for (; m + 4 <= M; m += 4) {
        const T* ar = av.data.data() + static_cast<size_t>(m) * K;
        T* orow = out.data.data() + static_cast<size_t>(m) * N;
        for (int kk = 0; kk < K; ++kk)
            detail::axpy4(orow, orow + N, orow + 2 * N, orow + 3 * N,
                          bd + static_cast<size_t>(kk) * N, ar[kk], ar[K + kk], ar[2 * K + kk],
                          ar[3 * K + kk], N);
    }
    for (; m < M; ++m) {
        const T* arow = av.data.data() + static_cast<size_t>(m) * K;
        T* orow = out.data.data() + static_cast<size_t>(m) * N;
        for (int kk = 0; kk < K; ++kk)
            detail::axpy(orow, bd + static_cast<size_t>(kk) * N, arow[kk], N);
    }
    // Backward reads the operand values through the tape (parents are immutable
    // until the tape is consumed), so nothing is copied here.
    return detail::make_op<T>(
        "matmul", std::move(out), {a, b}, [M, K, N](Node<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                // dA = dY Bᵀ as blocked axpy over Bᵀ rows (single horizontal-free pass)
                Tensor<T> bt = Tensor<T>::zeros({N, K});
                {
                    const T* bd = pb.value.data.data();
                    for (int kk = 0; kk < K; ++kk)
                        for (int nn = 0; nn < N; ++nn)
                            bt.data[static_cast<size_t>(nn) * K + kk] =
                                bd[static_cast<size_t>(kk) * N + nn];
                }
                const T* btd = bt.data.data();
                int m = 0;
                for (; m + 4 <= M; m += 4) {
                    const T* gr = n.grad.data.data() + static_cast<size_t>(m) * N;
                    T* gar = pa.grad.data.data() + static_cast<size_t>(m) * K;
                    for (int nn = 0; nn < N; ++nn)
                        detail::axpy4(gar, gar + K, gar + 2 * K, gar + 3 * K,
                                      btd + static_cast<size_t>(nn) * K, gr[nn], gr[N + nn],
                                      gr[2 * N + nn], gr[3 * N + nn], K);
                }
                for (; m < M; ++m) {
                    const T* grow = n.grad.data.data() + static_cast<size_t>(m) * N;
                    T* garow = pa.grad.data.data() + static_cast<size_t>(m) * K;
                    for (int nn = 0; nn < N; ++nn)
                        detail::axpy(garow, btd + static_cast<size_t>(nn) * K, grow[nn], K);
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                // dB[k,:] += A[m,k] * dY[m,:]; four dY rows folded per pass
                const T* ad = pa.value.data.data();
                int m = 0;
                for (; m + 4 <= M; m += 4) {
                    const T* gr = n.grad.data.data() + static_cast<size_t>(m) * N;
                    const T* ar = ad + static_cast<size_t>(m) * K;
                    for (int kk = 0; kk < K; ++kk)
                        detail::axpy_rows4(pb.grad.data.data() + static_cast<size_t>(kk) * N, gr,
                                           gr + N, gr + 2 * N, gr + 3 * N, ar[kk], ar[K + kk],
                                           ar[2 * K + kk], ar[3 * K + kk], N);
                }
                for (; m < M; ++m) {
                    const T* grow = n.grad.data.data() + static_cast<size_t>(m) * N;
                    const T* arow = ad + static_cast<size_t>(m) * K;
                    for (int kk = 0; kk < K; ++kk)
                        detail::axpy(pb.grad.data.data() + static_cast<size_t>(kk) * N, grow,
                                     arow[kk], N);
                }
            }
        });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const auto& av = a.value();
    if (av.ndim() != 2) throw ShapeError("transpose: need 2D, got " + shape_to_string(av.shape));
    const int R = av.dim(0), C = av.dim(1);
    Tensor<T> out = Tensor<T>::zeros({C, R});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.at(c, r) = av.at(r, c);
    return detail::make_op<T>("transpose", std::move(out), {a}, [R, C](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int r = 0; r < R; ++r) p.grad.at(r, c) += n.grad.at(c, r);
    });
}

// ----------------------------- reductions / shape -----------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T s = T(0);
    for (T v : a.value().data) s += v;
    return detail::make_op<T>("sum", Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (auto& g : p.grad.data) g += n.grad[0];
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    const int64_t n = a.numel();
    if (n == 0) throw ShapeError("mean: empty tensor");
    T s = T(0);
    for (T v : a.value().data) s += v;
    s /= static_cast<T>(n);
    return detail::make_op<T>("mean", Tensor<T>::scalar(s), {a}, [n](Node<T>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = nd.grad[0] / static_cast<T>(n);
        for (auto& gv : p.grad.data) gv += g;
    });
}

// Row sums of a 2D tensor: [R x C] -> [R].
template <typename T>
Var<T> sum_lastdim(const Var<T>& a) {
    const auto& av = a.value();
    if (av.ndim() != 2) throw ShapeError("sum_lastdim: need 2D, got " + shape_to_string(av.shape));
    const int R = av.dim(0), C = av.dim(1);
    Tensor<T> out = Tensor<T>::zeros({R});
    for (int r = 0; r < R; ++r) {
        T s = T(0);
        for (int c = 0; c < C; ++c) s += av.at(r, c);
        out[r] = s;
    }
    return detail::make_op<T>("sum_lastdim", std::move(out), {a}, [R, C](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) p.grad.at(r, c) += n.grad[r];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a.value().reshaped(shape);
    return detail::make_op<T>("reshape", std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += n.grad[i];
    });
}

// ----------------------------- softmax / layer norm -----------------------------

// Softmax over the last dim, numerically stabilized by row-max subtraction.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
    const auto& av = a.value();
    if (av.ndim() < 1) throw ShapeError("softmax_lastdim: need >=1D");
    const int C = av.shape.back();
    const int64_t rows = av.numel() / C;
    Tensor<T> out = av;
    for (int64_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * C;
        T mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T s = T(0);
        for (int c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - mx);
            s += row[c];
        }
        for (int c = 0; c < C; ++c) row[c] /= s;
    }
    Tensor<T> y = out;
    return detail::make_op<T>("softmax_lastdim", std::move(out), {a},
                              [C, rows, y = std::move(y)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t r = 0; r < rows; ++r) {
                                      const T* yr = y.data.data() + r * C;
                                      const T* gr = n.grad.data.data() + r * C;
                                      T dot = T(0);
                                      for (int c = 0; c < C; ++c) dot += gr[c] * yr[c];
                                      T* pr = p.grad.data.data() + r * C;
                                      for (int c = 0; c < C; ++c) pr[c] += yr[c] * (gr[c] - dot);
                                  }
                              });
}

// Layer norm over the last dim, no affine (modulation is applied separately).
template <typename T>
Var<T> layer_norm_lastdim(const Var<T>& a, T eps = static_cast<T>(1e-5)) {
    const auto& av = a.value();
    if (av.ndim() < 1) throw ShapeError("layer_norm: need >=1D");
    const int C = av.shape.back();
    const int64_t rows = av.numel() / C;
    Tensor<T> out = av;
    Tensor<T> inv_std = Tensor<T>::zeros({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * C;
        T mu = T(0);
        for (int c = 0; c < C; ++c) mu += row[c];
        mu /= static_cast<T>(C);
        T var = T(0);
        for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<T>(C);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int c = 0; c < C; ++c) row[c] = (row[c] - mu) * is;
    }
    Tensor<T> y = out;
    return detail::make_op<T>(
        "layer_norm", std::move(out), {a},
        [C, rows, y = std::move(y), inv_std = std::move(inv_std)](Node<T>& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y.data.data() + r * C;
                const T* gr = n.grad.data.data() + r * C;
                T gmean = T(0), gymean = T(0);
                for (int c = 0; c < C; ++c) {
                    gmean += gr[c];
                    gymean += gr[c] * yr[c];
                }
                gmean /= static_cast<T>(C);
                gymean /= static_cast<T>(C);
                T* pr = p.grad.data.data() + r * C;
                const T is = inv_std[r];
                for (int c = 0; c < C; ++c) pr[c] += is * (gr[c] - gmean - yr[c] * gymean);
            }
        });
}

// ----------------------------- conv1d -----------------------------

// 1D convolution over time. x: [Tin x Cin], w: [k x Cin x Cout], b: [Cout]
// (pass an undefined Var for no bias). `left_pad` zero frames are virtually
// prepended; output frame t taps inputs at stride*t - left_pad + i*dilation.
// With n_series > 1, x stacks that many independent series of equal length
// ([series][time] row order) and the convolution is applied to each.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int dilation,
              int left_pad, int n_series = 1) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.ndim() != 2 || wv.ndim() != 3)
        throw ShapeError("conv1d: x " + shape_to_string(xv.shape) + ", w " +
                         shape_to_string(wv.shape));
    if (n_series < 1 || xv.dim(0) % n_series != 0)
        throw ShapeError("conv1d: " + std::to_string(xv.dim(0)) + " rows not divisible into " +
                         std::to_string(n_series) + " series");
    const int Tin = xv.dim(0) / n_series, Cin = xv.dim(1);
    const int k = wv.dim(0), Cout = wv.dim(2);
    if (wv.dim(1) != Cin)
        throw ShapeError("conv1d: x " + shape_to_string(xv.shape) + " vs w " +
                         shape_to_string(wv.shape));
    // left_pad may be negative: the first window then starts inside the input.
    if (stride < 1 || dilation < 1 || k < 1)
        throw ShapeError("conv1d: invalid stride/dilation/kernel");
    const bool has_bias = b.defined();
    if (has_bias && (b.value().ndim() != 1 || b.value().dim(0) != Cout))
        throw ShapeError("conv1d: bias " + shape_to_string(b.value().shape));
    const int span = (k - 1) * dilation + 1;
    const int tout = (Tin + left_pad - span) / stride + 1;
    if (tout < 1) throw ShapeError("conv1d: sequence too short (Tin=" + std::to_string(Tin) + ")");

    Tensor<T> out = Tensor<T>::zeros({tout * n_series, Cout});
    for (int s = 0; s < n_series; ++s) {
        const T* xbase = xv.data.data() + static_cast<size_t>(s) * Tin * Cin;
        T* obase = out.data.data() + static_cast<size_t>(s) * tout * Cout;
        for (int t = 0; t < tout; ++t) {
            T* orow = obase + static_cast<size_t>(t) * Cout;
            if (has_bias) {
                const auto& bvv = b.value();
                for (int co = 0; co < Cout; ++co) orow[co] = bvv[co];
            }
            for (int i = 0; i < k; ++i) {
                const int tin = stride * t - left_pad + i * dilation;
                if (tin < 0 || tin >= Tin) continue;  // zero padding
                const T* xrow = xbase + static_cast<size_t>(tin) * Cin;
                const T* wslab = wv.data.data() + static_cast<size_t>(i) * Cin * Cout;
                for (int ci = 0; ci < Cin; ++ci)
                    detail::axpy(orow, wslab + static_cast<size_t>(ci) * Cout, xrow[ci], Cout);
            }
        }
    }
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    Tensor<T> xsaved = xv, wsaved = wv;
    return detail::make_op<T>(
        "conv1d", std::move(out), std::move(parents),
        [Tin, Cin, k, Cout, stride, dilation, left_pad, tout, has_bias, n_series,
         xsaved = std::move(xsaved), wsaved = std::move(wsaved)](Node<T>& n) {
            auto& px = *n.parents[0];
            auto& pw = *n.parents[1];
            Node<T>* pb = has_bias ? n.parents[2].get() : nullptr;
            if (px.requires_grad) px.ensure_grad();
            if (pw.requires_grad) pw.ensure_grad();
            if (pb && pb->requires_grad) pb->ensure_grad();
            for (int s = 0; s < n_series; ++s) {
                const T* xbase = xsaved.data.data() + static_cast<size_t>(s) * Tin * Cin;
                const T* gbase = n.grad.data.data() + static_cast<size_t>(s) * tout * Cout;
                for (int t = 0; t < tout; ++t) {
                    const T* grow = gbase + static_cast<size_t>(t) * Cout;
                    if (pb && pb->requires_grad) {
                        for (int co = 0; co < Cout; ++co) pb->grad[co] += grow[co];
                    }
                    for (int i = 0; i < k; ++i) {
                        const int tin = stride * t - left_pad + i * dilation;
                        if (tin < 0 || tin >= Tin) continue;
                        const T* xrow = xbase + static_cast<size_t>(tin) * Cin;
                        const T* wslab = wsaved.data.data() + static_cast<size_t>(i) * Cin * Cout;
                        if (px.requires_grad) {
                            T* gxrow = px.grad.data.data() +
                                       (static_cast<size_t>(s) * Tin + tin) * Cin;
                            for (int ci = 0; ci < Cin; ++ci)
                                gxrow[ci] +=
                                    detail::dot8(grow, wslab + static_cast<size_t>(ci) * Cout, Cout);
                        }
                        if (pw.requires_grad) {
                            T* gwslab = pw.grad.data.data() + static_cast<size_t>(i) * Cin * Cout;
                            for (int ci = 0; ci < Cin; ++ci)
                                detail::axpy(gwslab + static_cast<size_t>(ci) * Cout, grow, xrow[ci],
                                             Cout);
                        }
                    }
                }
            }
        });
}

// ----------------------------- temporal resampling -----------------------------

// Average adjacent frame pairs: [T x C] -> [T/2 x C]. T must be even.
template <typename T>
Var<T> avg_pool_pairs(const Var<T>& x) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("avg_pool_pairs: need 2D");
    const int Tin = xv.dim(0), C = xv.dim(1);
    if (Tin % 2 != 0)
        throw ShapeError("avg_pool_pairs: odd sequence length " + std::to_string(Tin));
    Tensor<T> out = Tensor<T>::zeros({Tin / 2, C});
    for (int t = 0; t < Tin / 2; ++t)
        for (int c = 0; c < C; ++c) out.at(t, c) = (xv.at(2 * t, c) + xv.at(2 * t + 1, c)) * T(0.5);
    return detail::make_op<T>("avg_pool_pairs", std::move(out), {x}, [Tin, C](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int t = 0; t < Tin / 2; ++t)
            for (int c = 0; c < C; ++c) {
                const T g = n.grad.at(t, c) * T(0.5);
                p.grad.at(2 * t, c) += g;
                p.grad.at(2 * t + 1, c) += g;
            }
    });
}

// Length-doubling linear upsample, midpoint-preserving: out[2t], out[2t+1] sit
// at positions t -/+ 1/4 of the local linear trend, so averaging adjacent
// output pairs reproduces the input exactly. n_series stacks independent
// sequences; slopes never cross a series boundary.
template <typename T>
Var<T> interpolate_linear_x2(const Var<T>& x, int n_series = 1) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("interpolate_linear: need 2D");
    if (n_series < 1 || xv.dim(0) % n_series != 0)
        throw ShapeError("interpolate_linear: rows not divisible into " +
                         std::to_string(n_series) + " series");
    const int Tin = xv.dim(0) / n_series, C = xv.dim(1);
    Tensor<T> out = Tensor<T>::zeros({2 * Tin * n_series, C});
    for (int s = 0; s < n_series; ++s) {
        const int ib = s * Tin, ob = s * 2 * Tin;
        for (int t = 0; t < Tin; ++t) {
            for (int c = 0; c < C; ++c) {
                T sl;
                if (Tin == 1) sl = T(0);
                else if (t == 0) sl = xv.at(ib + 1, c) - xv.at(ib, c);
                else if (t == Tin - 1) sl = xv.at(ib + Tin - 1, c) - xv.at(ib + Tin - 2, c);
                else sl = (xv.at(ib + t + 1, c) - xv.at(ib + t - 1, c)) * T(0.5);
                out.at(ob + 2 * t, c) = xv.at(ib + t, c) - sl * T(0.25);
                out.at(ob + 2 * t + 1, c) = xv.at(ib + t, c) + sl * T(0.25);
            }
        }
    }
    return detail::make_op<T>(
        "interpolate_linear", std::move(out), {x}, [Tin, C, n_series](Node<T>& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int s = 0; s < n_series; ++s) {
                const int ib = s * Tin, ob = s * 2 * Tin;
                for (int t = 0; t < Tin; ++t) {
                    for (int c = 0; c < C; ++c) {
                        const T g0 = n.grad.at(ob + 2 * t, c);
                        const T g1 = n.grad.at(ob + 2 * t + 1, c);
                        p.grad.at(ib + t, c) += g0 + g1;
                        const T gs = (g1 - g0) * T(0.25);  // d out / d slope
                        if (Tin == 1) continue;
                        if (t == 0) {
                            p.grad.at(ib + 1, c) += gs;
                            p.grad.at(ib, c) -= gs;
                        } else if (t == Tin - 1) {
                            p.grad.at(ib + Tin - 1, c) += gs;
                            p.grad.at(ib + Tin - 2, c) -= gs;
                        } else {
                            p.grad.at(ib + t + 1, c) += gs * T(0.5);
                            p.grad.at(ib + t - 1, c) -= gs * T(0.5);
                        }
                    }
                }
            }
        });
}

// ----------------------------- gather / scatter / slicing -----------------------------

template <typename T>
Var<T> take_rows(const Var<T>& x, std::vector<int> idx) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("take_rows: need 2D");
    const int R = xv.dim(0), C = xv.dim(1);
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), C});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= R)
            throw ShapeError("take_rows: index " + std::to_string(idx[i]) + " out of [0," +
                             std::to_string(R) + ")");
        std::copy_n(xv.data.data() + static_cast<size_t>(idx[i]) * C, C,
                    out.data.data() + i * C);
    }
    return detail::make_op<T>("take_rows", std::move(out), {x},
                              [C, idx = std::move(idx)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t i = 0; i < idx.size(); ++i)
                                      detail::axpy(p.grad.data.data() + static_cast<size_t>(idx[i]) * C,
                                                   n.grad.data.data() + i * C, T(1), C);
                              });
}

// Scatter-add rows of x into a zero [n_rows x C] tensor at positions idx.
template <typename T>
Var<T> scatter_rows(int n_rows, const Var<T>& x, std::vector<int> idx) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("scatter_rows: need 2D");
    if (static_cast<size_t>(xv.dim(0)) != idx.size())
        throw ShapeError("scatter_rows: " + std::to_string(xv.dim(0)) + " rows vs " +
                         std::to_string(idx.size()) + " indices");
    const int C = xv.dim(1);
    Tensor<T> out = Tensor<T>::zeros({n_rows, C});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n_rows)
            throw ShapeError("scatter_rows: index " + std::to_string(idx[i]) + " out of [0," +
                             std::to_string(n_rows) + ")");
        detail::axpy(out.data.data() + static_cast<size_t>(idx[i]) * C, xv.data.data() + i * C,
                     T(1), C);
    }
    return detail::make_op<T>("scatter_rows", std::move(out), {x},
                              [C, idx = std::move(idx)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t i = 0; i < idx.size(); ++i)
                                      detail::axpy(p.grad.data.data() + i * C,
                                                   n.grad.data.data() + static_cast<size_t>(idx[i]) * C,
                                                   T(1), C);
                              });
}

// Gather x[rows[i], col] into a vector [n].
template <typename T>
Var<T> take_col_rows(const Var<T>& x, int col, std::vector<int> rows) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("take_col_rows: need 2D");
    const int R = xv.dim(0), C = xv.dim(1);
    if (col < 0 || col >= C) throw ShapeError("take_col_rows: bad column");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(rows.size())});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= R) throw ShapeError("take_col_rows: bad row index");
        out[static_cast<int64_t>(i)] = xv.at(rows[i], col);
    }
    return detail::make_op<T>("take_col_rows", std::move(out), {x},
                              [col, rows = std::move(rows)](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t i = 0; i < rows.size(); ++i)
                                      p.grad.at(rows[i], col) += n.grad[static_cast<int64_t>(i)];
                              });
}

// Row-scale: out[i,:] = x[i,:] * v[i]. v: [n] (or [n x 1]).
template <typename T>
Var<T> mul_colvec(const Var<T>& x, const Var<T>& v) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    if (xv.ndim() != 2 || vv.numel() != xv.dim(0))
        throw ShapeError("mul_colvec: " + shape_to_string(xv.shape) + " vs " +
                         shape_to_string(vv.shape));
    const int R = xv.dim(0), C = xv.dim(1);
    Tensor<T> out = xv;
    for (int r = 0; r < R; ++r) {
        T* row = out.data.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) row[c] *= vv[r];
    }
    Tensor<T> xsaved = xv, vsaved = vv;
    return detail::make_op<T>(
        "mul_colvec", std::move(out), {x, v},
        [R, C, xsaved = std::move(xsaved), vsaved = std::move(vsaved)](Node<T>& n) {
            auto& px = *n.parents[0];
            auto& pv = *n.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (int r = 0; r < R; ++r)
                    detail::axpy(px.grad.data.data() + static_cast<size_t>(r) * C,
                                 n.grad.data.data() + static_cast<size_t>(r) * C, vsaved[r], C);
            }
            if (pv.requires_grad) {
                pv.ensure_grad();
                for (int r = 0; r < R; ++r)
                    pv.grad[r] += detail::dot8(n.grad.data.data() + static_cast<size_t>(r) * C,
                                               xsaved.data.data() + static_cast<size_t>(r) * C, C);
            }
        });
}

// Row-divide: out[i,:] = x[i,:] / d[i]. d: [n].
template <typename T>
Var<T> div_rows(const Var<T>& x, const Var<T>& d) {
    const auto& xv = x.value();
    const auto& dv = d.value();
    if (xv.ndim() != 2 || dv.numel() != xv.dim(0))
        throw ShapeError("div_rows: " + shape_to_string(xv.shape) + " vs " +
                         shape_to_string(dv.shape));
    const int R = xv.dim(0), C = xv.dim(1);
    Tensor<T> out = xv;
    for (int r = 0; r < R; ++r) {
        // true division, not reciprocal-multiply: x/x must come out exactly 1
        T* row = out.data.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) row[c] /= dv[r];
    }
    Tensor<T> y = out, dsaved = dv;
    return detail::make_op<T>(
        "div_rows", std::move(out), {x, d},
        [R, C, y = std::move(y), dsaved = std::move(dsaved)](Node<T>& n) {
            auto& px = *n.parents[0];
            auto& pd = *n.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (int r = 0; r < R; ++r)
                    detail::axpy(px.grad.data.data() + static_cast<size_t>(r) * C,
                                 n.grad.data.data() + static_cast<size_t>(r) * C, T(1) / dsaved[r], C);
            }
            if (pd.requires_grad) {
                pd.ensure_grad();
                for (int r = 0; r < R; ++r) {
                    T dot = detail::dot8(n.grad.data.data() + static_cast<size_t>(r) * C,
                                         y.data.data() + static_cast<size_t>(r) * C, C);
                    pd.grad[r] -= dot / dsaved[r];
                }
            }
        });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, int start, int len) {
    const auto& xv = x.value();
    if (xv.ndim() != 2) throw ShapeError("slice_rows: need 2D");
    const int R = xv.dim(0), C = xv.dim(1);
    if (start < 0 || len < 0 || start + len > R)
        throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + std::to_string(R) + " rows");
    Tensor<T> out({len, C}, std::vector<T>(xv.data.begin() + static_cast<size_t>(start) * C,
                                           xv.data.begin() + static_cast<size_t>(start + len) * C));
    return detail::make_op<T>("slice_rows", std::move(out), {x}, [start, len, C](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        detail::axpy(p.grad.data.data() + static_cast<size_t>(start) * C, n.grad.data.data(),
                     T(1), static_cast<int>(static_cast<size_t>(len) * C));
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: no inputs");
    const int C = xs[0].value().dim(1);
    int rows = 0;
    for (const auto& x : xs) {
        if (x.value().ndim() != 2 || x.value().dim(1) != C)
            throw ShapeError("concat_rows: " + shape_to_string(xs[0].value().shape) + " vs " +
                             shape_to_string(x.value().shape));
        rows += x.value().dim(0);
    }
    Tensor<T> out = Tensor<T>::zeros({rows, C});
    std::vector<int> lens;
    int off = 0;
    for (const auto& x : xs) {
        const auto& xv = x.value();
        std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + static_cast<size_t>(off) * C);
        lens.push_back(xv.dim(0));
        off += xv.dim(0);
    }
    return detail::make_op<T>("concat_rows", std::move(out), xs,
                              [C, lens = std::move(lens)](Node<T>& n) {
                                  int start = 0;
                                  for (size_t i = 0; i < n.parents.size(); ++i) {
                                      auto& p = *n.parents[i];
                                      if (p.requires_grad) {
                                          p.ensure_grad();
                                          detail::axpy(p.grad.data.data(),
                                                       n.grad.data.data() + static_cast<size_t>(start) * C,
                                                       T(1), static_cast<int>(static_cast<size_t>(lens[i]) * C));
                                      }
                                      start += lens[i];
                                  }
                              });
}

// ----------------------------- fused attention -----------------------------

// Multi-head scaled dot-product attention. q: [Tq x D], k,v: [Tk x D],
// D divisible by n_heads. Returns [Tq x D] (heads concatenated). With
// n_series > 1, q/k/v stack that many independent sequences and attention is
// confined within each.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int n_heads,
                 int n_series = 1) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2 || qv.dim(1) != kv.dim(1) ||
        kv.shape != vv.shape)
        throw ShapeError("attention: q " + shape_to_string(qv.shape) + ", k " +
                         shape_to_string(kv.shape) + ", v " + shape_to_string(vv.shape));
    if (n_series < 1 || qv.dim(0) % n_series != 0 || kv.dim(0) % n_series != 0)
        throw ShapeError("attention: rows not divisible into " + std::to_string(n_series) +
                         " series");
    const int Tq = qv.dim(0) / n_series, Tk = kv.dim(0) / n_series, D = qv.dim(1);
    if (D % n_heads != 0) throw ShapeError("attention: width not divisible by heads");
    const int dh = D / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> out = Tensor<T>::zeros({Tq * n_series, D});
    Tensor<T> probs = Tensor<T>::zeros({n_series * n_heads * Tq, Tk});
    for (int s = 0; s < n_series; ++s) {
        const T* qb = qv.data.data() + static_cast<size_t>(s) * Tq * D;
        const T* kb = kv.data.data() + static_cast<size_t>(s) * Tk * D;
        const T* vb = vv.data.data() + static_cast<size_t>(s) * Tk * D;
        T* ob = out.data.data() + static_cast<size_t>(s) * Tq * D;
        T* pb = probs.data.data() + static_cast<size_t>(s) * n_heads * Tq * Tk;
        for (int h = 0; h < n_heads; ++h) {
            const int hoff = h * dh;
            for (int tq = 0; tq < Tq; ++tq) {
                T* prow = pb + (static_cast<size_t>(h) * Tq + tq) * Tk;
                const T* qrow = qb + static_cast<size_t>(tq) * D + hoff;
                T mx = -std::numeric_limits<T>::infinity();
                for (int tk = 0; tk < Tk; ++tk) {
                    T sc = detail::dot8(qrow, kb + static_cast<size_t>(tk) * D + hoff, dh) * inv_sqrt;
                    prow[tk] = sc;
                    mx = std::max(mx, sc);
                }
                T sum = T(0);
                for (int tk = 0; tk < Tk; ++tk) {
                    prow[tk] = std::exp(prow[tk] - mx);
                    sum += prow[tk];
                }
                T* orow = ob + static_cast<size_t>(tq) * D + hoff;
                for (int tk = 0; tk < Tk; ++tk) {
                    prow[tk] /= sum;
                    detail::axpy(orow, vb + static_cast<size_t>(tk) * D + hoff, prow[tk], dh);
                }
            }
        }
    }
    Tensor<T> qsaved = qv, ksaved = kv, vsaved = vv, psaved = probs;
    return detail::make_op<T>(
        "attention", std::move(out), {q, k, v},
        [Tq, Tk, D, n_heads, dh, n_series, inv_sqrt, qsaved = std::move(qsaved),
         ksaved = std::move(ksaved), vsaved = std::move(vsaved),
         psaved = std::move(psaved)](Node<T>& n) {
            auto& pq = *n.parents[0];
            auto& pk = *n.parents[1];
            auto& pv = *n.parents[2];
            if (pq.requires_grad) pq.ensure_grad();
            if (pk.requires_grad) pk.ensure_grad();
            if (pv.requires_grad) pv.ensure_grad();
            std::vector<T> dp(static_cast<size_t>(Tk));
            for (int s = 0; s < n_series; ++s) {
                const size_t qoff = static_cast<size_t>(s) * Tq * D;
                const size_t koff = static_cast<size_t>(s) * Tk * D;
                for (int h = 0; h < n_heads; ++h) {
                    const int hoff = h * dh;
                    for (int tq = 0; tq < Tq; ++tq) {
                        const T* prow = psaved.data.data() +
                                        (static_cast<size_t>(s) * n_heads * Tq +
                                         static_cast<size_t>(h) * Tq + tq) * Tk;
                        const T* grow = n.grad.data.data() + qoff + static_cast<size_t>(tq) * D + hoff;
                        // dV[tk] += P[tq,tk] * dO[tq]; dP[tk] = dot(dO, V[tk])
                        T pdot = T(0);
                        for (int tk = 0; tk < Tk; ++tk) {
                            const T* vrow = vsaved.data.data() + koff + static_cast<size_t>(tk) * D + hoff;
                            dp[static_cast<size_t>(tk)] = detail::dot8(grow, vrow, dh);
                            pdot += dp[static_cast<size_t>(tk)] * prow[tk];
                            if (pv.requires_grad)
                                detail::axpy(pv.grad.data.data() + koff + static_cast<size_t>(tk) * D + hoff,
                                             grow, prow[tk], dh);
                        }
                        // dS = P o (dP - sum(dP o P)); dQ += dS K / sqrt(dh); dK += dS^T Q / sqrt(dh)
                        const T* qrow = qsaved.data.data() + qoff + static_cast<size_t>(tq) * D + hoff;
                        for (int tk = 0; tk < Tk; ++tk) {
                            const T ds = prow[tk] * (dp[static_cast<size_t>(tk)] - pdot) * inv_sqrt;
                            if (ds == T(0)) continue;
                            if (pq.requires_grad)
                                detail::axpy(pq.grad.data.data() + qoff + static_cast<size_t>(tq) * D + hoff,
                                             ksaved.data.data() + koff + static_cast<size_t>(tk) * D + hoff,
                                             ds, dh);
                            if (pk.requires_grad)
                                detail::axpy(pk.grad.data.data() + koff + static_cast<size_t>(tk) * D + hoff,
                                             qrow, ds, dh);
                        }
                    }
                }
            }
        });
}

// ----------------------------- backward -----------------------------

template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.defined()) throw ShapeError("backward: undefined loss");
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
    if (!loss.requires_grad()) return;  // constant graph; all leaf grads stay zero

    // Iterative post-order topological sort over requires_grad nodes.
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ----------------------------- finite differences -----------------------------

// Central-difference gradient verification. f maps a Var to a scalar Var.
// Returns max over coordinates of |analytic - central| / max(1, |central|).
template <typename T, typename F>
double finite_difference_check(F&& f, const Tensor<T>& x, T eps) {
    Var<T> leaf = Var<T>::leaf(x, true);
    Var<T> loss = f(leaf);
    if (loss.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar");
    backward(loss);
    Tensor<T> analytic = leaf.grad();

    double max_err = 0.0;
    Tensor<T> xp = x;
    NoGradGuard ng;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T orig = xp[i];
        xp[i] = orig + eps;
        const double fp = static_cast<double>(f(Var<T>::constant(xp)).value()[0]);
        xp[i] = orig - eps;
        const double fm = static_cast<double>(f(Var<T>::constant(xp)).value()[0]);
        xp[i] = orig;
        const double central = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double err =
            std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace intermoe
