#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capsdec/errors.hpp"
#include "capsdec/gemm.hpp"
#include "capsdec/parallel.hpp"

namespace capsdec {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // sized on first backward touch
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Values are stored in S
// (float in the trained models, double in verification builds); reductions
// inside every op accumulate in double either way.
template <typename S = float>
class Tensor {
public:
    using Node = detail::TensorNode<S>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(S v, bool requires_grad = false) { return full({1}, v, requires_grad); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const& { return n_->shape; }
    Shape shape() && { return n_->shape; }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }

    S* data() { return n_->value.data(); }
    const S* data() const { return n_->value.data(); }
    // rvalue accessors copy, so `f(...).value()` cannot dangle
    const std::vector<S>& value() const& { return n_->value; }
    std::vector<S>& value() & { return n_->value; }
    std::vector<S> value() && { return n_->value; }

    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    const std::vector<S>& grad() const& { return n_->grad; }
    std::vector<S> grad() && { return n_->grad; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    void zero_grad() {
        if (n_) n_->grad.assign(n_->value.size(), S(0));
    }

    S item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->value[0];
    }

    template <typename... Ix>
    S at(Ix... ix) const {
        const int64_t idx[] = {static_cast<int64_t>(ix)...};
        const size_t nd = sizeof...(Ix);
        if (nd != n_->shape.size())
            throw DimensionError("at(): rank mismatch on " + shape_str(shape()));
        int64_t flat = 0;
        for (size_t d = 0; d < nd; ++d) flat = flat * n_->shape[d] + idx[d];
        return n_->value[static_cast<size_t>(flat)];
    }

    std::shared_ptr<Node> node() const { return n_; }

    // Reverse-mode pass from a scalar root. Touched gradients are
    // zero-initialised, so leaf grads accumulate across calls until
    // zero_grad().
    void backward() {
        if (numel() != 1) throw DomainError("backward() requires a scalar root");
        std::vector<Node*> order;
        topo_sort(order);
        n_->ensure_grad();
        n_->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backprop) (*it)->backprop(**it);
    }

private:
    void topo_sort(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        struct Frame {
            Node* node;
            size_t next;
        };
        std::vector<Frame> stack;
        if (!n_->requires_grad) return;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.node->parents.size()) {
                Node* p = f.node->parents[f.next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

// Builds the result node; parents/backprop are attached only when some
// parent tracks gradients, so inference retains no graph.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> value, std::vector<Tensor<S>> parents,
                  std::function<void(TensorNode<S>&)> backprop) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    if (rg) {
        n->requires_grad = true;
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<S>(n);
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<S> out(a.value());
    const S* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<S> out(a.value());
    const S* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> out(a.value());
    const S* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    std::vector<S> out(a.value());
    for (auto& v : out) v += c;
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
    std::vector<S> out(a.value());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [an, c](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    std::vector<S> out(a.value());
    for (auto& v : out)
        if (v < S(0)) v = S(0);
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (an->value[i] > S(0)) an->grad[i] += self.grad[i];
    });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    std::vector<S> out(a.value().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(a.data()[i]))));
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const S y = self.value[i];
            an->grad[i] += self.grad[i] * y * (S(1) - y);
        }
    });
}

// ---- reductions ------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    double acc = 0.0;
    for (S v : a.value()) acc += static_cast<double>(v);
    auto an = a.node();
    return detail::make_op<S>({1}, {static_cast<S>(acc)}, {a}, [an](detail::TensorNode<S>& self) {
        an->ensure_grad();
        const S g = self.grad[0];
        for (auto& gv : an->grad) gv += g;
    });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    return mul_scalar(sum(a), static_cast<S>(1.0 / static_cast<double>(a.numel())));
}

// Euclidean norm over the last axis; zero vectors get zero gradient.
template <typename S>
Tensor<S> vec_norm(const Tensor<S>& a) {
    const int64_t d = a.shape().back();
    const int64_t m = a.numel() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<S> out(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        double n2 = 0.0;
        const S* x = a.data() + i * d;
        for (int64_t j = 0; j < d; ++j) n2 += static_cast<double>(x[j]) * static_cast<double>(x[j]);
        out[static_cast<size_t>(i)] = static_cast<S>(std::sqrt(n2));
    }
    auto an = a.node();
    return detail::make_op<S>(std::move(out_shape), std::move(out), {a},
                              [an, d, m](detail::TensorNode<S>& self) {
                                  an->ensure_grad();
                                  for (int64_t i = 0; i < m; ++i) {
                                      const double norm = static_cast<double>(self.value[static_cast<size_t>(i)]);
                                      if (norm <= 0.0) continue;
                                      const double g = static_cast<double>(self.grad[static_cast<size_t>(i)]);
                                      const S* x = an->value.data() + i * d;
                                      S* gx = an->grad.data() + i * d;
                                      for (int64_t j = 0; j < d; ++j)
                                          gx[j] += static_cast<S>(g * static_cast<double>(x[j]) / norm);
                                  }
                              });
}

// ---- shape -----------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to incompatible " + shape_str(shape));
    std::vector<S> out(a.value());
    auto an = a.node();
    return detail::make_op<S>(std::move(shape), std::move(out), {a}, [an](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// ---- softmax ---------------------------------------------------------------

// Max-subtracted softmax along `axis`.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
    const auto& sh = a.shape();
    if (axis < 0) axis += static_cast<int>(sh.size());
    if (axis < 0 || axis >= static_cast<int>(sh.size()))
        throw DimensionError("softmax: axis out of range for " + shape_str(sh));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];
    const int64_t ax = sh[static_cast<size_t>(axis)];

    std::vector<S> out(a.value().size());
    const S* in = a.data();
    parallel_for(0, outer, [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * ax * inner + i;
                double mx = -1e300;
                for (int64_t k = 0; k < ax; ++k)
                    mx = std::max(mx, static_cast<double>(in[base + k * inner]));
                double denom = 0.0;
                for (int64_t k = 0; k < ax; ++k)
                    denom += std::exp(static_cast<double>(in[base + k * inner]) - mx);
                for (int64_t k = 0; k < ax; ++k)
                    out[static_cast<size_t>(base + k * inner)] =
                        static_cast<S>(std::exp(static_cast<double>(in[base + k * inner]) - mx) / denom);
            }
    });

    auto an = a.node();
    return detail::make_op<S>(sh, std::move(out), {a}, [an, outer, inner, ax](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * ax * inner + i;
                double dot = 0.0;
                for (int64_t k = 0; k < ax; ++k) {
                    const size_t ix = static_cast<size_t>(base + k * inner);
                    dot += static_cast<double>(self.grad[ix]) * static_cast<double>(self.value[ix]);
                }
                for (int64_t k = 0; k < ax; ++k) {
                    const size_t ix = static_cast<size_t>(base + k * inner);
                    an->grad[ix] += static_cast<S>(static_cast<double>(self.value[ix]) *
                                                   (static_cast<double>(self.grad[ix]) - dot));
                }
            }
    });
}

// ---- matmul ----------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(static_cast<size_t>(m * n));
    gemm_nn(m, n, k, a.data(), b.data(), out.data());
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::TensorNode<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            std::vector<S> bT(static_cast<size_t>(k * n));
            transpose(k, n, bn->value.data(), bT.data());
            gemm_nn(m, k, n, self.grad.data(), bT.data(), an->grad.data(), true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            std::vector<S> aT(static_cast<size_t>(m * k));
            transpose(m, k, an->value.data(), aT.data());
            gemm_nn(k, n, m, aT.data(), self.grad.data(), bn->grad.data(), true);
        }
    });
}

// x[... x N] + bias[N], broadcast over leading axes.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
    const int64_t n = bias.numel();
    if (x.shape().back() != n)
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " + shape_str(bias.shape()));
    const int64_t rows = x.numel() / n;
    std::vector<S> out(x.value());
    for (int64_t r = 0; r < rows; ++r) {
        S* row = out.data() + r * n;
        for (int64_t j = 0; j < n; ++j) row[j] += bias.data()[j];
    }
    auto xn = x.node();
    auto bn = bias.node();
    return detail::make_op<S>(x.shape(), std::move(out), {x, bias}, [xn, bn, rows, n](detail::TensorNode<S>& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t r = 0; r < rows; ++r) acc += static_cast<double>(self.grad[static_cast<size_t>(r * n + j)]);
                bn->grad[static_cast<size_t>(j)] += static_cast<S>(acc);
            }
        }
    });
}

// ---- convolution -----------------------------------------------------------

// Valid (no padding) cross-correlation. input [B x Ci x H x W] or
// [Ci x H x W], kernels [Co x Ci x k x k], bias [Co].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernels, const Tensor<S>& bias, int64_t stride) {
    const bool batched = input.ndim() == 4;
    if (!batched && input.ndim() != 3)
        throw DimensionError("conv2d: input must be 3-D or 4-D, got " + shape_str(input.shape()));
    if (kernels.ndim() != 4)
        throw DimensionError("conv2d: kernels must be 4-D, got " + shape_str(kernels.shape()));
    if (stride < 1) throw DomainError("conv2d: stride must be >= 1");

    const int64_t B = batched ? input.dim(0) : 1;
    const int64_t Ci = input.dim(batched ? 1 : 0);
    const int64_t H = input.dim(batched ? 2 : 1);
    const int64_t W = input.dim(batched ? 3 : 2);
    const int64_t Co = kernels.dim(0);
    const int64_t k = kernels.dim(2);
    if (kernels.dim(1) != Ci || kernels.dim(3) != k)
        throw DimensionError("conv2d: kernels " + shape_str(kernels.shape()) + " do not match input channels " +
                             shape_str(input.shape()));
    if (bias.numel() != Co)
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                             std::to_string(Co) + " output channels");
    if (k > H || k > W)
        throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " +
                             shape_str(input.shape()));

    const int64_t OH = (H - k) / stride + 1;
    const int64_t OW = (W - k) / stride + 1;
    const int64_t K = Ci * k * k;   // patch size
    const int64_t N = B * OH * OW;  // output positions

    auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(K * N));
    const S* in = input.data();
    parallel_for(0, K, [&](int64_t lo, int64_t hi) {
        for (int64_t q = lo; q < hi; ++q) {
            const int64_t ci = q / (k * k);
            const int64_t ky = (q / k) % k;
            const int64_t kx = q % k;
            S* row = cols->data() + q * N;
            for (int64_t b = 0; b < B; ++b) {
                const S* plane = in + (b * Ci + ci) * H * W;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const S* src = plane + (oy * stride + ky) * W + kx;
                    S* dst = row + (b * OH + oy) * OW;
                    for (int64_t ox = 0; ox < OW; ++ox) dst[ox] = src[ox * stride];
                }
            }
        }
    });

    std::vector<S> out_mat(static_cast<size_t>(Co * N));
    gemm_nn(Co, N, K, kernels.data(), cols->data(), out_mat.data());

    std::vector<S> out(static_cast<size_t>(B * Co * OH * OW));
    const S* pb = bias.data();
    parallel_for(0, Co, [&](int64_t lo, int64_t hi) {
        for (int64_t co = lo; co < hi; ++co)
            for (int64_t b = 0; b < B; ++b) {
                const S* src = out_mat.data() + co * N + b * OH * OW;
                S* dst = out.data() + (b * Co + co) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) dst[i] = src[i] + pb[co];
            }
    });

    Shape out_shape = batched ? Shape{B, Co, OH, OW} : Shape{Co, OH, OW};
    auto in_n = input.node();
    auto ker_n = kernels.node();
    auto bias_n = bias.node();
    auto backprop = [in_n, ker_n, bias_n, cols, B, Ci, H, W, Co, k, OH, OW, K, N,
                     stride](detail::TensorNode<S>& self) {
        // gradient back to [Co x N] layout
        std::vector<S> g_mat(static_cast<size_t>(Co * N));
        parallel_for(0, Co, [&](int64_t lo, int64_t hi) {
            for (int64_t co = lo; co < hi; ++co)
                for (int64_t b = 0; b < B; ++b) {
                    const S* src = self.grad.data() + (b * Co + co) * OH * OW;
                    S* dst = g_mat.data() + co * N + b * OH * OW;
                    for (int64_t i = 0; i < OH * OW; ++i) dst[i] = src[i];
                }
        });
        if (bias_n->requires_grad) {
            bias_n->ensure_grad();
            parallel_for(0, Co, [&](int64_t lo, int64_t hi) {
                for (int64_t co = lo; co < hi; ++co) {
                    double acc = 0.0;
                    const S* row = g_mat.data() + co * N;
                    for (int64_t i = 0; i < N; ++i) acc += static_cast<double>(row[i]);
                    bias_n->grad[static_cast<size_t>(co)] += static_cast<S>(acc);
                }
            });
        }
        if (ker_n->requires_grad) {
            ker_n->ensure_grad();
            std::vector<S> colsT(static_cast<size_t>(N * K));
            transpose(K, N, cols->data(), colsT.data());
            gemm_nn(Co, K, N, g_mat.data(), colsT.data(), ker_n->grad.data(), true);
        }
        if (in_n->requires_grad) {
            in_n->ensure_grad();
            std::vector<S> kerT(static_cast<size_t>(K * Co));
            transpose(Co, K, ker_n->value.data(), kerT.data());
            std::vector<S> dcols(static_cast<size_t>(K * N));
            gemm_nn(K, N, Co, kerT.data(), g_mat.data(), dcols.data());
            parallel_for(0, B, [&](int64_t lo, int64_t hi) {
                for (int64_t b = lo; b < hi; ++b) {
                    S* gin = in_n->grad.data() + b * Ci * H * W;
                    for (int64_t q = 0; q < K; ++q) {
                        const int64_t ci = q / (k * k);
                        const int64_t ky = (q / k) % k;
                        const int64_t kx = q % k;
                        const S* row = dcols.data() + q * N;
                        for (int64_t oy = 0; oy < OH; ++oy) {
                            S* dst = gin + ci * H * W + (oy * stride + ky) * W + kx;
                            const S* src = row + (b * OH + oy) * OW;
                            for (int64_t ox = 0; ox < OW; ++ox) dst[ox * stride] += src[ox];
                        }
                    }
                }
            });
        }
    };
    return detail::make_op<S>(std::move(out_shape), std::move(out), {input, kernels, bias}, std::move(backprop));
}

// ---- capsule-specific ops --------------------------------------------------

// Prediction vectors: uhat[b,p,j,d] = sum_k W[p,j,d,k] * u[b,p,k].
template <typename S>
Tensor<S> caps_predict(const Tensor<S>& W, const Tensor<S>& u) {
    if (W.ndim() != 4 || u.ndim() != 3 || W.dim(0) != u.dim(1) || W.dim(3) != u.dim(2))
        throw DimensionError("caps_predict: W " + shape_str(W.shape()) + " vs u " + shape_str(u.shape()));
    const int64_t P = W.dim(0), J = W.dim(1), D = W.dim(2), K = W.dim(3);
    const int64_t B = u.dim(0);
    std::vector<S> out(static_cast<size_t>(B * P * J * D));
    const S* pw = W.data();
    const S* pu = u.data();
    parallel_for(0, B * P, [&](int64_t lo, int64_t hi) {
        for (int64_t bp = lo; bp < hi; ++bp) {
            const int64_t b = bp / P, p = bp % P;
            const S* uvec = pu + (b * P + p) * K;
            const S* wmat = pw + p * J * D * K;
            S* dst = out.data() + (b * P + p) * J * D;
            for (int64_t jd = 0; jd < J * D; ++jd) {
                const S* wrow = wmat + jd * K;
                double acc = 0.0;
                for (int64_t q = 0; q < K; ++q) acc += static_cast<double>(wrow[q]) * static_cast<double>(uvec[q]);
                dst[jd] = static_cast<S>(acc);
            }
        }
    });
    auto wn = W.node();
    auto un = u.node();
    return detail::make_op<S>({B, P, J, D}, std::move(out), {W, u}, [wn, un, B, P, J, D, K](detail::TensorNode<S>& self) {
        if (wn->requires_grad) {
            wn->ensure_grad();
            parallel_for(0, P, [&](int64_t lo, int64_t hi) {
                for (int64_t p = lo; p < hi; ++p)
                    for (int64_t jd = 0; jd < J * D; ++jd) {
                        S* gw = wn->grad.data() + (p * J * D + jd) * K;
                        for (int64_t b = 0; b < B; ++b) {
                            const S g = self.grad[static_cast<size_t>((b * P + p) * J * D + jd)];
                            const S* uvec = un->value.data() + (b * P + p) * K;
                            for (int64_t q = 0; q < K; ++q) gw[q] += g * uvec[q];
                        }
                    }
            });
        }
        if (un->requires_grad) {
            un->ensure_grad();
            parallel_for(0, B * P, [&](int64_t lo, int64_t hi) {
                for (int64_t bp = lo; bp < hi; ++bp) {
                    const int64_t b = bp / P, p = bp % P;
                    S* gu = un->grad.data() + (b * P + p) * K;
                    const S* wmat = wn->value.data() + p * J * D * K;
                    const S* g = self.grad.data() + (b * P + p) * J * D;
                    for (int64_t jd = 0; jd < J * D; ++jd) {
                        const S gv = g[jd];
                        const S* wrow = wmat + jd * K;
                        for (int64_t q = 0; q < K; ++q) gu[q] += gv * wrow[q];
                    }
                }
            });
        }
    });
}

// Coupled sum: s[b,j,d] = sum_p c[b,p,j] * uhat[b,p,j,d].
template <typename S>
Tensor<S> routing_mix(const Tensor<S>& c, const Tensor<S>& uhat) {
    if (c.ndim() != 3 || uhat.ndim() != 4 || c.dim(0) != uhat.dim(0) || c.dim(1) != uhat.dim(1) ||
        c.dim(2) != uhat.dim(2))
        throw DimensionError("routing_mix: c " + shape_str(c.shape()) + " vs uhat " + shape_str(uhat.shape()));
    const int64_t B = uhat.dim(0), P = uhat.dim(1), J = uhat.dim(2), D = uhat.dim(3);
    std::vector<S> out(static_cast<size_t>(B * J * D));
    parallel_for(0, B, [&](int64_t lo, int64_t hi) {
        for (int64_t b = lo; b < hi; ++b) {
            std::vector<double> acc(static_cast<size_t>(J * D), 0.0);
            for (int64_t p = 0; p < P; ++p) {
                const S* cw = c.data() + (b * P + p) * J;
                const S* uh = uhat.data() + (b * P + p) * J * D;
                for (int64_t j = 0; j < J; ++j) {
                    const double cv = static_cast<double>(cw[j]);
                    for (int64_t d = 0; d < D; ++d)
                        acc[static_cast<size_t>(j * D + d)] += cv * static_cast<double>(uh[j * D + d]);
                }
            }
            for (int64_t i = 0; i < J * D; ++i)
                out[static_cast<size_t>(b * J * D + i)] = static_cast<S>(acc[static_cast<size_t>(i)]);
        }
    });
    auto cn = c.node();
    auto un = uhat.node();
    return detail::make_op<S>({B, J, D}, std::move(out), {c, uhat}, [cn, un, B, P, J, D](detail::TensorNode<S>& self) {
        if (cn->requires_grad) cn->ensure_grad();
        if (un->requires_grad) un->ensure_grad();
        parallel_for(0, B, [&](int64_t lo, int64_t hi) {
            for (int64_t b = lo; b < hi; ++b) {
                const S* gs = self.grad.data() + b * J * D;
                for (int64_t p = 0; p < P; ++p) {
                    const S* uh = un->value.data() + (b * P + p) * J * D;
                    const S* cw = cn->value.data() + (b * P + p) * J;
                    if (cn->requires_grad) {
                        for (int64_t j = 0; j < J; ++j) {
                            double acc = 0.0;
                            for (int64_t d = 0; d < D; ++d)
                                acc += static_cast<double>(uh[j * D + d]) * static_cast<double>(gs[j * D + d]);
                            cn->grad[static_cast<size_t>((b * P + p) * J + j)] += static_cast<S>(acc);
                        }
                    }
                    if (un->requires_grad) {
                        S* gu = un->grad.data() + (b * P + p) * J * D;
                        for (int64_t j = 0; j < J; ++j)
                            for (int64_t d = 0; d < D; ++d) gu[j * D + d] += cw[j] * gs[j * D + d];
                    }
                }
            }
        });
    });
}

// Agreement: a[b,p,j] = sum_d uhat[b,p,j,d] * v[b,j,d].
template <typename S>
Tensor<S> routing_agree(const Tensor<S>& uhat, const Tensor<S>& v) {
    if (uhat.ndim() != 4 || v.ndim() != 3 || uhat.dim(0) != v.dim(0) || uhat.dim(2) != v.dim(1) ||
        uhat.dim(3) != v.dim(2))
        throw DimensionError("routing_agree: uhat " + shape_str(uhat.shape()) + " vs v " + shape_str(v.shape()));
    const int64_t B = uhat.dim(0), P = uhat.dim(1), J = uhat.dim(2), D = uhat.dim(3);
    std::vector<S> out(static_cast<size_t>(B * P * J));
    parallel_for(0, B * P, [&](int64_t lo, int64_t hi) {
        for (int64_t bp = lo; bp < hi; ++bp) {
            const int64_t b = bp / P;
            const S* uh = uhat.data() + bp * J * D;
            const S* vv = v.data() + b * J * D;
            S* dst = out.data() + bp * J;
            for (int64_t j = 0; j < J; ++j) {
                double acc = 0.0;
                for (int64_t d = 0; d < D; ++d)
                    acc += static_cast<double>(uh[j * D + d]) * static_cast<double>(vv[j * D + d]);
                dst[j] = static_cast<S>(acc);
            }
        }
    });
    auto un = uhat.node();
    auto vn = v.node();
    return detail::make_op<S>({B, P, J}, std::move(out), {uhat, v}, [un, vn, B, P, J, D](detail::TensorNode<S>& self) {
        if (un->requires_grad) {
            un->ensure_grad();
            parallel_for(0, B * P, [&](int64_t lo, int64_t hi) {
                for (int64_t bp = lo; bp < hi; ++bp) {
                    const int64_t b = bp / P;
                    S* gu = un->grad.data() + bp * J * D;
                    const S* vv = vn->value.data() + b * J * D;
                    const S* g = self.grad.data() + bp * J;
                    for (int64_t j = 0; j < J; ++j)
                        for (int64_t d = 0; d < D; ++d) gu[j * D + d] += g[j] * vv[j * D + d];
                }
            });
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (int64_t b = 0; b < B; ++b) {
                S* gv = vn->grad.data() + b * J * D;
                for (int64_t p = 0; p < P; ++p) {
                    const S* uh = un->value.data() + (b * P + p) * J * D;
                    const S* g = self.grad.data() + (b * P + p) * J;
                    for (int64_t j = 0; j < J; ++j)
                        for (int64_t d = 0; d < D; ++d) gv[j * D + d] += g[j] * uh[j * D + d];
                }
            }
        }
    });
}

// Regroups a convolutional feature map [B x maps*dim x H x W] into capsule
// vectors [B x maps*H*W x dim]; channel index m*dim+d feeds capsule map m,
// coordinate d.
template <typename S>
Tensor<S> to_capsules(const Tensor<S>& a, int64_t maps, int64_t dim) {
    if (a.ndim() != 4 || a.dim(1) != maps * dim)
        throw DimensionError("to_capsules: expected [B x " + std::to_string(maps * dim) + " x H x W], got " +
                             shape_str(a.shape()));
    const int64_t B = a.dim(0), H = a.dim(2), W = a.dim(3);
    const int64_t P = maps * H * W;
    std::vector<S> out(static_cast<size_t>(B * P * dim));
    const S* in = a.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t m = 0; m < maps; ++m)
            for (int64_t d = 0; d < dim; ++d) {
                const S* src = in + ((b * maps * dim) + m * dim + d) * H * W;
                for (int64_t yx = 0; yx < H * W; ++yx)
                    out[static_cast<size_t>((b * P + m * H * W + yx) * dim + d)] = src[yx];
            }
    auto an = a.node();
    return detail::make_op<S>({B, P, dim}, std::move(out), {a}, [an, B, maps, dim, H, W, P](detail::TensorNode<S>& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t m = 0; m < maps; ++m)
                for (int64_t d = 0; d < dim; ++d) {
                    S* dst = an->grad.data() + ((b * maps * dim) + m * dim + d) * H * W;
                    for (int64_t yx = 0; yx < H * W; ++yx)
                        dst[yx] += self.grad[static_cast<size_t>((b * P + m * H * W + yx) * dim + d)];
                }
    });
}

// Capsule squash over the last axis: v = (|s|^2 / (1 + |s|^2)) * s / |s|,
// with the zero vector mapped to the zero vector.
template <typename S>
Tensor<S> squash(const Tensor<S>& a) {
    const int64_t d = a.shape().back();
    const int64_t m = a.numel() / d;
    std::vector<S> out(a.value().size());
    auto n2s = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    parallel_for(0, m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const S* x = a.data() + i * d;
            double n2 = 0.0;
            for (int64_t j = 0; j < d; ++j) n2 += static_cast<double>(x[j]) * static_cast<double>(x[j]);
            (*n2s)[static_cast<size_t>(i)] = n2;
            const double norm = std::sqrt(n2);
            const double scale = norm > 0.0 ? norm / (1.0 + n2) : 0.0;
            S* y = out.data() + i * d;
            for (int64_t j = 0; j < d; ++j) y[j] = static_cast<S>(static_cast<double>(x[j]) * scale);
        }
    });
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [an, n2s, d, m](detail::TensorNode<S>& self) {
        an->ensure_grad();
        parallel_for(0, m, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const double n2 = (*n2s)[static_cast<size_t>(i)];
                const double norm = std::sqrt(n2);
                if (norm <= 0.0) continue;
                const S* x = an->value.data() + i * d;
                const S* g = self.grad.data() + i * d;
                S* gx = an->grad.data() + i * d;
                const double denom = 1.0 + n2;
                const double scale = norm / denom;
                double gdotx = 0.0;
                for (int64_t j = 0; j < d; ++j) gdotx += static_cast<double>(g[j]) * static_cast<double>(x[j]);
                const double coef = gdotx * (1.0 - n2) / (norm * denom * denom);
                for (int64_t j = 0; j < d; ++j)
                    gx[j] += static_cast<S>(scale * static_cast<double>(g[j]) + coef * static_cast<double>(x[j]));
            }
        });
    });
}

}  // namespace capsdec
