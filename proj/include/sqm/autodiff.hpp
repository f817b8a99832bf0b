#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every operation returns a new Tensor whose node remembers its inputs and a
// backward rule. backward() orders the reachable graph topologically and runs
// each rule once. Leaves created with requires_grad accumulate gradients until
// zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sqm/errors.hpp"

namespace sqm::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

enum class Mode { Train, Eval };

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
        if (numel(shape) != values.size())
            throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                                 to_string(shape));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = numel(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    // Direct write access is reserved for leaves (parameters, inputs).
    std::span<double> mutable_values() {
        if (!node_->parents.empty()) throw UsageError("mutable_values() on a non-leaf tensor");
        return node_->value;
    }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double item() const {
        if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        if (!node_->parents.empty()) throw UsageError("set_requires_grad() on a non-leaf tensor");
        node_->requires_grad = rg;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    // Empty span until a backward pass reaches this tensor.
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    Tensor detach() const { return from(shape(), node_->value, false); }
    Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

    const std::shared_ptr<Node>& node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, std::string_view op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + " produced a non-finite value");
}

// Wraps a freshly computed value as a graph node. When no input needs a
// gradient the node is a plain leaf and the backward rule is dropped.
inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
    check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool rg = false;
    for (const auto& t : inputs) rg = rg || (t.defined() && t.requires_grad());
    if (rg) {
        node->requires_grad = true;
        for (auto& t : inputs) node->parents.push_back(t.defined() ? t.node() : nullptr);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

// Parent gradient buffer, or nullptr when that parent does not need one.
inline double* grad_of(Node& self, std::size_t i) {
    auto& p = self.parents[i];
    if (!p || !p->requires_grad) return nullptr;
    return p->ensure_grad().data();
}

inline std::size_t leading(const Shape& shape, std::size_t trailing_rank) {
    std::size_t n = 1;
    for (std::size_t i = 0; i + trailing_rank < shape.size(); ++i) n *= shape[i];
    return n;
}

} // namespace detail

// Reverse pass from a scalar loss. Gradients accumulate into every reachable
// tensor with requires_grad.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) throw UsageError("backward() requires a scalar loss");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; reversed it is a valid reverse-topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Interior buffers are not needed once propagated.
    for (Node* n : order)
        if (!n->parents.empty() && n != loss.node().get()) n->grad.clear();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (double* g = detail::grad_of(self, k))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        if (double* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
    return detail::make_result("scale", x.shape(), std::move(out), {x}, [c](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return detail::make_result("sum", {1}, {s}, {x}, [](Node& self) {
        if (double* g = detail::grad_of(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

namespace detail {
// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
}
} // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.dim(i) != ref[i])
                throw DimensionError("concat: " + to_string(p.shape()) + " vs " + to_string(ref));
        out_shape[axis] += p.dim(axis);
    }
    auto [outer, total, inner] = detail::split_axis(out_shape, axis);
    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.values().begin() + o * len * inner, len * inner,
                        out.begin() + (o * total + off) * inner);
        off += len;
    }
    return detail::make_result(
        "concat", out_shape, std::move(out), parts,
        [outer = outer, total = total, inner = inner, offsets, axis](Node& self) {
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                double* g = detail::grad_of(self, k);
                if (!g) continue;
                const std::size_t len = self.parents[k]->shape[axis];
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < len * inner; ++j)
                        g[o * len * inner + j] += self.grad[(o * total + offsets[k]) * inner + j];
            }
        });
}

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin >= end || end > x.dim(axis))
        throw DimensionError("slice: invalid range on " + to_string(x.shape()));
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    auto [outer, total, inner] = detail::split_axis(x.shape(), axis);
    const std::size_t len = end - begin;
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.values().begin() + (o * total + begin) * inner, len * inner, out.begin() + o * len * inner);
    return detail::make_result("slice", out_shape, std::move(out), {x},
                               [outer = outer, total = total, inner = inner, begin, len](Node& self) {
                                   if (double* g = detail::grad_of(self, 0))
                                       for (std::size_t o = 0; o < outer; ++o)
                                           for (std::size_t j = 0; j < len * inner; ++j)
                                               g[(o * total + begin) * inner + j] += self.grad[o * len * inner + j];
                               });
}

// ---------------------------------------------------------------------------
// Layers

// Affine map along the last axis: x [..., n_in] · weight [n_in, n_out] + bias [n_out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(0))
        throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                             to_string(weight.shape()));
    const std::size_t n_in = weight.dim(0), n_out = weight.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n_out))
        throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(n_out) + " outputs");
    const std::size_t rows = x.size() / n_in;
    Shape out_shape = x.shape();
    out_shape.back() = n_out;
    std::vector<double> out(rows * n_out);
    const double* xv = x.values().data();
    const double* wv = weight.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* o = out.data() + r * n_out;
        if (bias.defined())
            std::copy_n(bias.values().begin(), n_out, o);
        for (std::size_t i = 0; i < n_in; ++i) {
            const double xi = xv[r * n_in + i];
            const double* wrow = wv + i * n_out;
            for (std::size_t j = 0; j < n_out; ++j) o[j] += xi * wrow[j];
        }
    }
    return detail::make_result("linear", out_shape, std::move(out), {x, weight, bias},
                               [rows, n_in, n_out](Node& self) {
                                   const double* dy = self.grad.data();
                                   const double* xv = self.parents[0]->value.data();
                                   const double* wv = self.parents[1]->value.data();
                                   if (double* gx = detail::grad_of(self, 0))
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t i = 0; i < n_in; ++i) {
                                               double acc = 0.0;
                                               for (std::size_t j = 0; j < n_out; ++j)
                                                   acc += dy[r * n_out + j] * wv[i * n_out + j];
                                               gx[r * n_in + i] += acc;
                                           }
                                   if (double* gw = detail::grad_of(self, 1))
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t i = 0; i < n_in; ++i) {
                                               const double xi = xv[r * n_in + i];
                                               for (std::size_t j = 0; j < n_out; ++j)
                                                   gw[i * n_out + j] += xi * dy[r * n_out + j];
                                           }
                                   if (self.parents[2])
                                       if (double* gb = detail::grad_of(self, 2))
                                           for (std::size_t r = 0; r < rows; ++r)
                                               for (std::size_t j = 0; j < n_out; ++j) gb[j] += dy[r * n_out + j];
                               });
}

// Width-3 convolution along the time axis with one zero of padding at each
// end. x [..., L, K_in], kernel [3, K_in, K_out], bias [K_out] -> [..., L, K_out].
inline Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.rank() < 2) throw DimensionError("conv1d_temporal: input needs [.., L, K], got " + to_string(x.shape()));
    if (kernel.rank() != 3 || kernel.dim(0) != 3 || kernel.dim(1) != x.shape().back())
        throw DimensionError("conv1d_temporal: kernel " + to_string(kernel.shape()) + " for input " +
                             to_string(x.shape()));
    const std::size_t L = x.dim(x.rank() - 2), kin = kernel.dim(1), kout = kernel.dim(2);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kout))
        throw DimensionError("conv1d_temporal: bias " + to_string(bias.shape()));
    const std::size_t batch = detail::leading(x.shape(), 2);
    Shape out_shape = x.shape();
    out_shape.back() = kout;
    std::vector<double> out(batch * L * kout);
    const double* xv = x.values().data();
    const double* kv = kernel.values().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < L; ++t) {
            double* o = out.data() + (b * L + t) * kout;
            if (bias.defined()) std::copy_n(bias.values().begin(), kout, o);
            for (std::size_t tap = 0; tap < 3; ++tap) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + tap) - 1;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                const double* xin = xv + (b * L + static_cast<std::size_t>(src)) * kin;
                for (std::size_t i = 0; i < kin; ++i) {
                    const double* krow = kv + (tap * kin + i) * kout;
                    for (std::size_t j = 0; j < kout; ++j) o[j] += xin[i] * krow[j];
                }
            }
        }
    return detail::make_result(
        "conv1d_temporal", out_shape, std::move(out), {x, kernel, bias}, [batch, L, kin, kout](Node& self) {
            const double* dy = self.grad.data();
            const double* xv = self.parents[0]->value.data();
            const double* kv = self.parents[1]->value.data();
            double* gx = detail::grad_of(self, 0);
            double* gk = detail::grad_of(self, 1);
            double* gb = self.parents[2] ? detail::grad_of(self, 2) : nullptr;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < L; ++t) {
                    const double* d = dy + (b * L + t) * kout;
                    if (gb)
                        for (std::size_t j = 0; j < kout; ++j) gb[j] += d[j];
                    for (std::size_t tap = 0; tap < 3; ++tap) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + tap) - 1;
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                        const std::size_t base = (b * L + static_cast<std::size_t>(src)) * kin;
                        for (std::size_t i = 0; i < kin; ++i) {
                            const std::size_t krow = (tap * kin + i) * kout;
                            if (gx) {
                                double acc = 0.0;
                                for (std::size_t j = 0; j < kout; ++j) acc += d[j] * kv[krow + j];
                                gx[base + i] += acc;
                            }
                            if (gk)
                                for (std::size_t j = 0; j < kout; ++j) gk[krow + j] += xv[base + i] * d[j];
                        }
                    }
                }
        });
}

// Valid 2x2 convolution, one kernel per channel.
// x [..., C, H, W], kernel [C, 2, 2], bias [C] -> [..., C, H-1, W-1].
inline Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.rank() < 3) throw DimensionError("conv2d_depthwise: input needs [.., C, H, W], got " + to_string(x.shape()));
    const std::size_t C = x.dim(x.rank() - 3), H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H < 2 || W < 2) throw DimensionError("conv2d_depthwise: spatial extent below 2x2: " + to_string(x.shape()));
    if (kernel.shape() != Shape{C, 2, 2})
        throw DimensionError("conv2d_depthwise: kernel " + to_string(kernel.shape()) + " for " + std::to_string(C) +
                             " channels");
    if (bias.defined() && bias.shape() != Shape{C}) throw DimensionError("conv2d_depthwise: bias shape");
    const std::size_t batch = detail::leading(x.shape(), 3);
    const std::size_t Ho = H - 1, Wo = W - 1;
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = Ho;
    out_shape[out_shape.size() - 1] = Wo;
    std::vector<double> out(batch * C * Ho * Wo);
    const double* xv = x.values().data();
    const double* kv = kernel.values().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double* xin = xv + (b * C + c) * H * W;
            const double* k = kv + c * 4;
            const double b0 = bias.defined() ? bias[c] : 0.0;
            double* o = out.data() + (b * C + c) * Ho * Wo;
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j)
                    o[i * Wo + j] = b0 + k[0] * xin[i * W + j] + k[1] * xin[i * W + j + 1] +
                                    k[2] * xin[(i + 1) * W + j] + k[3] * xin[(i + 1) * W + j + 1];
        }
    return detail::make_result(
        "conv2d_depthwise", out_shape, std::move(out), {x, kernel, bias}, [batch, C, H, W](Node& self) {
            const std::size_t Ho = H - 1, Wo = W - 1;
            const double* dy = self.grad.data();
            const double* xv = self.parents[0]->value.data();
            const double* kv = self.parents[1]->value.data();
            double* gx = detail::grad_of(self, 0);
            double* gk = detail::grad_of(self, 1);
            double* gb = self.parents[2] ? detail::grad_of(self, 2) : nullptr;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t xbase = (b * C + c) * H * W;
                    const double* d = dy + (b * C + c) * Ho * Wo;
                    for (std::size_t i = 0; i < Ho; ++i)
                        for (std::size_t j = 0; j < Wo; ++j) {
                            const double g = d[i * Wo + j];
                            const std::size_t p[4] = {i * W + j, i * W + j + 1, (i + 1) * W + j, (i + 1) * W + j + 1};
                            for (std::size_t t = 0; t < 4; ++t) {
                                if (gx) gx[xbase + p[t]] += g * kv[c * 4 + t];
                                if (gk) gk[c * 4 + t] += g * xv[xbase + p[t]];
                            }
                            if (gb) gb[c] += g;
                        }
                }
        });
}

// Per-channel maximum over all spatial positions: [..., C, H, W] -> [..., C].
// Ties resolve to the first maximal position in row-major order.
inline Tensor maxpool_spatial(const Tensor& x) {
    if (x.rank() < 3) throw DimensionError("maxpool_spatial: input needs [.., C, H, W], got " + to_string(x.shape()));
    const std::size_t area = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
    const std::size_t planes = x.size() / area;
    Shape out_shape(x.shape().begin(), x.shape().end() - 2);
    std::vector<double> out(planes);
    std::vector<std::size_t> argmax(planes);
    for (std::size_t p = 0; p < planes; ++p) {
        const double* v = x.values().data() + p * area;
        std::size_t best = 0;
        for (std::size_t i = 1; i < area; ++i)
            if (v[i] > v[best]) best = i;
        argmax[p] = p * area + best;
        out[p] = v[best];
    }
    return detail::make_result("maxpool_spatial", out_shape, std::move(out), {x},
                               [argmax = std::move(argmax)](Node& self) {
                                   if (double* g = detail::grad_of(self, 0))
                                       for (std::size_t p = 0; p < argmax.size(); ++p) g[argmax[p]] += self.grad[p];
                               });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { LeakyRelu02, Silu, Elu, Gelu, Sigmoid, Tanh, ScaledTanh3, Softplus };

inline Activation parse_activation(std::string_view name) {
    if (name == "leaky_relu_0.2") return Activation::LeakyRelu02;
    if (name == "silu") return Activation::Silu;
    if (name == "elu") return Activation::Elu;
    if (name == "gelu") return Activation::Gelu;
    if (name == "sigmoid") return Activation::Sigmoid;
    if (name == "tanh") return Activation::Tanh;
    if (name == "scaled_tanh_3") return Activation::ScaledTanh3;
    if (name == "softplus") return Activation::Softplus;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

namespace detail {

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Returns (f(x), f'(x)).
inline std::pair<double, double> activate(Activation kind, double x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    switch (kind) {
        case Activation::LeakyRelu02:
            return x >= 0 ? std::pair{x, 1.0} : std::pair{0.2 * x, 0.2};
        case Activation::Silu: {
            const double s = sigmoid(x);
            return {x * s, s * (1.0 + x * (1.0 - s))};
        }
        case Activation::Elu:
            if (x > 0) return {x, 1.0};
            return {std::expm1(x), std::exp(x)};
        case Activation::Gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return {x * cdf, cdf + x * pdf};
        }
        case Activation::Sigmoid: {
            const double s = sigmoid(x);
            return {s, s * (1.0 - s)};
        }
        case Activation::Tanh: {
            const double t = std::tanh(x);
            return {t, 1.0 - t * t};
        }
        case Activation::ScaledTanh3: {
            // Held strictly inside (-3, 3) once tanh rounds to +-1.
            constexpr double kEdge = 2.9999999999999996;  // nextafter(3.0, 0.0)
            const double t = std::tanh(x);
            return {std::clamp(3.0 * t, -kEdge, kEdge), 3.0 * (1.0 - t * t)};
        }
        case Activation::Softplus: {
            const double v = x > 30 ? x : std::log1p(std::exp(x));
            return {v, sigmoid(x)};
        }
    }
    throw ConfigError("unknown activation kind");
}

} // namespace detail

inline Tensor activation(Activation kind, const Tensor& x) {
    std::vector<double> out(x.size()), slope(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) std::tie(out[i], slope[i]) = detail::activate(kind, x[i]);
    return detail::make_result("activation", x.shape(), std::move(out), {x}, [slope = std::move(slope)](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < slope.size(); ++i) g[i] += self.grad[i] * slope[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

struct BatchNormStats {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    explicit BatchNormStats(std::size_t channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel normalization over every position except the last (channel)
// axis. x is [B, ..., K]; gamma and beta are [K]. Train mode uses batch
// statistics and updates `stats`; eval mode uses the running estimates.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode) {
    if (x.rank() < 2) throw DimensionError("batchnorm: input needs [B, .., K], got " + to_string(x.shape()));
    const std::size_t K = x.shape().back();
    if (gamma.shape() != Shape{K} || beta.shape() != Shape{K})
        throw DimensionError("batchnorm: affine parameters must be [" + std::to_string(K) + "]");
    if (stats.running_mean.size() != K || stats.running_var.size() != K)
        throw DimensionError("batchnorm: running statistics width mismatch");
    const std::size_t M = x.size() / K;
    std::vector<double> mean(K, 0.0), invstd(K, 0.0);

    if (mode == Mode::Train) {
        if (x.dim(0) < 2) throw BatchError("batchnorm: train mode needs batch size >= 2, got " + std::to_string(x.dim(0)));
        std::vector<double> var(K, 0.0);
        for (std::size_t r = 0; r < M; ++r)
            for (std::size_t k = 0; k < K; ++k) mean[k] += x[r * K + k];
        for (auto& m : mean) m /= static_cast<double>(M);
        for (std::size_t r = 0; r < M; ++r)
            for (std::size_t k = 0; k < K; ++k) {
                const double d = x[r * K + k] - mean[k];
                var[k] += d * d;
            }
        for (std::size_t k = 0; k < K; ++k) {
            var[k] /= static_cast<double>(M);
            invstd[k] = 1.0 / std::sqrt(var[k] + kBatchNormEps);
            const double unbiased = var[k] * static_cast<double>(M) / static_cast<double>(M - 1);
            stats.running_mean[k] = (1.0 - kBatchNormMomentum) * stats.running_mean[k] + kBatchNormMomentum * mean[k];
            stats.running_var[k] = (1.0 - kBatchNormMomentum) * stats.running_var[k] + kBatchNormMomentum * unbiased;
        }
    } else {
        for (std::size_t k = 0; k < K; ++k) {
            mean[k] = stats.running_mean[k];
            invstd[k] = 1.0 / std::sqrt(stats.running_var[k] + kBatchNormEps);
        }
    }

    std::vector<double> xhat(x.size()), out(x.size());
    for (std::size_t r = 0; r < M; ++r)
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t i = r * K + k;
            xhat[i] = (x[i] - mean[k]) * invstd[k];
            out[i] = gamma[k] * xhat[i] + beta[k];
        }
    const bool batch_stats = mode == Mode::Train;
    return detail::make_result(
        "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
        [M, K, batch_stats, invstd = std::move(invstd), xhat = std::move(xhat)](Node& self) {
            const double* dy = self.grad.data();
            const double* gv = self.parents[1]->value.data();
            if (double* gg = detail::grad_of(self, 1))
                for (std::size_t i = 0; i < M * K; ++i) gg[i % K] += dy[i] * xhat[i];
            if (double* gb = detail::grad_of(self, 2))
                for (std::size_t i = 0; i < M * K; ++i) gb[i % K] += dy[i];
            double* gx = detail::grad_of(self, 0);
            if (!gx) return;
            if (!batch_stats) {
                for (std::size_t i = 0; i < M * K; ++i) gx[i] += dy[i] * gv[i % K] * invstd[i % K];
                return;
            }
            std::vector<double> sum_d(K, 0.0), sum_dx(K, 0.0);
            for (std::size_t i = 0; i < M * K; ++i) {
                const double d = dy[i] * gv[i % K];
                sum_d[i % K] += d;
                sum_dx[i % K] += d * xhat[i];
            }
            const double m = static_cast<double>(M);
            for (std::size_t i = 0; i < M * K; ++i) {
                const std::size_t k = i % K;
                const double d = dy[i] * gv[k];
                gx[i] += invstd[k] / m * (m * d - sum_d[k] - xhat[i] * sum_dx[k]);
            }
        });
}

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Inverted dropout: train mode zeroes each element with probability p and
// rescales survivors by 1/(1-p); eval mode is the identity.
inline Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
    if (mode == Mode::Eval || p == 0.0) return reshape(x, x.shape());
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size()), out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = uniform01(rng) < p ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    return detail::make_result("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

} // namespace sqm::ad
