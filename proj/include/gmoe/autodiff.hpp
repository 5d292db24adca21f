#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace gmoe {

/// Trainable tensor with its gradient accumulator. Frozen parameters never
/// receive gradient from a graph and are skipped by the optimizer.
struct Parameter {
    Parameter() = default;
    Parameter(std::string param_name, Tensor initial)
        : name(std::move(param_name)), value(std::move(initial)), grad(value.shape()) {}

    void zero_grad() { grad.fill(0.0); }

    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

/// Handle to a node in a Graph.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const noexcept { return id != npos; }
};

/// Tape of operator applications in topological (creation) order.
///
/// Values are computed eagerly when a node is recorded; backward() walks the
/// tape once in reverse, accumulating gradients into every input that needs one
/// and finally into the leaf Parameters.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor& upstream)>;

    Var constant(Tensor value) {
        Node n;
        n.value = std::move(value);
        n.op = "constant";
        return push(std::move(n));
    }

    Var parameter(Parameter& p) {
        Node n;
        n.param = &p;
        n.sink = p.frozen ? nullptr : &p;
        n.requires_grad = !p.frozen;
        n.op = "parameter";
        return push(std::move(n));
    }

    /// Read-only use of a parameter: no gradient flows back to it.
    Var parameter(const Parameter& p) {
        Node n;
        n.param = &p;
        n.op = "parameter";
        return push(std::move(n));
    }

    /// Appends an operator node. The node requires grad if any input does; the
    /// backward function is dropped otherwise.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn), op);
    }

    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn, const char* op) {
        Node n;
        n.value = std::move(value);
        n.op = op;
        for (Var v : inputs) {
            check(v);
            n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(fn);
        return push(std::move(n));
    }

    const Tensor& value(Var v) const {
        check(v);
        const Node& n = nodes_[v.id];
        return n.param ? n.param->value : n.value;
    }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.id].requires_grad;
    }

    const char* op(Var v) const {
        check(v);
        return nodes_[v.id].op;
    }

    /// Gradient of the last backward pass with respect to v (zeros if untouched).
    Tensor grad(Var v) const {
        check(v);
        const Node& n = nodes_[v.id];
        if (!n.grad.empty()) return n.grad;
        return Tensor(value(v).shape());
    }

    /// Lazily allocated gradient buffer; backward functions accumulate into it.
    Tensor& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Tensor(value(v).shape());
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Smallest |x| over all ReLU inputs that require grad; used by gradient checks
    /// to detect configurations sitting on a kink.
    double relu_margin() const noexcept { return relu_margin_; }
    void note_relu_input(double x) noexcept { relu_margin_ = std::min(relu_margin_, std::abs(x)); }

    void backward(Var loss, double seed = 1.0) {
        if (nodes_.empty() || !loss.valid() || loss.id >= nodes_.size()) {
            throw std::logic_error("backward called before forward: loss node does not exist");
        }
        if (value(loss).size() != 1) {
            throw std::logic_error("backward requires a scalar loss, got shape " + to_string(value(loss).shape()));
        }
        for (Node& n : nodes_) n.grad = Tensor();
        if (!nodes_[loss.id].requires_grad) return;
        grad_buffer(loss)[0] = seed;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.sink) {
                n.sink->grad += n.grad;
            } else if (n.backward) {
                n.backward(*this, n.grad);
            }
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        const Parameter* param = nullptr;
        Parameter* sink = nullptr;
        BackwardFn backward;
        const char* op = "";
        bool requires_grad = false;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    void check(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("invalid graph variable");
    }

    std::vector<Node> nodes_;
    double relu_margin_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Operators

/// 2-D cross-correlation over an H x W x Din map with a kh x kw x Din x Dout kernel.
inline Var conv2d(Graph& g, Var input, Var kernel, Var bias, std::size_t stride = 1, std::size_t padding = 0) {
    const Tensor& x = g.value(input);
    const Tensor& k = g.value(kernel);
    const Tensor& b = g.value(bias);
    if (x.rank() != 3) throw ShapeError("conv2d: input must be HxWxD, got " + to_string(x.shape()));
    if (k.rank() != 4) throw ShapeError("conv2d: kernel must be kh x kw x Din x Dout, got " + to_string(k.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t h = x.dim(0), w = x.dim(1), din = x.dim(2);
    const std::size_t kh = k.dim(0), kw = k.dim(1), dout = k.dim(3);
    if (k.dim(2) != din) {
        throw ShapeError("conv2d: input has " + std::to_string(din) + " channels but kernel expects " +
                         std::to_string(k.dim(2)) + " (input " + to_string(x.shape()) + ", kernel " +
                         to_string(k.shape()) + ")");
    }
    if (b.shape() != Shape{dout}) {
        throw ShapeError("conv2d: bias must be [" + std::to_string(dout) + "], got " + to_string(b.shape()));
    }
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        throw ShapeError("conv2d: padded input " + to_string(x.shape()) + " smaller than kernel " + to_string(k.shape()));
    }
    const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
    const std::size_t wo = (w + 2 * padding - kw) / stride + 1;

    // Visits every (output pixel, kernel tap) pair that lands inside the input.
    auto for_each_tap = [=](auto&& fn) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        const std::size_t in_off = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * din;
                        const std::size_t k_off = (ky * kw + kx) * din * dout;
                        const std::size_t out_off = (oy * wo + ox) * dout;
                        fn(in_off, k_off, out_off);
                    }
                }
            }
        }
    };

    Tensor out({ho, wo, dout});
    {
        const double* xp = x.data().data();
        const double* kp = k.data().data();
        double* op = out.data().data();
        for (std::size_t p = 0; p < ho * wo; ++p) {
            for (std::size_t co = 0; co < dout; ++co) op[p * dout + co] = b[co];
        }
        for_each_tap([&](std::size_t in_off, std::size_t k_off, std::size_t out_off) {
            double* o = op + out_off;
            for (std::size_t ci = 0; ci < din; ++ci) {
                const double v = xp[in_off + ci];
                if (v == 0.0) continue;
                const double* kr = kp + k_off + ci * dout;
                for (std::size_t co = 0; co < dout; ++co) o[co] += v * kr[co];
            }
        });
    }

    return g.record(std::move(out), {input, kernel, bias},
        [=](Graph& gr, const Tensor& up) {
            const double* upp = up.data().data();
            if (gr.requires_grad(bias)) {
                Tensor& gb = gr.grad_buffer(bias);
                for (std::size_t p = 0; p < ho * wo; ++p) {
                    for (std::size_t co = 0; co < dout; ++co) gb[co] += upp[p * dout + co];
                }
            }
            const bool need_in = gr.requires_grad(input);
            const bool need_k = gr.requires_grad(kernel);
            if (!need_in && !need_k) return;
            const double* xp = gr.value(input).data().data();
            const double* kp = gr.value(kernel).data().data();
            double* gx = need_in ? gr.grad_buffer(input).data().data() : nullptr;
            double* gk = need_k ? gr.grad_buffer(kernel).data().data() : nullptr;
            for_each_tap([&](std::size_t in_off, std::size_t k_off, std::size_t out_off) {
                const double* u = upp + out_off;
                for (std::size_t ci = 0; ci < din; ++ci) {
                    const std::size_t kr = k_off + ci * dout;
                    if (gx) {
                        double acc = 0.0;
                        for (std::size_t co = 0; co < dout; ++co) acc += kp[kr + co] * u[co];
                        gx[in_off + ci] += acc;
                    }
                    if (gk) {
                        const double v = xp[in_off + ci];
                        if (v == 0.0) continue;
                        for (std::size_t co = 0; co < dout; ++co) gk[kr + co] += v * u[co];
                    }
                }
            });
        },
        "conv2d");
}

/// weight^T * input + bias, with input [D], weight [D x M], bias [M].
inline Var fully_connected(Graph& g, Var input, Var weight, Var bias) {
    const Tensor& x = g.value(input);
    const Tensor& wt = g.value(weight);
    const Tensor& b = g.value(bias);
    if (wt.rank() != 2) throw ShapeError("fully_connected: weight must be D x M, got " + to_string(wt.shape()));
    const std::size_t d = wt.dim(0), m = wt.dim(1);
    if (x.size() != d) {
        throw ShapeError("fully_connected: input has " + std::to_string(x.size()) + " values but weight has " +
                         std::to_string(d) + " rows");
    }
    if (b.shape() != Shape{m}) throw ShapeError("fully_connected: bias must be [" + std::to_string(m) + "]");
    Tensor out({m});
    for (std::size_t j = 0; j < m; ++j) out[j] = b[j];
    for (std::size_t i = 0; i < d; ++i) {
        const double v = x[i];
        for (std::size_t j = 0; j < m; ++j) out[j] += v * wt[i * m + j];
    }
    return g.record(std::move(out), {input, weight, bias},
        [=](Graph& gr, const Tensor& up) {
            if (gr.requires_grad(bias)) gr.grad_buffer(bias) += up;
            if (gr.requires_grad(weight)) {
                const Tensor& xv = gr.value(input);
                Tensor& gw = gr.grad_buffer(weight);
                for (std::size_t i = 0; i < d; ++i) {
                    for (std::size_t j = 0; j < m; ++j) gw[i * m + j] += xv[i] * up[j];
                }
            }
            if (gr.requires_grad(input)) {
                const Tensor& wv = gr.value(weight);
                Tensor& gx = gr.grad_buffer(input);
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += wv[i * m + j] * up[j];
                    gx[i] += acc;
                }
            }
        },
        "fully_connected");
}

/// Elementwise max(0, x); the subgradient at 0 is 0.
inline Var relu(Graph& g, Var input) {
    const Tensor& x = g.value(input);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (g.requires_grad(input)) {
        for (std::size_t i = 0; i < x.size(); ++i) g.note_relu_input(x[i]);
    }
    return g.record(std::move(out), {input},
        [=](Graph& gr, const Tensor& up) {
            const Tensor& xv = gr.value(input);
            Tensor& gx = gr.grad_buffer(input);
            for (std::size_t i = 0; i < xv.size(); ++i) {
                if (xv[i] > 0.0) gx[i] += up[i];
            }
        },
        "relu");
}

inline Tensor softmax_values(const Tensor& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x.data()) mx = std::max(mx, v);
    Tensor out(x.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        total += out[i];
    }
    for (double& v : out.data()) v /= total;
    return out;
}

inline double log_sum_exp(const Tensor& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x.data()) mx = std::max(mx, v);
    double total = 0.0;
    for (double v : x.data()) total += std::exp(v - mx);
    return mx + std::log(total);
}

/// Max-shifted softmax over a vector.
inline Var softmax(Graph& g, Var input) {
    const Tensor& x = g.value(input);
    if (x.rank() != 1) throw ShapeError("softmax: expects a vector, got " + to_string(x.shape()));
    Tensor out = softmax_values(x);
    Tensor y = out;
    return g.record(std::move(out), {input},
        [input, y = std::move(y)](Graph& gr, const Tensor& up) {
            double dot = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) dot += up[i] * y[i];
            Tensor& gx = gr.grad_buffer(input);
            for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (up[i] - dot);
        },
        "softmax");
}

inline double cross_entropy_value(const Tensor& scores, std::size_t label) {
    return log_sum_exp(scores) - scores[label];
}

/// Mean of K equally shaped tensors (average pooling over a set). Each
/// element is summed in ascending order so the result does not depend on the
/// order of the inputs.
inline Var average_pool_over_set(Graph& g, std::span<const Var> inputs) {
    if (inputs.empty()) throw std::invalid_argument("average_pool_over_set: empty input list");
    const Shape& shape = g.value(inputs.front()).shape();
    for (Var v : inputs) {
        const Tensor& t = g.value(v);
        if (t.shape() != shape) {
            throw ShapeError("average_pool_over_set: shape " + to_string(t.shape()) + " differs from " + to_string(shape));
        }
    }
    Tensor out(shape);
    const double inv = 1.0 / static_cast<double>(inputs.size());
    std::vector<double> column(inputs.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t k = 0; k < inputs.size(); ++k) column[k] = g.value(inputs[k])[i];
        std::ranges::sort(column);
        double sum = 0.0;
        for (double v : column) sum += v;
        out[i] = sum * inv;
    }
    std::vector<Var> ins(inputs.begin(), inputs.end());
    return g.record(std::move(out), inputs,
        [ins, inv](Graph& gr, const Tensor& up) {
            for (Var v : ins) {
                if (!gr.requires_grad(v)) continue;
                Tensor& gv = gr.grad_buffer(v);
                for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += inv * up[i];
            }
        },
        "average_pool_over_set");
}

/// -log softmax(scores)[label], as a [1] tensor.
inline Var cross_entropy(Graph& g, Var scores, std::size_t label) {
    const Tensor& s = g.value(scores);
    if (s.rank() != 1) throw ShapeError("cross_entropy: scores must be a vector, got " + to_string(s.shape()));
    if (label >= s.size()) {
        throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " out of range for " +
                                std::to_string(s.size()) + " classes");
    }
    const double loss = cross_entropy_value(s, label);
    return g.record(Tensor::scalar(loss), {scores},
        [=](Graph& gr, const Tensor& up) {
            Tensor p = softmax_values(gr.value(scores));
            p[label] -= 1.0;
            Tensor& gs = gr.grad_buffer(scores);
            for (std::size_t i = 0; i < p.size(); ++i) gs[i] += up[0] * p[i];
        },
        "cross_entropy");
}

/// Inverted dropout: survivors are scaled by 1/(1-ratio) while training; identity otherwise.
inline Var dropout(Graph& g, Var input, double ratio, bool training, Rng& rng) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("dropout: ratio must lie in [0, 1)");
    if (!training || ratio == 0.0) return input;
    const Tensor& x = g.value(input);
    const double keep_scale = 1.0 / (1.0 - ratio);
    std::vector<double> mask(x.size());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng.uniform() < ratio ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    return g.record(std::move(out), {input},
        [input, mask = std::move(mask)](Graph& gr, const Tensor& up) {
            Tensor& gx = gr.grad_buffer(input);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += mask[i] * up[i];
        },
        "dropout");
}

/// Non-overlapping window x window mean pooling of an H x W x C map.
inline Var mean_pool2d(Graph& g, Var input, std::size_t window) {
    const Tensor& x = g.value(input);
    if (x.rank() != 3) throw ShapeError("mean_pool2d: input must be HxWxC, got " + to_string(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (window == 0 || h % window != 0 || w % window != 0) {
        throw ShapeError("mean_pool2d: " + to_string(x.shape()) + " not divisible by window " + std::to_string(window));
    }
    const std::size_t ho = h / window, wo = w / window;
    const double inv = 1.0 / static_cast<double>(window * window);
    Tensor out({ho, wo, c});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
            for (std::size_t ch = 0; ch < c; ++ch) out.at(y / window, xx / window, ch) += inv * x.at(y, xx, ch);
        }
    }
    return g.record(std::move(out), {input},
        [=](Graph& gr, const Tensor& up) {
            Tensor& gx = gr.grad_buffer(input);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    for (std::size_t ch = 0; ch < c; ++ch) gx.at(y, xx, ch) += inv * up.at(y / window, xx / window, ch);
                }
            }
        },
        "mean_pool2d");
}

/// H x W x C -> [C] spatial mean.
inline Var global_average_pool(Graph& g, Var input) {
    const Tensor& x = g.value(input);
    if (x.rank() != 3) throw ShapeError("global_average_pool: input must be HxWxC, got " + to_string(x.shape()));
    const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out({c});
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] += inv * x[p * c + ch];
    }
    return g.record(std::move(out), {input},
        [=](Graph& gr, const Tensor& up) {
            Tensor& gx = gr.grad_buffer(input);
            for (std::size_t p = 0; p < hw; ++p) {
                for (std::size_t ch = 0; ch < c; ++ch) gx[p * c + ch] += inv * up[ch];
            }
        },
        "global_average_pool");
}

inline Var add(Graph& g, Var a, Var b) {
    Tensor out = g.value(a);
    out += g.value(b);
    return g.record(std::move(out), {a, b},
        [=](Graph& gr, const Tensor& up) {
            if (gr.requires_grad(a)) gr.grad_buffer(a) += up;
            if (gr.requires_grad(b)) gr.grad_buffer(b) += up;
        },
        "add");
}

inline Var scale(Graph& g, Var a, double s) {
    Tensor out = g.value(a) * s;
    return g.record(std::move(out), {a},
        [=](Graph& gr, const Tensor& up) {
            Tensor& ga = gr.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * up[i];
        },
        "scale");
}

/// Sum of all elements, as a [1] tensor.
inline Var sum(Graph& g, Var a) {
    return g.record(Tensor::scalar(g.value(a).sum()), {a},
        [=](Graph& gr, const Tensor& up) {
            Tensor& ga = gr.grad_buffer(a);
            for (double& v : ga.data()) v += up[0];
        },
        "sum");
}

/// weights[0] * a + weights[1] * b for a two-element weight vector.
inline Var weighted_pair(Graph& g, Var weights, Var a, Var b) {
    const Tensor& w = g.value(weights);
    if (w.size() != 2) throw ShapeError("weighted_pair: weights must have two elements, got " + to_string(w.shape()));
    const Tensor& av = g.value(a);
    av.require_same_shape(g.value(b), "weighted_pair");
    Tensor out(av.shape());
    const Tensor& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[0] * av[i] + w[1] * bv[i];
    return g.record(std::move(out), {weights, a, b},
        [=](Graph& gr, const Tensor& up) {
            const Tensor& wv = gr.value(weights);
            const Tensor& x = gr.value(a);
            const Tensor& y = gr.value(b);
            if (gr.requires_grad(weights)) {
                Tensor& gw = gr.grad_buffer(weights);
                for (std::size_t i = 0; i < up.size(); ++i) {
                    gw[0] += up[i] * x[i];
                    gw[1] += up[i] * y[i];
                }
            }
            if (gr.requires_grad(a)) {
                Tensor& ga = gr.grad_buffer(a);
                for (std::size_t i = 0; i < up.size(); ++i) ga[i] += wv[0] * up[i];
            }
            if (gr.requires_grad(b)) {
                Tensor& gb = gr.grad_buffer(b);
                for (std::size_t i = 0; i < up.size(); ++i) gb[i] += wv[1] * up[i];
            }
        },
        "weighted_pair");
}

}  // namespace gmoe
