#include "pimae/diff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "pimae/error.hpp"

namespace pimae::diff {

namespace {

std::atomic<std::uint64_t> next_node_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (element_count(shape) != values.size()) {
        fail(ErrorKind::ShapeMismatch,
             "shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        fail(ErrorKind::ShapeMismatch, std::string(op) + " expects a 2-D tensor, got " + shape_string(t.shape()));
    }
}

bool is_row_of(const Tensor& row, const Tensor& a) {
    if (a.rank() != 2) return false;
    const auto& s = row.shape();
    return (s.size() == 1 && s[0] == a.cols()) || (s.size() == 2 && s[0] == 1 && s[1] == a.cols());
}

}  // namespace

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::vector<double>& Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(new_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(new_node(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = element_count(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() == 1) return 1;
    return s.empty() ? 1 : size() / s.back();
}

std::size_t Tensor::cols() const { return shape().empty() ? 1 : shape().back(); }

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
    if (size() != 1) fail(ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }

std::span<const double> Tensor::grad() const { return node_->ensure_grad(); }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

void Tensor::backward() const {
    if (size() != 1) fail(ErrorKind::ShapeMismatch, "backward() needs a scalar, got " + shape_string(shape()));
    Graph(*this).backward();
}

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Tensor Tensor::clone() const {
    auto node = new_node(shape(), node_->value, node_->requires_grad && node_->leaf);
    return Tensor(std::move(node));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward) {
    for (double v : values) {
        if (!std::isfinite(v)) fail(ErrorKind::NonFinite, std::string("non-finite output from ") + op);
    }
    const bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
        return t.requires_grad();
    });
    auto node = new_node(std::move(shape), std::move(values), needs_grad);
    node->leaf = false;
    node->op = op;
    if (needs_grad) {
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

std::span<double> accumulate_into(const Tensor& input) {
    if (!input.requires_grad()) return {};
    return input.node()->ensure_grad();
}

Graph::Graph(const Tensor& root) : root_(root) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        order_.push_back(n);
        for (const auto& in : n->inputs) stack.push_back(in.node());
    }
    // Ids grow with creation, so descending id is a reverse topological order.
    std::sort(order_.begin(), order_.end(), [](const Node* a, const Node* b) { return a->id > b->id; });
}

void Graph::backward(double seed) const {
    Node* root = root_.node();
    if (!root->requires_grad) return;
    // Each pass accumulates into zeroed buffers; leaves add the pass total to
    // what they held before, so repeated passes sum exactly.
    std::vector<std::pair<Node*, std::vector<double>>> held;
    for (Node* n : order_) {
        if (n->leaf && !n->grad.empty()) held.emplace_back(n, std::move(n->grad));
        n->grad.assign(n->value.size(), 0.0);
    }
    for (auto& g : root->grad) g += seed;
    for (Node* n : order_) {
        if (n->leaf || !n->backward) continue;
        n->backward(n->grad);
    }
    for (auto& [n, before] : held) {
        for (std::size_t i = 0; i < before.size(); ++i) n->grad[i] += before[i];
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t n = a.dim(0), p = a.dim(1), q = b.dim(1);
    if (b.dim(0) != p) {
        fail(ErrorKind::ShapeMismatch, "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(n * q, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < p; ++k) {
            const double aik = av[i * p + k];
            const double* brow = bv.data() + k * q;
            double* orow = out.data() + i * q;
            for (std::size_t j = 0; j < q; ++j) orow[j] += aik * brow[j];
        }
    }
    return make_result("matmul", {n, q}, std::move(out), {a, b}, [a, b, n, p, q](std::span<const double> g) {
        const auto av = a.values();
        const auto bv = b.values();
        if (auto ga = accumulate_into(a); !ga.empty()) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < p; ++k) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < q; ++j) acc += g[i * q + j] * bv[k * q + j];
                    ga[i * p + k] += acc;
                }
            }
        }
        if (auto gb = accumulate_into(b); !gb.empty()) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < p; ++k) {
                    const double aik = av[i * p + k];
                    for (std::size_t j = 0; j < q; ++j) gb[k * q + j] += aik * g[i * q + j];
                }
            }
        }
    });
}

namespace {

Tensor add_scaled(const Tensor& a, const Tensor& b, double sign, const char* op) {
    const bool broadcast = a.shape() != b.shape();
    if (broadcast && !is_row_of(b, a)) {
        fail(ErrorKind::ShapeMismatch,
             std::string(op) + " " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const std::size_t cols = broadcast ? a.cols() : a.size();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[broadcast ? i % cols : i];
    return make_result(op, a.shape(), std::move(out), {a, b}, [a, b, sign, broadcast, cols](std::span<const double> g) {
        if (auto ga = accumulate_into(a); !ga.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (auto gb = accumulate_into(b); !gb.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % cols : i] += sign * g[i];
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::ShapeMismatch, "mul " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
        const auto av = a.values();
        const auto bv = b.values();
        if (auto ga = accumulate_into(a); !ga.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (auto gb = accumulate_into(b); !gb.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
    return make_result("scale", a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
        auto ga = accumulate_into(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    }
    return make_result("transpose", {c, r}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
        auto ga = accumulate_into(a);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (element_count(shape) != a.size()) {
        fail(ErrorKind::ShapeMismatch, "reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [a](std::span<const double> g) {
        auto ga = accumulate_into(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) fail(ErrorKind::ShapeMismatch, "concat of nothing");
    if (axis > 1) fail(ErrorKind::ShapeMismatch, "concat axis must be 0 or 1");
    for (const auto& p : parts) require_rank2(p, "concat");
    const std::size_t fixed = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if ((axis == 0 ? p.dim(1) : p.dim(0)) != fixed) {
            fail(ErrorKind::ShapeMismatch, "concat parts disagree: " + shape_string(parts[0].shape()) + " vs " +
                                               shape_string(p.shape()));
        }
        total += axis == 0 ? p.dim(0) : p.dim(1);
    }
    Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    std::vector<double> out(total * fixed);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto pv = p.values();
        if (axis == 0) {
            std::copy(pv.begin(), pv.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * fixed));
            offset += p.dim(0);
        } else {
            const std::size_t w = p.dim(1);
            for (std::size_t r = 0; r < fixed; ++r) {
                for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = pv[r * w + c];
            }
            offset += w;
        }
    }
    return make_result("concat", std::move(shape), std::move(out), parts,
                       [parts, axis, fixed, total](std::span<const double> g) {
                           std::size_t offset = 0;
                           for (const auto& p : parts) {
                               auto gp = accumulate_into(p);
                               if (axis == 0) {
                                   if (!gp.empty()) {
                                       for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[offset * fixed + i];
                                   }
                                   offset += p.dim(0);
                               } else {
                                   const std::size_t w = p.dim(1);
                                   if (!gp.empty()) {
                                       for (std::size_t r = 0; r < fixed; ++r) {
                                           for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offset + c];
                                       }
                                   }
                                   offset += w;
                               }
                           }
                       });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    require_rank2(a, "gather_rows");
    const std::size_t n = a.dim(0), d = a.dim(1);
    std::vector<std::size_t> index(rows.begin(), rows.end());
    const auto av = a.values();
    std::vector<double> out(index.size() * d);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) {
            fail(ErrorKind::OutOfBounds, "gather row " + std::to_string(index[i]) + " of " + std::to_string(n));
        }
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(index[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const std::size_t count = index.size();
    return make_result("gather_rows", {count, d}, std::move(out), {a},
                       [a, index = std::move(index), d](std::span<const double> g) {
                           auto ga = accumulate_into(a);
                           for (std::size_t i = 0; i < index.size(); ++i) {
                               for (std::size_t j = 0; j < d; ++j) ga[index[i] * d + j] += g[i * d + j];
                           }
                       });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    std::vector<std::size_t> rows;
    for (std::size_t r = begin; r < end; ++r) rows.push_back(r);
    return gather_rows(a, rows);
}

Tensor mean(const Tensor& a) {
    const auto av = a.values();
    double acc = 0.0;
    for (double v : av) acc += v;
    const double n = static_cast<double>(av.size());
    return make_result("mean", {1}, {acc / n}, {a}, [a, n](std::span<const double> g) {
        auto ga = accumulate_into(a);
        const double share = g[0] / n;
        for (auto& x : ga) x += share;
    });
}

Tensor softmax(const Tensor& a) {
    const std::size_t d = a.cols(), r = a.rows();
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = av.data() + i * d;
        double* y = out.data() + i * d;
        const double mx = *std::max_element(x, x + d);
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            total += y[j];
        }
        for (std::size_t j = 0; j < d; ++j) y[j] /= total;
    }
    auto result_values = out;
    return make_result("softmax", a.shape(), std::move(out), {a},
                       [a, y = std::move(result_values), r, d](std::span<const double> g) {
                           auto ga = accumulate_into(a);
                           for (std::size_t i = 0; i < r; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
                               for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += y[i * d + j] * (g[i * d + j] - dot);
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.cols(), r = x.rows();
    if (gamma.size() != d || beta.size() != d) {
        fail(ErrorKind::ShapeMismatch, "layer_norm affine of size " + std::to_string(gamma.size()) + "/" +
                                           std::to_string(beta.size()) + " for width " + std::to_string(d));
    }
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<double> normalized(xv.size());
    std::vector<double> inv_std(r);
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = xv.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            normalized[i * d + j] = (row[j] - mu) * inv_std[i];
            out[i * d + j] = normalized[i * d + j] * gv[j] + bv[j];
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(normalized), inv_std = std::move(inv_std), r,
                        d](std::span<const double> g) {
                           const auto gv = gamma.values();
                           if (auto gx = accumulate_into(x); !gx.empty()) {
                               std::vector<double> dxhat(d);
                               for (std::size_t i = 0; i < r; ++i) {
                                   double mean_d = 0.0, mean_dx = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dxhat[j] = g[i * d + j] * gv[j];
                                       mean_d += dxhat[j];
                                       mean_dx += dxhat[j] * xhat[i * d + j];
                                   }
                                   mean_d /= static_cast<double>(d);
                                   mean_dx /= static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       gx[i * d + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
                                   }
                               }
                           }
                           if (auto gg = accumulate_into(gamma); !gg.empty()) {
                               for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                               }
                           }
                           if (auto gb = accumulate_into(beta); !gb.empty()) {
                               for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                               }
                           }
                       });
}

namespace {
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);
constexpr double kGeluCubic = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v)));
    }
    return make_result("gelu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
        const auto xv = x.values();
        auto gx = accumulate_into(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
            const double dt = (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
            gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank2(x, "linear");
    require_rank2(w, "linear");
    const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    if (w.dim(0) != in || b.size() != out_dim) {
        fail(ErrorKind::ShapeMismatch, "linear " + shape_string(x.shape()) + " with weight " +
                                           shape_string(w.shape()) + " and bias " + shape_string(b.shape()));
    }
    const auto xv = x.values();
    const auto wv = w.values();
    const auto bv = b.values();
    std::vector<double> out(n * out_dim);
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.data() + i * out_dim;
        std::copy(bv.begin(), bv.end(), orow);
        for (std::size_t k = 0; k < in; ++k) {
            const double xik = xv[i * in + k];
            const double* wrow = wv.data() + k * out_dim;
            for (std::size_t j = 0; j < out_dim; ++j) orow[j] += xik * wrow[j];
        }
    }
    return make_result("linear", {n, out_dim}, std::move(out), {x, w, b},
                       [x, w, b, n, in, out_dim](std::span<const double> g) {
                           const auto xv = x.values();
                           const auto wv = w.values();
                           if (auto gx = accumulate_into(x); !gx.empty()) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t k = 0; k < in; ++k) {
                                       double acc = 0.0;
                                       const double* wrow = wv.data() + k * out_dim;
                                       const double* grow = g.data() + i * out_dim;
                                       for (std::size_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                                       gx[i * in + k] += acc;
                                   }
                               }
                           }
                           if (auto gw = accumulate_into(w); !gw.empty()) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double* grow = g.data() + i * out_dim;
                                   for (std::size_t k = 0; k < in; ++k) {
                                       const double xik = xv[i * in + k];
                                       double* gwrow = gw.data() + k * out_dim;
                                       for (std::size_t j = 0; j < out_dim; ++j) gwrow[j] += xik * grow[j];
                                   }
                               }
                           }
                           if (auto gb = accumulate_into(b); !gb.empty()) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                               }
                           }
                       });
}

Tensor group_max(const Tensor& x, std::size_t group) {
    require_rank2(x, "group_max");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (group == 0 || n % group != 0) {
        fail(ErrorKind::ShapeMismatch, "group_max of " + std::to_string(n) + " rows by " + std::to_string(group));
    }
    const std::size_t groups = n / group;
    const auto xv = x.values();
    std::vector<double> out(groups * d);
    std::vector<std::size_t> argmax(groups * d);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t j = 0; j < d; ++j) {
            std::size_t best = gi * group;
            for (std::size_t r = gi * group + 1; r < (gi + 1) * group; ++r) {
                if (xv[r * d + j] > xv[best * d + j]) best = r;
            }
            argmax[gi * d + j] = best;
            out[gi * d + j] = xv[best * d + j];
        }
    }
    return make_result("group_max", {groups, d}, std::move(out), {x},
                       [x, argmax = std::move(argmax), d](std::span<const double> g) {
                           auto gx = accumulate_into(x);
                           for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i] * d + i % d] += g[i];
                       });
}

Tensor bilinear_sample_2d(const Tensor& features, std::size_t rows, std::size_t cols,
                          std::span<const std::array<double, 2>> samples) {
    require_rank2(features, "bilinear_sample_2d");
    if (rows == 0 || cols == 0 || features.dim(0) != rows * cols) {
        fail(ErrorKind::ShapeMismatch, "bilinear grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                                           " over " + shape_string(features.shape()));
    }
    const std::size_t d = features.dim(1);
    struct Tap {
        std::array<std::size_t, 4> cell;
        std::array<double, 4> weight;
    };
    std::vector<Tap> taps;
    taps.reserve(samples.size());
    for (const auto& s : samples) {
        const double x = std::clamp(s[0], 0.0, static_cast<double>(cols - 1));
        const double y = std::clamp(s[1], 0.0, static_cast<double>(rows - 1));
        const auto x0 = static_cast<std::size_t>(std::floor(x));
        const auto y0 = static_cast<std::size_t>(std::floor(y));
        const std::size_t x1 = std::min(x0 + 1, cols - 1);
        const std::size_t y1 = std::min(y0 + 1, rows - 1);
        const double wx = x - static_cast<double>(x0);
        const double wy = y - static_cast<double>(y0);
        taps.push_back({{y0 * cols + x0, y0 * cols + x1, y1 * cols + x0, y1 * cols + x1},
                        {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy}});
    }
    const auto fv = features.values();
    std::vector<double> out(taps.size() * d, 0.0);
    for (std::size_t i = 0; i < taps.size(); ++i) {
        for (int t = 0; t < 4; ++t) {
            const double w = taps[i].weight[t];
            const double* src = fv.data() + taps[i].cell[t] * d;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * src[j];
        }
    }
    const std::size_t n = taps.size();
    return make_result("bilinear_sample_2d", {n, d}, std::move(out), {features},
                       [features, taps = std::move(taps), d](std::span<const double> g) {
                           auto gf = accumulate_into(features);
                           for (std::size_t i = 0; i < taps.size(); ++i) {
                               for (int t = 0; t < 4; ++t) {
                                   const double w = taps[i].weight[t];
                                   double* dst = gf.data() + taps[i].cell[t] * d;
                                   for (std::size_t j = 0; j < d; ++j) dst[j] += w * g[i * d + j];
                               }
                           }
                       });
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params, double eps) {
    auto evaluate = [&f]() {
        const double v = f().item();
        if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "grad_check objective is not finite");
        return v;
    };
    std::vector<Tensor> ps(params.begin(), params.end());
    for (auto& p : ps) p.zero_grad();
    Tensor root = f();
    if (!std::isfinite(root.item())) fail(ErrorKind::NonFinite, "grad_check objective is not finite");
    root.backward();

    GradCheckResult result;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        auto& p = ps[pi];
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double plus = evaluate();
            values[i] = saved - eps;
            const double minus = evaluate();
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double rel = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
            ++result.coordinates;
            if (rel > result.max_relative_error || result.coordinates == 1) {
                result.max_relative_error = std::max(rel, result.max_relative_error);
                result.worst_param = pi;
                result.worst_index = i;
                result.analytic = analytic[i];
                result.numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace pimae::diff
