#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Reverse-mode differentiation over row-major 64-bit tensors.
//
// A Tensor is a shared handle to a node. Every primitive records its inputs
// and a backward closure; Graph walks the nodes reachable from a scalar root
// in reverse creation order. Leaf gradients accumulate across backward calls
// until zero_grad(); interior gradients are reset at the start of each pass.

namespace pimae::diff {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;

class Tensor {
   public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor parameter(Shape shape, std::vector<double> values);
    static Tensor zeros(Shape shape);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
    std::size_t size() const;
    // 2-D views; rank-1 tensors read as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t row, std::size_t col) const { return values()[row * cols() + col]; }

    bool requires_grad() const;
    bool is_leaf() const;
    /// Gradient buffer; zeros when nothing has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Backpropagates from this scalar with seed 1.
    void backward() const;

    /// Same values, cut from the graph.
    Tensor detach() const;
    /// Deep copy of values; parameters stay parameters, grads are not copied.
    Tensor clone() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

   private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                              std::function<void(std::span<const double>)>);
    friend class Graph;

    std::shared_ptr<Node> node_;
};

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::uint64_t id = 0;
    std::vector<Tensor> inputs;
    std::function<void(std::span<const double>)> backward;

    std::vector<double>& ensure_grad();
};

/// Builds an op result. The finite check runs here so every primitive trips
/// NonFinite on its own output. `backward` receives the output gradient and
/// must accumulate into inputs through accumulate_into().
Tensor make_result(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward);

/// Gradient buffer of an input that requires grad, or an empty span.
std::span<double> accumulate_into(const Tensor& input);

/// Nodes reachable from a root that take part in differentiation, in the
/// order backward visits them.
class Graph {
   public:
    explicit Graph(const Tensor& root);

    std::size_t size() const { return order_.size(); }
    void backward(double seed = 1.0) const;

   private:
    Tensor root_;
    std::vector<Node*> order_;
};

// Primitives. Shapes are 2-D unless noted.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise sum; `b` may also be a row ({d} or {1,d}) broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// axis 0 stacks rows, axis 1 stacks columns.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Rows of `a` picked by index; repeats allowed, backward scatter-adds.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Mean of every element, shape {1}.
Tensor mean(const Tensor& a);
/// Row-wise softmax over the last axis with max subtraction.
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Tanh approximation.
Tensor gelu(const Tensor& x);
/// x[n,in] * w[in,out] + b[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Max over consecutive blocks of `group` rows: [g*group, d] -> [g, d].
Tensor group_max(const Tensor& x, std::size_t group);

/// Bilinear interpolation of a rows x cols grid of feature rows
/// ([rows*cols, d], row-major cells). Sample coordinates are in cell units
/// with cell (r, c) at (x=c, y=r) and are clamped to [0,cols-1] x [0,rows-1].
/// Differentiable with respect to the features only.
Tensor bilinear_sample_2d(const Tensor& features, std::size_t rows, std::size_t cols,
                          std::span<const std::array<double, 2>> samples);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

/// Compares the analytic gradient of a scalar `f` with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) per coordinate. Relative error is
/// |a - n| / max(1e-8, |a| + |n|). Throws NonFinite if f is not finite.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params, double eps = 1e-5);

}  // namespace pimae::diff
