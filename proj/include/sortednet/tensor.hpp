#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sortednet/error.hpp"

namespace sortednet {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense row-major f64 tensor. Handles are value types; the payload is shared,
// so copying a Tensor never copies data. Tensors that appear on a tape are
// treated as immutable.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& vec() { return *data_; }
    const std::vector<double>& vec() const { return *data_; }
    const std::shared_ptr<std::vector<double>>& storage() const { return data_; }

    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool rg) { requires_grad_ = rg; }

    std::int64_t id() const { return id_; }
    bool defined() const { return static_cast<bool>(data_); }

    // Same storage, new shape handle (no tape node; numel must match).
    Tensor reshaped(Shape new_shape) const;

    Tensor clone() const; // deep copy, fresh id, requires_grad preserved

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    std::int64_t id_ = -1;

    static std::int64_t next_id();
};

// Accumulates gradients keyed by tensor id during a backward pass.
class GradAccum {
public:
    // Returns the (lazily zero-initialized) gradient buffer for a tensor.
    std::vector<double>& at(const Tensor& t);
    const std::vector<double>* find(std::int64_t id) const;
    bool has(std::int64_t id) const { return grads_.count(id) != 0; }

private:
    std::unordered_map<std::int64_t, std::vector<double>> grads_;
};

// One recorded operation: operands, output, and the rule that routes the
// output gradient back into operand gradients.
struct TapeNode {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    // backward(out_grad, accum, wants) where wants[i] tells whether input i
    // needs a gradient at all.
    std::function<void(const std::vector<double>&, GradAccum&, const std::vector<bool>&)> backward;
};

// Gradient map produced by backward(): one entry per requires_grad tensor
// that was recorded on the tape. Tensors recorded but unreachable from the
// loss get an exact zero gradient.
class GradMap {
public:
    void put(const Tensor& t, std::vector<double> g);
    bool contains(const Tensor& t) const { return by_id_.count(t.id()) != 0; }
    bool contains_id(std::int64_t id) const { return by_id_.count(id) != 0; }
    const std::vector<double>& of(const Tensor& t) const;
    const std::vector<double>* find_id(std::int64_t id) const;
    std::size_t size() const { return by_id_.size(); }

private:
    std::unordered_map<std::int64_t, std::vector<double>> by_id_;
};

// Append-only record of one forward pass. Append order is a topological
// order by construction: an op can only consume tensors that already exist.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(TapeNode node);
    bool tracked(std::int64_t id) const { return tracked_.count(id) != 0; }
    std::size_t size() const { return nodes_.size(); }
    void clear();

    // Reverse-mode sweep from a scalar loss. Does not mutate the tape, so
    // repeated calls give identical results.
    GradMap backward(const Tensor& loss) const;

private:
    std::vector<TapeNode> nodes_;
    std::unordered_set<std::int64_t> tracked_;
    std::vector<Tensor> grad_leaves_; // requires_grad tensors seen as operands
    std::unordered_set<std::int64_t> grad_leaf_ids_;
};

// Thread-local active tape. Ops record onto it when set and when any operand
// carries gradient history. With no active tape, ops are pure computation.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

GradMap backward(Tape& tape, const Tensor& loss);

// ---- primitive ops ----------------------------------------------------
// All ops validate shapes and throw SnError("shape_mismatch", ...) naming the
// op and both shapes on violation.

Tensor matmul(const Tensor& a, const Tensor& b); // [..,m,k] x [k,n] -> [..,m,n]
Tensor add(const Tensor& a, const Tensor& b);    // b broadcast over leading axes
Tensor sub(const Tensor& a, const Tensor& b);    // same-shape
Tensor mul(const Tensor& a, const Tensor& b);    // elementwise; b broadcast over leading axes
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& a);                      // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);                 // last axis
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels); // mean NLL
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int num_heads);               // [B,T,H*Dh] each
Tensor slice_rows(const Tensor& a, int rows);         // first rows of a 2-D tensor
Tensor slice_cols(const Tensor& a, int cols);         // first cols of a 2-D tensor
Tensor reshape(const Tensor& a, Shape new_shape);     // recorded alias
Tensor sum_all(const Tensor& a);                      // -> scalar
Tensor mean_all(const Tensor& a);                     // -> scalar
Tensor transpose2d(const Tensor& a);

// ---- raw matmul kernels (shared with the no-tape inference path) -------
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n); // c += a*b
void mm_nt(const double* a, const double* b, double* c, int m, int n, int k); // c += a*b^T, a[m,n] b[k,n]
void mm_tn(const double* a, const double* g, double* c, int m, int k, int n); // c += a^T*g, a[m,k] g[m,n]

} // namespace sortednet
