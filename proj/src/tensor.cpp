#include "sortednet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace sortednet {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

static void require_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
    if (!ok) {
        sn_fail("shape_mismatch", std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
}

static void require_positive_shape(const char* op, const Shape& s) {
    for (int d : s) {
        if (d <= 0) sn_fail("shape_mismatch", std::string(op) + ": non-positive dimension in " + shape_str(s));
    }
}

#ifndef NDEBUG
static void debug_check_finite(const Tensor& t, const char* op) {
    for (double v : t.vec()) {
        if (!std::isfinite(v)) {
            sn_fail("non_finite", std::string(op) + ": produced non-finite value");
        }
    }
}
#else
static void debug_check_finite(const Tensor&, const char*) {}
#endif

std::int64_t Tensor::next_id() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_numel(shape_)), 0.0)),
      requires_grad_(requires_grad),
      id_(next_id()) {
    require_positive_shape("tensor", shape_);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))),
      requires_grad_(requires_grad),
      id_(next_id()) {
    require_positive_shape("tensor", shape_);
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size())) {
        sn_fail("shape_mismatch", "tensor: " + shape_str(shape_) + " does not match value count " + std::to_string(data_->size()));
    }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), v);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) sn_fail("shape_mismatch", "item: tensor " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        sn_fail("shape_mismatch", "reshape: " + shape_str(shape_) + " to " + shape_str(new_shape));
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    t.requires_grad_ = requires_grad_;
    t.id_ = next_id();
    return t;
}

Tensor Tensor::clone() const {
    Tensor t(shape_, *data_, requires_grad_);
    return t;
}

// ---- GradAccum / GradMap ------------------------------------------------

std::vector<double>& GradAccum::at(const Tensor& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        it = grads_.emplace(t.id(), std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0)).first;
    }
    return it->second;
}

const std::vector<double>* GradAccum::find(std::int64_t id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
}

void GradMap::put(const Tensor& t, std::vector<double> g) { by_id_[t.id()] = std::move(g); }

const std::vector<double>& GradMap::of(const Tensor& t) const {
    auto it = by_id_.find(t.id());
    if (it == by_id_.end()) sn_fail("missing_grad", "gradient map has no entry for tensor id " + std::to_string(t.id()));
    return it->second;
}

const std::vector<double>* GradMap::find_id(std::int64_t id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &it->second;
}

// ---- Tape ----------------------------------------------------------------

void Tape::record(TapeNode node) {
    for (const Tensor& in : node.inputs) {
        if (in.requires_grad() && grad_leaf_ids_.insert(in.id()).second) {
            grad_leaves_.push_back(in);
        }
    }
    tracked_.insert(node.output.id());
    nodes_.push_back(std::move(node));
}

void Tape::clear() {
    nodes_.clear();
    tracked_.clear();
    grad_leaves_.clear();
    grad_leaf_ids_.clear();
}

GradMap Tape::backward(const Tensor& loss) const {
    if (loss.numel() != 1) {
        sn_fail("non_scalar_loss", "backward: loss has shape " + shape_str(loss.shape()));
    }
    GradAccum accum;
    accum.at(loss)[0] = 1.0;

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        const TapeNode& node = nodes_[i];
        const std::vector<double>* out_grad = accum.find(node.output.id());
        if (out_grad == nullptr) continue; // not on a path to the loss
        std::vector<bool> wants(node.inputs.size());
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
            const Tensor& in = node.inputs[j];
            wants[j] = in.requires_grad() || tracked_.count(in.id()) != 0;
        }
        node.backward(*out_grad, accum, wants);
    }

    GradMap result;
    for (const Tensor& leaf : grad_leaves_) {
        const std::vector<double>* g = accum.find(leaf.id());
        if (g != nullptr) {
            result.put(leaf, *g);
        } else {
            result.put(leaf, std::vector<double>(static_cast<std::size_t>(leaf.numel()), 0.0));
        }
    }
    return result;
}

GradMap backward(Tape& tape, const Tensor& loss) { return tape.backward(loss); }

namespace {
thread_local Tape* g_active_tape = nullptr;
} // namespace

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

static bool should_record(std::initializer_list<const Tensor*> ins) {
    Tape* tape = g_active_tape;
    if (tape == nullptr) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad() || tape->tracked(t->id())) return true;
    }
    return false;
}

// ---- matmul kernels -------------------------------------------------------

void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        double* cr = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, int m, int n, int k) {
    // c[m,k] += a[m,n] * b[k,n]^T
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * n;
        double* cr = c + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* br = b + static_cast<std::size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += ar[j] * br[j];
            cr[p] += acc;
        }
    }
}

void mm_tn(const double* a, const double* g, double* c, int m, int k, int n) {
    // c[k,n] += a[m,k]^T * g[m,n]
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        const double* gr = g + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            double* cr = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * gr[j];
        }
    }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_shape(a.ndim() >= 2 && b.ndim() == 2 && a.shape().back() == b.dim(0),
                  "matmul", a.shape(), b.shape());
    const int k = b.dim(0);
    const int n = b.dim(1);
    const int m = static_cast<int>(a.numel() / k);

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out(out_shape);
    mm_nn(a.data(), b.data(), out.data(), m, k, n);
    debug_check_finite(out, "matmul");

    if (should_record({&a, &b})) {
        TapeNode node;
        node.op = "matmul";
        node.inputs = {a, b};
        node.output = out;
        node.backward = [a, b, m, k, n](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (wants[0]) mm_nt(dy.data(), b.data(), acc.at(a).data(), m, n, k);
            if (wants[1]) mm_tn(a.data(), dy.data(), acc.at(b).data(), m, k, n);
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

// b must be same-shape, scalar, or a suffix of a's shape
static bool broadcast_ok(const Shape& a, const Shape& b) {
    if (shape_numel(b) == 1) return true;
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

static void reduce_to_suffix(const std::vector<double>& dy, std::vector<double>& db, std::int64_t bn) {
    const std::int64_t total = static_cast<std::int64_t>(dy.size());
    for (std::int64_t i = 0; i < total; ++i) db[static_cast<std::size_t>(i % bn)] += dy[static_cast<std::size_t>(i)];
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_shape(broadcast_ok(a.shape(), b.shape()), "add", a.shape(), b.shape());
    const std::int64_t an = a.numel();
    const std::int64_t bn = b.numel();
    Tensor out(a.shape());
    const double* ap = a.data();
    const double* bp = b.data();
    double* op = out.data();
    if (bn == 1) {
        const double bv = bp[0];
        for (std::int64_t i = 0; i < an; ++i) op[i] = ap[i] + bv;
    } else {
        for (std::int64_t i = 0; i < an; ++i) op[i] = ap[i] + bp[i % bn];
    }
    debug_check_finite(out, "add");

    if (should_record({&a, &b})) {
        TapeNode node;
        node.op = "add";
        node.inputs = {a, b};
        node.output = out;
        node.backward = [a, b, bn](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (wants[0]) {
                std::vector<double>& da = acc.at(a);
                for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
            }
            if (wants[1]) reduce_to_suffix(dy, acc.at(b), bn);
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_shape(a.shape() == b.shape(), "sub", a.shape(), b.shape());
    Tensor out(a.shape());
    const double* ap = a.data();
    const double* bp = b.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] - bp[i];
    debug_check_finite(out, "sub");

    if (should_record({&a, &b})) {
        TapeNode node;
        node.op = "sub";
        node.inputs = {a, b};
        node.output = out;
        node.backward = [a, b](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (wants[0]) {
                std::vector<double>& da = acc.at(a);
                for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
            }
            if (wants[1]) {
                std::vector<double>& db = acc.at(b);
                for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_shape(broadcast_ok(a.shape(), b.shape()), "mul", a.shape(), b.shape());
    const std::int64_t bn = b.numel();
    Tensor out(a.shape());
    const double* ap = a.data();
    const double* bp = b.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] * bp[i % bn];
    debug_check_finite(out, "mul");

    if (should_record({&a, &b})) {
        TapeNode node;
        node.op = "mul";
        node.inputs = {a, b};
        node.output = out;
        node.backward = [a, b, bn](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            const double* ap = a.data();
            const double* bp = b.data();
            if (wants[0]) {
                std::vector<double>& da = acc.at(a);
                for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bp[i % static_cast<std::size_t>(bn)];
            }
            if (wants[1]) {
                std::vector<double>& db = acc.at(b);
                for (std::size_t i = 0; i < dy.size(); ++i) db[i % static_cast<std::size_t>(bn)] += dy[i] * ap[i];
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* ap = a.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] * c;
    debug_check_finite(out, "scale");

    if (should_record({&a})) {
        TapeNode node;
        node.op = "scale";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, c](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * c;
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    const double* ap = a.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] > 0.0 ? ap[i] : 0.0;

    if (should_record({&a})) {
        TapeNode node;
        node.op = "relu";
        node.inputs = {a};
        node.output = out;
        node.backward = [a](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            const double* ap = a.data();
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += ap[i] > 0.0 ? dy[i] : 0.0;
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

static const double kInvSqrt2 = 0.7071067811865476;
static const double kInvSqrt2Pi = 0.3989422804014327;

Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    const double* ap = a.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double x = ap[i];
        op[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    debug_check_finite(out, "gelu");

    if (should_record({&a})) {
        TapeNode node;
        node.op = "gelu";
        node.inputs = {a};
        node.output = out;
        node.backward = [a](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            const double* ap = a.data();
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                const double x = ap[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                da[i] += dy[i] * (cdf + x * pdf);
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor softmax(const Tensor& a) {
    require_shape(a.ndim() >= 1, "softmax", a.shape(), a.shape());
    const int n = a.shape().back();
    const std::int64_t rows = a.numel() / n;
    Tensor out(a.shape());
    const double* ap = a.data();
    double* op = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = ap + r * n;
        double* y = op + r * n;
        double mx = x[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        const double inv = 1.0 / sum;
        for (int i = 0; i < n; ++i) y[i] *= inv;
    }
    debug_check_finite(out, "softmax");

    if (should_record({&a})) {
        TapeNode node;
        node.op = "softmax";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, out, n, rows](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            const double* yp = out.data();
            std::vector<double>& da = acc.at(a);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* y = yp + r * n;
                const double* g = dy.data() + r * n;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += g[i] * y[i];
                double* d = da.data() + r * n;
                for (int i = 0; i < n; ++i) d[i] += (g[i] - dot) * y[i];
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int n = x.shape().back();
    require_shape(gain.shape() == Shape{n}, "layer_norm", x.shape(), gain.shape());
    require_shape(bias.shape() == Shape{n}, "layer_norm", x.shape(), bias.shape());
    const std::int64_t rows = x.numel() / n;

    Tensor out(x.shape());
    // normalized activations and inverse stddev are needed by the backward rule
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));

    const double* xp = x.data();
    const double* gp = gain.data();
    const double* bp = bias.data();
    double* op = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xp + r * n;
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += row[i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            const double d = row[i] - mean;
            var += d * d;
        }
        var /= n;
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = istd;
        double* xh = xhat->data() + r * n;
        double* y = op + r * n;
        for (int i = 0; i < n; ++i) {
            xh[i] = (row[i] - mean) * istd;
            y[i] = xh[i] * gp[i] + bp[i];
        }
    }
    debug_check_finite(out, "layer_norm");

    if (should_record({&x, &gain, &bias})) {
        TapeNode node;
        node.op = "layer_norm";
        node.inputs = {x, gain, bias};
        node.output = out;
        node.backward = [x, gain, bias, xhat, inv_std, n, rows](const std::vector<double>& dy, GradAccum& acc,
                                                                const std::vector<bool>& wants) {
            const double* gp = gain.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* g = dy.data() + r * n;
                const double* xh = xhat->data() + r * n;
                if (wants[1]) {
                    double* dg = acc.at(gain).data();
                    for (int i = 0; i < n; ++i) dg[i] += g[i] * xh[i];
                }
                if (wants[2]) {
                    double* db = acc.at(bias).data();
                    for (int i = 0; i < n; ++i) db[i] += g[i];
                }
                if (wants[0]) {
                    const double istd = (*inv_std)[static_cast<std::size_t>(r)];
                    double mean_dxh = 0.0;
                    double mean_dxh_xh = 0.0;
                    for (int i = 0; i < n; ++i) {
                        const double dxh = g[i] * gp[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    double* dx = acc.at(x).data() + r * n;
                    for (int i = 0; i < n; ++i) {
                        const double dxh = g[i] * gp[i];
                        dx[i] += (dxh - mean_dxh - xh[i] * mean_dxh_xh) * istd;
                    }
                }
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    require_shape(table.ndim() == 2, "embedding_lookup", table.shape(), Shape{static_cast<int>(ids.size())});
    const int v = table.dim(0);
    const int d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            sn_fail("index_out_of_range",
                    "embedding_lookup: id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
        }
    }
    Tensor out(Shape{static_cast<int>(ids.size()), d});
    const double* tp = table.data();
    double* op = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* row = tp + static_cast<std::size_t>(ids[i]) * d;
        std::copy(row, row + d, op + i * d);
    }

    if (should_record({&table})) {
        TapeNode node;
        node.op = "embedding_lookup";
        node.inputs = {table};
        node.output = out;
        node.backward = [table, ids, d](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& dt = acc.at(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* row = dt.data() + static_cast<std::size_t>(ids[i]) * d;
                const double* g = dy.data() + i * d;
                for (int j = 0; j < d; ++j) row[j] += g[j];
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require_shape(logits.ndim() >= 1, "cross_entropy", logits.shape(), Shape{});
    const int c = logits.shape().back();
    const std::int64_t n = logits.numel() / c;
    if (static_cast<std::int64_t>(labels.size()) != n) {
        sn_fail("shape_mismatch", "cross_entropy: logits " + shape_str(logits.shape()) + " but " +
                                      std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
        if (y < 0 || y >= c) sn_fail("index_out_of_range", "cross_entropy: label " + std::to_string(y));
    }

    // softmax probabilities are kept for the backward rule
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(logits.numel()));
    const double* lp = logits.data();
    double loss = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        const double* x = lp + r * c;
        double mx = x[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        double* p = probs->data() + r * c;
        for (int i = 0; i < c; ++i) {
            p[i] = std::exp(x[i] - mx);
            sum += p[i];
        }
        const double inv = 1.0 / sum;
        for (int i = 0; i < c; ++i) p[i] *= inv;
        loss += std::log(sum) + mx - x[labels[static_cast<std::size_t>(r)]];
    }
    loss /= static_cast<double>(n);
    Tensor out = Tensor::scalar(loss);
    debug_check_finite(out, "cross_entropy");

    if (should_record({&logits})) {
        TapeNode node;
        node.op = "cross_entropy";
        node.inputs = {logits};
        node.output = out;
        node.backward = [logits, labels, probs, n, c](const std::vector<double>& dy, GradAccum& acc,
                                                      const std::vector<bool>& wants) {
            if (!wants[0]) return;
            const double g = dy[0] / static_cast<double>(n);
            std::vector<double>& dl = acc.at(logits);
            for (std::int64_t r = 0; r < n; ++r) {
                const double* p = probs->data() + r * c;
                double* d = dl.data() + r * c;
                for (int i = 0; i < c; ++i) d[i] += g * p[i];
                d[labels[static_cast<std::size_t>(r)]] -= g;
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int num_heads) {
    require_shape(q.ndim() == 3 && q.shape() == k.shape() && q.shape() == v.shape(), "causal_attention", q.shape(),
                  k.shape());
    const int b = q.dim(0);
    const int t = q.dim(1);
    const int d = q.dim(2);
    if (num_heads < 1 || d % num_heads != 0) {
        sn_fail("shape_mismatch", "causal_attention: feature dim " + std::to_string(d) + " not divisible by " +
                                      std::to_string(num_heads) + " heads");
    }
    const int hd = d / num_heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor out(q.shape());
    // per (batch, head) attention probabilities, lower-triangular rows
    auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * num_heads * t * t, 0.0);

    const double* qp = q.data();
    const double* kp = k.data();
    const double* vp = v.data();
    double* op = out.data();

    auto idx = [d, t](int bi, int ti, int off) {
        return (static_cast<std::size_t>(bi) * t + ti) * d + off;
    };

    for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < num_heads; ++h) {
            const int off = h * hd;
            double* w_bh = weights->data() + ((static_cast<std::size_t>(bi) * num_heads + h) * t) * t;
            for (int ti = 0; ti < t; ++ti) {
                double* w = w_bh + static_cast<std::size_t>(ti) * t;
                double mx = -1e300;
                for (int u = 0; u <= ti; ++u) {
                    const double* qr = qp + idx(bi, ti, off);
                    const double* kr = kp + idx(bi, u, off);
                    double s = 0.0;
                    for (int j = 0; j < hd; ++j) s += qr[j] * kr[j];
                    s *= scl;
                    w[u] = s;
                    mx = std::max(mx, s);
                }
                double sum = 0.0;
                for (int u = 0; u <= ti; ++u) {
                    w[u] = std::exp(w[u] - mx);
                    sum += w[u];
                }
                const double inv = 1.0 / sum;
                for (int u = 0; u <= ti; ++u) w[u] *= inv;

                double* o = op + idx(bi, ti, off);
                std::fill(o, o + hd, 0.0);
                for (int u = 0; u <= ti; ++u) {
                    const double wu = w[u];
                    const double* vr = vp + idx(bi, u, off);
                    for (int j = 0; j < hd; ++j) o[j] += wu * vr[j];
                }
            }
        }
    }
    debug_check_finite(out, "causal_attention");

    if (should_record({&q, &k, &v})) {
        TapeNode node;
        node.op = "causal_attention";
        node.inputs = {q, k, v};
        node.output = out;
        node.backward = [q, k, v, weights, b, t, d, num_heads, hd, scl](const std::vector<double>& dy, GradAccum& acc,
                                                                        const std::vector<bool>& wants) {
            const double* qp = q.data();
            const double* kp = k.data();
            const double* vp = v.data();
            double* dq = wants[0] ? acc.at(q).data() : nullptr;
            double* dk = wants[1] ? acc.at(k).data() : nullptr;
            double* dv = wants[2] ? acc.at(v).data() : nullptr;
            auto idx = [d, t](int bi, int ti, int off) {
                return (static_cast<std::size_t>(bi) * t + ti) * d + off;
            };
            std::vector<double> ds(static_cast<std::size_t>(t));
            for (int bi = 0; bi < b; ++bi) {
                for (int h = 0; h < num_heads; ++h) {
                    const int off = h * hd;
                    const double* w_bh = weights->data() + ((static_cast<std::size_t>(bi) * num_heads + h) * t) * t;
                    for (int ti = 0; ti < t; ++ti) {
                        const double* w = w_bh + static_cast<std::size_t>(ti) * t;
                        const double* go = dy.data() + idx(bi, ti, off);
                        // dw[u] = <dout, v_u>, then softmax backward into ds
                        double dot = 0.0;
                        for (int u = 0; u <= ti; ++u) {
                            const double* vr = vp + idx(bi, u, off);
                            double dw = 0.0;
                            for (int j = 0; j < hd; ++j) dw += go[j] * vr[j];
                            ds[static_cast<std::size_t>(u)] = dw;
                            dot += dw * w[u];
                        }
                        for (int u = 0; u <= ti; ++u) {
                            ds[static_cast<std::size_t>(u)] = (ds[static_cast<std::size_t>(u)] - dot) * w[u] * scl;
                        }
                        if (dv != nullptr) {
                            for (int u = 0; u <= ti; ++u) {
                                double* dvr = dv + idx(bi, u, off);
                                const double wu = w[u];
                                for (int j = 0; j < hd; ++j) dvr[j] += wu * go[j];
                            }
                        }
                        if (dq != nullptr) {
                            double* dqr = dq + idx(bi, ti, off);
                            for (int u = 0; u <= ti; ++u) {
                                const double s = ds[static_cast<std::size_t>(u)];
                                const double* kr = kp + idx(bi, u, off);
                                for (int j = 0; j < hd; ++j) dqr[j] += s * kr[j];
                            }
                        }
                        if (dk != nullptr) {
                            const double* qr = qp + idx(bi, ti, off);
                            for (int u = 0; u <= ti; ++u) {
                                const double s = ds[static_cast<std::size_t>(u)];
                                double* dkr = dk + idx(bi, u, off);
                                for (int j = 0; j < hd; ++j) dkr[j] += s * qr[j];
                            }
                        }
                    }
                }
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int rows) {
    require_shape((a.ndim() == 1 || a.ndim() == 2) && rows >= 1 && rows <= a.dim(0), "slice_rows", a.shape(),
                  Shape{rows});
    const int n = a.ndim() == 2 ? a.dim(1) : 1;
    Tensor out(a.ndim() == 2 ? Shape{rows, n} : Shape{rows});
    std::copy(a.data(), a.data() + static_cast<std::size_t>(rows) * n, out.data());

    if (should_record({&a})) {
        TapeNode node;
        node.op = "slice_rows";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, rows, n](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * n; ++i) da[i] += dy[i];
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int cols) {
    require_shape(a.ndim() == 2 && cols >= 1 && cols <= a.dim(1), "slice_cols", a.shape(), Shape{cols});
    const int m = a.dim(0);
    const int n = a.dim(1);
    Tensor out(Shape{m, cols});
    const double* ap = a.data();
    double* op = out.data();
    for (int i = 0; i < m; ++i) {
        std::copy(ap + static_cast<std::size_t>(i) * n, ap + static_cast<std::size_t>(i) * n + cols,
                  op + static_cast<std::size_t>(i) * cols);
    }

    if (should_record({&a})) {
        TapeNode node;
        node.op = "slice_cols";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, m, n, cols](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (int i = 0; i < m; ++i) {
                double* dr = da.data() + static_cast<std::size_t>(i) * n;
                const double* g = dy.data() + static_cast<std::size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) dr[j] += g[j];
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    Tensor out = a.reshaped(std::move(new_shape));
    out.set_requires_grad(false);
    if (should_record({&a})) {
        TapeNode node;
        node.op = "reshape";
        node.inputs = {a};
        node.output = out;
        node.backward = [a](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.vec()) s += x;
    Tensor out = Tensor::scalar(s);
    if (should_record({&a})) {
        TapeNode node;
        node.op = "sum_all";
        node.inputs = {a};
        node.output = out;
        node.backward = [a](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[0];
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double x : a.vec()) s += x;
    Tensor out = Tensor::scalar(s * inv);
    if (should_record({&a})) {
        TapeNode node;
        node.op = "mean_all";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, inv](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[0] * inv;
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require_shape(a.ndim() == 2, "transpose2d", a.shape(), a.shape());
    const int m = a.dim(0);
    const int n = a.dim(1);
    Tensor out(Shape{n, m});
    const double* ap = a.data();
    double* op = out.data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) op[static_cast<std::size_t>(j) * m + i] = ap[static_cast<std::size_t>(i) * n + j];
    }
    if (should_record({&a})) {
        TapeNode node;
        node.op = "transpose2d";
        node.inputs = {a};
        node.output = out;
        node.backward = [a, m, n](const std::vector<double>& dy, GradAccum& acc, const std::vector<bool>& wants) {
            if (!wants[0]) return;
            std::vector<double>& da = acc.at(a);
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    da[static_cast<std::size_t>(i) * n + j] += dy[static_cast<std::size_t>(j) * m + i];
                }
            }
        };
        active_tape()->record(std::move(node));
    }
    return out;
}

} // namespace sortednet
