#include "kanlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kanlab/flops.hpp"

namespace kanlab {

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
        case Op::tanh: return "tanh";
        case Op::exp: return "exp";
        case Op::silu: return "silu";
        case Op::relu: return "relu";
        case Op::sum_axes: return "sum_axes";
        case Op::reshape: return "reshape";
        case Op::matmul: return "matmul";
        case Op::edge_contract: return "edge_contract";
        case Op::bspline_basis: return "bspline_basis";
        case Op::combine: return "combine";
        case Op::cross_entropy: return "cross_entropy";
        case Op::mse: return "mse";
    }
    return "?";
}

namespace {

std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    std::vector<std::size_t> out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + Tensor::shape_str(a) + " and " +
                             Tensor::shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of `shape` right-aligned into rank r, 0 on broadcast dims.
std::vector<std::size_t> aligned_strides(const std::vector<std::size_t>& shape, std::size_t r) {
    std::vector<std::size_t> strides(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        const std::size_t dim = shape[shape.size() - 1 - i];
        strides[r - 1 - i] = (dim == 1) ? 0 : acc;
        acc *= dim;
    }
    return strides;
}

template <typename F>
Tensor broadcast_binary(const Tensor& A, const Tensor& B, F f, const char* op) {
    if (A.same_shape(B)) {
        Tensor out(A.shape());
        const double* pa = A.raw();
        const double* pb = B.raw();
        double* po = out.raw();
        for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    auto out_shape = broadcast_shape(A.shape(), B.shape(), op);
    Tensor out(out_shape);
    const std::size_t r = out_shape.size();
    const auto sa = aligned_strides(A.shape(), r);
    const auto sb = aligned_strides(B.shape(), r);
    const std::size_t inner = out_shape.back();
    const std::size_t outer = out.size() / inner;
    std::vector<std::size_t> idx(r, 0);
    const double* pa = A.raw();
    const double* pb = B.raw();
    double* po = out.raw();
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t offa = 0, offb = 0;
        for (std::size_t d = 0; d + 1 < r; ++d) {
            offa += idx[d] * sa[d];
            offb += idx[d] * sb[d];
        }
        const std::size_t ia = sa[r - 1], ib = sb[r - 1];
        for (std::size_t i = 0; i < inner; ++i)
            po[pos++] = f(pa[offa + i * ia], pb[offb + i * ib]);
        for (std::size_t d = r - 1; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

// Sums `grad` down to `target_shape` (inverse of broadcasting).
Tensor reduce_to_shape(const Tensor& grad, const std::vector<std::size_t>& target_shape) {
    if (grad.shape() == target_shape) return grad;
    const std::size_t r = grad.rank();
    const auto st = aligned_strides(target_shape, r);
    Tensor out(target_shape);
    const auto& gs = grad.shape();
    std::vector<std::size_t> idx(r, 0);
    const double* pg = grad.raw();
    double* po = out.raw();
    for (std::size_t flat = 0; flat < grad.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < r; ++d) off += idx[d] * st[d];
        po[off] += pg[flat];
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < gs[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One Cox-de Boor evaluation. `work` has n_knots-1 entries; on return the
// first n_basis = n_knots-1-degree hold the basis values at clamp(x).
void bspline_row(double x, const std::vector<double>& t, int degree, double* work) {
    const int n_boxes = static_cast<int>(t.size()) - 1;
    const double lo = t[degree];
    const double hi = t[n_boxes - degree];
    double xc = std::min(std::max(x, lo), hi);
    const double h = t[1] - t[0];
    int idx = degree + static_cast<int>(std::floor((xc - lo) / h));
    idx = std::min(std::max(idx, degree), n_boxes - 1 - degree);
    std::fill(work, work + n_boxes, 0.0);
    work[idx] = 1.0;
    for (int p = 1; p <= degree; ++p) {
        for (int i = 0; i + p < n_boxes; ++i) {
            const double w1 = (xc - t[i]) / (t[i + p] - t[i]);
            const double w2 = (t[i + p + 1] - xc) / (t[i + p + 1] - t[i + 1]);
            work[i] = w1 * work[i] + w2 * work[i + 1];
        }
    }
}

// Derivative of the degree-`degree` basis w.r.t. x (0 when x is clamped).
void bspline_row_deriv(double x, const std::vector<double>& t, int degree, double* dwork) {
    const int n_boxes = static_cast<int>(t.size()) - 1;
    const double lo = t[degree];
    const double hi = t[n_boxes - degree];
    const int n_basis = n_boxes - degree;
    if (x < lo || x > hi) {
        std::fill(dwork, dwork + n_basis, 0.0);
        return;
    }
    std::vector<double> lower(n_boxes, 0.0);
    bspline_row(x, t, degree - 1, lower.data());
    for (int i = 0; i < n_basis; ++i) {
        const double left = lower[i] / (t[i + degree] - t[i]);
        const double right = lower[i + 1] / (t[i + degree + 1] - t[i + 1]);
        dwork[i] = degree * (left - right);
    }
}

}  // namespace

int Tape::check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= slots_.size())
        throw ShapeError("Tape: invalid Var handle");
    return v.id;
}

Var Tape::push_value(Tensor value, bool requires) {
    slots_.push_back(Slot{std::move(value), requires && recording_, nullptr});
    return Var{static_cast<int>(slots_.size() - 1)};
}

void Tape::record(Node n) { nodes_.push_back(std::move(n)); }

Tensor& Tape::adjoint(int id) {
    if (adjoints_.size() != slots_.size()) adjoints_.resize(slots_.size());
    if (adjoints_[id].size() == 0) adjoints_[id] = Tensor(slots_[id].value.shape());
    return adjoints_[id];
}

void Tape::check_finite(const Tensor& t, Op op, int out_id) const {
    if (!t.all_finite())
        throw NumericError(std::string("op ") + op_name(op) + " (node " +
                           std::to_string(out_id) + "): non-finite output");
}

Var Tape::leaf(Tensor value, Tensor* sink) {
    Var v = push_value(std::move(value), sink != nullptr);
    slots_[v.id].sink = recording_ ? sink : nullptr;
    return v;
}

Var Tape::leaf(Parameter& p) { return leaf(p.value, p.trainable ? &p.grad : nullptr); }

Var Tape::add(Var a, Var b) {
    const int ia = check(a), ib = check(b);
    Tensor out = broadcast_binary(slots_[ia].value, slots_[ib].value,
                                  [](double x, double y) { return x + y; }, "add");
    flops::charge(static_cast<std::int64_t>(out.size()) * flops::CostModel::add);
    const bool req = slots_[ia].requires_grad || slots_[ib].requires_grad;
    Var v = push_value(std::move(out), req);
    check_finite(slots_[v.id].value, Op::add, v.id);
    if (slots_[v.id].requires_grad) record(Node{Op::add, ia, ib, -1, v.id});
    return v;
}

Var Tape::mul(Var a, Var b) {
    const int ia = check(a), ib = check(b);
    Tensor out = broadcast_binary(slots_[ia].value, slots_[ib].value,
                                  [](double x, double y) { return x * y; }, "mul");
    flops::charge(static_cast<std::int64_t>(out.size()) * flops::CostModel::mul);
    const bool req = slots_[ia].requires_grad || slots_[ib].requires_grad;
    Var v = push_value(std::move(out), req);
    check_finite(slots_[v.id].value, Op::mul, v.id);
    if (slots_[v.id].requires_grad) record(Node{Op::mul, ia, ib, -1, v.id});
    return v;
}

Var Tape::scale(Var a, double c) {
    const int ia = check(a);
    Tensor out(slots_[ia].value.shape());
    const double* pa = slots_[ia].value.raw();
    double* po = out.raw();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = c * pa[i];
    flops::charge(static_cast<std::int64_t>(out.size()) * flops::CostModel::mul);
    Var v = push_value(std::move(out), slots_[ia].requires_grad);
    check_finite(slots_[v.id].value, Op::scale, v.id);
    if (slots_[v.id].requires_grad) {
        Node n{Op::scale, ia, -1, -1, v.id};
        n.scalar = c;
        record(std::move(n));
    }
    return v;
}

namespace {
template <typename F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    const double* pa = a.raw();
    double* po = out.raw();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i]);
    return out;
}
}  // namespace

#define KANLAB_UNARY_OP(NAME, OPK, FN, FLOPS_PER_ELEM)                            \
    Var Tape::NAME(Var a) {                                                       \
        const int ia = check(a);                                                  \
        Tensor out = map_unary(slots_[ia].value, FN);                             \
        flops::charge(static_cast<std::int64_t>(out.size()) * (FLOPS_PER_ELEM));  \
        Var v = push_value(std::move(out), slots_[ia].requires_grad);             \
        check_finite(slots_[v.id].value, OPK, v.id);                              \
        if (slots_[v.id].requires_grad) record(Node{OPK, ia, -1, -1, v.id});      \
        return v;                                                                 \
    }

KANLAB_UNARY_OP(sin, Op::sin, [](double x) { return std::sin(x); }, flops::CostModel::trig)
KANLAB_UNARY_OP(cos, Op::cos, [](double x) { return std::cos(x); }, flops::CostModel::trig)
// tanh and silu charged via their exp-based decompositions (13 each)
KANLAB_UNARY_OP(tanh, Op::tanh, [](double x) { return std::tanh(x); }, 13)
KANLAB_UNARY_OP(exp, Op::exp, [](double x) { return std::exp(x); }, flops::CostModel::exp)
KANLAB_UNARY_OP(silu, Op::silu, [](double x) { return x * sigmoid(x); }, flops::CostModel::silu)
KANLAB_UNARY_OP(relu, Op::relu, [](double x) { return x > 0.0 ? x : 0.0; },
                flops::CostModel::boolean)

#undef KANLAB_UNARY_OP

Var Tape::sum(Var a) {
    const int ia = check(a);
    const Tensor& A = slots_[ia].value;
    double acc = 0.0;
    for (double x : A.data()) acc += x;
    flops::charge(A.size() > 0 ? static_cast<std::int64_t>(A.size()) - 1 : 0);
    Var v = push_value(Tensor::scalar(acc), slots_[ia].requires_grad);
    check_finite(slots_[v.id].value, Op::sum_axes, v.id);
    if (slots_[v.id].requires_grad) {
        Node n{Op::sum_axes, ia, -1, -1, v.id};
        for (std::size_t d = 0; d < A.rank(); ++d) n.iaux.push_back(static_cast<int>(d));
        record(std::move(n));
    }
    return v;
}

Var Tape::sum_axes(Var a, std::vector<int> axes) {
    const int ia = check(a);
    const Tensor& A = slots_[ia].value;
    for (int ax : axes)
        if (ax < 0 || static_cast<std::size_t>(ax) >= A.rank())
            throw ShapeError("sum_axes: axis out of range");
    std::sort(axes.begin(), axes.end());
    if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
        throw ShapeError("sum_axes: duplicate axis");
    if (axes.size() == A.rank()) return sum(a);

    std::vector<std::size_t> out_shape;
    for (std::size_t d = 0; d < A.rank(); ++d)
        if (!std::binary_search(axes.begin(), axes.end(), static_cast<int>(d)))
            out_shape.push_back(A.dim(d));
    Tensor out(out_shape);

    const auto& as = A.shape();
    std::vector<std::size_t> idx(A.rank(), 0);
    std::vector<std::size_t> out_strides(A.rank(), 0);
    {
        std::size_t acc = 1;
        for (std::size_t d = A.rank(); d-- > 0;) {
            if (!std::binary_search(axes.begin(), axes.end(), static_cast<int>(d))) {
                out_strides[d] = acc;
                acc *= as[d];
            }
        }
    }
    const double* pa = A.raw();
    double* po = out.raw();
    for (std::size_t flat = 0; flat < A.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < A.rank(); ++d) off += idx[d] * out_strides[d];
        po[off] += pa[flat];
        for (std::size_t d = A.rank(); d-- > 0;) {
            if (++idx[d] < as[d]) break;
            idx[d] = 0;
        }
    }
    flops::charge(static_cast<std::int64_t>(A.size()) - static_cast<std::int64_t>(out.size()));
    Var v = push_value(std::move(out), slots_[ia].requires_grad);
    check_finite(slots_[v.id].value, Op::sum_axes, v.id);
    if (slots_[v.id].requires_grad) {
        Node n{Op::sum_axes, ia, -1, -1, v.id};
        n.iaux = axes;
        record(std::move(n));
    }
    return v;
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
    const int ia = check(a);
    Tensor out = slots_[ia].value.reshaped(shape);
    Var v = push_value(std::move(out), slots_[ia].requires_grad);
    if (slots_[v.id].requires_grad) {
        Node n{Op::reshape, ia, -1, -1, v.id};
        n.saux = slots_[ia].value.shape();
        record(std::move(n));
    }
    return v;
}

Var Tape::matmul(Var a, Var b, bool transpose_b) {
    const int ia = check(a), ib = check(b);
    const Tensor& A = slots_[ia].value;
    const Tensor& B = slots_[ib].value;
    if (A.rank() != 2 || B.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
    const std::size_t m = A.dim(0), k = A.dim(1);
    const std::size_t n = transpose_b ? B.dim(0) : B.dim(1);
    const std::size_t kb = transpose_b ? B.dim(1) : B.dim(0);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions differ: " + A.shape_str() + " x " +
                         B.shape_str() + (transpose_b ? "^T" : ""));
    Tensor out({m, n});
    const double* pa = A.raw();
    const double* pb = B.raw();
    double* po = out.raw();
    if (transpose_b) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                const double* ra = pa + i * k;
                const double* rb = pb + j * k;
                for (std::size_t l = 0; l < k; ++l) acc += ra[l] * rb[l];
                po[i * n + j] = acc;
            }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double* ro = po + i * n;
            const double* ra = pa + i * k;
            for (std::size_t l = 0; l < k; ++l) {
                const double av = ra[l];
                const double* rb = pb + l * n;
                for (std::size_t j = 0; j < n; ++j) ro[j] += av * rb[j];
            }
        }
    }
    // MAC convention: k multiplies + k adds per output element.
    flops::charge(2 * static_cast<std::int64_t>(m) * n * k);
    const bool req = slots_[ia].requires_grad || slots_[ib].requires_grad;
    Var v = push_value(std::move(out), req);
    check_finite(slots_[v.id].value, Op::matmul, v.id);
    if (slots_[v.id].requires_grad) {
        Node node{Op::matmul, ia, ib, -1, v.id};
        node.flag = transpose_b;
        record(std::move(node));
    }
    return v;
}

Var Tape::edge_contract(Var amplitudes, Var activations) {
    const int ia = check(amplitudes), ib = check(activations);
    const Tensor& A = slots_[ia].value;
    const Tensor& S = slots_[ib].value;
    if (A.rank() != 3 || S.rank() != 3)
        throw ShapeError("edge_contract: rank-3 tensors required");
    if (A.dim(1) != S.dim(1) || A.dim(2) != S.dim(2))
        throw ShapeError("edge_contract: shapes " + A.shape_str() + " and " + S.shape_str() +
                         " do not contract");
    const std::size_t o = A.dim(0), batch = S.dim(0);
    const std::size_t m = A.dim(1) * A.dim(2);
    Tensor out({batch, o});
    const double* pa = A.raw();
    const double* ps = S.raw();
    double* po = out.raw();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* rs = ps + bi * m;
        for (std::size_t oi = 0; oi < o; ++oi) {
            const double* ra = pa + oi * m;
            double acc = 0.0;
            for (std::size_t l = 0; l < m; ++l) acc += ra[l] * rs[l];
            po[bi * o + oi] = acc;
        }
    }
    // d_in*g multiplies and d_in*g - 1 sum-adds per output element.
    flops::charge(static_cast<std::int64_t>(batch) * o * (2 * m - 1));
    const bool req = slots_[ia].requires_grad || slots_[ib].requires_grad;
    Var v = push_value(std::move(out), req);
    check_finite(slots_[v.id].value, Op::edge_contract, v.id);
    if (slots_[v.id].requires_grad) record(Node{Op::edge_contract, ia, ib, -1, v.id});
    return v;
}

Var Tape::bspline_basis(Var x, const std::vector<double>& knots, int degree) {
    const int ix = check(x);
    const Tensor& X = slots_[ix].value;
    if (X.rank() != 2) throw ShapeError("bspline_basis: x must be [batch, d_in]");
    if (degree < 1) throw ShapeError("bspline_basis: degree must be >= 1");
    if (static_cast<int>(knots.size()) < 2 * degree + 2)
        throw ShapeError("bspline_basis: knot vector too short for degree");
    for (std::size_t i = 1; i < knots.size(); ++i)
        if (!(knots[i] > knots[i - 1]))
            throw ShapeError("bspline_basis: knots must be strictly increasing");
    const int n_boxes = static_cast<int>(knots.size()) - 1;
    const int n_basis = n_boxes - degree;
    const std::size_t batch = X.dim(0), d = X.dim(1);
    Tensor out({batch, d, static_cast<std::size_t>(n_basis)});
    std::vector<double> work(n_boxes);
    const double* px = X.raw();
    double* po = out.raw();
    for (std::size_t i = 0; i < batch * d; ++i) {
        bspline_row(px[i], knots, degree, work.data());
        std::memcpy(po + i * n_basis, work.data(), sizeof(double) * n_basis);
    }
    // Nominal basis cost: 17 FLOPs per recursion level per extended slot.
    const std::int64_t g = n_basis - degree;
    flops::charge(17 * static_cast<std::int64_t>(degree) * static_cast<std::int64_t>(batch) * d *
                  (g + 2 * degree));
    Var v = push_value(std::move(out), slots_[ix].requires_grad);
    check_finite(slots_[v.id].value, Op::bspline_basis, v.id);
    if (slots_[v.id].requires_grad) {
        Node n{Op::bspline_basis, ix, -1, -1, v.id};
        n.iaux = {degree};
        n.taux = Tensor({knots.size()}, knots);
        record(std::move(n));
    }
    return v;
}

Var Tape::combine(Var base, Var spline, Var bias) {
    const int ia = check(base), ib = check(spline), ic = check(bias);
    const Tensor& A = slots_[ia].value;
    const Tensor& B = slots_[ib].value;
    const Tensor& C = slots_[ic].value;
    if (!A.same_shape(B) || A.rank() != 2 || C.rank() != 1 || C.dim(0) != A.dim(1))
        throw ShapeError("combine: expected [b,o] + [b,o] + [o]");
    Tensor out(A.shape());
    const std::size_t rows = A.dim(0), cols = A.dim(1);
    const double* pa = A.raw();
    const double* pb = B.raw();
    const double* pc = C.raw();
    double* po = out.raw();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            po[i * cols + j] = pa[i * cols + j] + pb[i * cols + j] + pc[j];
    // Charged as a single combine add per output element.
    flops::charge(static_cast<std::int64_t>(out.size()) * flops::CostModel::add);
    const bool req =
        slots_[ia].requires_grad || slots_[ib].requires_grad || slots_[ic].requires_grad;
    Var v = push_value(std::move(out), req);
    check_finite(slots_[v.id].value, Op::combine, v.id);
    if (slots_[v.id].requires_grad) record(Node{Op::combine, ia, ib, ic, v.id});
    return v;
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& labels) {
    const int il = check(logits);
    const Tensor& Z = slots_[il].value;
    if (Z.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch, classes]");
    const std::size_t b = Z.dim(0), c = Z.dim(1);
    if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw ShapeError("cross_entropy: label out of range");
    Tensor probs({b, c});
    const double* pz = Z.raw();
    double* pp = probs.raw();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = pz + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < c; ++j) pp[i * c + j] = std::exp(row[j] - lse);
        loss += lse - row[labels[i]];
    }
    loss /= static_cast<double>(b);
    flops::charge(static_cast<std::int64_t>(b) * c * (flops::CostModel::exp + 2) +
                  static_cast<std::int64_t>(b) * (flops::CostModel::exp + 2) +
                  flops::CostModel::div);
    Var v = push_value(Tensor::scalar(loss), slots_[il].requires_grad);
    check_finite(slots_[v.id].value, Op::cross_entropy, v.id);
    if (slots_[v.id].requires_grad) {
        Node n{Op::cross_entropy, il, -1, -1, v.id};
        n.iaux = labels;
        n.taux = std::move(probs);
        record(std::move(n));
    }
    return v;
}

Var Tape::mse(Var pred, Var target) {
    const int ip = check(pred), it = check(target);
    const Tensor& P = slots_[ip].value;
    const Tensor& T = slots_[it].value;
    if (!P.same_shape(T)) throw ShapeError("mse: shape mismatch");
    if (P.size() == 0) throw ShapeError("mse: empty tensors");
    double acc = 0.0;
    const double* pp = P.raw();
    const double* pt = T.raw();
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double d = pp[i] - pt[i];
        acc += d * d;
    }
    acc /= static_cast<double>(P.size());
    flops::charge(static_cast<std::int64_t>(P.size()) * 3 + flops::CostModel::div);
    const bool req = slots_[ip].requires_grad || slots_[it].requires_grad;
    Var v = push_value(Tensor::scalar(acc), req);
    check_finite(slots_[v.id].value, Op::mse, v.id);
    if (slots_[v.id].requires_grad) record(Node{Op::mse, ip, it, -1, v.id});
    return v;
}

void Tape::backward(Var loss) {
    const int il = check(loss);
    if (!slots_[il].value.is_scalar()) throw ShapeError("backward: loss must be a scalar");
    if (nodes_.empty()) throw ShapeError("backward: tape is empty");
    adjoints_.assign(slots_.size(), Tensor());
    adjoint(il)[0] = 1.0;

    auto has_adj = [&](int id) { return adjoints_[id].size() != 0; };

    for (std::size_t ni = nodes_.size(); ni-- > 0;) {
        const Node& n = nodes_[ni];
        if (!has_adj(n.out)) continue;
        const Tensor& gout = adjoints_[n.out];
        auto want = [&](int id) { return id >= 0 && slots_[id].requires_grad; };

        switch (n.op) {
            case Op::add: {
                if (want(n.a)) {
                    Tensor r = reduce_to_shape(gout, slots_[n.a].value.shape());
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += r[i];
                }
                if (want(n.b)) {
                    Tensor r = reduce_to_shape(gout, slots_[n.b].value.shape());
                    Tensor& gb = adjoint(n.b);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += r[i];
                }
                break;
            }
            case Op::mul: {
                if (want(n.a)) {
                    Tensor prod = broadcast_binary(gout, slots_[n.b].value,
                                                   [](double g, double y) { return g * y; }, "mul");
                    Tensor r = reduce_to_shape(prod, slots_[n.a].value.shape());
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += r[i];
                }
                if (want(n.b)) {
                    Tensor prod = broadcast_binary(gout, slots_[n.a].value,
                                                   [](double g, double y) { return g * y; }, "mul");
                    Tensor r = reduce_to_shape(prod, slots_[n.b].value.shape());
                    Tensor& gb = adjoint(n.b);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += r[i];
                }
                break;
            }
            case Op::scale: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.scalar * gout[i];
                }
                break;
            }
            case Op::sin: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& x = slots_[n.a].value;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += gout[i] * std::cos(x[i]);
                }
                break;
            }
            case Op::cos: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& x = slots_[n.a].value;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] -= gout[i] * std::sin(x[i]);
                }
                break;
            }
            case Op::tanh: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& y = slots_[n.out].value;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
                break;
            }
            case Op::exp: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& y = slots_[n.out].value;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * y[i];
                }
                break;
            }
            case Op::silu: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& x = slots_[n.a].value;
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                        const double s = sigmoid(x[i]);
                        ga[i] += gout[i] * (s + x[i] * s * (1.0 - s));
                    }
                }
                break;
            }
            case Op::relu: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    const Tensor& x = slots_[n.a].value;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        if (x[i] > 0.0) ga[i] += gout[i];
                }
                break;
            }
            case Op::sum_axes: {
                if (want(n.a)) {
                    const Tensor& A = slots_[n.a].value;
                    Tensor& ga = adjoint(n.a);
                    const auto& as = A.shape();
                    std::vector<std::size_t> out_strides(A.rank(), 0);
                    std::size_t acc = 1;
                    for (std::size_t d = A.rank(); d-- > 0;) {
                        if (!std::binary_search(n.iaux.begin(), n.iaux.end(),
                                                static_cast<int>(d))) {
                            out_strides[d] = acc;
                            acc *= as[d];
                        }
                    }
                    std::vector<std::size_t> idx(A.rank(), 0);
                    for (std::size_t flat = 0; flat < A.size(); ++flat) {
                        std::size_t off = 0;
                        for (std::size_t d = 0; d < A.rank(); ++d) off += idx[d] * out_strides[d];
                        ga[flat] += gout[off];
                        for (std::size_t d = A.rank(); d-- > 0;) {
                            if (++idx[d] < as[d]) break;
                            idx[d] = 0;
                        }
                    }
                }
                break;
            }
            case Op::reshape: {
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
                }
                break;
            }
            case Op::matmul: {
                const Tensor& A = slots_[n.a].value;
                const Tensor& B = slots_[n.b].value;
                const std::size_t m = A.dim(0), k = A.dim(1);
                const std::size_t nn = n.flag ? B.dim(0) : B.dim(1);
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < nn; ++j) {
                            const double g = gout[i * nn + j];
                            if (n.flag) {
                                const double* rb = B.raw() + j * k;
                                double* rga = ga.raw() + i * k;
                                for (std::size_t l = 0; l < k; ++l) rga[l] += g * rb[l];
                            } else {
                                for (std::size_t l = 0; l < k; ++l)
                                    ga.raw()[i * k + l] += g * B.raw()[l * nn + j];
                            }
                        }
                }
                if (want(n.b)) {
                    Tensor& gb = adjoint(n.b);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < nn; ++j) {
                            const double g = gout[i * nn + j];
                            if (n.flag) {
                                const double* ra = A.raw() + i * k;
                                double* rgb = gb.raw() + j * k;
                                for (std::size_t l = 0; l < k; ++l) rgb[l] += g * ra[l];
                            } else {
                                for (std::size_t l = 0; l < k; ++l)
                                    gb.raw()[l * nn + j] += g * A.raw()[i * k + l];
                            }
                        }
                }
                break;
            }
            case Op::edge_contract: {
                const Tensor& A = slots_[n.a].value;   // [o,i,g]
                const Tensor& S = slots_[n.b].value;   // [b,i,g]
                const std::size_t o = A.dim(0);
                const std::size_t m = A.dim(1) * A.dim(2);
                const std::size_t batch = S.dim(0);
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t bi = 0; bi < batch; ++bi) {
                        const double* rs = S.raw() + bi * m;
                        for (std::size_t oi = 0; oi < o; ++oi) {
                            const double g = gout[bi * o + oi];
                            double* rga = ga.raw() + oi * m;
                            for (std::size_t l = 0; l < m; ++l) rga[l] += g * rs[l];
                        }
                    }
                }
                if (want(n.b)) {
                    Tensor& gb = adjoint(n.b);
                    for (std::size_t bi = 0; bi < batch; ++bi) {
                        double* rgb = gb.raw() + bi * m;
                        for (std::size_t oi = 0; oi < o; ++oi) {
                            const double g = gout[bi * o + oi];
                            const double* ra = A.raw() + oi * m;
                            for (std::size_t l = 0; l < m; ++l) rgb[l] += g * ra[l];
                        }
                    }
                }
                break;
            }
            case Op::bspline_basis: {
                if (want(n.a)) {
                    const Tensor& X = slots_[n.a].value;
                    Tensor& gx = adjoint(n.a);
                    const int degree = n.iaux[0];
                    std::vector<double> knots(n.taux.data().begin(), n.taux.data().end());
                    const int n_basis = static_cast<int>(knots.size()) - 1 - degree;
                    std::vector<double> deriv(n_basis);
                    for (std::size_t i = 0; i < X.size(); ++i) {
                        bspline_row_deriv(X[i], knots, degree, deriv.data());
                        double acc = 0.0;
                        for (int j = 0; j < n_basis; ++j)
                            acc += gout[i * n_basis + j] * deriv[j];
                        gx[i] += acc;
                    }
                }
                break;
            }
            case Op::combine: {
                const std::size_t rows = gout.dim(0), cols = gout.dim(1);
                if (want(n.a)) {
                    Tensor& ga = adjoint(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
                }
                if (want(n.b)) {
                    Tensor& gb = adjoint(n.b);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i];
                }
                if (want(n.c)) {
                    Tensor& gc = adjoint(n.c);
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j) gc[j] += gout[i * cols + j];
                }
                break;
            }
            case Op::cross_entropy: {
                if (want(n.a)) {
                    Tensor& gz = adjoint(n.a);
                    const Tensor& probs = n.taux;
                    const std::size_t b = probs.dim(0), c = probs.dim(1);
                    const double g = gout[0] / static_cast<double>(b);
                    for (std::size_t i = 0; i < b; ++i) {
                        for (std::size_t j = 0; j < c; ++j)
                            gz[i * c + j] += g * probs[i * c + j];
                        gz[i * c + n.iaux[i]] -= g;
                    }
                }
                break;
            }
            case Op::mse: {
                const Tensor& P = slots_[n.a].value;
                const Tensor& T = slots_[n.b].value;
                const double g = 2.0 * gout[0] / static_cast<double>(P.size());
                if (want(n.a)) {
                    Tensor& gp = adjoint(n.a);
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (P[i] - T[i]);
                }
                if (want(n.b)) {
                    Tensor& gt = adjoint(n.b);
                    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * (P[i] - T[i]);
                }
                break;
            }
            case Op::leaf:
                break;
        }
    }

    for (std::size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i].sink != nullptr && has_adj(static_cast<int>(i))) {
            Tensor& sink = *slots_[i].sink;
            const Tensor& adj = adjoints_[i];
            if (!sink.same_shape(adj)) throw ShapeError("backward: sink shape mismatch");
            for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += adj[j];
        }
    }
}

void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->zero_grad();
}

double grad_check(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                  double eps) {
    if (eps < 1e-7 || eps > 1e-3) throw ShapeError("grad_check: eps must be in [1e-7, 1e-3]");
    zero_grads(params);
    std::vector<Tensor> analytic;
    {
        Tape tape(true);
        Var loss = fn(tape);
        tape.backward(loss);
        for (Parameter* p : params) analytic.push_back(p->grad);
    }
    auto eval = [&]() {
        Tape tape(false);
        Var out = fn(tape);
        const double v = tape.value(out).item();
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite probe value");
        return v;
    };
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double fp = eval();
            p->value[i] = orig - eps;
            const double fm = eval();
            p->value[i] = orig;
            const double central = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic[pi][i] - central) / std::max(1.0, std::abs(central));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace kanlab
