#include "efa/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace efa {

// Defined in efa.cpp: first-order adjoint of the fused attention node.
void efa_node_backward(Tape& tape, int id);

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrtTwoPi = 0.39894228040143267794;
constexpr double kTwoInvSqrtPi = 1.12837916709551257390;

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

std::int64_t numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

double act_value(Activation kind, double s) { return activate(kind, s); }
double act_deriv(Activation kind, double s) { return activate_deriv(kind, s); }
double gate_value(Activation kind, double s) { return activation_gate(kind, s); }
double gate_deriv(Activation kind, double s) { return activation_gate_deriv(kind, s); }

// right-aligned broadcast bookkeeping: pad `in` with leading ones to the
// rank of `out`; every dim must then match or be 1
std::vector<int> extend_shape(const std::vector<int>& in, const std::vector<int>& out) {
    check(in.size() <= out.size(), "tape: broadcast cannot drop rank " +
                                       shape_str(in) + " -> " + shape_str(out));
    std::vector<int> ext(out.size(), 1);
    size_t off = out.size() - in.size();
    for (size_t d = 0; d < in.size(); ++d) ext[off + d] = in[d];
    for (size_t d = 0; d < out.size(); ++d) {
        check(ext[d] == out[d] || ext[d] == 1,
              "tape: broadcast mismatch " + shape_str(in) + " -> " + shape_str(out));
    }
    return ext;
}

// strides of `ext` matching flat layout of the original `in` tensor
// (expanded dims get stride 0)
std::vector<std::int64_t> broadcast_strides(const std::vector<int>& ext) {
    std::vector<std::int64_t> st(ext.size(), 0);
    std::int64_t acc = 1;
    for (int d = int(ext.size()) - 1; d >= 0; --d) {
        st[d] = (ext[d] == 1) ? 0 : acc;
        if (ext[d] != 1) acc *= ext[d];
    }
    return st;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.v.assign(static_cast<size_t>(numel(t.shape)), 0.0);
    return t;
}

Tensor Tensor::scalar(double s) {
    Tensor t;
    t.v.assign(1, s);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> vals) {
    Tensor t;
    t.shape = std::move(shape);
    check(static_cast<std::int64_t>(vals.size()) == numel(t.shape),
          "Tensor::from: value count does not match shape " + shape_str(t.shape));
    t.v = std::move(vals);
    return t;
}

double exact_sum(const double* x, std::int64_t n) {
    // error-free expansion accumulation; the final rounding step follows the
    // classic correctly-rounded summation recipe (round half to even)
    std::vector<double> partials;
    partials.reserve(16);
    for (std::int64_t i = 0; i < n; ++i) {
        double xi = x[i];
        size_t k = 0;
        for (size_t j = 0; j < partials.size(); ++j) {
            double pj = partials[j];
            if (std::fabs(xi) < std::fabs(pj)) std::swap(xi, pj);
            double hi = xi + pj;
            double lo = pj - (hi - xi);
            if (lo != 0.0) partials[k++] = lo;
            xi = hi;
        }
        partials.resize(k);
        partials.push_back(xi);
    }
    if (partials.empty()) return 0.0;
    size_t nn = partials.size();
    double hi = partials[--nn];
    double lo = 0.0;
    while (nn > 0) {
        double a = hi, b = partials[--nn];
        hi = a + b;
        double br = hi - a;
        lo = b - br;
        if (lo != 0.0) break;
    }
    if (nn > 0 && ((lo < 0.0 && partials[nn - 1] < 0.0) ||
                   (lo > 0.0 && partials[nn - 1] > 0.0))) {
        double y = lo * 2.0;
        double s = hi + y;
        if (y == s - hi) hi = s;
    }
    return hi;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::kInput: return "input";
        case Op::kConstant: return "constant";
        case Op::kAdd: return "add";
        case Op::kSub: return "sub";
        case Op::kMul: return "mul";
        case Op::kDiv: return "div";
        case Op::kScalarMul: return "scalar_mul";
        case Op::kMatmul: return "matmul";
        case Op::kTransposeLast2: return "transpose_last2";
        case Op::kSin: return "sin";
        case Op::kCos: return "cos";
        case Op::kErf: return "erf";
        case Op::kExp: return "exp";
        case Op::kSqrt: return "sqrt";
        case Op::kGelu: return "gelu";
        case Op::kSilu: return "silu";
        case Op::kSum: return "sum";
        case Op::kSumAxes: return "sum_axes";
        case Op::kBroadcast: return "broadcast";
        case Op::kReshape: return "reshape";
        case Op::kGather0: return "gather0";
        case Op::kScatterAdd0: return "scatter_add0";
        case Op::kSlice1: return "slice1";
        case Op::kPad1: return "pad1";
        case Op::kCgProduct: return "cg_product";
        case Op::kIrrepDense: return "irrep_dense";
        case Op::kIrrepDenseWgrad: return "irrep_dense_wgrad";
        case Op::kGatedAct: return "gated_act";
        case Op::kYlmEdges: return "ylm_edges";
        case Op::kYlmVjp: return "ylm_vjp";
        case Op::kVecNorm: return "vec_norm";
        case Op::kPairSwap: return "pair_swap";
        case Op::kErope: return "erope";
        case Op::kEfa: return "efa";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// CouplingPlan

CouplingPlan CouplingPlan::build(const Layout& x, const Layout& y, const Layout& z) {
    CouplingPlan plan;
    plan.x = x;
    plan.y = y;
    plan.z = z;
    const CgTable& table = cg_table();
    for (int pa = 0; pa < x.P; ++pa) {
        for (int a = 0; a <= x.L; ++a) {
            for (int pb = 0; pb < y.P; ++pb) {
                for (int b = 0; b <= y.L; ++b) {
                    int pc = pa ^ pb;
                    if (pc >= z.P) continue;
                    for (int c = std::abs(a - b); c <= std::min(a + b, z.L); ++c) {
                        const auto& blk = table.block(a, b, c);
                        if (blk.empty()) continue;
                        for (int mc = -c; mc <= c; ++mc) {
                            for (int ma = -a; ma <= a; ++ma) {
                                for (int mb = -b; mb <= b; ++mb) {
                                    double coef = blk[((size_t(mc + c) * (2 * a + 1)) + (ma + a)) *
                                                          (2 * b + 1) +
                                                      (mb + b)];
                                    if (coef == 0.0) continue;
                                    plan.entries.push_back({x.row(pa, a) + a + ma,
                                                            y.row(pb, b) + b + mb,
                                                            z.row(pc, c) + c + mc, coef});
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    plan.finalize_adjoints();
    return plan;
}

void CouplingPlan::finalize_adjoints() {
    gx = std::make_shared<CouplingPlan>();
    gx->x = z;
    gx->y = y;
    gx->z = x;
    gy = std::make_shared<CouplingPlan>();
    gy->x = z;
    gy->y = x;
    gy->z = y;
    gx->entries.reserve(entries.size());
    gy->entries.reserve(entries.size());
    for (const auto& e : entries) {
        gx->entries.push_back({e.sz, e.sy, e.sx, e.c});
        gy->entries.push_back({e.sz, e.sx, e.sy, e.c});
    }
}

// ---------------------------------------------------------------------------
// Tape: recording

int Tape::push(Node n) {
    for (int in : n.ins) {
        check(in >= 0 && in < static_cast<int>(nodes_.size()), "tape: bad node id");
        n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input(Tensor v) {
    Node n;
    n.op = Op::kInput;
    n.val = std::move(v);
    n.needs_grad = true;
    n.grad = Tensor::zeros(n.val.shape);
    return push(std::move(n));
}

int Tape::constant(Tensor v) {
    Node n;
    n.op = Op::kConstant;
    n.val = std::move(v);
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    check(val(a).shape == val(b).shape, "tape.add: shape mismatch " +
                                            shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
    Node n;
    n.op = Op::kAdd;
    n.ins = {a, b};
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    const auto& vb = val(b).v;
    for (size_t i = 0; i < va.size(); ++i) n.val.v[i] = va[i] + vb[i];
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    check(val(a).shape == val(b).shape, "tape.sub: shape mismatch");
    Node n;
    n.op = Op::kSub;
    n.ins = {a, b};
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    const auto& vb = val(b).v;
    for (size_t i = 0; i < va.size(); ++i) n.val.v[i] = va[i] - vb[i];
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    check(val(a).shape == val(b).shape, "tape.mul: shape mismatch " +
                                            shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
    Node n;
    n.op = Op::kMul;
    n.ins = {a, b};
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    const auto& vb = val(b).v;
    for (size_t i = 0; i < va.size(); ++i) n.val.v[i] = va[i] * vb[i];
    return push(std::move(n));
}

int Tape::div(int a, int b) {
    check(val(a).shape == val(b).shape, "tape.div: shape mismatch");
    Node n;
    n.op = Op::kDiv;
    n.ins = {a, b};
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    const auto& vb = val(b).v;
    for (size_t i = 0; i < va.size(); ++i) n.val.v[i] = va[i] / vb[i];
    return push(std::move(n));
}

int Tape::scalar_mul(int a, double s) {
    Node n;
    n.op = Op::kScalarMul;
    n.ins = {a};
    n.s = s;
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    for (size_t i = 0; i < va.size(); ++i) n.val.v[i] = va[i] * s;
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const auto& sa = val(a).shape;
    const auto& sb = val(b).shape;
    check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "tape.matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    int M = sa[0], K = sa[1], N = sb[1];
    Node n;
    n.op = Op::kMatmul;
    n.ins = {a, b};
    n.val = Tensor::zeros({M, N});
    const double* A = val(a).v.data();
    const double* B = val(b).v.data();
    double* C = n.val.v.data();
    for (int i = 0; i < M; ++i) {
        for (int k = 0; k < K; ++k) {
            double aik = A[size_t(i) * K + k];
            if (aik == 0.0) continue;
            const double* brow = B + size_t(k) * N;
            double* crow = C + size_t(i) * N;
            for (int j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
    return push(std::move(n));
}

int Tape::transpose_last2(int a) {
    const auto& sa = val(a).shape;
    check(sa.size() >= 2, "tape.transpose_last2: rank must be >= 2");
    std::vector<int> so = sa;
    std::swap(so[so.size() - 1], so[so.size() - 2]);
    int R = sa[sa.size() - 2], C = sa[sa.size() - 1];
    std::int64_t batch = numel(sa) / (std::int64_t(R) * C);
    Node n;
    n.op = Op::kTransposeLast2;
    n.ins = {a};
    n.val = Tensor::zeros(so);
    const double* src = val(a).v.data();
    double* dst = n.val.v.data();
    for (std::int64_t t = 0; t < batch; ++t) {
        const double* s = src + t * R * C;
        double* d = dst + t * R * C;
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) d[size_t(j) * R + i] = s[size_t(i) * C + j];
    }
    return push(std::move(n));
}

int Tape::unary(Op op, int a) {
    Node n;
    n.op = op;
    n.ins = {a};
    n.val = Tensor::zeros(val(a).shape);
    const auto& va = val(a).v;
    double* o = n.val.v.data();
    switch (op) {
        case Op::kSin:
            for (size_t i = 0; i < va.size(); ++i) o[i] = std::sin(va[i]);
            break;
        case Op::kCos:
            for (size_t i = 0; i < va.size(); ++i) o[i] = std::cos(va[i]);
            break;
        case Op::kErf:
            for (size_t i = 0; i < va.size(); ++i) o[i] = std::erf(va[i]);
            break;
        case Op::kExp:
            for (size_t i = 0; i < va.size(); ++i) o[i] = std::exp(va[i]);
            break;
        case Op::kSqrt:
            for (size_t i = 0; i < va.size(); ++i) {
                check(va[i] >= 0.0, "tape.sqrt: negative argument");
                o[i] = std::sqrt(va[i]);
            }
            break;
        case Op::kGelu:
            for (size_t i = 0; i < va.size(); ++i) o[i] = act_value(Activation::kGelu, va[i]);
            break;
        case Op::kSilu:
            for (size_t i = 0; i < va.size(); ++i) o[i] = act_value(Activation::kSilu, va[i]);
            break;
        default:
            check(false, "tape: not a unary op");
    }
    return push(std::move(n));
}

int Tape::sin(int a) { return unary(Op::kSin, a); }
int Tape::cos(int a) { return unary(Op::kCos, a); }
int Tape::erf(int a) { return unary(Op::kErf, a); }
int Tape::exp(int a) { return unary(Op::kExp, a); }
int Tape::sqrt(int a) { return unary(Op::kSqrt, a); }
int Tape::gelu(int a) { return unary(Op::kGelu, a); }
int Tape::silu(int a) { return unary(Op::kSilu, a); }

int Tape::sum(int a) {
    Node n;
    n.op = Op::kSum;
    n.ins = {a};
    n.orig_shape = val(a).shape;
    n.val = Tensor::scalar(exact_sum(val(a).v.data(), val(a).size()));
    return push(std::move(n));
}

int Tape::sum_axes(int a, std::vector<int> axes) {
    const auto& sa = val(a).shape;
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    std::vector<int> so = sa;
    for (int ax : axes) {
        check(ax >= 0 && ax < static_cast<int>(sa.size()), "tape.sum_axes: axis out of range");
        so[ax] = 1;
    }
    Node n;
    n.op = Op::kSumAxes;
    n.ins = {a};
    n.axes = axes;
    n.orig_shape = sa;
    n.val = Tensor::zeros(so);
    // map each input element to its reduced position
    auto ost = broadcast_strides(so);  // dims of size 1 get stride 0
    std::vector<int> coord(sa.size(), 0);
    const auto& va = val(a).v;
    for (std::int64_t f = 0; f < static_cast<std::int64_t>(va.size()); ++f) {
        std::int64_t of = 0;
        for (size_t d = 0; d < sa.size(); ++d) of += ost[d] * (so[d] == 1 ? 0 : coord[d]);
        n.val.v[of] += va[f];
        for (int d = int(sa.size()) - 1; d >= 0; --d) {
            if (++coord[d] < sa[d]) break;
            coord[d] = 0;
        }
    }
    return push(std::move(n));
}

int Tape::broadcast(int a, std::vector<int> shape) {
    const auto& sa = val(a).shape;
    std::vector<int> ext = extend_shape(sa, shape);
    Node n;
    n.op = Op::kBroadcast;
    n.ins = {a};
    n.orig_shape = sa;
    n.val = Tensor::zeros(shape);
    auto ist = broadcast_strides(ext);
    std::vector<int> coord(shape.size(), 0);
    const auto& va = val(a).v;
    for (std::int64_t f = 0; f < n.val.size(); ++f) {
        std::int64_t inf = 0;
        for (size_t d = 0; d < shape.size(); ++d) inf += ist[d] * coord[d];
        n.val.v[f] = va[inf];
        for (int d = int(shape.size()) - 1; d >= 0; --d) {
            if (++coord[d] < shape[d]) break;
            coord[d] = 0;
        }
    }
    return push(std::move(n));
}

int Tape::reshape(int a, std::vector<int> shape) {
    check(numel(shape) == val(a).size(),
          "tape.reshape: element count mismatch " + shape_str(val(a).shape) + " -> " + shape_str(shape));
    Node n;
    n.op = Op::kReshape;
    n.ins = {a};
    n.orig_shape = val(a).shape;
    n.val.shape = std::move(shape);
    n.val.v = val(a).v;
    return push(std::move(n));
}

int Tape::gather0(int a, std::vector<std::int32_t> idx) {
    const auto& sa = val(a).shape;
    check(!sa.empty(), "tape.gather0: input must have rank >= 1");
    std::int64_t rest = numel(sa) / sa[0];
    std::vector<int> so = sa;
    so[0] = static_cast<int>(idx.size());
    Node n;
    n.op = Op::kGather0;
    n.ins = {a};
    n.val = Tensor::zeros(so);
    const auto& va = val(a).v;
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < sa[0], "tape.gather0: index out of range");
        std::memcpy(n.val.v.data() + i * rest, va.data() + size_t(idx[i]) * rest,
                    sizeof(double) * rest);
    }
    n.idx = std::move(idx);
    return push(std::move(n));
}

int Tape::scatter_add0(int a, std::vector<std::int32_t> idx, int n0) {
    const auto& sa = val(a).shape;
    check(!sa.empty() && sa[0] == static_cast<int>(idx.size()),
          "tape.scatter_add0: leading dim must match index count");
    std::int64_t rest = numel(sa) / std::max(sa[0], 1);
    std::vector<int> so = sa;
    so[0] = n0;
    Node n;
    n.op = Op::kScatterAdd0;
    n.ins = {a};
    n.val = Tensor::zeros(so);
    const auto& va = val(a).v;
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < n0, "tape.scatter_add0: index out of range");
        double* dst = n.val.v.data() + size_t(idx[i]) * rest;
        const double* src = va.data() + i * rest;
        for (std::int64_t r = 0; r < rest; ++r) dst[r] += src[r];
    }
    n.idx = std::move(idx);
    return push(std::move(n));
}

int Tape::slice1(int a, int start, int len) {
    const auto& sa = val(a).shape;
    check(sa.size() == 3, "tape.slice1: rank-3 tensor required");
    check(start >= 0 && len >= 1 && start + len <= sa[1], "tape.slice1: range out of bounds");
    Node n;
    n.op = Op::kSlice1;
    n.ins = {a};
    n.i0 = start;
    n.val = Tensor::zeros({sa[0], len, sa[2]});
    const auto& va = val(a).v;
    for (int i = 0; i < sa[0]; ++i)
        std::memcpy(n.val.v.data() + size_t(i) * len * sa[2],
                    va.data() + (size_t(i) * sa[1] + start) * sa[2],
                    sizeof(double) * size_t(len) * sa[2]);
    return push(std::move(n));
}

int Tape::pad1(int a, int start, int s_total) {
    const auto& sa = val(a).shape;
    check(sa.size() == 3, "tape.pad1: rank-3 tensor required");
    check(start >= 0 && start + sa[1] <= s_total, "tape.pad1: range out of bounds");
    Node n;
    n.op = Op::kPad1;
    n.ins = {a};
    n.i0 = start;
    n.val = Tensor::zeros({sa[0], s_total, sa[2]});
    const auto& va = val(a).v;
    for (int i = 0; i < sa[0]; ++i)
        std::memcpy(n.val.v.data() + (size_t(i) * s_total + start) * sa[2],
                    va.data() + size_t(i) * sa[1] * sa[2],
                    sizeof(double) * size_t(sa[1]) * sa[2]);
    return push(std::move(n));
}

int Tape::cg_product(int a, int b, const CouplingPlan* plan) {
    check(plan != nullptr, "tape.cg_product: null plan");
    const auto& sa = val(a).shape;
    const auto& sb = val(b).shape;
    check(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
          "tape.cg_product: inputs must be [N,S,H] with equal N and H");
    check(sa[1] == plan->x.S() && sb[1] == plan->y.S(),
          "tape.cg_product: plan layout does not match inputs");
    int N = sa[0], H = sa[2];
    int Sz = plan->z.S();
    Node n;
    n.op = Op::kCgProduct;
    n.ins = {a, b};
    n.ext = plan;
    n.val = Tensor::zeros({N, Sz, H});
    const double* X = val(a).v.data();
    const double* Y = val(b).v.data();
    double* Z = n.val.v.data();
    int Sx = sa[1], Sy = sb[1];
    for (int i = 0; i < N; ++i) {
        const double* xr = X + size_t(i) * Sx * H;
        const double* yr = Y + size_t(i) * Sy * H;
        double* zr = Z + size_t(i) * Sz * H;
        for (const auto& e : plan->entries) {
            const double* xp = xr + size_t(e.sx) * H;
            const double* yp = yr + size_t(e.sy) * H;
            double* zp = zr + size_t(e.sz) * H;
            for (int h = 0; h < H; ++h) zp[h] += e.c * xp[h] * yp[h];
        }
    }
    return push(std::move(n));
}

int Tape::irrep_dense(int x, int w, const Layout& layout) {
    const auto& sx = val(x).shape;
    const auto& sw = val(w).shape;
    check(sx.size() == 3 && sx[1] == layout.S(),
          "tape.irrep_dense: input must be [N,S,H] matching the layout");
    check(sw.size() == 3 && sw[0] == layout.slices() && sw[1] == sx[2],
          "tape.irrep_dense: weights must be [slices,Hin,Hout]");
    int N = sx[0], Hi = sx[2], Ho = sw[2];
    Node n;
    n.op = Op::kIrrepDense;
    n.ins = {x, w};
    n.i0 = layout.P;
    n.i1 = layout.L;
    n.val = Tensor::zeros({N, layout.S(), Ho});
    const double* X = val(x).v.data();
    const double* W = val(w).v.data();
    double* O = n.val.v.data();
    int S = layout.S();
    for (int p = 0; p < layout.P; ++p) {
        for (int l = 0; l <= layout.L; ++l) {
            int row = layout.row(p, l);
            int nm = 2 * l + 1;
            const double* Wb = W + size_t(p * (layout.L + 1) + l) * Hi * Ho;
            for (int i = 0; i < N; ++i) {
                for (int r = 0; r < nm; ++r) {
                    const double* xp = X + (size_t(i) * S + row + r) * Hi;
                    double* op = O + (size_t(i) * S + row + r) * Ho;
                    for (int hi = 0; hi < Hi; ++hi) {
                        double xv = xp[hi];
                        if (xv == 0.0) continue;
                        const double* wr = Wb + size_t(hi) * Ho;
                        for (int ho = 0; ho < Ho; ++ho) op[ho] += xv * wr[ho];
                    }
                }
            }
        }
    }
    return push(std::move(n));
}

int Tape::irrep_dense_wgrad(int x, int g, const Layout& layout) {
    const auto& sx = val(x).shape;
    const auto& sg = val(g).shape;
    check(sx.size() == 3 && sg.size() == 3 && sx[0] == sg[0] && sx[1] == sg[1] &&
              sx[1] == layout.S(),
          "tape.irrep_dense_wgrad: inputs must be [N,S,Hin]/[N,S,Hout]");
    int N = sx[0], Hi = sx[2], Ho = sg[2];
    int S = layout.S();
    Node n;
    n.op = Op::kIrrepDenseWgrad;
    n.ins = {x, g};
    n.i0 = layout.P;
    n.i1 = layout.L;
    n.val = Tensor::zeros({layout.slices(), Hi, Ho});
    const double* X = val(x).v.data();
    const double* G = val(g).v.data();
    double* W = n.val.v.data();
    for (int p = 0; p < layout.P; ++p) {
        for (int l = 0; l <= layout.L; ++l) {
            int row = layout.row(p, l);
            int nm = 2 * l + 1;
            double* Wb = W + size_t(p * (layout.L + 1) + l) * Hi * Ho;
            for (int i = 0; i < N; ++i) {
                for (int r = 0; r < nm; ++r) {
                    const double* xp = X + (size_t(i) * S + row + r) * Hi;
                    const double* gp = G + (size_t(i) * S + row + r) * Ho;
                    for (int hi = 0; hi < Hi; ++hi) {
                        double xv = xp[hi];
                        if (xv == 0.0) continue;
                        double* wr = Wb + size_t(hi) * Ho;
                        for (int ho = 0; ho < Ho; ++ho) wr[ho] += xv * gp[ho];
                    }
                }
            }
        }
    }
    return push(std::move(n));
}

int Tape::gated_act(int x, Activation kind) {
    const auto& sx = val(x).shape;
    check(sx.size() == 3 && sx[1] >= 1, "tape.gated_act: input must be [N,S,H]");
    int N = sx[0], S = sx[1], H = sx[2];
    Node n;
    n.op = Op::kGatedAct;
    n.ins = {x};
    n.i0 = static_cast<int>(kind);
    n.val = Tensor::zeros(sx);
    const double* X = val(x).v.data();
    double* O = n.val.v.data();
    for (int i = 0; i < N; ++i) {
        const double* xr = X + size_t(i) * S * H;
        double* orow = O + size_t(i) * S * H;
        for (int h = 0; h < H; ++h) {
            double s = xr[h];  // row 0 = degree-0 even channels
            orow[h] = act_value(kind, s);
            double gate = gate_value(kind, s);
            for (int r = 1; r < S; ++r) orow[size_t(r) * H + h] = gate * xr[size_t(r) * H + h];
        }
    }
    return push(std::move(n));
}

int Tape::ylm_edges(int disp, int L, bool unit_normalize) {
    const auto& sd = val(disp).shape;
    check(sd.size() == 2 && sd[1] == 3, "tape.ylm_edges: input must be [E,3]");
    check(L >= 0 && L <= kMaxDegree, "tape.ylm_edges: degree out of range");
    int E = sd[0], S = num_components(L);
    Node n;
    n.op = Op::kYlmEdges;
    n.ins = {disp};
    n.i0 = L;
    n.i1 = unit_normalize ? 1 : 0;
    n.val = Tensor::zeros({E, S});
    const double* D = val(disp).v.data();
    for (int e = 0; e < E; ++e) {
        const double* r = D + size_t(e) * 3;
        if (unit_normalize) {
            std::vector<double> v(S), g(size_t(S) * 3);
            unit_harmonics_grad(r, L, v.data(), g.data());
            std::memcpy(n.val.v.data() + size_t(e) * S, v.data(), sizeof(double) * S);
        } else {
            solid_harmonics(r, L, n.val.v.data() + size_t(e) * S);
        }
    }
    return push(std::move(n));
}

int Tape::ylm_vjp(int disp, int g, int L, bool unit_normalize) {
    const auto& sd = val(disp).shape;
    const auto& sg = val(g).shape;
    int S = num_components(L);
    check(sd.size() == 2 && sd[1] == 3, "tape.ylm_vjp: disp must be [E,3]");
    check(sg.size() == 2 && sg[0] == sd[0] && sg[1] == S,
          "tape.ylm_vjp: cotangent must be [E,(L+1)^2]");
    int E = sd[0];
    Node n;
    n.op = Op::kYlmVjp;
    n.ins = {disp, g};
    n.i0 = L;
    n.i1 = unit_normalize ? 1 : 0;
    n.val = Tensor::zeros({E, 3});
    const double* D = val(disp).v.data();
    const double* G = val(g).v.data();
    std::vector<double> v(S), J(size_t(S) * 3);
    for (int e = 0; e < E; ++e) {
        const double* r = D + size_t(e) * 3;
        if (unit_normalize) {
            unit_harmonics_grad(r, L, v.data(), J.data());
        } else {
            solid_harmonics_grad(r, L, v.data(), J.data());
        }
        const double* gp = G + size_t(e) * S;
        double* out = n.val.v.data() + size_t(e) * 3;
        for (int i = 0; i < S; ++i) {
            for (int c = 0; c < 3; ++c) out[c] += gp[i] * J[size_t(i) * 3 + c];
        }
    }
    return push(std::move(n));
}

int Tape::vec_norm(int disp) {
    const auto& sd = val(disp).shape;
    check(sd.size() == 2 && sd[1] == 3, "tape.vec_norm: input must be [E,3]");
    int E = sd[0];
    Node n;
    n.op = Op::kVecNorm;
    n.ins = {disp};
    n.val = Tensor::zeros({E});
    const double* D = val(disp).v.data();
    for (int e = 0; e < E; ++e) {
        const double* r = D + size_t(e) * 3;
        n.val.v[e] = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    }
    return push(std::move(n));
}

int Tape::pair_swap(int a) {
    const auto& sa = val(a).shape;
    check(!sa.empty() && sa.back() % 2 == 0, "tape.pair_swap: last axis must be even");
    int D = sa.back();
    std::int64_t rows = numel(sa) / D;
    Node n;
    n.op = Op::kPairSwap;
    n.ins = {a};
    n.val = Tensor::zeros(sa);
    const double* X = val(a).v.data();
    double* O = n.val.v.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = X + r * D;
        double* o = O + r * D;
        for (int k = 0; k < D; k += 2) {
            o[k] = -x[k + 1];
            o[k + 1] = x[k];
        }
    }
    return push(std::move(n));
}

int Tape::rbf(int r, int K, double r_cut) {
    const auto& sr = val(r).shape;
    check(sr.size() == 1, "tape.rbf: input must be [E]");
    check(K >= 2 && r_cut > 0.0, "tape.rbf: need K >= 2 and positive cutoff");
    int E = sr[0];
    double spacing = r_cut / (K - 1);
    Tensor mu = Tensor::zeros({K});
    for (int k = 0; k < K; ++k) mu.v[k] = spacing * k;
    int rcol = reshape(r, {E, 1});
    int rb = broadcast(rcol, {E, K});
    int cb = broadcast(constant(std::move(mu)), {E, K});
    int t = sub(rb, cb);
    return exp(scalar_mul(mul(t, t), -0.5 / (spacing * spacing)));
}

int Tape::erope(int x, int pos, const FrequencySet* freqs, const std::array<double, 3>& u) {
    check(freqs != nullptr && !freqs->omegas.empty(), "tape.erope: empty frequency set");
    const auto& sx = val(x).shape;
    const auto& sp = val(pos).shape;
    check(sx.size() == 3, "tape.erope: features must be [N,S,D]");
    check(sp.size() == 2 && sp[1] == 3 && sp[0] == sx[0], "tape.erope: positions must be [N,3]");
    int N = sx[0], S = sx[1], D = sx[2];
    int K = (D + 1) / 2;
    check(static_cast<int>(freqs->omegas.size()) == K,
          "tape.erope: frequency count must be ceil(D/2)");
    Node n;
    n.op = Op::kErope;
    n.ins = {x, pos};
    n.ext = freqs;
    n.aux_d = {u[0], u[1], u[2]};
    n.val = Tensor::zeros(sx);
    const double* X = val(x).v.data();
    const double* P = val(pos).v.data();
    double* O = n.val.v.data();
    for (int i = 0; i < N; ++i) {
        const double* p = P + size_t(i) * 3;
        double ur = u[0] * p[0] + u[1] * p[1] + u[2] * p[2];
        for (int k = 0; k < K; ++k) {
            double th = freqs->omegas[k] * ur;
            double c = std::cos(th), s = std::sin(th);
            int e = 2 * k, o = 2 * k + 1;
            for (int r = 0; r < S; ++r) {
                const double* xr = X + (size_t(i) * S + r) * D;
                double* orow = O + (size_t(i) * S + r) * D;
                if (o < D) {
                    orow[e] = c * xr[e] - s * xr[o];
                    orow[o] = c * xr[o] + s * xr[e];
                } else {
                    orow[e] = c * xr[e];
                }
            }
        }
    }
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape: numeric backward

const Tensor& Tape::grad(int id) const {
    check(id >= 0 && id < static_cast<int>(nodes_.size()), "tape.grad: bad node id");
    check(!nodes_[id].grad.v.empty(), "tape.grad: no gradient recorded for this node");
    return nodes_[id].grad;
}

namespace {

void ensure_grad(Node& n) {
    if (n.grad.v.empty()) n.grad = Tensor::zeros(n.val.shape);
}

}  // namespace

void Tape::backward(int out) {
    check(out >= 0 && out < static_cast<int>(nodes_.size()), "tape.backward: bad node id");
    check(nodes_[out].val.size() == 1, "tape.backward: output must be a scalar");
    ensure_grad(nodes_[out]);
    nodes_[out].grad.v[0] = 1.0;
    for (int i = out; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.v.empty()) continue;
        const std::vector<double>& g = n.grad.v;
        auto gslot = [&](int slot) -> Node& {
            Node& in = nodes_[n.ins[slot]];
            ensure_grad(in);
            return in;
        };
        auto wants = [&](int slot) { return nodes_[n.ins[slot]].needs_grad; };
        switch (n.op) {
            case Op::kInput:
            case Op::kConstant:
                break;
            case Op::kAdd: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
                }
                if (wants(1)) {
                    auto& gb = gslot(1).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) gb[j] += g[j];
                }
                break;
            }
            case Op::kSub: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
                }
                if (wants(1)) {
                    auto& gb = gslot(1).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) gb[j] -= g[j];
                }
                break;
            }
            case Op::kMul: {
                const auto& va = nodes_[n.ins[0]].val.v;
                const auto& vb = nodes_[n.ins[1]].val.v;
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * vb[j];
                }
                if (wants(1)) {
                    auto& gb = gslot(1).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) gb[j] += g[j] * va[j];
                }
                break;
            }
            case Op::kDiv: {
                const auto& vb = nodes_[n.ins[1]].val.v;
                const auto& vc = n.val.v;
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] / vb[j];
                }
                if (wants(1)) {
                    auto& gb = gslot(1).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) gb[j] -= g[j] * vc[j] / vb[j];
                }
                break;
            }
            case Op::kScalarMul: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * n.s;
                }
                break;
            }
            case Op::kMatmul: {
                const auto& sa = nodes_[n.ins[0]].val.shape;
                const auto& sb = nodes_[n.ins[1]].val.shape;
                int M = sa[0], K = sa[1], Nn = sb[1];
                const double* A = nodes_[n.ins[0]].val.v.data();
                const double* B = nodes_[n.ins[1]].val.v.data();
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (int mi = 0; mi < M; ++mi)
                        for (int k = 0; k < K; ++k) {
                            double acc = 0.0;
                            const double* gr = g.data() + size_t(mi) * Nn;
                            const double* br = B + size_t(k) * Nn;
                            for (int j = 0; j < Nn; ++j) acc += gr[j] * br[j];
                            ga[size_t(mi) * K + k] += acc;
                        }
                }
                if (wants(1)) {
                    auto& gb = gslot(1).grad.v;
                    for (int k = 0; k < K; ++k)
                        for (int mi = 0; mi < M; ++mi) {
                            double av = A[size_t(mi) * K + k];
                            if (av == 0.0) continue;
                            const double* gr = g.data() + size_t(mi) * Nn;
                            double* gbr = gb.data() + size_t(k) * Nn;
                            for (int j = 0; j < Nn; ++j) gbr[j] += av * gr[j];
                        }
                }
                break;
            }
            case Op::kTransposeLast2: {
                if (wants(0)) {
                    const auto& sa = nodes_[n.ins[0]].val.shape;
                    int R = sa[sa.size() - 2], C = sa[sa.size() - 1];
                    std::int64_t batch = numel(sa) / (std::int64_t(R) * C);
                    auto& ga = gslot(0).grad.v;
                    for (std::int64_t t = 0; t < batch; ++t) {
                        const double* gs = g.data() + t * R * C;  // [C,R]
                        double* gd = ga.data() + t * R * C;       // [R,C]
                        for (int i = 0; i < R; ++i)
                            for (int j = 0; j < C; ++j) gd[size_t(i) * C + j] += gs[size_t(j) * R + i];
                    }
                }
                break;
            }
            case Op::kSin: {
                if (wants(0)) {
                    const auto& va = nodes_[n.ins[0]].val.v;
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * std::cos(va[j]);
                }
                break;
            }
            case Op::kCos: {
                if (wants(0)) {
                    const auto& va = nodes_[n.ins[0]].val.v;
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] -= g[j] * std::sin(va[j]);
                }
                break;
            }
            case Op::kErf: {
                if (wants(0)) {
                    const auto& va = nodes_[n.ins[0]].val.v;
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j)
                        ga[j] += g[j] * kTwoInvSqrtPi * std::exp(-va[j] * va[j]);
                }
                break;
            }
            case Op::kExp: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * n.val.v[j];
                }
                break;
            }
            case Op::kSqrt: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * 0.5 / n.val.v[j];
                }
                break;
            }
            case Op::kGelu: {
                if (wants(0)) {
                    const auto& va = nodes_[n.ins[0]].val.v;
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j)
                        ga[j] += g[j] * act_deriv(Activation::kGelu, va[j]);
                }
                break;
            }
            case Op::kSilu: {
                if (wants(0)) {
                    const auto& va = nodes_[n.ins[0]].val.v;
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j)
                        ga[j] += g[j] * act_deriv(Activation::kSilu, va[j]);
                }
                break;
            }
            case Op::kSum: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    double gs = g[0];
                    for (size_t j = 0; j < ga.size(); ++j) ga[j] += gs;
                }
                break;
            }
            case Op::kSumAxes: {
                if (wants(0)) {
                    const auto& sa = n.orig_shape;
                    const auto& so = n.val.shape;
                    auto ost = broadcast_strides(so);
                    auto& ga = gslot(0).grad.v;
                    std::vector<int> coord(sa.size(), 0);
                    for (std::int64_t f = 0; f < static_cast<std::int64_t>(ga.size()); ++f) {
                        std::int64_t of = 0;
                        for (size_t d = 0; d < sa.size(); ++d)
                            of += ost[d] * (so[d] == 1 ? 0 : coord[d]);
                        ga[f] += g[of];
                        for (int d = int(sa.size()) - 1; d >= 0; --d) {
                            if (++coord[d] < sa[d]) break;
                            coord[d] = 0;
                        }
                    }
                }
                break;
            }
            case Op::kBroadcast: {
                if (wants(0)) {
                    const auto& so = n.val.shape;
                    std::vector<int> ext = extend_shape(n.orig_shape, so);
                    auto ist = broadcast_strides(ext);
                    auto& ga = gslot(0).grad.v;
                    std::vector<int> coord(so.size(), 0);
                    for (std::int64_t f = 0; f < n.val.size(); ++f) {
                        std::int64_t inf = 0;
                        for (size_t d = 0; d < so.size(); ++d) inf += ist[d] * coord[d];
                        ga[inf] += g[f];
                        for (int d = int(so.size()) - 1; d >= 0; --d) {
                            if (++coord[d] < so[d]) break;
                            coord[d] = 0;
                        }
                    }
                }
                break;
            }
            case Op::kReshape: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    for (size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
                }
                break;
            }
            case Op::kGather0: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    std::int64_t rest = n.val.size() / std::max<int>(n.val.shape[0], 1);
                    for (size_t j = 0; j < n.idx.size(); ++j) {
                        double* dst = ga.data() + size_t(n.idx[j]) * rest;
                        const double* src = g.data() + j * rest;
                        for (std::int64_t r = 0; r < rest; ++r) dst[r] += src[r];
                    }
                }
                break;
            }
            case Op::kScatterAdd0: {
                if (wants(0)) {
                    auto& ga = gslot(0).grad.v;
                    std::int64_t rest = numel(nodes_[n.ins[0]].val.shape) /
                                        std::max<int>(nodes_[n.ins[0]].val.shape[0], 1);
                    for (size_t j = 0; j < n.idx.size(); ++j) {
                        const double* src = g.data() + size_t(n.idx[j]) * rest;
                        double* dst = ga.data() + j * rest;
                        for (std::int64_t r = 0; r < rest; ++r) dst[r] += src[r];
                    }
                }
                break;
            }
            case Op::kSlice1: {
                if (wants(0)) {
                    const auto& sa = nodes_[n.ins[0]].val.shape;
                    int len = n.val.shape[1], H = sa[2];
                    auto& ga = gslot(0).grad.v;
                    for (int i = 0; i < sa[0]; ++i)
                        for (int r = 0; r < len; ++r) {
                            double* dst = ga.data() + (size_t(i) * sa[1] + n.i0 + r) * H;
                            const double* src = g.data() + (size_t(i) * len + r) * H;
                            for (int h = 0; h < H; ++h) dst[h] += src[h];
                        }
                }
                break;
            }
            case Op::kPad1: {
                if (wants(0)) {
                    const auto& sa = nodes_[n.ins[0]].val.shape;
                    int len = sa[1], H = sa[2], S = n.val.shape[1];
                    auto& ga = gslot(0).grad.v;
                    for (int i = 0; i < sa[0]; ++i)
                        for (int r = 0; r < len; ++r) {
                            const double* src = g.data() + (size_t(i) * S + n.i0 + r) * H;
                            double* dst = ga.data() + (size_t(i) * len + r) * H;
                            for (int h = 0; h < H; ++h) dst[h] += src[h];
                        }
                }
                break;
            }
            case Op::kCgProduct: {
                const auto* plan = static_cast<const CouplingPlan*>(n.ext);
                const auto& sa = nodes_[n.ins[0]].val.shape;
                const auto& sb = nodes_[n.ins[1]].val.shape;
                int N = sa[0], H = sa[2], Sx = sa[1], Sy = sb[1], Sz = n.val.shape[1];
                const double* X = nodes_[n.ins[0]].val.v.data();
                const double* Y = nodes_[n.ins[1]].val.v.data();
                bool wa = wants(0), wb = wants(1);
                double* GX = wa ? gslot(0).grad.v.data() : nullptr;
                double* GY = wb ? gslot(1).grad.v.data() : nullptr;
                for (int i = 0; i < N; ++i) {
                    const double* xr = X + size_t(i) * Sx * H;
                    const double* yr = Y + size_t(i) * Sy * H;
                    const double* gr = g.data() + size_t(i) * Sz * H;
                    for (const auto& e : plan->entries) {
                        const double* gp = gr + size_t(e.sz) * H;
                        if (wa) {
                            const double* yp = yr + size_t(e.sy) * H;
                            double* gxp = GX + (size_t(i) * Sx + e.sx) * H;
                            for (int h = 0; h < H; ++h) gxp[h] += e.c * gp[h] * yp[h];
                        }
                        if (wb) {
                            const double* xp = xr + size_t(e.sx) * H;
                            double* gyp = GY + (size_t(i) * Sy + e.sy) * H;
                            for (int h = 0; h < H; ++h) gyp[h] += e.c * gp[h] * xp[h];
                        }
                    }
                }
                break;
            }
            case Op::kIrrepDense: {
                Layout layout{n.i0, n.i1};
                const auto& sx = nodes_[n.ins[0]].val.shape;
                const auto& sw = nodes_[n.ins[1]].val.shape;
                int N = sx[0], Hi = sx[2], Ho = sw[2], S = layout.S();
                const double* X = nodes_[n.ins[0]].val.v.data();
                const double* W = nodes_[n.ins[1]].val.v.data();
                bool wx = wants(0), ww = wants(1);
                double* GX = wx ? gslot(0).grad.v.data() : nullptr;
                double* GW = ww ? gslot(1).grad.v.data() : nullptr;
                for (int p = 0; p < layout.P; ++p) {
                    for (int l = 0; l <= layout.L; ++l) {
                        int row = layout.row(p, l);
                        int nm = 2 * l + 1;
                        size_t wb = size_t(p * (layout.L + 1) + l) * Hi * Ho;
                        for (int i = 0; i < N; ++i) {
                            for (int r = 0; r < nm; ++r) {
                                size_t base = (size_t(i) * S + row + r);
                                const double* gp = g.data() + base * Ho;
                                if (wx) {
                                    double* gxp = GX + base * Hi;
                                    for (int hi = 0; hi < Hi; ++hi) {
                                        const double* wr = W + wb + size_t(hi) * Ho;
                                        double acc = 0.0;
                                        for (int ho = 0; ho < Ho; ++ho) acc += gp[ho] * wr[ho];
                                        gxp[hi] += acc;
                                    }
                                }
                                if (ww) {
                                    const double* xp = X + base * Hi;
                                    for (int hi = 0; hi < Hi; ++hi) {
                                        double xv = xp[hi];
                                        if (xv == 0.0) continue;
                                        double* gwr = GW + wb + size_t(hi) * Ho;
                                        for (int ho = 0; ho < Ho; ++ho) gwr[ho] += xv * gp[ho];
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case Op::kIrrepDenseWgrad: {
                Layout layout{n.i0, n.i1};
                const auto& sx = nodes_[n.ins[0]].val.shape;
                const auto& sg = nodes_[n.ins[1]].val.shape;
                int N = sx[0], Hi = sx[2], Ho = sg[2], S = layout.S();
                const double* X = nodes_[n.ins[0]].val.v.data();
                const double* Gi = nodes_[n.ins[1]].val.v.data();
                bool wx = wants(0), wg = wants(1);
                double* GX = wx ? gslot(0).grad.v.data() : nullptr;
                double* GG = wg ? gslot(1).grad.v.data() : nullptr;
                for (int p = 0; p < layout.P; ++p) {
                    for (int l = 0; l <= layout.L; ++l) {
                        int row = layout.row(p, l);
                        int nm = 2 * l + 1;
                        size_t wb = size_t(p * (layout.L + 1) + l) * Hi * Ho;
                        for (int i = 0; i < N; ++i) {
                            for (int r = 0; r < nm; ++r) {
                                size_t base = (size_t(i) * S + row + r);
                                if (wx) {
                                    const double* gip = Gi + base * Ho;
                                    double* gxp = GX + base * Hi;
                                    for (int hi = 0; hi < Hi; ++hi) {
                                        const double* gw = g.data() + wb + size_t(hi) * Ho;
                                        double acc = 0.0;
                                        for (int ho = 0; ho < Ho; ++ho) acc += gw[ho] * gip[ho];
                                        gxp[hi] += acc;
                                    }
                                }
                                if (wg) {
                                    const double* xp = X + base * Hi;
                                    double* ggp = GG + base * Ho;
                                    for (int hi = 0; hi < Hi; ++hi) {
                                        double xv = xp[hi];
                                        if (xv == 0.0) continue;
                                        const double* gw = g.data() + wb + size_t(hi) * Ho;
                                        for (int ho = 0; ho < Ho; ++ho) ggp[ho] += xv * gw[ho];
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case Op::kGatedAct: {
                if (wants(0)) {
                    auto kind = static_cast<Activation>(n.i0);
                    const auto& sx = nodes_[n.ins[0]].val.shape;
                    int N = sx[0], S = sx[1], H = sx[2];
                    const double* X = nodes_[n.ins[0]].val.v.data();
                    auto& ga = gslot(0).grad.v;
                    for (int i = 0; i < N; ++i) {
                        const double* xr = X + size_t(i) * S * H;
                        const double* gr = g.data() + size_t(i) * S * H;
                        double* gar = ga.data() + size_t(i) * S * H;
                        for (int h = 0; h < H; ++h) {
                            double s = xr[h];
                            double gate = gate_value(kind, s);
                            double ds = gr[h] * act_deriv(kind, s);
                            double dgate = gate_deriv(kind, s);
                            for (int r = 1; r < S; ++r) {
                                double gv = gr[size_t(r) * H + h];
                                ds += gv * xr[size_t(r) * H + h] * dgate;
                                gar[size_t(r) * H + h] += gv * gate;
                            }
                            gar[h] += ds;
                        }
                    }
                }
                break;
            }
            case Op::kYlmEdges: {
                if (wants(0)) {
                    int L = n.i0, S = num_components(n.i0);
                    bool unit = n.i1 != 0;
                    const double* D = nodes_[n.ins[0]].val.v.data();
                    auto& ga = gslot(0).grad.v;
                    int E = n.val.shape[0];
                    std::vector<double> v(S), J(size_t(S) * 3);
                    for (int e = 0; e < E; ++e) {
                        const double* r = D + size_t(e) * 3;
                        if (unit) {
                            unit_harmonics_grad(r, L, v.data(), J.data());
                        } else {
                            solid_harmonics_grad(r, L, v.data(), J.data());
                        }
                        const double* gp = g.data() + size_t(e) * S;
                        double* gdp = ga.data() + size_t(e) * 3;
                        for (int i2 = 0; i2 < S; ++i2)
                            for (int c = 0; c < 3; ++c) gdp[c] += gp[i2] * J[size_t(i2) * 3 + c];
                    }
                }
                break;
            }
            case Op::kYlmVjp: {
                int L = n.i0, S = num_components(n.i0);
                bool unit = n.i1 != 0;
                int E = n.val.shape[0];
                const double* D = nodes_[n.ins[0]].val.v.data();
                const double* Gin = nodes_[n.ins[1]].val.v.data();
                bool wd = wants(0), wg = wants(1);
                double* GD = wd ? gslot(0).grad.v.data() : nullptr;
                double* GG = wg ? gslot(1).grad.v.data() : nullptr;
                std::vector<double> v(S), J(size_t(S) * 3), Hs(size_t(S) * 9);
                for (int e = 0; e < E; ++e) {
                    const double* r = D + size_t(e) * 3;
                    if (unit) {
                        unit_harmonics_hess(r, L, v.data(), J.data(), Hs.data());
                    } else {
                        solid_harmonics_hess(r, L, v.data(), J.data(), Hs.data());
                    }
                    const double* gp = g.data() + size_t(e) * 3;
                    const double* gin = Gin + size_t(e) * S;
                    if (wg) {
                        double* ggp = GG + size_t(e) * S;
                        for (int i2 = 0; i2 < S; ++i2) {
                            double acc = 0.0;
                            for (int c = 0; c < 3; ++c) acc += gp[c] * J[size_t(i2) * 3 + c];
                            ggp[i2] += acc;
                        }
                    }
                    if (wd) {
                        double* gdp = GD + size_t(e) * 3;
                        for (int i2 = 0; i2 < S; ++i2) {
                            double w = gin[i2];
                            if (w == 0.0) continue;
                            const double* Hb = Hs.data() + size_t(i2) * 9;
                            for (int c = 0; c < 3; ++c) {
                                double acc = 0.0;
                                for (int d = 0; d < 3; ++d) acc += gp[d] * Hb[size_t(d) * 3 + c];
                                gdp[c] += w * acc;
                            }
                        }
                    }
                }
                break;
            }
            case Op::kVecNorm: {
                if (wants(0)) {
                    const double* D = nodes_[n.ins[0]].val.v.data();
                    auto& ga = gslot(0).grad.v;
                    int E = n.val.shape[0];
                    for (int e = 0; e < E; ++e) {
                        double inv = g[e] / n.val.v[e];
                        for (int c = 0; c < 3; ++c) ga[size_t(e) * 3 + c] += inv * D[size_t(e) * 3 + c];
                    }
                }
                break;
            }
            case Op::kPairSwap: {
                if (wants(0)) {
                    int D = n.val.shape.back();
                    std::int64_t rows = n.val.size() / D;
                    auto& ga = gslot(0).grad.v;
                    for (std::int64_t r = 0; r < rows; ++r) {
                        const double* gr = g.data() + r * D;
                        double* gar = ga.data() + r * D;
                        for (int k = 0; k < D; k += 2) {
                            gar[k + 1] -= gr[k];
                            gar[k] += gr[k + 1];
                        }
                    }
                }
                break;
            }
            case Op::kErope: {
                const auto* freqs = static_cast<const FrequencySet*>(n.ext);
                const auto& sx = nodes_[n.ins[0]].val.shape;
                int N = sx[0], S = sx[1], D = sx[2];
                int K = (D + 1) / 2;
                const double* X = nodes_[n.ins[0]].val.v.data();
                const double* P = nodes_[n.ins[1]].val.v.data();
                const double* O = n.val.v.data();
                bool wx = wants(0), wp = wants(1);
                double* GX = wx ? gslot(0).grad.v.data() : nullptr;
                double* GP = wp ? gslot(1).grad.v.data() : nullptr;
                const double* u = n.aux_d.data();
                for (int i = 0; i < N; ++i) {
                    const double* p = P + size_t(i) * 3;
                    double ur = u[0] * p[0] + u[1] * p[1] + u[2] * p[2];
                    for (int k = 0; k < K; ++k) {
                        double w = freqs->omegas[k];
                        double th = w * ur;
                        double c = std::cos(th), s = std::sin(th);
                        int e = 2 * k, o = 2 * k + 1;
                        double dth = 0.0;
                        for (int r = 0; r < S; ++r) {
                            size_t base = (size_t(i) * S + r) * D;
                            if (o < D) {
                                double ge = g[base + e], go = g[base + o];
                                if (wx) {
                                    GX[base + e] += c * ge + s * go;
                                    GX[base + o] += -s * ge + c * go;
                                }
                                if (wp) dth += -ge * O[base + o] + go * O[base + e];
                            } else {
                                double ge = g[base + e];
                                if (wx) GX[base + e] += c * ge;
                                if (wp) dth += -ge * s * X[base + e];
                            }
                        }
                        if (wp) {
                            double f = dth * w;
                            GP[size_t(i) * 3 + 0] += f * u[0];
                            GP[size_t(i) * 3 + 1] += f * u[1];
                            GP[size_t(i) * 3 + 2] += f * u[2];
                        }
                    }
                }
                break;
            }
            case Op::kEfa:
                efa_node_backward(*this, i);
                break;
        }
    }
}

// ---------------------------------------------------------------------------
// Tape: adjoint emitted as graph nodes (enables force-in-the-loss training)

std::vector<int> Tape::gradient_graph(int out, const std::vector<int>& wrt) {
    check(out >= 0 && out < static_cast<int>(nodes_.size()), "tape.gradient_graph: bad node id");
    check(nodes_[out].val.size() == 1, "tape.gradient_graph: output must be a scalar");
    const int n0 = static_cast<int>(nodes_.size());
    std::vector<int> adj(n0, -1);
    auto acc = [&](int target, int gnode) {
        if (target >= n0) return;  // emitted nodes carry no adjoint themselves
        if (!nodes_[target].needs_grad) return;
        adj[target] = (adj[target] < 0) ? gnode : add(adj[target], gnode);
    };
    adj[out] = constant(Tensor::from(nodes_[out].val.shape, {1.0}));
    for (int i = out; i >= 0; --i) {
        if (adj[i] < 0 || !nodes_[i].needs_grad) continue;
        // snapshot: emission appends nodes but never touches existing ones
        const Op op = nodes_[i].op;
        const std::vector<int> ins = nodes_[i].ins;
        const int g = adj[i];
        switch (op) {
            case Op::kInput:
            case Op::kConstant:
                break;
            case Op::kAdd:
                acc(ins[0], g);
                acc(ins[1], g);
                break;
            case Op::kSub:
                acc(ins[0], g);
                acc(ins[1], scalar_mul(g, -1.0));
                break;
            case Op::kMul:
                if (nodes_[ins[0]].needs_grad) acc(ins[0], mul(g, ins[1]));
                if (nodes_[ins[1]].needs_grad) acc(ins[1], mul(g, ins[0]));
                break;
            case Op::kDiv: {
                int t = div(g, ins[1]);
                if (nodes_[ins[0]].needs_grad) acc(ins[0], t);
                if (nodes_[ins[1]].needs_grad) acc(ins[1], scalar_mul(mul(t, i), -1.0));
                break;
            }
            case Op::kScalarMul:
                acc(ins[0], scalar_mul(g, nodes_[i].s));
                break;
            case Op::kMatmul:
                if (nodes_[ins[0]].needs_grad) acc(ins[0], matmul(g, transpose_last2(ins[1])));
                if (nodes_[ins[1]].needs_grad) acc(ins[1], matmul(transpose_last2(ins[0]), g));
                break;
            case Op::kTransposeLast2:
                acc(ins[0], transpose_last2(g));
                break;
            case Op::kSin:
                acc(ins[0], mul(g, cos(ins[0])));
                break;
            case Op::kCos:
                acc(ins[0], scalar_mul(mul(g, sin(ins[0])), -1.0));
                break;
            case Op::kErf:
                acc(ins[0], mul(g, scalar_mul(exp(scalar_mul(mul(ins[0], ins[0]), -1.0)),
                                              kTwoInvSqrtPi)));
                break;
            case Op::kExp:
                acc(ins[0], mul(g, i));
                break;
            case Op::kSqrt:
                acc(ins[0], scalar_mul(div(g, i), 0.5));
                break;
            case Op::kGelu: {
                int a = ins[0];
                int ones = broadcast(constant_scalar(1.0), nodes_[a].val.shape);
                int Phi = scalar_mul(add(erf(scalar_mul(a, kInvSqrt2)), ones), 0.5);
                int phi = scalar_mul(exp(scalar_mul(mul(a, a), -0.5)), kInvSqrtTwoPi);
                acc(a, mul(g, add(Phi, mul(a, phi))));
                break;
            }
            case Op::kSilu: {
                int a = ins[0];
                int ones = broadcast(constant_scalar(1.0), nodes_[a].val.shape);
                int sig = div(ones, add(ones, exp(scalar_mul(a, -1.0))));
                acc(a, mul(g, mul(sig, add(ones, mul(a, sub(ones, sig))))));
                break;
            }
            case Op::kSum:
                acc(ins[0], broadcast(g, nodes_[ins[0]].val.shape));
                break;
            case Op::kSumAxes:
                acc(ins[0], broadcast(g, nodes_[ins[0]].val.shape));
                break;
            case Op::kBroadcast: {
                const auto& so = nodes_[i].val.shape;
                std::vector<int> ext = extend_shape(nodes_[i].orig_shape, so);
                std::vector<int> axes;
                for (size_t d = 0; d < so.size(); ++d)
                    if (ext[d] == 1 && so[d] > 1) axes.push_back(static_cast<int>(d));
                int r = axes.empty() ? g : sum_axes(g, axes);
                acc(ins[0], reshape(r, nodes_[ins[0]].val.shape));
                break;
            }
            case Op::kReshape:
                acc(ins[0], reshape(g, nodes_[ins[0]].val.shape));
                break;
            case Op::kGather0:
                acc(ins[0], scatter_add0(g, nodes_[i].idx, nodes_[ins[0]].val.shape[0]));
                break;
            case Op::kScatterAdd0:
                acc(ins[0], gather0(g, nodes_[i].idx));
                break;
            case Op::kSlice1:
                acc(ins[0], pad1(g, nodes_[i].i0, nodes_[ins[0]].val.shape[1]));
                break;
            case Op::kPad1:
                acc(ins[0], slice1(g, nodes_[i].i0, nodes_[ins[0]].val.shape[1]));
                break;
            case Op::kCgProduct: {
                const auto* plan = static_cast<const CouplingPlan*>(nodes_[i].ext);
                check(plan->gx && plan->gy,
                      "tape.gradient_graph: coupling plan lacks adjoint plans");
                if (nodes_[ins[0]].needs_grad) acc(ins[0], cg_product(g, ins[1], plan->gx.get()));
                if (nodes_[ins[1]].needs_grad) acc(ins[1], cg_product(g, ins[0], plan->gy.get()));
                break;
            }
            case Op::kIrrepDense: {
                Layout layout{nodes_[i].i0, nodes_[i].i1};
                if (nodes_[ins[0]].needs_grad)
                    acc(ins[0], irrep_dense(g, transpose_last2(ins[1]), layout));
                if (nodes_[ins[1]].needs_grad) acc(ins[1], irrep_dense_wgrad(ins[0], g, layout));
                break;
            }
            case Op::kYlmEdges:
                acc(ins[0], ylm_vjp(ins[0], g, nodes_[i].i0, nodes_[i].i1 != 0));
                break;
            case Op::kVecNorm: {
                int E = nodes_[i].val.shape[0];
                int t = broadcast(reshape(div(g, i), {E, 1}), {E, 3});
                acc(ins[0], mul(t, ins[0]));
                break;
            }
            case Op::kErope: {
                const auto* freqs = static_cast<const FrequencySet*>(nodes_[i].ext);
                const auto& sx = nodes_[ins[0]].val.shape;
                int N = sx[0], S = sx[1], D = sx[2];
                check(D % 2 == 0,
                      "tape.gradient_graph: second-order path requires an even channel count "
                      "for the rotary encoding");
                int K = D / 2;
                std::array<double, 3> u = {nodes_[i].aux_d[0], nodes_[i].aux_d[1],
                                           nodes_[i].aux_d[2]};
                if (nodes_[ins[0]].needs_grad) {
                    auto nf = std::make_shared<FrequencySet>(*freqs);
                    for (auto& w : nf->omegas) w = -w;
                    int gx = erope(g, ins[1], nf.get(), u);
                    nodes_[gx].cache = nf;  // keep the negated frequencies alive
                    acc(ins[0], gx);
                }
                if (nodes_[ins[1]].needs_grad) {
                    int t = mul(g, pair_swap(i));
                    int tr = reshape(t, {N, S, K, 2});
                    int ts = reshape(sum_axes(tr, {1, 3}), {N, K});
                    Tensor W = Tensor::zeros({K, 3});
                    for (int k = 0; k < K; ++k)
                        for (int c = 0; c < 3; ++c) W.v[size_t(k) * 3 + c] = freqs->omegas[k] * u[c];
                    acc(ins[1], matmul(ts, constant(std::move(W))));
                }
                break;
            }
            default:
                check(false, std::string("tape.gradient_graph: op '") + op_name(op) +
                                 "' has no graph adjoint (use the primitive composition)");
        }
    }
    std::vector<int> result;
    result.reserve(wrt.size());
    for (int w : wrt) {
        check(w >= 0 && w < n0, "tape.gradient_graph: wrt id out of range");
        result.push_back(adj[w] >= 0 ? adj[w] : constant(Tensor::zeros(nodes_[w].val.shape)));
    }
    return result;
}

// ---------------------------------------------------------------------------
// finite differences

GradientReport finite_difference_check(const Program& program,
                                       const std::vector<Tensor>& inputs, double step) {
    check(step > 0.0, "finite_difference_check: step must be positive");
    GradientReport report;
    report.step = step;
    std::int64_t total = 0;
    for (const auto& t : inputs) total += t.size();
    report.analytic = Tensor::zeros({static_cast<int>(total)});
    report.numeric = Tensor::zeros({static_cast<int>(total)});
    {
        Tape tape;
        std::vector<int> ids;
        ids.reserve(inputs.size());
        for (const auto& t : inputs) ids.push_back(tape.input(t));
        int out = program(tape, ids);
        check(tape.val(out).size() == 1, "finite_difference_check: program must return a scalar");
        tape.backward(out);
        std::int64_t off = 0;
        for (int id : ids) {
            const auto& gv = tape.grad(id).v;
            std::copy(gv.begin(), gv.end(), report.analytic.v.begin() + off);
            off += static_cast<std::int64_t>(gv.size());
        }
    }
    auto evaluate = [&](const std::vector<Tensor>& pert) {
        Tape tape;
        std::vector<int> ids;
        ids.reserve(pert.size());
        for (const auto& t : pert) ids.push_back(tape.input(t));
        return tape.val(program(tape, ids)).v[0];
    };
    std::vector<Tensor> work = inputs;
    std::int64_t off = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
            double keep = work[i].v[j];
            work[i].v[j] = keep + step;
            double fp = evaluate(work);
            work[i].v[j] = keep - step;
            double fm = evaluate(work);
            work[i].v[j] = keep;
            report.numeric.v[off] = (fp - fm) / (2.0 * step);
            ++off;
        }
    }
    for (std::int64_t j = 0; j < total; ++j) {
        double a = report.analytic.v[j], n = report.numeric.v[j];
        double denom = std::max({std::fabs(a), std::fabs(n), 1e-8});
        report.max_rel_error = std::max(report.max_rel_error, std::fabs(a - n) / denom);
    }
    return report;
}

}  // namespace efa
