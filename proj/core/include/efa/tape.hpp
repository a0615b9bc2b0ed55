#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "efa/common.hpp"
#include "efa/erope.hpp"
#include "efa/irreps.hpp"

namespace efa {

// Dense row-major array value. Scalars have an empty shape.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    static Tensor zeros(std::vector<int> shape);
    static Tensor scalar(double s);
    static Tensor from(std::vector<int> shape, std::vector<double> vals);

    std::int64_t size() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
};

// Correctly rounded sum of a double array (error-free expansion
// accumulation). The result depends only on the multiset of addends, never
// on their order, which makes pooled reductions permutation-invariant at
// the bit level and exactly compatible with system duplication.
double exact_sum(const double* x, std::int64_t n);

enum class Op : std::uint8_t {
    kInput, kConstant,
    kAdd, kSub, kMul, kDiv, kScalarMul, kMatmul, kTransposeLast2,
    kSin, kCos, kErf, kExp, kSqrt, kGelu, kSilu,
    kSum, kSumAxes, kBroadcast, kReshape,
    kGather0, kScatterAdd0, kSlice1, kPad1,
    kCgProduct, kIrrepDense, kIrrepDenseWgrad, kGatedAct,
    kYlmEdges, kYlmVjp, kVecNorm, kPairSwap,
    kErope, kEfa,
};

const char* op_name(Op op);

// Parity/degree bookkeeping for feature tensors of shape [N, S, H] with
// S = P * (L+1)^2. Slices are ordered parity-major, degree-minor; the
// (even, l=0) row is always row 0.
struct Layout {
    int P = 2;
    int L = 0;
    int S() const { return P * num_components(L); }
    int slices() const { return P * (L + 1); }
    int row(int p, int l) const { return p * num_components(L) + l * l; }
};

// Compiled sparse channel-wise product between two feature layouts:
// out[:, e.sz, :] += e.c * x[:, e.sx, :] * y[:, e.sy, :] for each entry.
// `build` fills the entries with Clebsch-Gordan couplings; hand-rolled
// plans (e.g. degree-wise filter expansion) use the same structure.
struct CouplingPlan {
    struct Entry {
        int sx, sy, sz;
        double c;
    };
    Layout x, y, z;
    std::vector<Entry> entries;
    // adjoint plans: gx couples (g, y) -> x-shape, gy couples (g, x) -> y-shape
    std::shared_ptr<CouplingPlan> gx, gy;

    // couples every feasible (a, pa) x (b, pb) -> (c, pa^pb) path with
    // c <= z.L (paths whose output parity is absent from z are skipped)
    static CouplingPlan build(const Layout& x, const Layout& y, const Layout& z);
    // derive gx/gy from the current entries (also called by build)
    void finalize_adjoints();
};

struct EfaConfig;  // efa.hpp

// One recorded operation. Inputs refer to earlier nodes; aux fields hold
// whatever the adjoint needs (index lists, small scalars, op caches).
struct Node {
    Op op = Op::kConstant;
    std::vector<int> ins;
    Tensor val;
    Tensor grad;               // allocated by backward()
    bool needs_grad = false;
    double s = 0.0;            // scalar parameter
    int i0 = 0, i1 = 0;        // small integer parameters
    std::vector<std::int32_t> idx;
    std::vector<double> aux_d;
    std::vector<int> axes;     // kSumAxes
    std::vector<int> orig_shape;
    const void* ext = nullptr;          // non-owned (plans, configs, freqs)
    std::shared_ptr<void> cache;        // op-owned forward cache / ownership
};

// Reverse-mode tape. Record a scalar program with the builder methods,
// call backward(output), read grad(input). Deterministic: identical
// programs and inputs give bit-identical gradients. gradient_graph()
// instead emits the adjoint computation as new tape nodes, so derived
// quantities (forces) can appear inside a loss that is itself
// differentiated by a later backward() sweep.
class Tape {
  public:
    int input(Tensor v);
    int constant(Tensor v);
    int constant_scalar(double s) { return constant(Tensor::scalar(s)); }

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);       // elementwise, equal shapes
    int div(int a, int b);       // elementwise, equal shapes
    int scalar_mul(int a, double s);
    int matmul(int a, int b);    // [M,K] x [K,N]
    int transpose_last2(int a);  // swap the last two axes (rank >= 2)

    int sin(int a);
    int cos(int a);
    int erf(int a);
    int exp(int a);
    int sqrt(int a);
    int gelu(int a);             // elementwise x * Phi(x)
    int silu(int a);             // elementwise x * sigmoid(x)

    int sum(int a);              // all elements -> scalar, exact accumulation
    int sum_axes(int a, std::vector<int> axes);  // keeps reduced dims as 1
    int broadcast(int a, std::vector<int> shape);
    int reshape(int a, std::vector<int> shape);

    int gather0(int a, std::vector<std::int32_t> idx);
    int scatter_add0(int a, std::vector<std::int32_t> idx, int n0);
    int slice1(int a, int start, int len);    // [A,S,B] -> [A,len,B]
    int pad1(int a, int start, int s_total);  // [A,len,B] -> [A,S,B], zero fill

    int cg_product(int a, int b, const CouplingPlan* plan);
    // x [N,S,Hin] with S decomposed by `layout`, w [layout.slices(), Hin, Hout]
    int irrep_dense(int x, int w, const Layout& layout);
    // adjoint of irrep_dense with respect to the weights: [slices, Hin, Hout]
    int irrep_dense_wgrad(int x, int g, const Layout& layout);
    int gated_act(int x, Activation kind);  // [N,S,H], gate row = row 0

    int ylm_edges(int disp, int L, bool unit_normalize);  // [E,3] -> [E,(L+1)^2]
    int ylm_vjp(int disp, int g, int L, bool unit_normalize);  // -> [E,3]
    int vec_norm(int disp);                // [E,3] -> [E]
    int pair_swap(int a);  // last axis: (e,o) -> (-o, e); requires even width

    // Gaussian radial basis composed from primitives: centers uniform on
    // [0, r_cut], width = spacing. [E] -> [E,K]
    int rbf(int r, int K, double r_cut);

    // rotary encoding for one sphere direction u: x [N,S,D], pos [N,3]
    int erope(int x, int pos, const FrequencySet* freqs, const std::array<double, 3>& u);

    // fused attention update (first-order only): defined in efa.cpp
    int efa(int x, int pos, int wq, int wk, int wv, const EfaConfig* cfg);

    void backward(int out);

    // Emit the adjoint of `out` with respect to each node in `wrt` as new
    // tape nodes; returns one node id per entry (zeros when disconnected).
    // Supported for the primitive op set; fused ops throw.
    std::vector<int> gradient_graph(int out, const std::vector<int>& wrt);

    const Tensor& val(int id) const { return nodes_[id].val; }
    const Tensor& grad(int id) const;
    size_t size() const { return nodes_.size(); }

    // internal: shared with the fused-op implementation in efa.cpp
    std::vector<Node>& nodes() { return nodes_; }
    int push(Node n);

  private:
    int unary(Op op, int a);
    std::vector<Node> nodes_;
};

struct GradientReport {
    Tensor analytic;   // concatenated over all differentiable inputs
    Tensor numeric;
    double max_rel_error = 0.0;
    double step = 0.0;
};

// A program builds a scalar output from tape inputs created for `inputs`.
using Program = std::function<int(Tape&, const std::vector<int>&)>;

// Central finite differences per input coordinate vs. one reverse sweep.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
GradientReport finite_difference_check(const Program& program,
                                       const std::vector<Tensor>& inputs,
                                       double step);

}  // namespace efa
