#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tlin/errors.hpp"

namespace tlin {

enum class Dtype : uint8_t { f64, f32 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "f32"; }
inline int dtype_bytes(Dtype d) { return d == Dtype::f64 ? 8 : 4; }

// Two registers of arithmetic work:
//   interaction_units  D multiply-accumulates per scored query-key pair, charged
//                      once per attention call (score and aggregation together);
//                      masked pairs are charged like live ones.
//   full_flops         multiply-accumulates of every matrix product, projections
//                      and FFNs included.
struct FlopLedger {
    uint64_t interaction_units = 0;
    uint64_t full_flops = 0;
    void reset() {
        interaction_units = 0;
        full_flops = 0;
    }
};

// Dense row-major node. Data is immutable once the tensor has entered a graph
// op; the grad buffer is the one mutable part. Scalars have rank 0.
struct TensorNode {
    std::vector<int64_t> shape;
    Dtype dtype = Dtype::f64;
    std::vector<double> d64;
    std::vector<float> d32;
    bool requires_grad = false;
    std::vector<double> g64;
    std::vector<float> g32;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        return n;
    }
    bool grad_allocated() const { return !g64.empty() || !g32.empty(); }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, Dtype dt = Dtype::f64);
    static Tensor full(std::vector<int64_t> shape, double value, Dtype dt = Dtype::f64);
    static Tensor from(std::vector<int64_t> shape, const std::vector<double>& values,
                       Dtype dt = Dtype::f64);
    static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev,
                        Dtype dt = Dtype::f64);

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int64_t>& shape() const;
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }
    int64_t numel() const;
    int64_t rows() const; // rank-2 only
    int64_t cols() const; // rank-2 only
    Dtype dtype() const;

    double at(int64_t flat) const;
    void set(int64_t flat, double v); // leaf initialization only
    double item() const;              // scalar tensors

    void set_requires_grad(bool b);
    bool requires_grad() const;
    bool has_grad() const;
    double grad_at(int64_t flat) const;
    void zero_grad();

    Tensor clone() const; // deep copy, fresh leaf
    std::vector<double> to_vector() const;

    std::shared_ptr<TensorNode> node() const { return n_; }
    TensorNode* raw() const { return n_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<TensorNode> n_;
    friend class Graph;
};

// Ties a tape and a ledger to one single-threaded computation. Ops belong to
// the graph they were called on; backward consumes the tape in reverse order
// and clears it.
class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    FlopLedger& ledger() { return ledger_; }
    const FlopLedger& ledger() const { return ledger_; }
    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool b) { grad_enabled_ = b; }
    size_t tape_size() const { return tape_.size(); }

    // [m,k] x [k,n] -> [m,n]
    Tensor matmul(const Tensor& a, const Tensor& b);
    // [m,k] x [n,k]^T -> [m,n]
    Tensor matmul_nt(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);       // same shape
    Tensor mul(const Tensor& a, const Tensor& b);       // elementwise
    Tensor scale(const Tensor& a, double s);
    Tensor add_bias(const Tensor& a, const Tensor& bias); // [r,c] + [c]
    Tensor softmax_rows(const Tensor& a);
    // Additive mask evaluated on the fly: mask(i,j) must return 0 or a large
    // negative constant. A row with no surviving entry is a dim_error.
    Tensor softmax_rows_masked(const Tensor& a,
                               const std::function<double(int64_t, int64_t)>& mask);
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5);
    Tensor gelu(const Tensor& x);
    Tensor select_rows(const Tensor& x, std::vector<int64_t> idx);
    Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
    Tensor concat_cols(const std::vector<Tensor>& xs);
    Tensor concat_rows(const std::vector<Tensor>& xs);
    Tensor sum(const Tensor& x); // scalar
    // Numerically fused log-softmax + NLL, summed over rows.
    Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int64_t>& targets);

    // loss must be a rank-0 tensor produced by ops recorded on this graph.
    // Accumulates into .grad of everything on the path; clears the tape.
    void backward(const Tensor& loss);

  private:
    Tensor make_output(std::vector<int64_t> shape, Dtype dt, bool requires_grad);
    void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }
    bool want_grad(std::initializer_list<const Tensor*> inputs) const;

    bool grad_enabled_;
    FlopLedger ledger_;
    std::vector<std::function<void()>> tape_;
};

// Greedy pick over one row of a rank-2 tensor; ties resolve to the lowest index.
int64_t argmax_row(const Tensor& t, int64_t row);

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace tlin
