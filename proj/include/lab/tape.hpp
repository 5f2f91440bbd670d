#pragma once

#include <functional>
#include <vector>

#include "lab/tensor.hpp"

namespace lab {

// Dynamic reverse-mode tape. Ops execute eagerly and append their backward
// closure; recording order is therefore already topological, and backward()
// visits each closure exactly once in reverse.
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = 1 and runs all closures in reverse order.
    // `loss` must be scalar and produced through this tape.
    void backward(const TensorPtr& loss);

    std::size_t num_ops() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    void tag_output(Tensor& t) const { t.tape_tag_ = this; }
    bool produced(const Tensor& t) const { return t.tape_tag_ == this; }

private:
    std::vector<std::function<void()>> ops_;
};

// Differentiable primitives. Passing tape == nullptr evaluates forward only
// (inference mode; nothing is recorded and no gradient will flow), which is
// how the key-encoder path is kept gradient-free.
namespace ops {

// C[m×n] = A[m×k] · B[k×n]. Backward: dA += dC·Bᵀ, dB += Aᵀ·dC.
TensorPtr matmul(Tape* tape, const TensorPtr& a, const TensorPtr& b);

// out[B×K] = x[B×D] · wᵀ[K×D] + b[K].
TensorPtr affine(Tape* tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

TensorPtr relu(Tape* tape, const TensorPtr& x);

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape* tape, const TensorPtr& x, double c);

// Rows scaled to unit L2 norm. Rows with norm below 1e-12 map to zero rows
// (and bump the degenerate-input warning counter); their backward is zero.
TensorPtr l2_normalize_rows(Tape* tape, const TensorPtr& x);

TensorPtr log_softmax_rows(Tape* tape, const TensorPtr& x);

// Mean over the batch of -log softmax(logits)[target], max-shifted.
// Gradient w.r.t. logits is (softmax - onehot) / B.
TensorPtr softmax_cross_entropy(Tape* tape, const TensorPtr& logits,
                                const std::vector<int>& targets);

// z[B×1] with z_b = <a_b, c_b>.
TensorPtr rowwise_dot(Tape* tape, const TensorPtr& a, const TensorPtr& b);

TensorPtr concat_cols(Tape* tape, const TensorPtr& a, const TensorPtr& b);

// x[B×C] -> [B×1].
TensorPtr row_sum(Tape* tape, const TensorPtr& x);

// Scalar sum_i w_i * x_i with constant weights (same length as x).
TensorPtr weighted_sum(Tape* tape, const TensorPtr& x, Tensor weights);

TensorPtr sum_all(Tape* tape, const TensorPtr& x);
TensorPtr mean_all(Tape* tape, const TensorPtr& x);

}  // namespace ops

namespace diag {
// Counts degenerate-input warnings (currently: zero-norm rows fed to
// l2_normalize_rows). Tests reset and inspect it; the CLI reports it.
long degenerate_warning_count();
void reset_degenerate_warnings();
// Bumps the counter; prints to stderr on the first occurrence only.
void note_degenerate(const char* what);
}  // namespace diag

}  // namespace lab
