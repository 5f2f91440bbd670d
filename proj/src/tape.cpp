#include "lab/tape.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>

#include "lab/errors.hpp"

namespace lab {

namespace diag {

namespace {
std::atomic<long> g_degenerate_warnings{0};
}

long degenerate_warning_count() { return g_degenerate_warnings.load(); }
void reset_degenerate_warnings() { g_degenerate_warnings.store(0); }

void note_degenerate(const char* what) {
    if (g_degenerate_warnings.fetch_add(1) == 0) {
        std::fprintf(stderr, "warning: degenerate input in %s (reported once)\n", what);
    }
}

}  // namespace diag

void Tape::backward(const TensorPtr& loss) {
    if (!loss || loss->size() != 1) {
        throw ContractError("backward requires a scalar loss tensor");
    }
    if (!produced(*loss)) {
        throw ContractError("backward requires a loss produced through this tape");
    }
    loss->grad_buffer()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)();
    }
}

namespace ops {

namespace {

TensorPtr make_output(Tape* tape, Tensor value, bool needs_grad) {
    auto out = std::make_shared<Tensor>(std::move(value));
    out->set_requires_grad(needs_grad && tape != nullptr);
    if (tape) tape->tag_output(*out);
    return out;
}

bool wants(const TensorPtr& t) { return t->requires_grad(); }

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape() != b->shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a->shape_str() + " vs " +
                             b->shape_str());
    }
}

// Shared guard: skip the closure entirely when the output never received a
// gradient (it did not feed the loss).
const std::vector<double>* out_grad(const TensorPtr& out) {
    return out->has_grad() ? &out->grad() : nullptr;
}

}  // namespace

TensorPtr matmul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + a->shape_str() + " and " +
                             b->shape_str());
    }
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    Tensor c({m, n});
    {
        const double* A = a->data();
        const double* B = b->data();
        double* C = c.data();
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                const double av = A[static_cast<long>(i) * k + p];
                const double* Brow = B + static_cast<long>(p) * n;
                double* Crow = C + static_cast<long>(i) * n;
                for (int j = 0; j < n; ++j) Crow[j] += av * Brow[j];
            }
        }
    }
    bool ga = wants(a), gb = wants(b);
    auto out = make_output(tape, std::move(c), ga || gb);
    if (tape && (ga || gb)) {
        tape->record([a, b, out, m, k, n, ga, gb] {
            const std::vector<double>* dC = out_grad(out);
            if (!dC) return;
            if (ga) {
                double* dA = a->grad_buffer().data();
                const double* B = b->data();
                for (int i = 0; i < m; ++i) {
                    for (int p = 0; p < k; ++p) {
                        const double* Brow = B + static_cast<long>(p) * n;
                        const double* dCrow = dC->data() + static_cast<long>(i) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += dCrow[j] * Brow[j];
                        dA[static_cast<long>(i) * k + p] += acc;
                    }
                }
            }
            if (gb) {
                double* dB = b->grad_buffer().data();
                const double* A = a->data();
                for (int i = 0; i < m; ++i) {
                    const double* dCrow = dC->data() + static_cast<long>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double av = A[static_cast<long>(i) * k + p];
                        double* dBrow = dB + static_cast<long>(p) * n;
                        for (int j = 0; j < n; ++j) dBrow[j] += av * dCrow[j];
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr affine(Tape* tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (x->rank() != 2 || w->rank() != 2 || x->dim(1) != w->dim(1)) {
        throw DimensionError("affine: incompatible shapes x=" + x->shape_str() +
                             " w=" + w->shape_str());
    }
    const int B = x->dim(0), D = x->dim(1), K = w->dim(0);
    if (b->size() != K) {
        throw DimensionError("affine: bias length " + b->shape_str() + " does not match " +
                             std::to_string(K) + " output units");
    }
    Tensor outv({B, K});
    {
        const double* X = x->data();
        const double* W = w->data();
        const double* bias = b->data();
        double* O = outv.data();
        for (int i = 0; i < B; ++i) {
            const double* xrow = X + static_cast<long>(i) * D;
            double* orow = O + static_cast<long>(i) * K;
            for (int kk = 0; kk < K; ++kk) {
                const double* wrow = W + static_cast<long>(kk) * D;
                double acc = bias[kk];
                for (int d = 0; d < D; ++d) acc += xrow[d] * wrow[d];
                orow[kk] = acc;
            }
        }
    }
    bool gx = wants(x), gw = wants(w), gb = wants(b);
    auto out = make_output(tape, std::move(outv), gx || gw || gb);
    if (tape && (gx || gw || gb)) {
        tape->record([x, w, b, out, B, D, K, gx, gw, gb] {
            const std::vector<double>* dOut = out_grad(out);
            if (!dOut) return;
            const double* dO = dOut->data();
            if (gx) {
                double* dX = x->grad_buffer().data();
                const double* W = w->data();
                for (int i = 0; i < B; ++i) {
                    const double* dorow = dO + static_cast<long>(i) * K;
                    double* dxrow = dX + static_cast<long>(i) * D;
                    for (int kk = 0; kk < K; ++kk) {
                        const double g = dorow[kk];
                        if (g == 0.0) continue;
                        const double* wrow = W + static_cast<long>(kk) * D;
                        for (int d = 0; d < D; ++d) dxrow[d] += g * wrow[d];
                    }
                }
            }
            if (gw) {
                double* dW = w->grad_buffer().data();
                const double* X = x->data();
                for (int i = 0; i < B; ++i) {
                    const double* dorow = dO + static_cast<long>(i) * K;
                    const double* xrow = X + static_cast<long>(i) * D;
                    for (int kk = 0; kk < K; ++kk) {
                        const double g = dorow[kk];
                        if (g == 0.0) continue;
                        double* dwrow = dW + static_cast<long>(kk) * D;
                        for (int d = 0; d < D; ++d) dwrow[d] += g * xrow[d];
                    }
                }
            }
            if (gb) {
                double* dB = b->grad_buffer().data();
                for (int i = 0; i < B; ++i) {
                    const double* dorow = dO + static_cast<long>(i) * K;
                    for (int kk = 0; kk < K; ++kk) dB[kk] += dorow[kk];
                }
            }
        });
    }
    return out;
}

TensorPtr relu(Tape* tape, const TensorPtr& x) {
    Tensor v(x->shape());
    for (long i = 0; i < x->size(); ++i) v.at(i) = x->at(i) > 0.0 ? x->at(i) : 0.0;
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            double* dX = x->grad_buffer().data();
            for (long i = 0; i < x->size(); ++i) {
                if (x->at(i) > 0.0) dX[i] += (*dO)[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

namespace {

TensorPtr linear_combine(Tape* tape, const TensorPtr& a, const TensorPtr& b, const char* name,
                         double ca, double cb) {
    check_same_shape(a, b, name);
    Tensor v(a->shape());
    for (long i = 0; i < a->size(); ++i) v.at(i) = ca * a->at(i) + cb * b->at(i);
    bool ga = wants(a), gb = wants(b);
    auto out = make_output(tape, std::move(v), ga || gb);
    if (tape && (ga || gb)) {
        tape->record([a, b, out, ga, gb, ca, cb] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            if (ga) {
                double* dA = a->grad_buffer().data();
                for (long i = 0; i < a->size(); ++i)
                    dA[i] += ca * (*dO)[static_cast<std::size_t>(i)];
            }
            if (gb) {
                double* dB = b->grad_buffer().data();
                for (long i = 0; i < b->size(); ++i)
                    dB[i] += cb * (*dO)[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    return linear_combine(tape, a, b, "add", 1.0, 1.0);
}

TensorPtr sub(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    return linear_combine(tape, a, b, "sub", 1.0, -1.0);
}

TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "mul");
    Tensor v(a->shape());
    for (long i = 0; i < a->size(); ++i) v.at(i) = a->at(i) * b->at(i);
    bool ga = wants(a), gb = wants(b);
    auto out = make_output(tape, std::move(v), ga || gb);
    if (tape && (ga || gb)) {
        tape->record([a, b, out, ga, gb] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            if (ga) {
                double* dA = a->grad_buffer().data();
                for (long i = 0; i < a->size(); ++i)
                    dA[i] += b->at(i) * (*dO)[static_cast<std::size_t>(i)];
            }
            if (gb) {
                double* dB = b->grad_buffer().data();
                for (long i = 0; i < b->size(); ++i)
                    dB[i] += a->at(i) * (*dO)[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

TensorPtr scale(Tape* tape, const TensorPtr& x, double c) {
    Tensor v(x->shape());
    for (long i = 0; i < x->size(); ++i) v.at(i) = c * x->at(i);
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out, c] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            double* dX = x->grad_buffer().data();
            for (long i = 0; i < x->size(); ++i) dX[i] += c * (*dO)[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

TensorPtr l2_normalize_rows(Tape* tape, const TensorPtr& x) {
    const int B = x->rows(), D = x->cols();
    Tensor v(x->shape());
    std::vector<double> norms(static_cast<std::size_t>(B), 0.0);
    for (int i = 0; i < B; ++i) {
        const double* xr = x->data() + static_cast<long>(i) * D;
        double sq = 0.0;
        for (int d = 0; d < D; ++d) sq += xr[d] * xr[d];
        double n = std::sqrt(sq);
        norms[static_cast<std::size_t>(i)] = n;
        double* vr = v.data() + static_cast<long>(i) * D;
        if (n < 1e-12) {
            diag::note_degenerate("l2_normalize_rows");
            for (int d = 0; d < D; ++d) vr[d] = 0.0;
        } else {
            for (int d = 0; d < D; ++d) vr[d] = xr[d] / n;
        }
    }
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out, norms, B, D] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            double* dX = x->grad_buffer().data();
            for (int i = 0; i < B; ++i) {
                const double n = norms[static_cast<std::size_t>(i)];
                if (n < 1e-12) continue;
                const double* yr = out->data() + static_cast<long>(i) * D;
                const double* dy = dO->data() + static_cast<long>(i) * D;
                double ydy = 0.0;
                for (int d = 0; d < D; ++d) ydy += yr[d] * dy[d];
                double* dxr = dX + static_cast<long>(i) * D;
                for (int d = 0; d < D; ++d) dxr[d] += (dy[d] - yr[d] * ydy) / n;
            }
        });
    }
    return out;
}

TensorPtr log_softmax_rows(Tape* tape, const TensorPtr& x) {
    const int B = x->rows(), K = x->cols();
    if (K == 0) throw DimensionError("log_softmax_rows: zero columns");
    Tensor v(x->shape());
    for (int i = 0; i < B; ++i) {
        const double* xr = x->data() + static_cast<long>(i) * K;
        double mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(xr[k] - mx);
        const double lse = mx + std::log(se);
        double* vr = v.data() + static_cast<long>(i) * K;
        for (int k = 0; k < K; ++k) vr[k] = xr[k] - lse;
    }
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out, B, K] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            double* dX = x->grad_buffer().data();
            for (int i = 0; i < B; ++i) {
                const double* yr = out->data() + static_cast<long>(i) * K;
                const double* dy = dO->data() + static_cast<long>(i) * K;
                double dsum = 0.0;
                for (int k = 0; k < K; ++k) dsum += dy[k];
                double* dxr = dX + static_cast<long>(i) * K;
                for (int k = 0; k < K; ++k) dxr[k] += dy[k] - std::exp(yr[k]) * dsum;
            }
        });
    }
    return out;
}

TensorPtr softmax_cross_entropy(Tape* tape, const TensorPtr& logits,
                                const std::vector<int>& targets) {
    const int B = logits->rows(), K = logits->cols();
    if (K == 0) throw DimensionError("softmax_cross_entropy: zero classes");
    if (static_cast<int>(targets.size()) != B) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for batch of " + std::to_string(B));
    }
    for (int i = 0; i < B; ++i) {
        if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= K) {
            throw IndexError("softmax_cross_entropy: target " +
                             std::to_string(targets[static_cast<std::size_t>(i)]) +
                             " out of range for " + std::to_string(K) + " classes");
        }
    }
    // Keep softmax probabilities for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * K);
    double total = 0.0;
    for (int i = 0; i < B; ++i) {
        const double* xr = logits->data() + static_cast<long>(i) * K;
        double mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(xr[k] - mx);
        const double lse = mx + std::log(se);
        double* pr = probs->data() + static_cast<long>(i) * K;
        for (int k = 0; k < K; ++k) pr[k] = std::exp(xr[k] - lse);
        total += lse - xr[targets[static_cast<std::size_t>(i)]];
    }
    Tensor v({1}, {total / B});
    auto out = make_output(tape, std::move(v), wants(logits));
    if (tape && wants(logits)) {
        tape->record([logits, out, probs, targets, B, K] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            const double g = (*dO)[0] / B;
            double* dX = logits->grad_buffer().data();
            for (int i = 0; i < B; ++i) {
                const double* pr = probs->data() + static_cast<long>(i) * K;
                double* dxr = dX + static_cast<long>(i) * K;
                for (int k = 0; k < K; ++k) dxr[k] += g * pr[k];
                dxr[targets[static_cast<std::size_t>(i)]] -= g;
            }
        });
    }
    return out;
}

TensorPtr rowwise_dot(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "rowwise_dot");
    const int B = a->rows(), D = a->cols();
    Tensor v({B, 1});
    for (int i = 0; i < B; ++i) {
        const double* ar = a->data() + static_cast<long>(i) * D;
        const double* br = b->data() + static_cast<long>(i) * D;
        double acc = 0.0;
        for (int d = 0; d < D; ++d) acc += ar[d] * br[d];
        v.at(static_cast<long>(i)) = acc;
    }
    bool ga = wants(a), gb = wants(b);
    auto out = make_output(tape, std::move(v), ga || gb);
    if (tape && (ga || gb)) {
        tape->record([a, b, out, B, D, ga, gb] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            for (int i = 0; i < B; ++i) {
                const double g = (*dO)[static_cast<std::size_t>(i)];
                if (ga) {
                    double* dA = a->grad_buffer().data() + static_cast<long>(i) * D;
                    const double* br = b->data() + static_cast<long>(i) * D;
                    for (int d = 0; d < D; ++d) dA[d] += g * br[d];
                }
                if (gb) {
                    double* dB = b->grad_buffer().data() + static_cast<long>(i) * D;
                    const double* ar = a->data() + static_cast<long>(i) * D;
                    for (int d = 0; d < D; ++d) dB[d] += g * ar[d];
                }
            }
        });
    }
    return out;
}

TensorPtr concat_cols(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->rows() != b->rows()) {
        throw DimensionError("concat_cols: row mismatch " + a->shape_str() + " vs " +
                             b->shape_str());
    }
    const int B = a->rows(), Ca = a->cols(), Cb = b->cols();
    Tensor v({B, Ca + Cb});
    for (int i = 0; i < B; ++i) {
        for (int c = 0; c < Ca; ++c) v.at(i, c) = a->at(i, c);
        for (int c = 0; c < Cb; ++c) v.at(i, Ca + c) = b->at(i, c);
    }
    bool ga = wants(a), gb = wants(b);
    auto out = make_output(tape, std::move(v), ga || gb);
    if (tape && (ga || gb)) {
        tape->record([a, b, out, B, Ca, Cb, ga, gb] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            const int C = Ca + Cb;
            for (int i = 0; i < B; ++i) {
                const double* dor = dO->data() + static_cast<long>(i) * C;
                if (ga) {
                    double* dA = a->grad_buffer().data() + static_cast<long>(i) * Ca;
                    for (int c = 0; c < Ca; ++c) dA[c] += dor[c];
                }
                if (gb) {
                    double* dB = b->grad_buffer().data() + static_cast<long>(i) * Cb;
                    for (int c = 0; c < Cb; ++c) dB[c] += dor[Ca + c];
                }
            }
        });
    }
    return out;
}

TensorPtr row_sum(Tape* tape, const TensorPtr& x) {
    const int B = x->rows(), C = x->cols();
    Tensor v({B, 1});
    for (int i = 0; i < B; ++i) {
        const double* xr = x->data() + static_cast<long>(i) * C;
        double acc = 0.0;
        for (int c = 0; c < C; ++c) acc += xr[c];
        v.at(static_cast<long>(i)) = acc;
    }
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out, B, C] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            double* dX = x->grad_buffer().data();
            for (int i = 0; i < B; ++i) {
                const double g = (*dO)[static_cast<std::size_t>(i)];
                double* dxr = dX + static_cast<long>(i) * C;
                for (int c = 0; c < C; ++c) dxr[c] += g;
            }
        });
    }
    return out;
}

TensorPtr weighted_sum(Tape* tape, const TensorPtr& x, Tensor weights) {
    if (weights.size() != x->size()) {
        throw DimensionError("weighted_sum: weights " + weights.shape_str() + " vs x " +
                             x->shape_str());
    }
    double acc = 0.0;
    for (long i = 0; i < x->size(); ++i) acc += x->at(i) * weights.at(i);
    Tensor v({1}, {acc});
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        auto w = std::make_shared<Tensor>(std::move(weights));
        tape->record([x, out, w] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            const double g = (*dO)[0];
            double* dX = x->grad_buffer().data();
            for (long i = 0; i < x->size(); ++i) dX[i] += g * w->at(i);
        });
    }
    return out;
}

TensorPtr sum_all(Tape* tape, const TensorPtr& x) {
    double acc = 0.0;
    for (long i = 0; i < x->size(); ++i) acc += x->at(i);
    Tensor v({1}, {acc});
    auto out = make_output(tape, std::move(v), wants(x));
    if (tape && wants(x)) {
        tape->record([x, out] {
            const std::vector<double>* dO = out_grad(out);
            if (!dO) return;
            const double g = (*dO)[0];
            double* dX = x->grad_buffer().data();
            for (long i = 0; i < x->size(); ++i) dX[i] += g;
        });
    }
    return out;
}

TensorPtr mean_all(Tape* tape, const TensorPtr& x) {
    return scale(tape, sum_all(tape, x), 1.0 / static_cast<double>(x->size()));
}

}  // namespace ops

}  // namespace lab
