#pragma once

#include <cstdint>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"

namespace ssvep::nn {

enum class Pad { same, valid };

std::int64_t conv_out_len(std::int64_t time, int k, Pad pad, int stride);

// 1-D cross-correlation over [batch, ch_in, time] with kernel
// [ch_out, ch_in, k] and optional bias [ch_out]. Zero padding; `same`
// requires stride 1 and preserves the time axis. Pass an invalid Var to skip
// the bias.
Var conv1d(Var x, Var w, Var b, Pad pad = Pad::same, int stride = 1);

// Max pooling over the time axis; `same` pads with -inf so the output length
// is ceil(time / stride).
Var maxpool1d(Var x, int pool_size, int stride = 1, Pad pad = Pad::same);

// y = x . w^T + b for x [batch, n], w [m, n], b [m].
Var dense(Var x, Var w, Var b);

// dense over the last axis of a tensor of any rank >= 2. Bias optional.
Var linear(Var x, Var w, Var b);

// Per-channel normalization of [batch, ch, time] over (batch, time). Train
// mode uses batch statistics (biased variance) and updates the running
// buffers in place by EMA; eval mode reads the running buffers.
Var batchnorm1d(Var x, Var gamma, Var beta, Tensor& running_mean,
                Tensor& running_var, bool train, double momentum = 0.1,
                double eps = 1e-5);

// Normalizes the last axis per position.
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);

Var elu(Var x, double alpha = 1.0);

// Inverted dropout: train mode zeroes with probability p and scales
// survivors by 1/(1-p); eval mode is the exact identity.
Var dropout(Var x, double p, bool train, Rng& rng);

// Softmax over the last axis, max-stabilized.
Var softmax(Var x);

Var add(Var a, Var b);
Var scalar_mul(Var x, double c);
Var reshape(Var x, Shape s);
// [a, b, c] -> [a, c, b]
Var transpose_12(Var x);
// [batch, time, d] -> [batch*heads, time, d/heads] and back
Var split_heads(Var x, int n_heads);
Var merge_heads(Var x, int n_heads);
// Concatenate along axis 1; all other axes must agree.
Var concat_axis1(const std::vector<Var>& xs);
// x [batch, time, d] + rows [capacity >= time, d], broadcast over batch.
Var add_rows(Var x, Var rows);

// Batched matmul over [N, ., .] with optional transposes and a scalar
// factor: y = scale * op(a) . op(b).
Var bmm(Var a, Var b, bool trans_a = false, bool trans_b = false,
        double scale = 1.0);

// Per-band spatial mix: x [batch, bands, ch, time], w [bands, ch, ch];
// output [batch, bands*ch, time] with y[b, band*ch+k, t] =
// sum_i w[band, k, i] * x[b, band, i, t]. Bias-free.
Var channel_fusion(Var x, Var w);

// Scaled dot-product attention with full-matrix head projections
// wq/wk/wv/wo, all [d_model, d_model], bias-free. If `attn_out` is given the
// post-softmax attention weights [batch*heads, time, time] are appended.
Var multi_head_attention(Var x, Var wq, Var wk, Var wv, Var wo, int n_heads,
                         std::vector<Var>* attn_out = nullptr);

// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, const std::vector<int>& labels);

// Scalar sum of squared entries.
Var sum_squares(Var x);

// Scalar sum of all entries.
Var vsum(Var x);

// Scalar sum of x .* r for a fixed weight tensor r (same shape).
Var dot_const(Var x, Tensor r);

// cross_entropy plus l2_coeff * sum of squared entries of every tensor in
// `l2_params` (pass the conv/dense weights only).
Var cross_entropy_loss(Var logits, const std::vector<int>& labels,
                       const std::vector<Var>& l2_params, double l2_coeff);

}  // namespace ssvep::nn
