#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "errors.hpp"

namespace ssvep::nn {

namespace {

// C [m,n] = beta*C + alpha * op(A) . op(B); row-major, lda/ldb/ldc are row
// strides. Loop orders keep the innermost axis contiguous; reduction order is
// fixed for determinism.
void dgemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
           double alpha, const double* A, std::int64_t lda, const double* B,
           std::int64_t ldb, double beta, double* C, std::int64_t ldc) {
  if (beta == 0.0) {
    for (std::int64_t i = 0; i < m; ++i) std::fill(C + i * ldc, C + i * ldc + n, 0.0);
  } else if (beta != 1.0) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) C[i * ldc + j] *= beta;
  }
  if (!ta && !tb) {
    for (std::int64_t i = 0; i < m; ++i) {
      double* c = C + i * ldc;
      const double* a = A + i * lda;
      for (std::int64_t p = 0; p < k; ++p) {
        const double av = alpha * a[p];
        const double* b = B + p * ldb;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    // dot products of contiguous rows
    for (std::int64_t i = 0; i < m; ++i) {
      const double* a = A + i * lda;
      double* c = C + i * ldc;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* b = B + j * ldb;
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        std::int64_t p = 0;
        for (; p + 4 <= k; p += 4) {
          s0 += a[p] * b[p];
          s1 += a[p + 1] * b[p + 1];
          s2 += a[p + 2] * b[p + 2];
          s3 += a[p + 3] * b[p + 3];
        }
        double s = (s0 + s1) + (s2 + s3);
        for (; p < k; ++p) s += a[p] * b[p];
        c[j] += alpha * s;
      }
    }
  } else if (ta && !tb) {
    // rank-1 updates, innermost contiguous over j
    for (std::int64_t p = 0; p < k; ++p) {
      const double* a = A + p * lda;
      const double* b = B + p * ldb;
      for (std::int64_t i = 0; i < m; ++i) {
        const double av = alpha * a[i];
        double* c = C + i * ldc;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      double* c = C + i * ldc;
      for (std::int64_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::int64_t p = 0; p < k; ++p) s += A[p * lda + i] * B[j * ldb + p];
        c[j] += alpha * s;
      }
    }
  }
}

void check_rank(const Var& v, int rank, const char* what) {
  require_data(v.val().rank() == rank,
               std::string(what) + ": expected rank " + std::to_string(rank) +
                   ", got shape " + shape_str(v.val().shape));
}

}  // namespace

std::int64_t conv_out_len(std::int64_t time, int k, Pad pad, int stride) {
  if (pad == Pad::same) return (time + stride - 1) / stride;
  return (time - k) / stride + 1;
}

Var conv1d(Var x, Var w, Var b, Pad pad, int stride) {
  check_rank(x, 3, "conv1d input");
  check_rank(w, 3, "conv1d weight");
  const auto& xs = x.val().shape;
  const auto& ws = w.val().shape;
  const std::int64_t batch = xs[0], cin = xs[1], time = xs[2];
  const std::int64_t cout = ws[0], k = ws[2];
  require_usage(k >= 1 && stride >= 1, "conv1d: kernel and stride must be >= 1");
  require_usage(pad != Pad::same || stride == 1, "conv1d: same padding requires stride 1");
  require_data(ws[1] == cin, "conv1d: weight ch_in " + std::to_string(ws[1]) +
                                 " does not match input ch_in " + std::to_string(cin));
  if (b.valid())
    require_data(b.val().shape == Shape{cout}, "conv1d: bias shape mismatch");
  require_data(pad == Pad::same || time >= k, "conv1d: input shorter than kernel");

  // left pad (k-1)/2, remainder on the right
  const std::int64_t pl = pad == Pad::same ? (k - 1) / 2 : 0;
  const std::int64_t tout = conv_out_len(time, static_cast<int>(k), pad, stride);
  const std::int64_t tpad = time + (pad == Pad::same ? k - 1 : 0);

  Tensor y = Tensor::zeros({batch, cout, tout});
  const double* xp = x.val().ptr();
  const double* wp = w.val().ptr();
  const double* bp = b.valid() ? b.val().ptr() : nullptr;
  double* yp = y.ptr();

  std::vector<double> pad_row(static_cast<std::size_t>(tpad));
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const double* xr = xp + (n * cin + ci) * time;
      const double* src = xr;
      if (pad == Pad::same) {
        std::fill(pad_row.begin(), pad_row.end(), 0.0);
        std::copy(xr, xr + time, pad_row.begin() + pl);
        src = pad_row.data();
      }
      for (std::int64_t co = 0; co < cout; ++co) {
        const double* wr = wp + (co * cin + ci) * k;
        double* yr = yp + (n * cout + co) * tout;
        if (stride == 1) {
          for (std::int64_t j = 0; j < k; ++j) {
            const double wj = wr[j];
            const double* s = src + j;
            for (std::int64_t t = 0; t < tout; ++t) yr[t] += wj * s[t];
          }
        } else {
          for (std::int64_t t = 0; t < tout; ++t) {
            double acc = 0;
            const double* s = src + t * stride;
            for (std::int64_t j = 0; j < k; ++j) acc += wr[j] * s[j];
            yr[t] += acc;
          }
        }
      }
    }
    if (bp) {
      for (std::int64_t co = 0; co < cout; ++co) {
        double* yr = yp + (n * cout + co) * tout;
        for (std::int64_t t = 0; t < tout; ++t) yr[t] += bp[co];
      }
    }
  }

  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return x.tape()->emit(
      std::move(y), inputs,
      [x, w, b, pad, stride, batch, cin, cout, time, tout, k, pl,
       tpad](Tape& tp, int self) {
        const double* dy = tp.grad(self).ptr();
        const double* xp = tp.value(x.id()).ptr();
        const double* wp = tp.value(w.id()).ptr();
        const bool need_dx = tp.requires_grad(x.id());
        const bool need_dw = tp.requires_grad(w.id());
        double* dxp = need_dx ? tp.grad(x.id()).ptr() : nullptr;
        double* dwp = need_dw ? tp.grad(w.id()).ptr() : nullptr;

        if (b.valid() && tp.requires_grad(b.id())) {
          double* db = tp.grad(b.id()).ptr();
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t co = 0; co < cout; ++co) {
              const double* dyr = dy + (n * cout + co) * tout;
              double s = 0;
              for (std::int64_t t = 0; t < tout; ++t) s += dyr[t];
              db[co] += s;
            }
        }
        if (!need_dx && !need_dw) return;

        std::vector<double> pad_row(static_cast<std::size_t>(tpad));
        std::vector<double> dpad_row(static_cast<std::size_t>(tpad));
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            const double* xr = xp + (n * cin + ci) * time;
            const double* src = xr;
            if (pad == Pad::same) {
              std::fill(pad_row.begin(), pad_row.end(), 0.0);
              std::copy(xr, xr + time, pad_row.begin() + pl);
              src = pad_row.data();
            }
            if (need_dx) std::fill(dpad_row.begin(), dpad_row.end(), 0.0);
            for (std::int64_t co = 0; co < cout; ++co) {
              const double* wr = wp + (co * cin + ci) * k;
              double* dwr = need_dw ? dwp + (co * cin + ci) * k : nullptr;
              const double* dyr = dy + (n * cout + co) * tout;
              if (stride == 1) {
                for (std::int64_t j = 0; j < k; ++j) {
                  if (need_dw) {
                    const double* s = src + j;
                    double s0 = 0;
                    for (std::int64_t t = 0; t < tout; ++t) s0 += dyr[t] * s[t];
                    dwr[j] += s0;
                  }
                  if (need_dx) {
                    const double wj = wr[j];
                    double* d = dpad_row.data() + j;
                    for (std::int64_t t = 0; t < tout; ++t) d[t] += wj * dyr[t];
                  }
                }
              } else {
                for (std::int64_t t = 0; t < tout; ++t) {
                  const double g = dyr[t];
                  for (std::int64_t j = 0; j < k; ++j) {
                    if (need_dw) dwr[j] += g * src[t * stride + j];
                    if (need_dx) dpad_row[static_cast<std::size_t>(t * stride + j)] += g * wr[j];
                  }
                }
              }
            }
            if (need_dx) {
              double* dxr = dxp + (n * cin + ci) * time;
              for (std::int64_t t = 0; t < time; ++t) dxr[t] += dpad_row[static_cast<std::size_t>(t + pl)];
            }
          }
        }
      });
}

Var maxpool1d(Var x, int pool_size, int stride, Pad pad) {
  check_rank(x, 3, "maxpool1d input");
  require_usage(pool_size >= 1 && stride >= 1, "maxpool1d: pool and stride must be >= 1");
  const auto& xs = x.val().shape;
  const std::int64_t batch = xs[0], ch = xs[1], time = xs[2];
  const std::int64_t k = pool_size;
  require_data(pad == Pad::same || time >= k, "maxpool1d: input shorter than window");
  const std::int64_t pl = pad == Pad::same ? (k - 1) / 2 : 0;
  const std::int64_t tout = conv_out_len(time, pool_size, pad, stride);

  Tensor y = Tensor::zeros({batch, ch, tout});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(batch * ch * tout));
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t r = 0; r < batch * ch; ++r) {
    const double* xr = xp + r * time;
    double* yr = yp + r * tout;
    std::int64_t* ar = argmax.data() + r * tout;
    for (std::int64_t t = 0; t < tout; ++t) {
      double best = -std::numeric_limits<double>::infinity();
      std::int64_t besti = -1;
      const std::int64_t start = t * stride - pl;
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t idx = start + j;
        if (idx < 0 || idx >= time) continue;  // -inf pad
        if (xr[idx] > best) {
          best = xr[idx];
          besti = idx;
        }
      }
      require_data(besti >= 0, "maxpool1d: empty window");
      yr[t] = best;
      ar[t] = besti;
    }
  }
  return x.tape()->emit(std::move(y), {x},
                        [x, argmax = std::move(argmax), batch, ch, time,
                         tout](Tape& tp, int self) {
                          const double* dy = tp.grad(self).ptr();
                          if (!tp.requires_grad(x.id())) return;
                          double* dx = tp.grad(x.id()).ptr();
                          for (std::int64_t r = 0; r < batch * ch; ++r) {
                            const double* dyr = dy + r * tout;
                            double* dxr = dx + r * time;
                            const std::int64_t* ar = argmax.data() + r * tout;
                            for (std::int64_t t = 0; t < tout; ++t)
                              dxr[ar[t]] += dyr[t];
                          }
                        });
}

Var linear(Var x, Var w, Var b) {
  require_data(x.val().rank() >= 2, "linear: input rank must be >= 2");
  check_rank(w, 2, "linear weight");
  const auto& xs = x.val().shape;
  const std::int64_t in = xs.back();
  const std::int64_t rows = x.val().size() / in;
  const std::int64_t out = w.val().shape[0];
  require_data(w.val().shape[1] == in,
               "linear: weight expects " + std::to_string(w.val().shape[1]) +
                   " features, input has " + std::to_string(in));
  if (b.valid()) require_data(b.val().shape == Shape{out}, "linear: bias shape mismatch");

  Shape ys = xs;
  ys.back() = out;
  Tensor y = Tensor::zeros(ys);
  dgemm(false, true, rows, out, in, 1.0, x.val().ptr(), in, w.val().ptr(), in,
        0.0, y.ptr(), out);
  if (b.valid()) {
    const double* bp = b.val().ptr();
    double* yp = y.ptr();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < out; ++j) yp[r * out + j] += bp[j];
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return x.tape()->emit(std::move(y), inputs, [x, w, b, rows, in, out](Tape& tp, int self) {
    const double* dy = tp.grad(self).ptr();
    if (tp.requires_grad(x.id()))
      dgemm(false, false, rows, in, out, 1.0, dy, out, tp.value(w.id()).ptr(),
            in, 1.0, tp.grad(x.id()).ptr(), in);
    if (tp.requires_grad(w.id()))
      dgemm(true, false, out, in, rows, 1.0, dy, out, tp.value(x.id()).ptr(),
            in, 1.0, tp.grad(w.id()).ptr(), in);
    if (b.valid() && tp.requires_grad(b.id())) {
      double* db = tp.grad(b.id()).ptr();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < out; ++j) db[j] += dy[r * out + j];
    }
  });
}

Var dense(Var x, Var w, Var b) {
  check_rank(x, 2, "dense input");
  return linear(x, w, b);
}

Var batchnorm1d(Var x, Var gamma, Var beta, Tensor& running_mean,
                Tensor& running_var, bool train, double momentum, double eps) {
  check_rank(x, 3, "batchnorm1d input");
  const auto& xs = x.val().shape;
  const std::int64_t batch = xs[0], ch = xs[1], time = xs[2];
  require_data(gamma.val().shape == Shape{ch} && beta.val().shape == Shape{ch},
               "batchnorm1d: gamma/beta must be [ch]");
  require_data(running_mean.shape == Shape{ch} && running_var.shape == Shape{ch},
               "batchnorm1d: running stats must be [ch]");
  const std::int64_t n = batch * time;
  require_data(!train || n > 1, "batchnorm1d: train mode needs more than one element per channel");

  Tensor y = Tensor::zeros(xs);
  Tensor xhat = Tensor::zeros(xs);
  Tensor inv_std({ch}, std::vector<double>(static_cast<std::size_t>(ch)));
  const double* xp = x.val().ptr();
  const double* gp = gamma.val().ptr();
  const double* bp = beta.val().ptr();
  double* yp = y.ptr();
  double* hp = xhat.ptr();

  for (std::int64_t c = 0; c < ch; ++c) {
    double mean, var;
    if (train) {
      double s = 0;
      for (std::int64_t b2 = 0; b2 < batch; ++b2) {
        const double* xr = xp + (b2 * ch + c) * time;
        for (std::int64_t t = 0; t < time; ++t) s += xr[t];
      }
      mean = s / static_cast<double>(n);
      double v = 0;
      for (std::int64_t b2 = 0; b2 < batch; ++b2) {
        const double* xr = xp + (b2 * ch + c) * time;
        for (std::int64_t t = 0; t < time; ++t) {
          const double d = xr[t] - mean;
          v += d * d;
        }
      }
      var = v / static_cast<double>(n);
      running_mean.data[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_mean.data[static_cast<std::size_t>(c)] + momentum * mean;
      running_var.data[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_var.data[static_cast<std::size_t>(c)] + momentum * var;
    } else {
      mean = running_mean.data[static_cast<std::size_t>(c)];
      var = running_var.data[static_cast<std::size_t>(c)];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std.data[static_cast<std::size_t>(c)] = istd;
    const double g = gp[c], bb = bp[c];
    for (std::int64_t b2 = 0; b2 < batch; ++b2) {
      const double* xr = xp + (b2 * ch + c) * time;
      double* hr = hp + (b2 * ch + c) * time;
      double* yr = yp + (b2 * ch + c) * time;
      for (std::int64_t t = 0; t < time; ++t) {
        const double h = (xr[t] - mean) * istd;
        hr[t] = h;
        yr[t] = g * h + bb;
      }
    }
  }

  return x.tape()->emit(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
       train, batch, ch, time, n](Tape& tp, int self) {
        const double* dy = tp.grad(self).ptr();
        const double* hp = xhat.ptr();
        const double* gp = tp.value(gamma.id()).ptr();
        if (tp.requires_grad(gamma.id())) {
          double* dg = tp.grad(gamma.id()).ptr();
          for (std::int64_t c = 0; c < ch; ++c) {
            double s = 0;
            for (std::int64_t b2 = 0; b2 < batch; ++b2) {
              const std::int64_t off = (b2 * ch + c) * time;
              for (std::int64_t t = 0; t < time; ++t) s += dy[off + t] * hp[off + t];
            }
            dg[c] += s;
          }
        }
        if (tp.requires_grad(beta.id())) {
          double* db = tp.grad(beta.id()).ptr();
          for (std::int64_t c = 0; c < ch; ++c) {
            double s = 0;
            for (std::int64_t b2 = 0; b2 < batch; ++b2) {
              const std::int64_t off = (b2 * ch + c) * time;
              for (std::int64_t t = 0; t < time; ++t) s += dy[off + t];
            }
            db[c] += s;
          }
        }
        if (!tp.requires_grad(x.id())) return;
        double* dx = tp.grad(x.id()).ptr();
        for (std::int64_t c = 0; c < ch; ++c) {
          const double g = gp[c];
          const double istd = inv_std.data[static_cast<std::size_t>(c)];
          if (!train) {
            const double f = g * istd;
            for (std::int64_t b2 = 0; b2 < batch; ++b2) {
              const std::int64_t off = (b2 * ch + c) * time;
              for (std::int64_t t = 0; t < time; ++t) dx[off + t] += f * dy[off + t];
            }
            continue;
          }
          double sum_dy = 0, sum_dyh = 0;
          for (std::int64_t b2 = 0; b2 < batch; ++b2) {
            const std::int64_t off = (b2 * ch + c) * time;
            for (std::int64_t t = 0; t < time; ++t) {
              sum_dy += dy[off + t];
              sum_dyh += dy[off + t] * hp[off + t];
            }
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::int64_t b2 = 0; b2 < batch; ++b2) {
            const std::int64_t off = (b2 * ch + c) * time;
            for (std::int64_t t = 0; t < time; ++t) {
              dx[off + t] += g * istd *
                             (dy[off + t] - inv_n * sum_dy - hp[off + t] * inv_n * sum_dyh);
            }
          }
        }
      });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  require_data(x.val().rank() >= 1, "layernorm: input rank must be >= 1");
  const std::int64_t d = x.val().shape.back();
  const std::int64_t rows = x.val().size() / d;
  require_data(gamma.val().shape == Shape{d} && beta.val().shape == Shape{d},
               "layernorm: gamma/beta must match the last axis");

  Tensor y = Tensor::zeros(x.val().shape);
  Tensor xhat = Tensor::zeros(x.val().shape);
  Tensor inv_std({rows}, std::vector<double>(static_cast<std::size_t>(rows)));
  const double* xp = x.val().ptr();
  const double* gp = gamma.val().ptr();
  const double* bp = beta.val().ptr();
  double* yp = y.ptr();
  double* hp = xhat.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * d;
    double mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double dv = xr[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std.data[static_cast<std::size_t>(r)] = istd;
    for (std::int64_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * istd;
      hp[r * d + j] = h;
      yp[r * d + j] = gp[j] * h + bp[j];
    }
  }
  return x.tape()->emit(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
       rows, d](Tape& tp, int self) {
        const double* dy = tp.grad(self).ptr();
        const double* hp = xhat.ptr();
        const double* gp = tp.value(gamma.id()).ptr();
        if (tp.requires_grad(gamma.id())) {
          double* dg = tp.grad(gamma.id()).ptr();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * hp[r * d + j];
        }
        if (tp.requires_grad(beta.id())) {
          double* db = tp.grad(beta.id()).ptr();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
        }
        if (!tp.requires_grad(x.id())) return;
        double* dx = tp.grad(x.id()).ptr();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double istd = inv_std.data[static_cast<std::size_t>(r)];
          double s1 = 0, s2 = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double dg = dy[r * d + j] * gp[j];
            s1 += dg;
            s2 += dg * hp[r * d + j];
          }
          for (std::int64_t j = 0; j < d; ++j) {
            const double dg = dy[r * d + j] * gp[j];
            dx[r * d + j] += istd * (dg - inv_d * s1 - hp[r * d + j] * inv_d * s2);
          }
        }
      });
}

Var elu(Var x, double alpha) {
  Tensor y = Tensor::zeros(x.val().shape);
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  const std::int64_t n = x.val().size();
  for (std::int64_t i = 0; i < n; ++i)
    yp[i] = xp[i] >= 0 ? xp[i] : alpha * std::expm1(xp[i]);
  Tensor saved = y;  // d/dx = y + alpha for x < 0
  return x.tape()->emit(std::move(y), {x},
                        [x, saved = std::move(saved), alpha, n](Tape& tp, int self) {
                          if (!tp.requires_grad(x.id())) return;
                          const double* dy = tp.grad(self).ptr();
                          const double* xp = tp.value(x.id()).ptr();
                          const double* yv = saved.ptr();
                          double* dx = tp.grad(x.id()).ptr();
                          for (std::int64_t i = 0; i < n; ++i)
                            dx[i] += xp[i] >= 0 ? dy[i] : dy[i] * (yv[i] + alpha);
                        });
}

Var dropout(Var x, double p, bool train, Rng& rng) {
  require_usage(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (!train || p == 0.0) {
    // exact identity, no rng draws
    Tensor y = x.val();
    return x.tape()->emit(std::move(y), {x}, [x](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      tp.accumulate(x.id(), g.ptr(), g.size());
    });
  }
  const std::int64_t n = x.val().size();
  const double inv_keep = 1.0 / (1.0 - p);
  Tensor mask = Tensor::zeros(x.val().shape);
  Tensor y = Tensor::zeros(x.val().shape);
  const double* xp = x.val().ptr();
  double* mp = mask.ptr();
  double* yp = y.ptr();
  for (std::int64_t i = 0; i < n; ++i) {
    const double keep = rng.uniform() >= p ? inv_keep : 0.0;
    mp[i] = keep;
    yp[i] = keep * xp[i];
  }
  return x.tape()->emit(std::move(y), {x},
                        [x, mask = std::move(mask), n](Tape& tp, int self) {
                          if (!tp.requires_grad(x.id())) return;
                          const double* dy = tp.grad(self).ptr();
                          const double* mp = mask.ptr();
                          double* dx = tp.grad(x.id()).ptr();
                          for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * mp[i];
                        });
}

Var softmax(Var x) {
  require_data(x.val().rank() >= 1, "softmax: input rank must be >= 1");
  const std::int64_t d = x.val().shape.back();
  const std::int64_t rows = x.val().size() / d;
  Tensor y = Tensor::zeros(x.val().shape);
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * d;
    double* yr = yp + r * d;
    double m = xr[0];
    for (std::int64_t j = 1; j < d; ++j) m = std::max(m, xr[j]);
    double s = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - m);
      s += yr[j];
    }
    const double inv = 1.0 / s;
    for (std::int64_t j = 0; j < d; ++j) yr[j] *= inv;
  }
  Tensor saved = y;
  return x.tape()->emit(std::move(y), {x},
                        [x, saved = std::move(saved), rows, d](Tape& tp, int self) {
                          if (!tp.requires_grad(x.id())) return;
                          const double* dy = tp.grad(self).ptr();
                          const double* yv = saved.ptr();
                          double* dx = tp.grad(x.id()).ptr();
                          for (std::int64_t r = 0; r < rows; ++r) {
                            const double* dyr = dy + r * d;
                            const double* yr = yv + r * d;
                            double dot = 0;
                            for (std::int64_t j = 0; j < d; ++j) dot += dyr[j] * yr[j];
                            double* dxr = dx + r * d;
                            for (std::int64_t j = 0; j < d; ++j)
                              dxr[j] += yr[j] * (dyr[j] - dot);
                          }
                        });
}

Var add(Var a, Var b) {
  require_data(a.val().shape == b.val().shape,
               "add: shape mismatch " + shape_str(a.val().shape) + " vs " +
                   shape_str(b.val().shape));
  Tensor y = a.val();
  const double* bp = b.val().ptr();
  double* yp = y.ptr();
  const std::int64_t n = y.size();
  for (std::int64_t i = 0; i < n; ++i) yp[i] += bp[i];
  return a.tape()->emit(std::move(y), {a, b}, [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    tp.accumulate(a.id(), g.ptr(), g.size());
    tp.accumulate(b.id(), g.ptr(), g.size());
  });
}

Var scalar_mul(Var x, double c) {
  Tensor y = x.val();
  for (double& v : y.data) v *= c;
  return x.tape()->emit(std::move(y), {x}, [x, c](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    tp.accumulate_scaled(x.id(), g.ptr(), g.size(), c);
  });
}

Var reshape(Var x, Shape s) {
  require_data(numel(s) == x.val().size(),
               "reshape: cannot view " + shape_str(x.val().shape) + " as " + shape_str(s));
  Tensor y(std::move(s), x.val().data);
  return x.tape()->emit(std::move(y), {x}, [x](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    tp.accumulate(x.id(), g.ptr(), g.size());
  });
}

Var transpose_12(Var x) {
  check_rank(x, 3, "transpose_12 input");
  const auto& s = x.val().shape;
  const std::int64_t a = s[0], b = s[1], c = s[2];
  Tensor y = Tensor::zeros({a, c, b});
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t j = 0; j < b; ++j) {
      const double* xr = xp + (i * b + j) * c;
      for (std::int64_t t = 0; t < c; ++t) yp[(i * c + t) * b + j] = xr[t];
    }
  return x.tape()->emit(std::move(y), {x}, [x, a, b, c](Tape& tp, int self) {
    if (!tp.requires_grad(x.id())) return;
    const double* dy = tp.grad(self).ptr();
    double* dx = tp.grad(x.id()).ptr();
    for (std::int64_t i = 0; i < a; ++i)
      for (std::int64_t t = 0; t < c; ++t) {
        const double* dyr = dy + (i * c + t) * b;
        for (std::int64_t j = 0; j < b; ++j) dx[(i * b + j) * c + t] += dyr[j];
      }
  });
}

Var split_heads(Var x, int n_heads) {
  check_rank(x, 3, "split_heads input");
  const auto& s = x.val().shape;
  const std::int64_t b = s[0], t = s[1], d = s[2];
  require_usage(d % n_heads == 0, "d_model " + std::to_string(d) +
                                      " not divisible by n_heads " + std::to_string(n_heads));
  const std::int64_t h = n_heads, dk = d / h;
  Tensor y = Tensor::zeros({b * h, t, dk});
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < t; ++j)
      for (std::int64_t hd = 0; hd < h; ++hd)
        std::memcpy(yp + ((i * h + hd) * t + j) * dk, xp + (i * t + j) * d + hd * dk,
                    static_cast<std::size_t>(dk) * sizeof(double));
  return x.tape()->emit(std::move(y), {x}, [x, b, t, d, h, dk](Tape& tp, int self) {
    if (!tp.requires_grad(x.id())) return;
    const double* dy = tp.grad(self).ptr();
    double* dx = tp.grad(x.id()).ptr();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < t; ++j)
        for (std::int64_t hd = 0; hd < h; ++hd) {
          const double* src = dy + ((i * h + hd) * t + j) * dk;
          double* dst = dx + (i * t + j) * d + hd * dk;
          for (std::int64_t q = 0; q < dk; ++q) dst[q] += src[q];
        }
  });
}

Var merge_heads(Var x, int n_heads) {
  check_rank(x, 3, "merge_heads input");
  const auto& s = x.val().shape;
  const std::int64_t bh = s[0], t = s[1], dk = s[2];
  require_usage(bh % n_heads == 0, "merge_heads: batch*heads not divisible by n_heads");
  const std::int64_t h = n_heads, b = bh / h, d = dk * h;
  Tensor y = Tensor::zeros({b, t, d});
  const double* xp = x.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t hd = 0; hd < h; ++hd)
      for (std::int64_t j = 0; j < t; ++j)
        std::memcpy(yp + (i * t + j) * d + hd * dk, xp + ((i * h + hd) * t + j) * dk,
                    static_cast<std::size_t>(dk) * sizeof(double));
  return x.tape()->emit(std::move(y), {x}, [x, b, t, d, h, dk](Tape& tp, int self) {
    if (!tp.requires_grad(x.id())) return;
    const double* dy = tp.grad(self).ptr();
    double* dx = tp.grad(x.id()).ptr();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t hd = 0; hd < h; ++hd)
        for (std::int64_t j = 0; j < t; ++j) {
          const double* src = dy + (i * t + j) * d + hd * dk;
          double* dst = dx + ((i * h + hd) * t + j) * dk;
          for (std::int64_t q = 0; q < dk; ++q) dst[q] += src[q];
        }
  });
}

Var concat_axis1(const std::vector<Var>& xs) {
  require_data(!xs.empty(), "concat: no inputs");
  const auto& s0 = xs[0].val().shape;
  require_data(s0.size() >= 2, "concat: inputs must have rank >= 2");
  const std::int64_t batch = s0[0];
  std::int64_t rest = 1;
  for (std::size_t i = 2; i < s0.size(); ++i) rest *= s0[i];
  std::int64_t ctotal = 0;
  for (const Var& v : xs) {
    const auto& s = v.val().shape;
    require_data(s.size() == s0.size() && s[0] == batch,
                 "concat: rank/batch mismatch");
    std::int64_t r = 1;
    for (std::size_t i = 2; i < s.size(); ++i) {
      require_data(s[i] == s0[i], "concat: trailing axis mismatch");
      r *= s[i];
    }
    (void)r;
    ctotal += s[1];
  }
  Shape ys = s0;
  ys[1] = ctotal;
  Tensor y = Tensor::zeros(ys);
  double* yp = y.ptr();
  std::int64_t coff = 0;
  for (const Var& v : xs) {
    const std::int64_t c = v.val().shape[1];
    const double* xp = v.val().ptr();
    for (std::int64_t n = 0; n < batch; ++n)
      std::memcpy(yp + (n * ctotal + coff) * rest, xp + n * c * rest,
                  static_cast<std::size_t>(c * rest) * sizeof(double));
    coff += c;
  }
  return xs[0].tape()->emit(std::move(y), xs, [xs, batch, rest, ctotal](Tape& tp, int self) {
    const double* dy = tp.grad(self).ptr();
    std::int64_t coff = 0;
    for (const Var& v : xs) {
      const std::int64_t c = v.val().shape[1];
      if (tp.requires_grad(v.id())) {
        double* dx = tp.grad(v.id()).ptr();
        for (std::int64_t n = 0; n < batch; ++n) {
          const double* src = dy + (n * ctotal + coff) * rest;
          double* dst = dx + n * c * rest;
          for (std::int64_t i = 0; i < c * rest; ++i) dst[i] += src[i];
        }
      }
      coff += c;
    }
  });
}

Var add_rows(Var x, Var rows) {
  check_rank(x, 3, "add_rows input");
  check_rank(rows, 2, "add_rows rows");
  const auto& s = x.val().shape;
  const std::int64_t b = s[0], t = s[1], d = s[2];
  require_data(rows.val().shape[0] >= t && rows.val().shape[1] == d,
               "position table too small: need " + std::to_string(t) + " x " +
                   std::to_string(d) + ", have " + shape_str(rows.val().shape));
  Tensor y = x.val();
  const double* rp = rows.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < t; ++j) {
      double* yr = yp + (i * t + j) * d;
      const double* rr = rp + j * d;
      for (std::int64_t q = 0; q < d; ++q) yr[q] += rr[q];
    }
  return x.tape()->emit(std::move(y), {x, rows}, [x, rows, b, t, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    tp.accumulate(x.id(), g.ptr(), g.size());
    if (tp.requires_grad(rows.id())) {
      double* dr = tp.grad(rows.id()).ptr();
      const double* dy = g.ptr();
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < t; ++j) {
          const double* dyr = dy + (i * t + j) * d;
          double* drr = dr + j * d;
          for (std::int64_t q = 0; q < d; ++q) drr[q] += dyr[q];
        }
    }
  });
}

Var bmm(Var a, Var b, bool trans_a, bool trans_b, double scale) {
  check_rank(a, 3, "bmm lhs");
  check_rank(b, 3, "bmm rhs");
  const auto& as = a.val().shape;
  const auto& bs = b.val().shape;
  require_data(as[0] == bs[0], "bmm: batch mismatch");
  const std::int64_t nb = as[0];
  const std::int64_t m = trans_a ? as[2] : as[1];
  const std::int64_t ka = trans_a ? as[1] : as[2];
  const std::int64_t kb = trans_b ? bs[2] : bs[1];
  const std::int64_t n = trans_b ? bs[1] : bs[2];
  require_data(ka == kb, "bmm: inner dimension mismatch");
  Tensor y = Tensor::zeros({nb, m, n});
  const double* ap = a.val().ptr();
  const double* bp = b.val().ptr();
  double* yp = y.ptr();
  const std::int64_t astride = as[1] * as[2], bstride = bs[1] * bs[2], ystride = m * n;
  for (std::int64_t i = 0; i < nb; ++i)
    dgemm(trans_a, trans_b, m, n, ka, scale, ap + i * astride, as[2],
          bp + i * bstride, bs[2], 0.0, yp + i * ystride, n);
  return a.tape()->emit(
      std::move(y), {a, b},
      [a, b, trans_a, trans_b, scale, nb, m, n, ka, astride, bstride,
       ystride](Tape& tp, int self) {
        const double* dy = tp.grad(self).ptr();
        const auto& as = tp.value(a.id()).shape;
        const auto& bs = tp.value(b.id()).shape;
        const double* ap = tp.value(a.id()).ptr();
        const double* bp = tp.value(b.id()).ptr();
        if (tp.requires_grad(a.id())) {
          double* da = tp.grad(a.id()).ptr();
          for (std::int64_t i = 0; i < nb; ++i) {
            const double* dyr = dy + i * ystride;
            const double* br = bp + i * bstride;
            double* dar = da + i * astride;
            if (!trans_a) {
              // dA = dY . op(B)^T
              dgemm(false, !trans_b, m, ka, n, scale, dyr, n, br, bs[2], 1.0, dar, as[2]);
            } else {
              // A used as A^T: dA = op(B) . dY^T -> dA[p,i] over [ka, m]
              dgemm(trans_b, true, ka, m, n, scale, br, bs[2], dyr, n, 1.0, dar, as[2]);
            }
          }
        }
        if (tp.requires_grad(b.id())) {
          double* db = tp.grad(b.id()).ptr();
          for (std::int64_t i = 0; i < nb; ++i) {
            const double* dyr = dy + i * ystride;
            const double* ar = ap + i * astride;
            double* dbr = db + i * bstride;
            if (!trans_b) {
              // dB = op(A)^T . dY
              dgemm(!trans_a, false, ka, n, m, scale, ar, as[2], dyr, n, 1.0, dbr, bs[2]);
            } else {
              // B used as B^T: dB = dY^T . op(A) -> [n, ka]
              dgemm(true, trans_a, n, ka, m, scale, dyr, n, ar, as[2], 1.0, dbr, bs[2]);
            }
          }
        }
      });
}

Var channel_fusion(Var x, Var w) {
  check_rank(x, 4, "channel_fusion input");
  check_rank(w, 3, "channel_fusion weight");
  const auto& xs = x.val().shape;
  const auto& ws = w.val().shape;
  const std::int64_t batch = xs[0], bands = xs[1], ch = xs[2], time = xs[3];
  require_data(ws[0] == bands && ws[1] == ch && ws[2] == ch,
               "channel_fusion: weight " + shape_str(ws) + " does not match input " +
                   shape_str(xs));
  Tensor y = Tensor::zeros({batch, bands * ch, time});
  const double* xp = x.val().ptr();
  const double* wp = w.val().ptr();
  double* yp = y.ptr();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t b = 0; b < bands; ++b)
      dgemm(false, false, ch, time, ch, 1.0, wp + b * ch * ch, ch,
            xp + (n * bands + b) * ch * time, time, 0.0,
            yp + (n * bands * ch + b * ch) * time, time);
  return x.tape()->emit(
      std::move(y), {x, w}, [x, w, batch, bands, ch, time](Tape& tp, int self) {
        const double* dy = tp.grad(self).ptr();
        const double* xp = tp.value(x.id()).ptr();
        const double* wp = tp.value(w.id()).ptr();
        if (tp.requires_grad(x.id())) {
          double* dx = tp.grad(x.id()).ptr();
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t b = 0; b < bands; ++b)
              dgemm(true, false, ch, time, ch, 1.0, wp + b * ch * ch, ch,
                    dy + (n * bands * ch + b * ch) * time, time, 1.0,
                    dx + (n * bands + b) * ch * time, time);
        }
        if (tp.requires_grad(w.id())) {
          double* dw = tp.grad(w.id()).ptr();
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t b = 0; b < bands; ++b)
              dgemm(false, true, ch, ch, time, 1.0,
                    dy + (n * bands * ch + b * ch) * time, time,
                    xp + (n * bands + b) * ch * time, time, 1.0, dw + b * ch * ch, ch);
        }
      });
}

Var multi_head_attention(Var x, Var wq, Var wk, Var wv, Var wo, int n_heads,
                         std::vector<Var>* attn_out) {
  check_rank(x, 3, "attention input");
  const std::int64_t d = x.val().shape[2];
  require_usage(d % n_heads == 0, "d_model " + std::to_string(d) +
                                      " not divisible by n_heads " + std::to_string(n_heads));
  const std::int64_t dk = d / n_heads;
  Var q = split_heads(linear(x, wq, Var()), n_heads);
  Var k = split_heads(linear(x, wk, Var()), n_heads);
  Var v = split_heads(linear(x, wv, Var()), n_heads);
  Var scores = bmm(q, k, false, true, 1.0 / std::sqrt(static_cast<double>(dk)));
  Var attw = softmax(scores);
  if (attn_out) attn_out->push_back(attw);
  Var ctx = merge_heads(bmm(attw, v), n_heads);
  return linear(ctx, wo, Var());
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  check_rank(logits, 2, "cross_entropy logits");
  const std::int64_t batch = logits.val().shape[0];
  const std::int64_t nc = logits.val().shape[1];
  require_data(static_cast<std::int64_t>(labels.size()) == batch,
               "cross_entropy: label count mismatch");
  for (int l : labels)
    require_data(l >= 0 && l < nc, "cross_entropy: label out of range");

  Tensor probs = Tensor::zeros(logits.val().shape);
  const double* lp = logits.val().ptr();
  double* pp = probs.ptr();
  double loss = 0;
  for (std::int64_t r = 0; r < batch; ++r) {
    const double* xr = lp + r * nc;
    double m = xr[0];
    for (std::int64_t j = 1; j < nc; ++j) m = std::max(m, xr[j]);
    double s = 0;
    for (std::int64_t j = 0; j < nc; ++j) {
      pp[r * nc + j] = std::exp(xr[j] - m);
      s += pp[r * nc + j];
    }
    const double inv = 1.0 / s;
    for (std::int64_t j = 0; j < nc; ++j) pp[r * nc + j] *= inv;
    loss += m + std::log(s) - xr[labels[static_cast<std::size_t>(r)]];
  }
  loss /= static_cast<double>(batch);
  return logits.tape()->emit(
      Tensor({1}, {loss}), {logits},
      [logits, labels, probs = std::move(probs), batch, nc](Tape& tp, int self) {
        if (!tp.requires_grad(logits.id())) return;
        const double g = tp.grad(self).data[0] / static_cast<double>(batch);
        const double* pp = probs.ptr();
        double* dl = tp.grad(logits.id()).ptr();
        for (std::int64_t r = 0; r < batch; ++r) {
          for (std::int64_t j = 0; j < nc; ++j) dl[r * nc + j] += g * pp[r * nc + j];
          dl[r * nc + labels[static_cast<std::size_t>(r)]] -= g;
        }
      });
}

Var sum_squares(Var x) {
  const double* xp = x.val().ptr();
  const std::int64_t n = x.val().size();
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += xp[i] * xp[i];
  return x.tape()->emit(Tensor({1}, {s}), {x}, [x, n](Tape& tp, int self) {
    if (!tp.requires_grad(x.id())) return;
    const double g = 2.0 * tp.grad(self).data[0];
    const double* xp = tp.value(x.id()).ptr();
    double* dx = tp.grad(x.id()).ptr();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += g * xp[i];
  });
}

Var vsum(Var x) {
  const double* xp = x.val().ptr();
  const std::int64_t n = x.val().size();
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += xp[i];
  return x.tape()->emit(Tensor({1}, {s}), {x}, [x, n](Tape& tp, int self) {
    const double g = tp.grad(self).data[0];
    if (!tp.requires_grad(x.id())) return;
    double* dx = tp.grad(x.id()).ptr();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += g;
  });
}

Var dot_const(Var x, Tensor r) {
  require_data(x.val().shape == r.shape, "dot_const: shape mismatch");
  const double* xp = x.val().ptr();
  const double* rp = r.ptr();
  const std::int64_t n = x.val().size();
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += xp[i] * rp[i];
  return x.tape()->emit(Tensor({1}, {s}), {x},
                        [x, r = std::move(r), n](Tape& tp, int self) {
                          if (!tp.requires_grad(x.id())) return;
                          const double g = tp.grad(self).data[0];
                          const double* rp = r.ptr();
                          double* dx = tp.grad(x.id()).ptr();
                          for (std::int64_t i = 0; i < n; ++i) dx[i] += g * rp[i];
                        });
}

Var cross_entropy_loss(Var logits, const std::vector<int>& labels,
                       const std::vector<Var>& l2_params, double l2_coeff) {
  Var loss = cross_entropy(logits, labels);
  if (l2_coeff == 0.0 || l2_params.empty()) return loss;
  Var penalty;
  for (const Var& w : l2_params) {
    Var sq = sum_squares(w);
    penalty = penalty.valid() ? add(penalty, sq) : sq;
  }
  return add(loss, scalar_mul(penalty, l2_coeff));
}

}  // namespace ssvep::nn
