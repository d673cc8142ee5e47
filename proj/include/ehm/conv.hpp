#pragma once

// Image-path autodiff ops: conv2d (im2col + GEMM), nearest upsampling and
// per-channel batch norm over NCHW tensors. The im2col buffer is rebuilt in
// the backward pass instead of stored, trading a little compute for memory.

#include "ehm/tensor.hpp"

namespace ehm {

namespace detail {

// col layout: [C*kh*kw, OH*OW], row-major
template <class S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int OH, int OW, S* col) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        S* row = col + (size_t(c) * kh * kw + size_t(ki) * kw + kj) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) {
            std::fill_n(row + size_t(oh) * OW, OW, S(0));
            continue;
          }
          const S* xr = x + (size_t(c) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride + kj - pad;
            row[size_t(oh) * OW + ow] = (iw >= 0 && iw < W) ? xr[iw] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int OH, int OW, S* x) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const S* row = col + (size_t(c) * kh * kw + size_t(ki) * kw + kj) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          S* xr = x + (size_t(c) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < W) xr[iw] += row[size_t(oh) * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [N,C,H,W], w: [F,C,kh,kw], b: [F] -> [N,F,OH,OW]
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 int stride = 1, int pad = 1) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv2d: rank mismatch");
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch");
  require(b.ndim() == 1 && b.dim(0) == w.dim(0), "conv2d: bias mismatch");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  require(OH > 0 && OW > 0, "conv2d: empty output");
  const int K = C * kh * kw;
  auto n = detail::make_node<S>({N, F, OH, OW}, {x, w, b});
  std::vector<S> col(size_t(K) * OH * OW);
  detail::CMapMat<S> Wm(w.data(), F, K);
  for (int i = 0; i < N; ++i) {
    detail::im2col(x.data() + size_t(i) * C * H * W, C, H, W, kh, kw, stride, pad,
                   OH, OW, col.data());
    detail::CMapMat<S> Cm(col.data(), K, OH * OW);
    detail::MapMat<S> Om(n->val.data() + size_t(i) * F * OH * OW, F, OH * OW);
    Om.noalias() = Wm * Cm;
    for (int f = 0; f < F; ++f)
      Om.row(f).array() += b.val()[size_t(f)];
  }
  if (n->requires_grad) {
    auto xn = x.node(), wn = w.node(), bn = b.node();
    auto out = n.get();
    n->backprop = [xn, wn, bn, out, N, C, H, W, F, kh, kw, stride, pad, OH, OW, K]() {
      xn->ensure_grad();
      wn->ensure_grad();
      bn->ensure_grad();
      std::vector<S> col(size_t(K) * OH * OW), gcol(size_t(K) * OH * OW);
      detail::CMapMat<S> Wm(wn->val.data(), F, K);
      detail::MapMat<S> GW(wn->grad.data(), F, K);
      for (int i = 0; i < N; ++i) {
        detail::CMapMat<S> GO(out->grad.data() + size_t(i) * F * OH * OW, F, OH * OW);
        detail::im2col(xn->val.data() + size_t(i) * C * H * W, C, H, W, kh, kw,
                       stride, pad, OH, OW, col.data());
        detail::CMapMat<S> Cm(col.data(), K, OH * OW);
        GW.noalias() += GO * Cm.transpose();
        for (int f = 0; f < F; ++f) bn->grad[size_t(f)] += GO.row(f).sum();
        detail::MapMat<S> GC(gcol.data(), K, OH * OW);
        GC.noalias() = Wm.transpose() * GO;
        detail::col2im_add(gcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                           xn->grad.data() + size_t(i) * C * H * W);
      }
    };
  }
  return Tensor<S>(n);
}

// x: [N,C,H,W] -> [N,C,2H,2W]
template <class S>
Tensor<S> upsample_nearest2(const Tensor<S>& x) {
  require(x.ndim() == 4, "upsample_nearest2: rank != 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto n = detail::make_node<S>({N, C, 2 * H, 2 * W}, {x});
  for (int nc = 0; nc < N * C; ++nc) {
    const S* src = x.data() + size_t(nc) * H * W;
    S* dst = n->val.data() + size_t(nc) * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const S v = src[size_t(i) * W + j];
        S* d = dst + size_t(2 * i) * 2 * W + 2 * j;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out, N, C, H, W]() {
      xn->ensure_grad();
      for (int nc = 0; nc < N * C; ++nc) {
        S* gsrc = xn->grad.data() + size_t(nc) * H * W;
        const S* gdst = out->grad.data() + size_t(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const S* g = gdst + size_t(2 * i) * 2 * W + 2 * j;
            gsrc[size_t(i) * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
          }
      }
    };
  }
  return Tensor<S>(n);
}

// per-channel batch norm over N,H,W
template <class S>
Tensor<S> batch_norm_chw(const Tensor<S>& x, const Tensor<S>& gamma,
                         const Tensor<S>& beta, RunningStats<S>& rs, bool training,
                         S momentum = S(0.1), S eps = S(1e-5)) {
  require(x.ndim() == 4, "batch_norm_chw: rank != 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(int(rs.mean.size()) == C, "batch_norm_chw: stats size mismatch");
  const int64_t m = int64_t(N) * H * W;
  auto n = detail::make_node<S>(x.shape(), {x, gamma, beta});
  std::vector<S> mu(size_t(C)), inv_std(size_t(C));
  const size_t plane = size_t(H) * W;
  auto chan = [&](const std::vector<S>& buf, int i, int c) {
    return buf.data() + (size_t(i) * C + size_t(c)) * plane;
  };
  if (training) {
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      for (int i = 0; i < N; ++i) {
        const S* p = chan(x.val(), i, c);
        for (size_t k = 0; k < plane; ++k) acc += p[k];
      }
      const S mean = acc / S(m);
      S v = S(0);
      for (int i = 0; i < N; ++i) {
        const S* p = chan(x.val(), i, c);
        for (size_t k = 0; k < plane; ++k) v += (p[k] - mean) * (p[k] - mean);
      }
      const S biased = v / S(m);
      const S unbiased = m > 1 ? v / S(m - 1) : biased;
      mu[size_t(c)] = mean;
      inv_std[size_t(c)] = S(1) / std::sqrt(biased + eps);
      rs.mean[size_t(c)] = (S(1) - momentum) * rs.mean[size_t(c)] + momentum * mean;
      rs.var[size_t(c)] = (S(1) - momentum) * rs.var[size_t(c)] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[size_t(c)] = rs.mean[size_t(c)];
      inv_std[size_t(c)] = S(1) / std::sqrt(rs.var[size_t(c)] + eps);
    }
  }
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c) {
      const S* p = chan(x.val(), i, c);
      S* y = n->val.data() + (size_t(i) * C + size_t(c)) * plane;
      const S g = gamma.val()[size_t(c)], b = beta.val()[size_t(c)];
      for (size_t k = 0; k < plane; ++k)
        y[k] = g * (p[k] - mu[size_t(c)]) * inv_std[size_t(c)] + b;
    }
  if (n->requires_grad) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto out = n.get();
    n->backprop = [xn, gn, bn, out, N, C, plane, m, mu, inv_std, training]() {
      xn->ensure_grad();
      gn->ensure_grad();
      bn->ensure_grad();
      for (int c = 0; c < C; ++c) {
        const S mean = mu[size_t(c)], is = inv_std[size_t(c)];
        const S g = gn->val[size_t(c)];
        S sum_gy = S(0), sum_gy_xh = S(0);
        for (int i = 0; i < N; ++i) {
          const S* xv = xn->val.data() + (size_t(i) * C + size_t(c)) * plane;
          const S* gy = out->grad.data() + (size_t(i) * C + size_t(c)) * plane;
          for (size_t k = 0; k < plane; ++k) {
            sum_gy += gy[k];
            sum_gy_xh += gy[k] * (xv[k] - mean) * is;
          }
        }
        gn->grad[size_t(c)] += sum_gy_xh;
        bn->grad[size_t(c)] += sum_gy;
        for (int i = 0; i < N; ++i) {
          const S* xv = xn->val.data() + (size_t(i) * C + size_t(c)) * plane;
          const S* gy = out->grad.data() + (size_t(i) * C + size_t(c)) * plane;
          S* gx = xn->grad.data() + (size_t(i) * C + size_t(c)) * plane;
          for (size_t k = 0; k < plane; ++k) {
            if (training) {
              const S xh = (xv[k] - mean) * is;
              gx[k] += g * is * (gy[k] - (sum_gy + xh * sum_gy_xh) / S(m));
            } else {
              gx[k] += g * is * gy[k];
            }
          }
        }
      }
    };
  }
  return Tensor<S>(n);
}

}  // namespace ehm
