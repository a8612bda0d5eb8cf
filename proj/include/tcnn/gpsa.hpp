#pragma once

// Gated Positional Self-Attention. Each head carries a locality strength
// alpha (learned through a rectified raw parameter), a center of attention
// Delta (2 reals, pixel units) and a gating scalar lambda. The attention map
// is a convex combination of a content softmax and a positional softmax:
//   A_h = (1 - sigmoid(lambda_h)) * softmax(Q K^T) + sigmoid(lambda_h) * P_h
// with positional logits -alpha_h * (|delta|^2 - 2 Delta . delta) that depend
// only on the relative offset delta between key and query pixel.

#include <array>
#include <cmath>
#ifdef __AVX2__
#include <immintrin.h>
#endif
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tcnn/tensor.hpp"

namespace tcnn {

// alpha(alpha_raw) = (1/beta) * log(1 + exp(beta * alpha_raw)); strictly
// positive and increasing in alpha_raw.
template <typename T>
T alpha_of(T alpha_raw, T beta = T(5)) {
    check(beta > T(0), "alpha_of: beta must be positive");
    T z = beta * alpha_raw;
    if (z > T(30)) return alpha_raw;
    if (z < T(-30)) return std::exp(z) / beta;
    return std::log1p(std::exp(z)) / beta;
}

// Inverse of alpha_of: the raw value that rectifies to a target alpha > 0.
template <typename T>
T alpha_raw_for(T alpha, T beta = T(5)) {
    check(alpha > T(0), "alpha_raw_for: alpha must be positive");
    T z = beta * alpha;
    if (z > T(30)) return alpha + std::log1p(-std::exp(-z)) / beta;
    return std::log(std::expm1(z)) / beta;
}

// Fixed relative positional encodings for one grid resolution. Entry (i,j)
// depends only on delta = pos(j) - pos(i) in (row, col) pixel units.
template <typename T>
struct RelEncodings {
    std::size_t height = 0, width = 0;
    Tensor<T> dist2;  // [L,L]  |delta|^2
    Tensor<T> drow;   // [L,L]  delta_1
    Tensor<T> dcol;   // [L,L]  delta_2

    static RelEncodings make(std::size_t H, std::size_t W) {
        check(H >= 1 && W >= 1, "RelEncodings: resolution must be >= 1");
        std::size_t L = H * W;
        std::vector<T> d2(L * L), d1(L * L), dc(L * L);
        for (std::size_t i = 0; i < L; ++i) {
            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(i / W);
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(i % W);
            for (std::size_t j = 0; j < L; ++j) {
                std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(j / W) - iy;
                std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(j % W) - ix;
                d1[i * L + j] = static_cast<T>(dy);
                dc[i * L + j] = static_cast<T>(dx);
                d2[i * L + j] = static_cast<T>(dy * dy + dx * dx);
            }
        }
        RelEncodings enc;
        enc.height = H;
        enc.width = W;
        enc.dist2 = Tensor<T>({L, L}, std::move(d2));
        enc.drow = Tensor<T>({L, L}, std::move(d1));
        enc.dcol = Tensor<T>({L, L}, std::move(dc));
        return enc;
    }
};

// Encodings are fixed functions of the offset, so one table per resolution
// can be reused across forwards and across resolution changes.
template <typename T>
class EncodingCache {
  public:
    const RelEncodings<T>& get(std::size_t H, std::size_t W) {
        auto key = std::make_pair(H, W);
        auto it = table_.find(key);
        if (it == table_.end())
            it = table_.emplace(key, RelEncodings<T>::make(H, W)).first;
        return it->second;
    }

  private:
    std::map<std::pair<std::size_t, std::size_t>, RelEncodings<T>> table_;
};

// Q/K head widths: balanced partition of d_in so the total query (and key)
// parameter count is exactly d_in^2; every head gets at least width 1.
inline std::vector<std::size_t> head_dims(std::size_t d_in,
                                          std::size_t n_heads) {
    std::vector<std::size_t> dims(n_heads, 1);
    if (d_in >= n_heads) {
        std::size_t base = d_in / n_heads, extra = d_in % n_heads;
        for (std::size_t h = 0; h < n_heads; ++h)
            dims[h] = base + (h < extra ? 1 : 0);
    }
    return dims;
}

template <typename T>
struct GpsaLayer {
    std::size_t n_heads = 0, d_in = 0, d_out = 0;
    std::vector<std::size_t> d_head;     // per-head Q/K width
    std::vector<Tensor<T>> w_qry;        // per head [d_in, d_head]
    std::vector<Tensor<T>> w_key;        // per head [d_in, d_head]
    Tensor<T> w_val;                     // [d_in, d_in], shared across heads
    std::vector<Tensor<T>> w_out;        // per head [d_in, d_out]
    std::vector<Tensor<T>> alpha_raw;    // per head, rank 0
    std::vector<Tensor<T>> center;       // per head, [2] = (Delta_1, Delta_2)
    std::vector<Tensor<T>> gate;         // per head, rank 0 (lambda)
    Tensor<T> bias;                      // [d_out], optional
    T beta = T(5);
    bool content_scale = true;

    mutable std::shared_ptr<EncodingCache<T>> cache =
        std::make_shared<EncodingCache<T>>();

    T alpha(std::size_t h) const { return alpha_of(alpha_raw[h].item(), beta); }
    T gating(std::size_t h) const {
        T l = gate[h].item();
        return T(1) / (T(1) + std::exp(-l));
    }
};

// Per-head attention span 1/alpha_h (receptive-field size proxy).
template <typename T>
std::vector<T> attention_span(const GpsaLayer<T>& layer) {
    std::vector<T> spans(layer.n_heads);
    for (std::size_t h = 0; h < layer.n_heads; ++h)
        spans[h] = T(1) / layer.alpha(h);
    return spans;
}

// Per-head positional gating sigmoid(lambda_h).
template <typename T>
std::vector<T> gating_values(const GpsaLayer<T>& layer) {
    std::vector<T> g(layer.n_heads);
    for (std::size_t h = 0; h < layer.n_heads; ++h) g[h] = layer.gating(h);
    return g;
}

namespace detail {

// Differentiable positional logits for head h at the cached resolution:
// -alpha * dist2 + 2*alpha*Delta_1 * drow + 2*alpha*Delta_2 * dcol.
template <typename T>
Tensor<T> head_positional_logits(const GpsaLayer<T>& layer, std::size_t h,
                                 const RelEncodings<T>& enc) {
    Tensor<T> a = softplus_beta(layer.alpha_raw[h], layer.beta);
    Tensor<T> d1 = pick(layer.center[h], 0);
    Tensor<T> d2 = pick(layer.center[h], 1);
    Tensor<T> logits = mul_scalar(enc.dist2, scale(a, T(-1)));
    logits = add(logits, mul_scalar(enc.drow, scale(mul(a, d1), T(2))));
    logits = add(logits, mul_scalar(enc.dcol, scale(mul(a, d2), T(2))));
    return logits;
}

// Row-wise softmax of `in` scaled by s, written to `out`.
template <typename T>
void softmax_rows(const T* in, T* out, std::size_t rows, std::size_t n, T s) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* p = in + r * n;
        T* q = out + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, p[j] * s);
        check(std::isfinite(mx), "softmax: non-finite input");
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            T ev = exp_fast(p[j] * s - mx);
            q[j] = ev;
            sum += ev;
        }
        T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) q[j] *= inv;
    }
}

#ifdef __AVX2__
// 8-lane version of exp_fast (same Cephes-style polynomial and argument
// reduction, so scalar and vector paths agree to the last few ULPs).
inline __m256 exp8_fast(__m256 x) {
    x = _mm256_min_ps(_mm256_set1_ps(88.0f),
                      _mm256_max_ps(_mm256_set1_ps(-88.0f), x));
    __m256 z = _mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f));
    __m256 nf = _mm256_floor_ps(_mm256_add_ps(z, _mm256_set1_ps(0.5f)));
    __m256 r = _mm256_fnmadd_ps(nf, _mm256_set1_ps(0.693359375f), x);
    r = _mm256_fnmadd_ps(nf, _mm256_set1_ps(-2.12194440e-4f), r);
    __m256 pl = _mm256_set1_ps(1.9875691500e-4f);
    pl = _mm256_fmadd_ps(pl, r, _mm256_set1_ps(1.3981999507e-3f));
    pl = _mm256_fmadd_ps(pl, r, _mm256_set1_ps(8.3334519073e-3f));
    pl = _mm256_fmadd_ps(pl, r, _mm256_set1_ps(4.1665795894e-2f));
    pl = _mm256_fmadd_ps(pl, r, _mm256_set1_ps(1.6666665459e-1f));
    pl = _mm256_fmadd_ps(pl, r, _mm256_set1_ps(5.0000001201e-1f));
    pl = _mm256_add_ps(_mm256_fmadd_ps(_mm256_mul_ps(pl, r), r, r),
                       _mm256_set1_ps(1.0f));
    __m256i ni = _mm256_cvtps_epi32(nf);
    __m256i pow2 = _mm256_slli_epi32(
        _mm256_add_epi32(ni, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(pl, _mm256_castsi256_ps(pow2));
}

inline void softmax_rows(const float* in, float* out, std::size_t rows,
                         std::size_t n, float s) {
    for (std::size_t r = 0; r < rows; ++r) {
        const float* p = in + r * n;
        float* q = out + r * n;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, p[j] * s);
        check(std::isfinite(mx), "softmax: non-finite input");
        __m256 vs = _mm256_set1_ps(s);
        __m256 vmx = _mm256_set1_ps(mx);
        __m256 vsum = _mm256_setzero_ps();
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            __m256 ev = exp8_fast(
                _mm256_fmsub_ps(_mm256_loadu_ps(p + j), vs, vmx));
            _mm256_storeu_ps(q + j, ev);
            vsum = _mm256_add_ps(vsum, ev);
        }
        alignas(32) float lanes[8];
        _mm256_store_ps(lanes, vsum);
        float sum = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
                    ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
        for (; j < n; ++j) {
            float ev = exp_fast(p[j] * s - mx);
            q[j] = ev;
            sum += ev;
        }
        float inv = 1.0f / sum;
        for (std::size_t j2 = 0; j2 < n; ++j2) q[j2] *= inv;
    }
}
#endif

}  // namespace detail

// Fused multi-head gated attention, mixing and output projection:
//   content_h = softmax(scale_h * q_h k_h^T)            [B, L, L]
//   pos_h     = softmax(pos_logits_h)                   [L, L], batch-shared
//   attn_h    = (1 - sigmoid(gate_h)) * content_h + sigmoid(gate_h) * pos_h
//   out       = sum_h (attn_h @ v) @ w_out_h            [B, L, Dout]
// One tape node for the whole head loop: the [B,L,L] intermediates live in a
// single scratch arena instead of a dozen tracked tensors per head, which is
// what keeps training-time allocation and memset traffic sane.
template <typename T>
Tensor<T> gated_heads_apply(const std::vector<Tensor<T>>& q,        // [B*L, Dh]
                            const std::vector<Tensor<T>>& k,        // [B*L, Dh]
                            const std::vector<Tensor<T>>& pos_logits,  // [L, L]
                            const std::vector<Tensor<T>>& gate,     // scalars
                            const std::vector<Tensor<T>>& w_out,    // [Dv, Dout]
                            const Tensor<T>& v,                     // [B, L, Dv]
                            const std::vector<T>& scale, std::size_t B,
                            std::size_t L) {
    const std::size_t n_heads = q.size();
    check(n_heads > 0 && k.size() == n_heads && pos_logits.size() == n_heads &&
              gate.size() == n_heads && w_out.size() == n_heads &&
              scale.size() == n_heads,
          "gated_heads_apply: per-head argument lists disagree");
    check(v.rank() == 3 && v.dim(0) == B && v.dim(1) == L,
          "gated_heads_apply: values " + shape_str(v.shape()) +
              " do not match B=" + std::to_string(B) +
              " L=" + std::to_string(L));
    const std::size_t Dv = v.dim(2);
    const std::size_t Dout = w_out[0].dim(1);
    std::vector<T> gvals(n_heads);
    std::vector<std::size_t> dh(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        check(q[h].rank() == 2 && q[h].dim(0) == B * L &&
                  k[h].shape() == q[h].shape(),
              "gated_heads_apply: head " + std::to_string(h) +
                  " q/k shape mismatch");
        check(pos_logits[h].rank() == 2 && pos_logits[h].dim(0) == L &&
                  pos_logits[h].dim(1) == L,
              "gated_heads_apply: positional logits must be LxL");
        check(gate[h].numel() == 1 && w_out[h].rank() == 2 &&
                  w_out[h].dim(0) == Dv && w_out[h].dim(1) == Dout,
              "gated_heads_apply: head " + std::to_string(h) +
                  " gate/w_out shapes invalid");
        dh[h] = q[h].dim(1);
        T lam = gate[h].item();
        gvals[h] = lam >= 0 ? T(1) / (T(1) + std::exp(-lam))
                            : std::exp(lam) / (T(1) + std::exp(lam));
    }

    bool need_grad = grad_mode();
    if (need_grad) {
        need_grad = v.node()->requires_grad;
        for (std::size_t h = 0; h < n_heads && !need_grad; ++h)
            need_grad = q[h].node()->requires_grad ||
                        k[h].node()->requires_grad ||
                        pos_logits[h].node()->requires_grad ||
                        gate[h].node()->requires_grad ||
                        w_out[h].node()->requires_grad;
    }

    // Backward stash: content_h, attn_h [B,L,L], pos_h [L,L], av_h [B,L,Dv].
    const std::size_t per_head = 2 * B * L * L + L * L + B * L * Dv;
    std::shared_ptr<T[]> stash;
    std::unique_ptr<T[]> scratch;  // eval mode: reused per head
    if (need_grad)
        stash = std::shared_ptr<T[]>(new T[n_heads * per_head]);
    else
        scratch.reset(new T[per_head]);
    std::vector<T> out(B * L * Dout, T(0));
    for (std::size_t h = 0; h < n_heads; ++h) {
        T* content = (need_grad ? stash.get() + h * per_head : scratch.get());
        T* attn = content + B * L * L;
        T* pos = attn + B * L * L;
        T* av = pos + L * L;
        T* scores = attn;  // scores are consumed by the softmax immediately
        for (std::size_t b = 0; b < B; ++b)
            gemm(false, true, L, L, dh[h], T(1),
                 q[h].data().data() + b * L * dh[h], dh[h],
                 k[h].data().data() + b * L * dh[h], dh[h], T(0),
                 scores + b * L * L, L);
        detail::softmax_rows(scores, content, B * L, L, scale[h]);
        detail::softmax_rows(pos_logits[h].data().data(), pos, L, L, T(1));
        const T g = gvals[h];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < L * L; ++j)
                attn[b * L * L + j] =
                    (T(1) - g) * content[b * L * L + j] + g * pos[j];
        for (std::size_t b = 0; b < B; ++b)
            gemm(false, false, L, Dv, L, T(1), attn + b * L * L, L,
                 v.data().data() + b * L * Dv, Dv, T(0), av + b * L * Dv, Dv);
        gemm(false, false, B * L, Dout, Dv, T(1), av, Dv,
             w_out[h].data().data(), Dout, T(1), out.data(), Dout);
    }

    std::vector<std::shared_ptr<Node<T>>> parents;
    for (std::size_t h = 0; h < n_heads; ++h) {
        parents.push_back(q[h].node());
        parents.push_back(k[h].node());
        parents.push_back(pos_logits[h].node());
        parents.push_back(gate[h].node());
        parents.push_back(w_out[h].node());
    }
    auto vn = v.node();
    parents.push_back(vn);
    auto scales = scale;
    return detail::make_result<T>(
        Shape{B, L, Dout}, std::move(out), parents,
        [parents, vn, stash, gvals, scales, dh, n_heads, B, L, Dv, Dout,
         per_head](Node<T>& n) {
            std::unique_ptr<T[]> grad_av(new T[B * L * Dv]);
            std::unique_ptr<T[]> gattn(new T[L * L]);
            std::unique_ptr<T[]> gscores(new T[L * L]);
            std::unique_ptr<T[]> gpos(new T[L * L]);
            const bool need_v = vn->requires_grad;
            if (need_v) vn->ensure_grad();
            for (std::size_t h = 0; h < n_heads; ++h) {
                Node<T>& qn = *parents[5 * h];
                Node<T>& kn = *parents[5 * h + 1];
                Node<T>& pn = *parents[5 * h + 2];
                Node<T>& gn = *parents[5 * h + 3];
                Node<T>& wn = *parents[5 * h + 4];
                const T* content = stash.get() + h * per_head;
                const T* attn = content + B * L * L;
                const T* pos = attn + B * L * L;
                const T* av = pos + L * L;
                const T g = gvals[h];
                if (wn.requires_grad) {
                    wn.ensure_grad();
                    gemm(true, false, Dv, Dout, B * L, T(1), av, Dv,
                         n.grad.data(), Dout, T(1), wn.grad.data(), Dout);
                }
                const bool need_qk = qn.requires_grad || kn.requires_grad;
                const bool need_p = pn.requires_grad;
                const bool need_g = gn.requires_grad;
                if (!(need_qk || need_p || need_g || need_v)) continue;
                if (qn.requires_grad) qn.ensure_grad();
                if (kn.requires_grad) kn.ensure_grad();
                if (need_p) pn.ensure_grad();
                if (need_g) gn.ensure_grad();
                gemm(false, true, B * L, Dv, Dout, T(1), n.grad.data(), Dout,
                     wn.value.data(), Dout, T(0), grad_av.get(), Dv);
                std::fill(gpos.get(), gpos.get() + L * L, T(0));
                double gsum = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* ga = grad_av.get() + b * L * Dv;
                    const T* vb = vn->value.data() + b * L * Dv;
                    const T* cb = content + b * L * L;
                    gemm(false, true, L, L, Dv, T(1), ga, Dv, vb, Dv, T(0),
                         gattn.get(), L);
                    if (need_v)
                        gemm(true, false, L, Dv, L, T(1), attn + b * L * L, L,
                             ga, Dv, T(1), vn->grad.data() + b * L * Dv, Dv);
                    if (need_p)
                        for (std::size_t j = 0; j < L * L; ++j)
                            gpos[j] += gattn[j];
                    if (need_g)
                        for (std::size_t j = 0; j < L * L; ++j)
                            gsum += static_cast<double>(gattn[j]) *
                                    static_cast<double>(pos[j] - cb[j]);
                    if (need_qk) {
                        // softmax backward with the (1-g) mixing weight and
                        // the pre-softmax scale folded in
                        const T w = scales[h] * (T(1) - g);
                        for (std::size_t r = 0; r < L; ++r) {
                            const T* gr = gattn.get() + r * L;
                            const T* cr = cb + r * L;
                            T* sg = gscores.get() + r * L;
                            T dot = 0;
                            for (std::size_t c = 0; c < L; ++c)
                                dot += gr[c] * cr[c];
                            for (std::size_t c = 0; c < L; ++c)
                                sg[c] = w * cr[c] * (gr[c] - dot);
                        }
                        if (qn.requires_grad)
                            gemm(false, false, L, dh[h], L, T(1),
                                 gscores.get(), L,
                                 kn.value.data() + b * L * dh[h], dh[h], T(1),
                                 qn.grad.data() + b * L * dh[h], dh[h]);
                        if (kn.requires_grad)
                            gemm(true, false, L, dh[h], L, T(1), gscores.get(),
                                 L, qn.value.data() + b * L * dh[h], dh[h],
                                 T(1), kn.grad.data() + b * L * dh[h], dh[h]);
                    }
                }
                if (need_p) {
                    for (std::size_t r = 0; r < L; ++r) {
                        const T* gr = gpos.get() + r * L;
                        const T* pr = pos + r * L;
                        T* pg = pn.grad.data() + r * L;
                        T dot = 0;
                        for (std::size_t c = 0; c < L; ++c)
                            dot += gr[c] * pr[c];
                        for (std::size_t c = 0; c < L; ++c)
                            pg[c] += g * pr[c] * (gr[c] - dot);
                    }
                }
                if (need_g) gn.grad[0] += static_cast<T>(gsum) * g * (T(1) - g);
            }
        });
}

// Materialized per-head positional logit matrices at one resolution.
template <typename T>
struct PositionalLogits {
    std::size_t height = 0, width = 0;
    std::vector<Tensor<T>> per_head;  // [L,L] each
};

template <typename T>
PositionalLogits<T> positional_logits(const GpsaLayer<T>& layer, std::size_t H,
                                      std::size_t W) {
    NoGradGuard ng;
    const RelEncodings<T>& enc = layer.cache->get(H, W);
    PositionalLogits<T> pl;
    pl.height = H;
    pl.width = W;
    pl.per_head.reserve(layer.n_heads);
    for (std::size_t h = 0; h < layer.n_heads; ++h)
        pl.per_head.push_back(detail::head_positional_logits(layer, h, enc));
    return pl;
}

// Standalone form used by tests: explicit alphas/centers instead of a layer.
template <typename T>
PositionalLogits<T> positional_logits(std::size_t H, std::size_t W,
                                      const std::vector<T>& alphas,
                                      const std::vector<std::array<T, 2>>& centers) {
    check(alphas.size() == centers.size(),
          "positional_logits: alphas/centers size mismatch");
    RelEncodings<T> enc = RelEncodings<T>::make(H, W);
    std::size_t L = H * W;
    PositionalLogits<T> pl;
    pl.height = H;
    pl.width = W;
    for (std::size_t h = 0; h < alphas.size(); ++h) {
        std::vector<T> v(L * L);
        for (std::size_t i = 0; i < L * L; ++i)
            v[i] = -alphas[h] * (enc.dist2.data()[i] -
                                 T(2) * centers[h][0] * enc.drow.data()[i] -
                                 T(2) * centers[h][1] * enc.dcol.data()[i]);
        pl.per_head.emplace_back(Shape{L, L}, std::move(v));
    }
    return pl;
}

// Gated attention maps for a single sequence X [L, d_in]: one row-stochastic
// [L,L] matrix per head.
template <typename T>
std::vector<Tensor<T>> gated_attention(const Tensor<T>& x,
                                       const GpsaLayer<T>& layer,
                                       const PositionalLogits<T>& pl) {
    check(x.rank() == 2 && x.dim(0) == pl.height * pl.width,
          "gated_attention: input " + shape_str(x.shape()) +
              " does not match resolution " + std::to_string(pl.height) + "x" +
              std::to_string(pl.width));
    check(x.dim(1) == layer.d_in, "gated_attention: feature dim mismatch: " +
                                      shape_str(x.shape()) + " vs d_in " +
                                      std::to_string(layer.d_in));
    std::vector<Tensor<T>> maps;
    maps.reserve(layer.n_heads);
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        Tensor<T> q = matmul(x, layer.w_qry[h]);
        Tensor<T> scores = matmul(q, matmul(x, layer.w_key[h]), false, true);
        if (layer.content_scale)
            scores = scale(scores,
                           T(1) / std::sqrt(static_cast<T>(layer.d_head[h])));
        Tensor<T> content = softmax(scores, -1);
        Tensor<T> pos = softmax(pl.per_head[h], -1);
        Tensor<T> g = sigmoid(layer.gate[h]);
        Tensor<T> one_minus_g = add_const(scale(g, T(-1)), T(1));
        maps.push_back(
            add(mul_scalar(content, one_minus_g), mul_scalar(pos, g)));
    }
    return maps;
}

// Full multi-head forward: X [B, L, d_in] -> [B, L, d_out], differentiable in
// every parameter including alpha_raw, center and gate.
template <typename T>
Tensor<T> gpsa_forward(const Tensor<T>& x, const GpsaLayer<T>& layer,
                       std::size_t H, std::size_t W) {
    check(x.rank() == 3, "gpsa_forward: input must be BxLxD, got " +
                             shape_str(x.shape()));
    check(x.dim(1) == H * W, "gpsa_forward: sequence length " +
                                 std::to_string(x.dim(1)) +
                                 " does not match resolution " +
                                 std::to_string(H) + "x" + std::to_string(W));
    check(x.dim(2) == layer.d_in, "gpsa_forward: feature dim " +
                                      std::to_string(x.dim(2)) +
                                      " does not match d_in " +
                                      std::to_string(layer.d_in));
    std::size_t B = x.dim(0), L = x.dim(1);
    const RelEncodings<T>& enc = layer.cache->get(H, W);
    Tensor<T> x2 = reshape(x, {B * L, layer.d_in});
    Tensor<T> v = reshape(matmul(x2, layer.w_val), {B, L, layer.d_in});
    std::vector<Tensor<T>> q, k, pl;
    std::vector<T> scale;
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        q.push_back(matmul(x2, layer.w_qry[h]));
        k.push_back(matmul(x2, layer.w_key[h]));
        pl.push_back(detail::head_positional_logits(layer, h, enc));
        scale.push_back(layer.content_scale
                            ? T(1) / std::sqrt(static_cast<T>(layer.d_head[h]))
                            : T(1));
    }
    Tensor<T> out =
        gated_heads_apply(q, k, pl, layer.gate, layer.w_out, v, scale, B, L);
    if (layer.bias.defined()) out = add(out, layer.bias);
    return out;
}

// Attention map of every head for one query pixel: rows of A_h reshaped to
// H x W. X is a single sequence [L, d_in].
template <typename T>
std::vector<std::vector<T>> attention_map_at(const GpsaLayer<T>& layer,
                                             const Tensor<T>& x, std::size_t H,
                                             std::size_t W,
                                             std::size_t query_row,
                                             std::size_t query_col) {
    if (query_row >= H || query_col >= W)
        throw std::out_of_range("attention_map_at: query pixel (" +
                                std::to_string(query_row) + "," +
                                std::to_string(query_col) +
                                ") outside grid " + std::to_string(H) + "x" +
                                std::to_string(W));
    NoGradGuard ng;
    PositionalLogits<T> pl = positional_logits(layer, H, W);
    std::vector<Tensor<T>> maps = gated_attention(x, layer, pl);
    std::size_t L = H * W;
    std::size_t q = query_row * W + query_col;
    std::vector<std::vector<T>> rows;
    rows.reserve(layer.n_heads);
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        const T* row = maps[h].data().data() + q * L;
        rows.emplace_back(row, row + L);
    }
    return rows;
}

// 8-bit binary PGM (P5), values min-max normalized per map.
template <typename T>
void write_pgm(const std::string& path, const std::vector<T>& map,
               std::size_t H, std::size_t W) {
    check(map.size() == H * W, "write_pgm: map size does not match dims");
    T lo = map[0], hi = map[0];
    for (T v : map) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    T range = hi - lo;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    f << "P5\n" << W << " " << H << "\n255\n";
    for (T v : map) {
        int byte = range > T(0)
                       ? static_cast<int>(std::lround(
                             static_cast<double>((v - lo) / range) * 255.0))
                       : 0;
        f.put(static_cast<char>(byte));
    }
}

}  // namespace tcnn
