#include "fedchat/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace fedchat::tinylm {
namespace {

constexpr double kLnEps = 1e-5;

// Eight independent partial sums in a fixed order. The result does not depend
// on how the compiler vectorizes the loop.
template <class Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
  Real acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  Real tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <class Real>
void axpy(Real* y, const Real* x, Real alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

std::string layer_prefix(int l) { return "blocks." + std::to_string(l) + "."; }

template <class Real>
struct Linear {
  std::string w_name;
  std::string b_name;
  std::size_t out = 0;
  std::size_t in = 0;
  const Real* base_w = nullptr;
  const Real* b = nullptr;
  std::vector<Real> merged;  // W + scale * B A when adapted

  bool adapted = false;
  std::size_t rank = 0;
  Real scale = 0;
  const Real* lora_a = nullptr;  // [rank, in]
  const Real* lora_b = nullptr;  // [out, rank]

  const Real* weight() const { return adapted ? merged.data() : base_w; }
};

template <class Real>
Linear<Real> make_linear(const BasicParamSet<Real>& params, const ModelConfig& config,
                         const std::string& w_name, const std::string& b_name) {
  Linear<Real> lin;
  lin.w_name = w_name;
  lin.b_name = b_name;
  const auto& wt = params.at(w_name);
  lin.out = wt.shape[0];
  lin.in = wt.shape[1];
  lin.base_w = wt.data.data();
  if (!b_name.empty()) lin.b = params.at(b_name).data.data();

  const std::string a_name = w_name + ".lora_a";
  if (config.lora && params.contains(a_name)) {
    lin.adapted = true;
    lin.rank = static_cast<std::size_t>(config.lora->rank);
    lin.scale = static_cast<Real>(config.lora->scale());
    lin.lora_a = params.at(a_name).data.data();
    lin.lora_b = params.at(w_name + ".lora_b").data.data();
    lin.merged.assign(wt.data.begin(), wt.data.end());
    for (std::size_t o = 0; o < lin.out; ++o) {
      for (std::size_t i = 0; i < lin.in; ++i) {
        Real delta = 0;
        for (std::size_t k = 0; k < lin.rank; ++k) delta += lin.lora_b[o * lin.rank + k] * lin.lora_a[k * lin.in + i];
        lin.merged[o * lin.in + i] += lin.scale * delta;
      }
    }
  }
  return lin;
}

// y[n, :] = x[n, :] W^T + b
template <class Real>
void linear_forward(const Linear<Real>& lin, const Real* x, std::size_t rows, Real* y) {
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = x + n * lin.in;
    Real* yr = y + n * lin.out;
    for (std::size_t o = 0; o < lin.out; ++o) {
      yr[o] = dot(xr, lin.weight() + o * lin.in, lin.in) + (lin.b ? lin.b[o] : Real(0));
    }
  }
}

template <class Real>
void layernorm_forward(const Real* x, std::size_t rows, std::size_t d, const Real* g, const Real* b, Real* y,
                       Real* xhat, Real* rstd) {
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = x + n * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const Real rs = static_cast<Real>(1.0 / std::sqrt(var + kLnEps));
    rstd[n] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const Real h = static_cast<Real>(xr[i] - mean) * rs;
      xhat[n * d + i] = h;
      y[n * d + i] = h * g[i] + b[i];
    }
  }
}

// Accumulates into dx (and dg/db when non-null).
template <class Real>
void layernorm_backward(const Real* dy, const Real* xhat, const Real* rstd, const Real* g, std::size_t rows,
                        std::size_t d, Real* dx, Real* dg, Real* db) {
  std::vector<Real> dxhat(d);
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* dyr = dy + n * d;
    const Real* hr = xhat + n * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_h = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dxhat[i] = dyr[i] * g[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_h += dxhat[i] * hr[i];
      if (dg) dg[i] += dyr[i] * hr[i];
      if (db) db[i] += dyr[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_h /= static_cast<double>(d);
    const Real m1 = static_cast<Real>(mean_dxhat);
    const Real m2 = static_cast<Real>(mean_dxhat_h);
    for (std::size_t i = 0; i < d; ++i) dx[n * d + i] += rstd[n] * (dxhat[i] - m1 - hr[i] * m2);
  }
}

template <class Real>
Real gelu(Real x) {
  const Real c = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  return Real(0.5) * x * (Real(1) + std::tanh(c * (x + Real(0.044715) * x * x * x)));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real c = static_cast<Real>(0.7978845608028654);
  const Real u = c * (x + Real(0.044715) * x * x * x);
  const Real t = std::tanh(u);
  const Real du = c * (Real(1) + Real(3) * Real(0.044715) * x * x);
  return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
}

template <class Real>
struct LayerRefs {
  std::string prefix;
  const Real* ln1_g = nullptr;
  const Real* ln1_b = nullptr;
  const Real* ln2_g = nullptr;
  const Real* ln2_b = nullptr;
  Linear<Real> wq, wk, wv, wo, w1, w2;
  const Real* prefix_k = nullptr;  // [p, d]
  const Real* prefix_v = nullptr;
};

template <class Real>
struct LayerCache {
  std::vector<Real> x_in, ln1_hat, ln1_rstd, a, q, k, v, probs, attn_out, x_mid, ln2_hat, ln2_rstd, m, h1, g;
};

template <class Real>
struct ForwardCache {
  std::vector<LayerCache<Real>> layers;
  std::vector<Real> x_final, lnf_hat, lnf_rstd;
};

enum class Output { kAllLogits, kLastLogits, kHidden };

template <class Real>
class Network {
 public:
  Network(const BasicParamSet<Real>& params, const ModelConfig& config) : params_(params), cfg_(config) {
    config.validate();
    d_ = static_cast<std::size_t>(config.d_model);
    heads_ = static_cast<std::size_t>(config.n_heads);
    hd_ = d_ / heads_;
    dff_ = static_cast<std::size_t>(config.d_ff);
    vocab_ = static_cast<std::size_t>(config.vocab_size);
    p_ = static_cast<std::size_t>(config.prefix_len);
    wte_ = params.at("wte").data.data();
    wpe_ = params.at("wpe").data.data();
    lnf_g_ = params.at("ln_f.g").data.data();
    lnf_b_ = params.at("ln_f.b").data.data();
    lm_head_ = make_linear(params, config, "lm_head", "");
    for (int l = 0; l < config.n_layers; ++l) {
      LayerRefs<Real> L;
      L.prefix = layer_prefix(l);
      const std::string& P = L.prefix;
      L.ln1_g = params.at(P + "ln1.g").data.data();
      L.ln1_b = params.at(P + "ln1.b").data.data();
      L.ln2_g = params.at(P + "ln2.g").data.data();
      L.ln2_b = params.at(P + "ln2.b").data.data();
      L.wq = make_linear(params, config, P + "attn.wq", P + "attn.bq");
      L.wk = make_linear(params, config, P + "attn.wk", P + "attn.bk");
      L.wv = make_linear(params, config, P + "attn.wv", P + "attn.bv");
      L.wo = make_linear(params, config, P + "attn.wo", P + "attn.bo");
      L.w1 = make_linear(params, config, P + "mlp.w1", P + "mlp.b1");
      L.w2 = make_linear(params, config, P + "mlp.w2", P + "mlp.b2");
      if (p_ > 0) {
        L.prefix_k = params.at(P + "attn.prefix_k").data.data();
        L.prefix_v = params.at(P + "attn.prefix_v").data.data();
      }
      layers_.push_back(std::move(L));
    }
  }

  // Returns logits (rows*T*V, or rows*V for kLastLogits) or final hidden
  // states (rows*T*d) depending on `mode`.
  std::vector<Real> run(const TokenMatrix& inputs, Output mode, ForwardCache<Real>* cache) const {
    const std::size_t B = inputs.rows;
    const std::size_t T = inputs.cols;
    if (T > static_cast<std::size_t>(cfg_.context_len)) {
      throw Error(ErrorCode::kSequenceTooLong,
                  std::to_string(T) + " tokens exceeds context_len " + std::to_string(cfg_.context_len));
    }
    const std::size_t N = B * T;
    std::vector<Real> x(N * d_);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        const TokenId id = inputs.at(b, t);
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
          throw Error(ErrorCode::kIdOutOfRange, "token id " + std::to_string(id));
        }
        Real* xr = x.data() + (b * T + t) * d_;
        const Real* e = wte_ + static_cast<std::size_t>(id) * d_;
        const Real* pe = wpe_ + t * d_;
        for (std::size_t i = 0; i < d_; ++i) xr[i] = e[i] + pe[i];
      }
    }

    LayerCache<Real> scratch;
    if (cache) cache->layers.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      LayerCache<Real>& c = cache ? cache->layers[l] : scratch;
      layer_forward(layers_[l], B, T, x, c);
    }

    std::vector<Real> lnf_hat(N * d_), lnf_rstd(N), hidden(N * d_);
    layernorm_forward(x.data(), N, d_, lnf_g_, lnf_b_, hidden.data(), lnf_hat.data(), lnf_rstd.data());

    std::vector<Real> out;
    if (mode == Output::kHidden) {
      out = hidden;
    } else if (mode == Output::kLastLogits) {
      out.resize(B * vocab_);
      for (std::size_t b = 0; b < B; ++b) {
        linear_forward(lm_head_, hidden.data() + (b * T + T - 1) * d_, 1, out.data() + b * vocab_);
      }
    } else {
      out.resize(N * vocab_);
      linear_forward(lm_head_, hidden.data(), N, out.data());
    }
    if (cache) {
      cache->x_final = std::move(hidden);  // ln_f output, the lm_head input
      cache->lnf_hat = std::move(lnf_hat);
      cache->lnf_rstd = std::move(lnf_rstd);
    }
    return out;
  }

  void backward(const TokenMatrix& inputs, const ForwardCache<Real>& cache, const std::vector<Real>& dlogits,
                BasicParamSet<Real>& grads) const {
    const std::size_t B = inputs.rows;
    const std::size_t T = inputs.cols;
    const std::size_t N = B * T;

    std::vector<Real> dhidden(N * d_, Real(0));
    linear_backward(lm_head_, cache.x_final.data(), dlogits.data(), N, dhidden.data(), grads);

    std::vector<Real> dx(N * d_, Real(0));
    layernorm_backward(dhidden.data(), cache.lnf_hat.data(), cache.lnf_rstd.data(), lnf_g_, N, d_, dx.data(),
                       grad_ptr(grads, "ln_f.g"), grad_ptr(grads, "ln_f.b"));

    for (std::size_t l = layers_.size(); l-- > 0;) {
      layer_backward(layers_[l], cache.layers[l], B, T, dx, grads);
    }

    Real* dwte = grad_ptr(grads, "wte");
    Real* dwpe = grad_ptr(grads, "wpe");
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        const Real* g = dx.data() + (b * T + t) * d_;
        if (dwte) axpy(dwte + static_cast<std::size_t>(inputs.at(b, t)) * d_, g, Real(1), d_);
        if (dwpe) axpy(dwpe + t * d_, g, Real(1), d_);
      }
    }
  }

 private:
  Real* grad_ptr(BasicParamSet<Real>& grads, const std::string& name) const {
    if (!params_.trainable(name)) return nullptr;
    return grads.at(name).data.data();
  }

  void layer_forward(const LayerRefs<Real>& L, std::size_t B, std::size_t T, std::vector<Real>& x,
                     LayerCache<Real>& c) const {
    const std::size_t N = B * T;
    c.x_in = x;
    c.ln1_hat.resize(N * d_);
    c.ln1_rstd.resize(N);
    c.a.resize(N * d_);
    layernorm_forward(x.data(), N, d_, L.ln1_g, L.ln1_b, c.a.data(), c.ln1_hat.data(), c.ln1_rstd.data());

    c.q.resize(N * d_);
    c.k.resize(N * d_);
    c.v.resize(N * d_);
    linear_forward(L.wq, c.a.data(), N, c.q.data());
    linear_forward(L.wk, c.a.data(), N, c.k.data());
    linear_forward(L.wv, c.a.data(), N, c.v.data());

    const std::size_t span = p_ + T;
    c.probs.assign(B * heads_ * T * span, Real(0));
    c.attn_out.assign(N * d_, Real(0));
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd_)));
    std::vector<Real> scores(span);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const Real* qr = c.q.data() + (b * T + t) * d_ + h * hd_;
          const std::size_t nk = p_ + t + 1;
          Real mx = -std::numeric_limits<Real>::infinity();
          for (std::size_t j = 0; j < nk; ++j) {
            scores[j] = dot(qr, key_row(L, c, b, T, j) + h * hd_, hd_) * scale;
            mx = std::max(mx, scores[j]);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            sum += scores[j];
          }
          Real* pr = c.probs.data() + ((b * heads_ + h) * T + t) * span;
          Real* out = c.attn_out.data() + (b * T + t) * d_ + h * hd_;
          const Real inv = static_cast<Real>(1.0 / sum);
          for (std::size_t j = 0; j < nk; ++j) {
            pr[j] = scores[j] * inv;
            axpy(out, value_row(L, c, b, T, j) + h * hd_, pr[j], hd_);
          }
        }
      }
    }

    std::vector<Real> proj(N * d_);
    linear_forward(L.wo, c.attn_out.data(), N, proj.data());
    for (std::size_t i = 0; i < N * d_; ++i) x[i] += proj[i];
    c.x_mid = x;

    c.ln2_hat.resize(N * d_);
    c.ln2_rstd.resize(N);
    c.m.resize(N * d_);
    layernorm_forward(x.data(), N, d_, L.ln2_g, L.ln2_b, c.m.data(), c.ln2_hat.data(), c.ln2_rstd.data());
    c.h1.resize(N * dff_);
    c.g.resize(N * dff_);
    linear_forward(L.w1, c.m.data(), N, c.h1.data());
    for (std::size_t i = 0; i < N * dff_; ++i) c.g[i] = gelu(c.h1[i]);
    std::vector<Real> f(N * d_);
    linear_forward(L.w2, c.g.data(), N, f.data());
    for (std::size_t i = 0; i < N * d_; ++i) x[i] += f[i];
  }

  const Real* key_row(const LayerRefs<Real>& L, const LayerCache<Real>& c, std::size_t b, std::size_t T,
                      std::size_t j) const {
    if (j < p_) return L.prefix_k + j * d_;
    return c.k.data() + (b * T + (j - p_)) * d_;
  }
  const Real* value_row(const LayerRefs<Real>& L, const LayerCache<Real>& c, std::size_t b, std::size_t T,
                        std::size_t j) const {
    if (j < p_) return L.prefix_v + j * d_;
    return c.v.data() + (b * T + (j - p_)) * d_;
  }

  // Accumulates dx (may be null) and parameter gradients for one linear layer.
  void linear_backward(const Linear<Real>& lin, const Real* x, const Real* dy, std::size_t rows, Real* dx,
                       BasicParamSet<Real>& grads) const {
    const bool w_train = params_.trainable(lin.w_name);
    bool a_train = false;
    bool b_train = false;
    if (lin.adapted) {
      a_train = params_.trainable(lin.w_name + ".lora_a");
      b_train = params_.trainable(lin.w_name + ".lora_b");
    }
    const std::size_t in = lin.in;
    const std::size_t out = lin.out;

    if (w_train || a_train || b_train) {
      std::vector<Real> local;
      Real* dw = nullptr;
      if (!lin.adapted) {
        dw = grads.at(lin.w_name).data.data();
      } else {
        local.assign(out * in, Real(0));
        dw = local.data();
      }
      for (std::size_t n = 0; n < rows; ++n) {
        const Real* xr = x + n * in;
        const Real* dyr = dy + n * out;
        for (std::size_t o = 0; o < out; ++o) {
          if (dyr[o] != Real(0)) axpy(dw + o * in, xr, dyr[o], in);
        }
      }
      if (lin.adapted) {
        if (w_train) {
          Real* gw = grads.at(lin.w_name).data.data();
          for (std::size_t i = 0; i < out * in; ++i) gw[i] += local[i];
        }
        const std::size_t r = lin.rank;
        if (b_train) {
          // dB = s * dW A^T
          Real* gb = grads.at(lin.w_name + ".lora_b").data.data();
          for (std::size_t o = 0; o < out; ++o) {
            for (std::size_t k = 0; k < r; ++k) gb[o * r + k] += lin.scale * dot(dw + o * in, lin.lora_a + k * in, in);
          }
        }
        if (a_train) {
          // dA = s * B^T dW
          Real* ga = grads.at(lin.w_name + ".lora_a").data.data();
          for (std::size_t k = 0; k < r; ++k) {
            for (std::size_t o = 0; o < out; ++o) axpy(ga + k * in, dw + o * in, lin.scale * lin.lora_b[o * r + k], in);
          }
        }
      }
    }

    if (lin.b && params_.trainable(lin.b_name)) {
      Real* db = grads.at(lin.b_name).data.data();
      for (std::size_t n = 0; n < rows; ++n) {
        for (std::size_t o = 0; o < out; ++o) db[o] += dy[n * out + o];
      }
    }

    if (dx) {
      for (std::size_t n = 0; n < rows; ++n) {
        const Real* dyr = dy + n * out;
        Real* dxr = dx + n * in;
        for (std::size_t o = 0; o < out; ++o) {
          if (dyr[o] != Real(0)) axpy(dxr, lin.weight() + o * in, dyr[o], in);
        }
      }
    }
  }

  // dx holds d(layer output) on entry and d(layer input) on exit.
  void layer_backward(const LayerRefs<Real>& L, const LayerCache<Real>& c, std::size_t B, std::size_t T,
                      std::vector<Real>& dx, BasicParamSet<Real>& grads) const {
    const std::size_t N = B * T;
    const std::string& P = L.prefix;

    // MLP branch.
    std::vector<Real> dg(N * dff_, Real(0));
    linear_backward(L.w2, c.g.data(), dx.data(), N, dg.data(), grads);
    for (std::size_t i = 0; i < N * dff_; ++i) dg[i] *= gelu_grad(c.h1[i]);
    std::vector<Real> dm(N * d_, Real(0));
    linear_backward(L.w1, c.m.data(), dg.data(), N, dm.data(), grads);
    // dx now accumulates d(x_mid).
    layernorm_backward(dm.data(), c.ln2_hat.data(), c.ln2_rstd.data(), L.ln2_g, N, d_, dx.data(),
                       grad_ptr(grads, P + "ln2.g"), grad_ptr(grads, P + "ln2.b"));

    // Attention branch.
    std::vector<Real> dattn(N * d_, Real(0));
    linear_backward(L.wo, c.attn_out.data(), dx.data(), N, dattn.data(), grads);

    std::vector<Real> dq(N * d_, Real(0)), dk(N * d_, Real(0)), dv(N * d_, Real(0));
    Real* dpk = p_ > 0 ? grad_ptr(grads, P + "attn.prefix_k") : nullptr;
    Real* dpv = p_ > 0 ? grad_ptr(grads, P + "attn.prefix_v") : nullptr;
    const std::size_t span = p_ + T;
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd_)));
    std::vector<Real> dp(span);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t row = b * T + t;
          const Real* dout = dattn.data() + row * d_ + h * hd_;
          const Real* pr = c.probs.data() + ((b * heads_ + h) * T + t) * span;
          const Real* qr = c.q.data() + row * d_ + h * hd_;
          const std::size_t nk = p_ + t + 1;
          double sum_pdp = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            dp[j] = dot(dout, value_row(L, c, b, T, j) + h * hd_, hd_);
            sum_pdp += static_cast<double>(pr[j]) * dp[j];
          }
          const Real spd = static_cast<Real>(sum_pdp);
          for (std::size_t j = 0; j < nk; ++j) {
            const Real ds = pr[j] * (dp[j] - spd) * scale;
            axpy(dq.data() + row * d_ + h * hd_, key_row(L, c, b, T, j) + h * hd_, ds, hd_);
            Real* dkr = nullptr;
            Real* dvr = nullptr;
            if (j < p_) {
              if (dpk) dkr = dpk + j * d_ + h * hd_;
              if (dpv) dvr = dpv + j * d_ + h * hd_;
            } else {
              dkr = dk.data() + (b * T + (j - p_)) * d_ + h * hd_;
              dvr = dv.data() + (b * T + (j - p_)) * d_ + h * hd_;
            }
            if (dkr) axpy(dkr, qr, ds, hd_);
            if (dvr) axpy(dvr, dout, pr[j], hd_);
          }
        }
      }
    }

    std::vector<Real> da(N * d_, Real(0));
    linear_backward(L.wq, c.a.data(), dq.data(), N, da.data(), grads);
    linear_backward(L.wk, c.a.data(), dk.data(), N, da.data(), grads);
    linear_backward(L.wv, c.a.data(), dv.data(), N, da.data(), grads);
    layernorm_backward(da.data(), c.ln1_hat.data(), c.ln1_rstd.data(), L.ln1_g, N, d_, dx.data(),
                       grad_ptr(grads, P + "ln1.g"), grad_ptr(grads, P + "ln1.b"));
  }

  const BasicParamSet<Real>& params_;
  const ModelConfig& cfg_;
  std::size_t d_ = 0, heads_ = 0, hd_ = 0, dff_ = 0, vocab_ = 0, p_ = 0;
  const Real* wte_ = nullptr;
  const Real* wpe_ = nullptr;
  const Real* lnf_g_ = nullptr;
  const Real* lnf_b_ = nullptr;
  Linear<Real> lm_head_;
  std::vector<LayerRefs<Real>> layers_;
};

void check_batch_shapes(std::size_t rows, std::size_t cols, std::size_t vocab, const TrainBatch& batch) {
  if (batch.inputs.rows != rows || batch.inputs.cols != cols || batch.targets.rows != rows ||
      batch.targets.cols != cols || batch.loss_mask.size() != rows * cols) {
    throw Error(ErrorCode::kInvalidArgument, "logits and batch shapes do not align");
  }
  for (TokenId id : batch.targets.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw Error(ErrorCode::kIdOutOfRange, "target id");
  }
}

// Loss plus (optionally) dL/dlogits.
template <class Real>
double masked_cross_entropy(const Real* logits, std::size_t rows, std::size_t cols, std::size_t vocab,
                            const TrainBatch& batch, std::vector<Real>* dlogits) {
  check_batch_shapes(rows, cols, vocab, batch);
  std::size_t count = 0;
  for (auto m : batch.loss_mask) count += m != 0;
  if (count == 0) throw Error(ErrorCode::kEmptyMask, "no unmasked positions");
  if (dlogits) dlogits->assign(rows * cols * vocab, Real(0));

  const double inv_count = 1.0 / static_cast<double>(count);
  double total = 0.0;
  std::vector<double> probs(vocab);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    if (!batch.loss_mask[i]) continue;
    const Real* x = logits + i * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(x[v]));
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[v] = std::exp(static_cast<double>(x[v]) - mx);
      sum += probs[v];
    }
    const auto target = static_cast<std::size_t>(batch.targets.ids[i]);
    total += (mx + std::log(sum)) - static_cast<double>(x[target]);
    if (dlogits) {
      Real* d = dlogits->data() + i * vocab;
      for (std::size_t v = 0; v < vocab; ++v) {
        const double pv = probs[v] / sum - (v == target ? 1.0 : 0.0);
        d[v] = static_cast<Real>(pv * inv_count);
      }
    }
  }
  return total * inv_count;
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> base_shapes(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out = {
      {"wte", {V, d}}, {"wpe", {static_cast<std::size_t>(c.context_len), d}},
      {"ln_f.g", {d}}, {"ln_f.b", {d}}, {"lm_head", {V, d}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string P = layer_prefix(l);
    for (const char* n : {"ln1.g", "ln1.b", "ln2.g", "ln2.b", "attn.bq", "attn.bk", "attn.bv", "attn.bo", "mlp.b2"}) {
      out.push_back({P + n, {d}});
    }
    for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) out.push_back({P + n, {d, d}});
    out.push_back({P + "mlp.w1", {f, d}});
    out.push_back({P + "mlp.b1", {f}});
    out.push_back({P + "mlp.w2", {d, f}});
  }
  return out;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1) {
    throw Error(ErrorCode::kInvalidConfig, "model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw Error(ErrorCode::kInvalidConfig, "d_model must be divisible by n_heads");
  if (context_len < 2) throw Error(ErrorCode::kInvalidConfig, "context_len must be >= 2");
  if (prefix_len < 0) throw Error(ErrorCode::kInvalidConfig, "prefix_len must be >= 0");
  if (lora && lora->rank < 1) throw Error(ErrorCode::kInvalidConfig, "LoRA rank must be >= 1");
}

TokenMatrix TokenMatrix::row(const std::vector<TokenId>& tokens) {
  TokenMatrix m(1, tokens.size());
  m.ids = tokens;
  return m;
}

TrainBatch make_batch(const std::vector<std::vector<TokenId>>& sequences, std::size_t max_len) {
  std::size_t cols = 0;
  for (const auto& s : sequences) {
    if (s.size() > max_len + 1) throw Error(ErrorCode::kSequenceTooLong, "training sequence longer than context");
    if (s.size() >= 2) cols = std::max(cols, s.size() - 1);
  }
  TrainBatch batch;
  batch.inputs = TokenMatrix(sequences.size(), cols);
  batch.targets = TokenMatrix(sequences.size(), cols);
  batch.loss_mask.assign(sequences.size() * cols, 0);
  for (std::size_t r = 0; r < sequences.size(); ++r) {
    const auto& s = sequences[r];
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      batch.inputs.at(r, t) = s[t];
      batch.targets.at(r, t) = s[t + 1];
      batch.loss_mask[r * cols + t] = 1;
    }
  }
  return batch;
}

ParamSet init_params(const ModelConfig& config) {
  config.validate();
  auto shapes = base_shapes(config);
  std::sort(shapes.begin(), shapes.end());
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  ParamSet params;
  for (auto& [name, shape] : shapes) {
    Tensor t(shape);
    if (ends_with(name, ".g")) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (shape.size() == 2) {
      for (float& v : t.data) v = normal(rng);
    }
    params.insert(name, std::move(t), true);
  }
  return params;
}

template <class Real>
BasicLogits<Real> forward(const BasicParamSet<Real>& params, const ModelConfig& config, const TokenMatrix& inputs) {
  Network<Real> net(params, config);
  BasicLogits<Real> out;
  out.batch = inputs.rows;
  out.seq = inputs.cols;
  out.vocab = static_cast<std::size_t>(config.vocab_size);
  out.data = net.run(inputs, Output::kAllLogits, nullptr);
  return out;
}

template <class Real>
double loss(const BasicLogits<Real>& logits, const TrainBatch& batch) {
  return masked_cross_entropy<Real>(logits.data.data(), logits.batch, logits.seq, logits.vocab, batch, nullptr);
}

template <class Real>
LossAndGrad<Real> loss_and_grad(const BasicParamSet<Real>& params, const ModelConfig& config,
                                const TrainBatch& batch) {
  if (batch.rows() == 0 || batch.cols() == 0) throw Error(ErrorCode::kEmptyMask, "empty batch");
  Network<Real> net(params, config);
  ForwardCache<Real> cache;
  const std::vector<Real> logits = net.run(batch.inputs, Output::kAllLogits, &cache);
  std::vector<Real> dlogits;
  LossAndGrad<Real> result;
  result.loss = masked_cross_entropy(logits.data(), batch.rows(), batch.cols(),
                                     static_cast<std::size_t>(config.vocab_size), batch, &dlogits);
  result.grads = params.zeros_like();
  net.backward(batch.inputs, cache, dlogits, result.grads);
  return result;
}

template BasicLogits<float> forward(const ParamSet&, const ModelConfig&, const TokenMatrix&);
template BasicLogits<double> forward(const ParamSet64&, const ModelConfig&, const TokenMatrix&);
template double loss(const BasicLogits<float>&, const TrainBatch&);
template double loss(const BasicLogits<double>&, const TrainBatch&);
template LossAndGrad<float> loss_and_grad(const ParamSet&, const ModelConfig&, const TrainBatch&);
template LossAndGrad<double> loss_and_grad(const ParamSet64&, const ModelConfig&, const TrainBatch&);

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, float lr) {
  require_aligned(params, grads, "sgd_step: gradients do not align with parameters");
  ParamSet out = params;
  auto g = grads.begin();
  for (auto& [name, entry] : out) {
    if (entry.trainable) {
      const auto& gd = g->second.tensor.data;
      for (std::size_t i = 0; i < entry.tensor.data.size(); ++i) entry.tensor.data[i] -= lr * gd[i];
    }
    ++g;
  }
  return out;
}

std::string generate(const ParamSet& params, const ModelConfig& config, const std::string& prompt, int max_new,
                     const GenerateOptions& options) {
  std::vector<TokenId> tokens = Tokenizer::tokenize(prompt, {.add_bos = true});
  const auto ctx = static_cast<std::size_t>(config.context_len);
  if (tokens.size() > ctx) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt of " + std::to_string(tokens.size()) + " tokens");
  }
  if (max_new <= 0) return {};

  Network<float> net(params, config);
  std::mt19937_64 rng(options.seed);
  std::vector<TokenId> produced;
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  for (int step = 0; step < max_new; ++step) {
    const std::size_t start = tokens.size() > ctx ? tokens.size() - ctx : 0;
    TokenMatrix window(1, tokens.size() - start);
    std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.end(), window.ids.begin());
    std::vector<float> logits = net.run(window, Output::kLastLogits, nullptr);
    // BOS and PAD are never sampled.
    logits[Tokenizer::kBos] = -std::numeric_limits<float>::infinity();
    logits[Tokenizer::kPad] = -std::numeric_limits<float>::infinity();

    TokenId next = 0;
    if (options.mode == GenerateOptions::Mode::kGreedy) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.begin() + static_cast<std::ptrdiff_t>(vocab)) -
                                  logits.begin());
    } else {
      std::vector<std::size_t> order(vocab);
      for (std::size_t i = 0; i < vocab; ++i) order[i] = i;
      const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, options.top_k)), 1, vocab);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
      std::vector<double> weights(k);
      const double top = logits[order[0]];
      for (std::size_t i = 0; i < k; ++i) weights[i] = std::exp(static_cast<double>(logits[order[i]]) - top);
      std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
      next = static_cast<TokenId>(order[pick(rng)]);
    }
    if (next == Tokenizer::kEos) break;
    if (options.stop_at_newline && next == '\n') break;
    produced.push_back(next);
    tokens.push_back(next);
  }
  return Tokenizer::detokenize(produced);
}

std::vector<std::vector<float>> final_hidden_states(const ParamSet& params, const ModelConfig& config,
                                                    const std::vector<TokenId>& tokens) {
  Network<float> net(params, config);
  const std::vector<float> h = net.run(TokenMatrix::row(tokens), Output::kHidden, nullptr);
  const auto d = static_cast<std::size_t>(config.d_model);
  std::vector<std::vector<float>> rows(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) rows[t].assign(h.begin() + static_cast<std::ptrdiff_t>(t * d),
                                                                 h.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
  return rows;
}

std::vector<float> embed_text(const ParamSet& params, const ModelConfig& config, const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::kEmptyText, "cannot embed empty text");
  const std::vector<TokenId> tokens = Tokenizer::tokenize(text);
  const auto ctx = static_cast<std::size_t>(config.context_len);
  const auto d = static_cast<std::size_t>(config.d_model);
  Network<float> net(params, config);
  std::vector<double> acc(d, 0.0);
  for (std::size_t start = 0; start < tokens.size(); start += ctx) {
    const std::size_t end = std::min(tokens.size(), start + ctx);
    TokenMatrix window(1, end - start);
    std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.begin() + static_cast<std::ptrdiff_t>(end),
              window.ids.begin());
    const std::vector<float> h = net.run(window, Output::kHidden, nullptr);
    for (std::size_t t = 0; t < end - start; ++t) {
      for (std::size_t i = 0; i < d; ++i) acc[i] += h[t * d + i];
    }
  }
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(tokens.size()));
  return out;
}

}  // namespace fedchat::tinylm
