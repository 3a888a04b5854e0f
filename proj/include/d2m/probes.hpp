// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "d2m/error.hpp"
#include "d2m/normalize.hpp"
#include "d2m/random.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

enum class Arch { LP, MLP, TimeAttn, LSTM };

// LastStep/Mean/MV reduce the step axis for LP and MLP. Sequence feeds the
// whole trajectory to TimeAttn/LSTM. Window is the cascade expert mode: the
// probe sees only a hesitation span (mean over it for LP/MLP, the span as a
// sequence for TimeAttn/LSTM).
enum class Readout { LastStep, Mean, MV, Sequence, Window };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::LP: return "lp";
    case Arch::MLP: return "mlp";
    case Arch::TimeAttn: return "timeattn";
    case Arch::LSTM: return "lstm";
  }
  return "?";
}

inline std::string_view to_string(Readout r) {
  switch (r) {
    case Readout::LastStep: return "last";
    case Readout::Mean: return "mean";
    case Readout::MV: return "mv";
    case Readout::Sequence: return "sequence";
    case Readout::Window: return "window";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s) {
  if (s == "lp") return Arch::LP;
  if (s == "mlp") return Arch::MLP;
  if (s == "timeattn") return Arch::TimeAttn;
  if (s == "lstm") return Arch::LSTM;
  throw Error(Errc::InvalidArgument, "unknown probe architecture '" + std::string(s) + "'");
}

inline Readout parse_readout(std::string_view s) {
  if (s == "last") return Readout::LastStep;
  if (s == "mean") return Readout::Mean;
  if (s == "mv") return Readout::MV;
  if (s == "sequence") return Readout::Sequence;
  if (s == "window") return Readout::Window;
  throw Error(Errc::InvalidArgument, "unknown readout '" + std::string(s) + "'");
}

inline bool is_sequence_arch(Arch a) { return a == Arch::TimeAttn || a == Arch::LSTM; }

struct ProbeSpec {
  Arch arch = Arch::LP;
  std::size_t dim = 0;
  std::size_t hidden = 256;       // MLP / TimeAttn head width K
  std::size_t attn_dim = 128;     // d_a
  std::size_t proj_dim = 512;     // d_p
  std::size_t lstm_hidden = 128;  // d_h
  double dropout = 0.0;
  Readout readout = Readout::Mean;

  bool operator==(const ProbeSpec&) const = default;
};

inline void validate(const ProbeSpec& spec) {
  if (spec.dim < 1 || spec.hidden < 1 || spec.attn_dim < 1 || spec.proj_dim < 1 ||
      spec.lstm_hidden < 1) {
    throw Error(Errc::InvalidArgument, "probe dimensions must be >= 1");
  }
  if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) {
    throw Error(Errc::InvalidArgument, "dropout must lie in [0,1)");
  }
  const bool seq_readout = spec.readout == Readout::Sequence || spec.readout == Readout::Window;
  if (is_sequence_arch(spec.arch) && !seq_readout) {
    throw Error(Errc::InvalidArgument, "TimeAttn/LSTM probes take sequence or window readouts");
  }
  if (!is_sequence_arch(spec.arch) && spec.readout == Readout::Sequence) {
    throw Error(Errc::InvalidArgument, "LP/MLP probes need a pooled readout");
  }
}

// Statistics mode that goes with a readout: single-step probes use per-step
// stats (only the final row matters), everything else per-feature.
inline NormMode norm_mode_for(Readout r) {
  return r == Readout::LastStep ? NormMode::PerStep : NormMode::PerFeature;
}

// Flat parameter vector; layout given by ProbeLayout.
using ProbeWeights = std::vector<double>;

// Offsets into ProbeWeights.
//   LP:       w[D] b
//   MLP:      W_in[K x D] b_in[K] W_out[K] b_out
//   TimeAttn: W_a[d_a x D] v[d_a] ln_attn{g,b}[D] ln_head{g,b}[D] W_1[K x D] b_1[K] W_2[K] b_2
//   LSTM:     ln_in{g,b}[D] W_proj[d_p x D] b_proj[d_p]
//             L1 W[4d_h x (d_p+d_h)] b[4d_h]  L2 W[4d_h x 2d_h] b[4d_h]
//             ln_head{g,b}[d_h] w_out[d_h] b_out
// LSTM gate order within 4d_h is input, forget, cell, output.
struct ProbeLayout {
  std::size_t total = 0;
  // LP / MLP / heads
  std::size_t w = 0, b = 0;
  std::size_t w_in = 0, b_in = 0, w_out = 0, b_out = 0;
  // TimeAttn
  std::size_t w_a = 0, v = 0, ln1_g = 0, ln1_b = 0, ln2_g = 0, ln2_b = 0, w_1 = 0, b_1 = 0,
              w_2 = 0, b_2 = 0;
  // LSTM
  std::size_t ln_in_g = 0, ln_in_b = 0, w_proj = 0, b_proj = 0, l1_w = 0, l1_b = 0, l2_w = 0,
              l2_b = 0, ln_h_g = 0, ln_h_b = 0;
};

inline ProbeLayout probe_layout(const ProbeSpec& spec) {
  ProbeLayout l;
  const std::size_t D = spec.dim, K = spec.hidden, A = spec.attn_dim, P = spec.proj_dim,
                    H = spec.lstm_hidden;
  std::size_t at = 0;
  auto take = [&](std::size_t n) {
    const std::size_t o = at;
    at += n;
    return o;
  };
  switch (spec.arch) {
    case Arch::LP:
      l.w = take(D);
      l.b = take(1);
      break;
    case Arch::MLP:
      l.w_in = take(K * D);
      l.b_in = take(K);
      l.w_out = take(K);
      l.b_out = take(1);
      break;
    case Arch::TimeAttn:
      l.w_a = take(A * D);
      l.v = take(A);
      l.ln1_g = take(D);
      l.ln1_b = take(D);
      l.ln2_g = take(D);
      l.ln2_b = take(D);
      l.w_1 = take(K * D);
      l.b_1 = take(K);
      l.w_2 = take(K);
      l.b_2 = take(1);
      break;
    case Arch::LSTM:
      l.ln_in_g = take(D);
      l.ln_in_b = take(D);
      l.w_proj = take(P * D);
      l.b_proj = take(P);
      l.l1_w = take(4 * H * (P + H));
      l.l1_b = take(4 * H);
      l.l2_w = take(4 * H * (2 * H));
      l.l2_b = take(4 * H);
      l.ln_h_g = take(H);
      l.ln_h_b = take(H);
      l.w_out = take(H);
      l.b_out = take(1);
      break;
  }
  l.total = at;
  return l;
}

inline std::size_t param_count(const ProbeSpec& spec) { return probe_layout(spec).total; }

// Glorot-uniform matrices, zero biases, unit LayerNorm gain, LSTM forget bias 1.
inline ProbeWeights init_weights(const ProbeSpec& spec, std::uint64_t seed) {
  validate(spec);
  const auto l = probe_layout(spec);
  ProbeWeights w(l.total, 0.0);
  Rng rng(seed);
  auto glorot = [&](std::size_t off, std::size_t rows, std::size_t cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (std::size_t i = 0; i < rows * cols; ++i) w[off + i] = (2.0 * uniform01(rng) - 1.0) * limit;
  };
  auto fill = [&](std::size_t off, std::size_t n, double v) {
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(off),
              w.begin() + static_cast<std::ptrdiff_t>(off + n), v);
  };
  const std::size_t D = spec.dim, K = spec.hidden, A = spec.attn_dim, P = spec.proj_dim,
                    H = spec.lstm_hidden;
  switch (spec.arch) {
    case Arch::LP:
      glorot(l.w, 1, D);
      break;
    case Arch::MLP:
      glorot(l.w_in, K, D);
      glorot(l.w_out, 1, K);
      break;
    case Arch::TimeAttn:
      glorot(l.w_a, A, D);
      glorot(l.v, 1, A);
      fill(l.ln1_g, D, 1.0);
      fill(l.ln2_g, D, 1.0);
      glorot(l.w_1, K, D);
      glorot(l.w_2, 1, K);
      break;
    case Arch::LSTM:
      fill(l.ln_in_g, D, 1.0);
      glorot(l.w_proj, P, D);
      glorot(l.l1_w, 4 * H, P + H);
      fill(l.l1_b + H, H, 1.0);
      glorot(l.l2_w, 4 * H, 2 * H);
      fill(l.l2_b + H, H, 1.0);
      fill(l.ln_h_g, H, 1.0);
      glorot(l.w_out, 1, H);
      break;
  }
  return w;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// tanh-approximated GELU and its derivative.
inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// out[r] = sum_c W[r, c] x[c] (+ bias[r])
inline void matvec(const double* W, std::size_t rows, std::size_t cols, const double* x,
                   const double* bias, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = W + r * cols;
    double acc = bias ? bias[r] : 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc;
  }
}

// gW += g x^T ; gx += W^T g (gx may be null)
inline void matvec_backward(const double* W, std::size_t rows, std::size_t cols, const double* x,
                            const double* g, double* gW, double* gx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* gwr = gW + r * cols;
    const double* wr = W + r * cols;
    for (std::size_t c = 0; c < cols; ++c) gwr[c] += gr * x[c];
    if (gx) {
      for (std::size_t c = 0; c < cols; ++c) gx[c] += gr * wr[c];
    }
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

struct LayerNormCache {
  std::vector<double> normed;
  double inv_std = 0.0;
};

inline void layer_norm(const double* x, std::size_t n, const double* gamma, const double* beta,
                       LayerNormCache& cache, double* out) {
  double mu = 0.0;
  for (std::size_t i = 0; i < n; ++i) mu += x[i];
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= static_cast<double>(n);
  cache.inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  cache.normed.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    cache.normed[i] = (x[i] - mu) * cache.inv_std;
    out[i] = gamma[i] * cache.normed[i] + beta[i];
  }
}

// Accumulates gamma/beta grads and adds the input gradient into gx.
inline void layer_norm_backward(const LayerNormCache& cache, const double* gout, const double* gamma,
                                double* g_gamma, double* g_beta, double* gx) {
  const std::size_t n = cache.normed.size();
  double mean_gn = 0.0, mean_gnn = 0.0;
  std::vector<double> gn(n);
  for (std::size_t i = 0; i < n; ++i) {
    g_gamma[i] += gout[i] * cache.normed[i];
    g_beta[i] += gout[i];
    gn[i] = gout[i] * gamma[i];
    mean_gn += gn[i];
    mean_gnn += gn[i] * cache.normed[i];
  }
  mean_gn /= static_cast<double>(n);
  mean_gnn /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    gx[i] += cache.inv_std * (gn[i] - mean_gn - cache.normed[i] * mean_gnn);
  }
}

// Inverted dropout mask: kept units scaled by 1/(1-p).
inline std::vector<double> dropout_mask(std::size_t n, double p, Rng* rng) {
  std::vector<double> mask(n, 1.0);
  if (rng == nullptr || p <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = uniform01(*rng) < p ? 0.0 : keep;
  return mask;
}

inline std::vector<double> widen(std::span<const float> x) { return {x.begin(), x.end()}; }

// Two-layer ReLU head shared by MLP and TimeAttn: s = W2 drop(relu(W1 x + b1)) + b2.
struct HeadCache {
  std::vector<double> pre, act;  // act includes the dropout mask
  std::vector<double> mask;
};

inline double head_forward(const double* W1, const double* b1, const double* W2, const double* b2,
                           std::size_t K, std::size_t D, const double* x, double dropout, Rng* rng,
                           HeadCache& c) {
  c.pre.assign(K, 0.0);
  matvec(W1, K, D, x, b1, c.pre.data());
  c.mask = dropout_mask(K, dropout, rng);
  c.act.resize(K);
  for (std::size_t k = 0; k < K; ++k) c.act[k] = std::max(0.0, c.pre[k]) * c.mask[k];
  return dot(W2, c.act.data(), K) + *b2;
}

inline void head_backward(const double* W1, const double* W2, std::size_t K, std::size_t D,
                          const double* x, const HeadCache& c, double g, double* gW1, double* gb1,
                          double* gW2, double* gb2, double* gx) {
  std::vector<double> gpre(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    gW2[k] += g * c.act[k];
    gpre[k] = c.pre[k] > 0.0 ? g * W2[k] * c.mask[k] : 0.0;
  }
  *gb2 += g;
  for (std::size_t k = 0; k < K; ++k) gb1[k] += gpre[k];
  matvec_backward(W1, K, D, x, gpre.data(), gW1, gx);
}

struct LstmStep {
  std::vector<double> input;  // layer input at this step
  std::vector<double> i, f, g, o, c, h;
};

// One unidirectional LSTM layer over a sequence of inputs.
inline void lstm_layer_forward(const double* W, const double* b, std::size_t in_dim, std::size_t H,
                               std::vector<LstmStep>& steps) {
  std::vector<double> h_prev(H, 0.0), c_prev(H, 0.0), concat(in_dim + H), z(4 * H);
  for (auto& st : steps) {
    std::copy(st.input.begin(), st.input.end(), concat.begin());
    std::copy(h_prev.begin(), h_prev.end(), concat.begin() + static_cast<std::ptrdiff_t>(in_dim));
    matvec(W, 4 * H, in_dim + H, concat.data(), b, z.data());
    st.i.resize(H), st.f.resize(H), st.g.resize(H), st.o.resize(H), st.c.resize(H), st.h.resize(H);
    for (std::size_t j = 0; j < H; ++j) {
      st.i[j] = sigmoid(z[j]);
      st.f[j] = sigmoid(z[H + j]);
      st.g[j] = std::tanh(z[2 * H + j]);
      st.o[j] = sigmoid(z[3 * H + j]);
      st.c[j] = st.f[j] * c_prev[j] + st.i[j] * st.g[j];
      st.h[j] = st.o[j] * std::tanh(st.c[j]);
    }
    h_prev = st.h;
    c_prev = st.c;
  }
}

// BPTT for one layer. g_h[s] is the external gradient on the step-s output;
// returns the gradient on each step's input.
inline std::vector<std::vector<double>> lstm_layer_backward(
    const double* W, std::size_t in_dim, std::size_t H, const std::vector<LstmStep>& steps,
    const std::vector<std::vector<double>>& g_h, double* gW, double* gb) {
  const std::size_t S = steps.size();
  std::vector<std::vector<double>> g_in(S, std::vector<double>(in_dim, 0.0));
  std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), dz(4 * H), concat(in_dim + H),
      g_concat(in_dim + H);
  const std::vector<double> zeros(H, 0.0);
  for (std::size_t k = S; k-- > 0;) {
    const auto& st = steps[k];
    const auto& c_prev = k > 0 ? steps[k - 1].c : zeros;
    const auto& h_prev = k > 0 ? steps[k - 1].h : zeros;
    for (std::size_t j = 0; j < H; ++j) {
      const double dh = g_h[k][j] + dh_next[j];
      const double tc = std::tanh(st.c[j]);
      const double d_o = dh * tc;
      const double dc = dh * st.o[j] * (1.0 - tc * tc) + dc_next[j];
      const double di = dc * st.g[j];
      const double dg = dc * st.i[j];
      const double df = dc * c_prev[j];
      dc_next[j] = dc * st.f[j];
      dz[j] = di * st.i[j] * (1.0 - st.i[j]);
      dz[H + j] = df * st.f[j] * (1.0 - st.f[j]);
      dz[2 * H + j] = dg * (1.0 - st.g[j] * st.g[j]);
      dz[3 * H + j] = d_o * st.o[j] * (1.0 - st.o[j]);
    }
    std::copy(st.input.begin(), st.input.end(), concat.begin());
    std::copy(h_prev.begin(), h_prev.end(), concat.begin() + static_cast<std::ptrdiff_t>(in_dim));
    std::fill(g_concat.begin(), g_concat.end(), 0.0);
    matvec_backward(W, 4 * H, in_dim + H, concat.data(), dz.data(), gW, g_concat.data());
    for (std::size_t r = 0; r < 4 * H; ++r) gb[r] += dz[r];
    std::copy(g_concat.begin(), g_concat.begin() + static_cast<std::ptrdiff_t>(in_dim),
              g_in[k].begin());
    std::copy(g_concat.begin() + static_cast<std::ptrdiff_t>(in_dim), g_concat.end(),
              dh_next.begin());
  }
  return g_in;
}

inline void check_input(const ProbeSpec& spec, const StepsView& x) {
  if (x.dim != spec.dim) {
    throw Error(Errc::ShapeMismatch, "probe expects dim " + std::to_string(spec.dim) + ", got " +
                                         std::to_string(x.dim));
  }
  if (x.steps < 1 || x.values.size() != x.steps * x.dim) {
    throw Error(Errc::ShapeMismatch, "probe input payload does not match steps*dim");
  }
  if (!is_sequence_arch(spec.arch) && x.steps != 1) {
    throw Error(Errc::ShapeMismatch, "LP/MLP probes take one pooled vector");
  }
}

// Evaluates the probe and, when `grad` is non-null, accumulates g * dlogit/dw
// into it. g is supplied by the caller after the forward value is known, so
// the function takes a callback mapping the logit to g.
template <typename LogitToGrad>
double run_probe(const ProbeSpec& spec, std::span<const double> w, const StepsView& x, Rng* rng,
                 double* grad, LogitToGrad&& dloss) {
  const auto l = probe_layout(spec);
  const std::size_t D = spec.dim, K = spec.hidden;
  const double* W = w.data();
  switch (spec.arch) {
    case Arch::LP: {
      const auto h = widen(x.row(0));
      const double s = dot(W + l.w, h.data(), D) + W[l.b];
      if (grad) {
        const double g = dloss(s);
        for (std::size_t d = 0; d < D; ++d) grad[l.w + d] += g * h[d];
        grad[l.b] += g;
      }
      return s;
    }
    case Arch::MLP: {
      const auto h = widen(x.row(0));
      HeadCache hc;
      const double s = head_forward(W + l.w_in, W + l.b_in, W + l.w_out, W + l.b_out, K, D,
                                    h.data(), spec.dropout, rng, hc);
      if (grad) {
        head_backward(W + l.w_in, W + l.w_out, K, D, h.data(), hc, dloss(s), grad + l.w_in,
                      grad + l.b_in, grad + l.w_out, grad + l.b_out, nullptr);
      }
      return s;
    }
    case Arch::TimeAttn: {
      const std::size_t S = x.steps, A = spec.attn_dim;
      std::vector<std::vector<double>> xs(S, std::vector<double>(D)), ts(S, std::vector<double>(A));
      std::vector<LayerNormCache> ln1(S);
      std::vector<double> e(S);
      for (std::size_t s = 0; s < S; ++s) {
        const auto h = widen(x.row(s));
        layer_norm(h.data(), D, W + l.ln1_g, W + l.ln1_b, ln1[s], xs[s].data());
        matvec(W + l.w_a, A, D, xs[s].data(), nullptr, ts[s].data());
        for (auto& t : ts[s]) t = std::tanh(t);
        e[s] = dot(W + l.v, ts[s].data(), A);
      }
      const double e_max = *std::max_element(e.begin(), e.end());
      std::vector<double> alpha(S);
      double z = 0.0;
      for (std::size_t s = 0; s < S; ++s) z += (alpha[s] = std::exp(e[s] - e_max));
      for (auto& a : alpha) a /= z;
      std::vector<double> ctx(D, 0.0), u(D);
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t d = 0; d < D; ++d) ctx[d] += alpha[s] * xs[s][d];
      }
      LayerNormCache ln2;
      layer_norm(ctx.data(), D, W + l.ln2_g, W + l.ln2_b, ln2, u.data());
      HeadCache hc;
      const double out = head_forward(W + l.w_1, W + l.b_1, W + l.w_2, W + l.b_2, K, D, u.data(),
                                      spec.dropout, rng, hc);
      if (!grad) return out;

      const double g = dloss(out);
      std::vector<double> gu(D, 0.0), gctx(D, 0.0);
      head_backward(W + l.w_1, W + l.w_2, K, D, u.data(), hc, g, grad + l.w_1, grad + l.b_1,
                    grad + l.w_2, grad + l.b_2, gu.data());
      layer_norm_backward(ln2, gu.data(), W + l.ln2_g, grad + l.ln2_g, grad + l.ln2_b, gctx.data());
      std::vector<double> galpha(S);
      double weighted = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        galpha[s] = dot(gctx.data(), xs[s].data(), D);
        weighted += alpha[s] * galpha[s];
      }
      std::vector<double> gx(D), gq(A);
      for (std::size_t s = 0; s < S; ++s) {
        const double ge = alpha[s] * (galpha[s] - weighted);
        for (std::size_t d = 0; d < D; ++d) gx[d] = alpha[s] * gctx[d];
        for (std::size_t a = 0; a < A; ++a) {
          grad[l.v + a] += ge * ts[s][a];
          gq[a] = ge * W[l.v + a] * (1.0 - ts[s][a] * ts[s][a]);
        }
        matvec_backward(W + l.w_a, A, D, xs[s].data(), gq.data(), grad + l.w_a, gx.data());
        std::vector<double> sink(D, 0.0);
        layer_norm_backward(ln1[s], gx.data(), W + l.ln1_g, grad + l.ln1_g, grad + l.ln1_b,
                            sink.data());
      }
      return out;
    }
    case Arch::LSTM: {
      const std::size_t S = x.steps, P = spec.proj_dim, H = spec.lstm_hidden;
      std::vector<std::vector<double>> xs(S, std::vector<double>(D)), pre(S, std::vector<double>(P));
      std::vector<LayerNormCache> ln_in(S);
      std::vector<LstmStep> layer1(S), layer2(S);
      for (std::size_t s = 0; s < S; ++s) {
        const auto h = widen(x.row(s));
        layer_norm(h.data(), D, W + l.ln_in_g, W + l.ln_in_b, ln_in[s], xs[s].data());
        matvec(W + l.w_proj, P, D, xs[s].data(), W + l.b_proj, pre[s].data());
        layer1[s].input.resize(P);
        for (std::size_t p = 0; p < P; ++p) layer1[s].input[p] = gelu(pre[s][p]);
      }
      lstm_layer_forward(W + l.l1_w, W + l.l1_b, P, H, layer1);
      // Dropout sits between the two recurrent layers.
      std::vector<std::vector<double>> masks(S);
      for (std::size_t s = 0; s < S; ++s) {
        masks[s] = dropout_mask(H, spec.dropout, rng);
        layer2[s].input.resize(H);
        for (std::size_t j = 0; j < H; ++j) layer2[s].input[j] = layer1[s].h[j] * masks[s][j];
      }
      lstm_layer_forward(W + l.l2_w, W + l.l2_b, H, H, layer2);
      LayerNormCache ln_h;
      std::vector<double> u(H);
      layer_norm(layer2.back().h.data(), H, W + l.ln_h_g, W + l.ln_h_b, ln_h, u.data());
      const double out = dot(W + l.w_out, u.data(), H) + W[l.b_out];
      if (!grad) return out;

      const double g = dloss(out);
      std::vector<double> gu(H);
      for (std::size_t j = 0; j < H; ++j) {
        grad[l.w_out + j] += g * u[j];
        gu[j] = g * W[l.w_out + j];
      }
      grad[l.b_out] += g;
      std::vector<std::vector<double>> g_h2(S, std::vector<double>(H, 0.0));
      layer_norm_backward(ln_h, gu.data(), W + l.ln_h_g, grad + l.ln_h_g, grad + l.ln_h_b,
                          g_h2.back().data());
      auto g_in2 = lstm_layer_backward(W + l.l2_w, H, H, layer2, g_h2, grad + l.l2_w, grad + l.l2_b);
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t j = 0; j < H; ++j) g_in2[s][j] *= masks[s][j];
      }
      auto g_in1 = lstm_layer_backward(W + l.l1_w, P, H, layer1, g_in2, grad + l.l1_w, grad + l.l1_b);
      std::vector<double> gpre(P), gx(D);
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t p = 0; p < P; ++p) gpre[p] = g_in1[s][p] * gelu_grad(pre[s][p]);
        for (std::size_t p = 0; p < P; ++p) grad[l.b_proj + p] += gpre[p];
        std::fill(gx.begin(), gx.end(), 0.0);
        matvec_backward(W + l.w_proj, P, D, xs[s].data(), gpre.data(), grad + l.w_proj, gx.data());
        std::vector<double> sink(D, 0.0);
        layer_norm_backward(ln_in[s], gx.data(), W + l.ln_in_g, grad + l.ln_in_g, grad + l.ln_in_b,
                            sink.data());
      }
      return out;
    }
  }
  return 0.0;
}

inline void check_weights(const ProbeSpec& spec, std::span<const double> w) {
  if (w.size() != param_count(spec)) {
    throw Error(Errc::ShapeMismatch, "weight vector has " + std::to_string(w.size()) +
                                         " entries, layout needs " +
                                         std::to_string(param_count(spec)));
  }
}

}  // namespace detail

// Scalar logit. LP/MLP take a single pooled row; TimeAttn/LSTM any number of
// steps. Dropout is only active in train mode and is drawn from `seed`.
inline double forward(const ProbeSpec& spec, std::span<const double> weights, const StepsView& input,
                      bool train_mode = false, std::uint64_t seed = 0) {
  detail::check_weights(spec, weights);
  detail::check_input(spec, input);
  Rng rng(seed);
  return detail::run_probe(spec, weights, input, train_mode ? &rng : nullptr, nullptr,
                           [](double) { return 0.0; });
}

// Softmax attention over steps for a TimeAttn probe (inference only).
inline std::vector<double> attention_weights(const ProbeSpec& spec, std::span<const double> weights,
                                             const StepsView& input) {
  if (spec.arch != Arch::TimeAttn) throw Error(Errc::InvalidArgument, "attention needs a TimeAttn probe");
  detail::check_weights(spec, weights);
  detail::check_input(spec, input);
  const auto l = probe_layout(spec);
  const std::size_t D = spec.dim, A = spec.attn_dim;
  const double* W = weights.data();
  std::vector<double> e(input.steps), xs(D), t(A);
  for (std::size_t s = 0; s < input.steps; ++s) {
    const auto h = detail::widen(input.row(s));
    detail::LayerNormCache cache;
    detail::layer_norm(h.data(), D, W + l.ln1_g, W + l.ln1_b, cache, xs.data());
    detail::matvec(W + l.w_a, A, D, xs.data(), nullptr, t.data());
    for (auto& v : t) v = std::tanh(v);
    e[s] = detail::dot(W + l.v, t.data(), A);
  }
  const double e_max = *std::max_element(e.begin(), e.end());
  double z = 0.0;
  for (auto& v : e) z += (v = std::exp(v - e_max));
  for (auto& v : e) v /= z;
  return e;
}

// log(1 + exp(-(2y-1) s)), computed stably.
inline double logistic_loss(double logit, Label y) {
  const double z = -(2.0 * y - 1.0) * logit;
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Mean logistic loss over the batch and its analytic gradient. Sample i draws
// its dropout mask from derive_seed(seed, i).
inline LossAndGrad gradient(const ProbeSpec& spec, std::span<const double> weights,
                            std::span<const StepsView> batch, std::span<const Label> labels,
                            bool train_mode = false, std::uint64_t seed = 0) {
  detail::check_weights(spec, weights);
  if (batch.empty()) throw Error(Errc::ShapeMismatch, "empty batch");
  if (batch.size() != labels.size()) throw Error(Errc::ShapeMismatch, "batch/label size mismatch");
  LossAndGrad out{0.0, std::vector<double>(weights.size(), 0.0)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_input(spec, batch[i]);
    const Label y = labels[i];
    if (y != 0 && y != 1) throw Error(Errc::InvalidArgument, "labels must be binary");
    Rng rng(derive_seed(seed, i));
    double loss = 0.0;
    detail::run_probe(spec, weights, batch[i], train_mode ? &rng : nullptr, out.grad.data(),
                      [&](double s) {
                        loss = logistic_loss(s, y);
                        const double sy = 2.0 * y - 1.0;
                        return -sy * detail::sigmoid(-sy * s) * inv_n;
                      });
    out.loss += loss * inv_n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Readouts
// ---------------------------------------------------------------------------

inline StepMatrix mean_over_steps(const StepsView& x) {
  std::vector<double> acc(x.dim, 0.0);
  for (std::size_t s = 0; s < x.steps; ++s) {
    const auto r = x.row(s);
    for (std::size_t d = 0; d < x.dim; ++d) acc[d] += r[d];
  }
  StepMatrix out(1, x.dim);
  for (std::size_t d = 0; d < x.dim; ++d) {
    out.values[d] = static_cast<float>(acc[d] / static_cast<double>(x.steps));
  }
  return out;
}

inline StepMatrix last_step(const StepsView& x) {
  const auto r = x.row(x.steps - 1);
  return StepMatrix(1, x.dim, std::vector<float>(r.begin(), r.end()));
}

// Training input for an already-normalized trajectory. MV probes train on the
// mean-pooled features; Window inputs are built by the cascade.
inline StepMatrix training_input(const ProbeSpec& spec, const StepMatrix& normalized) {
  switch (spec.readout) {
    case Readout::LastStep: return last_step(normalized.view());
    case Readout::Mean:
    case Readout::MV: return mean_over_steps(normalized.view());
    case Readout::Sequence: return normalized;
    case Readout::Window:
      return is_sequence_arch(spec.arch) ? normalized : mean_over_steps(normalized.view());
  }
  return normalized;
}

// Majority vote with ties going to the unsafe class: 1 iff #positive >= S/2.
inline Label majority_vote(std::span<const double> step_logits) {
  std::size_t positive = 0;
  for (double s : step_logits) positive += s > 0.0 ? 1 : 0;
  return 2 * positive >= step_logits.size() ? 1 : 0;
}

struct Probe {
  ProbeSpec spec;
  NormStats stats;
  ProbeWeights weights;
  std::size_t trained_steps = 0;

  bool operator==(const Probe&) const = default;
};

struct Prediction {
  Label label = 0;
  double logit = 0.0;               // single-pass readouts
  std::vector<double> step_logits;  // MV only
};

// Normalizes `t` with the probe's stats and applies the readout. Window
// readouts need `window`, given in the trajectory's step coordinates.
inline Prediction predict_with_readout(const Probe& probe, const Trajectory& t,
                                       std::optional<StepSpan> window = std::nullopt) {
  const auto& spec = probe.spec;
  const StepMatrix x = apply(t.states, probe.stats);
  Prediction p;
  auto single = [&](const StepMatrix& in) {
    p.logit = forward(spec, probe.weights, in.view());
    p.label = p.logit > 0.0 ? 1 : 0;
  };
  switch (spec.readout) {
    case Readout::LastStep: single(last_step(x.view())); break;
    case Readout::Mean: single(mean_over_steps(x.view())); break;
    case Readout::Sequence: single(x); break;
    case Readout::MV: {
      if (is_sequence_arch(spec.arch)) throw Error(Errc::InvalidArgument, "MV needs LP or MLP");
      p.step_logits.resize(x.steps);
      for (std::size_t s = 0; s < x.steps; ++s) {
        p.step_logits[s] = forward(spec, probe.weights, StepsView{x.row(s), 1, x.dim});
      }
      p.label = majority_vote(p.step_logits);
      break;
    }
    case Readout::Window: {
      if (!window) throw Error(Errc::InvalidArgument, "window readout needs a span");
      if (window->lo > window->hi || window->hi >= x.steps) {
        throw Error(Errc::SpanOutOfRange, "window outside trajectory");
      }
      const StepsView sub{std::span<const float>(x.values).subspan(window->lo * x.dim,
                                                                     window->size() * x.dim),
                          window->size(), x.dim};
      if (is_sequence_arch(spec.arch)) {
        p.logit = forward(spec, probe.weights, sub);
        p.label = p.logit > 0.0 ? 1 : 0;
      } else {
        single(mean_over_steps(sub));
      }
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Analytic cost (a multiply-add counts as 2 FLOPs)
// ---------------------------------------------------------------------------

enum class FlopConvention {
  Full,          // every matrix-vector term listed for the architecture
  DominantTerms  // TimeAttn drops its 2SD weighted-sum term
};

// Per-sample FLOPs for a trajectory (or window) of `steps` steps; `steps` may
// be a mean window length.
inline double flops_estimate(const ProbeSpec& spec, double steps,
                             FlopConvention conv = FlopConvention::Full) {
  const double S = steps, D = static_cast<double>(spec.dim),
               K = static_cast<double>(spec.hidden), A = static_cast<double>(spec.attn_dim),
               P = static_cast<double>(spec.proj_dim), H = static_cast<double>(spec.lstm_hidden);
  switch (spec.arch) {
    case Arch::LP:
      switch (spec.readout) {
        case Readout::LastStep: return 2 * D;
        case Readout::MV: return 2 * S * D;
        default: return S * D + 2 * D;
      }
    case Arch::MLP:
      switch (spec.readout) {
        case Readout::LastStep: return 2 * D * K;
        case Readout::MV: return 2 * S * D * K;
        default: return S * D + 2 * D * K;
      }
    case Arch::TimeAttn: {
      const double dominant = 2 * S * D * A + 2 * D * K;
      return conv == FlopConvention::DominantTerms ? dominant : dominant + 2 * S * D;
    }
    case Arch::LSTM:
      return S * 2 * D * P + S * (8 * H * (P + H) + 16 * H * H);
  }
  return 0.0;
}

}  // namespace d2m
