#include "cadet/nn.hpp"

#include <cassert>
#include <stdexcept>

namespace cadet::nn {

double Rng::normal() {
  // Box-Muller on raw uniforms; the cosine branch only, so one draw pair
  // per sample and a platform-independent sequence.
  double u1 = 0;
  do {
    u1 = uniform();
  } while (u1 <= 0);
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int n) {
  assert(n > 0);
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  // SplitMix64 over seed + stream tag.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void he_init(Param& p, int fan_in, Rng& rng) {
  double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& w : p.value.data) w = scale * rng.normal();
}

}  // namespace

Conv2d::Conv2d(std::string name, int in_ch_, int out_ch_, int ksize_,
               int stride_, int pad_)
    : in_ch(in_ch_), out_ch(out_ch_), ksize(ksize_), stride(stride_), pad(pad_),
      weight(name + ".weight"), bias(name + ".bias") {
  weight.init_shape({out_ch, in_ch, ksize, ksize});
  bias.init_shape({out_ch});
}

void Conv2d::init(Rng& rng) {
  he_init(weight, in_ch * ksize * ksize, rng);
  bias.value.zero();
}

Tensor Conv2d::forward(const Tensor& x) const {
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int ho = out_extent(h), wo = out_extent(w);
  Tensor y({n, out_ch, ho, wo});
  const double* wdata = weight.value.data.data();
  for (int b = 0; b < n; ++b) {
    const double* xb = &x.data[static_cast<size_t>(b) * in_ch * h * w];
    double* yb = &y.data[static_cast<size_t>(b) * out_ch * ho * wo];
    for (int oc = 0; oc < out_ch; ++oc) {
      double bias_v = bias.value[oc];
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          yb[(static_cast<size_t>(oc) * ho + oy) * wo + ox] = bias_v;
        }
      }
    }
    for (int ic = 0; ic < in_ch; ++ic) {
      const double* xc = xb + static_cast<size_t>(ic) * h * w;
      for (int oc = 0; oc < out_ch; ++oc) {
        const double* wk =
            wdata + ((static_cast<size_t>(oc) * in_ch + ic) * ksize) * ksize;
        double* yc = yb + static_cast<size_t>(oc) * ho * wo;
        for (int ky = 0; ky < ksize; ++ky) {
          for (int kx = 0; kx < ksize; ++kx) {
            double wv = wk[ky * ksize + kx];
            if (wv == 0) continue;
            for (int oy = 0; oy < ho; ++oy) {
              int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              const double* xrow = xc + static_cast<size_t>(iy) * w;
              double* yrow = yc + static_cast<size_t>(oy) * wo;
              for (int ox = 0; ox < wo; ++ox) {
                int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                yrow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, bool param_grads) {
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int ho = dy.dim(2), wo = dy.dim(3);
  Tensor dx({n, in_ch, h, w});
  double* wg = weight.grad.data.data();
  const double* wdata = weight.value.data.data();
  for (int b = 0; b < n; ++b) {
    const double* xb = &x.data[static_cast<size_t>(b) * in_ch * h * w];
    const double* dyb = &dy.data[static_cast<size_t>(b) * out_ch * ho * wo];
    double* dxb = &dx.data[static_cast<size_t>(b) * in_ch * h * w];
    if (param_grads) {
      for (int oc = 0; oc < out_ch; ++oc) {
        const double* dyc = dyb + static_cast<size_t>(oc) * ho * wo;
        double acc = 0;
        for (int i = 0; i < ho * wo; ++i) acc += dyc[i];
        bias.grad[oc] += acc;
      }
    }
    for (int ic = 0; ic < in_ch; ++ic) {
      const double* xc = xb + static_cast<size_t>(ic) * h * w;
      double* dxc = dxb + static_cast<size_t>(ic) * h * w;
      for (int oc = 0; oc < out_ch; ++oc) {
        const double* dyc = dyb + static_cast<size_t>(oc) * ho * wo;
        const double* wk =
            wdata + ((static_cast<size_t>(oc) * in_ch + ic) * ksize) * ksize;
        double* wgk = wg + ((static_cast<size_t>(oc) * in_ch + ic) * ksize) * ksize;
        for (int ky = 0; ky < ksize; ++ky) {
          for (int kx = 0; kx < ksize; ++kx) {
            double wv = wk[ky * ksize + kx];
            double grad_acc = 0;
            for (int oy = 0; oy < ho; ++oy) {
              int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              const double* xrow = xc + static_cast<size_t>(iy) * w;
              double* dxrow = dxc + static_cast<size_t>(iy) * w;
              const double* dyrow = dyc + static_cast<size_t>(oy) * wo;
              for (int ox = 0; ox < wo; ++ox) {
                int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                double g = dyrow[ox];
                grad_acc += g * xrow[ix];
                dxrow[ix] += g * wv;
              }
            }
            if (param_grads) wgk[ky * ksize + kx] += grad_acc;
          }
        }
      }
    }
  }
  return dx;
}

Linear::Linear(std::string name, int in_features_, int out_features_)
    : in_features(in_features_), out_features(out_features_),
      weight(name + ".weight"), bias(name + ".bias") {
  weight.init_shape({out_features, in_features});
  bias.init_shape({out_features});
}

void Linear::init(Rng& rng) {
  he_init(weight, in_features, rng);
  bias.value.zero();
}

Tensor Linear::forward(const Tensor& x) const {
  int n = x.dim(0);
  Tensor y({n, out_features});
  for (int b = 0; b < n; ++b) {
    const double* xr = &x.data[static_cast<size_t>(b) * in_features];
    double* yr = &y.data[static_cast<size_t>(b) * out_features];
    for (int o = 0; o < out_features; ++o) {
      const double* wr = &weight.value.data[static_cast<size_t>(o) * in_features];
      double acc = bias.value[o];
      for (int i = 0; i < in_features; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy, bool param_grads) {
  int n = x.dim(0);
  Tensor dx({n, in_features});
  for (int b = 0; b < n; ++b) {
    const double* xr = &x.data[static_cast<size_t>(b) * in_features];
    const double* dyr = &dy.data[static_cast<size_t>(b) * out_features];
    double* dxr = &dx.data[static_cast<size_t>(b) * in_features];
    for (int o = 0; o < out_features; ++o) {
      double g = dyr[o];
      const double* wr = &weight.value.data[static_cast<size_t>(o) * in_features];
      if (param_grads) {
        double* wgr = &weight.grad.data[static_cast<size_t>(o) * in_features];
        for (int i = 0; i < in_features; ++i) wgr[i] += g * xr[i];
        bias.grad[o] += g;
      }
      for (int i = 0; i < in_features; ++i) dxr[i] += g * wr[i];
    }
  }
  return dx;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape);
  for (size_t i = 0; i < x.numel(); ++i) {
    y[i] = x[i] * sigmoid(x[i]);
  }
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape);
  for (size_t i = 0; i < x.numel(); ++i) {
    double s = sigmoid(x[i]);
    dx[i] = dy[i] * (s * (1.0 + x[i] * (1.0 - s)));
  }
  return dx;
}

std::vector<double> softmax_row(const double* logits, int n) {
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  std::vector<double> p(n);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (int i = 0; i < n; ++i) p[i] /= sum;
  return p;
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits) {
  int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  }
  if (dlogits) *dlogits = Tensor(logits.shape);
  int counted = 0;
  for (int r = 0; r < n; ++r) {
    if (labels[r] >= 0) ++counted;
  }
  if (counted == 0) return 0;
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    int label = labels[r];
    if (label < 0) continue;
    if (label >= c) throw std::invalid_argument("label out of range");
    const double* row = &logits.data[static_cast<size_t>(r) * c];
    auto p = softmax_row(row, c);
    loss += -std::log(std::max(p[label], 1e-300));
    if (dlogits) {
      double* drow = &dlogits->data[static_cast<size_t>(r) * c];
      for (int j = 0; j < c; ++j) {
        drow[j] = (p[j] - (j == label ? 1.0 : 0.0)) / counted;
      }
    }
  }
  return loss / counted;
}

double negative_entropy(const Tensor& logits, Tensor* dlogits) {
  int n = logits.dim(0), c = logits.dim(1);
  if (dlogits) *dlogits = Tensor(logits.shape);
  if (n == 0) return 0;
  double total = 0;
  for (int r = 0; r < n; ++r) {
    const double* row = &logits.data[static_cast<size_t>(r) * c];
    auto p = softmax_row(row, c);
    double entropy = 0;
    for (int j = 0; j < c; ++j) {
      if (p[j] > 0) entropy -= p[j] * std::log(p[j]);
    }
    total += -entropy;
    if (dlogits) {
      // d(-H)/dz_j = p_j (ln p_j + H)
      double* drow = &dlogits->data[static_cast<size_t>(r) * c];
      for (int j = 0; j < c; ++j) {
        double lp = p[j] > 0 ? std::log(p[j]) : -700.0;
        drow[j] = p[j] * (lp + entropy) / n;
      }
    }
  }
  return total / n;
}

double smooth_l1(const Tensor& pred, const Tensor& target, Tensor* dpred) {
  if (pred.shape != target.shape) {
    throw std::invalid_argument("smooth_l1: shape mismatch");
  }
  if (dpred) *dpred = Tensor(pred.shape);
  int rows = pred.shape.empty() ? 0 : pred.dim(0);
  if (rows == 0) return 0;
  size_t cols = pred.numel() / rows;
  double loss = 0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    double d = pred[i] - target[i];
    double a = std::abs(d);
    loss += a < 1.0 ? 0.5 * d * d : a - 0.5;
    if (dpred) {
      (*dpred)[i] = (a < 1.0 ? d : (d > 0 ? 1.0 : -1.0)) / rows;
    }
  }
  (void)cols;
  return loss / rows;
}

Tensor& Sgd::velocity_for(Param* p) {
  for (auto& [param, vel] : velocity_) {
    if (param == p) return vel;
  }
  velocity_.emplace_back(p, Tensor(p->value.shape));
  return velocity_.back().second;
}

void Sgd::step(const ParamRefs& params) {
  for (Param* p : params) {
    Tensor& vel = velocity_for(p);
    for (size_t i = 0; i < p->value.numel(); ++i) {
      vel[i] = momentum_ * vel[i] + p->grad[i];
      p->value[i] -= lr_ * vel[i];
    }
  }
}

void Sgd::zero_grad(const ParamRefs& params) {
  for (Param* p : params) p->grad.zero();
}

}  // namespace cadet::nn
