#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace cadet::nn {

// Dense row-major tensor of doubles. Layout for images is NCHW.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
  }
  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape.at(i); }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// Deterministic RNG: mt19937_64 raw draws shaped in-house so sequences are
// stable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  std::uint64_t next_u64() { return gen_(); }
  double uniform() {  // [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double normal();         // Box-Muller
  int uniform_int(int n);  // [0, n)
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }
  // Derives an independent stream, e.g. for data vs weight init.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 gen_;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  explicit Param(std::string n = {}) : name(std::move(n)) {}
  void init_shape(std::vector<int> shape) {
    value = Tensor(shape);
    grad = Tensor(std::move(shape));
  }
};

using ParamRefs = std::vector<Param*>;

// 2-D convolution, square kernel, same padding convention as the callers
// request. Input [N,Cin,H,W] -> output [N,Cout,Ho,Wo].
class Conv2d {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride, int pad);
  void init(Rng& rng);
  Tensor forward(const Tensor& x) const;
  // Returns grad w.r.t. x; accumulates into weight/bias grads when asked.
  Tensor backward(const Tensor& x, const Tensor& dy, bool param_grads = true);
  ParamRefs params() { return {&weight, &bias}; }

  int in_ch, out_ch, ksize, stride, pad;
  Param weight;  // [out, in, k, k]
  Param bias;    // [out]

 private:
  int out_extent(int in) const { return (in + 2 * pad - ksize) / stride + 1; }
};

// Fully connected layer: [N, in] -> [N, out].
class Linear {
 public:
  Linear(std::string name, int in_features, int out_features);
  void init(Rng& rng);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& dy, bool param_grads = true);
  ParamRefs params() { return {&weight, &bias}; }

  int in_features, out_features;
  Param weight;  // [out, in]
  Param bias;    // [out]
};

// SiLU (x * sigmoid(x)); smooth, so finite-difference checks behave.
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row-wise softmax cross-entropy over logits [N,C]; labels < 0 are ignored.
// Mean over counted rows; fills dlogits (same shape) when non-null.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits = nullptr);

// Row-wise mean of the negative entropy of softmax(logits); in [-ln C, 0].
// Gradient w.r.t. logits goes to dlogits when non-null.
double negative_entropy(const Tensor& logits, Tensor* dlogits = nullptr);

std::vector<double> softmax_row(const double* logits, int n);

// Smooth L1 summed over the row, averaged over rows. 0 for empty input.
double smooth_l1(const Tensor& pred, const Tensor& target, Tensor* dpred = nullptr);

class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(const ParamRefs& params);
  static void zero_grad(const ParamRefs& params);

 private:
  double lr_, momentum_;
  std::vector<std::pair<Param*, Tensor>> velocity_;
  Tensor& velocity_for(Param* p);
};

}  // namespace cadet::nn
