#pragma once

// Minimal layer set for small CIFAR-style CNNs. Each layer keeps whatever
// its backward pass needs from the last training-mode forward call and
// accumulates parameter gradients into Parameter::grad.

#include "pckd/tensor.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace pckd::nn {

enum class Mode { train, eval };

template <typename S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
  bool trainable = true;  // false for running statistics

  Parameter() = default;
  Parameter(std::string n, Index rows, Index cols, bool train = true)
      : name(std::move(n)), value(Matrix<S>::Zero(rows, cols)), grad(Matrix<S>::Zero(rows, cols)), trainable(train) {}

  void zero_grad() { grad.setZero(); }
};

template <typename S>
using ParameterList = std::vector<Parameter<S>*>;

using Rng = std::mt19937_64;

template <typename S>
void fill_normal(Matrix<S>& m, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
}

template <typename S>
void fill_uniform(Matrix<S>& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
}

// ---------------------------------------------------------------------------

/// Bias-free k x k convolution as im2col + GEMM.
template <typename S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding)
      : weight_(name + ".weight", out_channels, Index(in_channels) * kernel * kernel),
        in_channels_(in_channels),
        kernel_(kernel),
        stride_(stride),
        padding_(padding) {}

  void init(Rng& rng) {
    // He initialisation over fan-out.
    const double fan_out = double(weight_.value.rows()) * kernel_ * kernel_;
    fill_normal(weight_.value, std::sqrt(2.0 / fan_out), rng);
  }

  int out_size(int in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    require(x.channels() == in_channels_, weight_.name + ": expected " + std::to_string(in_channels_) +
                                              " input channels, got " + std::to_string(x.channels()));
    const int ho = out_size(x.height), wo = out_size(x.width);
    FeatureMap<S> out(static_cast<int>(weight_.value.rows()), x.batch, ho, wo);
    in_batch_ = x.batch;
    in_h_ = x.height;
    in_w_ = x.width;
    if (is_pointwise()) {
      out.data.noalias() = weight_.value * x.data;
      if (mode == Mode::train) cols_ = x.data;
    } else {
      RowMatrix<S> cols = im2col(x, ho, wo);
      out.data.noalias() = weight_.value * cols;
      if (mode == Mode::train) cols_ = std::move(cols);
    }
    return out;
  }

  FeatureMap<S> backward(const FeatureMap<S>& grad_out) {
    require(cols_.size() > 0, weight_.name + ": backward without a training-mode forward");
    weight_.grad.noalias() += grad_out.data * cols_.transpose();
    FeatureMap<S> grad_in(in_channels_, in_batch_, in_h_, in_w_);
    if (is_pointwise()) {
      grad_in.data.noalias() = weight_.value.transpose() * grad_out.data;
    } else {
      RowMatrix<S> d_cols = weight_.value.transpose() * grad_out.data;
      col2im(d_cols, grad_out.height, grad_out.width, grad_in);
    }
    return grad_in;
  }

  void collect(ParameterList<S>& out) { out.push_back(&weight_); }
  Parameter<S>& weight() { return weight_; }

 private:
  bool is_pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }

  RowMatrix<S> im2col(const FeatureMap<S>& x, int ho, int wo) const {
    RowMatrix<S> cols(Index(in_channels_) * kernel_ * kernel_, Index(x.batch) * ho * wo);
    for (int c = 0; c < in_channels_; ++c) {
      const S* src = x.data.row(c).data();
      for (int ky = 0; ky < kernel_; ++ky)
        for (int kx = 0; kx < kernel_; ++kx) {
          S* dst = cols.row((Index(c) * kernel_ + ky) * kernel_ + kx).data();
          for (int n = 0; n < x.batch; ++n) {
            const S* plane = src + Index(n) * x.height * x.width;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              S* row = dst + (Index(n) * ho + oy) * wo;
              if (iy < 0 || iy >= x.height) {
                std::fill(row, row + wo, S(0));
                continue;
              }
              const S* line = plane + Index(iy) * x.width;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ - padding_ + kx;
                row[ox] = (ix < 0 || ix >= x.width) ? S(0) : line[ix];
              }
            }
          }
        }
    }
    return cols;
  }

  void col2im(const RowMatrix<S>& d_cols, int ho, int wo, FeatureMap<S>& grad_in) const {
    for (int c = 0; c < in_channels_; ++c) {
      S* dst = grad_in.data.row(c).data();
      for (int ky = 0; ky < kernel_; ++ky)
        for (int kx = 0; kx < kernel_; ++kx) {
          const S* src = d_cols.row((Index(c) * kernel_ + ky) * kernel_ + kx).data();
          for (int n = 0; n < grad_in.batch; ++n) {
            S* plane = dst + Index(n) * in_h_ * in_w_;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              if (iy < 0 || iy >= in_h_) continue;
              const S* row = src + (Index(n) * ho + oy) * wo;
              S* line = plane + Index(iy) * in_w_;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ - padding_ + kx;
                if (ix >= 0 && ix < in_w_) line[ix] += row[ox];
              }
            }
          }
        }
    }
  }

  Parameter<S> weight_;
  int in_channels_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  RowMatrix<S> cols_;
  int in_batch_ = 0, in_h_ = 0, in_w_ = 0;
};

// ---------------------------------------------------------------------------

template <typename S>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5)
      : gamma_(name + ".gamma", channels, 1),
        beta_(name + ".beta", channels, 1),
        running_mean_(name + ".running_mean", channels, 1, false),
        running_var_(name + ".running_var", channels, 1, false),
        momentum_(momentum),
        eps_(eps) {
    gamma_.value.setOnes();
    running_var_.value.setOnes();
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    FeatureMap<S> out = x;
    const Index count = x.data.cols();
    if (mode == Mode::train) {
      require(count > 1, gamma_.name + ": batch statistics need more than one value per channel");
      Vector<S> mean = x.data.rowwise().mean();
      RowMatrix<S> centered = x.data.colwise() - mean;
      Vector<S> var = centered.rowwise().squaredNorm() / S(count);
      inv_std_ = (var.array() + S(eps_)).rsqrt();
      x_hat_ = centered.array().colwise() * inv_std_.array();
      out.data = (x_hat_.array().colwise() * gamma_.value.col(0).array()).colwise() + beta_.value.col(0).array();
      const S m = S(momentum_);
      running_mean_.value.col(0) = (S(1) - m) * running_mean_.value.col(0) + m * mean;
      running_var_.value.col(0) = (S(1) - m) * running_var_.value.col(0) + m * var * (S(count) / S(count - 1));
    } else {
      Vector<S> inv = (running_var_.value.col(0).array() + S(eps_)).rsqrt();
      Vector<S> scale = gamma_.value.col(0).cwiseProduct(inv);
      Vector<S> shift = beta_.value.col(0) - running_mean_.value.col(0).cwiseProduct(scale);
      out.data = (x.data.array().colwise() * scale.array()).colwise() + shift.array();
    }
    return out;
  }

  FeatureMap<S> backward(const FeatureMap<S>& grad_out) {
    require(x_hat_.size() > 0, gamma_.name + ": backward without a training-mode forward");
    const S count = S(grad_out.data.cols());
    const auto& dy = grad_out.data;
    Vector<S> sum_dy = dy.rowwise().sum();
    Vector<S> sum_dy_xhat = (dy.array() * x_hat_.array()).rowwise().sum();
    gamma_.grad.col(0) += sum_dy_xhat;
    beta_.grad.col(0) += sum_dy;
    FeatureMap<S> grad_in = grad_out;
    Vector<S> k = gamma_.value.col(0).cwiseProduct(inv_std_) / count;
    grad_in.data = ((dy * count).colwise() - sum_dy).array() - x_hat_.array().colwise() * sum_dy_xhat.array();
    grad_in.data = grad_in.data.array().colwise() * k.array();
    return grad_in;
  }

  void collect(ParameterList<S>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  Parameter<S> gamma_, beta_, running_mean_, running_var_;
  double momentum_ = 0.1, eps_ = 1e-5;
  RowMatrix<S> x_hat_;
  Vector<S> inv_std_;
};

// ---------------------------------------------------------------------------

template <typename S>
class Relu {
 public:
  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    FeatureMap<S> out = x;
    out.data = x.data.cwiseMax(S(0));
    if (mode == Mode::train) mask_ = (x.data.array() > S(0)).template cast<S>();
    return out;
  }
  FeatureMap<S> backward(const FeatureMap<S>& grad_out) {
    FeatureMap<S> g = grad_out;
    g.data.array() *= mask_.array();
    return g;
  }

 private:
  RowMatrix<S> mask_;
};

// ---------------------------------------------------------------------------

template <typename S>
class MaxPool2x2 {
 public:
  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    const int ho = x.height / 2, wo = x.width / 2;
    FeatureMap<S> out(x.channels(), x.batch, ho, wo);
    if (mode == Mode::train) argmax_.assign(out.data.size(), 0);
    in_h_ = x.height;
    in_w_ = x.width;
    for (int c = 0; c < x.channels(); ++c)
      for (int n = 0; n < x.batch; ++n)
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx) {
            S best = x.at(n, c, 2 * y, 2 * xx);
            int which = 0;
            for (int k = 1; k < 4; ++k) {
              const S v = x.at(n, c, 2 * y + k / 2, 2 * xx + k % 2);
              if (v > best) best = v, which = k;
            }
            out.at(n, c, y, xx) = best;
            if (mode == Mode::train) argmax_[Index(c) * out.data.cols() + (Index(n) * ho + y) * wo + xx] = which;
          }
    return out;
  }

  FeatureMap<S> backward(const FeatureMap<S>& grad_out) {
    FeatureMap<S> g(grad_out.channels(), grad_out.batch, in_h_, in_w_);
    const int ho = grad_out.height, wo = grad_out.width;
    for (int c = 0; c < grad_out.channels(); ++c)
      for (int n = 0; n < grad_out.batch; ++n)
        for (int y = 0; y < ho; ++y)
          for (int x = 0; x < wo; ++x) {
            const int k = argmax_[Index(c) * grad_out.data.cols() + (Index(n) * ho + y) * wo + x];
            g.at(n, c, 2 * y + k / 2, 2 * x + k % 2) += grad_out.at(n, c, y, x);
          }
    return g;
  }

 private:
  std::vector<int> argmax_;
  int in_h_ = 0, in_w_ = 0;
};

// ---------------------------------------------------------------------------

/// Mean over each plane; returns one row per sample.
template <typename S>
RowMatrix<S> global_avg_pool(const FeatureMap<S>& x) {
  RowMatrix<S> out(x.batch, x.channels());
  const Index plane = x.plane_size();
  for (int n = 0; n < x.batch; ++n) out.row(n) = x.data.middleCols(Index(n) * plane, plane).rowwise().mean().transpose();
  return out;
}

template <typename S>
FeatureMap<S> global_avg_pool_backward(const RowMatrix<S>& grad, int height, int width) {
  FeatureMap<S> g(static_cast<int>(grad.cols()), static_cast<int>(grad.rows()), height, width);
  const Index plane = g.plane_size();
  for (Index n = 0; n < grad.rows(); ++n)
    g.data.middleCols(n * plane, plane) = (grad.row(n).transpose() / S(plane)).replicate(1, plane);
  return g;
}

// ---------------------------------------------------------------------------

/// y = x W + b with W stored [in x out], so a classifier's columns are the
/// per-class weight vectors.
template <typename S>
class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, int in, int out, bool bias = true)
      : weight_(name + ".weight", in, out), bias_(name + ".bias", bias ? out : 0, 1), has_bias_(bias) {}

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(weight_.value.rows()));
    fill_uniform(weight_.value, bound, rng);
    if (has_bias_) fill_uniform(bias_.value, bound, rng);
  }

  RowMatrix<S> forward(const RowMatrix<S>& x, bool keep_input = true) {
    require(x.cols() == weight_.value.rows(), weight_.name + ": input dim " + std::to_string(x.cols()) +
                                                  " != " + std::to_string(weight_.value.rows()));
    RowMatrix<S> y = x * weight_.value;
    if (has_bias_) y.rowwise() += bias_.value.col(0).transpose();
    if (keep_input) input_ = x;
    return y;
  }

  RowMatrix<S> backward(const RowMatrix<S>& grad_out) {
    weight_.grad.noalias() += input_.transpose() * grad_out;
    if (has_bias_) bias_.grad.col(0) += grad_out.colwise().sum().transpose();
    return grad_out * weight_.value.transpose();
  }

  void collect(ParameterList<S>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  Parameter<S>& weight() { return weight_; }
  const Parameter<S>& weight() const { return weight_; }
  Parameter<S>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }
  int in_dim() const { return static_cast<int>(weight_.value.rows()); }
  int out_dim() const { return static_cast<int>(weight_.value.cols()); }

 private:
  Parameter<S> weight_, bias_;
  bool has_bias_ = true;
  RowMatrix<S> input_;
};

// ---------------------------------------------------------------------------

/// conv-bn-relu-conv-bn plus identity or 1x1 projection shortcut, then relu.
template <typename S>
class BasicBlock {
 public:
  BasicBlock(const std::string& name, int in, int out, int stride)
      : conv1_(name + ".conv1", in, out, 3, stride, 1),
        bn1_(name + ".bn1", out),
        conv2_(name + ".conv2", out, out, 3, 1, 1),
        bn2_(name + ".bn2", out),
        projected_(stride != 1 || in != out) {
    if (projected_) {
      short_conv_ = Conv2d<S>(name + ".shortcut.conv", in, out, 1, stride, 0);
      short_bn_ = BatchNorm2d<S>(name + ".shortcut.bn", out);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (projected_) short_conv_.init(rng);
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    FeatureMap<S> h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
    h = bn2_.forward(conv2_.forward(h, mode), mode);
    if (projected_)
      h.data += short_bn_.forward(short_conv_.forward(x, mode), mode).data;
    else
      h.data += x.data;
    return relu2_.forward(h, mode);
  }

  FeatureMap<S> backward(const FeatureMap<S>& grad_out) {
    FeatureMap<S> g = relu2_.backward(grad_out);
    FeatureMap<S> main = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
    if (projected_)
      main.data += short_conv_.backward(short_bn_.backward(g)).data;
    else
      main.data += g.data;
    return main;
  }

  void collect(ParameterList<S>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    if (projected_) {
      short_conv_.collect(out);
      short_bn_.collect(out);
    }
  }

 private:
  Conv2d<S> conv1_;
  BatchNorm2d<S> bn1_;
  Relu<S> relu1_;
  Conv2d<S> conv2_;
  BatchNorm2d<S> bn2_;
  Conv2d<S> short_conv_;
  BatchNorm2d<S> short_bn_;
  Relu<S> relu2_;
  bool projected_;
};

/// conv-bn-relu, the VGG unit.
template <typename S>
class ConvBnRelu {
 public:
  ConvBnRelu(const std::string& name, int in, int out, int stride)
      : conv_(name + ".conv", in, out, 3, stride, 1), bn_(name + ".bn", out) {}

  void init(Rng& rng) { conv_.init(rng); }
  FeatureMap<S> forward(const FeatureMap<S>& x, Mode mode) {
    return relu_.forward(bn_.forward(conv_.forward(x, mode), mode), mode);
  }
  FeatureMap<S> backward(const FeatureMap<S>& g) { return conv_.backward(bn_.backward(relu_.backward(g))); }
  void collect(ParameterList<S>& out) {
    conv_.collect(out);
    bn_.collect(out);
  }

 private:
  Conv2d<S> conv_;
  BatchNorm2d<S> bn_;
  Relu<S> relu_;
};

}  // namespace pckd::nn
