#pragma once

#include "omniquad/nn.hpp"

// Strided 1-D convolution stack over a (channels x time) input, implemented
// as im2col + GEMM. Valid padding, tanh activations on every conv layer.
// Windows are aligned to the newest end of the sequence: when the length does
// not divide evenly the leftover columns are dropped at the oldest edge, so
// the most recent timesteps always stay inside the receptive field.

namespace omniquad::nn {

struct Conv1dSpec {
  struct Layer {
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
  };
  int in_channels = 0;
  int input_len = 0;
  std::vector<Layer> layers;

  static int out_len(int in_len, int kernel, int stride) {
    return (in_len - kernel) / stride + 1;
  }

  int output_len() const {
    int len = input_len;
    for (const auto& l : layers) len = out_len(len, l.kernel, l.stride);
    return len;
  }

  int output_channels() const { return layers.back().out_channels; }
  int flat_output_dim() const { return output_channels() * output_len(); }

  void validate() const {
    if (in_channels <= 0 || input_len <= 0 || layers.empty())
      throw std::invalid_argument("Conv1dSpec: bad shape");
    int len = input_len;
    for (const auto& l : layers) {
      if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0)
        throw std::invalid_argument("Conv1dSpec: bad layer");
      if (len < l.kernel) throw std::invalid_argument("Conv1dSpec: sequence shorter than kernel");
      len = out_len(len, l.kernel, l.stride);
    }
    if (len < 1) throw std::invalid_argument("Conv1dSpec: empty output");
  }
};

template <class S>
struct Conv1d {
  Conv1dSpec spec;
  TensorList<S> params;  // per layer: w [out_ch x in_ch*kernel], b [out_ch x 1]

  const MatX<S>& w(int l) const { return params.tensors[2 * static_cast<std::size_t>(l)]; }
  const MatX<S>& b(int l) const { return params.tensors[2 * static_cast<std::size_t>(l) + 1]; }

  static Conv1d init(const Conv1dSpec& spec, Rng& rng, double gain = std::sqrt(2.0)) {
    spec.validate();
    Conv1d c;
    c.spec = spec;
    int ch = spec.in_channels;
    for (const auto& l : spec.layers) {
      c.params.tensors.push_back(orthogonal<S>(l.out_channels, ch * l.kernel, gain, rng));
      c.params.tensors.push_back(MatX<S>::Zero(l.out_channels, 1));
      ch = l.out_channels;
    }
    return c;
  }

  struct Cache {
    std::vector<MatX<S>> patches;  // im2col input of each layer
    std::vector<MatX<S>> acts;     // post-tanh output of each layer
  };

  // x is (in_channels x input_len); returns (out_channels x output_len).
  MatX<S> forward(const MatX<S>& x, Cache* cache = nullptr) const {
    if (x.rows() != spec.in_channels || x.cols() != spec.input_len)
      throw std::invalid_argument("Conv1d::forward: input shape mismatch");
    if (cache) {
      cache->patches.clear();
      cache->acts.clear();
    }
    MatX<S> a = x;
    for (int li = 0; li < static_cast<int>(spec.layers.size()); ++li) {
      const auto& l_spec = spec.layers[static_cast<std::size_t>(li)];
      MatX<S> p = im2col(a, l_spec.kernel, l_spec.stride);
      MatX<S> z = ((w(li) * p).colwise() + b(li).col(0)).array().tanh();
      if (cache) {
        cache->patches.push_back(std::move(p));
        cache->acts.push_back(z);
      }
      a = std::move(z);
    }
    return a;
  }

  MatX<S> flat_forward(const MatX<S>& x, Cache* cache = nullptr) const {
    MatX<S> out = forward(x, cache);
    return Eigen::Map<MatX<S>>(out.data(), out.size(), 1);
  }

  // upstream is dLoss/dOutput with the output's (channels x len) shape.
  // Returns dLoss/dInput.
  MatX<S> backward(const Cache& cache, const MatX<S>& upstream, TensorList<S>& grads) const {
    MatX<S> d = upstream;
    for (int l = static_cast<int>(spec.layers.size()) - 1; l >= 0; --l) {
      const auto& l_spec = spec.layers[static_cast<std::size_t>(l)];
      const auto& act = cache.acts[static_cast<std::size_t>(l)];
      MatX<S> dz = (d.array() * (1.0 - act.array().square())).matrix();
      grads.tensors[2 * static_cast<std::size_t>(l)].noalias() +=
          dz * cache.patches[static_cast<std::size_t>(l)].transpose();
      grads.tensors[2 * static_cast<std::size_t>(l) + 1].col(0).noalias() += dz.rowwise().sum();
      const MatX<S> dp = w(l).transpose() * dz;
      const int in_len = l == 0 ? spec.input_len : static_cast<int>(cache.acts[static_cast<std::size_t>(l - 1)].cols());
      const int in_ch = l == 0 ? spec.in_channels : spec.layers[static_cast<std::size_t>(l - 1)].out_channels;
      d = col2im(dp, in_ch, in_len, l_spec.kernel, l_spec.stride);
    }
    return d;
  }

  static int align_offset(int len, int kernel, int stride) {
    const int n = Conv1dSpec::out_len(len, kernel, stride);
    return len - ((n - 1) * stride + kernel);
  }

  static MatX<S> im2col(const MatX<S>& x, int kernel, int stride) {
    const int ch = static_cast<int>(x.rows());
    const int len = static_cast<int>(x.cols());
    const int n = Conv1dSpec::out_len(len, kernel, stride);
    const int off = align_offset(len, kernel, stride);
    MatX<S> p(ch * kernel, n);
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < kernel; ++k) p.block(k * ch, j, ch, 1) = x.col(off + j * stride + k);
    return p;
  }

  static MatX<S> col2im(const MatX<S>& dp, int channels, int len, int kernel, int stride) {
    MatX<S> dx = MatX<S>::Zero(channels, len);
    const int n = static_cast<int>(dp.cols());
    const int off = align_offset(len, kernel, stride);
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < kernel; ++k)
        dx.col(off + j * stride + k) += dp.block(k * channels, j, channels, 1);
    return dx;
  }
};

}  // namespace omniquad::nn
