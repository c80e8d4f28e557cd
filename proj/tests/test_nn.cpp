#include <catch2/catch.hpp>

#include "omniquad/conv1d.hpp"
#include "omniquad/nn.hpp"

using namespace omniquad;
using nn::Conv1d;
using nn::Conv1dSpec;
using nn::MatX;
using nn::Mlp;
using nn::MlpSpec;
using nn::TensorList;
using nn::VecX;

namespace {

using Md = MatX<double>;
using Vd = VecX<double>;

// Central finite differences of `loss` with respect to every parameter entry,
// compared against the analytic gradient. Returns the worst relative error.
template <class LossFn>
double fd_gradcheck(TensorList<double>& params, const TensorList<double>& analytic, LossFn loss,
                    double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& tensor = params.tensors[t];
    for (int i = 0; i < tensor.size(); ++i) {
      const double saved = tensor.data()[i];
      tensor.data()[i] = saved + h;
      const double up = loss();
      tensor.data()[i] = saved - h;
      const double down = loss();
      tensor.data()[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic.tensors[t].data()[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Md random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  Md m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("mlp forward basics", "[nn]") {
  SECTION("identity single layer returns its input") {
    Mlp<double> m;
    m.spec = MlpSpec{{3, 3}};
    m.params.tensors = {Md::Identity(3, 3), Md::Zero(3, 1)};
    const Vd x = (Vd(3) << 0.3, -1.2, 2.0).finished();
    REQUIRE(m.forward_one(x) == x);
  }

  SECTION("zero weights return the bias") {
    Mlp<double> m;
    m.spec = MlpSpec{{4, 2}};
    m.params.tensors = {Md::Zero(2, 4), (Md(2, 1) << 0.5, -0.25).finished()};
    const Vd out = m.forward_one(Vd::Ones(4));
    REQUIRE(out[0] == 0.5);
    REQUIRE(out[1] == -0.25);
  }

  SECTION("2-2-1 net matches the hand-computed pass") {
    Mlp<double> m;
    m.spec = MlpSpec{{2, 2, 1}};
    Md w0(2, 2);
    w0 << 0.1, -0.4, 0.7, 0.2;
    Md b0(2, 1);
    b0 << 0.05, -0.1;
    Md w1(1, 2);
    w1 << 1.5, -0.3;
    Md b1(1, 1);
    b1 << 0.02;
    m.params.tensors = {w0, b0, w1, b1};
    const Vd x = (Vd(2) << 0.6, -0.9).finished();
    const double h0 = std::tanh(0.1 * 0.6 + (-0.4) * (-0.9) + 0.05);
    const double h1 = std::tanh(0.7 * 0.6 + 0.2 * (-0.9) + (-0.1));
    const double expected = 1.5 * h0 - 0.3 * h1 + 0.02;
    REQUIRE(m.forward_one(x)[0] == Approx(expected).margin(1e-12));
  }

  SECTION("input dim mismatch is rejected") {
    Rng rng(1);
    auto m = Mlp<double>::init(MlpSpec{{3, 4}}, rng);
    REQUIRE_THROWS_AS(m.forward(Md::Zero(5, 1)), std::invalid_argument);
  }
}

TEST_CASE("mlp backward", "[nn]") {
  Rng rng(7);

  SECTION("linear layer weight grad is the outer product") {
    Mlp<double> m;
    m.spec = MlpSpec{{3, 2}};
    m.params.tensors = {random_matrix(2, 3, rng), Md::Zero(2, 1)};
    Mlp<double>::Cache cache;
    const Md x = random_matrix(3, 1, rng);
    m.forward(x, &cache);
    const Md upstream = random_matrix(2, 1, rng);
    auto grads = m.params.zeros_like();
    const Md dx = m.backward(cache, upstream, grads);
    REQUIRE((grads.tensors[0] - upstream * x.transpose()).cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((grads.tensors[1] - upstream).cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((dx - m.w(0).transpose() * upstream).cwiseAbs().maxCoeff() < 1e-14);
  }

  SECTION("zero upstream grad gives zero grads") {
    auto m = Mlp<double>::init(MlpSpec{{4, 8, 3}}, rng);
    Mlp<double>::Cache cache;
    m.forward(random_matrix(4, 5, rng), &cache);
    auto grads = m.params.zeros_like();
    const Md dx = m.backward(cache, Md::Zero(3, 5), grads);
    REQUIRE(grads.squared_norm() == 0.0);
    REQUIRE(dx.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("4-8-8-3 net matches central finite differences") {
    auto m = Mlp<double>::init(MlpSpec{{4, 8, 8, 3}}, rng);
    const Md x = random_matrix(4, 6, rng);
    const Md u = random_matrix(3, 6, rng);  // fixed upstream weights
    auto loss = [&]() {
      return (m.forward(x).array() * u.array()).sum();
    };
    Mlp<double>::Cache cache;
    m.forward(x, &cache);
    auto grads = m.params.zeros_like();
    m.backward(cache, u, grads);
    REQUIRE(fd_gradcheck(m.params, grads, loss) < 1e-4);
  }

  SECTION("input gradient matches finite differences") {
    auto m = Mlp<double>::init(MlpSpec{{5, 8, 2}}, rng);
    Md x = random_matrix(5, 1, rng);
    const Md u = random_matrix(2, 1, rng);
    Mlp<double>::Cache cache;
    m.forward(x, &cache);
    auto grads = m.params.zeros_like();
    const Md dx = m.backward(cache, u, grads);
    const double h = 1e-6;
    for (int i = 0; i < 5; ++i) {
      const double saved = x(i, 0);
      x(i, 0) = saved + h;
      const double up = (m.forward(x).array() * u.array()).sum();
      x(i, 0) = saved - h;
      const double down = (m.forward(x).array() * u.array()).sum();
      x(i, 0) = saved;
      REQUIRE(dx(i, 0) == Approx((up - down) / (2 * h)).epsilon(1e-5).margin(1e-9));
    }
  }
}

TEST_CASE("adam optimizer", "[nn]") {
  SECTION("first step moves by about lr in the gradient direction") {
    TensorList<double> params;
    params.tensors = {Md::Zero(1, 1)};
    TensorList<double> grads;
    grads.tensors = {(Md(1, 1) << 3.7).finished()};
    nn::Adam<double> opt(params);
    opt.step(params, grads, 1e-3);
    REQUIRE(params.tensors[0](0, 0) == Approx(-1e-3).epsilon(1e-6));
  }

  SECTION("zero grads leave weights unchanged while moments decay") {
    TensorList<double> params;
    params.tensors = {(Md(1, 1) << 1.0).finished()};
    nn::Adam<double> opt(params);
    TensorList<double> g1;
    g1.tensors = {(Md(1, 1) << 2.0).finished()};
    opt.step(params, g1, 1e-3);
    const double after_first = params.tensors[0](0, 0);
    const double m_before = opt.moments1().tensors[0](0, 0);
    TensorList<double> g0 = g1.zeros_like();
    opt.step(params, g0, 0.0);
    REQUIRE(params.tensors[0](0, 0) == after_first);
    REQUIRE(opt.moments1().tensors[0](0, 0) == Approx(0.9 * m_before));
  }

  SECTION("two steps with constant grads match the scalar recursion") {
    const double g = 0.37, lr = 2e-3;
    TensorList<double> params;
    params.tensors = {(Md(1, 1) << 0.5).finished()};
    TensorList<double> grads;
    grads.tensors = {(Md(1, 1) << g).finished()};
    nn::Adam<double> opt(params);
    opt.step(params, grads, lr);
    opt.step(params, grads, lr);

    // Hand-computed recursion.
    double m = 0.0, v = 0.0, w = 0.5;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1.0 - std::pow(0.9, t));
      const double vhat = v / (1.0 - std::pow(0.999, t));
      w -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    }
    REQUIRE(params.tensors[0](0, 0) == Approx(w).margin(1e-12));
  }
}

TEST_CASE("conv1d forward", "[nn]") {
  Rng rng(13);
  Conv1dSpec spec;
  spec.in_channels = 3;
  spec.input_len = 20;
  spec.layers = {{4, 5, 2}, {2, 3, 2}};
  spec.validate();

  SECTION("documented output lengths") {
    REQUIRE(Conv1dSpec::out_len(20, 5, 2) == 8);
    REQUIRE(spec.output_len() == 3);
    REQUIRE(spec.flat_output_dim() == 6);
    // The deployment geometry: 400 steps through kernels 8/5/5, strides 4/2/2.
    Conv1dSpec deploy;
    deploy.in_channels = 128;
    deploy.input_len = 400;
    deploy.layers = {{64, 8, 4}, {32, 5, 2}, {32, 5, 2}};
    deploy.validate();
    REQUIRE(deploy.output_len() == 22);
    REQUIRE(deploy.flat_output_dim() == 32 * 22);
  }

  SECTION("all-zero input with zero bias gives zero output") {
    auto c = Conv1d<double>::init(spec, rng);
    const Md out = c.forward(Md::Zero(3, 20));
    REQUIRE(out.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("averaging kernel maps constant input to a constant") {
    Conv1dSpec s1;
    s1.in_channels = 2;
    s1.input_len = 12;
    s1.layers = {{3, 4, 2}};
    auto c = Conv1d<double>::init(s1, rng);
    c.params.tensors[0].setConstant(1.0 / (2 * 4));  // rows sum to one
    c.params.tensors[1].setZero();
    const double value = 0.23;
    const Md out = c.forward(Md::Constant(2, 12, value));
    REQUIRE(out.rows() == 3);
    REQUIRE(out.cols() == 5);
    // Constant output whose pre-activation equals the input value.
    REQUIRE((out.array() - out(0, 0)).abs().maxCoeff() < 1e-15);
    REQUIRE(std::atanh(out(0, 0)) == Approx(value).margin(1e-12));
  }

  SECTION("matches the naive nested-loop convolution oracle") {
    auto c = Conv1d<double>::init(spec, rng);
    const Md x = random_matrix(3, 20, rng);
    const Md fast = c.forward(x);

    // Oracle: direct convolution, layer by layer, windows anchored to the
    // newest end of the sequence.
    Md in = x;
    int in_ch = spec.in_channels;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      const auto& ls = spec.layers[l];
      const int len = static_cast<int>(in.cols());
      const int n = Conv1dSpec::out_len(len, ls.kernel, ls.stride);
      const int off = len - ((n - 1) * ls.stride + ls.kernel);
      Md out = Md::Zero(ls.out_channels, n);
      for (int o = 0; o < ls.out_channels; ++o)
        for (int j = 0; j < n; ++j) {
          double acc = c.params.tensors[2 * l + 1](o, 0);
          for (int k = 0; k < ls.kernel; ++k)
            for (int ci = 0; ci < in_ch; ++ci)
              acc += c.params.tensors[2 * l](o, k * in_ch + ci) * in(ci, off + j * ls.stride + k);
          out(o, j) = std::tanh(acc);
        }
      in = out;
      in_ch = ls.out_channels;
    }
    REQUIRE((fast - in).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("length mismatch is rejected") {
    auto c = Conv1d<double>::init(spec, rng);
    REQUIRE_THROWS_AS(c.forward(Md::Zero(3, 19)), std::invalid_argument);
    REQUIRE_THROWS_AS(c.forward(Md::Zero(2, 20)), std::invalid_argument);
  }
}

TEST_CASE("conv1d backward matches finite differences", "[nn]") {
  Rng rng(29);
  Conv1dSpec spec;
  spec.in_channels = 3;
  spec.input_len = 18;
  spec.layers = {{4, 5, 2}, {3, 3, 2}};
  auto c = Conv1d<double>::init(spec, rng);
  const Md x = random_matrix(3, 18, rng);
  const Md u = random_matrix(3, 3, rng);

  auto loss = [&]() { return (c.forward(x).array() * u.array()).sum(); };
  Conv1d<double>::Cache cache;
  c.forward(x, &cache);
  auto grads = c.params.zeros_like();
  const Md dx = c.backward(cache, u, grads);
  REQUIRE(fd_gradcheck(c.params, grads, loss) < 1e-4);

  // Input gradient against finite differences as well.
  Md xm = x;
  const double h = 1e-6;
  for (int i = 0; i < 6; ++i) {
    const int r = i % 3, col = (i * 7) % 18;
    const double saved = xm(r, col);
    xm(r, col) = saved + h;
    const double up = (c.forward(xm).array() * u.array()).sum();
    xm(r, col) = saved - h;
    const double down = (c.forward(xm).array() * u.array()).sum();
    xm(r, col) = saved;
    REQUIRE(dx(r, col) == Approx((up - down) / (2 * h)).epsilon(1e-5).margin(1e-9));
  }
}

TEST_CASE("orthogonal init has orthonormal rows or columns", "[nn]") {
  Rng rng(3);
  const Md tall = nn::orthogonal<double>(8, 3, 1.0, rng);
  REQUIRE((tall.transpose() * tall - Md::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
  const Md wide = nn::orthogonal<double>(3, 8, 1.0, rng);
  REQUIRE((wide * wide.transpose() - Md::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
  const Md scaled = nn::orthogonal<double>(4, 4, 2.0, rng);
  REQUIRE((scaled * scaled.transpose() - 4.0 * Md::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-12);
}
