#pragma once

#include <deque>

#include "omniquad/conv1d.hpp"
#include "omniquad/dynamics.hpp"
#include "omniquad/nn.hpp"

namespace omniquad {

inline constexpr int kIntrinsicsDim = 6;
inline constexpr int kActionDim = 4;
inline constexpr int kHistoryLen = 400;
inline constexpr int kEmbedDim = 128;

// Training-only critic side input: undelayed kinematics, motor speeds and the
// goal offset. Never part of the deployed policy's interface.
inline constexpr int kPrivilegedDim = 22;

// Fixed global action scale: raw in [-1,1] maps to [0, kOmegaScale] rad/s on
// every platform (the simulator clamps at the actuator limit). A platform-
// independent action semantic is what forces the intrinsics to carry the
// platform, which is the adaptation mechanism.
inline constexpr double kOmegaScale = 5000.0;

inline Vec4 motor_speed_from_raw(const Vec4& raw) {
  return 0.5 * (raw.array() + 1.0) * kOmegaScale;
}

// The learned controller variants share one architecture and differ only in
// what they see: observation width and the latent fed next to it.
enum class PolicyVariant { Rma, Robust, Sysid, Ltf };

struct VariantInfo {
  int obs_dim = kObservationDim;
  int latent_dim = kIntrinsicsDim;
};

inline VariantInfo variant_info(PolicyVariant v) {
  switch (v) {
    case PolicyVariant::Rma: return {kObservationDim, kIntrinsicsDim};
    case PolicyVariant::Robust: return {kObservationDim, 0};
    case PolicyVariant::Sysid: return {kObservationDim, QuadParams::kEnvDim};
    case PolicyVariant::Ltf: return {kObservationDim + 4, 0};
  }
  return {};
}

inline const char* variant_name(PolicyVariant v) {
  switch (v) {
    case PolicyVariant::Rma: return "rma";
    case PolicyVariant::Robust: return "robust";
    case PolicyVariant::Sysid: return "sysid";
    case PolicyVariant::Ltf: return "ltf";
  }
  return "?";
}

// Running per-dimension mean/std of the raw observation, Welford-updated
// batch by batch during Phase I and frozen afterwards.
class ObsNormalizer {
 public:
  ObsNormalizer() : ObsNormalizer(kObservationDim) {}
  explicit ObsNormalizer(int dim)
      : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

  int dim() const { return static_cast<int>(mean_.size()); }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  long count() const { return count_; }

  void update(const Eigen::VectorXd& x) {
    if (frozen_) return;
    ++count_;
    exact_std_.resize(0);
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta.cwiseProduct(x - mean_);
  }

  Eigen::VectorXd mean() const { return mean_; }
  Eigen::VectorXd std() const {
    if (exact_std_.size() > 0) return exact_std_;
    if (count_ < 2) return Eigen::VectorXd::Ones(mean_.size());
    return (m2_ / static_cast<double>(count_ - 1)).cwiseMax(1e-8).cwiseSqrt();
  }

  // Restores statistics exactly as serialized; the std is kept verbatim so a
  // save/load cycle is bit-stable.
  void set_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& std, long count) {
    mean_ = mean;
    exact_std_ = std;
    m2_ = std.array().square().matrix() * static_cast<double>(std::max<long>(count - 1, 1));
    count_ = count;
  }

  // Normalized, clipped observation ready for the networks.
  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const {
    if (count_ < 2) return x.cwiseMax(-kClip).cwiseMin(kClip);
    return ((x - mean_).cwiseQuotient(std())).cwiseMax(-kClip).cwiseMin(kClip);
  }

  static constexpr double kClip = 10.0;

 private:
  Eigen::VectorXd mean_, m2_;
  Eigen::VectorXd exact_std_;
  long count_ = 0;
  bool frozen_ = false;
};

// Environment factor encoder mu: normalized 18-dim e to the 6-dim intrinsics.
template <class S>
struct Encoder {
  nn::Mlp<S> net;

  static Encoder init(Rng& rng) {
    Encoder e;
    e.net = nn::Mlp<S>::init(nn::MlpSpec{{QuadParams::kEnvDim, 128, kIntrinsicsDim}}, rng,
                             std::sqrt(2.0), 1.0);
    return e;
  }

  nn::VecX<S> encode(const nn::VecX<S>& e_norm) const { return net.forward_one(e_norm); }
};

enum class ActMode { Stochastic, Deterministic };

struct ActionSample {
  Vec4 raw = Vec4::Zero();       // in [-1,1], what the environment consumes
  Vec4 pre_tanh = Vec4::Zero();  // Gaussian sample before squashing
  double log_prob = 0.0;         // Gaussian log density of pre_tanh
  Vec4 motor_speeds = Vec4::Zero();
};

// Base policy pi: 3-layer 256-wide MLP over concat(observation, latent) with
// a state-independent learned log-std and tanh squashing. Stored log-probs
// are the Gaussian density of the pre-tanh sample; the tanh correction
// cancels in PPO ratios because the sample itself is kept.
template <class S>
struct GaussianPolicy {
  nn::Mlp<S> net;
  nn::TensorList<S> log_std;  // one (kActionDim x 1) tensor
  int obs_dim = kObservationDim;
  int latent_dim = kIntrinsicsDim;

  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 1.0;

  // output_bias shifts the initial pre-tanh mean so the policy starts near a
  // plausible collective operating point instead of mid-scale.
  static GaussianPolicy init(int obs_dim, int latent_dim, Rng& rng, double log_std_init = -1.0,
                             double output_bias = 0.0) {
    GaussianPolicy p;
    p.obs_dim = obs_dim;
    p.latent_dim = latent_dim;
    p.net = nn::Mlp<S>::init(nn::MlpSpec{{obs_dim + latent_dim, 256, 256, 256, kActionDim}}, rng,
                             std::sqrt(2.0), 0.01);
    p.net.params.tensors.back().setConstant(static_cast<S>(output_bias));
    p.log_std.tensors = {nn::MatX<S>::Constant(kActionDim, 1, static_cast<S>(log_std_init))};
    return p;
  }

  void clamp_log_std() {
    log_std.tensors[0] = log_std.tensors[0]
                             .cwiseMax(static_cast<S>(kLogStdMin))
                             .cwiseMin(static_cast<S>(kLogStdMax));
  }

  nn::VecX<S> concat_input(const nn::VecX<S>& x, const nn::VecX<S>& z) const {
    nn::VecX<S> in(obs_dim + latent_dim);
    in.head(obs_dim) = x;
    if (latent_dim > 0) in.tail(latent_dim) = z;
    return in;
  }

  ActionSample act(const nn::VecX<S>& x, const nn::VecX<S>& z, ActMode mode, Rng* rng) const {
    const nn::VecX<S> mean = net.forward_one(concat_input(x, z));
    ActionSample a;
    if (mode == ActMode::Deterministic) {
      for (int i = 0; i < kActionDim; ++i) {
        a.pre_tanh[i] = static_cast<double>(mean[i]);
        a.raw[i] = std::tanh(a.pre_tanh[i]);
      }
      a.log_prob = 0.0;
    } else {
      constexpr double kLog2Pi = 1.8378770664093453;
      a.log_prob = 0.0;
      for (int i = 0; i < kActionDim; ++i) {
        const double ls = static_cast<double>(log_std.tensors[0](i, 0));
        const double std = std::exp(ls);
        const double noise = rng->normal();
        a.pre_tanh[i] = static_cast<double>(mean[i]) + std * noise;
        a.raw[i] = std::tanh(a.pre_tanh[i]);
        a.log_prob += -0.5 * noise * noise - ls - 0.5 * kLog2Pi;
      }
    }
    a.motor_speeds = motor_speed_from_raw(a.raw);
    return a;
  }
};

// Ring buffer of the latest 400 normalized (observation, raw action) pairs,
// zero-padded until enough steps have elapsed.
class HistoryBuffer {
 public:
  static constexpr int kPairDim = kObservationDim + kActionDim;  // 27

  HistoryBuffer() { clear(); }

  void clear() {
    data_.setZero(kPairDim, kHistoryLen);
    head_ = 0;
  }

  void push(const Eigen::VectorXd& obs_norm, const Vec4& raw_action) {
    Eigen::Matrix<float, kPairDim, 1> col;
    col.head<kObservationDim>() = obs_norm.cast<float>();
    col.tail<kActionDim>() = raw_action.cast<float>();
    data_.col(head_) = col;
    head_ = (head_ + 1) % kHistoryLen;
  }

  // Columns ordered oldest to newest.
  Eigen::MatrixXf window() const {
    Eigen::MatrixXf out(kPairDim, kHistoryLen);
    const int tail = kHistoryLen - head_;
    out.leftCols(tail) = data_.rightCols(tail);
    if (head_ > 0) out.rightCols(head_) = data_.leftCols(head_);
    return out;
  }

 private:
  Eigen::MatrixXf data_;  // columns in ring order
  int head_ = 0;
};

// Adaptation module phi: per-pair linear embedding to 128 dims, a 3-layer
// strided 1-D CNN across the 400 steps, then a linear head to the latent.
template <class S>
struct AdaptationModule {
  nn::Mlp<S> embed;     // kPairDim -> kEmbedDim, linear
  nn::Conv1d<S> conv;   // kEmbedDim channels x 400 -> 32 x 22
  nn::Mlp<S> head;      // flattened conv output -> latent_dim, linear
  int latent_dim = kIntrinsicsDim;

  static nn::Conv1dSpec conv_spec() {
    nn::Conv1dSpec s;
    s.in_channels = kEmbedDim;
    s.input_len = kHistoryLen;
    s.layers = {{64, 8, 4}, {32, 5, 2}, {32, 5, 2}};
    return s;
  }

  static AdaptationModule init(int latent_dim, Rng& rng) {
    AdaptationModule m;
    m.latent_dim = latent_dim;
    m.embed = nn::Mlp<S>::init(nn::MlpSpec{{HistoryBuffer::kPairDim, kEmbedDim}}, rng,
                               std::sqrt(2.0), std::sqrt(2.0));
    m.conv = nn::Conv1d<S>::init(conv_spec(), rng);
    m.head = nn::Mlp<S>::init(nn::MlpSpec{{conv_spec().flat_output_dim(), latent_dim}}, rng,
                              std::sqrt(2.0), 1.0);
    return m;
  }

  struct Cache {
    typename nn::Mlp<S>::Cache embed_cache;
    typename nn::Conv1d<S>::Cache conv_cache;
    typename nn::Mlp<S>::Cache head_cache;
  };

  // window is (kPairDim x kHistoryLen), columns oldest to newest.
  nn::VecX<S> forward(const nn::MatX<S>& window, Cache* cache = nullptr) const {
    const nn::MatX<S> emb = embed.forward(window, cache ? &cache->embed_cache : nullptr);
    const nn::MatX<S> feat = conv.forward(emb, cache ? &cache->conv_cache : nullptr);
    const nn::MatX<S> flat = Eigen::Map<const nn::MatX<S>>(feat.data(), feat.size(), 1);
    return head.forward(flat, cache ? &cache->head_cache : nullptr);
  }

  // Accumulates into per-part gradient lists.
  void backward(const Cache& cache, const nn::VecX<S>& d_latent, nn::TensorList<S>& embed_grads,
                nn::TensorList<S>& conv_grads, nn::TensorList<S>& head_grads) const {
    const nn::MatX<S> d_flat = head.backward(cache.head_cache, d_latent, head_grads);
    const auto& feat = cache.conv_cache.acts.back();
    const nn::MatX<S> d_feat = Eigen::Map<const nn::MatX<S>>(d_flat.data(), feat.rows(), feat.cols());
    const nn::MatX<S> d_emb = conv.backward(cache.conv_cache, d_feat, conv_grads);
    embed.backward(cache.embed_cache, d_emb, embed_grads);
  }
};

}  // namespace omniquad
