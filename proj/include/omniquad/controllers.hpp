#pragma once

#include <functional>
#include <memory>

#include "omniquad/checkpoint.hpp"
#include "omniquad/distill.hpp"
#include "omniquad/l1.hpp"
#include "omniquad/pid.hpp"

namespace omniquad {

// Evaluation-facing controller: one instance per episode, owning only
// per-episode state. act() calls env.observe() exactly once per step.
class Controller {
 public:
  virtual ~Controller() = default;

  struct Action {
    Vec4 motor_cmd = Vec4::Zero();  // rad/s
    bool use_raw = false;
    Vec4 raw = Vec4::Zero();        // in [-1,1], when the policy produced one
  };

  virtual void reset(const QuadEnv& env) = 0;
  virtual Action act(QuadEnv& env) = 0;
  virtual bool has_latent() const { return false; }
  virtual Eigen::VectorXf last_latent() const { return {}; }
};

// Any checkpointed policy: the latent source follows what the checkpoint
// carries (adaptation module for phase2, the privileged environment vector
// for phase1 latent variants, nothing for the blind baselines).
class LearnedController : public Controller {
 public:
  explicit LearnedController(std::shared_ptr<const PolicyBundle> bundle)
      : bundle_(std::move(bundle)), en_(bundle_->e_norm_ranges) {
    if (bundle_->has_phi)
      source_ = LatentSource::Phi;
    else if (bundle_->pi.latent_dim > 0)
      source_ = LatentSource::TrueEnv;
    else
      source_ = LatentSource::None;
  }

  void reset(const QuadEnv&) override {
    hist_.clear();
    last_latent_.resize(0);
  }

  Action act(QuadEnv& env) override {
    const bool ltf = bundle_->variant == PolicyVariant::Ltf;
    const ObsPack pack = env.observe(ltf);
    const Eigen::VectorXd x_norm_d = bundle_->obs_norm.normalize(pack.x_aug);
    const Eigen::VectorXf x = x_norm_d.cast<float>();
    Eigen::VectorXf z;
    switch (source_) {
      case LatentSource::TrueEnv:
        z = teacher_latent(*bundle_, en_, env.params());
        break;
      case LatentSource::Phi:
        z = bundle_->phi.forward(hist_.window());
        break;
      case LatentSource::None:
        break;
    }
    last_latent_ = z;
    const ActionSample a = bundle_->pi.act(x, z, ActMode::Deterministic, nullptr);
    if (source_ == LatentSource::Phi) hist_.push(x_norm_d.head<kObservationDim>(), a.raw);
    Action out;
    out.use_raw = true;
    out.raw = a.raw;
    out.motor_cmd = a.motor_speeds;
    return out;
  }

  bool has_latent() const override { return source_ != LatentSource::None; }
  Eigen::VectorXf last_latent() const override { return last_latent_; }
  const PolicyBundle& bundle() const { return *bundle_; }

 private:
  enum class LatentSource { TrueEnv, Phi, None };
  std::shared_ptr<const PolicyBundle> bundle_;
  EnvNormalizer en_;
  LatentSource source_;
  HistoryBuffer hist_;
  Eigen::VectorXf last_latent_;
};

// Simplified L1 on the nominal (median test-range) model. Reads the true
// simulator state; adaptation can be disabled to obtain the bare nominal
// inversion controller.
class L1BaselineController : public Controller {
 public:
  L1BaselineController(const QuadParams& nominal, const HighLevelGains& hl, double motor_tau,
                       double dt, bool adaptation_on = true, const L1Gains& gains = {})
      : nominal_(nominal), hl_(hl), gains_(gains), motor_tau_(motor_tau), dt_(dt),
        adaptation_on_(adaptation_on) {}

  void reset(const QuadEnv&) override {
    state_ = L1State{};
    state_.adaptation_on = adaptation_on_;
  }

  Action act(QuadEnv& env) override {
    env.observe(false);  // metric commands come from the canonical pipeline
    StateSnapshot m = env.state().snapshot();
    Action out;
    out.motor_cmd = l1_step(state_, m, env.goal(), nominal_, hl_, gains_, motor_tau_, dt_);
    return out;
  }

  const L1State& l1_state() const { return state_; }

 private:
  QuadParams nominal_;
  HighLevelGains hl_;
  L1Gains gains_;
  double motor_tau_, dt_;
  bool adaptation_on_;
  L1State state_;
};

// Per-platform tuned PID with model-based allocation; reads the true state
// and the episode's true platform parameters.
class PidBaselineController : public Controller {
 public:
  explicit PidBaselineController(double dt, const PidGains& gains = {}) : dt_(dt), gains_(gains) {}

  void reset(const QuadEnv& env) override {
    pid_ = std::make_unique<PidController>(env.params(), gains_);
    pid_->reset();
  }

  Action act(QuadEnv& env) override {
    env.observe(false);
    Action out;
    out.motor_cmd = pid_->motor_command(env.state(), env.goal(), dt_);
    return out;
  }

 private:
  double dt_;
  PidGains gains_;
  std::unique_ptr<PidController> pid_;
};

using ControllerFactory = std::function<std::unique_ptr<Controller>()>;

inline const std::vector<std::string>& known_controllers() {
  static const std::vector<std::string> names = {"rma",   "expert", "robust", "ltf",
                                                 "sysid", "l1",     "l1-off", "pid"};
  return names;
}

// Builds a per-episode controller factory. Learned controllers need the
// matching checkpoint; l1/l1-off/pid are classical.
inline ControllerFactory make_controller_factory(const std::string& name,
                                                 const std::string& checkpoint_path,
                                                 const Config& cfg,
                                                 const PidGains& pid_gains = {}) {
  auto unknown = [&]() -> std::runtime_error {
    std::string msg = "unknown controller '" + name + "'; available:";
    for (const auto& n : known_controllers()) msg += " " + n;
    return std::runtime_error(msg);
  };

  if (name == "l1" || name == "l1-off") {
    const QuadParams nominal = nominal_params(cfg.ranges, Regime::Test);
    const bool on = name == "l1";
    const HighLevelGains hl = cfg.highlevel;
    const double tau = cfg.sim.motor_tau, dt = cfg.sim.dt;
    return [nominal, hl, tau, dt, on] {
      return std::make_unique<L1BaselineController>(nominal, hl, tau, dt, on);
    };
  }
  if (name == "pid") {
    const double dt = cfg.sim.dt;
    return [dt, pid_gains] { return std::make_unique<PidBaselineController>(dt, pid_gains); };
  }

  bool is_known = false;
  for (const auto& n : known_controllers()) is_known |= n == name;
  if (!is_known) throw unknown();

  if (checkpoint_path.empty())
    throw std::runtime_error("controller '" + name + "' needs --checkpoint");
  auto bundle = std::make_shared<PolicyBundle>(
      PolicyBundle::from_checkpoint(Checkpoint::load(checkpoint_path)));

  const std::string variant = variant_name(bundle->variant);
  auto require = [&](bool ok, const std::string& what) {
    if (!ok)
      throw std::runtime_error("controller '" + name + "' needs " + what + ", checkpoint is '" +
                               variant + "' phase " + (bundle->has_phi ? "2" : "1"));
  };
  if (name == "rma") require(bundle->variant == PolicyVariant::Rma && bundle->has_phi,
                             "a phase2 rma checkpoint");
  if (name == "expert") require(bundle->variant == PolicyVariant::Rma && bundle->has_mu,
                                "a phase1 rma checkpoint");
  if (name == "robust") require(bundle->variant == PolicyVariant::Robust, "a robust checkpoint");
  if (name == "ltf") require(bundle->variant == PolicyVariant::Ltf, "an ltf checkpoint");
  if (name == "sysid") require(bundle->variant == PolicyVariant::Sysid, "a sysid checkpoint");
  if (name == "expert") {
    // Deploy the phase1 policy with the privileged latent even when the
    // checkpoint also carries phi.
    auto expert = std::make_shared<PolicyBundle>(*bundle);
    expert->has_phi = false;
    bundle = expert;
  }
  return [bundle] { return std::make_unique<LearnedController>(bundle); };
}

}  // namespace omniquad
