#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "omniquad/config.hpp"
#include "omniquad/policy.hpp"

namespace omniquad {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Single-file, self-describing checkpoint: a fixed magic + version header, a
// JSON manifest (architecture, normalization statistics, config hash, phase
// tag), then one little-endian float32 blob per tensor in manifest order.
// save() also writes a human-readable .json sidecar.
struct Checkpoint {
  static constexpr char kMagic[4] = {'O', 'Q', 'C', 'P'};
  static constexpr std::uint32_t kVersion = 1;

  std::string phase;        // "phase1" | "phase2" | "train_state"
  std::string variant;      // rma | robust | sysid | ltf
  std::string config_hash;
  int obs_dim = kObservationDim;
  int latent_dim = kIntrinsicsDim;
  Eigen::VectorXd obs_mean = Eigen::VectorXd::Zero(kObservationDim);
  Eigen::VectorXd obs_std = Eigen::VectorXd::Ones(kObservationDim);
  long obs_count = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors;

  const Eigen::MatrixXf& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  }

  void add(const std::string& name, const Eigen::MatrixXf& t) { tensors.emplace_back(name, t); }

  void save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["phase"] = phase;
    manifest["variant"] = variant;
    manifest["config_hash"] = config_hash;
    manifest["obs_dim"] = obs_dim;
    manifest["latent_dim"] = latent_dim;
    manifest["obs_norm"] = {{"mean", std::vector<double>(obs_mean.data(), obs_mean.data() + obs_mean.size())},
                            {"std", std::vector<double>(obs_std.data(), obs_std.data() + obs_std.size())},
                            {"count", obs_count}};
    manifest["extra"] = extra;
    auto& tlist = manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors)
      tlist.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});

    const std::string mtext = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(mtext.size()));
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
    if (!out) throw CheckpointError("short write: " + path);
    out.close();

    // Sidecar with the manifest only (no weights), for humans and tools.
    std::ofstream side(path + ".json", std::ios::trunc);
    side << manifest.dump(2) << "\n";
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
      throw CheckpointError("not a checkpoint file: " + path);
    const std::uint32_t version = read_u32(in, path);
    if (version != kVersion)
      throw CheckpointError("checkpoint version mismatch in " + path + ": file has " +
                            std::to_string(version) + ", this build reads " +
                            std::to_string(kVersion));
    const std::uint32_t mlen = read_u32(in, path);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), mlen);
    if (!in) throw CheckpointError("truncated manifest: " + path);
    nlohmann::json manifest = nlohmann::json::parse(mtext);

    Checkpoint c;
    c.phase = manifest.at("phase").get<std::string>();
    c.variant = manifest.at("variant").get<std::string>();
    c.config_hash = manifest.at("config_hash").get<std::string>();
    c.obs_dim = manifest.at("obs_dim").get<int>();
    c.latent_dim = manifest.at("latent_dim").get<int>();
    const auto& norm = manifest.at("obs_norm");
    const auto mean = norm.at("mean").get<std::vector<double>>();
    const auto std_v = norm.at("std").get<std::vector<double>>();
    c.obs_mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<long>(mean.size()));
    c.obs_std = Eigen::Map<const Eigen::VectorXd>(std_v.data(), static_cast<long>(std_v.size()));
    c.obs_count = norm.at("count").get<long>();
    c.extra = manifest.at("extra");
    for (const auto& entry : manifest.at("tensors")) {
      Eigen::MatrixXf t(entry.at("rows").get<long>(), entry.at("cols").get<long>());
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
      if (!in) throw CheckpointError("truncated weight blob: " + path);
      c.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return c;
  }

 private:
  static void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  static std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError("truncated header: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
};

// ---------------------------------------------------------------------------
// Packing of the learned components into named checkpoint tensors.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void pack_tensors(Checkpoint& c, const std::string& prefix, const nn::TensorList<S>& params) {
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const std::string name =
        prefix + (i % 2 == 0 ? ".w" : ".b") + std::to_string(i / 2);
    c.add(name, params.tensors[i].template cast<float>());
  }
}

template <class S>
void unpack_tensors(const Checkpoint& c, const std::string& prefix, nn::TensorList<S>& params) {
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const std::string name =
        prefix + (i % 2 == 0 ? ".w" : ".b") + std::to_string(i / 2);
    const Eigen::MatrixXf& t = c.tensor(name);
    if (t.rows() != params.tensors[i].rows() || t.cols() != params.tensors[i].cols())
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " +
                            std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                            ", expected " + std::to_string(params.tensors[i].rows()) + "x" +
                            std::to_string(params.tensors[i].cols()));
    params.tensors[i] = t.template cast<S>();
  }
}

inline nlohmann::json range_to_json(const Range& r) { return {r.lo, r.hi}; }
inline Range range_from_json(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline nlohmann::json range_table_to_json(const RangeTable& t) {
  return {{"mass", range_to_json(t.mass)},
          {"arm_length", range_to_json(t.arm_length)},
          {"inertia_xy", range_to_json(t.inertia_xy)},
          {"inertia_z", range_to_json(t.inertia_z)},
          {"kappa", range_to_json(t.kappa)},
          {"payload_pct", range_to_json(t.payload_pct)},
          {"payload_loc_pct", range_to_json(t.payload_loc_pct)},
          {"motor_constant", range_to_json(t.motor_constant)},
          {"body_drag", range_to_json(t.body_drag)},
          {"max_motor_speed", range_to_json(t.max_motor_speed)}};
}

inline RangeTable range_table_from_json(const nlohmann::json& j) {
  RangeTable t;
  t.mass = range_from_json(j.at("mass"));
  t.arm_length = range_from_json(j.at("arm_length"));
  t.inertia_xy = range_from_json(j.at("inertia_xy"));
  t.inertia_z = range_from_json(j.at("inertia_z"));
  t.kappa = range_from_json(j.at("kappa"));
  t.payload_pct = range_from_json(j.at("payload_pct"));
  t.payload_loc_pct = range_from_json(j.at("payload_loc_pct"));
  t.motor_constant = range_from_json(j.at("motor_constant"));
  t.body_drag = range_from_json(j.at("body_drag"));
  t.max_motor_speed = range_from_json(j.at("max_motor_speed"));
  return t;
}

}  // namespace detail

// A loadable learned controller: base policy, optional encoder / value head /
// adaptation module, the frozen observation statistics and the environment
// normalization ranges that were active at training time. Inference objects
// are immutable after load. The value head additionally consumes the
// privileged (training-only) state block with its own normalizer.
struct PolicyBundle {
  PolicyVariant variant = PolicyVariant::Rma;
  GaussianPolicy<float> pi;
  Encoder<float> mu;
  nn::Mlp<float> value;
  AdaptationModule<float> phi;
  bool has_mu = false;
  bool has_value = false;
  bool has_phi = false;
  ObsNormalizer obs_norm;
  ObsNormalizer priv_norm{kPrivilegedDim};
  RangeTable e_norm_ranges;  // test-regime rows used to normalize e
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();

  static PolicyBundle init(PolicyVariant variant, Rng& rng, double log_std_init = -1.0,
                           double action_bias = 0.0) {
    const VariantInfo info = variant_info(variant);
    PolicyBundle b;
    b.variant = variant;
    b.pi = GaussianPolicy<float>::init(info.obs_dim, info.latent_dim, rng, log_std_init,
                                       action_bias);
    if (variant == PolicyVariant::Rma) {
      b.mu = Encoder<float>::init(rng);
      b.has_mu = true;
    }
    b.value = nn::Mlp<float>::init(
        nn::MlpSpec{{info.obs_dim + info.latent_dim + kPrivilegedDim, 256, 256, 256, 1}}, rng,
        std::sqrt(2.0), 1.0);
    b.has_value = true;
    b.obs_norm = ObsNormalizer(info.obs_dim);
    return b;
  }

  void attach_phi(Rng& rng) {
    phi = AdaptationModule<float>::init(pi.latent_dim, rng);
    has_phi = true;
  }

  Checkpoint to_checkpoint(const std::string& phase) const {
    Checkpoint c;
    c.phase = phase;
    c.variant = variant_name(variant);
    c.config_hash = config_hash;
    c.obs_dim = pi.obs_dim;
    c.latent_dim = pi.latent_dim;
    c.obs_mean = obs_norm.mean();
    c.obs_std = obs_norm.std();
    c.obs_count = obs_norm.count();
    c.extra = extra;
    c.extra["e_norm_ranges"] = detail::range_table_to_json(e_norm_ranges);
    c.extra["omega_scale"] = kOmegaScale;
    c.extra["history_len"] = kHistoryLen;
    {
      const Eigen::VectorXd pm = priv_norm.mean(), ps = priv_norm.std();
      c.extra["priv_norm"] = {
          {"mean", std::vector<double>(pm.data(), pm.data() + pm.size())},
          {"std", std::vector<double>(ps.data(), ps.data() + ps.size())},
          {"count", priv_norm.count()}};
    }
    detail::pack_tensors(c, "pi", pi.net.params);
    detail::pack_tensors(c, "pi.log_std", pi.log_std);
    if (has_mu) detail::pack_tensors(c, "mu", mu.net.params);
    if (has_value) detail::pack_tensors(c, "value", value.params);
    if (has_phi) {
      detail::pack_tensors(c, "phi.embed", phi.embed.params);
      detail::pack_tensors(c, "phi.conv", phi.conv.params);
      detail::pack_tensors(c, "phi.head", phi.head.params);
    }
    return c;
  }

  static PolicyVariant variant_from_name(const std::string& name) {
    if (name == "rma") return PolicyVariant::Rma;
    if (name == "robust") return PolicyVariant::Robust;
    if (name == "sysid") return PolicyVariant::Sysid;
    if (name == "ltf") return PolicyVariant::Ltf;
    throw CheckpointError("unknown policy variant '" + name + "'");
  }

  static PolicyBundle from_checkpoint(const Checkpoint& c) {
    const PolicyVariant variant = variant_from_name(c.variant);
    const VariantInfo info = variant_info(variant);
    if (c.obs_dim != info.obs_dim || c.latent_dim != info.latent_dim)
      throw CheckpointError("checkpoint architecture mismatch: variant '" + c.variant +
                            "' expects obs " + std::to_string(info.obs_dim) + " latent " +
                            std::to_string(info.latent_dim));
    Rng scratch(0);
    PolicyBundle b = init(variant, scratch);
    detail::unpack_tensors(c, "pi", b.pi.net.params);
    detail::unpack_tensors(c, "pi.log_std", b.pi.log_std);
    if (variant == PolicyVariant::Rma) detail::unpack_tensors(c, "mu", b.mu.net.params);
    b.has_mu = variant == PolicyVariant::Rma;
    b.has_value = true;
    try {
      detail::unpack_tensors(c, "value", b.value.params);
    } catch (const CheckpointError&) {
      b.has_value = false;  // deployment checkpoints may drop the value head
    }
    b.has_phi = c.phase == "phase2";
    if (b.has_phi) {
      b.phi = AdaptationModule<float>::init(b.pi.latent_dim, scratch);
      detail::unpack_tensors(c, "phi.embed", b.phi.embed.params);
      detail::unpack_tensors(c, "phi.conv", b.phi.conv.params);
      detail::unpack_tensors(c, "phi.head", b.phi.head.params);
    }
    b.obs_norm = ObsNormalizer(c.obs_dim);
    b.obs_norm.set_stats(c.obs_mean, c.obs_std, c.obs_count);
    b.obs_norm.freeze();
    if (c.extra.contains("priv_norm")) {
      const auto& pn = c.extra.at("priv_norm");
      const auto mean = pn.at("mean").get<std::vector<double>>();
      const auto std_v = pn.at("std").get<std::vector<double>>();
      b.priv_norm = ObsNormalizer(static_cast<int>(mean.size()));
      b.priv_norm.set_stats(
          Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<long>(mean.size())),
          Eigen::Map<const Eigen::VectorXd>(std_v.data(), static_cast<long>(std_v.size())),
          pn.at("count").get<long>());
      b.priv_norm.freeze();
    }
    b.e_norm_ranges = detail::range_table_from_json(c.extra.at("e_norm_ranges"));
    b.config_hash = c.config_hash;
    b.extra = c.extra;
    return b;
  }
};

}  // namespace omniquad
