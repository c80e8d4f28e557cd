#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "omniquad/checkpoint.hpp"
#include "omniquad/config.hpp"

using namespace omniquad;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("toml subset parsing", "[io]") {
  TomlTable t = TomlTable::parse(R"(
# comment
[sim]
dt = 0.004            # trailing comment
latency = 1e-2

[ranges.train]
mass = [0.2, 0.8]

[ppo]
total_steps = 1_000_000
randomize = false
regime = "test"
)");
  REQUIRE(t.number("sim.dt") == 0.004);
  REQUIRE(t.number("sim.latency") == 0.01);
  REQUIRE(t.array("ranges.train.mass") == std::vector<double>{0.2, 0.8});
  REQUIRE(t.number("ppo.total_steps") == 1'000'000);
  REQUIRE(t.boolean("ppo.randomize") == false);
  REQUIRE(t.string("ppo.regime") == "test");
}

TEST_CASE("config load applies overrides over defaults", "[io]") {
  const std::string path = temp_path("omniquad_cfg_test.toml");
  {
    std::ofstream out(path);
    out << "[sim]\ndt = 0.004\n[ppo]\ngamma = 0.9\nn_envs = 4\nhorizon = 64\nminibatch = 128\n";
  }
  const Config c = Config::load(path);
  REQUIRE(c.sim.dt == 0.004);
  REQUIRE(c.ppo.gamma == 0.9);
  REQUIRE(c.ppo.n_envs == 4);
  // Untouched keys keep their defaults.
  REQUIRE(c.sim.latency == 0.010);
  REQUIRE(c.ppo.clip == 0.2);
  REQUIRE(c.ranges.train.mass.lo == 0.142);
  std::remove(path.c_str());
}

TEST_CASE("unknown keys are rejected with a line diagnostic", "[io]") {
  const std::string path = temp_path("omniquad_cfg_bad.toml");
  {
    std::ofstream out(path);
    out << "[sim]\ndt = 0.002\nnot_a_key = 1\n";
  }
  try {
    Config::load(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("not_a_key") != std::string::npos);
    REQUIRE(msg.find(":3") != std::string::npos);  // line number
  }
  std::remove(path.c_str());
}

TEST_CASE("malformed config values fail loudly", "[io]") {
  REQUIRE_THROWS_AS(TomlTable::parse("[sim\ndt = 1\n"), ConfigError);
  REQUIRE_THROWS_AS(TomlTable::parse("dt == 1\n"), ConfigError);
  REQUIRE_THROWS_AS(TomlTable::parse("[a]\nx = 1\nx = 2\n"), ConfigError);
  REQUIRE_THROWS_AS(TomlTable::parse("[a]\nx = banana\n"), ConfigError);
  // Wrong-type access is also an error.
  TomlTable t = TomlTable::parse("[a]\nx = true\n", "<t>");
  REQUIRE_THROWS_AS(t.number("a.x"), ConfigError);
}

TEST_CASE("range table overrides must stay consistent", "[io]") {
  const std::string path = temp_path("omniquad_cfg_ranges.toml");
  {
    std::ofstream out(path);
    // Train range outside the test range.
    out << "[ranges.train]\nmass = [0.05, 2.0]\n";
  }
  REQUIRE_THROWS_AS(Config::load(path), std::exception);
  std::remove(path.c_str());
}

TEST_CASE("config hash is stable and sensitive", "[io]") {
  Config a, b;
  REQUIRE(a.hash() == b.hash());
  b.ppo.gamma = 0.99;
  REQUIRE(a.hash() != b.hash());
  REQUIRE(a.hash().size() == 16);
  // Canonical text round-trips through the parser to the same resolved config.
  TomlTable t = TomlTable::parse(a.canonical_text());
  const Config c = Config::from_table(t);
  REQUIRE(c.hash() == a.hash());
}

TEST_CASE("checkpoint round trip is bit exact", "[io]") {
  Rng rng(71);
  PolicyBundle bundle = PolicyBundle::init(PolicyVariant::Rma, rng);
  bundle.attach_phi(rng);
  bundle.config_hash = Config{}.hash();
  bundle.e_norm_ranges = default_test_ranges();
  bundle.extra["steps"] = 12345;

  // Give the normalizer some non-trivial statistics.
  Rng d(3);
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd x(kObservationDim);
    for (int k = 0; k < kObservationDim; ++k) x[k] = d.normal() * (k + 1);
    bundle.obs_norm.update(x);
  }

  const std::string p1 = temp_path("omniquad_ckpt_a.bin");
  const std::string p2 = temp_path("omniquad_ckpt_b.bin");
  bundle.to_checkpoint("phase2").save(p1);

  const Checkpoint loaded = Checkpoint::load(p1);
  REQUIRE(loaded.phase == "phase2");
  REQUIRE(loaded.variant == "rma");
  REQUIRE(loaded.extra.at("steps") == 12345);

  PolicyBundle round = PolicyBundle::from_checkpoint(loaded);
  round.to_checkpoint("phase2").save(p2);
  REQUIRE(slurp(p1) == slurp(p2));

  // Deterministic actions are identical through the round trip.
  nn::VecX<float> x = nn::VecX<float>::Constant(kObservationDim, 0.2f);
  nn::VecX<float> z = nn::VecX<float>::Constant(kIntrinsicsDim, -0.1f);
  const ActionSample a = PolicyBundle::from_checkpoint(Checkpoint::load(p1))
                             .pi.act(x, z, ActMode::Deterministic, nullptr);
  const ActionSample b = PolicyBundle::from_checkpoint(Checkpoint::load(p2))
                             .pi.act(x, z, ActMode::Deterministic, nullptr);
  REQUIRE(a.raw == b.raw);

  // Sidecar exists and is valid JSON.
  const auto side = nlohmann::json::parse(slurp(p1 + ".json"));
  REQUIRE(side.at("variant") == "rma");

  std::remove(p1.c_str());
  std::remove((p1 + ".json").c_str());
  std::remove(p2.c_str());
  std::remove((p2 + ".json").c_str());
}

TEST_CASE("checkpoint version and shape mismatches are explicit errors", "[io]") {
  Rng rng(5);
  PolicyBundle bundle = PolicyBundle::init(PolicyVariant::Robust, rng);
  bundle.e_norm_ranges = default_test_ranges();
  const std::string path = temp_path("omniquad_ckpt_v.bin");
  bundle.to_checkpoint("phase1").save(path);

  SECTION("version mismatch") {
    std::string bytes = slurp(path);
    bytes[4] = 9;  // version field
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    REQUIRE_THROWS_WITH(Checkpoint::load(path), Catch::Contains("version mismatch"));
  }

  SECTION("not a checkpoint") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "plainly not a checkpoint";
    out.close();
    REQUIRE_THROWS_AS(Checkpoint::load(path), CheckpointError);
  }

  SECTION("missing tensor") {
    Checkpoint c = bundle.to_checkpoint("phase1");
    REQUIRE_THROWS_AS(c.tensor("phi.head.w0"), CheckpointError);
  }

  SECTION("architecture mismatch") {
    Checkpoint c = bundle.to_checkpoint("phase1");
    c.latent_dim = 6;  // robust expects latent 0
    REQUIRE_THROWS_WITH(PolicyBundle::from_checkpoint(c), Catch::Contains("architecture mismatch"));
  }

  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}
