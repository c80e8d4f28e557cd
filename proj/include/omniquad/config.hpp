#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniquad/highlevel.hpp"
#include "omniquad/randomization.hpp"

namespace omniquad {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// TOML-subset parser: [section] / [section.sub] headers, key = value lines,
// values are numbers, booleans, quoted strings or flat numeric arrays.
// Comments start with '#'. Every key records its line for diagnostics and
// unknown keys are rejected after the schema walk.
// ---------------------------------------------------------------------------

struct TomlValue {
  enum class Kind { Number, Bool, String, Array } kind = Kind::Number;
  double number = 0.0;
  bool boolean = false;
  std::string string;
  std::vector<double> array;
  int line = 0;
};

class TomlTable {
 public:
  static TomlTable parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  static TomlTable parse(const std::string& text, const std::string& source = "<string>") {
    TomlTable t;
    t.source_ = source;
    std::string section;
    int line_no = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string s = strip(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') t.fail(line_no, "malformed section header");
        section = strip(s.substr(1, s.size() - 2));
        if (section.empty()) t.fail(line_no, "empty section name");
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) t.fail(line_no, "expected key = value");
      const std::string key = strip(s.substr(0, eq));
      const std::string value = strip(s.substr(eq + 1));
      if (key.empty()) t.fail(line_no, "empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (t.values_.count(full)) t.fail(line_no, "duplicate key '" + full + "'");
      t.values_[full] = parse_value(value, line_no, t);
    }
    return t;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  double number(const std::string& key) {
    const TomlValue& v = require(key, TomlValue::Kind::Number);
    return v.number;
  }
  bool boolean(const std::string& key) {
    const TomlValue& v = require(key, TomlValue::Kind::Bool);
    return v.boolean;
  }
  std::string string(const std::string& key) {
    const TomlValue& v = require(key, TomlValue::Kind::String);
    return v.string;
  }
  std::vector<double> array(const std::string& key) {
    const TomlValue& v = require(key, TomlValue::Kind::Array);
    return v.array;
  }

  // After the schema walk, any key never requested is an error.
  void reject_unknown() const {
    for (const auto& [key, value] : values_) {
      if (!consumed_.count(key))
        throw ConfigError(source_ + ":" + std::to_string(value.line) + ": unknown key '" + key + "'");
    }
  }

 private:
  const TomlValue& require(const std::string& key, TomlValue::Kind kind) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
    consumed_.insert(key);
    if (it->second.kind != kind)
      throw ConfigError(source_ + ":" + std::to_string(it->second.line) + ": key '" + key +
                        "' has the wrong type");
    return it->second;
  }

  [[noreturn]] void fail(int line, const std::string& what) const {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": " + what);
  }

  static std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') in_str = !in_str;
      if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
  }

  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static TomlValue parse_value(const std::string& raw, int line, const TomlTable& t) {
    TomlValue v;
    v.line = line;
    if (raw.empty()) t.fail(line, "empty value");
    if (raw == "true" || raw == "false") {
      v.kind = TomlValue::Kind::Bool;
      v.boolean = raw == "true";
      return v;
    }
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') t.fail(line, "unterminated string");
      v.kind = TomlValue::Kind::String;
      v.string = raw.substr(1, raw.size() - 2);
      return v;
    }
    if (raw.front() == '[') {
      if (raw.back() != ']') t.fail(line, "unterminated array");
      v.kind = TomlValue::Kind::Array;
      std::string body = raw.substr(1, raw.size() - 2);
      std::istringstream in(body);
      std::string item;
      while (std::getline(in, item, ',')) {
        const std::string it = strip(item);
        if (it.empty()) continue;
        v.array.push_back(parse_number(it, line, t));
      }
      return v;
    }
    v.kind = TomlValue::Kind::Number;
    v.number = parse_number(raw, line, t);
    return v;
  }

  static double parse_number(const std::string& s, int line, const TomlTable& t) {
    std::string cleaned;
    for (char c : s)
      if (c != '_') cleaned.push_back(c);
    std::size_t pos = 0;
    double out = 0.0;
    try {
      out = std::stod(cleaned, &pos);
    } catch (const std::exception&) {
      t.fail(line, "not a number: '" + s + "'");
    }
    if (pos != cleaned.size()) t.fail(line, "trailing characters in number: '" + s + "'");
    return out;
  }

  std::string source_;
  std::map<std::string, TomlValue> values_;
  mutable std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Resolved configuration. Every default lives here; a config file overrides
// defaults and CLI flags override the file.
// ---------------------------------------------------------------------------

struct SpawnConfig {
  double xy = 1.0;            // +- m around the origin
  double z_min = 0.5, z_max = 2.5;
  double vel = 1.0;           // +- m/s per axis
  double max_tilt_deg = 180;  // 180 = uniform random orientation
};

struct PpoConfig {
  double gamma = 0.99;   // 0.2 s credit horizon at 500 Hz
  double lam = 0.99;  // GAE window ~1/(1-gamma*lam) steps; sized for 500 Hz control
  double clip = 0.2;
  double lr = 3e-4;               // initial; adapted toward target_kl when enabled
  double entropy_coef = 1e-3;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double log_std_init = -1.0;
  bool adaptive_lr = true;        // scale lr to hold the per-update KL near target_kl
  double target_kl = 0.01;
  double lr_min = 1e-5;
  double lr_max = 1e-3;
  long total_steps = 10'000'000;
  int n_envs = 16;
  int horizon = 256;      // steps per env per batch
  int epochs = 5;
  int minibatch = 1024;
  long eval_every = 500'000;  // env steps between eval/checkpoint rows
  int eval_episodes = 50;
  int workers = 2;
  bool randomize = true;          // sample a platform per episode
  bool midepisode_shift = true;   // re-draw mass/inertia/CoM once per episode
  std::string regime = "train";

  long batch_steps() const { return static_cast<long>(n_envs) * horizon; }
};

struct DistillConfig {
  long total_steps = 2'000'000;
  long buffer_capacity = 1'000'000;
  int batch = 64;
  double lr = 1e-3;
  int chunk_steps = 4096;       // env steps collected between update rounds
  int updates_per_chunk = 8;
  int n_envs = 16;
  int workers = 2;
  int holdout_episodes = 32;
  std::string regime = "train";
};

struct EvalConfig {
  int episodes = 100;
  double goal_height = 1.5;
  double success_band = 0.3;   // |final height - goal| threshold
  double force_frac_max = 0.5; // external force cap as fraction of weight
  double toggle_prob = 0.02;   // per-step disturbance on/off probability
  double payload_duration = 15.0;            // s, payload-step scenario length
  std::vector<double> payload_step_times = {5.0, 10.0};
  double payload_step_frac = 0.18;  // added payload per step, fraction of mass
  int workers = 2;
  std::string regime = "test";
};

struct Config {
  SimConfig sim;
  Ranges ranges;
  HighLevelGains highlevel;
  SpawnConfig spawn;
  PpoConfig ppo;
  DistillConfig distill;
  EvalConfig eval;

  static Config load(const std::string& path) {
    TomlTable t = TomlTable::parse_file(path);
    return from_table(t);
  }

  static Config from_table(TomlTable& t) {
    Config c;
    auto num = [&](const char* key, double& slot) {
      if (t.has(key)) slot = t.number(key);
    };
    auto integer = [&](const char* key, auto& slot) {
      if (t.has(key)) slot = static_cast<std::decay_t<decltype(slot)>>(t.number(key));
    };
    auto flag = [&](const char* key, bool& slot) {
      if (t.has(key)) slot = t.boolean(key);
    };
    auto str = [&](const char* key, std::string& slot) {
      if (t.has(key)) slot = t.string(key);
    };
    auto range = [&](const std::string& key, Range& slot) {
      if (t.has(key)) {
        const auto a = t.array(key);
        if (a.size() != 2) throw ConfigError("range '" + key + "' must have two entries");
        slot = {a[0], a[1]};
      }
    };
    auto range_table = [&](const std::string& prefix, RangeTable& rt) {
      range(prefix + ".mass", rt.mass);
      range(prefix + ".arm_length", rt.arm_length);
      range(prefix + ".inertia_xy", rt.inertia_xy);
      range(prefix + ".inertia_z", rt.inertia_z);
      range(prefix + ".kappa", rt.kappa);
      range(prefix + ".payload_pct", rt.payload_pct);
      range(prefix + ".payload_loc_pct", rt.payload_loc_pct);
      range(prefix + ".motor_constant", rt.motor_constant);
      range(prefix + ".body_drag", rt.body_drag);
      range(prefix + ".max_motor_speed", rt.max_motor_speed);
    };

    num("sim.dt", c.sim.dt);
    num("sim.latency", c.sim.latency);
    num("sim.motor_tau", c.sim.motor_tau);
    num("sim.crash_height", c.sim.crash_height);
    num("sim.episode_time", c.sim.episode_time);

    range_table("ranges.train", c.ranges.train);
    range_table("ranges.test", c.ranges.test);

    num("highlevel.omega_n", c.highlevel.omega_n);
    num("highlevel.zeta", c.highlevel.zeta);
    num("highlevel.attitude_tau", c.highlevel.attitude_tau);
    num("highlevel.c_max", c.highlevel.c_max);

    num("spawn.xy", c.spawn.xy);
    num("spawn.z_min", c.spawn.z_min);
    num("spawn.z_max", c.spawn.z_max);
    num("spawn.vel", c.spawn.vel);
    num("spawn.max_tilt_deg", c.spawn.max_tilt_deg);

    num("ppo.gamma", c.ppo.gamma);
    num("ppo.lam", c.ppo.lam);
    num("ppo.clip", c.ppo.clip);
    num("ppo.lr", c.ppo.lr);
    num("ppo.entropy_coef", c.ppo.entropy_coef);
    num("ppo.value_coef", c.ppo.value_coef);
    num("ppo.max_grad_norm", c.ppo.max_grad_norm);
    num("ppo.log_std_init", c.ppo.log_std_init);
    flag("ppo.adaptive_lr", c.ppo.adaptive_lr);
    num("ppo.target_kl", c.ppo.target_kl);
    num("ppo.lr_min", c.ppo.lr_min);
    num("ppo.lr_max", c.ppo.lr_max);
    integer("ppo.total_steps", c.ppo.total_steps);
    integer("ppo.n_envs", c.ppo.n_envs);
    integer("ppo.horizon", c.ppo.horizon);
    integer("ppo.epochs", c.ppo.epochs);
    integer("ppo.minibatch", c.ppo.minibatch);
    integer("ppo.eval_every", c.ppo.eval_every);
    integer("ppo.eval_episodes", c.ppo.eval_episodes);
    integer("ppo.workers", c.ppo.workers);
    flag("ppo.randomize", c.ppo.randomize);
    flag("ppo.midepisode_shift", c.ppo.midepisode_shift);
    str("ppo.regime", c.ppo.regime);

    integer("distill.total_steps", c.distill.total_steps);
    integer("distill.buffer_capacity", c.distill.buffer_capacity);
    integer("distill.batch", c.distill.batch);
    num("distill.lr", c.distill.lr);
    integer("distill.chunk_steps", c.distill.chunk_steps);
    integer("distill.updates_per_chunk", c.distill.updates_per_chunk);
    integer("distill.n_envs", c.distill.n_envs);
    integer("distill.workers", c.distill.workers);
    integer("distill.holdout_episodes", c.distill.holdout_episodes);
    str("distill.regime", c.distill.regime);

    integer("eval.episodes", c.eval.episodes);
    num("eval.goal_height", c.eval.goal_height);
    num("eval.success_band", c.eval.success_band);
    num("eval.force_frac_max", c.eval.force_frac_max);
    num("eval.toggle_prob", c.eval.toggle_prob);
    num("eval.payload_duration", c.eval.payload_duration);
    if (t.has("eval.payload_step_times")) c.eval.payload_step_times = t.array("eval.payload_step_times");
    num("eval.payload_step_frac", c.eval.payload_step_frac);
    integer("eval.workers", c.eval.workers);
    str("eval.regime", c.eval.regime);

    t.reject_unknown();
    c.validate();
    return c;
  }

  void validate() const {
    ranges.validate();
    if (!(sim.dt > 0.0)) throw ConfigError("sim.dt must be > 0");
    if (!(ppo.gamma > 0.0 && ppo.gamma <= 1.0)) throw ConfigError("ppo.gamma must be in (0, 1]");
    if (!(ppo.clip > 0.0)) throw ConfigError("ppo.clip must be > 0");
    if (ppo.minibatch > ppo.batch_steps()) throw ConfigError("ppo.minibatch larger than a batch");
    if (ppo.batch_steps() % ppo.minibatch != 0)
      throw ConfigError("ppo.minibatch must divide n_envs * horizon");
    if (regime_of(ppo.regime) != Regime::Train && regime_of(ppo.regime) != Regime::Test)
      throw ConfigError("bad regime");
    if (eval.episodes <= 0) throw ConfigError("eval.episodes must be > 0");
  }

  static Regime regime_of(const std::string& s) {
    if (s == "train") return Regime::Train;
    if (s == "test") return Regime::Test;
    throw ConfigError("regime must be 'train' or 'test', got '" + s + "'");
  }

  // Canonical dump of every resolved value, also the input of the config
  // hash. Keys are emitted in a fixed order.
  std::string canonical_text() const {
    std::ostringstream out;
    auto kv = [&](const char* key, double v) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << key << " = " << buf << "\n";
    };
    auto kvi = [&](const char* key, long v) { out << key << " = " << v << "\n"; };
    auto kvb = [&](const char* key, bool v) { out << key << " = " << (v ? "true" : "false") << "\n"; };
    auto kvs = [&](const char* key, const std::string& v) { out << key << " = \"" << v << "\"\n"; };
    auto kvr = [&](const std::string& key, const Range& r) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "[%.17g, %.17g]", r.lo, r.hi);
      out << key << " = " << buf << "\n";
    };
    out << "[sim]\n";
    kv("dt", sim.dt);
    kv("latency", sim.latency);
    kv("motor_tau", sim.motor_tau);
    kv("crash_height", sim.crash_height);
    kv("episode_time", sim.episode_time);
    auto dump_table = [&](const char* name, const RangeTable& rt) {
      out << "[ranges." << name << "]\n";
      kvr("mass", rt.mass);
      kvr("arm_length", rt.arm_length);
      kvr("inertia_xy", rt.inertia_xy);
      kvr("inertia_z", rt.inertia_z);
      kvr("kappa", rt.kappa);
      kvr("payload_pct", rt.payload_pct);
      kvr("payload_loc_pct", rt.payload_loc_pct);
      kvr("motor_constant", rt.motor_constant);
      kvr("body_drag", rt.body_drag);
      kvr("max_motor_speed", rt.max_motor_speed);
    };
    dump_table("train", ranges.train);
    dump_table("test", ranges.test);
    out << "[highlevel]\n";
    kv("omega_n", highlevel.omega_n);
    kv("zeta", highlevel.zeta);
    kv("attitude_tau", highlevel.attitude_tau);
    kv("c_max", highlevel.c_max);
    out << "[spawn]\n";
    kv("xy", spawn.xy);
    kv("z_min", spawn.z_min);
    kv("z_max", spawn.z_max);
    kv("vel", spawn.vel);
    kv("max_tilt_deg", spawn.max_tilt_deg);
    out << "[ppo]\n";
    kv("gamma", ppo.gamma);
    kv("lam", ppo.lam);
    kv("clip", ppo.clip);
    kv("lr", ppo.lr);
    kv("entropy_coef", ppo.entropy_coef);
    kv("value_coef", ppo.value_coef);
    kv("max_grad_norm", ppo.max_grad_norm);
    kv("log_std_init", ppo.log_std_init);
    kvb("adaptive_lr", ppo.adaptive_lr);
    kv("target_kl", ppo.target_kl);
    kv("lr_min", ppo.lr_min);
    kv("lr_max", ppo.lr_max);
    kvi("total_steps", ppo.total_steps);
    kvi("n_envs", ppo.n_envs);
    kvi("horizon", ppo.horizon);
    kvi("epochs", ppo.epochs);
    kvi("minibatch", ppo.minibatch);
    kvi("eval_every", ppo.eval_every);
    kvi("eval_episodes", ppo.eval_episodes);
    kvi("workers", ppo.workers);
    kvb("randomize", ppo.randomize);
    kvb("midepisode_shift", ppo.midepisode_shift);
    kvs("regime", ppo.regime);
    out << "[distill]\n";
    kvi("total_steps", distill.total_steps);
    kvi("buffer_capacity", distill.buffer_capacity);
    kvi("batch", distill.batch);
    kv("lr", distill.lr);
    kvi("chunk_steps", distill.chunk_steps);
    kvi("updates_per_chunk", distill.updates_per_chunk);
    kvi("n_envs", distill.n_envs);
    kvi("workers", distill.workers);
    kvi("holdout_episodes", distill.holdout_episodes);
    kvs("regime", distill.regime);
    out << "[eval]\n";
    kvi("episodes", eval.episodes);
    kv("goal_height", eval.goal_height);
    kv("success_band", eval.success_band);
    kv("force_frac_max", eval.force_frac_max);
    kv("toggle_prob", eval.toggle_prob);
    kv("payload_duration", eval.payload_duration);
    {
      out << "payload_step_times = [";
      for (std::size_t i = 0; i < eval.payload_step_times.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", eval.payload_step_times[i]);
        out << (i ? ", " : "") << buf;
      }
      out << "]\n";
    }
    kv("payload_step_frac", eval.payload_step_frac);
    kvi("workers", eval.workers);
    kvs("regime", eval.regime);
    return out.str();
  }

  std::string hash() const {
    // FNV-1a 64 over the canonical text.
    const std::string text = canonical_text();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

// Worker-count resolution: config value capped by the OMNIQUAD_THREADS
// environment variable when it is set. Thread count never changes results,
// only wall time.
inline int resolve_workers(int configured) {
  int n = std::max(1, configured);
  if (const char* env = std::getenv("OMNIQUAD_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
      throw ConfigError("OMNIQUAD_THREADS must be an integer");
    }
  }
  return n;
}

}  // namespace omniquad
