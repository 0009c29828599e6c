#pragma once

// Experiment configuration: a JSON document with a fixed key set, validated
// on load, normalized with every default filled in, and hashed.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tslab/error.hpp"
#include "tslab/net.hpp"
#include "tslab/teacher.hpp"

namespace tslab {

using Json = nlohmann::json;

enum class ExperimentKind {
  verify_thm1,
  train,
  thm5_grid,
  ablate_size,
  ablate_overparam,
  ablate_finite,
  lottery,
  bn_audit,
  psi_check,
  falloff_probe
};

inline const std::vector<std::pair<ExperimentKind, std::string>>& kind_names() {
  static const std::vector<std::pair<ExperimentKind, std::string>> names{
      {ExperimentKind::verify_thm1, "verify_thm1"},
      {ExperimentKind::train, "train"},
      {ExperimentKind::thm5_grid, "thm5_grid"},
      {ExperimentKind::ablate_size, "ablate_size"},
      {ExperimentKind::ablate_overparam, "ablate_overparam"},
      {ExperimentKind::ablate_finite, "ablate_finite"},
      {ExperimentKind::lottery, "lottery"},
      {ExperimentKind::bn_audit, "bn_audit"},
      {ExperimentKind::psi_check, "psi_check"},
      {ExperimentKind::falloff_probe, "falloff_probe"}};
  return names;
}

inline std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kind_names())
    if (kind == k) return name;
  return "train";
}

inline ExperimentKind parse_kind(const std::string& s) {
  for (const auto& [kind, name] : kind_names())
    if (name == s) return kind;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

inline bool is_ablation(ExperimentKind k) {
  return k == ExperimentKind::ablate_size || k == ExperimentKind::ablate_overparam ||
         k == ExperimentKind::ablate_finite;
}

struct TrainSettings {
  double eta = 0.01;
  Index epochs = 100;
  Index batches_per_epoch = 100;
  Index batch_size = 128;
  Index validation_size = 4096;
  double divergence_loss = 1e6;
};

struct Thm5Settings {
  Index input = 10, hidden = 20, output = 30;
  std::vector<Index> overparams{2, 5, 10};
  std::vector<std::pair<double, double>> cells{{1.0, 1.0}, {1.0, 10.0}, {10.0, 1.0}, {10.0, 10.0}};
  Index iterations = 2000;
  Index samples = 4096;
  Index record_every = 10;
  double eta = 0.05;
  double ratio_target = 0.2;
  std::string mode = "free-run";  // or "guaranteed"
  Index ledger_samples = 100000;
};

struct VerifySettings {
  Index trials = 50;
  Index max_depth = 4;
  Index max_width = 40;
  Index max_batch = 64;
  double tolerance = 1e-10;
};

struct AblationArm {
  std::string name;
  Json patch;  // merged onto the base config
};

struct LotterySettings {
  Index retrain_epochs = -1;  // -1: same as epochs
};

struct PsiSettings {
  Index dim = 20;
  std::vector<double> angles{M_PI / 6.0, M_PI / 2.0};
  Index samples = 1000000;
};

struct FalloffSettings {
  Index dim = 20;
  std::vector<double> scales{0.01, 0.02, 0.05, 0.1, 0.2};
  Index samples = 1000000;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::train;
  TeacherSpec teacher;
  StudentInit student;
  StreamSpec stream;
  TrainSettings train;
  Thm5Settings thm5;
  VerifySettings verify;
  std::vector<AblationArm> arms;
  LotterySettings lottery;
  PsiSettings psi;
  FalloffSettings falloff;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output = "runs/out";
};

// ---------------------------------------------------------------------------
// Reading

namespace detail {

// Typed access to one JSON object that remembers which keys were read, so
// anything left over can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void number(const std::string& key, double& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
    if (!std::isfinite(out)) throw ConfigError(where(key) + " must be finite");
  }
  void integer(const std::string& key, Index& out, Index lo) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + " must be an integer");
    out = v.get<Index>();
    if (out < lo) throw ConfigError(where(key) + " must be >= " + std::to_string(lo));
  }
  void seed(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + " must be a boolean");
    out = v.get<bool>();
  }
  void string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    out = v.get<std::string>();
  }
  void numbers(const std::string& key, std::vector<double>& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array of numbers");
    out.clear();
    for (const Json& e : v) {
      if (!e.is_number()) throw ConfigError(where(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
  }
  void integers(const std::string& key, std::vector<Index>& out, Index lo) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array of integers");
    out.clear();
    for (const Json& e : v) {
      if (!e.is_number_integer() || e.get<Index>() < lo)
        throw ConfigError(where(key) + " entries must be integers >= " + std::to_string(lo));
      out.push_back(e.get<Index>());
    }
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + where(item.key()) + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_teacher(const Json& j, TeacherSpec& t) {
  ObjectReader r(j, "teacher");
  r.integers("widths", t.widths, 1);
  r.numbers("weight_grid", t.weight_grid);
  if (r.has("bias_range")) {
    std::vector<double> range;
    r.numbers("bias_range", range);
    if (range.size() != 2 || range[1] < range[0])
      throw ConfigError("teacher.bias_range must be [lo, hi] with lo <= hi");
    t.bias_lo = range[0];
    t.bias_hi = range[1];
  }
  r.boolean("bias", t.bias);
  r.seed("seed", t.seed);
  r.finish();
}

inline void read_student(const Json& j, StudentInit& s) {
  ObjectReader r(j, "student");
  r.integer("overparam", s.overparam, 1);
  r.number("p_w", s.p_w);
  r.number("p_v", s.p_v);
  if (s.p_w < 0.0 || s.p_v < 0.0) throw ConfigError("student.p_w and student.p_v must be >= 0");
  std::string mode = to_string(s.bn_mode);
  r.string("bn_mode", mode);
  s.bn_mode = parse_bn_mode(mode);
  r.finish();
}

inline void read_stream(const Json& j, StreamSpec& s) {
  ObjectReader r(j, "stream");
  r.number("std", s.stddev);
  if (!(s.stddev > 0.0)) throw ConfigError("stream.std must be positive");
  std::string mode = s.mode == StreamMode::finite ? "finite" : "infinite";
  r.string("mode", mode);
  if (mode == "infinite") {
    s.mode = StreamMode::infinite;
  } else if (mode == "finite") {
    s.mode = StreamMode::finite;
  } else {
    throw ConfigError("stream.mode must be 'infinite' or 'finite'");
  }
  r.integer("n_samples", s.n_samples, 0);
  if (s.mode == StreamMode::finite && s.n_samples < 1)
    throw ConfigError("stream.n_samples must be >= 1 in finite mode");
  r.finish();
}

inline void read_thm5(const Json& j, Thm5Settings& s) {
  ObjectReader r(j, "thm5");
  r.integer("input", s.input, 1);
  r.integer("hidden", s.hidden, 1);
  r.integer("output", s.output, 1);
  r.integers("overparams", s.overparams, 1);
  if (r.has("cells")) {
    const Json& v = r.raw("cells");
    if (!v.is_array()) throw ConfigError("thm5.cells must be an array of [p_w, p_v] pairs");
    s.cells.clear();
    for (const Json& e : v) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number() ||
          e[0].get<double>() < 0.0 || e[1].get<double>() < 0.0)
        throw ConfigError("thm5.cells entries must be [p_w, p_v] with non-negative numbers");
      s.cells.emplace_back(e[0].get<double>(), e[1].get<double>());
    }
  }
  r.integer("iterations", s.iterations, 0);
  r.integer("samples", s.samples, 2);
  r.integer("record_every", s.record_every, 1);
  r.number("eta", s.eta);
  if (!(s.eta > 0.0)) throw ConfigError("thm5.eta must be positive");
  r.number("ratio_target", s.ratio_target);
  r.string("mode", s.mode);
  if (s.mode != "free-run" && s.mode != "guaranteed")
    throw ConfigError("thm5.mode must be 'free-run' or 'guaranteed'");
  r.integer("ledger_samples", s.ledger_samples, 2);
  r.finish();
  if (s.overparams.empty() || s.cells.empty())
    throw ConfigError("thm5.overparams and thm5.cells must be non-empty");
}

inline void read_verify(const Json& j, VerifySettings& s) {
  ObjectReader r(j, "verify");
  r.integer("trials", s.trials, 1);
  r.integer("max_depth", s.max_depth, 1);
  r.integer("max_width", s.max_width, 1);
  r.integer("max_batch", s.max_batch, 1);
  r.number("tolerance", s.tolerance);
  r.finish();
}

inline void read_arms(const Json& j, std::vector<AblationArm>& arms) {
  ObjectReader r(j, "ablation");
  if (r.has("arms")) {
    const Json& v = r.raw("arms");
    if (!v.is_array() || v.empty()) throw ConfigError("ablation.arms must be a non-empty array");
    arms.clear();
    std::set<std::string> names;
    for (const Json& e : v) {
      ObjectReader a(e, "ablation.arms[]");
      AblationArm arm;
      a.string("name", arm.name);
      if (arm.name.empty()) throw ConfigError("ablation.arms[].name is required");
      if (!names.insert(arm.name).second)
        throw ConfigError("duplicate ablation arm name '" + arm.name + "'");
      arm.patch = a.has("patch") ? a.raw("patch") : Json::object();
      if (!arm.patch.is_object()) throw ConfigError("ablation.arms[].patch must be an object");
      a.finish();
      arms.push_back(std::move(arm));
    }
  }
  r.finish();
}

inline void read_lottery(const Json& j, LotterySettings& s) {
  ObjectReader r(j, "lottery");
  r.integer("retrain_epochs", s.retrain_epochs, -1);
  r.finish();
}

inline void read_psi(const Json& j, PsiSettings& s) {
  ObjectReader r(j, "psi");
  r.integer("dim", s.dim, 2);
  r.numbers("angles", s.angles);
  for (double a : s.angles)
    if (!(a >= 0.0 && a <= M_PI)) throw ConfigError("psi.angles must lie in [0, pi]");
  r.integer("samples", s.samples, 2);
  r.finish();
}

inline void read_falloff(const Json& j, FalloffSettings& s) {
  ObjectReader r(j, "falloff");
  r.integer("dim", s.dim, 2);
  r.numbers("scales", s.scales);
  for (double v : s.scales)
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("falloff.scales must lie in [0, 1]");
  r.integer("samples", s.samples, 2);
  r.finish();
}

/// Default arms for the three ablation kinds.
inline std::vector<AblationArm> default_arms(ExperimentKind kind) {
  std::vector<AblationArm> arms;
  const std::string bn = to_string(BnMode::linear_relu_bn);
  if (kind == ExperimentKind::ablate_size) {
    for (const char* size : {"small", "large"}) {
      const Json widths = std::string(size) == "small" ? Json{20, 10, 15, 20, 25} : Json{20, 50, 75, 100, 125};
      arms.push_back({std::string(size) + "_nobn",
                      {{"teacher", {{"widths", widths}}}, {"student", {{"bn_mode", "none"}}}}});
      arms.push_back({std::string(size) + "_bn",
                      {{"teacher", {{"widths", widths}}}, {"student", {{"bn_mode", bn}}}}});
    }
  } else if (kind == ExperimentKind::ablate_overparam) {
    for (int k : {1, 2, 5, 10, 20, 50})
      arms.push_back({"x" + std::to_string(k), {{"student", {{"overparam", k}}}}});
  } else if (kind == ExperimentKind::ablate_finite) {
    arms.push_back({"infinite", {{"stream", {{"mode", "infinite"}}}}});
    arms.push_back({"finite_512", {{"stream", {{"mode", "finite"}, {"n_samples", 512}}}}});
  }
  return arms;
}

}  // namespace detail

/// Parses and validates a configuration document. Unknown keys, wrong types
/// and out-of-range values are ConfigErrors naming the offending key.
inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  c.teacher.widths = {20, 10, 15, 20, 25};
  detail::ObjectReader r(j, "");
  std::string kind = to_string(c.kind);
  r.string("kind", kind);
  c.kind = parse_kind(kind);
  if (r.has("teacher")) detail::read_teacher(r.raw("teacher"), c.teacher);
  if (r.has("student")) detail::read_student(r.raw("student"), c.student);
  if (r.has("stream")) detail::read_stream(r.raw("stream"), c.stream);
  r.number("eta", c.train.eta);
  if (!(c.train.eta > 0.0)) throw ConfigError("eta must be positive");
  r.integer("epochs", c.train.epochs, 0);
  r.integer("batches_per_epoch", c.train.batches_per_epoch, 1);
  r.integer("batch_size", c.train.batch_size, 1);
  r.integer("validation_size", c.train.validation_size, 2);
  r.number("divergence_loss", c.train.divergence_loss);
  if (r.has("seeds")) {
    const Json& v = r.raw("seeds");
    if (!v.is_array() || v.empty()) throw ConfigError("seeds must be a non-empty array");
    c.seeds.clear();
    for (const Json& e : v) {
      if (!e.is_number_integer() || (!e.is_number_unsigned() && e.get<std::int64_t>() < 0))
        throw ConfigError("seeds must be non-negative integers");
      c.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  r.string("output", c.output);
  if (r.has("thm5")) detail::read_thm5(r.raw("thm5"), c.thm5);
  if (r.has("verify")) detail::read_verify(r.raw("verify"), c.verify);
  c.arms = detail::default_arms(c.kind);
  if (r.has("ablation")) detail::read_arms(r.raw("ablation"), c.arms);
  if (r.has("lottery")) detail::read_lottery(r.raw("lottery"), c.lottery);
  if (r.has("psi")) detail::read_psi(r.raw("psi"), c.psi);
  if (r.has("falloff")) detail::read_falloff(r.raw("falloff"), c.falloff);
  r.finish();

  if (c.teacher.widths.size() < 2) throw ConfigError("teacher.widths needs at least 2 entries");
  c.stream.dim = c.teacher.widths.front();
  if (c.kind == ExperimentKind::bn_audit && c.student.bn_mode == BnMode::none)
    throw ConfigError("bn_audit needs student.bn_mode other than 'none'");
  if (is_ablation(c.kind) && c.arms.empty()) throw ConfigError("ablation needs at least one arm");
  return c;
}

/// Fully normalized document: every key present with its effective value.
inline Json config_to_json(const ExperimentConfig& c) {
  Json arms = Json::array();
  for (const AblationArm& a : c.arms) arms.push_back({{"name", a.name}, {"patch", a.patch}});
  Json cells = Json::array();
  for (const auto& [pw, pv] : c.thm5.cells) cells.push_back({pw, pv});
  return {
      {"kind", to_string(c.kind)},
      {"teacher",
       {{"widths", c.teacher.widths},
        {"weight_grid", c.teacher.weight_grid},
        {"bias_range", {c.teacher.bias_lo, c.teacher.bias_hi}},
        {"bias", c.teacher.bias},
        {"seed", c.teacher.seed}}},
      {"student",
       {{"overparam", c.student.overparam},
        {"p_w", c.student.p_w},
        {"p_v", c.student.p_v},
        {"bn_mode", to_string(c.student.bn_mode)}}},
      {"stream",
       {{"std", c.stream.stddev},
        {"mode", c.stream.mode == StreamMode::finite ? "finite" : "infinite"},
        {"n_samples", c.stream.n_samples}}},
      {"eta", c.train.eta},
      {"epochs", c.train.epochs},
      {"batches_per_epoch", c.train.batches_per_epoch},
      {"batch_size", c.train.batch_size},
      {"validation_size", c.train.validation_size},
      {"divergence_loss", c.train.divergence_loss},
      {"seeds", c.seeds},
      {"output", c.output},
      {"thm5",
       {{"input", c.thm5.input},
        {"hidden", c.thm5.hidden},
        {"output", c.thm5.output},
        {"overparams", c.thm5.overparams},
        {"cells", cells},
        {"iterations", c.thm5.iterations},
        {"samples", c.thm5.samples},
        {"record_every", c.thm5.record_every},
        {"eta", c.thm5.eta},
        {"ratio_target", c.thm5.ratio_target},
        {"mode", c.thm5.mode},
        {"ledger_samples", c.thm5.ledger_samples}}},
      {"verify",
       {{"trials", c.verify.trials},
        {"max_depth", c.verify.max_depth},
        {"max_width", c.verify.max_width},
        {"max_batch", c.verify.max_batch},
        {"tolerance", c.verify.tolerance}}},
      {"ablation", {{"arms", arms}}},
      {"lottery", {{"retrain_epochs", c.lottery.retrain_epochs}}},
      {"psi", {{"dim", c.psi.dim}, {"angles", c.psi.angles}, {"samples", c.psi.samples}}},
      {"falloff",
       {{"dim", c.falloff.dim}, {"scales", c.falloff.scales}, {"samples", c.falloff.samples}}}};
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Hash of the normalized configuration without its output location, as 16
/// hex digits. Keys are serialized in sorted order, so it is stable across
/// machines.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = config_to_json(c);
  j.erase("output");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

/// Base config with an ablation arm's patch merged in, re-validated as a
/// plain training config.
inline ExperimentConfig apply_arm(const ExperimentConfig& base, const AblationArm& arm) {
  Json j = config_to_json(base);
  j.erase("ablation");
  j["kind"] = "train";
  j.merge_patch(arm.patch);
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace tslab
