#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sqfit/errors.hpp"
#include "sqfit/eval.hpp"
#include "sqfit/fitter.hpp"
#include "sqfit/mesh.hpp"
#include "sqfit/model.hpp"
#include "sqfit/render.hpp"

namespace sqfit {

inline constexpr std::string_view kModelTag = "sqfit-model";
inline constexpr int kModelVersion = 1;

/// 17 significant digits round-trip any double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes `content` to `path` through a temporary file and a rename.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

namespace detail {

inline void put(std::ostringstream& out, std::string_view key, std::initializer_list<double> values) {
  out << key;
  for (double v : values) out << ' ' << format_double(v);
  out << '\n';
}

/// Line-oriented reader tracking line numbers for error messages.
class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}

  std::vector<std::string_view> next() {
    while (std::getline(in_, line_)) {
      ++lineno_;
      auto tok = split_ws(line_);
      if (!tok.empty()) return tok;
    }
    throw ParseError("unexpected end of file", lineno_);
  }

  /// Next line, which must start with `key` and carry `n` numbers.
  std::vector<double> record(std::string_view key, std::size_t n) {
    const auto tok = next();
    if (tok[0] != key) throw ParseError("expected '" + std::string(key) + "'", lineno_);
    if (tok.size() != n + 1) throw ParseError("'" + std::string(key) + "' needs " + std::to_string(n) + " values", lineno_);
    std::vector<double> v;
    for (std::size_t i = 1; i < tok.size(); ++i) v.push_back(parse_double(tok[i], lineno_));
    return v;
  }

  long count(std::string_view key) {
    const auto tok = next();
    if (tok[0] != key || tok.size() != 2) throw ParseError("expected '" + std::string(key) + " <count>'", lineno_);
    const long n = parse_long(tok[1], lineno_);
    if (n < 0) throw ParseError("negative count", lineno_);
    return n;
  }

  std::size_t line() const { return lineno_; }

 private:
  std::istringstream in_;
  std::string line_;
  std::size_t lineno_ = 0;
};

}  // namespace detail

inline std::string serialize_model(const FitState& s) {
  std::ostringstream out;
  out << kModelTag << ' ' << kModelVersion << '\n';
  const auto& n = s.normalization;
  detail::put(out, "normalization", {n.center[0], n.center[1], n.center[2], n.scale});
  if (s.camera) {
    const auto& c = *s.camera;
    detail::put(out, "camera",
                {c.translation[0], c.translation[1], c.translation[2], c.rotation.w, c.rotation.x, c.rotation.y,
                 c.rotation.z, c.focal_length});
  } else {
    out << "camera none\n";
  }
  out << "iteration " << s.iteration << '\n';
  out << "primitives " << s.primitives.size() << '\n';
  for (const auto& p : s.primitives) {
    const auto& t = p.pose.translation;
    const auto& q = p.pose.rotation;
    const auto& g = p.shape;
    detail::put(out, "translation", {t[0], t[1], t[2]});
    detail::put(out, "rotation", {q.w, q.x, q.y, q.z});
    detail::put(out, "scale", {g.scale[0], g.scale[1], g.scale[2]});
    detail::put(out, "squareness", {g.squareness[0], g.squareness[1]});
    detail::put(out, "taper", {g.taper[0], g.taper[1]});
    detail::put(out, "bend", {g.bend});
    const auto& sp = p.grid.spec;
    out << "grid " << sp.resolution << ' ' << format_double(sp.lo) << ' ' << format_double(sp.hi) << ' '
        << format_double(sp.sigma) << ' ' << format_double(sp.v_cap) << '\n';
    for (const auto& v : p.grid.values)
      out << format_double(v[0]) << ' ' << format_double(v[1]) << ' ' << format_double(v[2]) << '\n';
  }
  out << "trace " << s.trace.size() << '\n';
  for (const auto& r : s.trace)
    out << format_double(r.total) << ' ' << format_double(r.ext) << ' ' << format_double(r.gen) << ' '
        << format_double(r.sigma) << ' ' << format_double(r.icc) << '\n';
  return out.str();
}

inline FitState parse_model(const std::string& text) {
  detail::LineReader in(text);
  FitState s;
  {
    const auto tok = in.next();
    if (tok.size() != 2 || tok[0] != kModelTag) throw ParseError("not a model file", in.line());
    const long version = detail::parse_long(tok[1], in.line());
    if (version != kModelVersion)
      throw VersionMismatch("model version " + std::to_string(version) + ", expected " + std::to_string(kModelVersion));
  }
  const auto nrm = in.record("normalization", 4);
  s.normalization.center = Vec3(nrm[0], nrm[1], nrm[2]);
  s.normalization.scale = nrm[3];
  {
    const auto tok = in.next();
    if (tok[0] != "camera") throw ParseError("expected 'camera'", in.line());
    if (!(tok.size() == 2 && tok[1] == "none")) {
      if (tok.size() != 9) throw ParseError("'camera' needs 8 values", in.line());
      std::vector<double> v;
      for (std::size_t i = 1; i < tok.size(); ++i) v.push_back(detail::parse_double(tok[i], in.line()));
      CameraParams c;
      c.translation = Vec3(v[0], v[1], v[2]);
      c.rotation = {v[3], v[4], v[5], v[6]};
      c.focal_length = v[7];
      if (!(c.focal_length > 0.0)) throw ParseError("focal length must be positive", in.line());
      s.camera = c;
    }
  }
  s.iteration = static_cast<int>(in.count("iteration"));
  const long n_prim = in.count("primitives");
  for (long i = 0; i < n_prim; ++i) {
    Primitive p;
    const auto t = in.record("translation", 3);
    const auto q = in.record("rotation", 4);
    const auto a = in.record("scale", 3);
    const auto e = in.record("squareness", 2);
    const auto tp = in.record("taper", 2);
    const auto b = in.record("bend", 1);
    p.pose.translation = Vec3(t[0], t[1], t[2]);
    p.pose.rotation = {q[0], q[1], q[2], q[3]};
    p.shape.scale = Vec3(a[0], a[1], a[2]);
    p.shape.squareness = Vec2(e[0], e[1]);
    p.shape.taper = Vec2(tp[0], tp[1]);
    p.shape.bend = b[0];
    const auto tok = in.next();
    if (tok[0] != "grid" || tok.size() != 6) throw ParseError("expected 'grid <resolution> <lo> <hi> <sigma> <v_cap>'", in.line());
    GridSpec spec;
    spec.resolution = static_cast<int>(detail::parse_long(tok[1], in.line()));
    spec.lo = detail::parse_double(tok[2], in.line());
    spec.hi = detail::parse_double(tok[3], in.line());
    spec.sigma = detail::parse_double(tok[4], in.line());
    spec.v_cap = detail::parse_double(tok[5], in.line());
    if (spec.resolution < 2 || !(spec.hi > spec.lo)) throw ParseError("invalid grid layout", in.line());
    p.grid = VelocityGrid(spec);
    for (auto& v : p.grid.values) {
      const auto tv = in.next();
      if (tv.size() != 3) throw ParseError("grid node needs three values", in.line());
      v = Vec3(detail::parse_double(tv[0], in.line()), detail::parse_double(tv[1], in.line()),
               detail::parse_double(tv[2], in.line()));
    }
    s.primitives.push_back(std::move(p));
  }
  const long n_trace = in.count("trace");
  for (long i = 0; i < n_trace; ++i) {
    const auto tok = in.next();
    if (tok.size() != 5) throw ParseError("trace record needs five values", in.line());
    LossRecord r;
    r.total = detail::parse_double(tok[0], in.line());
    r.ext = detail::parse_double(tok[1], in.line());
    r.gen = detail::parse_double(tok[2], in.line());
    r.sigma = detail::parse_double(tok[3], in.line());
    r.icc = detail::parse_double(tok[4], in.line());
    s.trace.push_back(r);
  }
  return s;
}

inline void save_model(const FitState& s, const std::string& path) { write_file_atomic(path, serialize_model(s)); }
inline FitState load_model(const std::string& path) { return parse_model(read_file(path)); }

// ---------------------------------------------------------------------------
// PGM masks (plain P2, foreground 255)
// ---------------------------------------------------------------------------

inline std::string serialize_pgm(const SilhouetteMask& m) {
  std::ostringstream out;
  out << "P2\n" << m.width << ' ' << m.height << "\n255\n";
  for (int row = 0; row < m.height; ++row) {
    // At most 16 values per line keeps lines under 70 characters.
    for (int col = 0; col < m.width; ++col) {
      out << (m.at(row, col) ? "255" : "0");
      out << ((col + 1) % 16 == 0 || col + 1 == m.width ? '\n' : ' ');
    }
  }
  return out.str();
}

inline SilhouetteMask parse_pgm(const std::string& text) {
  std::vector<std::string> tok;
  std::vector<std::size_t> tok_line;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    for (auto t : detail::split_ws(std::string_view(line).substr(0, line.find('#')))) {
      tok.emplace_back(t);
      tok_line.push_back(lineno);
    }
  }
  if (tok.size() < 4 || tok[0] != "P2") throw ParseError("not a plain (P2) PGM file", 1);
  const long w = detail::parse_long(tok[1], tok_line[1]);
  const long h = detail::parse_long(tok[2], tok_line[2]);
  const long maxval = detail::parse_long(tok[3], tok_line[3]);
  if (w < 1 || h < 1 || maxval != 255) throw ParseError("invalid PGM header", tok_line[3]);
  if (tok.size() != 4 + static_cast<std::size_t>(w * h))
    throw ParseError("PGM has " + std::to_string(tok.size() - 4) + " pixels, expected " + std::to_string(w * h),
                     tok_line.back());
  SilhouetteMask m(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < m.pixels.size(); ++i) {
    const long v = detail::parse_long(tok[4 + i], tok_line[4 + i]);
    if (v != 0 && v != 255) throw ParseError("mask values must be 0 or 255", tok_line[4 + i]);
    m.pixels[i] = v == 255 ? 1 : 0;
  }
  return m;
}

inline void save_pgm(const SilhouetteMask& m, const std::string& path) { write_file_atomic(path, serialize_pgm(m)); }
inline SilhouetteMask load_pgm(const std::string& path) { return parse_pgm(read_file(path)); }

// ---------------------------------------------------------------------------
// key = value files (fit configuration, camera)
// ---------------------------------------------------------------------------

struct KeyValue {
  std::string value;
  std::size_t line = 0;
};

inline std::map<std::string, KeyValue> parse_key_values(const std::string& text) {
  std::map<std::string, KeyValue> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", lineno);
    const std::string key(trim(body.substr(0, eq)));
    const std::string value(trim(body.substr(eq + 1)));
    if (key.empty() || value.empty()) throw ParseError("expected 'key = value'", lineno);
    if (out.count(key)) throw ParseError("duplicate key '" + key + "'", lineno);
    out[key] = {value, lineno};
  }
  return out;
}

namespace detail {

inline double kv_double(const KeyValue& kv) {
  const auto tok = split_ws(kv.value);
  if (tok.size() != 1) throw ParseError("expected one number", kv.line);
  return parse_double(tok[0], kv.line);
}

inline long kv_long(const KeyValue& kv) {
  const auto tok = split_ws(kv.value);
  if (tok.size() != 1) throw ParseError("expected one integer", kv.line);
  return parse_long(tok[0], kv.line);
}

inline std::vector<double> kv_vector(const KeyValue& kv, std::size_t n) {
  const auto tok = split_ws(kv.value);
  if (tok.size() != n) throw ParseError("expected " + std::to_string(n) + " numbers", kv.line);
  std::vector<double> v;
  for (auto t : tok) v.push_back(parse_double(t, kv.line));
  return v;
}

}  // namespace detail

/// Applies a configuration file on top of `cfg`. Unknown keys are rejected.
inline FitConfig parse_config(const std::string& text, FitConfig cfg = {}) {
  for (const auto& [key, kv] : parse_key_values(text)) {
    auto positive = [&](double v) {
      if (!(v > 0.0)) throw ParseError("'" + key + "' must be positive", kv.line);
      return v;
    };
    auto non_negative = [&](double v) {
      if (!(v >= 0.0)) throw ParseError("'" + key + "' must be non-negative", kv.line);
      return v;
    };
    auto count = [&](long v, long lo) {
      if (v < lo) throw ParseError("'" + key + "' must be at least " + std::to_string(lo), kv.line);
      return v;
    };
    if (key == "iterations") cfg.iterations = static_cast<int>(count(detail::kv_long(kv), 0));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(count(detail::kv_long(kv), 0));
    else if (key == "weights.ext") cfg.weights.ext = non_negative(detail::kv_double(kv));
    else if (key == "weights.gen") cfg.weights.gen = non_negative(detail::kv_double(kv));
    else if (key == "weights.sigma") cfg.weights.sigma = non_negative(detail::kv_double(kv));
    else if (key == "weights.f") cfg.weights.f = non_negative(detail::kv_double(kv));
    else if (key == "weights.gcc") cfg.weights.gcc = non_negative(detail::kv_double(kv));
    else if (key == "weights.icc") cfg.weights.icc = non_negative(detail::kv_double(kv));
    else if (key == "grid.resolution") cfg.grid_resolution = static_cast<int>(count(detail::kv_long(kv), 2));
    else if (key == "grid.sigma") cfg.grid_sigma = non_negative(detail::kv_double(kv));
    else if (key == "grid.steps") cfg.svf_steps = static_cast<int>(count(detail::kv_long(kv), 1));
    else if (key == "focal_length") cfg.focal_length = positive(detail::kv_double(kv));
    else if (key == "step.pose") cfg.step.pose = positive(detail::kv_double(kv));
    else if (key == "step.shape") cfg.step.shape = positive(detail::kv_double(kv));
    else if (key == "step.grid") cfg.step.grid = positive(detail::kv_double(kv));
    else if (key == "step.camera") cfg.step.camera = positive(detail::kv_double(kv));
    else if (key == "samples.target") cfg.target_points = static_cast<std::size_t>(count(detail::kv_long(kv), 1));
    else if (key == "samples.primitive") cfg.points_per_primitive = static_cast<std::size_t>(count(detail::kv_long(kv), 1));
    else if (key == "samples.eval") cfg.eval_points = static_cast<std::size_t>(count(detail::kv_long(kv), 1));
    else throw ParseError("unknown key '" + key + "'", kv.line);
  }
  return cfg;
}

inline FitConfig load_config(const std::string& path, FitConfig cfg = {}) { return parse_config(read_file(path), cfg); }

/// Camera file: translation = x y z, rotation = w x y z, focal_length = F.
inline CameraParams parse_camera(const std::string& text) {
  CameraParams c;
  bool have_t = false, have_r = false;
  for (const auto& [key, kv] : parse_key_values(text)) {
    if (key == "translation") {
      const auto v = detail::kv_vector(kv, 3);
      c.translation = Vec3(v[0], v[1], v[2]);
      have_t = true;
    } else if (key == "rotation") {
      const auto v = detail::kv_vector(kv, 4);
      const UnitQuaternion q{v[0], v[1], v[2], v[3]};
      if (!(q.squared_norm() > 0.0)) throw ParseError("rotation quaternion is zero", kv.line);
      c.rotation = q.normalized();
      have_r = true;
    } else if (key == "focal_length") {
      c.focal_length = detail::kv_double(kv);
      if (!(c.focal_length > 0.0)) throw ParseError("focal_length must be positive", kv.line);
    } else {
      throw ParseError("unknown key '" + key + "'", kv.line);
    }
  }
  if (!have_t || !have_r) throw ParseError("camera needs translation and rotation", 0);
  return c;
}

inline CameraParams load_camera(const std::string& path) { return parse_camera(read_file(path)); }

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline std::string summary_cell(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace detail

/// Plain-text table of the headline numbers.
inline std::vector<std::string> summary_table(const FitReport& r) {
  std::vector<std::string> rows;
  auto row = [&](const std::string& name, const std::string& value) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-12s %14s", name.c_str(), value.c_str());
    rows.emplace_back(buf);
  };
  row("metric", "value");
  row("iou", detail::summary_cell(r.iou));
  row("chamfer_l1", detail::summary_cell(r.chamfer_l1));
  row("chamfer", detail::summary_cell(r.chamfer));
  row("gcc", detail::summary_cell(r.gcc));
  row("icc", detail::summary_cell(r.icc));
  row("primitives", std::to_string(r.primitives.size()));
  row("iterations", std::to_string(r.trace.size()));
  return rows;
}

inline nlohmann::ordered_json report_json(const FitReport& r) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["iou"] = r.iou ? detail::number(*r.iou) : ordered_json(nullptr);
  j["chamfer_l1"] = detail::number(r.chamfer_l1);
  j["chamfer"] = detail::number(r.chamfer);
  j["gcc"] = r.gcc ? detail::number(*r.gcc) : ordered_json(nullptr);
  j["icc"] = r.icc ? detail::number(*r.icc) : ordered_json(nullptr);
  ordered_json prims = ordered_json::array();
  for (const auto& p : r.primitives) {
    ordered_json e;
    e["samples"] = p.samples;
    e["target_support"] = p.target_support;
    e["center"] = {detail::number(p.center[0]), detail::number(p.center[1]), detail::number(p.center[2])};
    e["scale"] = {detail::number(p.shape.scale[0]), detail::number(p.shape.scale[1]), detail::number(p.shape.scale[2])};
    e["squareness"] = {detail::number(p.shape.squareness[0]), detail::number(p.shape.squareness[1])};
    e["taper"] = {detail::number(p.shape.taper[0]), detail::number(p.shape.taper[1])};
    e["bend"] = detail::number(p.shape.bend);
    prims.push_back(std::move(e));
  }
  j["primitives"] = std::move(prims);
  ordered_json trace = ordered_json::array();
  for (const auto& t : r.trace)
    trace.push_back({{"total", detail::number(t.total)},
                     {"ext", detail::number(t.ext)},
                     {"gen", detail::number(t.gen)},
                     {"sigma", detail::number(t.sigma)},
                     {"icc", detail::number(t.icc)}});
  j["trace"] = std::move(trace);
  j["summary"] = summary_table(r);
  return j;
}

inline void write_report(const FitReport& r, const std::string& path) {
  write_file_atomic(path, report_json(r).dump(2) + "\n");
}

}  // namespace sqfit
