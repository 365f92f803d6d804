// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sqfit/cli.hpp"
#include "sqfit/synthetic.hpp"

using namespace sqfit;

namespace {

struct Verdict {
  bool ok;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun sqfit_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sqfit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

double value_after(const std::string& text, const std::string& key) {
  const auto pos = text.find(key + " ");
  if (pos == std::string::npos) return std::nan("");
  return std::stod(text.substr(pos + key.size() + 1));
}

std::filesystem::path work_dir() {
  auto p = std::filesystem::temp_directory_path() / "sqfit_acceptance";
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

void write_xyz(const std::string& path, const std::vector<Vec3>& pts) {
  std::ofstream out(path);
  for (const auto& p : pts)
    out << format_double(p.x()) << ' ' << format_double(p.y()) << ' ' << format_double(p.z()) << '\n';
}

void write_obj(const std::string& path, const TriangleMesh& m) {
  std::ofstream out(path);
  for (const auto& v : m.vertices)
    out << "v " << format_double(v.x()) << ' ' << format_double(v.y()) << ' ' << format_double(v.z()) << '\n';
  for (const auto& f : m.triangles) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

template <class F>
double central_difference(F&& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

// 1
Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckResult r = run_gradcheck(GradcheckOptions{});
  const double t = seconds_since(t0);
  return {r.configurations >= 20 && r.max() < 1e-4 && t < 120.0,
          "max relative error " + fmt("%.2e", r.max()) + " over " + std::to_string(r.configurations) +
              " configurations in " + fmt("%.1f", t) + " s"};
}

// 2
Verdict geometry_identities() {
  Rng rng(2);
  double implicit = 0, taper_rt = 0, bend_rt = 0, ortho = 0, proj = 0;
  for (int i = 0; i < 200; ++i) {
    GlobalShapeParams g;
    g.scale = Vec3(rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5));
    g.squareness = Vec2(rng.uniform(0.2, 1.9), rng.uniform(0.2, 1.9));
    const SurfaceAngle a{rng.uniform(-1.5, 1.5), rng.uniform(-3.1, 3.1)};
    const Vec3 s = superquadric_point(g, a);
    implicit = std::max(implicit, std::abs(implicit_value(g, s) - 1.0));

    g.taper = Vec2(rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9));
    g.bend = rng.uniform(-0.9, 0.9) / g.scale[2];
    const Vec3 t = taper_point(g, s);
    taper_rt = std::max(taper_rt, (taper_inverse_point(g, t) - s).cwiseAbs().maxCoeff());
    const double reach = std::min(2.0 * g.scale[0], 0.5 / std::abs(g.bend));
    const Vec3 p(rng.uniform(-reach, reach), rng.uniform(-1, 1), rng.uniform(-1, 1) * g.scale[2]);
    bend_rt = std::max(bend_rt, (bend_inverse_point(g, bend_point(g, p)) - p).cwiseAbs().maxCoeff());

    const UnitQuaternion q = UnitQuaternion{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
    const Mat3 r = q.rotation_matrix();
    ortho = std::max({ortho, (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), std::abs(r.determinant() - 1)});

    CameraParams cam;
    cam.focal_length = rng.uniform(1, 3);
    const Vec3 xs(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 4));
    const ProjectionJacobian j = projection_jacobian(cam, xs);
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 2; ++c) {
        const double fd = central_difference(
            [&](double v) {
              Vec3 y = xs;
              y[k] = v;
              return project(cam, std::vector<Vec3>{y})[0][c];
            },
            xs[k], 1e-6);
        proj = std::max(proj, std::abs(fd - j(c, k)) / std::max(1.0, std::abs(j(c, k))));
      }
  }
  const bool ok = implicit < 1e-9 && taper_rt < 1e-12 && bend_rt < 1e-9 && ortho < 1e-12 && proj < 1e-6;
  return {ok, "implicit " + fmt("%.1e", implicit) + ", taper " + fmt("%.1e", taper_rt) + ", bend " +
                  fmt("%.1e", bend_rt) + ", rotation " + fmt("%.1e", ortho) + ", projection " + fmt("%.1e", proj)};
}

// 3
Verdict diffeomorphism_suite() {
  Rng rng(3);
  const VelocityGrid zero;
  const bool identity = integrate_svf(zero).is_zero() && inverse_displacement(zero).is_zero();
  double compose = 0, converge = 0, min_det = std::numeric_limits<double>::infinity();
  for (int c = 0; c < 10; ++c) {
    VelocityGrid v;
    for (auto& x : v.values) x = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)) * 0.2;
    const VelocityGrid sm = smooth(v);  // a convex combination, so still within 0.2
    const DisplacementField fwd = integrate_svf(sm);
    const DisplacementField inv = inverse_displacement(sm);
    for (int i = 0; i < 500; ++i) {
      const Vec3 x(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
      const Vec3 y = x + inv.sample(x);
      compose = std::max(compose, (y + fwd.sample(y) - x).cwiseAbs().maxCoeff());
    }
    min_det = std::min(min_det, min_jacobian_determinant(fwd));
    const DisplacementField fine = integrate_svf(sm, 12);
    for (std::size_t n = 0; n < fwd.values.size(); ++n)
      converge = std::max(converge, (fwd.values[n] - fine.values[n]).cwiseAbs().maxCoeff());
  }
  const bool ok = identity && compose < 1e-3 && min_det > 0.0 && converge < 1e-5;
  return {ok, std::string("zero field ") + (identity ? "exact" : "NOT exact") + ", composition " + fmt("%.1e", compose) +
                  ", min det " + fmt("%.3f", min_det) + ", T=7 vs 12 " + fmt("%.1e", converge)};
}

// 4
Verdict chamfer_oracle() {
  Rng rng(4);
  std::vector<Vec3> a, b;
  for (int i = 0; i < 100; ++i) {
    a.emplace_back(rng.normal(), rng.normal(), rng.normal());
    b.emplace_back(rng.normal(), rng.normal(), rng.normal());
  }
  auto brute = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y, bool squared) {
    auto side = [&](const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
      double s = 0;
      for (const auto& u : p) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& w : q) best = std::min(best, (u - w).squaredNorm());
        s += squared ? best : std::sqrt(best);
      }
      return s / static_cast<double>(p.size());
    };
    return side(x, y) + side(y, x);
  };
  const double sq = chamfer(a, b), l1 = chamfer_l1(a, b);
  const double e_sq = std::abs(sq - brute(a, b, true)) / brute(a, b, true);
  const double e_l1 = std::abs(l1 - brute(a, b, false)) / brute(a, b, false);
  std::vector<Vec3> pa = a;
  std::reverse(pa.begin(), pa.end());
  std::swap(pa[3], pa[71]);
  const double sym = std::max(std::abs(chamfer(b, a) - sq), std::abs(chamfer_l1(b, a) - l1));
  const double perm = std::max(std::abs(chamfer(pa, b) - sq), std::abs(chamfer_l1(pa, b) - l1));
  const bool ok = e_sq < 1e-12 && e_l1 < 1e-12 && sym < 1e-12 * sq && perm < 1e-12 * sq;
  return {ok, "squared " + fmt("%.1e", e_sq) + ", L1 " + fmt("%.1e", e_l1) + ", symmetry " + fmt("%.1e", sym) +
                  ", permutation " + fmt("%.1e", perm)};
}

// 5: writes recovery.sqm, reused by the cycle criterion.
Verdict synthetic_recovery(const std::filesystem::path& dir) {
  const auto inst = synthetic::recovery_instance(1);
  const std::string target = (dir / "recovery.xyz").string();
  const std::string model = (dir / "recovery.sqm").string();
  write_xyz(target, inst.points);
  const auto t0 = std::chrono::steady_clock::now();
  const CliRun r = sqfit_cli({"fit", "--target", target, "--primitives", "1", "--out", model});
  const double t = seconds_since(t0);
  if (r.code != 0) return {false, "fit exited with " + std::to_string(r.code) + ": " + r.err};
  const FitState s = load_model(model);
  std::vector<Vec3> pts = load_target(target).points;
  for (auto& p : pts) p = s.normalization.apply(p);
  const double c = chamfer(sample_state(s, FitConfig{}.points_per_primitive), pts);
  return {c < 1e-3 && s.iteration <= 2000 && t < 300.0,
          "chamfer " + fmt("%.2e", c) + " after " + std::to_string(s.iteration) + " iterations in " + fmt("%.1f", t) +
              " s"};
}

// 6
Verdict chair_composition(const std::filesystem::path& dir) {
  const std::string target = (dir / "chair.obj").string();
  const std::string model = (dir / "chair.sqm").string();
  write_obj(target, synthetic::chair_mesh());
  const auto t0 = std::chrono::steady_clock::now();
  const CliRun r = sqfit_cli({"fit", "--target", target, "--primitives", "6", "--out", model});
  const double t = seconds_since(t0);
  if (r.code != 0) return {false, "fit exited with " + std::to_string(r.code) + ": " + r.err};
  const FitState s = load_model(model);
  const Normalization n = s.normalization;
  EvalConfig ec;
  const double v = iou(s, [&](const Vec3& x) { return synthetic::chair_contains(n.revert(x)); }, ec);
  // Distance from each leg box to its nearest primitive centroid, normalized units.
  const auto boxes = synthetic::chair_boxes();
  double worst = 0;
  std::string legs;
  for (int l = 0; l < 4; ++l) {
    const Vec3 lo = n.apply(boxes[l].lo), hi = n.apply(boxes[l].hi);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : s.primitives) {
      const Vec3 c = p.pose.translation;
      best = std::min(best, (lo - c).cwiseMax(c - hi).cwiseMax(0.0).norm());
    }
    worst = std::max(worst, best);
    legs += (l ? " " : "") + fmt("%.3f", best);
  }
  return {v > 0.70 && worst <= 0.1,
          "IoU " + fmt("%.3f", v) + ", leg distances " + legs + " in " + fmt("%.0f", t) + " s"};
}

// 7
Verdict config_defaults() {
  const FitConfig c = load_config(std::string(SQFIT_SOURCE_DIR) + "/config/default.conf");
  const auto& w = c.weights;
  const bool ok = c == FitConfig{} && w.ext == 0.5 && w.gen == 0.3 && w.sigma == 0.2 && w.f == 0.6 && w.gcc == 0.2 &&
                  w.icc == 0.2 && c.target_points == 2000 && c.points_per_primitive == 1000 &&
                  c.eval_points == 100000 && c.svf_steps == 7;
  return {ok, "weights (" + fmt("%g", w.ext) + ", " + fmt("%g", w.gen) + ", " + fmt("%g", w.sigma) + ") (" +
                  fmt("%g", w.f) + ", " + fmt("%g", w.gcc) + ", " + fmt("%g", w.icc) + "), samples " +
                  std::to_string(c.target_points) + "/" + std::to_string(c.points_per_primitive) + "/" +
                  std::to_string(c.eval_points) + ", T=" + std::to_string(c.svf_steps)};
}

// 8
Verdict cycle_diagnostic(const std::filesystem::path& dir) {
  const std::string model = (dir / "recovery.sqm").string();
  if (!std::filesystem::exists(model)) return {false, "recovery model missing"};
  const CliRun r = sqfit_cli({"cycle", "--model", model, "--target", (dir / "recovery.xyz").string()});
  if (r.code != 0) return {false, "cycle exited with " + std::to_string(r.code) + ": " + r.err};
  const double gcc = value_after(r.out, "gcc"), icc = value_after(r.out, "icc");
  return {gcc < 0.05 && icc < 0.02, "gcc " + fmt("%.4f", gcc) + ", icc " + fmt("%.2e", icc)};
}

// 9
Verdict reproducibility(const std::filesystem::path& dir) {
  auto path = [&](const std::string& f) { return (dir / f).string(); };
  std::ofstream(path("small.conf")) << "iterations = 60\nseed = 5\nsamples.primitive = 300\n";
  write_obj(path("repro.obj"), synthetic::chair_mesh());
  std::vector<std::string> files;
  for (const char* tag : {"a", "b"}) {
    const std::string t = tag;
    const std::vector<std::vector<std::string>> cmds = {
        {"fit", "--target", path("repro.obj"), "--primitives", "3", "--config", path("small.conf"), "--out",
         path(t + ".sqm")},
        {"eval", "--model", path(t + ".sqm"), "--target", path("repro.obj"), "--points", "5000", "--report",
         path(t + ".json")},
        {"render", "--model", path(t + ".sqm"), "--out", path(t + ".pgm")},
        {"cycle", "--model", path(t + ".sqm"), "--target", path("repro.obj"), "--config", path("small.conf"), "--out",
         path(t + "_cycle.sqm")}};
    std::string out;
    for (const auto& c : cmds) {
      const CliRun r = sqfit_cli(c);
      if (r.code != 0) return {false, c[0] + " exited with " + std::to_string(r.code) + ": " + r.err};
      out += r.out;
    }
    files.push_back(out + read_file(path(t + ".sqm")) + read_file(path(t + ".json")) + read_file(path(t + ".pgm")) +
                    read_file(path(t + "_cycle.sqm")));
  }
  return {files[0] == files[1], std::string("fit, eval, render and cycle outputs ") +
                                    (files[0] == files[1] ? "byte-identical" : "DIFFER") + " across two runs"};
}

}  // namespace

int main() {
  const auto dir = work_dir();
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"geometry identities", geometry_identities},
      {"diffeomorphism suite", diffeomorphism_suite},
      {"chamfer oracle", chamfer_oracle},
      {"synthetic recovery", [&] { return synthetic_recovery(dir); }},
      {"multi-primitive chair", [&] { return chair_composition(dir); }},
      {"config defaults", config_defaults},
      {"cycle diagnostic", [&] { return cycle_diagnostic(dir); }},
      {"reproducibility", [&] { return reproducibility(dir); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += v.ok ? 0 : 1;
    std::cout << (v.ok ? "PASS" : "FAIL") << "  " << i + 1 << ". " << criteria[i].first << ": " << v.detail << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
