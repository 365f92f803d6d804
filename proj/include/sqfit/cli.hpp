#pragma once

#include <cstdio>
#include <exception>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sqfit/errors.hpp"
#include "sqfit/eval.hpp"
#include "sqfit/fitter.hpp"
#include "sqfit/gradcheck.hpp"
#include "sqfit/io.hpp"
#include "sqfit/mesh.hpp"
#include "sqfit/render.hpp"

namespace sqfit {

namespace cli {

inline constexpr double kGradcheckTolerance = 1e-4;

struct FitArgs {
  std::string target, mask, camera, config, out;
  int primitives = 1;
};

struct EvalArgs {
  std::string model, target, report;
  std::size_t points = 100000;
};

struct RenderArgs {
  std::string model, out;
  int size = 128;
};

struct CycleArgs {
  std::string model, target, config, out;
};

inline FitConfig config_or_default(const std::string& path) { return path.empty() ? FitConfig{} : load_config(path); }

inline std::string fixed(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

inline int run_fit(const FitArgs& a, std::ostream& out) {
  if (a.mask.empty() != a.camera.empty()) throw UsageError("--mask and --camera must be given together");
  FitConfig cfg = config_or_default(a.config);
  cfg.n_prim = a.primitives;
  TargetShape target = load_target(a.target, cfg.seed, cfg.target_points);
  std::optional<std::vector<Vec2>> silhouette;
  std::optional<CameraParams> camera;
  if (!a.mask.empty()) {
    silhouette = silhouette_points(load_pgm(a.mask));
    camera = load_camera(a.camera);
  }
  const FitState s = fit(target.points, std::move(silhouette), cfg, camera);
  save_model(s, a.out);
  const double final_loss = s.trace.empty() ? 0.0 : s.trace.back().total;
  out << "iterations " << s.iteration << "\nloss " << fixed(final_loss) << '\n';
  return 0;
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  if (a.points < 1) throw UsageError("--points must be at least 1");
  const FitState s = load_model(a.model);
  TargetShape target = load_target(a.target);
  for (auto& p : target.points) p = s.normalization.apply(p);
  std::optional<Occupancy> occ;
  if (target.mesh) {
    const Normalization n = s.normalization;
    occ = [mesh = *target.mesh, n](const Vec3& x) { return mesh_contains(mesh, n.revert(x)); };
  }
  EvalConfig ec;
  ec.n_points = a.points;
  const FitReport r = report(s, target.points, occ, ec);
  write_report(r, a.report);
  for (const auto& line : summary_table(r)) out << line << '\n';
  return 0;
}

inline int run_render(const RenderArgs& a, std::ostream& out) {
  if (a.size < 1) throw UsageError("--size must be positive");
  const FitState s = load_model(a.model);
  const CameraParams cam = s.camera ? *s.camera : default_camera();
  const SilhouetteMask m = render_silhouette(s, cam, a.size, a.size);
  save_pgm(m, a.out);
  out << "foreground " << m.foreground() << '\n';
  return 0;
}

inline int run_gradcheck_cmd(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  GradcheckOptions opt;
  opt.seed = seed;
  const GradcheckResult r = run_gradcheck(opt);
  out << "configurations " << r.configurations << '\n';
  out << "translation " << fixed(r.translation) << '\n';
  out << "rotation    " << fixed(r.rotation) << '\n';
  out << "shape       " << fixed(r.shape) << '\n';
  out << "grid        " << fixed(r.grid) << '\n';
  out << "camera      " << fixed(r.camera) << '\n';
  const bool ok = r.max() < kGradcheckTolerance;
  out << (ok ? "PASS" : "FAIL") << " max " << fixed(r.max()) << '\n';
  if (ok) return 0;
  err << "error: gradient check exceeded tolerance " << fixed(kGradcheckTolerance) << '\n';
  return 3;
}

inline int run_cycle(const CycleArgs& a, std::ostream& out) {
  const FitConfig cfg = config_or_default(a.config);
  const FitState s = load_model(a.model);
  TargetShape target = load_target(a.target, cfg.seed, cfg.target_points);
  for (auto& p : target.points) p = s.normalization.apply(p);
  const CycleResult r = cycle_refit(s, cfg);
  if (!a.out.empty()) save_model(r.refit, a.out);
  out << "gcc " << fixed(r.gcc) << '\n';
  out << "icc " << fixed(r.icc) << '\n';
  out << "refit_chamfer " << fixed(chamfer(sample_state(r.refit, cfg.points_per_primitive, cfg.svf_steps), target.points))
      << '\n';
  return 0;
}

}  // namespace cli

/// Entry point of the `sqfit` tool. Results go to `out`, diagnostics to `err`.
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deformable superquadric fitting"};
  app.require_subcommand(1);

  cli::FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit primitives to a mesh or point list");
  fit_cmd->add_option("--target", fa.target, "OBJ mesh or XYZ point list")->required();
  fit_cmd->add_option("--primitives", fa.primitives, "Number of primitives")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--mask", fa.mask, "Silhouette mask (PGM)");
  fit_cmd->add_option("--camera", fa.camera, "Camera file for the mask");
  fit_cmd->add_option("--config", fa.config, "Configuration file");
  fit_cmd->add_option("--out", fa.out, "Output model")->required();

  cli::EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model against a target");
  eval_cmd->add_option("--model", ea.model)->required();
  eval_cmd->add_option("--target", ea.target)->required();
  eval_cmd->add_option("--points", ea.points, "Monte-Carlo samples for IoU");
  eval_cmd->add_option("--report", ea.report, "Output report (JSON)")->required();

  cli::RenderArgs ra;
  auto* render_cmd = app.add_subcommand("render", "Render a model's silhouette");
  render_cmd->add_option("--model", ra.model)->required();
  render_cmd->add_option("--out", ra.out, "Output mask (PGM)")->required();
  render_cmd->add_option("--size", ra.size, "Mask width and height");

  std::uint64_t gc_seed = 1;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gc_cmd->add_option("--seed", gc_seed);

  cli::CycleArgs ca;
  auto* cycle_cmd = app.add_subcommand("cycle", "Silhouette round trip of a fitted model");
  cycle_cmd->add_option("--model", ca.model)->required();
  cycle_cmd->add_option("--target", ca.target)->required();
  cycle_cmd->add_option("--config", ca.config, "Configuration file");
  cycle_cmd->add_option("--out", ca.out, "Write the refit model here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*fit_cmd) return cli::run_fit(fa, out);
    if (*eval_cmd) return cli::run_eval(ea, out);
    if (*render_cmd) return cli::run_render(ra, out);
    if (*gc_cmd) return cli::run_gradcheck_cmd(gc_seed, out, err);
    if (*cycle_cmd) return cli::run_cycle(ca, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

}  // namespace sqfit
