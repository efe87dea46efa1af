// gsdyn: data generation, training, prediction, rendering, planning and
// evaluation for graph-based dynamics on Gaussian clouds.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsdyn/gaussians.hpp"
#include "gsdyn/metrics.hpp"
#include "gsdyn/planner.hpp"
#include "gsdyn/png.hpp"
#include "gsdyn/renderer.hpp"
#include "gsdyn/run_config.hpp"
#include "gsdyn/tracks.hpp"
#include "gsdyn/training.hpp"

namespace fs = std::filesystem;
using namespace gsdyn;

namespace {

std::string fmt(double v) { return io::fmt_double(v); }

std::string short_fmt(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");
}

/// Every command leaves one of these next to its outputs.
void write_run_manifest(const fs::path& dir, const std::string& command, const RunConfig& rc, io::KeyValues extra) {
  io::KeyValues kv{{"command", command}};
  for (auto& e : extra) kv.push_back(std::move(e));
  for (auto& e : rc.echo()) kv.push_back(std::move(e));
  io::write_key_values(dir / "run_manifest.txt", kv);
}

// FNV-1a over file names and contents, in name order.
std::uint64_t hash_directory(const fs::path& dir, const std::string& prefix = "") {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().rfind(prefix, 0) == 0) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 1099511628211ULL;
    }
  };
  for (const auto& f : files) {
    const auto name = f.filename().string();
    feed(name.data(), name.size());
    std::ifstream in(f, std::ios::binary);
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      feed(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    double v = 0.0;
    from_text(part, v);
    out.push_back(v);
  }
  if (out.empty()) throw Error("expected a comma-separated list of numbers, got '" + s + "'");
  return out;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// --- gen-data -----------------------------------------------------------------

int cmd_gen_data(const RunConfig& rc, const fs::path& out) {
  const auto n = static_cast<std::size_t>(rc.data.episodes);
  make_dataset(rc.world, n, rc.data.seed, out, [&](std::size_t e, std::size_t total) {
    std::cout << "episode " << e + 1 << "/" << total << " written\n" << std::flush;
  });
  const auto hash = hex(hash_directory(out, "episode_"));
  write_run_manifest(out, "gen-data", rc, {{"output", out.string()}, {"content_hash", hash}});
  std::cout << "dataset " << out.string() << ": " << n << " episodes, " << rc.world.frames << " frames, "
            << to_text(rc.world.object) << " / " << to_text(rc.world.effector) << ", content hash " << hash << "\n";
  return 0;
}

// --- train ----------------------------------------------------------------------

int cmd_train(const RunConfig& rc, const fs::path& data, const fs::path& out, bool resume) {
  const auto ds = read_dataset(data);
  if (ds.episodes.empty()) throw Error("dataset '" + data.string() + "' has no episodes");
  const auto inputs = split_dataset(ds, rc.train);
  ensure_dir(out);
  std::cout << "training on " << inputs.train.size() << " episodes, validating on " << inputs.validation.size()
            << (resume ? " (resuming)" : "") << "\n";
  TrainReport report;
  TrainOptions opt;
  opt.out_dir = out;
  opt.resume = resume;
  opt.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " step " << r.step << " train " << short_fmt(r.train_total) << " (pred "
              << short_fmt(r.train.pred) << ")";
    if (r.has_validation) std::cout << " val " << short_fmt(r.validation_total) << " (pred " << short_fmt(r.validation.pred) << ")";
    std::cout << " " << short_fmt(r.wall_seconds, 3) << " s\n" << std::flush;
  };
  train(inputs, rc.model, rc.train, report, opt);
  write_run_manifest(out, "train", rc,
                     {{"dataset", data.string()},
                      {"dataset_hash", hex(hash_directory(data, "episode_"))},
                      {"train_episodes", std::to_string(inputs.train.size())},
                      {"validation_episodes", std::to_string(inputs.validation.size())},
                      {"best_checkpoint", report.best_checkpoint.string()},
                      {"last_checkpoint", report.last_checkpoint.string()}});
  std::cout << "checkpoints: " << report.best_checkpoint.string() << ", " << report.last_checkpoint.string() << "\n";
  return 0;
}

// --- predict --------------------------------------------------------------------

int cmd_predict(const RunConfig& rc, const fs::path& ckpt_path, const fs::path& data, std::size_t episode,
                long start_arg, std::size_t horizon, const fs::path& out) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto& params = ckpt.params;
  const auto& mc = params.config;
  const std::size_t k = static_cast<std::size_t>(mc.k);
  const auto seq = read_episode(data / episode_name(episode));
  auto cloud = read_cloud(data / cloud_name(episode));
  const std::size_t start = start_arg < 0 ? k : static_cast<std::size_t>(start_arg);
  if (start + horizon >= seq.frames())
    throw Error("start " + std::to_string(start) + " + horizon " + std::to_string(horizon) + " runs past the episode's " +
                std::to_string(seq.frames()) + " frames");
  if (cloud.size() != seq.particles()) throw Error("cloud and episode differ in particle count");
  ensure_dir(out);

  const auto idx = farthest_point_sample(seq.positions[start], MinSpacing{mc.d_v});
  std::vector<std::vector<Vec3>> objects;
  std::vector<Vec3> effector;
  for (std::size_t s = 0; s <= k; ++s) {
    const std::size_t f = start + s >= k ? start + s - k : 0;
    objects.push_back(gather(std::span<const Vec3>(seq.positions[f]), idx));
    effector.push_back(seq.actions[f]);
  }
  const std::span<const Vec3> actions(seq.actions.data() + start + 1, horizon);
  Tracks control{objects.back()};
  if (horizon > 0) {
    auto pred = rollout_window(params, objects, effector, actions, seq.table_height);
    control.insert(control.end(), pred.begin(), pred.end());
  }
  // The stored cloud carries the attributes; its centers follow the start frame.
  cloud.centers = seq.positions[start];
  DensifyOptions dopt;
  dopt.neighbor_radius = mc.d_e;
  const auto frames = densify_rollout(cloud, control, dopt);

  Tracks pred_dense, truth_dense, truth_control;
  for (std::size_t h = 0; h <= horizon; ++h) {
    pred_dense.push_back(frames[h].centers);
    truth_dense.push_back(seq.positions[start + h]);
    truth_control.push_back(gather(std::span<const Vec3>(seq.positions[start + h]), idx));
    char name[32];
    std::snprintf(name, sizeof name, "cloud_%04zu.bin", h);
    write_cloud(out / name, frames[h]);
  }
  write_tracks(out / "pred_dense.trk", pred_dense);
  write_tracks(out / "truth_dense.trk", truth_dense);
  write_tracks(out / "pred_control.trk", control);
  write_tracks(out / "truth_control.trk", truth_control);
  {
    std::ofstream csv(out / "pred_control.csv");
    csv << "frame,vertex,particle,x,y,z\n";
    for (std::size_t h = 0; h < control.size(); ++h)
      for (std::size_t i = 0; i < control[h].size(); ++i)
        csv << h << "," << i << "," << idx[i] << "," << fmt(control[h][i].x()) << "," << fmt(control[h][i].y()) << ","
            << fmt(control[h][i].z()) << "\n";
  }
  std::ofstream csv(out / "metrics.csv");
  csv << "frame,chamfer_dense,emd_dense,chamfer_control\n";
  for (std::size_t h = 0; h <= horizon; ++h)
    csv << h << "," << fmt(metrics::chamfer(pred_dense[h], truth_dense[h])) << ","
        << fmt(metrics::emd(pred_dense[h], truth_dense[h])) << "," << fmt(metrics::chamfer(control[h], truth_control[h]))
        << "\n";
  const auto te = metrics::track_eval(pred_dense, truth_dense);
  io::KeyValues summary{{"frames", std::to_string(horizon + 1)},
                        {"control_vertices", std::to_string(idx.size())},
                        {"final_chamfer_dense", fmt(metrics::chamfer(pred_dense.back(), truth_dense.back()))},
                        {"final_chamfer_control", fmt(metrics::chamfer(control.back(), truth_control.back()))},
                        {"static_chamfer_control", fmt(metrics::chamfer(control.front(), truth_control.back()))},
                        {"mte_mm", fmt(te.mte_mm)},
                        {"delta_avg", fmt(te.delta_avg)},
                        {"survival", fmt(te.survival)}};
  io::write_key_values(out / "metrics.txt", summary);
  write_run_manifest(out, "predict", rc,
                     {{"checkpoint", ckpt_path.string()},
                      {"dataset", data.string()},
                      {"episode", std::to_string(episode)},
                      {"start", std::to_string(start)},
                      {"horizon", std::to_string(horizon)}});
  std::cout << "predicted " << horizon << " steps from frame " << start << " of episode " << episode << " ("
            << idx.size() << " control vertices); final dense chamfer "
            << short_fmt(metrics::chamfer(pred_dense.back(), truth_dense.back())) << " m, MTE " << short_fmt(te.mte_mm)
            << " mm\n";
  return 0;
}

// --- render ---------------------------------------------------------------------

int cmd_render(const RunConfig& rc, const std::vector<fs::path>& inputs, const fs::path& out, bool alpha) {
  std::vector<fs::path> clouds;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        const auto name = e.path().filename().string();
        if (name.rfind("cloud_", 0) == 0 && e.path().extension() == ".bin") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      clouds.insert(clouds.end(), found.begin(), found.end());
    } else {
      clouds.push_back(in);
    }
  }
  if (clouds.empty()) throw Error("no cloud files to render");
  ensure_dir(out);
  const auto camera = rc.camera.model();
  const auto opt = rc.render.options();
  for (std::size_t f = 0; f < clouds.size(); ++f) {
    RenderStats stats;
    const auto frame = render(read_cloud(clouds[f]), camera, opt, &stats);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", f);
    write_png(out / name, frame);
    if (alpha) {
      std::snprintf(name, sizeof name, "alpha_%04zu.png", f);
      write_alpha_png(out / name, frame);
    }
    if (stats.singular > 0) log::warn(clouds[f].string() + ": skipped " + std::to_string(stats.singular) + " singular Gaussians");
  }
  io::KeyValues extra{{"frames", std::to_string(clouds.size())}, {"alpha", alpha ? "true" : "false"}};
  for (std::size_t f = 0; f < clouds.size(); ++f) extra.emplace_back("input." + std::to_string(f), clouds[f].string());
  write_run_manifest(out, "render", rc, extra);
  std::cout << "rendered " << clouds.size() << " frames to " << out.string() << "\n";
  return 0;
}

// --- plan -----------------------------------------------------------------------

int cmd_plan(const RunConfig& rc, const fs::path& ckpt_path, const fs::path& out, ScenarioKind scenario, int seeds,
             const std::vector<double>& thresholds, bool save_frames) {
  if (seeds < 1) throw Error("--seeds must be at least 1");
  const auto params = load_checkpoint(ckpt_path).params;
  ensure_dir(out);
  std::vector<std::vector<double>> curves, relative;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = rc.data.seed + static_cast<std::uint64_t>(s);
    const auto sc = make_scenario(scenario, rc.world, seed);
    PlanConfig pc = for_scenario(rc.plan, sc);
    pc.rng_seed = rc.plan.rng_seed + static_cast<std::uint64_t>(s);
    World world(sc.world, sc.initial, sc.effector_start);
    const auto res = mpc_execute(params, world, sc.target, pc);
    char name[40];
    std::snprintf(name, sizeof name, "curve_seed%02d.csv", s);
    std::ofstream csv(out / name);
    csv << "step,chamfer,predicted_cost,ax,ay,az\n";
    for (std::size_t t = 0; t < res.chamfer.size(); ++t) {
      csv << t << "," << fmt(res.chamfer[t]);
      if (t < res.actions.size())
        csv << "," << fmt(res.predicted_cost[t]) << "," << fmt(res.actions[t].x()) << "," << fmt(res.actions[t].y()) << ","
            << fmt(res.actions[t].z());
      else
        csv << ",,,,";
      csv << "\n";
    }
    if (save_frames) {
      const auto dir = out / ("frames_seed" + std::to_string(s));
      ensure_dir(dir);
      const auto base = cloud_from_particles(res.frames.front());
      for (std::size_t t = 0; t < res.frames.size(); ++t) {
        auto c = base;
        c.centers = res.frames[t];
        std::snprintf(name, sizeof name, "cloud_%04zu.bin", t);
        write_cloud(dir / name, c);
      }
      auto target = base;
      target.centers = sc.target;
      write_cloud(dir / "target.bin", target);
    }
    std::vector<double> rel;
    for (double c : res.chamfer) rel.push_back(res.chamfer.front() > 0.0 ? c / res.chamfer.front() : (c > 0.0 ? 1e300 : 1.0));
    std::cout << "seed " << seed << ": chamfer " << short_fmt(res.chamfer.front()) << " -> " << short_fmt(res.chamfer.back())
              << " m (" << short_fmt(100.0 * rel.back(), 3) << "%)\n"
              << std::flush;
    curves.push_back(res.chamfer);
    relative.push_back(std::move(rel));
  }
  const std::size_t steps = curves.front().size();
  std::vector<double> med_abs, med_rel;
  {
    std::ofstream csv(out / "median_curve.csv");
    csv << "step,median_chamfer,median_relative\n";
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> a, r;
      for (std::size_t s = 0; s < curves.size(); ++s) {
        a.push_back(curves[s][t]);
        r.push_back(relative[s][t]);
      }
      med_abs.push_back(median_of(a));
      med_rel.push_back(median_of(r));
      csv << t << "," << fmt(med_abs.back()) << "," << fmt(med_rel.back()) << "\n";
    }
  }
  std::ofstream table(out / "success_rate.csv");
  table << "threshold_m,success_rate\n";
  std::cout << "threshold (m)  success rate\n";
  for (double th : thresholds) {
    int ok = 0;
    for (const auto& c : curves) ok += c.back() <= th ? 1 : 0;
    const double rate = static_cast<double>(ok) / static_cast<double>(curves.size());
    table << fmt(th) << "," << fmt(rate) << "\n";
    std::printf("%13.4f  %12.2f\n", th, rate);
  }
  bool non_increasing = true;
  for (std::size_t t = 1; t < std::min<std::size_t>(6, med_rel.size()); ++t) non_increasing = non_increasing && med_rel[t] <= med_rel[t - 1];
  io::KeyValues summary{{"seeds", std::to_string(seeds)},
                        {"steps", std::to_string(steps - 1)},
                        {"median_initial_chamfer", fmt(med_abs.front())},
                        {"median_final_chamfer", fmt(med_abs.back())},
                        {"median_final_relative", fmt(med_rel.back())},
                        {"median_non_increasing_first5", non_increasing ? "true" : "false"}};
  io::write_key_values(out / "summary.txt", summary);
  write_run_manifest(out, "plan", rc,
                     {{"checkpoint", ckpt_path.string()}, {"scenario", to_text(scenario)}, {"seeds", std::to_string(seeds)}});
  std::cout << "median relative chamfer after " << steps - 1 << " steps: " << short_fmt(100.0 * med_rel.back(), 3) << "%\n";
  return 0;
}

// --- eval -----------------------------------------------------------------------

int cmd_eval(const RunConfig& rc, const fs::path& pred_path, const fs::path& gt_path, const fs::path& out) {
  const auto pred = read_tracks(pred_path);
  const auto gt = read_tracks(gt_path);
  if (pred.size() != gt.size() || (!pred.empty() && pred.front().size() != gt.front().size()))
    throw Error("prediction is " + std::to_string(pred.size()) + "x" + std::to_string(pred.empty() ? 0 : pred.front().size()) +
                " but ground truth is " + std::to_string(gt.size()) + "x" + std::to_string(gt.empty() ? 0 : gt.front().size()));
  const auto te = metrics::track_eval(pred, gt);
  ensure_dir(out);
  std::ofstream csv(out / "eval_frames.csv");
  csv << "frame,chamfer,emd\n";
  double chamfer_sum = 0.0, emd_sum = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const double c = metrics::chamfer(pred[t], gt[t]);
    const double e = metrics::emd(pred[t], gt[t]);
    chamfer_sum += c;
    emd_sum += e;
    csv << t << "," << fmt(c) << "," << fmt(e) << "\n";
  }
  const double n = static_cast<double>(pred.size());
  io::KeyValues summary{{"frames", std::to_string(pred.size())},
                        {"points", std::to_string(pred.front().size())},
                        {"mte_mm", fmt(te.mte_mm)},
                        {"delta_avg", fmt(te.delta_avg)},
                        {"survival", fmt(te.survival)},
                        {"mean_chamfer", fmt(chamfer_sum / n)},
                        {"mean_emd", fmt(emd_sum / n)}};
  const metrics::TrackEvalOptions defaults;
  for (std::size_t i = 0; i < te.delta_per_threshold.size(); ++i)
    summary.emplace_back("delta_" + short_fmt(defaults.thresholds_mm[i]) + "mm", fmt(te.delta_per_threshold[i]));
  io::write_key_values(out / "eval.txt", summary);
  write_run_manifest(out, "eval", rc, {{"prediction", pred_path.string()}, {"ground_truth", gt_path.string()}});
  std::cout << "metric          value\n";
  for (const auto& [k, v] : summary) std::printf("%-15s %s\n", k.c_str(), short_fmt(std::stod(v), 6).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-based neural dynamics on Gaussian clouds: simulate, learn, predict, render, plan, evaluate"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_file, "INI config file (sections: data, world, model, train, plan, camera, render)");
  app.add_option("-s,--set", overrides, "override a config value, e.g. --set train.epochs=5")->take_all();

  std::string out, data, checkpoint, pred, gt, scenario = "rope-straighten", thresholds = "0.005,0.01,0.02,0.04";
  std::vector<std::string> inputs;
  bool resume = false, alpha = false, save_frames = false;
  std::size_t episode = 0, horizon = 10;
  long start = -1;
  int seeds = 5;

  auto* gen = app.add_subcommand("gen-data", "simulate episodes into a dataset directory");
  gen->add_option("-o,--out", out, "dataset directory (its parent must exist)")->required();

  auto* tr = app.add_subcommand("train", "train the dynamics model");
  tr->add_option("-d,--data", data, "dataset directory")->required();
  tr->add_option("-o,--out", out, "output directory for checkpoints and report")->required();
  tr->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  auto* pr = app.add_subcommand("predict", "roll the model out on a recorded episode and densify");
  pr->add_option("-m,--checkpoint", checkpoint, "model checkpoint")->required();
  pr->add_option("-d,--data", data, "dataset directory")->required();
  pr->add_option("-e,--episode", episode, "episode index");
  pr->add_option("--start", start, "start frame (default: k)");
  pr->add_option("-H,--horizon", horizon, "number of predicted steps");
  pr->add_option("-o,--out", out, "output directory")->required();

  auto* rn = app.add_subcommand("render", "render Gaussian cloud files to PNG");
  rn->add_option("inputs", inputs, "cloud files or directories of cloud_*.bin")->required();
  rn->add_option("-o,--out", out, "output directory")->required();
  rn->add_flag("--alpha", alpha, "also write silhouette (alpha) images");

  auto* pl = app.add_subcommand("plan", "closed-loop MPPI control in the simulated world");
  pl->add_option("-m,--checkpoint", checkpoint, "model checkpoint")->required();
  pl->add_option("-o,--out", out, "output directory")->required();
  pl->add_option("--scenario", scenario, "rope-straighten, blob-relocate or hold");
  pl->add_option("--seeds", seeds, "number of scenario seeds (from data.seed)");
  pl->add_option("--thresholds", thresholds, "comma-separated Chamfer thresholds (m) for the success table");
  pl->add_flag("--save-frames", save_frames, "write executed states as cloud files");

  auto* ev = app.add_subcommand("eval", "tracking and point-set metrics between two track files");
  ev->add_option("-p,--pred", pred, "predicted tracks (.trk)")->required();
  ev->add_option("-g,--gt", gt, "ground-truth tracks (.trk)")->required();
  ev->add_option("-o,--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig rc = RunConfig::load(config_file, overrides);
    if (gen->parsed()) return cmd_gen_data(rc, out);
    if (tr->parsed()) return cmd_train(rc, data, out, resume);
    if (pr->parsed()) return cmd_predict(rc, checkpoint, data, episode, start, horizon, out);
    if (rn->parsed()) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      return cmd_render(rc, paths, out, alpha);
    }
    if (pl->parsed()) {
      ScenarioKind kind{};
      from_text(scenario, kind);
      return cmd_plan(rc, checkpoint, out, kind, seeds, parse_list(thresholds), save_frames);
    }
    if (ev->parsed()) return cmd_eval(rc, pred, gt, out);
  } catch (const Error& e) {
    std::cerr << "gsdyn: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gsdyn: unexpected failure: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
