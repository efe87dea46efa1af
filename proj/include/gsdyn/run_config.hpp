#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gsdyn/camera.hpp"
#include "gsdyn/config.hpp"
#include "gsdyn/dyn_model.hpp"
#include "gsdyn/planner.hpp"
#include "gsdyn/renderer.hpp"
#include "gsdyn/synth_world.hpp"
#include "gsdyn/training.hpp"

namespace gsdyn {

struct DataConfig {
  int episodes = 20;
  std::uint64_t seed = 0;

  template <class F>
  void visit(F&& f) {
    f("episodes", episodes);
    f("seed", seed);
  }
};

struct RenderConfig {
  Vec3 background{0.5, 0.5, 0.5};
  double cutoff_sigma = 3.0;

  template <class F>
  void visit(F&& f) {
    f("background", background);
    f("cutoff_sigma", cutoff_sigma);
  }

  RenderOptions options() const { return {background, cutoff_sigma}; }
};

/// Every module configuration in one place, as read from an INI file with
/// one section per member and then overridden by `section.key=value` pairs.
struct RunConfig {
  DataConfig data;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  PlanConfig plan;
  CameraConfig camera;
  RenderConfig render;

  template <class F>
  void visit_sections(F&& f) {
    f("data", data);
    f("world", world);
    f("model", model);
    f("train", train);
    f("plan", plan);
    f("camera", camera);
    f("render", render);
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    bool found = false;
    visit_sections([&](const char* name, auto& cfg) {
      if (section != name) return;
      found = true;
      set_config_field(cfg, section, key, value);
    });
    if (!found) throw Error("unknown config section [" + section + "]");
  }

  /// Applies "section.key=value".
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw Error("override '" + assignment + "' is not of the form section.key=value");
    set(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
  }

  void load_file(const std::filesystem::path& path) {
    const Ini tree = read_ini(path);
    for (const auto& [section, node] : tree) {
      if (node.empty() && !node.data().empty())
        throw Error("config '" + path.string() + "': key '" + section + "' is outside any section");
      for (const auto& [key, leaf] : node) set(section, key, leaf.data());
    }
  }

  void validate() const {
    if (data.episodes < 0) throw Error("data: episodes must be non-negative");
    world.validate();
    model.validate();
    train.validate();
    plan.validate();
    camera.model();
    if (!(render.cutoff_sigma > 0.0)) throw Error("render: cutoff_sigma must be positive");
  }

  io::KeyValues echo() const {
    io::KeyValues kv;
    auto copy = *this;
    copy.visit_sections([&](const char* name, auto& cfg) {
      for (auto& p : echo_config(cfg, name)) kv.push_back(std::move(p));
    });
    return kv;
  }

  static RunConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    RunConfig rc;
    if (!file.empty()) rc.load_file(file);
    for (const auto& o : overrides) rc.apply_override(o);
    rc.validate();
    return rc;
  }
};

}  // namespace gsdyn
