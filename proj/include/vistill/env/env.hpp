#pragma once

// Deterministic 2D visuomotor tasks rendered to 64x64 frames.
//
// push_to_goal: a disc agent pushes a colored cube to a goal ring. Contact is
// quasi-static positional projection: when the agent overlaps the object, the
// object is displaced along the contact normal until they separate.
//
// three_stamps: the agent must dwell at three target sites in order; each
// completed dwell permanently prints a glyph. The proprioceptive state holds
// only the agent position, so stage identity is visible exclusively in the
// rendered stamps.
//
// ID / OOD resets draw initial configurations from disjoint rectangles; the
// C-Gen split uses ID geometry with held-out object colors (push task only).

#include <array>
#include <cmath>
#include <optional>

#include "vistill/core/rng.hpp"
#include "vistill/core/tensor.hpp"
#include "vistill/data/raster.hpp"

namespace vistill::env {

using data::Image;
using data::Rgb;
using data::ShapeKind;

enum class Task { PushToGoal, ThreeStamps };
enum class Split { ID, OOD, CGen };

inline std::string task_name(Task t) { return t == Task::PushToGoal ? "push_to_goal" : "three_stamps"; }
inline Task task_from(const std::string& s) {
  if (s == "push_to_goal") return Task::PushToGoal;
  if (s == "three_stamps") return Task::ThreeStamps;
  throw ConfigError("unknown task '" + s + "'");
}
inline std::string split_name(Split s) { return s == Split::ID ? "ID" : (s == Split::OOD ? "OOD" : "C-Gen"); }
inline Split split_from(const std::string& s) {
  if (s == "ID") return Split::ID;
  if (s == "OOD") return Split::OOD;
  if (s == "C-Gen" || s == "CGen") return Split::CGen;
  throw ConfigError("unknown split '" + s + "'");
}

struct Rect {
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(float x, float y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool disjoint(const Rect& o) const { return x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0; }
  std::array<float, 2> sample(RngStream& rng) const {
    return {static_cast<float>(rng.uniform(x0, x1)), static_cast<float>(rng.uniform(y0, y1))};
  }
};

struct EnvConfig {
  Task task = Task::PushToGoal;
  int64_t image_size = 64;
  int64_t horizon = 60;
  float success_threshold = 5.f;  // pixels
  float max_step = 4.f;           // per-axis action bound
  float agent_radius = 3.f;
  float object_radius = 4.f;
  float goal_ring_radius = 5.f;
  float dwell_radius = 4.f;
  int dwell_steps = 2;
  uint64_t texture_seed = 1234;

  // push_to_goal split rectangles (disjoint ID vs OOD per entity)
  Rect id_agent{8, 20, 16, 42}, ood_agent{8, 46, 16, 56};
  Rect id_object{26, 24, 36, 40}, ood_object{26, 44, 34, 52};
  Rect id_goal{44, 24, 54, 40}, ood_goal{44, 44, 54, 52};

  // three_stamps target site rectangles
  std::array<Rect, 3> id_targets{{{12, 14, 20, 22}, {28, 14, 36, 22}, {44, 14, 52, 22}}};
  std::array<Rect, 3> ood_targets{{{12, 30, 20, 38}, {28, 30, 36, 38}, {44, 30, 52, 38}}};
  Rect stamps_agent{24, 46, 40, 56};

  Rgb train_object_color{0.90f, 0.55f, 0.15f};                          // orange cube
  std::vector<Rgb> cgen_colors{{0.92f, 0.86f, 0.20f}, {0.25f, 0.75f, 0.30f}};  // yellow, green

  void validate() const {
    if (horizon < 1) throw ConfigError("env: horizon must be >= 1");
    if (success_threshold <= 0) throw ConfigError("env: success threshold must be positive");
    if (max_step <= 0) throw ConfigError("env: max_step must be positive");
    if (!id_agent.disjoint(ood_agent) || !id_object.disjoint(ood_object) || !id_goal.disjoint(ood_goal))
      throw ConfigError("env: ID and OOD rectangles must be disjoint");
    for (int i = 0; i < 3; ++i)
      if (!id_targets[static_cast<size_t>(i)].disjoint(ood_targets[static_cast<size_t>(i)]))
        throw ConfigError("env: ID and OOD target rectangles must be disjoint");
    if (cgen_colors.empty()) throw ConfigError("env: C-Gen palette is empty");
  }
};

struct EnvState {
  Task task = Task::PushToGoal;
  std::array<float, 2> agent{};
  std::array<float, 2> object{};
  std::array<float, 2> goal{};
  std::array<std::array<float, 2>, 3> targets{};
  int stamps_placed = 0;
  int dwell = 0;
  int64_t step_count = 0;
  Rgb object_color{};
};

struct StepInfo {
  bool done = false;
  bool success = false;
  bool action_clipped = false;
};

class SimEnv {
 public:
  explicit SimEnv(EnvConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    // state-independent background, fixed per environment
    background_ = Image(cfg_.image_size, cfg_.image_size);
    RngStream rng(derive_seed(cfg_.texture_seed, "env-texture"));
    data::fill_textured_background(background_, rng, {0.42f, 0.46f, 0.50f}, 0.05f, 0.015f);
  }

  const EnvConfig& config() const { return cfg_; }

  EnvState reset(Split split, RngStream& rng) const {
    EnvState s;
    s.task = cfg_.task;
    if (cfg_.task == Task::PushToGoal) {
      const bool ood = split == Split::OOD;
      if (split == Split::CGen)
        s.object_color = cfg_.cgen_colors[static_cast<size_t>(rng.randint(
            0, static_cast<int64_t>(cfg_.cgen_colors.size())))];
      else
        s.object_color = cfg_.train_object_color;
      s.agent = (ood ? cfg_.ood_agent : cfg_.id_agent).sample(rng);
      s.object = (ood ? cfg_.ood_object : cfg_.id_object).sample(rng);
      s.goal = (ood ? cfg_.ood_goal : cfg_.id_goal).sample(rng);
    } else {
      if (split == Split::CGen) throw ConfigError("env: C-Gen split is defined for push_to_goal only");
      const auto& rects = split == Split::OOD ? cfg_.ood_targets : cfg_.id_targets;
      for (int i = 0; i < 3; ++i) s.targets[static_cast<size_t>(i)] = rects[static_cast<size_t>(i)].sample(rng);
      s.agent = cfg_.stamps_agent.sample(rng);
      s.object_color = cfg_.train_object_color;
    }
    return s;
  }

  StepInfo step(EnvState& s, float ax, float ay) const {
    StepInfo info;
    const float cax = std::clamp(ax, -cfg_.max_step, cfg_.max_step);
    const float cay = std::clamp(ay, -cfg_.max_step, cfg_.max_step);
    info.action_clipped = (cax != ax) || (cay != ay);
    const float lo = cfg_.agent_radius, hi = static_cast<float>(cfg_.image_size) - cfg_.agent_radius;
    s.agent[0] = std::clamp(s.agent[0] + cax, lo, hi);
    s.agent[1] = std::clamp(s.agent[1] + cay, lo, hi);
    if (cfg_.task == Task::PushToGoal) {
      // quasi-static positional projection of the pushed object
      const float rsum = cfg_.agent_radius + cfg_.object_radius;
      float dx = s.object[0] - s.agent[0], dy = s.object[1] - s.agent[1];
      float d = std::sqrt(dx * dx + dy * dy);
      if (d < rsum) {
        float nx = 1.f, ny = 0.f;
        if (d > 1e-6f) {
          nx = dx / d;
          ny = dy / d;
        }
        const float push = rsum - d;
        const float olo = cfg_.object_radius, ohi = static_cast<float>(cfg_.image_size) - cfg_.object_radius;
        s.object[0] = std::clamp(s.object[0] + nx * push, olo, ohi);
        s.object[1] = std::clamp(s.object[1] + ny * push, olo, ohi);
      }
      const float gx = s.object[0] - s.goal[0], gy = s.object[1] - s.goal[1];
      info.success = std::sqrt(gx * gx + gy * gy) < cfg_.success_threshold;
    } else {
      if (s.stamps_placed < 3) {
        const auto& t = s.targets[static_cast<size_t>(s.stamps_placed)];
        const float dx = s.agent[0] - t[0], dy = s.agent[1] - t[1];
        if (std::sqrt(dx * dx + dy * dy) <= cfg_.dwell_radius) {
          if (++s.dwell >= cfg_.dwell_steps) {
            ++s.stamps_placed;
            s.dwell = 0;
          }
        } else {
          s.dwell = 0;
        }
      }
      info.success = s.stamps_placed == 3;
    }
    ++s.step_count;
    info.done = info.success || s.step_count >= cfg_.horizon;
    return info;
  }

  /// Frame is a pure function of (state, palette): background is fixed,
  /// everything else derives from the state fields.
  Image render(const EnvState& s) const {
    Image img = background_;
    if (cfg_.task == Task::PushToGoal) {
      draw_shape(img, ShapeKind::Ring, s.goal[0], s.goal[1], cfg_.goal_ring_radius, 0.f, {0.20f, 0.35f, 0.85f});
      draw_shape(img, ShapeKind::Square, s.object[0], s.object[1], cfg_.object_radius * 1.1f, 0.f, s.object_color);
      draw_shape(img, ShapeKind::Circle, s.agent[0], s.agent[1], cfg_.agent_radius, 0.f, {0.95f, 0.95f, 0.95f});
    } else {
      static constexpr ShapeKind glyphs[3] = {ShapeKind::Triangle, ShapeKind::Square, ShapeKind::Cross};
      for (int i = 0; i < 3; ++i) {
        const auto& t = s.targets[static_cast<size_t>(i)];
        draw_shape(img, ShapeKind::Ring, t[0], t[1], cfg_.dwell_radius + 1.f, 0.f, {0.62f, 0.62f, 0.62f}, 0.55f);
        if (i < s.stamps_placed)
          draw_shape(img, glyphs[i], t[0], t[1], cfg_.dwell_radius - 0.5f, 0.f, {0.55f, 0.10f, 0.12f});
      }
      draw_shape(img, ShapeKind::Circle, s.agent[0], s.agent[1], cfg_.agent_radius, 0.f, {0.95f, 0.95f, 0.95f});
    }
    return img;
  }

  // split predicates used by the disjointness tests
  bool state_in_split(const EnvState& s, Split split) const {
    if (cfg_.task == Task::PushToGoal) {
      const bool id = cfg_.id_agent.contains(s.agent[0], s.agent[1]) &&
                      cfg_.id_object.contains(s.object[0], s.object[1]) &&
                      cfg_.id_goal.contains(s.goal[0], s.goal[1]);
      const bool ood = cfg_.ood_agent.contains(s.agent[0], s.agent[1]) &&
                       cfg_.ood_object.contains(s.object[0], s.object[1]) &&
                       cfg_.ood_goal.contains(s.goal[0], s.goal[1]);
      return split == Split::OOD ? ood : id;
    }
    const auto& rects = split == Split::OOD ? cfg_.ood_targets : cfg_.id_targets;
    for (int i = 0; i < 3; ++i)
      if (!rects[static_cast<size_t>(i)].contains(s.targets[static_cast<size_t>(i)][0],
                                                  s.targets[static_cast<size_t>(i)][1]))
        return false;
    return true;
  }

 private:
  EnvConfig cfg_;
  Image background_;
};

/// Scripted expert. push_to_goal: navigate to the push line behind the
/// object (detouring around it when the direct path would disturb it), then
/// drive through the object toward the goal. three_stamps: walk to the next
/// unstamped site and hold still until the stamp lands.
inline std::array<float, 2> scripted_expert(const SimEnv& env, const EnvState& s, double noise_sigma = 0.0,
                                            RngStream* noise_rng = nullptr) {
  const auto& cfg = env.config();
  auto clip_step = [&](float dx, float dy) -> std::array<float, 2> {
    return {std::clamp(dx, -cfg.max_step, cfg.max_step), std::clamp(dy, -cfg.max_step, cfg.max_step)};
  };
  std::array<float, 2> a{0.f, 0.f};
  if (cfg.task == Task::PushToGoal) {
    const float tx = s.goal[0] - s.object[0], ty = s.goal[1] - s.object[1];
    const float td = std::sqrt(tx * tx + ty * ty);
    if (td >= cfg.success_threshold * 0.6f) {
      const float ux = tx / td, uy = ty / td;
      const float gap = cfg.agent_radius + cfg.object_radius + 0.5f;
      const float bx = s.object[0] - ux * gap, by = s.object[1] - uy * gap;
      const float ax_ = bx - s.agent[0], ay_ = by - s.agent[1];
      const float ad = std::sqrt(ax_ * ax_ + ay_ * ay_);
      if (ad > 1.2f) {
        // would the straight path to the push point graze the object?
        const float ox = s.object[0] - s.agent[0], oy = s.object[1] - s.agent[1];
        const float seg2 = ax_ * ax_ + ay_ * ay_;
        const float t = std::clamp((ox * ax_ + oy * ay_) / std::max(seg2, 1e-6f), 0.f, 1.f);
        const float cx = s.agent[0] + t * ax_ - s.object[0], cy = s.agent[1] + t * ay_ - s.object[1];
        const float clearance = std::sqrt(cx * cx + cy * cy);
        const float rsum = cfg.agent_radius + cfg.object_radius;
        if (clearance >= rsum + 0.75f) {
          a = clip_step(ax_, ay_);
        } else {
          // orbit the object tangentially until the path clears; the side is
          // whichever half-plane (w.r.t. the push line) the agent is already on
          const float od = std::max(std::sqrt(ox * ox + oy * oy), 1e-6f);
          const float dox = ox / od, doy = oy / od;
          const float rel = -(s.agent[0] - s.object[0]) * uy + (s.agent[1] - s.object[1]) * ux;
          const float side = rel >= 0 ? 1.f : -1.f;
          float mx = -doy * side, my = dox * side;  // tangent
          if (od < rsum + 1.0f) {                   // too close: bias outward
            mx -= 0.6f * dox;
            my -= 0.6f * doy;
          }
          const float mn = std::max(std::sqrt(mx * mx + my * my), 1e-6f);
          a = clip_step(mx / mn * cfg.max_step, my / mn * cfg.max_step);
        }
      } else {
        a = clip_step(ux * cfg.max_step, uy * cfg.max_step);  // push straight through
      }
    }
  } else {
    if (s.stamps_placed < 3) {
      const auto& t = s.targets[static_cast<size_t>(s.stamps_placed)];
      const float dx = t[0] - s.agent[0], dy = t[1] - s.agent[1];
      if (std::sqrt(dx * dx + dy * dy) > 1.0f) a = clip_step(dx, dy);
      // inside the site: hold still and let the dwell counter run
    }
  }
  if (noise_sigma > 0 && noise_rng) {
    a[0] = std::clamp(a[0] + static_cast<float>(noise_rng->normal(0, noise_sigma)), -cfg.max_step, cfg.max_step);
    a[1] = std::clamp(a[1] + static_cast<float>(noise_rng->normal(0, noise_sigma)), -cfg.max_step, cfg.max_step);
  }
  return a;
}

}  // namespace vistill::env
