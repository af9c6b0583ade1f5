#include "crlab/env.hpp"

#include <algorithm>
#include <cmath>

namespace crlab {

ContextSpec ContextSpec::cartpole() {
  ContextSpec s;
  s.dims.push_back(
      {"gravity",
       9.8,
       4.9,
       14.7,
       {0.98, 2.45, 3.92, 4.9, 7.35, 9.8, 12.25, 14.7, 15.68, 16.66, 17.15,
        17.64, 18.62, 19.6},
       {0.98, 2.45, 3.92, 15.68, 17.64, 19.6}});
  s.dims.push_back(
      {"length",
       0.5,
       0.35,
       0.75,
       {0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95,
        1.0},
       {0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 1.0}});
  s.validate();
  return s;
}

const ContextDim& ContextSpec::dim(const std::string& name) const {
  for (const auto& d : dims)
    if (d.name == name) return d;
  throw ContractError("context spec: unknown dim " + name);
}

bool ContextSpec::has_dim(const std::string& name) const {
  for (const auto& d : dims)
    if (d.name == name) return true;
  return false;
}

void ContextSpec::validate() const {
  check(!dims.empty(), "context spec: no dims");
  for (const auto& d : dims) {
    check(d.train_low < d.train_high,
          "context spec: train range empty for " + d.name);
    check(d.default_value >= d.train_low && d.default_value <= d.train_high,
          "context spec: default outside train range for " + d.name);
    for (const auto* vals : {&d.single_eval, &d.dual_eval}) {
      check(!vals->empty(), "context spec: empty eval list for " + d.name);
      for (std::size_t i = 1; i < vals->size(); ++i)
        check((*vals)[i] > (*vals)[i - 1],
              "context spec: eval values not strictly ascending for " + d.name);
    }
  }
}

ContextVector default_context(const ContextSpec& spec) {
  ContextVector ctx;
  for (const auto& d : spec.dims) ctx[d.name] = d.default_value;
  return ctx;
}

void validate_context(const ContextSpec& spec, const ContextVector& ctx) {
  check(ctx.size() == spec.dims.size(),
        "context: wrong number of dims (expected " +
            std::to_string(spec.dims.size()) + ", got " +
            std::to_string(ctx.size()) + ")");
  for (const auto& d : spec.dims) {
    auto it = ctx.find(d.name);
    check(it != ctx.end(), "context: missing dim " + d.name);
    check(std::isfinite(it->second) && it->second > 0.0,
          "context: dim " + d.name + " must be finite and strictly positive");
  }
}

std::vector<double> normalize_context(const ContextSpec& spec,
                                      const ContextVector& ctx) {
  validate_context(spec, ctx);
  std::vector<double> out;
  out.reserve(spec.dims.size());
  for (const auto& d : spec.dims)
    out.push_back((ctx.at(d.name) - d.train_low) / (d.train_high - d.train_low));
  return out;
}

std::vector<std::string> TrainingRegime::varied_dims(
    const ContextSpec& spec) const {
  switch (kind) {
    case RegimeKind::DefaultContext:
    case RegimeKind::Expert:
      return {};
    case RegimeKind::SingleVariation:
      check(spec.has_dim(varied_dim),
            "regime: unknown varied dim " + varied_dim);
      return {varied_dim};
    case RegimeKind::DualVariation: {
      std::vector<std::string> names;
      for (const auto& d : spec.dims) names.push_back(d.name);
      return names;
    }
  }
  throw ContractError("regime: invalid kind");
}

const char* to_string(Region r) {
  switch (r) {
    case Region::Interpolation:
      return "I";
    case Region::Extrapolation:
      return "E";
    case Region::InterExtrapolation:
      return "I+E";
  }
  return "?";
}

// ---------------------------------------------------------------------------

void cartpole_accelerations(const CartPoleState& s, double force,
                            double gravity, double half_length, double* x_acc,
                            double* theta_acc) {
  const double total_mass = CartPolePhysics::cart_mass + CartPolePhysics::pole_mass;
  const double pole_mass_length = CartPolePhysics::pole_mass * half_length;
  const double cos_t = std::cos(s.theta);
  const double sin_t = std::sin(s.theta);
  const double temp =
      (force + pole_mass_length * s.theta_dot * s.theta_dot * sin_t) /
      total_mass;
  const double denom =
      half_length *
      (4.0 / 3.0 - CartPolePhysics::pole_mass * cos_t * cos_t / total_mass);
  *theta_acc = (gravity * sin_t - cos_t * temp) / denom;
  *x_acc = temp - pole_mass_length * (*theta_acc) * cos_t / total_mass;
}

CartPole::CartPole(const ContextSpec& spec, const ContextVector& context)
    : context_(context) {
  validate_context(spec, context);
  check(spec.has_dim("gravity") && spec.has_dim("length"),
        "cartpole: spec must describe gravity and length");
  gravity_ = context.at("gravity");
  length_ = context.at("length");
}

std::array<double, 4> CartPole::reset(std::uint64_t seed) {
  Rng rng(seed);
  state_.x = rng.uniform(-0.05, 0.05);
  state_.x_dot = rng.uniform(-0.05, 0.05);
  state_.theta = rng.uniform(-0.05, 0.05);
  state_.theta_dot = rng.uniform(-0.05, 0.05);
  state_.steps_elapsed = 0;
  over_ = false;
  return {state_.x, state_.x_dot, state_.theta, state_.theta_dot};
}

StepResult CartPole::step(int action) {
  check(!over_, "cartpole: stepping a finished episode");
  check(action == 0 || action == 1, "cartpole: action must be 0 or 1");

  const double force =
      action == 1 ? CartPolePhysics::force_mag : -CartPolePhysics::force_mag;
  double x_acc = 0, theta_acc = 0;
  cartpole_accelerations(state_, force, gravity_, length_, &x_acc, &theta_acc);

  // Semi-implicit Euler: velocities first, positions with the new velocities.
  state_.x_dot += CartPolePhysics::dt * x_acc;
  state_.x += CartPolePhysics::dt * state_.x_dot;
  state_.theta_dot += CartPolePhysics::dt * theta_acc;
  state_.theta += CartPolePhysics::dt * state_.theta_dot;
  state_.steps_elapsed += 1;

  StepResult r;
  r.observation = {state_.x, state_.x_dot, state_.theta, state_.theta_dot};
  r.reward = 1.0;
  r.terminated = std::abs(state_.x) > CartPolePhysics::x_limit ||
                 std::abs(state_.theta) > CartPolePhysics::theta_limit;
  r.truncated = state_.steps_elapsed >= CartPolePhysics::step_cap;
  over_ = r.terminated || r.truncated;
  return r;
}

// ---------------------------------------------------------------------------

std::vector<ContextVector> sample_train_contexts(const ContextSpec& spec,
                                                 const TrainingRegime& regime,
                                                 int n, std::uint64_t seed) {
  check(n >= 1, "sample_train_contexts: n must be >= 1");
  Rng rng(seed);
  std::vector<ContextVector> out;
  out.reserve(n);

  switch (regime.kind) {
    case RegimeKind::DefaultContext: {
      for (int i = 0; i < n; ++i) out.push_back(default_context(spec));
      break;
    }
    case RegimeKind::Expert: {
      validate_context(spec, regime.expert_context);
      for (int i = 0; i < n; ++i) out.push_back(regime.expert_context);
      break;
    }
    case RegimeKind::SingleVariation: {
      const ContextDim& d = spec.dim(regime.varied_dim);
      for (int i = 0; i < n; ++i) {
        ContextVector ctx = default_context(spec);
        ctx[d.name] = rng.uniform(d.train_low, d.train_high);
        out.push_back(std::move(ctx));
      }
      break;
    }
    case RegimeKind::DualVariation: {
      for (int i = 0; i < n; ++i) {
        ContextVector ctx;
        for (const auto& d : spec.dims)
          ctx[d.name] = rng.uniform(d.train_low, d.train_high);
        out.push_back(std::move(ctx));
      }
      break;
    }
  }
  return out;
}

Region classify_region(const ContextVector& ctx, const ContextSpec& spec,
                       const TrainingRegime& regime) {
  validate_context(spec, ctx);
  auto varied = regime.varied_dims(spec);
  if (varied.empty()) return Region::Interpolation;

  int inside = 0;
  for (const auto& name : varied) {
    const ContextDim& d = spec.dim(name);
    double v = ctx.at(name);
    // Closed boundaries count as inside.
    if (v >= d.train_low && v <= d.train_high) ++inside;
  }
  if (inside == static_cast<int>(varied.size())) return Region::Interpolation;
  if (inside == 0) return Region::Extrapolation;
  return Region::InterExtrapolation;
}

}  // namespace crlab
