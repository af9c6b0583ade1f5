#pragma once

// Contextual CartPole: classic dynamics with gravity and pole half-length
// taken from an episode-constant context vector, plus the context sampling
// schedules and interpolation/extrapolation region classification used by
// training and evaluation.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "crlab/common.hpp"

namespace crlab {

struct ContextDim {
  std::string name;
  double default_value = 0;
  double train_low = 0;
  double train_high = 0;
  std::vector<double> single_eval;
  std::vector<double> dual_eval;
};

struct ContextSpec {
  std::vector<ContextDim> dims;

  static ContextSpec cartpole();

  const ContextDim& dim(const std::string& name) const;
  bool has_dim(const std::string& name) const;
  void validate() const;
};

// Keys must exactly match the spec's dim names.
using ContextVector = std::map<std::string, double>;

ContextVector default_context(const ContextSpec& spec);
void validate_context(const ContextSpec& spec, const ContextVector& ctx);

// Min-max normalization by the training range; how context enters networks.
std::vector<double> normalize_context(const ContextSpec& spec,
                                      const ContextVector& ctx);

enum class RegimeKind { DefaultContext, SingleVariation, DualVariation, Expert };

struct TrainingRegime {
  RegimeKind kind = RegimeKind::DefaultContext;
  std::string varied_dim;        // SingleVariation only
  ContextVector expert_context;  // Expert only

  std::vector<std::string> varied_dims(const ContextSpec& spec) const;
};

enum class Region { Interpolation, Extrapolation, InterExtrapolation };

const char* to_string(Region r);

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

struct CartPoleState {
  double x = 0, x_dot = 0, theta = 0, theta_dot = 0;
  int steps_elapsed = 0;
};

struct StepResult {
  std::array<double, 4> observation{};
  double reward = 0;
  bool terminated = false;
  bool truncated = false;
};

struct CartPolePhysics {
  static constexpr double cart_mass = 1.0;     // kg
  static constexpr double pole_mass = 0.1;     // kg
  static constexpr double force_mag = 10.0;    // N
  static constexpr double dt = 0.02;           // s
  static constexpr double x_limit = 2.4;       // m
  static constexpr double theta_limit = 12.0 * 3.14159265358979323846 / 180.0;
  static constexpr int step_cap = 500;
};

// Raw dynamics: accelerations for an arbitrary applied force.
void cartpole_accelerations(const CartPoleState& s, double force,
                            double gravity, double half_length, double* x_acc,
                            double* theta_acc);

class CartPole {
 public:
  CartPole(const ContextSpec& spec, const ContextVector& context);

  std::array<double, 4> reset(std::uint64_t seed);
  StepResult step(int action);

  const CartPoleState& state() const { return state_; }
  const ContextVector& context() const { return context_; }
  bool episode_over() const { return over_; }

 private:
  ContextVector context_;
  double gravity_ = 0, length_ = 0;
  CartPoleState state_{};
  bool over_ = true;  // reset() required before stepping
};

// ---------------------------------------------------------------------------
// Context schedules + regions
// ---------------------------------------------------------------------------

std::vector<ContextVector> sample_train_contexts(const ContextSpec& spec,
                                                 const TrainingRegime& regime,
                                                 int n, std::uint64_t seed);

Region classify_region(const ContextVector& ctx, const ContextSpec& spec,
                       const TrainingRegime& regime);

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

// obs has length T+1 (reset observation first); actions/rewards length T.
struct EpisodeRecord {
  ContextVector context;
  std::vector<std::array<double, 4>> obs;
  std::vector<int> actions;
  std::vector<double> rewards;
  bool terminated = false;
  bool truncated = false;

  int length() const { return static_cast<int>(actions.size()); }
  double episode_return() const {
    double s = 0;
    for (double r : rewards) s += r;
    return s;
  }
};

}  // namespace crlab
