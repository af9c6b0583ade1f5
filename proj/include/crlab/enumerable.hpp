#pragma once

// Tiny single-group instances of the world model whose latent paths can be
// enumerated exhaustively. They provide exact reference values for the
// variational objective: the marginal log-likelihood ln p(o_{1:H} | a, c)
// summed over all class sequences, and the evidence lower bound with the
// expectation over the filtering posterior taken exactly.

#include <vector>

#include "crlab/worldmodel.hpp"

namespace crlab {

struct EnumerableModelSpec {
  ModelSizes sizes;  // latent_groups must be 1
  ConditioningMode mode = ConditioningMode::CRSSM;
  ParamStore<double> params;
  int horizon = 0;

  int num_classes() const { return sizes.latent_classes; }
  void validate() const;
};

// Random small instance; parameters are drawn from the usual initializer and
// then perturbed so biases and gains move off their init values.
EnumerableModelSpec random_enumerable(int num_classes, int horizon,
                                      ConditioningMode mode, Rng& rng);

// Observations: horizon entries, obs_dim x 1. Actions: horizon entries of
// one-hot action_dim x 1; actions[t] precedes obs[t]. ctx_norm: ctx_dim x 1.
double exact_loglik(const EnumerableModelSpec& spec,
                    const std::vector<MatT<double>>& obs,
                    const std::vector<MatT<double>>& actions,
                    const MatT<double>& ctx_norm);

struct ExactElbo {
  double reconstruction = 0;  // E_q[ sum_t ln p(o_t | h_t, z_t) ]
  double complexity = 0;      // E_q[ sum_t ln q(z_t|.) - ln p(z_t|h_t) ]
  double elbo() const { return reconstruction - complexity; }
};

ExactElbo exact_elbo(const EnumerableModelSpec& spec,
                     const std::vector<MatT<double>>& obs,
                     const std::vector<MatT<double>>& actions,
                     const MatT<double>& ctx_norm);

}  // namespace crlab
