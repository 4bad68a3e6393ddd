#pragma once

// Umbrella header: multiple imputation for incompletely observed numeric
// tensors by Bayesian low-rank models, with either independent or separable
// (per-mode) noise covariance.

#include "tenmi/analysis.hpp"
#include "tenmi/cp_fit.hpp"
#include "tenmi/gibbs_independent.hpp"
#include "tenmi/gibbs_separable.hpp"
#include "tenmi/io.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/model_select.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/simulate.hpp"
#include "tenmi/tensor.hpp"
