#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnprior/prior.hpp"

namespace attnprior::consistency {

using prior::AttentionPriorParams;
using prior::EmbeddingSequence;
using prior::Mat;
using prior::Vec;

/// Joint token/embedding model: the attention prior over embeddings paired
/// with a linear-softmax decoder head on x_t (optionally biased by the
/// previous token). causal=false builds the deliberate counterexample whose
/// position-t logits also read x_{t+1}.
struct TokenModelSpec {
  int vocab = 2;
  Mat head_w;   // K x d
  Vec head_b;   // K
  Mat trans_b;  // K x K bias indexed by y_{t-1} (zero rows allowed)
  AttentionPriorParams prior;
  bool causal = true;
  Mat peek_w;  // K x d weight on x_{t+1} when non-causal

  static TokenModelSpec random(int vocab, Index d, std::uint64_t seed, double coupling_a = -0.25);
};

/// Categorical P(y_t = . | y_{<t}, x) at 1-based position t of a length-n
/// system. Only the non-causal variant looks past position t.
Vec token_factor(const TokenModelSpec& spec, int y_prev, const Mat& x, Index t);

double cond_log_prob(const TokenModelSpec& spec, const std::vector<int>& y, const Mat& x);

/// log P(y, x) = log P(y | x) + log p_sigma(x).
double joint_log_prob(const TokenModelSpec& spec, const std::vector<int>& y, const Mat& x);

struct SumOutResult {
  double summed = 0;   // sum_{y_n} P(y_{1:n} | x_{1:n})
  double prefix = 0;   // P(y_{1:n-1} | x_{1:n-1})
};
SumOutResult sum_out_last_token(const TokenModelSpec& spec, const std::vector<int>& y_prefix,
                                const Mat& x);

struct MarginalEstimate {
  double value = 0;
  double standard_error = 0;
  std::string method;
  int n_rejected = 0;
};

/// Monte Carlo marginal P(y) by ancestral sampling of the prior (d = 1).
MarginalEstimate marginal_token_prob(const TokenModelSpec& spec, const std::vector<int>& y,
                                     int n_samples, std::uint64_t seed);

struct CheckReport {
  std::string name;
  std::string instance;
  double discrepancy = 0;
  double tolerance = 0;
  bool pass = false;
};

/// Shared-latent-sample verification that sum_{y_n} P(y_{1:n}) = P(y_{1:n-1})
/// over every prefix of length n-1. The same draws serve both sides, so the
/// identity holds per sample for a causal spec.
CheckReport kolmogorov_consistency_check(const TokenModelSpec& spec, Index n, int n_samples,
                                         std::uint64_t seed);

/// The discrete two-token system with P(y1=1|y2=1)=0.9, P(y1=1|y2=0)=0.1,
/// P(y2=1)=p2. Returns (summed-out value, length-1 value 0.5).
std::pair<double, double> counterexample_appendix_c3(double p2 = 0.9);

/// Quadrature check that integrating out the last latent reduces the prior
/// n -> n-1 under a fixed integrand f.
enum class LatentIntegrand { One, SmoothedLikelihood };
CheckReport integrate_out_last_latent_check(const TokenModelSpec& spec, LatentIntegrand f,
                                            std::uint64_t seed);

/// Gauss-Hermite variant at a = 0, where every conditional is exactly
/// Gaussian; tolerance 1e-6.
CheckReport integrate_out_last_latent_gauss_hermite(const TokenModelSpec& spec);

/// Empirical cylinder refinement: nu(C(y_{1:n})) vs sum_y nu(C(y_{1:n}, y))
/// estimated from two independent ancestral runs at horizons n and n+1.
CheckReport cylinder_refinement_check(const TokenModelSpec& spec, Index n, int n_samples,
                                      std::uint64_t seed);

}  // namespace attnprior::consistency
