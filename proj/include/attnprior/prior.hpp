#pragma once

#include <optional>
#include <vector>

#include "attnprior/prng.hpp"
#include "attnprior/tape.hpp"
#include "attnprior/tensor.hpp"

namespace attnprior::prior {

using Mat = MatX<double>;
using Vec = VecX<double>;

constexpr double kDetFloor = 1e-12;
constexpr double kSupportTieTol = 1e-9;

/// Latent-noise attention prior over embedding sequences. The coupling
/// matrix A = W_K^T W_Q is cached and recomputed whenever a projection
/// changes; the cache can be corrupted on purpose to exercise the verify
/// suite's negative control.
class AttentionPriorParams {
 public:
  AttentionPriorParams(Mat wq, Mat wk, Mat wv, double sigma, MaskMode mode = MaskMode::Strict);

  /// d=1 convenience: coupling a = W_K W_Q, values = embeddings.
  static AttentionPriorParams scalar(double a, double sigma = 1.0, MaskMode mode = MaskMode::Strict);

  Index dim() const { return wq_.rows(); }
  const Mat& wq() const { return wq_; }
  const Mat& wk() const { return wk_; }
  const Mat& wv() const { return wv_; }
  double sigma() const { return sigma_; }
  MaskMode mode() const { return mode_; }
  const Mat& coupling() const { return coupling_; }

  void set_wq(Mat wq);
  void set_wk(Mat wk);
  void set_wv(Mat wv);
  void set_mode(MaskMode m) { mode_ = m; }

  bool coupling_cache_consistent() const;
  void corrupt_coupling_cache_for_test();

 private:
  Mat wq_, wk_, wv_;
  double sigma_;
  MaskMode mode_;
  Mat coupling_;
};

struct EmbeddingSequence {
  Mat x;  // L x d
  EmbeddingSequence() = default;
  explicit EmbeddingSequence(Mat m);
  Index length() const { return x.rows(); }
  Index dim() const { return x.cols(); }
};

struct PositionStats {
  Index t = 0;        // 1-based
  Vec alpha;          // context weights, length t-1 (strict) or t (inclusive)
  Vec v_bar;          // attention-weighted value mean
  Mat Sigma;          // attention-weighted value covariance
  Mat CrossCov;       // sum_s alpha_ts (v_s - v_bar) k_s^T
  double alpha_tt = 0.0;
  Mat diag_block;     // exact d e_t / d x_t
  double margin_det = 0.0;       // |det(diag_block)|
  double margin_spectral = 0.0;  // 1 - rho(Sigma A)
};

struct DensityReport {
  Mat residuals;                     // L x d
  double quad_energy = 0.0;          // sum ||e_t||^2 / (2 sigma^2)
  std::vector<double> logdet_terms;  // -inf sentinel for invalid positions
  double total_log_density = 0.0;
  double sequence_margin = 0.0;      // min_t |det(diag block)|
  std::vector<Index> support_tokens; // 1-based argmin set, tie tol 1e-9
  bool valid = true;
  int invalid_positions = 0;
};

enum class MarginKind { Det, Spectral };

/// mu_t and the full position statistics. t is 1-based; strict mode at t=1
/// has an empty context and uses the detrended convention mu_1 = 0,
/// Sigma_1 = 0, diag block = I.
PositionStats context_summary(const AttentionPriorParams& p, const EmbeddingSequence& x, Index t);

/// Scalar diagonal derivative 1 - a * Var_t from explicit weights/values.
double scalar_diag_derivative(double a, const Vec& alpha, const Vec& values);

/// Exact d e_t / d x_t. Strict: I - CrossCov W_Q. Inclusive additionally
/// subtracts alpha_tt W_V and the self-key weight path
/// alpha_tt (v_t - vbar) q_t^T W_K.
Mat diag_jacobian_block(const AttentionPriorParams& p, const EmbeddingSequence& x, Index t);

double margin(const AttentionPriorParams& p, const EmbeddingSequence& x, Index t, MarginKind kind);

std::pair<double, std::vector<Index>> sequence_margin_and_support(
    const AttentionPriorParams& p, const EmbeddingSequence& x, MarginKind kind = MarginKind::Det);

/// Exact change-of-variables log-density, assembled from the per-position
/// diagonal blocks (never a full Ld x Ld determinant). A position whose
/// signed block determinant falls below det_floor is at or past the
/// degeneracy surface: its logdet term is the -inf sentinel and the report
/// is flagged invalid.
DensityReport log_density(const AttentionPriorParams& p, const EmbeddingSequence& x,
                          double det_floor = kDetFloor);

/// Spectral radius estimate by power iteration with a fixed seeded start
/// vector (200 iterations or 1e-10 relative convergence).
double spectral_radius(const Mat& m, int max_iters = 200, double tol = 1e-10);

/// Residual map e_t(x) = x_t - mu_t(x), all positions.
Mat residuals(const AttentionPriorParams& p, const EmbeddingSequence& x);

/// One-step conditional density p(x_t | x_{<t}) for d=1 strict priors:
/// phi_sigma(e_t) * |m_t|.
double scalar_conditional_density(const AttentionPriorParams& p, const Vec& prefix_and_xt, Index t);

/// Invert the d=1 residual map at position t: solve x_t with
/// e_t(x_prefix, x_t) = eps. Requires a globally monotone map (a <= 0).
double scalar_sample_next(const AttentionPriorParams& p, const Vec& prefix, double eps);

/// Ancestral draw of a length-L scalar sequence from the prior.
Vec scalar_ancestral_sample(const AttentionPriorParams& p, Index L, Prng& rng);

// ---------------------------------------------------------------------------
// Figure reproductions (theory illustrations).

struct Figure2Row {
  double a, x3, var, factor, density;
};
struct Figure2Config {
  std::vector<double> couplings{-0.55, -0.35, -0.25, 0.0, 0.25, 0.35, 0.55};
  double x1 = 0.0, x2 = 2.0;
  double lo = -4.0, hi = 6.0;
  int n_grid = 1001;
  double sigma = 1.0;
};
std::vector<Figure2Row> figure2_sweep(const Figure2Config& cfg);

struct Figure3Row {
  double var_final, factor_final, log_density;
  bool valid;
};
struct Figure3Config {
  double a = 0.2;
  Index n = 5;
  int n_sequences = 4000;
  double draw_std = 2.0;  // N(0, 4)
  double sigma = 1.0;
};
struct Figure3Result {
  std::vector<Figure3Row> rows;
  int valid_count = 0;
};
Figure3Result figure3_population(const Figure3Config& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training-time penalty.

/// Build the margin penalty -sum_t log|det(I - Sigma_t W^T)| on a tape,
/// differentiable in both the embeddings and W. The prior here is the
/// learnable single-matrix parameterization with logits x_t^T W x_s and
/// values = embeddings (strict causal mask), so the diagonal block is
/// exactly I - Sigma_t W^T.
template <class S>
typename TapeT<S>::Var margin_penalty_on_tape(TapeT<S>& tape, typename TapeT<S>::Var x,
                                              typename TapeT<S>::Var w,
                                              double det_floor = kDetFloor) {
  auto logits = tape.matmul(tape.matmul(x, w), tape.transpose(x));
  auto alpha = tape.masked_softmax(logits, MaskMode::Strict, /*allow_empty_rows=*/true);
  auto xbar = tape.matmul(alpha, x);
  auto sigma = tape.sub(tape.row_gram(alpha, x), tape.row_outer(xbar));
  return tape.margin_logdet(sigma, w, det_floor);
}

struct PenaltyValue {
  double value = 0.0;
  int saturated = 0;
};

/// Plain (tape-free) evaluation of the same penalty, for diagnostics.
PenaltyValue margin_penalty_value(const Mat& w, const Mat& x, double det_floor = kDetFloor);

}  // namespace attnprior::prior
