#pragma once

#include <vector>

#include "attnprior/prior.hpp"

namespace attnprior::depth {

using prior::Mat;
using prior::Vec;

constexpr double kLayerNormEps = 1e-5;

/// One pre-norm transformer block: LN -> masked multi-head attention ->
/// residual -> LN -> MLP (GELU) -> residual. Used as a fixed causal layer
/// map for the depth checks (not trained).
struct TransformerBlockParams {
  Index d = 0, n_heads = 1;
  Mat w_qkv;  // d x 3d, thirds are Q | K | V
  Vec b_qkv;
  Mat w_proj;  // d x d
  Vec b_proj;
  Vec ln1_g, ln1_b, ln2_g, ln2_b;
  Mat w_fc1;  // d x 4d
  Vec b_fc1;
  Mat w_fc2;  // 4d x d
  Vec b_fc2;

  static TransformerBlockParams random(Index d, Index n_heads, Prng& rng, double scale = 0.4);
};

/// Standard forward map g(x_prev): attention pattern and values both come
/// from the previous-layer embeddings (inclusive causal mask).
Mat block_forward(const TransformerBlockParams& blk, const Mat& x_prev);

/// Self-referential test stub: identical block, except the attention queries
/// are formed from the current-layer embeddings (one fixed-point iteration of
/// the implicit variant). Exists only to exhibit a non-identity diagonal
/// block.
Mat block_forward_selfref(const TransformerBlockParams& blk, const Mat& x_prev, const Mat& x_curr);

enum class Conditioning { PreviousLayer, SelfReferentialStub };

/// Stage 1 is the attention prior over the embedding sequence itself; the
/// blocks above it are conditioned on the layer below and carry per-layer
/// noise scales.
struct LayerStack {
  std::vector<TransformerBlockParams> layers;
  std::vector<double> sigmas;  // one per layer, > 0
  Conditioning conditioning = Conditioning::PreviousLayer;
};

/// e^(l)_t = x^(l)_t - g^(l)_t(x^(l-1)_{1:t}); layer is 1-based into the
/// stack's blocks, t is 1-based.
Vec layer_residual(const LayerStack& stack, Index layer, const Mat& x_prev, const Mat& x_curr,
                   Index t);

/// Analytic diagonal block of a conditioned layer: exactly I_d under
/// previous-layer conditioning.
Mat deep_diag_block(const LayerStack& stack, Index layer, Index d);

/// Central-difference diagonal block of e^(l)_t w.r.t. x^(l)_t, honoring the
/// stack's conditioning mode.
Mat deep_diag_block_numeric(const LayerStack& stack, Index layer, const Mat& x_prev,
                            const Mat& x_curr, Index t, double step = 1e-6);

struct DeepDensityReport {
  double total = 0;
  double stage1_logdet = 0;               // the prior stage's log-det sum
  std::vector<double> layer_logdets;      // identically zero per Cor.-style localization
  std::vector<double> layer_energies;     // Gaussian energies per layer
  bool stage1_valid = true;
};

/// Deep log-density: the attention-prior stage models x0 (the embedding
/// sequence), each block contributes only its Gaussian transition energy.
DeepDensityReport deep_log_density(const LayerStack& stack,
                                   const prior::AttentionPriorParams& stage1, const Mat& x0,
                                   const std::vector<Mat>& x_layers);

}  // namespace attnprior::depth
