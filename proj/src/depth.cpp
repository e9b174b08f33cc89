#include "attnprior/depth.hpp"

#include <cmath>
#include <stdexcept>

namespace attnprior::depth {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

Mat layer_norm(const Mat& x, const Vec& g, const Vec& b) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.row(r) = (((x.row(r).array() - mean) * inv) * g.transpose().array()) +
                 b.transpose().array();
  }
  return out;
}

Mat gelu(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)); });
}

// Masked multi-head attention with separate query and key/value sources
// (they coincide for the standard block).
Mat mha(const TransformerBlockParams& blk, const Mat& q_src, const Mat& kv_src) {
  const Index T = q_src.rows(), d = blk.d, dh = d / blk.n_heads;
  Mat out(T, d);
  const Mat q_all = q_src * blk.w_qkv.middleCols(0, d) +
                    Mat::Ones(T, 1) * blk.b_qkv.segment(0, d).transpose();
  const Mat k_all = kv_src * blk.w_qkv.middleCols(d, d) +
                    Mat::Ones(T, 1) * blk.b_qkv.segment(d, d).transpose();
  const Mat v_all = kv_src * blk.w_qkv.middleCols(2 * d, d) +
                    Mat::Ones(T, 1) * blk.b_qkv.segment(2 * d, d).transpose();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (Index h = 0; h < blk.n_heads; ++h) {
    const Mat q = q_all.middleCols(h * dh, dh);
    const Mat k = k_all.middleCols(h * dh, dh);
    const Mat v = v_all.middleCols(h * dh, dh);
    for (Index t = 0; t < T; ++t) {
      Vec logits = (k.topRows(t + 1) * q.row(t).transpose()) * scale;
      const double mx = logits.maxCoeff();
      Vec w = (logits.array() - mx).exp();
      w /= w.sum();
      out.block(t, h * dh, 1, dh) = w.transpose() * v.topRows(t + 1);
    }
  }
  return out * blk.w_proj + Mat::Ones(T, 1) * blk.b_proj.transpose();
}

}  // namespace

TransformerBlockParams TransformerBlockParams::random(Index d, Index n_heads, Prng& rng,
                                                      double scale) {
  if (d % n_heads != 0) throw DimensionError("block dim must divide into heads");
  TransformerBlockParams blk;
  blk.d = d;
  blk.n_heads = n_heads;
  auto rmat = [&](Index r, Index c) {
    Mat m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
  };
  blk.w_qkv = rmat(d, 3 * d);
  blk.b_qkv = Vec::Zero(3 * d);
  blk.w_proj = rmat(d, d);
  blk.b_proj = Vec::Zero(d);
  blk.ln1_g = Vec::Ones(d);
  blk.ln1_b = Vec::Zero(d);
  blk.ln2_g = Vec::Ones(d);
  blk.ln2_b = Vec::Zero(d);
  blk.w_fc1 = rmat(d, 4 * d);
  blk.b_fc1 = Vec::Zero(4 * d);
  blk.w_fc2 = rmat(4 * d, d);
  blk.b_fc2 = Vec::Zero(d);
  return blk;
}

Mat block_forward(const TransformerBlockParams& blk, const Mat& x_prev) {
  const Index T = x_prev.rows();
  const Mat u = x_prev + mha(blk, layer_norm(x_prev, blk.ln1_g, blk.ln1_b),
                             layer_norm(x_prev, blk.ln1_g, blk.ln1_b));
  const Mat h = layer_norm(u, blk.ln2_g, blk.ln2_b);
  const Mat mlp = gelu(h * blk.w_fc1 + Mat::Ones(T, 1) * blk.b_fc1.transpose()) * blk.w_fc2 +
                  Mat::Ones(T, 1) * blk.b_fc2.transpose();
  return u + mlp;
}

Mat block_forward_selfref(const TransformerBlockParams& blk, const Mat& x_prev,
                          const Mat& x_curr) {
  const Index T = x_prev.rows();
  const Mat u = x_prev + mha(blk, layer_norm(x_curr, blk.ln1_g, blk.ln1_b),
                             layer_norm(x_prev, blk.ln1_g, blk.ln1_b));
  const Mat h = layer_norm(u, blk.ln2_g, blk.ln2_b);
  const Mat mlp = gelu(h * blk.w_fc1 + Mat::Ones(T, 1) * blk.b_fc1.transpose()) * blk.w_fc2 +
                  Mat::Ones(T, 1) * blk.b_fc2.transpose();
  return u + mlp;
}

Vec layer_residual(const LayerStack& stack, Index layer, const Mat& x_prev, const Mat& x_curr,
                   Index t) {
  if (layer < 1 || layer > static_cast<Index>(stack.layers.size()))
    throw std::out_of_range("layer_residual: layer index out of range");
  if (t < 1 || t > x_curr.rows()) throw std::out_of_range("layer_residual: position out of range");
  if (x_prev.rows() != x_curr.rows() || x_prev.cols() != x_curr.cols())
    throw DimensionError("layer_residual: layer shapes disagree");
  const auto& blk = stack.layers[static_cast<size_t>(layer - 1)];
  const Mat g = stack.conditioning == Conditioning::PreviousLayer
                    ? block_forward(blk, x_prev)
                    : block_forward_selfref(blk, x_prev, x_curr);
  return x_curr.row(t - 1).transpose() - g.row(t - 1).transpose();
}

Mat deep_diag_block(const LayerStack& stack, Index layer, Index d) {
  if (stack.conditioning != Conditioning::PreviousLayer)
    throw std::invalid_argument("analytic identity block requires previous-layer conditioning");
  (void)layer;
  return Mat::Identity(d, d);
}

Mat deep_diag_block_numeric(const LayerStack& stack, Index layer, const Mat& x_prev,
                            const Mat& x_curr, Index t, double step) {
  const Index d = x_curr.cols();
  Mat J(d, d);
  for (Index j = 0; j < d; ++j) {
    Mat xp = x_curr, xm = x_curr;
    xp(t - 1, j) += step;
    xm(t - 1, j) -= step;
    J.col(j) =
        (layer_residual(stack, layer, x_prev, xp, t) - layer_residual(stack, layer, x_prev, xm, t)) /
        (2 * step);
  }
  return J;
}

DeepDensityReport deep_log_density(const LayerStack& stack,
                                   const prior::AttentionPriorParams& stage1, const Mat& x0,
                                   const std::vector<Mat>& x_layers) {
  if (x_layers.size() != stack.layers.size())
    throw DimensionError("deep_log_density: one embedding matrix per layer expected");
  if (stack.sigmas.size() != stack.layers.size())
    throw DimensionError("deep_log_density: one noise scale per layer expected");

  DeepDensityReport rep;
  const auto stage1_rep = prior::log_density(stage1, prior::EmbeddingSequence(x0));
  rep.stage1_valid = stage1_rep.valid;
  for (double v : stage1_rep.logdet_terms) rep.stage1_logdet += v;
  rep.total = stage1_rep.total_log_density;

  const Mat* below = &x0;
  for (size_t l = 0; l < stack.layers.size(); ++l) {
    const Mat& here = x_layers[l];
    if (here.rows() != below->rows() || here.cols() != below->cols())
      throw DimensionError("deep_log_density: inconsistent layer shapes");
    const double sig = stack.sigmas[l];
    const Mat e = here - block_forward(stack.layers[l], *below);
    const double Td = static_cast<double>(here.rows() * here.cols());
    const double energy = e.squaredNorm() / (2.0 * sig * sig);
    rep.layer_energies.push_back(energy);
    // Previous-layer conditioning: the residual is affine in the layer's own
    // variable, so the diagonal block is I_d and contributes log|det| = 0.
    rep.layer_logdets.push_back(0.0);
    rep.total += -energy - Td * std::log(sig) - 0.5 * Td * std::log(kTwoPi);
    below = &here;
  }
  return rep;
}

}  // namespace attnprior::depth
