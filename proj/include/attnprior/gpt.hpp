#pragma once

#include <string>
#include <vector>

#include "attnprior/prior.hpp"
#include "attnprior/prng.hpp"
#include "attnprior/tape.hpp"

namespace attnprior::lm {

struct GptConfig {
  Index d_model = 32;
  Index n_heads = 2;
  Index n_layers = 2;
  Index context = 64;
  int vocab = 0;
  double dropout = 0.0;  // only 0 is supported; kept for config echo
  bool tied_embeddings = true;

  void validate() const {
    if (d_model % n_heads != 0) throw DimensionError("d_model must be divisible by n_heads");
    if (vocab <= 0) throw DimensionError("vocab size must be set");
    if (dropout != 0.0) throw DimensionError("nonzero dropout is not supported");
  }
};

/// Paper-scale configuration; supported by the code but not exercised by the
/// test suite (desk preset covers CI).
inline GptConfig paper_gpt_config(int vocab) {
  return GptConfig{128, 4, 2, 512, vocab, 0.0, true};
}

/// Small causal GPT with learned absolute positions, pre-norm blocks, and an
/// embedding-level attention-prior matrix W for the margin penalty.
template <class S>
class SmallGPT {
 public:
  struct BlockParams {
    TensorT<S> ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
    TensorT<S> ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
  };

  SmallGPT() = default;
  SmallGPT(GptConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Prng rng = Prng(seed).derive(0x1417);
    const Index d = cfg_.d_model, T = cfg_.context;
    tok_emb_ = init_normal({cfg_.vocab, d}, rng);
    pos_emb_ = init_normal({T, d}, rng);
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (auto& b : blocks_) {
      b.ln1_g = ones({1, d});
      b.ln1_b = zeros({1, d});
      b.w_qkv = init_normal({d, 3 * d}, rng);
      b.b_qkv = zeros({1, 3 * d});
      b.w_proj = init_normal({d, d}, rng);
      b.b_proj = zeros({1, d});
      b.ln2_g = ones({1, d});
      b.ln2_b = zeros({1, d});
      b.w_fc1 = init_normal({d, 4 * d}, rng);
      b.b_fc1 = zeros({1, 4 * d});
      b.w_fc2 = init_normal({4 * d, d}, rng);
      b.b_fc2 = zeros({1, d});
    }
    lnf_g_ = ones({1, d});
    lnf_b_ = zeros({1, d});
    if (!cfg_.tied_embeddings) head_w_ = init_normal({d, cfg_.vocab}, rng);
    head_b_ = zeros({1, cfg_.vocab});
    // W starts at zero: the penalty and its coupling are switched on purely
    // by the optimizer, and lambda = 0 runs never see a nonzero prior.
    prior_w_ = zeros({d, d});
  }

  const GptConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, TensorT<S>*>> named_params() {
    std::vector<std::pair<std::string, TensorT<S>*>> out;
    out.emplace_back("tok_emb", &tok_emb_);
    out.emplace_back("pos_emb", &pos_emb_);
    for (size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      const std::string p = "block" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1_g", &b.ln1_g);
      out.emplace_back(p + "ln1_b", &b.ln1_b);
      out.emplace_back(p + "w_qkv", &b.w_qkv);
      out.emplace_back(p + "b_qkv", &b.b_qkv);
      out.emplace_back(p + "w_proj", &b.w_proj);
      out.emplace_back(p + "b_proj", &b.b_proj);
      out.emplace_back(p + "ln2_g", &b.ln2_g);
      out.emplace_back(p + "ln2_b", &b.ln2_b);
      out.emplace_back(p + "w_fc1", &b.w_fc1);
      out.emplace_back(p + "b_fc1", &b.b_fc1);
      out.emplace_back(p + "w_fc2", &b.w_fc2);
      out.emplace_back(p + "b_fc2", &b.b_fc2);
    }
    out.emplace_back("lnf_g", &lnf_g_);
    out.emplace_back("lnf_b", &lnf_b_);
    if (!cfg_.tied_embeddings) out.emplace_back("head_w", &head_w_);
    out.emplace_back("head_b", &head_b_);
    out.emplace_back("prior_w", &prior_w_);
    return out;
  }

  TensorT<S>& prior_w() { return prior_w_; }
  const TensorT<S>& prior_w() const { return prior_w_; }
  TensorT<S>& token_embedding() { return tok_emb_; }

  struct ForwardVars {
    typename TapeT<S>::Var loss;       // ce (+ lambda * penalty when enabled)
    typename TapeT<S>::Var ce;
    typename TapeT<S>::Var penalty;    // invalid when the margin path is off
    typename TapeT<S>::Var embeddings; // post-positional embedding node
    int saturated = 0;
    // Which leaf holds which parameter on this tape, in creation order.
    std::vector<std::pair<const TensorT<S>*, typename TapeT<S>::Var>> param_leaves;
  };

  struct ForwardOptions {
    double lambda_margin = 0.0;
    bool margin_path = false;        // build the penalty subgraph at all
    bool quadratic_term = false;     // MAP residual energy (off by default)
    double sigma_prior = 1.0;
    double det_floor = 1e-12;
    const MatX<S>* noise = nullptr;  // additive embedding noise (evaluation)
    bool requires_grad = true;
  };

  /// Build the per-sequence graph. ids/targets must both have context length.
  ForwardVars forward(TapeT<S>& tape, const std::vector<int>& ids,
                      const std::vector<int>& targets, const ForwardOptions& opt) {
    using Var = typename TapeT<S>::Var;
    if (static_cast<Index>(ids.size()) != cfg_.context ||
        targets.size() != ids.size())
      throw DimensionError("forward expects full context-length windows");
    const Index d = cfg_.d_model, dh = d / cfg_.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardVars out;
    auto leaf = [&](TensorT<S>& t) {
      TensorT<S> copy = t;
      copy.requires_grad = opt.requires_grad;
      auto v = tape.leaf(std::move(copy));
      if (opt.requires_grad) out.param_leaves.emplace_back(&t, v);
      return v;
    };

    Var tok = leaf(tok_emb_);
    Var x = tape.add(tape.gather_rows(tok, ids), leaf(pos_emb_));
    if (opt.noise != nullptr) {
      TensorT<S> nt({cfg_.context, d});
      nt.mat() = *opt.noise;
      x = tape.add(x, tape.leaf(std::move(nt)));
    }
    out.embeddings = x;

    Var prior_w_var;
    if (opt.margin_path) {
      prior_w_var = leaf(prior_w_);
      out.penalty = prior::margin_penalty_on_tape(tape, x, prior_w_var, opt.det_floor);
      out.saturated = tape.saturation_count(out.penalty);
    }

    Var h = x;
    for (auto& b : blocks_) {
      Var ln1 = tape.layer_norm(h, leaf(b.ln1_g), leaf(b.ln1_b), 1e-5);
      Var qkv = tape.add_rowvec(tape.matmul(ln1, leaf(b.w_qkv)), leaf(b.b_qkv));
      Var wproj = leaf(b.w_proj);
      Var attn;
      for (Index head = 0; head < cfg_.n_heads; ++head) {
        Var q = tape.slice_cols(qkv, head * dh, (head + 1) * dh);
        Var k = tape.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
        Var v = tape.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        Var alpha = tape.masked_softmax(tape.scale(tape.matmul(q, tape.transpose(k)), scale),
                                        MaskMode::Inclusive);
        Var mixed = tape.matmul(tape.matmul(alpha, v),
                                tape.slice_rows(wproj, head * dh, (head + 1) * dh));
        attn = head == 0 ? mixed : tape.add(attn, mixed);
      }
      h = tape.add(h, tape.add_rowvec(attn, leaf(b.b_proj)));
      Var ln2 = tape.layer_norm(h, leaf(b.ln2_g), leaf(b.ln2_b), 1e-5);
      Var mlp = tape.add_rowvec(
          tape.matmul(tape.gelu(tape.add_rowvec(tape.matmul(ln2, leaf(b.w_fc1)), leaf(b.b_fc1))),
                      leaf(b.w_fc2)),
          leaf(b.b_fc2));
      h = tape.add(h, mlp);
    }
    h = tape.layer_norm(h, leaf(lnf_g_), leaf(lnf_b_), 1e-5);

    Var logits = cfg_.tied_embeddings
                     ? tape.add_rowvec(tape.matmul(h, tape.transpose(tok)), leaf(head_b_))
                     : tape.add_rowvec(tape.matmul(h, leaf(head_w_)), leaf(head_b_));
    out.ce = tape.cross_entropy(logits, targets);
    out.loss = out.ce;

    if (opt.margin_path && opt.lambda_margin != 0.0) {
      // The penalty keeps its literal position-sum form; only the batch mean
      // is taken (during gradient averaging), mirroring the augmented
      // objective it implements.
      out.loss = tape.add_scaled(out.loss, out.penalty, opt.lambda_margin);
    }
    if (opt.quadratic_term) {
      if (!prior_w_var.valid()) prior_w_var = leaf(prior_w_);
      Var logits_p = tape.matmul(tape.matmul(x, prior_w_var), tape.transpose(x));
      Var alpha = tape.masked_softmax(logits_p, MaskMode::Strict, true);
      Var e = tape.sub(x, tape.matmul(alpha, x));
      Var energy = tape.sum(tape.mul(e, e));
      out.loss = tape.add_scaled(out.loss, energy,
                                 1.0 / (2.0 * opt.sigma_prior * opt.sigma_prior));
    }
    return out;
  }

 private:
  static TensorT<S> zeros(Shape sh) { return TensorT<S>(std::move(sh), S(0), true); }
  static TensorT<S> ones(Shape sh) { return TensorT<S>(std::move(sh), S(1), true); }
  static TensorT<S> init_normal(Shape sh, Prng& rng) {
    TensorT<S> t(std::move(sh), S(0), true);
    for (auto& v : t.data) v = static_cast<S>(0.02 * rng.normal());
    return t;
  }

  GptConfig cfg_;
  TensorT<S> tok_emb_, pos_emb_;
  std::vector<BlockParams> blocks_;
  TensorT<S> lnf_g_, lnf_b_, head_w_, head_b_;
  TensorT<S> prior_w_;
};

}  // namespace attnprior::lm
