#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnprior/gpt.hpp"
#include "attnprior/optim.hpp"
#include "attnprior/prior.hpp"
#include "attnprior/threadpool.hpp"

namespace attnprior::lm {

struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Character vocabulary over Unicode codepoints. Characters seen at least
/// min_count times in the training text get ids ordered by (count desc,
/// codepoint asc); everything else maps to the trailing <unk> id.
class CharVocab {
 public:
  static CharVocab build(const std::string& utf8_text, int min_count);

  int size() const { return static_cast<int>(id_to_char_.size()) + 1; }
  int unk_id() const { return static_cast<int>(id_to_char_.size()); }
  int min_count() const { return min_count_; }
  const std::vector<std::uint32_t>& chars() const { return id_to_char_; }

  int id_of(std::uint32_t cp) const {
    auto it = char_to_id_.find(cp);
    return it == char_to_id_.end() ? unk_id() : it->second;
  }
  std::vector<int> encode(const std::string& utf8_text) const;
  std::string decode(const std::vector<int>& ids) const;

  static CharVocab from_table(std::vector<std::uint32_t> chars, int min_count);

 private:
  std::vector<std::uint32_t> id_to_char_;
  std::map<std::uint32_t, int> char_to_id_;
  int min_count_ = 0;
};

std::vector<std::uint32_t> decode_utf8(const std::string& text);

struct CharDataset {
  CharVocab vocab;
  std::vector<int> train_ids;
  std::vector<int> val_ids;
};

/// Split the text by character position (final val_fraction held out), build
/// the vocab from the training portion only, then encode both.
CharDataset load_dataset(const std::string& utf8_text, int min_count, double val_fraction = 0.1);

struct TrainConfig {
  double lambda_margin = 0.0;
  bool margin_code_enabled = true;  // false removes the penalty path entirely
  bool quadratic_term = false;      // MAP residual energy, off per the margin-only objective
  double sigma_prior = 1.0;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 5;
  int batch = 32;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  double det_floor = 1e-12;
  bool freeze_prior_w = false;
  int grad_shards = 8;  // fixed shard count keeps results thread-count independent
};

struct EpochStats {
  double train_bpc = 0;
  double val_bpc = 0;
  double margin_loss = 0;  // per-position penalty averaged over the epoch
  long det_floor_hits = 0;
};

struct TrainRunRecord {
  std::vector<EpochStats> epochs;
  std::vector<double> loss_trace;  // per-step batch loss, for exact-reduction checks
  double final_clean_bpc = 0;
  std::vector<std::pair<double, double>> noisy_bpc;   // (sigma, mean bpc)
  std::vector<std::pair<double, double>> degradation; // (sigma, noisy/clean)
  double snr = 0;
  double normalized_var_a = 0;
  bool diagnostics_applicable = false;
  long total_det_floor_hits = 0;
};

struct RobustnessRow {
  double sigma = 0;
  double mean_bpc = 0;
  double degradation = 0;
};

struct LambdaSweepRow {
  double lambda = 0;
  double clean_bpc = 0;
  double noisy_bpc = 0;   // at the probe sigma
  double degradation = 0;
  double snr = 0;
  double normalized_var_a = 0;
  bool diagnostics_applicable = false;
};

struct Diagnostics {
  double snr = 0;
  double normalized_var_a = 0;
  bool applicable = false;
};

template <class S>
class Trainer {
 public:
  Trainer(GptConfig gcfg, TrainConfig tcfg) : gcfg_(gcfg), tcfg_(tcfg) {}

  /// Seeded training run; identical (config, seed, corpus) reproduce the
  /// record exactly.
  TrainRunRecord train(SmallGPT<S>& model, const CharDataset& data) {
    const Index T = gcfg_.context;
    const auto windows = window_starts(data.train_ids, T);
    if (windows.empty()) throw IngestionError("training corpus shorter than one context window");
    const long steps_per_epoch = static_cast<long>(windows.size()) / tcfg_.batch;
    if (steps_per_epoch == 0) throw IngestionError("not enough windows for one batch");
    const long total_steps = steps_per_epoch * tcfg_.epochs;

    auto named = model.named_params();
    std::vector<TensorT<S>*> params;
    for (auto& [name, t] : named)
      if (!(tcfg_.freeze_prior_w && name == "prior_w")) params.push_back(t);

    AdamWT<S> opt({tcfg_.lr, 0.9, 0.999, 1e-8, tcfg_.weight_decay});
    TrainRunRecord rec;
    const bool margin_on = tcfg_.margin_code_enabled && tcfg_.lambda_margin != 0.0;

    const Prng master(tcfg_.seed);
    long step = 0;
    for (int epoch = 0; epoch < tcfg_.epochs; ++epoch) {
      auto order = windows;
      shuffle(order, master.derive(0xE90C + static_cast<std::uint64_t>(epoch)));

      double ce_sum = 0, pen_sum = 0;
      long pen_positions = 0, floor_hits = 0;
      for (long b = 0; b < steps_per_epoch; ++b, ++step) {
        const double lr_now = cosine_lr(step, total_steps, tcfg_.lr);
        std::vector<long> batch(order.begin() + b * tcfg_.batch,
                                order.begin() + (b + 1) * tcfg_.batch);

        // Fixed shard partition; each shard accumulates its sequences in
        // order, shards are merged in index order afterwards.
        const int shards = std::min<int>(tcfg_.grad_shards, tcfg_.batch);
        std::vector<std::vector<TensorT<S>>> shard_grads(
            static_cast<size_t>(shards), make_grad_buffers(params));
        std::vector<double> shard_loss(static_cast<size_t>(shards), 0.0);
        std::vector<double> shard_ce(static_cast<size_t>(shards), 0.0);
        std::vector<double> shard_pen(static_cast<size_t>(shards), 0.0);
        std::vector<long> shard_sat(static_cast<size_t>(shards), 0);

        parallel_for(shards, [&](int sh) {
          for (size_t i = static_cast<size_t>(sh); i < batch.size();
               i += static_cast<size_t>(shards)) {
            TapeT<S> tape;
            auto [ids, targets] = window_tokens(data.train_ids, batch[i], T);
            typename SmallGPT<S>::ForwardOptions fopt;
            fopt.lambda_margin = tcfg_.lambda_margin;
            fopt.margin_path = margin_on;
            fopt.quadratic_term = tcfg_.quadratic_term;
            fopt.sigma_prior = tcfg_.sigma_prior;
            fopt.det_floor = tcfg_.det_floor;
            auto fwd = model.forward(tape, ids, targets, fopt);
            tape.backward(fwd.loss);
            shard_loss[sh] += static_cast<double>(tape.value(fwd.loss).scalar());
            shard_ce[sh] += static_cast<double>(tape.value(fwd.ce).scalar());
            if (margin_on) {
              shard_pen[sh] += static_cast<double>(tape.value(fwd.penalty).scalar());
              shard_sat[sh] += fwd.saturated;
            }
            collect_grads(tape, fwd.param_leaves, params, shard_grads[static_cast<size_t>(sh)]);
          }
        });

        std::vector<TensorT<S>> grads = std::move(shard_grads[0]);
        for (int sh = 1; sh < shards; ++sh)
          for (size_t p = 0; p < grads.size(); ++p)
            for (size_t j = 0; j < grads[p].data.size(); ++j)
              grads[p].data[j] += shard_grads[static_cast<size_t>(sh)][p].data[j];
        const S inv_b = static_cast<S>(1.0 / tcfg_.batch);
        std::vector<TensorT<S>*> grad_ptrs;
        for (auto& g : grads) {
          for (auto& v : g.data) v *= inv_b;
          grad_ptrs.push_back(&g);
        }
        clip_grad_norm<S>(grad_ptrs, tcfg_.clip_norm);

        std::vector<const TensorT<S>*> cgrads(grad_ptrs.begin(), grad_ptrs.end());
        opt.step(params, cgrads, lr_now);

        double loss = 0, ce = 0, pen = 0;
        long sat = 0;
        for (int sh = 0; sh < shards; ++sh) {
          loss += shard_loss[sh];
          ce += shard_ce[sh];
          pen += shard_pen[sh];
          sat += shard_sat[sh];
        }
        loss /= tcfg_.batch;
        ce /= tcfg_.batch;
        if (!std::isfinite(loss))
          throw std::runtime_error("training diverged: non-finite loss at step " +
                                   std::to_string(step) + " (margin saturations this step: " +
                                   std::to_string(sat) + ")");
        rec.loss_trace.push_back(loss);
        ce_sum += ce;
        pen_sum += pen / tcfg_.batch;
        pen_positions += 1;
        floor_hits += sat;
      }

      EpochStats es;
      es.train_bpc = ce_sum / steps_per_epoch / std::log(2.0);
      es.val_bpc = eval_bpc(model, data.val_ids, 0.0, 0);
      es.margin_loss = margin_on ? pen_sum / pen_positions / static_cast<double>(T) : 0.0;
      es.det_floor_hits = floor_hits;
      rec.total_det_floor_hits += floor_hits;
      rec.epochs.push_back(es);
    }
    rec.final_clean_bpc = rec.epochs.back().val_bpc;
    return rec;
  }

  /// Mean validation BPC, optionally under additive embedding noise with the
  /// given draw seed.
  double eval_bpc(SmallGPT<S>& model, const std::vector<int>& ids, double noise_sigma,
                  std::uint64_t draw_seed) {
    const Index T = gcfg_.context;
    const auto windows = window_starts(ids, T);
    if (windows.empty()) throw IngestionError("validation split shorter than one window");
    std::vector<double> ce(windows.size(), 0.0);
    const Prng master = Prng(tcfg_.seed).derive(0x4015E ^ draw_seed);
    parallel_for(static_cast<int>(windows.size()), [&](int i) {
      TapeT<S> tape;
      auto [in, targets] = window_tokens(ids, windows[static_cast<size_t>(i)], T);
      typename SmallGPT<S>::ForwardOptions fopt;
      fopt.requires_grad = false;
      MatX<S> noise;
      if (noise_sigma > 0) {
        Prng rng = master.derive(static_cast<std::uint64_t>(i));
        noise.resize(T, gcfg_.d_model);
        for (Index r = 0; r < T; ++r)
          for (Index c = 0; c < gcfg_.d_model; ++c)
            noise(r, c) = static_cast<S>(noise_sigma * rng.normal());
        fopt.noise = &noise;
      }
      auto fwd = model.forward(tape, in, targets, fopt);
      ce[static_cast<size_t>(i)] = static_cast<double>(tape.value(fwd.ce).scalar());
    });
    double total = 0;
    for (double v : ce) total += v;
    return total / static_cast<double>(ce.size()) / std::log(2.0);
  }

  /// sigma grid evaluation: mean BPC over n_draws per level plus degradation
  /// against the sigma = 0 row.
  std::vector<RobustnessRow> noise_robustness_eval(SmallGPT<S>& model, const std::vector<int>& ids,
                                                   const std::vector<double>& sigmas, int n_draws,
                                                   std::uint64_t seed) {
    std::vector<RobustnessRow> rows;
    const double clean = eval_bpc(model, ids, 0.0, 0);
    for (size_t g = 0; g < sigmas.size(); ++g) {
      RobustnessRow row;
      row.sigma = sigmas[g];
      if (sigmas[g] == 0.0) {
        row.mean_bpc = clean;
      } else {
        double acc = 0;
        for (int dr = 0; dr < n_draws; ++dr)
          acc += eval_bpc(model, ids, sigmas[g],
                          seed + 1000003ULL * g + static_cast<std::uint64_t>(dr));
        row.mean_bpc = acc / n_draws;
      }
      row.degradation = row.mean_bpc / clean;
      rows.push_back(row);
    }
    return rows;
  }

  /// SNR and normalized Var_a on validation positions with nonempty context,
  /// evaluated at the embedding-prior site with the trained W.
  Diagnostics diagnostics(SmallGPT<S>& model, const std::vector<int>& ids) {
    Diagnostics d;
    if (!(tcfg_.margin_code_enabled && tcfg_.lambda_margin != 0.0)) return d;  // not applicable
    d.applicable = true;
    const Index T = gcfg_.context, dm = gcfg_.d_model;
    const auto windows = window_starts(ids, T);
    MatX<double> w = MatX<double>(dm, dm);
    for (Index i = 0; i < dm; ++i)
      for (Index j = 0; j < dm; ++j) w(i, j) = static_cast<double>(model.prior_w().at(i, j));

    std::vector<double> acc_x2(windows.size(), 0.0), acc_e2(windows.size(), 0.0),
        acc_tr(windows.size(), 0.0);
    std::vector<long> acc_n(windows.size(), 0), acc_nx(windows.size(), 0);
    parallel_for(static_cast<int>(windows.size()), [&](int wi) {
      TapeT<S> tape;
      auto [in, targets] = window_tokens(ids, windows[static_cast<size_t>(wi)], T);
      typename SmallGPT<S>::ForwardOptions fopt;
      fopt.requires_grad = false;
      auto fwd = model.forward(tape, in, targets, fopt);
      const auto& emb = tape.value(fwd.embeddings);
      MatX<double> x(T, dm);
      for (Index r = 0; r < T; ++r)
        for (Index c = 0; c < dm; ++c) x(r, c) = static_cast<double>(emb.at(r, c));
      acc_x2[wi] += x.squaredNorm();
      acc_nx[wi] += T * dm;
      for (Index t = 1; t < T; ++t) {
        VecX<double> logits = x.topRows(t) * w.transpose() * x.row(t).transpose();
        const double mx = logits.maxCoeff();
        VecX<double> alpha = (logits.array() - mx).exp();
        alpha /= alpha.sum();
        const VecX<double> mu = x.topRows(t).transpose() * alpha;
        acc_e2[wi] += (x.row(t).transpose() - mu).squaredNorm();
        double tr = 0;
        for (Index s = 0; s < t; ++s)
          tr += alpha[s] * (x.row(s).transpose() - mu).squaredNorm();
        acc_tr[wi] += tr;
        acc_n[wi] += 1;
      }
    });
    double x2 = 0, e2 = 0, tr = 0;
    long n = 0, nx = 0;
    for (size_t i = 0; i < windows.size(); ++i) {
      x2 += acc_x2[i];
      e2 += acc_e2[i];
      tr += acc_tr[i];
      n += acc_n[i];
      nx += acc_nx[i];
    }
    const double rms_x2 = x2 / static_cast<double>(nx);          // per-entry mean square
    const double rms_e2 = e2 / static_cast<double>(n) / static_cast<double>(dm);
    d.snr = std::sqrt(rms_x2 / rms_e2);
    d.normalized_var_a = (tr / static_cast<double>(n)) / rms_x2;
    return d;
  }

  static std::vector<long> window_starts(const std::vector<int>& ids, Index T) {
    std::vector<long> starts;
    for (long s = 0; s + T < static_cast<long>(ids.size()); s += T) starts.push_back(s);
    return starts;
  }

  static std::pair<std::vector<int>, std::vector<int>> window_tokens(const std::vector<int>& ids,
                                                                     long start, Index T) {
    std::vector<int> in(ids.begin() + start, ids.begin() + start + T);
    std::vector<int> targets(ids.begin() + start + 1, ids.begin() + start + T + 1);
    return {std::move(in), std::move(targets)};
  }

 private:
  static void shuffle(std::vector<long>& v, Prng rng) {
    for (size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[rng.uniform_int(i)]);
  }

  static std::vector<TensorT<S>> make_grad_buffers(const std::vector<TensorT<S>*>& params) {
    std::vector<TensorT<S>> bufs;
    bufs.reserve(params.size());
    for (auto* p : params) bufs.emplace_back(p->shape);
    return bufs;
  }

  static void collect_grads(
      TapeT<S>& tape,
      const std::vector<std::pair<const TensorT<S>*, typename TapeT<S>::Var>>& param_leaves,
      const std::vector<TensorT<S>*>& params, std::vector<TensorT<S>>& bufs) {
    for (const auto& [param, var] : param_leaves) {
      for (size_t p = 0; p < params.size(); ++p) {
        if (params[p] != param) continue;
        const auto& g = tape.grad(var);
        for (size_t j = 0; j < bufs[p].data.size(); ++j) bufs[p].data[j] += g.data[j];
        break;
      }
    }
  }

  GptConfig gcfg_;
  TrainConfig tcfg_;
};

using TrainerF = Trainer<float>;

/// Default desk-scale experiment configuration.
inline GptConfig desk_gpt_config(int vocab) { return GptConfig{32, 2, 2, 64, vocab, 0.0, true}; }

inline std::vector<double> default_sigma_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(0.05 * i);
  return g;
}

inline std::vector<double> default_lambda_grid() {
  return {0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2};
}

}  // namespace attnprior::lm
