#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "attnprior/lm.hpp"
#include "gradcheck.hpp"

using namespace attnprior;
using namespace attnprior::lm;

namespace {

// A small deterministic corpus for smoke runs (few hundred distinct windows).
std::string tiny_corpus(size_t n = 40000) {
  Prng rng(404);
  const char* words[] = {"stone", "river", "lamp",  "cold",  "wind", "gate",
                         "dark",  "seven", "round", "paper", "iron", "moss"};
  std::string s;
  while (s.size() < n) {
    s += words[rng.uniform_int(12)];
    s += rng.uniform() < 0.15 ? ".\n" : " ";
  }
  return s;
}

}  // namespace

TEST_CASE("char vocab") {
  SUBCASE("aaab with min_count 2 keeps only 'a'; b maps to unk") {
    const auto v = CharVocab::build("aaab", 2);
    CHECK(v.size() == 2);  // 'a' + <unk>
    CHECK(v.id_of('a') == 0);
    CHECK(v.id_of('b') == v.unk_id());
    const auto ids = v.encode("aaab");
    CHECK(ids == std::vector<int>{0, 0, 0, 1});
  }
  SUBCASE("ordering is count desc then codepoint asc") {
    const auto v = CharVocab::build("bbbaaaccc", 3);
    // counts equal (3 each): codepoint order a < b < c
    CHECK(v.id_of('a') == 0);
    CHECK(v.id_of('b') == 1);
    CHECK(v.id_of('c') == 2);
  }
  SUBCASE("round trip is identity for in-vocab characters") {
    const std::string text = "the quick brown fox; 42!";
    const auto v = CharVocab::build(text + text, 2);
    CHECK(v.decode(v.encode(text)) == text);
  }
  SUBCASE("double build is deterministic") {
    const std::string text = tiny_corpus(5000);
    const auto v1 = CharVocab::build(text, 5);
    const auto v2 = CharVocab::build(text, 5);
    CHECK(v1.chars() == v2.chars());
  }
  SUBCASE("empty corpus raises ingestion error") {
    CHECK_THROWS_AS((void)CharVocab::build("", 1), IngestionError);
  }
  SUBCASE("multibyte characters survive the round trip") {
    const std::string text = "caf\xC3\xA9 caf\xC3\xA9 nai\xCC\x88ve";
    const auto v = CharVocab::build(text, 1);
    CHECK(v.decode(v.encode("caf\xC3\xA9")) == "caf\xC3\xA9");
  }
}

TEST_CASE("dataset split holds out the trailing fraction") {
  const std::string text = tiny_corpus(10000);
  const auto ds = load_dataset(text, 2, 0.1);
  CHECK(ds.val_ids.size() > 800);
  CHECK(ds.val_ids.size() < 1200);
  CHECK(ds.train_ids.size() + ds.val_ids.size() == decode_utf8(text).size());
}

TEST_CASE("margin penalty gradient through the model (embeddings -> Sigma -> log-det)") {
  GptConfig cfg{4, 2, 2, 8, 6, 0.0, true};
  const double lambda = 0.05;
  std::vector<int> ids{0, 3, 1, 4, 2, 5, 1, 0};
  std::vector<int> targets{3, 1, 4, 2, 5, 1, 0, 2};

  auto run_check = [&](auto scalar_tag, double tol) {
    using Sc = decltype(scalar_tag);
    SmallGPT<Sc> model(cfg, 99);
    // Activate the prior so the penalty is a smooth, nonzero function.
    Prng rng(5);
    for (auto& v : model.prior_w().data) v = static_cast<Sc>(0.3 * rng.normal());

    // Double mirror with the same (exactly representable) parameter values;
    // the finite-difference reference is evaluated there so the probe itself
    // does not drown in 32-bit evaluation noise.
    SmallGPT<double> mirror(cfg, 99);
    {
      auto src = model.named_params();
      auto dst = mirror.named_params();
      for (size_t p = 0; p < src.size(); ++p)
        for (size_t j = 0; j < src[p].second->data.size(); ++j)
          dst[p].second->data[j] = static_cast<double>(src[p].second->data[j]);
    }

    typename SmallGPT<Sc>::ForwardOptions fopt;
    fopt.lambda_margin = lambda;
    fopt.margin_path = true;

    TapeT<Sc> tape;
    auto fwd = model.forward(tape, ids, targets, fopt);
    tape.backward(fwd.loss);

    for (const char* which : {"tok_emb", "prior_w"}) {
      TensorT<Sc>* param = nullptr;
      for (auto& [name, t] : model.named_params())
        if (name == which) param = t;
      REQUIRE(param != nullptr);
      Tensor* mparam = nullptr;
      for (auto& [name, t] : mirror.named_params())
        if (name == which) mparam = t;
      typename TapeT<Sc>::Var leaf_var;
      for (auto& [p, v] : fwd.param_leaves)
        if (p == param) leaf_var = v;
      REQUIRE(leaf_var.valid());

      auto value_at = [&](const Tensor& probe) {
        Tensor saved = *mparam;
        *mparam = probe;
        Tape tp;
        SmallGPT<double>::ForwardOptions fo;
        fo.lambda_margin = lambda;
        fo.margin_path = true;
        fo.requires_grad = false;
        const double out = tp.value(mirror.forward(tp, ids, targets, fo).loss).scalar();
        *mparam = saved;
        return out;
      };
      const auto fd = testing::finite_diff<double>(value_at, *mparam, 1e-5);
      std::vector<double> an(tape.grad(leaf_var).data.begin(), tape.grad(leaf_var).data.end());
      INFO(which);
      CHECK(testing::rel_l2_err(an, fd) < tol);
    }
  };
  SUBCASE("64-bit at 1e-4") { run_check(double{}, 1e-4); }
  SUBCASE("32-bit at 1e-3") { run_check(float{}, 1e-3); }
}

TEST_CASE("training") {
  const std::string corpus = tiny_corpus();
  const auto ds = load_dataset(corpus, 2, 0.1);
  GptConfig gcfg{8, 2, 1, 16, ds.vocab.size(), 0.0, true};

  TrainConfig base;
  base.epochs = 1;
  base.batch = 8;
  base.seed = 7;

  SUBCASE("lambda 0 is bit-identical to the disabled margin code path") {
    TrainConfig a = base;
    a.lambda_margin = 0.0;
    a.margin_code_enabled = true;
    TrainConfig b = base;
    b.lambda_margin = 0.0;
    b.margin_code_enabled = false;

    SmallGPT<float> ma(gcfg, base.seed), mb(gcfg, base.seed);
    const auto ra = Trainer<float>(gcfg, a).train(ma, ds);
    const auto rb = Trainer<float>(gcfg, b).train(mb, ds);
    REQUIRE(ra.loss_trace.size() == rb.loss_trace.size());
    for (size_t i = 0; i < ra.loss_trace.size(); ++i)
      CHECK(std::memcmp(&ra.loss_trace[i], &rb.loss_trace[i], sizeof(double)) == 0);
    for (auto [pa, pb] : {std::pair{&ma, &mb}}) {
      auto na = pa->named_params();
      auto nb = pb->named_params();
      for (size_t p = 0; p < na.size(); ++p)
        CHECK(std::memcmp(na[p].second->data.data(), nb[p].second->data.data(),
                          na[p].second->data.size() * sizeof(float)) == 0);
    }
  }

  SUBCASE("identical seeds reproduce the record; margin runs share the init") {
    TrainConfig a = base;
    a.lambda_margin = 0.05;
    SmallGPT<float> m1(gcfg, base.seed), m2(gcfg, base.seed);
    // Same initial weights regardless of lambda.
    auto n1 = m1.named_params();
    auto n2 = m2.named_params();
    for (size_t p = 0; p < n1.size(); ++p) CHECK(n1[p].second->data == n2[p].second->data);

    const auto r1 = Trainer<float>(gcfg, a).train(m1, ds);
    const auto r2 = Trainer<float>(gcfg, a).train(m2, ds);
    CHECK(r1.loss_trace == r2.loss_trace);
    CHECK(r1.final_clean_bpc == r2.final_clean_bpc);
  }

  SUBCASE("training reduces BPC on a smoke run and BPC matches CE/ln2") {
    TrainConfig cfg = base;
    cfg.epochs = 2;
    SmallGPT<float> model(gcfg, 3);
    Trainer<float> tr(gcfg, cfg);
    const auto rec = tr.train(model, ds);
    CHECK(rec.epochs.back().val_bpc < rec.epochs.front().train_bpc + 0.5);
    CHECK(rec.epochs.back().train_bpc < rec.epochs.front().train_bpc);
    // First-step loss is ~ln(V) nats -> BPC = loss/ln2
    CHECK(rec.loss_trace.front() / std::log(2.0) ==
          doctest::Approx(std::log(static_cast<double>(ds.vocab.size())) / std::log(2.0))
              .epsilon(0.15));
  }

  SUBCASE("noise robustness: sigma 0 row is exactly the clean BPC, rows nondecreasing-ish") {
    TrainConfig cfg = base;
    SmallGPT<float> model(gcfg, 3);
    Trainer<float> tr(gcfg, cfg);
    (void)tr.train(model, ds);
    const auto rows = tr.noise_robustness_eval(model, ds.val_ids, {0.0, 0.25, 0.5}, 2, 11);
    CHECK(rows[0].degradation == doctest::Approx(1.0));
    CHECK(rows[0].mean_bpc == doctest::Approx(tr.eval_bpc(model, ds.val_ids, 0.0, 0)));
    CHECK(rows[2].mean_bpc >= rows[1].mean_bpc);
    CHECK(rows[1].mean_bpc >= rows[0].mean_bpc);
  }

  SUBCASE("diagnostics") {
    TrainConfig cfg = base;
    cfg.lambda_margin = 0.05;
    SmallGPT<float> model(gcfg, 3);
    Trainer<float> tr(gcfg, cfg);
    (void)tr.train(model, ds);
    const auto d = tr.diagnostics(model, ds.val_ids);
    CHECK(d.applicable);
    CHECK(d.snr > 0);
    CHECK(std::isfinite(d.normalized_var_a));

    TrainConfig ce_only = base;
    Trainer<float> tr0(gcfg, ce_only);
    SmallGPT<float> m0(gcfg, 3);
    (void)tr0.train(m0, ds);
    CHECK_FALSE(tr0.diagnostics(m0, ds.val_ids).applicable);
  }

  SUBCASE("diverging run aborts with a margin-saturation diagnostic") {
    TrainConfig cfg = base;
    cfg.lr = 1e25;  // guaranteed blow-up
    cfg.lambda_margin = 0.05;
    SmallGPT<float> model(gcfg, 3);
    Trainer<float> tr(gcfg, cfg);
    try {
      (void)tr.train(model, ds);
      FAIL("expected divergence");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("saturation") != std::string::npos);
    }
  }

  SUBCASE("BPC times ln2 is the mean CE in nats") {
    TrainConfig cfg = base;
    SmallGPT<float> model(gcfg, 3);
    Trainer<float> tr(gcfg, cfg);
    const double bpc = tr.eval_bpc(model, ds.val_ids, 0.0, 0);
    // Independent recomputation of the mean CE over the same windows.
    const auto windows = Trainer<float>::window_starts(ds.val_ids, gcfg.context);
    double ce = 0;
    for (long w : windows) {
      TapeF tape;
      auto [in, targets] = Trainer<float>::window_tokens(ds.val_ids, w, gcfg.context);
      SmallGPT<float>::ForwardOptions fopt;
      fopt.requires_grad = false;
      ce += static_cast<double>(tape.value(model.forward(tape, in, targets, fopt).ce).scalar());
    }
    ce /= static_cast<double>(windows.size());
    CHECK(bpc * std::log(2.0) == doctest::Approx(ce).epsilon(1e-12));
  }

  SUBCASE("constant embeddings give zero normalized dispersion") {
    // Degenerate check of the Var_a numerator: identical context values have
    // zero attention-weighted covariance regardless of the weights.
    prior::Mat x = prior::Mat::Ones(6, 3) * 0.7;
    prior::Mat w = prior::Mat::Random(3, 3);
    double tr_sum = 0;
    for (Index t = 1; t < 6; ++t) {
      VecX<double> logits = x.topRows(t) * w.transpose() * x.row(t).transpose();
      VecX<double> alpha = (logits.array() - logits.maxCoeff()).exp();
      alpha /= alpha.sum();
      const VecX<double> mu = x.topRows(t).transpose() * alpha;
      for (Index s = 0; s < t; ++s) tr_sum += alpha[s] * (x.row(s).transpose() - mu).squaredNorm();
    }
    CHECK(tr_sum == doctest::Approx(0.0));
  }
}
