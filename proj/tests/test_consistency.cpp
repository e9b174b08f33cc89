#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "attnprior/consistency.hpp"

using namespace attnprior;
using namespace attnprior::consistency;

namespace {

TokenModelSpec k1_spec() {
  TokenModelSpec spec{1,
                      Mat::Zero(1, 1),
                      Vec::Zero(1),
                      Mat::Zero(1, 1),
                      prior::AttentionPriorParams::scalar(-0.25),
                      true,
                      Mat::Zero(1, 1)};
  return spec;
}

TokenModelSpec noncausal_spec(double peek = 3.0) {
  auto spec = TokenModelSpec::random(2, 1, 99);
  spec.causal = false;
  spec.peek_w = Mat::Constant(2, 1, 0.0);
  spec.peek_w(1, 0) = peek;  // the t=1 factor reads x_2
  return spec;
}

std::vector<std::vector<int>> enumerate_seqs(int vocab, Index len) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<size_t>(len), 0);
  while (true) {
    out.push_back(cur);
    Index pos = len - 1;
    while (pos >= 0 && ++cur[static_cast<size_t>(pos)] == vocab) {
      cur[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return out;
}

}  // namespace

TEST_CASE("token factors are categorical distributions") {
  auto spec = TokenModelSpec::random(3, 1, 7);
  Mat x(4, 1);
  x << 0.3, -1.2, 0.8, 0.1;
  for (Index t = 1; t <= 4; ++t) {
    const Vec p = token_factor(spec, t > 1 ? 1 : -1, x, t);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    CHECK(p.minCoeff() > 0);
  }
}

TEST_CASE("joint log prob") {
  Mat x(3, 1);
  x << 0.4, -0.2, 1.0;

  SUBCASE("K = 1 vocabulary: conditional is certain, joint equals the prior") {
    auto spec = k1_spec();
    std::vector<int> y{0, 0, 0};
    CHECK(cond_log_prob(spec, y, x) == doctest::Approx(0.0));
    CHECK(joint_log_prob(spec, y, x) ==
          doctest::Approx(
              prior::log_density(spec.prior, prior::EmbeddingSequence(x)).total_log_density));
  }
  SUBCASE("conditional probabilities over all token strings sum to 1") {
    auto spec = TokenModelSpec::random(2, 1, 11);
    double total = 0;
    for (const auto& y : enumerate_seqs(2, 3)) total += std::exp(cond_log_prob(spec, y, x));
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("n=2, K=2 joint equals a hand-composed product of factors") {
    auto spec = TokenModelSpec::random(2, 1, 13);
    Mat x2(2, 1);
    x2 << 0.7, -0.4;
    std::vector<int> y{1, 0};
    const Vec p1 = token_factor(spec, -1, x2, 1);
    const Vec p2 = token_factor(spec, 1, x2, 2);
    const double by_hand =
        std::log(p1[1]) + std::log(p2[0]) +
        prior::log_density(spec.prior, prior::EmbeddingSequence(x2)).total_log_density;
    CHECK(joint_log_prob(spec, y, x2) == doctest::Approx(by_hand).epsilon(1e-14));
  }
  SUBCASE("length mismatch raises") {
    auto spec = TokenModelSpec::random(2, 1, 17);
    std::vector<int> y{0, 1};
    CHECK_THROWS_AS((void)cond_log_prob(spec, y, x), DimensionError);
  }
}

TEST_CASE("summing out the last token (Lemma C.1)") {
  SUBCASE("causal spec: exact at any embeddings") {
    auto spec = TokenModelSpec::random(3, 1, 23);
    Prng rng(31);
    for (int rep = 0; rep < 10; ++rep) {
      Mat x(4, 1);
      for (Index i = 0; i < 4; ++i) x(i, 0) = rng.normal();
      for (const auto& prefix : enumerate_seqs(3, 3)) {
        const auto r = sum_out_last_token(spec, prefix, x);
        CHECK(std::abs(r.summed - r.prefix) < 1e-12);
      }
    }
  }
  SUBCASE("non-causal decoder breaks the identity") {
    auto spec = noncausal_spec();
    Mat x(2, 1);
    x << 0.9, 1.4;
    const auto r = sum_out_last_token(spec, {1}, x);
    CHECK(std::abs(r.summed - r.prefix) > 0.01);
  }
}

TEST_CASE("marginal token probability") {
  SUBCASE("K = 1 gives estimate exactly 1 with zero variance") {
    auto spec = k1_spec();
    const auto est = marginal_token_prob(spec, {0, 0}, 200, 5);
    CHECK(est.value == doctest::Approx(1.0));
    CHECK(est.standard_error == doctest::Approx(0.0));
    CHECK(est.n_rejected == 0);
  }
  SUBCASE("d=1, L=2, K=2 estimate matches a dense quadrature oracle") {
    auto spec = TokenModelSpec::random(2, 1, 41);
    std::vector<int> y{1, 0};
    const auto est = marginal_token_prob(spec, y, 40000, 12);

    // Independent 2-d trapezoid over the prior density times the decoder.
    const int n = 241;
    const double lo = -9, hi = 9, h = (hi - lo) / (n - 1);
    auto wt = [&](int i) { return (i == 0 || i == n - 1) ? 0.5 * h : h; };
    double oracle = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        Mat x(2, 1);
        x << lo + i * h, lo + j * h;
        oracle += wt(i) * wt(j) *
                  std::exp(cond_log_prob(spec, y, x) +
                           prior::log_density(spec.prior, prior::EmbeddingSequence(x))
                               .total_log_density);
      }
    CHECK(std::abs(est.value - oracle) <= 3.0 * est.standard_error + 1e-6);
  }
  SUBCASE("shared per-sample streams make the consistency identity exact") {
    auto spec = TokenModelSpec::random(2, 1, 43);
    const int m = 2000;
    const auto p0 = marginal_token_prob(spec, {1}, m, 77);
    double summed = 0, se2 = 0;
    for (int y2 = 0; y2 < 2; ++y2) {
      const auto e = marginal_token_prob(spec, {1, y2}, m, 77);
      summed += e.value;
      se2 += e.standard_error * e.standard_error;
    }
    CHECK(std::abs(summed - p0.value) < 1e-12);  // exact per sample
    CHECK(std::abs(summed - p0.value) <= 3.0 * std::sqrt(se2 + p0.standard_error * p0.standard_error));
  }
}

TEST_CASE("kolmogorov consistency checks") {
  SUBCASE("causal specs pass at 1e-12 across seeds") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
      auto spec = TokenModelSpec::random(2, 1, 100 + seed);
      const auto rep = kolmogorov_consistency_check(spec, 3, 500, seed);
      CHECK(rep.pass);
      CHECK(rep.discrepancy < 1e-12);
    }
  }
  SUBCASE("K=4 richer vocabulary also passes") {
    auto spec = TokenModelSpec::random(4, 1, 55);
    const auto rep = kolmogorov_consistency_check(spec, 3, 300, 9);
    CHECK(rep.pass);
  }
  SUBCASE("non-causal spec fails loudly") {
    auto spec = noncausal_spec();
    const auto rep = kolmogorov_consistency_check(spec, 2, 500, 21);
    CHECK_FALSE(rep.pass);
    CHECK(rep.discrepancy > 0.01);
  }
}

TEST_CASE("appendix C.3 counterexample numbers") {
  const auto [summed, len1] = counterexample_appendix_c3();
  CHECK(summed == doctest::Approx(0.82).epsilon(1e-15));
  CHECK(len1 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(summed - len1) == doctest::Approx(0.32).epsilon(1e-12));

  const auto [balanced, len1b] = counterexample_appendix_c3(0.5);
  CHECK(balanced == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(len1b == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("integrating out the last embedding (Lemma C.2)") {
  SUBCASE("f == 1: both sides are the total mass 1") {
    auto spec = TokenModelSpec::random(2, 1, 61);
    const auto rep = integrate_out_last_latent_check(spec, LatentIntegrand::One, 3);
    CHECK(rep.pass);
    CHECK(rep.discrepancy < 0.01);
  }
  SUBCASE("smoothed likelihood under a = -0.25") {
    auto spec = TokenModelSpec::random(2, 1, 67, -0.25);
    const auto rep =
        integrate_out_last_latent_check(spec, LatentIntegrand::SmoothedLikelihood, 3);
    CHECK(rep.pass);
  }
  SUBCASE("a = 0 Gauss-Hermite route agrees to 1e-6") {
    auto spec = TokenModelSpec::random(2, 1, 71, 0.0);
    const auto rep = integrate_out_last_latent_gauss_hermite(spec);
    CHECK(rep.pass);
    CHECK(rep.discrepancy < 1e-6);
  }
}

TEST_CASE("prefix stability: factors do not depend on the horizon") {
  auto spec = TokenModelSpec::random(3, 1, 83);
  Prng rng(5);
  Mat x5(5, 1);
  for (Index i = 0; i < 5; ++i) x5(i, 0) = rng.normal();
  for (Index t = 1; t <= 4; ++t) {
    const Vec at_len4 = token_factor(spec, t > 1 ? 2 : -1, x5.topRows(4), t);
    const Vec at_len5 = token_factor(spec, t > 1 ? 2 : -1, x5, t);
    CHECK((at_len4 - at_len5).cwiseAbs().maxCoeff() == 0.0);  // bit identical
  }
}

TEST_CASE("cylinder refinement from independent ancestral runs") {
  auto spec = TokenModelSpec::random(2, 1, 91);
  const auto rep = cylinder_refinement_check(spec, 3, 20000, 17);
  CHECK(rep.pass);
}
