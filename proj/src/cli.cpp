#include "attnprior/cli.hpp"

#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "attnprior/consistency.hpp"
#include "attnprior/depth.hpp"
#include "attnprior/io.hpp"
#include "attnprior/lm.hpp"
#include "attnprior/prior.hpp"

namespace attnprior::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using prior::Mat;
using prior::Vec;

namespace {

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir + ": " + ec.message());
}

void write_manifest(const RunOptions& opts, const std::string& corpus_content = "") {
  json m;
  m["command"] = opts.command;
  m["seed"] = opts.seed;
  m["out_dir"] = opts.out_dir;
  m["preset"] = opts.preset;
  m["threads"] = worker_count();
  json cfg = json::object();
  for (const auto& [k, v] : opts.cfg.entries()) cfg[k] = v;
  m["config"] = cfg;
  if (!corpus_content.empty()) {
    m["corpus"] = opts.corpus_path;
    m["corpus_sha1"] = io::git_blob_sha1(corpus_content);
  }
  io::write_text_file(opts.out_dir + "/run_manifest.json", m.dump(2) + "\n");
}

// --------------------------------------------------------------------------
// Training plumbing shared by train / robustness / lambda-sweep.

struct TrainSetup {
  lm::CharDataset dataset;
  lm::GptConfig gcfg;
  lm::TrainConfig tcfg;
  std::string corpus_content;
};

TrainSetup prepare_training(const RunOptions& opts) {
  if (opts.corpus_path.empty())
    throw std::runtime_error("no corpus given: pass --corpus PATH");
  if (!fs::exists(opts.corpus_path))
    throw std::runtime_error("corpus file does not exist: " + opts.corpus_path);
  TrainSetup s;
  s.corpus_content = io::read_text_file(opts.corpus_path);

  const bool paper = opts.preset == "paper";
  const int min_count = static_cast<int>(opts.cfg.get_long("train.min_count", 50));
  const double val_fraction = opts.cfg.get_double("train.val_fraction", paper ? 0.1 : 0.1);
  s.dataset = lm::load_dataset(s.corpus_content, min_count, val_fraction);

  s.gcfg = paper ? lm::paper_gpt_config(s.dataset.vocab.size())
                 : lm::desk_gpt_config(s.dataset.vocab.size());
  s.gcfg.d_model = opts.cfg.get_long("model.d_model", s.gcfg.d_model);
  s.gcfg.n_heads = opts.cfg.get_long("model.n_heads", s.gcfg.n_heads);
  s.gcfg.n_layers = opts.cfg.get_long("model.n_layers", s.gcfg.n_layers);
  s.gcfg.context = opts.cfg.get_long("model.context", s.gcfg.context);
  s.gcfg.tied_embeddings = opts.cfg.get_bool("model.tied_embeddings", true);
  s.gcfg.validate();

  s.tcfg.lambda_margin = opts.cfg.get_double("train.lambda", 0.05);
  s.tcfg.quadratic_term = opts.cfg.get_bool("train.quadratic_term", false);
  s.tcfg.sigma_prior = opts.cfg.get_double("train.sigma_prior", 1.0);
  s.tcfg.lr = opts.cfg.get_double("train.lr", 1e-3);
  s.tcfg.weight_decay = opts.cfg.get_double("train.weight_decay", 1e-4);
  s.tcfg.epochs = static_cast<int>(opts.cfg.get_long("train.epochs", paper ? 30 : 5));
  s.tcfg.batch = static_cast<int>(opts.cfg.get_long("train.batch", paper ? 64 : 32));
  s.tcfg.clip_norm = opts.cfg.get_double("train.clip", 1.0);
  s.tcfg.freeze_prior_w = opts.cfg.get_bool("train.freeze_prior_w", false);
  s.tcfg.seed = opts.seed;
  return s;
}

struct TrainedModel {
  lm::SmallGPT<float> model;
  lm::TrainRunRecord record;
};

TrainedModel run_training(const TrainSetup& s, double lambda) {
  lm::TrainConfig tcfg = s.tcfg;
  tcfg.lambda_margin = lambda;
  TrainedModel out{lm::SmallGPT<float>(s.gcfg, tcfg.seed), {}};
  lm::Trainer<float> trainer(s.gcfg, tcfg);
  out.record = trainer.train(out.model, s.dataset);
  return out;
}

std::vector<double> sigma_grid_from(const Config& cfg) {
  const double sigma_max = cfg.get_double("robustness.sigma_max", 0.5);
  const long n = cfg.get_long("robustness.n_sigmas", 11);
  std::vector<double> grid;
  for (long i = 0; i < n; ++i)
    grid.push_back(n == 1 ? sigma_max : sigma_max * static_cast<double>(i) / (n - 1));
  return grid;
}

std::vector<double> lambda_grid_from(const Config& cfg) {
  const std::string spec = cfg.get_str("sweep.lambdas", "");
  if (spec.empty()) return lm::default_lambda_grid();
  std::vector<double> grid;
  std::istringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) grid.push_back(std::stod(tok));
  return grid;
}

// Small local FD helpers for the verify suite (kept independent of the
// analytic code paths they check).

Mat fd_block(const prior::AttentionPriorParams& p, const Mat& x, Index t) {
  const Index d = x.cols();
  Mat J(d, d);
  const double h = 1e-6;
  for (Index j = 0; j < d; ++j) {
    Mat xp = x, xm = x;
    xp(t - 1, j) += h;
    xm(t - 1, j) -= h;
    const auto sp = prior::context_summary(p, prior::EmbeddingSequence(xp), t);
    const auto sm = prior::context_summary(p, prior::EmbeddingSequence(xm), t);
    const Vec ep = xp.row(t - 1).transpose() - sp.v_bar;
    const Vec em = xm.row(t - 1).transpose() - sm.v_bar;
    J.col(j) = (ep - em) / (2 * h);
  }
  return J;
}

Mat random_mat(Index r, Index c, Prng& rng, double scale) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

struct Check {
  std::string name;
  std::string instance;
  double discrepancy;
  double tolerance;
  bool pass;
};

json check_json(const Check& c) {
  return json{{"check", c.name},
              {"instance", c.instance},
              {"discrepancy", c.discrepancy},
              {"tolerance", c.tolerance},
              {"pass", c.pass}};
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_theory_figures(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);

  prior::Figure2Config f2;
  f2.n_grid = static_cast<int>(opts.cfg.get_long("figures.grid", 1001));
  const auto rows2 = prior::figure2_sweep(f2);
  {
    io::CsvWriter dens(opts.out_dir + "/fig2_density.csv", {"a", "x3", "density"});
    io::CsvWriter fact(opts.out_dir + "/fig2_factor.csv", {"a", "x3", "var", "factor"});
    for (const auto& r : rows2) {
      dens.row({r.a, r.x3, r.density});
      fact.row({r.a, r.x3, r.var, r.factor});
    }
  }

  auto run_fig3 = [&](double a, const std::string& path) {
    prior::Figure3Config f3;
    f3.a = a;
    const auto res = prior::figure3_population(f3, opts.seed);
    io::CsvWriter csv(opts.out_dir + "/" + path,
                      {"var_final", "factor_final", "log_density", "valid"});
    for (const auto& r : res.rows)
      csv.row({r.var_final, r.factor_final, r.log_density, r.valid ? 1.0 : 0.0});
    return res;
  };
  const auto pos = run_fig3(0.2, "fig3_population_pos.csv");
  const auto neg = run_fig3(-0.2, "fig3_population_neg.csv");

  if (opts.svg) {
    const char* colors[] = {"#4363d8", "#e6194b", "#3cb44b", "#f58231",
                            "#911eb4", "#46f0f0", "#808000"};
    io::SvgPlot dens(640, 420, "Conditional density of x3 (x1=0, x2=2)", "x3", "density");
    io::SvgPlot fact(640, 420, "Diagonal factor 1 - a Var", "x3", "factor");
    int ci = 0;
    for (double a : prior::Figure2Config{}.couplings) {
      std::vector<double> xs, ds, fs;
      for (const auto& r : rows2)
        if (r.a == a) {
          xs.push_back(r.x3);
          ds.push_back(r.density);
          fs.push_back(r.factor);
        }
      char label[32];
      std::snprintf(label, sizeof(label), "a=%+.2f", a);
      dens.add_line(xs, ds, colors[ci % 7], label);
      fact.add_line(xs, fs, colors[ci % 7], label);
      ++ci;
    }
    dens.save(opts.out_dir + "/fig2_density.svg");
    fact.save(opts.out_dir + "/fig2_factor.svg");

    io::SvgPlot sc(640, 420, "Diagonal factor vs dispersion (4000 draws)", "Var at final position",
                   "factor");
    std::vector<double> xs_p, ys_p, xs_n, ys_n;
    for (const auto& r : pos.rows) {
      xs_p.push_back(r.var_final);
      ys_p.push_back(r.factor_final);
    }
    for (const auto& r : neg.rows) {
      xs_n.push_back(r.var_final);
      ys_n.push_back(r.factor_final);
    }
    sc.add_scatter(xs_p, ys_p, "#e6194b", "a=+0.2");
    sc.add_scatter(xs_n, ys_n, "#3cb44b", "a=-0.2");
    sc.save(opts.out_dir + "/fig3_population.svg");
  }

  json summary;
  summary["fig3_pos_valid"] = pos.valid_count;
  summary["fig3_neg_valid"] = neg.valid_count;
  summary["fig3_total"] = 4000;
  io::write_text_file(opts.out_dir + "/theory_figures_summary.json", summary.dump(2) + "\n");
  write_manifest(opts);
  std::cout << "theory-figures: fig3 valid " << pos.valid_count << "/4000 (a=+0.2), "
            << neg.valid_count << "/4000 (a=-0.2)\n";
  return 0;
}

int cmd_density(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);
  if (opts.input_path.empty()) throw std::runtime_error("density needs --input CSV of embeddings");
  const std::string text = io::read_text_file(opts.input_path);

  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(opts.input_path + ":" + std::to_string(lineno) +
                                 ": not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error(opts.input_path + ":" + std::to_string(lineno) +
                               ": ragged row width");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(opts.input_path + ": no rows");

  const Index L = static_cast<Index>(rows.size());
  const Index d = static_cast<Index>(rows.front().size());
  Mat x(L, d);
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < d; ++j) x(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];

  const double a = opts.cfg.get_double("prior.a", 0.0);
  prior::AttentionPriorParams p = [&] {
    if (d == 1) return prior::AttentionPriorParams::scalar(a, opts.cfg.get_double("prior.sigma", 1.0));
    Prng rng = Prng(opts.seed).derive(0xD0);
    // For d > 1 a configured scale draws seeded projections; zero scale (the
    // default) keeps the coupling at zero.
    const double scale = opts.cfg.get_double("prior.scale", 0.0);
    Mat wq = scale == 0.0 ? Mat::Zero(d, d) : random_mat(d, d, rng, scale);
    Mat wk = scale == 0.0 ? Mat::Identity(d, d) : random_mat(d, d, rng, scale);
    return prior::AttentionPriorParams(wq, wk, Mat::Identity(d, d),
                                       opts.cfg.get_double("prior.sigma", 1.0));
  }();

  const auto rep = prior::log_density(p, prior::EmbeddingSequence(x));
  json out;
  out["length"] = L;
  out["dim"] = d;
  out["quad_energy"] = rep.quad_energy;
  out["total_log_density"] =
      std::isfinite(rep.total_log_density) ? json(rep.total_log_density) : json("-inf");
  out["sequence_margin"] = rep.sequence_margin;
  out["support_tokens"] = rep.support_tokens;
  out["valid"] = rep.valid;
  out["invalid_positions"] = rep.invalid_positions;
  json terms = json::array();
  for (double t : rep.logdet_terms) terms.push_back(std::isfinite(t) ? json(t) : json("-inf"));
  out["logdet_terms"] = terms;
  json margins = json::array();
  for (Index t = 1; t <= L; ++t)
    margins.push_back(prior::margin(p, prior::EmbeddingSequence(x), t, prior::MarginKind::Det));
  out["margins_det"] = margins;

  const std::string dumped = out.dump(2) + "\n";
  io::write_text_file(opts.out_dir + "/density_report.json", dumped);
  std::cout << dumped;
  write_manifest(opts);
  return rep.valid ? 0 : 1;
}

int cmd_verify(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);
  std::vector<Check> checks;
  Prng rng = Prng(opts.seed).derive(0x7E51);

  {  // Coupling-cache consistency (negative control flips this).
    auto p = prior::AttentionPriorParams(random_mat(3, 3, rng, 0.4), random_mat(3, 3, rng, 0.4),
                                         Mat::Identity(3, 3), 1.0);
    if (opts.corrupt_cache) p.corrupt_coupling_cache_for_test();
    checks.push_back({"coupling-cache", "d=3", p.coupling_cache_consistent() ? 0.0 : 1.0, 0.0,
                      p.coupling_cache_consistent()});
  }

  {  // Softmax Jacobian vs finite differences (Lemma B.1 identity).
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
      const Index m = 2 + static_cast<Index>(rng.uniform_int(5));
      Vec logits = random_mat(m, 1, rng, 1.5).col(0);
      Vec alpha = (logits.array() - logits.maxCoeff()).exp();
      alpha /= alpha.sum();
      const Mat analytic = Mat(alpha.asDiagonal()) - alpha * alpha.transpose();
      const double h = 1e-6;
      for (Index j = 0; j < m; ++j) {
        Vec lp = logits, lmm = logits;
        lp[j] += h;
        lmm[j] -= h;
        Vec ap = (lp.array() - lp.maxCoeff()).exp();
        ap /= ap.sum();
        Vec am = (lmm.array() - lmm.maxCoeff()).exp();
        am /= am.sum();
        worst = std::max(worst, ((ap - am) / (2 * h) - analytic.col(j)).cwiseAbs().maxCoeff());
      }
    }
    checks.push_back({"softmax-jacobian", "random logits m<=6", worst, 1e-8, worst < 1e-8});
  }

  {  // Covariance identity (Lemma B.2).
    double worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
      const Index d = 1 + static_cast<Index>(rng.uniform_int(3));
      auto p = prior::AttentionPriorParams(random_mat(d, d, rng, 0.4), random_mat(d, d, rng, 0.4),
                                           random_mat(d, d, rng, 0.8), 1.0);
      Mat x = random_mat(4, d, rng, 1.0);
      const auto st = prior::context_summary(p, prior::EmbeddingSequence(x), 4);
      Mat raw = Mat::Zero(d, d);
      Vec vbar = Vec::Zero(d);
      for (Index s = 0; s < 3; ++s) {
        const Vec vs = p.wv() * x.row(s).transpose();
        vbar += st.alpha[s] * vs;
        raw += st.alpha[s] * vs * vs.transpose();
      }
      worst = std::max(worst,
                       (raw - vbar * vbar.transpose() - st.Sigma).cwiseAbs().maxCoeff());
    }
    checks.push_back({"covariance-identity", "random d<=3", worst, 1e-10, worst < 1e-10});
  }

  {  // Diagonal Jacobian blocks, both modes, general W_V.
    double worst = 0;
    for (int rep = 0; rep < 40; ++rep) {
      const Index d = 1 + static_cast<Index>(rng.uniform_int(3));
      const Index L = 2 + static_cast<Index>(rng.uniform_int(4));
      auto p = prior::AttentionPriorParams(random_mat(d, d, rng, 0.35), random_mat(d, d, rng, 0.35),
                                           random_mat(d, d, rng, 0.8), 1.0,
                                           rep % 2 ? MaskMode::Inclusive : MaskMode::Strict);
      Mat x = random_mat(L, d, rng, 1.0);
      const Index t = 1 + static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(L)));
      const Mat analytic = prior::diag_jacobian_block(p, prior::EmbeddingSequence(x), t);
      const Mat fd = fd_block(p, x, t);
      worst = std::max(worst, (analytic - fd).cwiseAbs().maxCoeff() /
                                  std::max(1.0, fd.cwiseAbs().maxCoeff()));
    }
    checks.push_back({"diag-jacobian-block", "strict+inclusive, general W_V", worst, 1e-6,
                      worst < 1e-6});
  }

  {  // Block-triangular determinant factorization (Lemma B.3).
    double worst = 0;
    for (int rep = 0; rep < 8; ++rep) {
      const Index d = 1 + static_cast<Index>(rng.uniform_int(3));
      const Index L = 2 + static_cast<Index>(rng.uniform_int(4));
      auto p = prior::AttentionPriorParams(random_mat(d, d, rng, 0.3), random_mat(d, d, rng, 0.3),
                                           random_mat(d, d, rng, 0.7), 1.0);
      Mat x = random_mat(L, d, rng, 0.9);
      const double h = 1e-6;
      Mat J(L * d, L * d);
      for (Index s = 0; s < L; ++s)
        for (Index j = 0; j < d; ++j) {
          Mat xp = x, xm = x;
          xp(s, j) += h;
          xm(s, j) -= h;
          const Mat ep = prior::residuals(p, prior::EmbeddingSequence(xp));
          const Mat em = prior::residuals(p, prior::EmbeddingSequence(xm));
          for (Index t = 0; t < L; ++t)
            for (Index i = 0; i < d; ++i)
              J(t * d + i, s * d + j) = (ep(t, i) - em(t, i)) / (2 * h);
        }
      double prod = 1;
      for (Index t = 1; t <= L; ++t)
        prod *= prior::diag_jacobian_block(p, prior::EmbeddingSequence(x), t).determinant();
      worst = std::max(worst, std::abs(J.determinant() - prod) / std::max(1e-8, std::abs(prod)));
    }
    checks.push_back({"block-triangular-det", "L<=5 d<=3", worst, 1e-5, worst < 1e-5});
  }

  {  // Spectral sufficiency sample (Lemma B.6).
    int violations = 0, tested = 0;
    for (int rep = 0; rep < 2000; ++rep) {
      const Index d = 2 + static_cast<Index>(rng.uniform_int(2));
      Mat b = random_mat(d, d, rng, 1.0);
      Mat sigma = b * b.transpose();
      Mat A = random_mat(d, d, rng, 0.6);
      if (prior::spectral_radius(sigma * A) < 1.0) {
        ++tested;
        if (std::abs((Mat::Identity(d, d) - sigma * A).determinant()) <= 1e-12) ++violations;
      }
    }
    checks.push_back({"spectral-sufficiency", std::to_string(tested) + " instances with rho<1",
                      static_cast<double>(violations), 0.0, violations == 0});
  }

  {  // Margin-penalty gradient vs finite differences.
    Mat x = random_mat(5, 3, rng, 0.8);
    Mat w = random_mat(3, 3, rng, 0.3);
    Tape tape;
    Tensor xt = Tensor::from_matrix(x, true);
    Tensor wt = Tensor::from_matrix(w, true);
    auto xv = tape.leaf(xt);
    auto wv = tape.leaf(wt);
    auto pen = prior::margin_penalty_on_tape(tape, xv, wv);
    tape.backward(pen);
    double worst = 0;
    const double h = 1e-6;
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) {
        Mat wp = w, wm = w;
        wp(i, j) += h;
        wm(i, j) -= h;
        const double fd =
            (prior::margin_penalty_value(wp, x).value - prior::margin_penalty_value(wm, x).value) /
            (2 * h);
        worst = std::max(worst, std::abs(fd - tape.grad(wv).at(i, j)) / std::max(1.0, std::abs(fd)));
      }
    checks.push_back({"margin-penalty-gradient", "d=3 L=5 w.r.t. W", worst, 1e-4, worst < 1e-4});
  }

  {  // Consistency suite.
    auto spec = consistency::TokenModelSpec::random(3, 1, opts.seed ^ 0xC3);
    double worst = 0;
    Mat x = random_mat(4, 1, rng, 1.0);
    for (int y1 = 0; y1 < 3; ++y1)
      for (int y2 = 0; y2 < 3; ++y2)
        for (int y3 = 0; y3 < 3; ++y3) {
          const auto r = consistency::sum_out_last_token(spec, {y1, y2, y3}, x);
          worst = std::max(worst, std::abs(r.summed - r.prefix));
        }
    checks.push_back({"sum-out-last-token", "K=3 n=4", worst, 1e-12, worst < 1e-12});

    const auto kc = consistency::kolmogorov_consistency_check(spec, 3, 300, opts.seed);
    checks.push_back({kc.name, kc.instance, kc.discrepancy, kc.tolerance, kc.pass});

    auto bad = consistency::TokenModelSpec::random(2, 1, opts.seed ^ 0xBAD);
    bad.causal = false;
    bad.head_w.setZero();
    bad.head_b << 0.0, 1.0;  // asymmetric head so the peek cannot cancel
    bad.trans_b.setZero();
    bad.peek_w = Mat::Constant(2, 1, 0.0);
    bad.peek_w(1, 0) = 3.0;
    const auto kb = consistency::kolmogorov_consistency_check(bad, 2, 300, opts.seed);
    checks.push_back({"non-causal-detected", kb.instance, kb.discrepancy, 0.01,
                      !kb.pass && kb.discrepancy > 0.01});

    const auto [summed, len1] = consistency::counterexample_appendix_c3();
    checks.push_back({"counterexample-c3", "P2(y2=1)=0.9",
                      std::abs(summed - 0.82) + std::abs(len1 - 0.5), 0.0,
                      summed == 0.82 && len1 == 0.5});

    auto spec2 = consistency::TokenModelSpec::random(2, 1, opts.seed ^ 0xF00);
    const auto lr = consistency::integrate_out_last_latent_check(
        spec2, consistency::LatentIntegrand::SmoothedLikelihood, opts.seed);
    checks.push_back({lr.name, lr.instance, lr.discrepancy, lr.tolerance, lr.pass});
  }

  {  // Depth identity blocks and the self-referential deviation.
    Prng drng = rng.derive(0xDEE9);
    depth::LayerStack stack;
    stack.layers.push_back(depth::TransformerBlockParams::random(4, 2, drng));
    stack.sigmas = {1.0};
    Mat x_prev = random_mat(5, 4, drng, 1.0);
    Mat x_curr = random_mat(5, 4, drng, 1.0);
    double worst = 0;
    for (Index t = 1; t <= 5; ++t)
      worst = std::max(worst, (depth::deep_diag_block_numeric(stack, 1, x_prev, x_curr, t) -
                               Mat::Identity(4, 4))
                                  .cwiseAbs()
                                  .maxCoeff());
    checks.push_back({"depth-identity-blocks", "pre-norm block d=4", worst, 1e-8, worst < 1e-8});

    stack.conditioning = depth::Conditioning::SelfReferentialStub;
    double dev = 0;
    for (Index t = 2; t <= 5; ++t) {
      const Mat J = depth::deep_diag_block_numeric(stack, 1, x_prev, x_curr, t);
      Eigen::JacobiSVD<Mat> svd(J - Mat::Identity(4, 4));
      dev = std::max(dev, svd.singularValues()[0]);
    }
    checks.push_back({"self-referential-stub", "queries from current layer", dev, 0.01, dev > 0.01});
  }

  json bundle = json::array();
  bool all_pass = true;
  for (const auto& c : checks) {
    bundle.push_back(check_json(c));
    all_pass = all_pass && c.pass;
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " (" << c.instance
              << "): discrepancy " << c.discrepancy << " tol " << c.tolerance << "\n";
  }
  io::write_text_file(opts.out_dir + "/verify_report.json", bundle.dump(2) + "\n");
  write_manifest(opts);
  std::cout << (all_pass ? "verify: all checks passed\n" : "verify: FAILURES present\n");
  return all_pass ? 0 : 1;
}

int cmd_train(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);
  const auto setup = prepare_training(opts);
  auto trained = run_training(setup, setup.tcfg.lambda_margin);

  {
    io::CsvWriter csv(opts.out_dir + "/train_metrics.csv",
                      {"epoch", "train_bpc", "val_bpc", "margin_loss", "det_floor_hits"});
    for (size_t e = 0; e < trained.record.epochs.size(); ++e) {
      const auto& es = trained.record.epochs[e];
      csv.row({static_cast<double>(e + 1), es.train_bpc, es.val_bpc, es.margin_loss,
               static_cast<double>(es.det_floor_hits)});
    }
  }
  {
    io::CsvWriter csv(opts.out_dir + "/train_steps.csv", {"step", "loss"});
    for (size_t i = 0; i < trained.record.loss_trace.size(); ++i)
      csv.row({static_cast<double>(i), trained.record.loss_trace[i]});
  }
  io::save_checkpoint(opts.out_dir + "/model.ckpt", trained.model, setup.dataset.vocab);

  if (opts.svg) {
    std::vector<double> es, tb, vb;
    for (size_t e = 0; e < trained.record.epochs.size(); ++e) {
      es.push_back(static_cast<double>(e + 1));
      tb.push_back(trained.record.epochs[e].train_bpc);
      vb.push_back(trained.record.epochs[e].val_bpc);
    }
    io::SvgPlot plot(640, 420, "Training curves", "epoch", "BPC");
    plot.add_line(es, tb, "#4363d8", "train");
    plot.add_line(es, vb, "#3cb44b", "val");
    plot.save(opts.out_dir + "/bpc_curves.svg");
  }
  write_manifest(opts, setup.corpus_content);
  std::cout << "train: final val BPC " << trained.record.final_clean_bpc << " (lambda "
            << setup.tcfg.lambda_margin << ")\n";
  return 0;
}

int cmd_robustness(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);
  const auto setup = prepare_training(opts);
  const auto sigmas = sigma_grid_from(opts.cfg);
  const int draws = static_cast<int>(opts.cfg.get_long("robustness.draws", 5));

  lm::Trainer<float> evaluator(setup.gcfg, setup.tcfg);
  std::vector<lm::RobustnessRow> ce_rows, margin_rows;
  if (!opts.checkpoint_path.empty()) {
    lm::SmallGPT<float> model;
    (void)io::load_checkpoint(opts.checkpoint_path, model);
    margin_rows = evaluator.noise_robustness_eval(model, setup.dataset.val_ids, sigmas, draws,
                                                  opts.seed ^ 0x0b);
  } else {
    auto ce = run_training(setup, 0.0);
    auto margin = run_training(setup, setup.tcfg.lambda_margin);
    ce_rows = evaluator.noise_robustness_eval(ce.model, setup.dataset.val_ids, sigmas, draws,
                                              opts.seed ^ 0x0b);
    margin_rows = evaluator.noise_robustness_eval(margin.model, setup.dataset.val_ids, sigmas,
                                                  draws, opts.seed ^ 0x0b);
  }

  {
    std::vector<std::string> header{"sigma", "bpc_margin", "degradation_margin"};
    if (!ce_rows.empty()) {
      header.push_back("bpc_ce");
      header.push_back("degradation_ce");
    }
    io::CsvWriter csv(opts.out_dir + "/robustness.csv", header);
    for (size_t i = 0; i < margin_rows.size(); ++i) {
      std::vector<double> row{margin_rows[i].sigma, margin_rows[i].mean_bpc,
                              margin_rows[i].degradation};
      if (!ce_rows.empty()) {
        row.push_back(ce_rows[i].mean_bpc);
        row.push_back(ce_rows[i].degradation);
      }
      csv.row(row);
    }
  }
  if (opts.svg) {
    std::vector<double> xs, ym, yc;
    for (const auto& r : margin_rows) {
      xs.push_back(r.sigma);
      ym.push_back(r.mean_bpc);
    }
    io::SvgPlot plot(640, 420, "BPC under embedding noise", "sigma", "BPC");
    plot.add_line(xs, ym, "#3cb44b", "margin");
    if (!ce_rows.empty()) {
      for (const auto& r : ce_rows) yc.push_back(r.mean_bpc);
      plot.add_line(xs, yc, "#4363d8", "ce-only");
    }
    plot.save(opts.out_dir + "/robustness.svg");
  }
  write_manifest(opts, setup.corpus_content);
  std::cout << "robustness: wrote " << margin_rows.size() << " sigma levels\n";
  return 0;
}

int cmd_lambda_sweep(const RunOptions& opts) {
  ensure_out_dir(opts.out_dir);
  const auto setup = prepare_training(opts);
  const auto lambdas = lambda_grid_from(opts.cfg);
  const double probe_sigma = opts.cfg.get_double("sweep.probe_sigma", 0.3);
  const int draws = static_cast<int>(opts.cfg.get_long("robustness.draws", 5));

  std::vector<lm::LambdaSweepRow> rows;
  for (double lambda : lambdas) {
    auto trained = run_training(setup, lambda);
    lm::TrainConfig tcfg = setup.tcfg;
    tcfg.lambda_margin = lambda;
    lm::Trainer<float> trainer(setup.gcfg, tcfg);
    lm::LambdaSweepRow row;
    row.lambda = lambda;
    row.clean_bpc = trained.record.final_clean_bpc;
    double acc = 0;
    for (int dr = 0; dr < draws; ++dr)
      acc += trainer.eval_bpc(trained.model, setup.dataset.val_ids, probe_sigma,
                              opts.seed ^ (0x5EED + static_cast<std::uint64_t>(dr)));
    row.noisy_bpc = acc / draws;
    row.degradation = row.noisy_bpc / row.clean_bpc;
    const auto diag = trainer.diagnostics(trained.model, setup.dataset.val_ids);
    row.snr = diag.snr;
    row.normalized_var_a = diag.normalized_var_a;
    row.diagnostics_applicable = diag.applicable;
    rows.push_back(row);
    std::cout << "lambda " << lambda << ": clean " << row.clean_bpc << " noisy " << row.noisy_bpc
              << " deg " << row.degradation << "\n";
  }

  {
    io::CsvWriter csv(opts.out_dir + "/lambda_sweep.csv",
                      {"lambda", "clean_bpc", "noisy_bpc", "degradation", "snr",
                       "normalized_var_a", "diagnostics_applicable"});
    for (const auto& r : rows)
      csv.row({r.lambda, r.clean_bpc, r.noisy_bpc, r.degradation, r.snr, r.normalized_var_a,
               r.diagnostics_applicable ? 1.0 : 0.0});
  }
  if (opts.svg) {
    std::vector<double> xs, deg, clean;
    for (const auto& r : rows) {
      xs.push_back(r.lambda);
      deg.push_back(r.degradation);
      clean.push_back(r.clean_bpc);
    }
    io::SvgPlot plot(640, 420, "Regularization path", "lambda", "degradation");
    plot.add_line(xs, deg, "#e6194b", "noisy/clean");
    plot.save(opts.out_dir + "/lambda_path.svg");
    io::SvgPlot plot2(640, 420, "Clean BPC across lambda", "lambda", "BPC");
    plot2.add_line(xs, clean, "#4363d8", "clean");
    plot2.save(opts.out_dir + "/lambda_clean_bpc.svg");
  }
  write_manifest(opts, setup.corpus_content);
  return 0;
}

int run_command(RunOptions& opts) {
  if (!opts.config_path.empty()) {
    Config file_cfg = Config::from_file(opts.config_path);
    // flags set earlier take precedence over file values
    for (const auto& [k, v] : opts.cfg.entries()) file_cfg.set(k, v);
    opts.cfg = file_cfg;
  }
  if (opts.command == "theory-figures") return cmd_theory_figures(opts);
  if (opts.command == "density") return cmd_density(opts);
  if (opts.command == "verify") return cmd_verify(opts);
  if (opts.command == "train") return cmd_train(opts);
  if (opts.command == "robustness") return cmd_robustness(opts);
  if (opts.command == "lambda-sweep") return cmd_lambda_sweep(opts);
  throw std::runtime_error("unknown command: " + opts.command);
}

}  // namespace attnprior::cli
