// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
// numbers as arguments to run a subset.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "analytics_oracle.hpp"
#include "mlsae/activation_stream.hpp"
#include "mlsae/errors.hpp"
#include "mlsae/evaluator.hpp"
#include "mlsae/layer_analytics.hpp"
#include "mlsae/parallel.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/synthetic.hpp"
#include "mlsae/toy_transformer.hpp"
#include "mlsae/trainer.hpp"
#include "mlsae/tuned_lens.hpp"
#include "test_util.hpp"

using namespace mlsae;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances ----
constexpr double kGradRelTol = 1e-4;
constexpr double kGradAbsFloor = 1e-9;
constexpr double kNormTol = 1e-5;
constexpr double kProjectionTol = 1e-6;
constexpr double kRecoveryFvu = 0.1;
constexpr double kRecoveryMmcs = 0.9;
constexpr double kTotalVarianceTol = 1e-9;
constexpr double kOracleTol = 1e-12;
constexpr double kLensRoundTrip = 1e-5;
constexpr double kLensTrainingTol = 1e-6;
constexpr double kPatchTol = 1e-6;
constexpr double kTokenRatioMax = 0.5;
constexpr double kNegativeControlRel = 0.2;

constexpr double kGradRuntime = 60.0;
constexpr double kRecoveryRuntime = 600.0;
constexpr double kToyRunRuntime = 1800.0;

struct Result {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

const test::TempDir& work_dir() {
  static test::TempDir dir("acceptance");
  return dir;
}

void tap_stream(const toy::ModelWeights& w, const std::vector<std::vector<TokenId>>& seqs, const fs::path& path) {
  const auto& mc = w.config;
  StreamHeader h;
  h.d = mc.d_model;
  h.n_layers = mc.n_layers;
  h.model_tag = "toy-transformer";
  std::ofstream out(path, std::ios::binary);
  StreamWriter writer(out, h);
  std::vector<float> rec(h.record_floats());
  for (const auto& s : seqs) {
    const auto r = toy::forward(s, w);
    for (std::size_t t = 0; t < s.size(); ++t) {
      for (std::uint32_t l = 0; l < mc.n_layers; ++l)
        std::copy_n(r.taps.layers[l].row(static_cast<Eigen::Index>(t)).data(), mc.d_model, rec.begin() + l * mc.d_model);
      writer.write(s[t], mc.is_special(s[t]) ? kFlagSpecial : 0, rec);
    }
  }
  writer.finish();
}

SaeConfig sae_config(std::uint32_t d, std::uint32_t r, std::uint32_t k, std::uint32_t k_aux, double alpha) {
  SaeConfig c;
  c.d = d;
  c.expansion_factor = r;
  c.k = k;
  c.k_aux = k_aux;
  c.alpha = alpha;
  return c;
}

// ---- shared toy-model run (criteria 5 and 9) ----

struct ToyRun {
  double seconds = 0.0;
  std::uint64_t vectors_trained = 0;
  std::uint64_t steps = 0;
  double final_fvu = 0.0;
  double heldout_fvu = 0.0;
  AnalyticsSnapshot snapshot;
  VarianceDecomposition decomposition;
};

const ToyRun& toy_run() {
  static std::optional<ToyRun> cached;
  if (cached) return *cached;
  const auto start = Clock::now();
  ToyRun run;
  const toy::ModelConfig mc;  // desk config: 4 layers, d_model 64
  const auto weights = toy::init_random(mc, 1);
  constexpr std::uint64_t kTargetVectors = 2'000'000;
  // Generous corpus: punctuation tokens are special too, so not every position counts.
  const std::size_t approx_seqs = kTargetVectors / ((mc.max_seq - 1) * mc.n_layers) * 5 / 4 + 256;
  auto corpus = toy::generate_corpus(approx_seqs * mc.max_seq, 2);
  auto seqs = toy::make_sequences(corpus, toy::kBosToken, mc.max_seq);
  const std::size_t heldout_seqs = 256;
  std::size_t train_seqs = 0;
  for (std::uint64_t vectors = 0; vectors < kTargetVectors + 8192 && train_seqs < seqs.size(); ++train_seqs)
    for (const auto t : seqs[train_seqs]) vectors += mc.is_special(t) ? 0 : mc.n_layers;
  if (seqs.size() < train_seqs + heldout_seqs) throw Error("toy run: corpus too small");
  std::vector<std::vector<TokenId>> train_set(seqs.begin(), seqs.begin() + train_seqs);
  std::vector<std::vector<TokenId>> held(seqs.begin() + train_seqs, seqs.begin() + train_seqs + heldout_seqs);
  const auto dir = work_dir().path();
  progress("toy run: tapping " + std::to_string(train_set.size()) + " training sequences");
  tap_stream(weights, train_set, dir / "toy_train.mlsa");
  tap_stream(weights, held, dir / "toy_heldout.mlsa");

  TrainConfig cfg;
  cfg.tokens_per_batch = 1024;
  cfg.learning_rate = 1e-3;
  cfg.expansion_factor = 8;
  cfg.k = 8;
  cfg.dead_window_tokens = 100'000;
  cfg.shuffle_buffer = 65536;
  cfg.seed = 3;
  const auto stats = compute_layer_stats(dir / "toy_train.mlsa", cfg.stats_tokens);
  BatchOptions bo;
  bo.tokens_per_batch = cfg.tokens_per_batch;
  bo.shuffle_buffer = cfg.shuffle_buffer;
  bo.seed = cfg.seed;
  StreamBatchSource source(dir / "toy_train.mlsa", stats, nullptr, bo);
  progress("toy run: training MLSAE (R=8, k=8)");
  TrainOptions topts;
  topts.prefetch = worker_count() > 1;
  topts.checkpoint_path = dir / "toy.mlsc";
  topts.on_step = [](const StepReport& r) {
    if (r.step % 100 == 0) progress(fmt("step %llu fvu %.4f dead %.3f", (unsigned long long)r.step, r.fvu, r.dead_fraction));
  };
  auto result = train(source, mc.d_model, cfg, topts);
  run.steps = result.steps.size();
  run.vectors_trained = result.steps.empty() ? 0 : result.steps.back().tokens_seen * mc.n_layers;
  run.final_fvu = result.steps.empty() ? 1.0 : result.steps.back().fvu;

  BatchOptions eo;
  eo.tokens_per_batch = 4096;
  StreamBatchSource heldout(dir / "toy_heldout.mlsa", stats, nullptr, eo);
  run.snapshot = analyze(heldout, result.sae, result.params, mc.n_layers);
  run.decomposition = variance_decomposition(run.snapshot);
  run.heldout_fvu = eval_reconstruction(dir / "toy_heldout.mlsa", result.sae, result.params, stats, nullptr, 0).mean.fvu;
  run.seconds = seconds_since(start);
  cached = std::move(run);
  return *cached;
}

// ---- criteria ----

Result gradient_correctness() {
  const auto start = Clock::now();
  const double h = 1e-6;
  double worst_rel = 0.0, worst_block = 0.0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = sae_config(8, 4, 4, 16, 1.0 / 32.0);
    SaeParams<double> p;
    p.encoder = test::gaussian_rows<double>(32, 8, 10 * seed + 1, 1.0 / std::sqrt(8.0));
    p.decoder = test::gaussian_rows<double>(8, 32, 10 * seed + 2);
    renormalize_decoder(p);
    p.bias = test::gaussian_rows<double>(8, 1, 10 * seed + 3, 0.3);
    auto x = test::gaussian_rows<double>(16, 8, 10 * seed + 4);
    DeadMask dead(32, false);
    std::mt19937_64 rng(seed);
    for (std::size_t j = 0; j < 32; ++j) dead[j] = rng() % 2 == 0;
    auto fwd = forward_loss(x, p, c, dead);
    if (!fwd.aux.active) return {false, "no dead latents in the gradient check"};
    auto g = backward(x, fwd, p, c);
    auto loss = [&] { return forward_loss(x, p, c, dead).total_loss; };
    auto block = [&](auto& param, const auto& grad) {
      double diff2 = 0.0, ref2 = 0.0;
      for (Eigen::Index i = 0; i < param.size(); ++i) {
        double& v = param.data()[i];
        const double saved = v;
        v = saved + h;
        const double up = loss();
        v = saved - h;
        const double down = loss();
        v = saved;
        const double fd = (up - down) / (2 * h), an = grad.data()[i];
        const double mag = std::max(std::abs(fd), std::abs(an));
        if (std::abs(an - fd) > kGradRelTol * mag + kGradAbsFloor) ok = false;
        if (mag > 1e-6) worst_rel = std::max(worst_rel, std::abs(an - fd) / mag);
        diff2 += (an - fd) * (an - fd);
        ref2 += fd * fd;
      }
      worst_block = std::max(worst_block, std::sqrt(diff2 / std::max(ref2, 1e-300)));
    };
    block(p.encoder, g.encoder);
    block(p.decoder, g.decoder);
    block(p.bias, g.bias);
  }
  const double secs = seconds_since(start);
  ok = ok && worst_block < kGradRelTol && secs < kGradRuntime;
  return {ok, fmt("5 seeds, d=8 n=32 k=4 k_aux=16 B=16; worst elementwise rel err %.2e, worst block rel err %.2e "
                  "(tol %.0e); %.1f s",
                  worst_rel, worst_block, kGradRelTol, secs)};
}

Result constraint_maintenance() {
  SparseCodeOptions opt;
  opt.sparsity = 4;
  SyntheticBatchSource src(SparseCodeSampler(random_unit_dictionary(32, 128, 5), opt, 6), 512, 200);
  TrainConfig cfg;
  cfg.tokens_per_batch = 512;
  cfg.learning_rate = 1e-3;
  cfg.expansion_factor = 8;
  cfg.k = 4;
  cfg.dead_window_tokens = 512 * 20;
  cfg.seed = 1;
  auto r = train(src, 32, cfg, TrainOptions{.prefetch = false});
  double worst_norm = 0.0, worst_proj = 0.0;
  bool all_applied = true;
  for (const auto& s : r.steps) {
    worst_norm = std::max(worst_norm, s.max_norm_deviation);
    worst_proj = std::max(worst_proj, s.max_projection_residual);
    all_applied = all_applied && s.applied;
  }
  const bool ok = r.steps.size() == 200 && all_applied && worst_norm <= kNormTol && worst_proj < kProjectionTol;
  return {ok, fmt("%zu steps; max | ||w||-1 | = %.2e (tol %.0e), max |g'.w| = %.2e (tol %.0e)", r.steps.size(),
                  worst_norm, kNormTol, worst_proj, kProjectionTol)};
}

Result dictionary_recovery() {
  const auto start = Clock::now();
  const std::uint32_t d = 64;
  constexpr std::uint64_t kSteps = 10'000;
  constexpr std::size_t kBatch = 256;
  auto truth = random_unit_dictionary(d, 64, 11);
  SparseCodeOptions opt;
  opt.sparsity = 4;
  SyntheticBatchSource src(SparseCodeSampler(truth, opt, 12), kBatch, kSteps);
  TrainConfig cfg;
  cfg.tokens_per_batch = kBatch;
  cfg.learning_rate = 1e-3;
  cfg.expansion_factor = 1;
  cfg.k = 4;
  cfg.dead_window_tokens = kBatch * 50;
  cfg.seed = 13;
  TrainOptions topts{.prefetch = false};
  topts.on_step = [](const StepReport& s) {
    if (s.step % 2000 == 0) progress(fmt("recovery step %llu fvu %.4f dead %.3f", (unsigned long long)s.step, s.fvu, s.dead_fraction));
  };
  auto r = train(src, d, cfg, topts);
  SparseCodeSampler heldout(truth, opt, 99);
  auto x = heldout.sample(4096);
  const double fvu = forward_loss(x, r.params, r.sae).fvu;
  const double cross = mmcs(r.params.decoder, truth);
  const double reverse = mmcs(truth, r.params.decoder);
  const double secs = seconds_since(start);
  const bool ok = r.steps.size() >= kSteps && fvu < kRecoveryFvu && cross > kRecoveryMmcs && secs < kRecoveryRuntime;
  return {ok, fmt("%zu steps; held-out FVU %.4f (< %.1f), MMCS(learned, truth) %.4f (> %.1f), "
                  "MMCS(truth, learned) %.4f; %.1f s",
                  r.steps.size(), fvu, kRecoveryFvu, cross, kRecoveryMmcs, reverse, secs)};
}

Result auxk_efficacy() {
  const std::uint32_t d = 16;
  constexpr std::uint64_t kSteps = 3000;
  constexpr std::size_t kBatch = 256;
  double dead_alpha0 = 0.0, dead_alpha = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    double finals[2];
    for (int variant = 0; variant < 2; ++variant) {
      SparseCodeOptions opt;
      opt.sparsity = 4;
      SyntheticBatchSource src(SparseCodeSampler(random_unit_dictionary(d, 64, 100 + seed), opt, 200 + seed), kBatch,
                               kSteps);
      TrainConfig cfg;
      cfg.tokens_per_batch = kBatch;
      cfg.learning_rate = 1e-3;
      cfg.expansion_factor = 16;
      cfg.k = 4;
      cfg.dead_window_tokens = kBatch * 25;
      cfg.alpha = variant == 0 ? 0.0 : 1.0 / 32.0;
      cfg.seed = 300 + seed;
      auto r = train(src, d, cfg, TrainOptions{.prefetch = false});
      finals[variant] = r.steps.back().dead_fraction;
    }
    dead_alpha0 += finals[0] / 3;
    dead_alpha += finals[1] / 3;
    per_seed += fmt(" [%.3f vs %.3f]", finals[0], finals[1]);
  }
  return {dead_alpha < dead_alpha0,
          fmt("n=16d=256, mean final dead fraction alpha=0: %.4f, alpha=1/32: %.4f; per seed%s", dead_alpha0,
              dead_alpha, per_seed.c_str())};
}

test::Corpus oracle_corpus(std::uint64_t seed, AnalyticsSnapshot* streamed) {
  // 1000 tokens of toy-model activations encoded by an n=128 SAE.
  const toy::ModelConfig mc;
  const auto weights = toy::init_random(mc, seed);
  auto seqs = toy::make_sequences(toy::generate_corpus(12000, seed), toy::kBosToken, mc.max_seq);
  const auto path = work_dir() / ("oracle_" + std::to_string(seed) + ".mlsa");
  tap_stream(weights, seqs, path);
  const auto stats = compute_layer_stats(path, 1u << 30);
  BatchOptions bo;
  bo.tokens_per_batch = 100;
  bo.max_tokens = 1000;
  StreamBatchSource src(path, stats, nullptr, bo);
  auto cfg = sae_config(mc.d_model, 2, 8, 32, 0.0);
  auto first = src.next();
  if (!first) throw Error("oracle corpus: empty stream");
  auto params = init_params(first->x, cfg, seed).params;
  test::Corpus corpus{cfg.n(), mc.n_layers, cfg.k, {}};
  for (auto b = std::move(first); b; b = src.next()) test::append_codes(corpus, encode(b->x, params, cfg), b->rows);
  if (streamed) {
    std::vector<std::size_t> order(corpus.tokens.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
    *streamed = AnalyticsSnapshot{LatentLayerTotals(corpus.n, corpus.L), PerTokenVarianceAccumulator(corpus.n)};
    test::feed(corpus, order, 37, *streamed);
  }
  return corpus;
}

bool total_variance_ok(const VarianceDecomposition& v, double& gap) {
  gap = std::abs(v.total - v.within_latent - v.between_latent);
  auto in01 = [](double r) { return r >= 0.0 && r <= 1.0; };
  return gap <= kTotalVarianceTol && in01(v.ratio_latent) && in01(v.ratio_token);
}

Result law_of_total_variance() {
  const auto& run = toy_run();
  double gap_a = 0, gap_b = 0;
  const bool a = total_variance_ok(run.decomposition, gap_a);
  AnalyticsSnapshot oracle;
  oracle_corpus(21, &oracle);
  const auto vb = variance_decomposition(oracle);
  const bool b = total_variance_ok(vb, gap_b);
  const auto& va = run.decomposition;
  return {a && b,
          fmt("trained toy run: |Var(L) - E[Var(L|J)] - Var(E[L|J])| = %.1e, ratios %.4f / %.4f; "
              "random SAE: gap %.1e, ratios %.4f / %.4f (tol %.0e, ratios in [0,1])",
              gap_a, va.ratio_latent, va.ratio_token, gap_b, vb.ratio_latent, vb.ratio_token, kTotalVarianceTol)};
}

Result streaming_oracle() {
  AnalyticsSnapshot snap;
  auto corpus = oracle_corpus(5, &snap);
  const auto brute = test::brute_force(corpus);
  const auto& t = snap.totals;
  double worst = 0.0;
  bool counts_exact = true, status_ok = true;
  const auto entropy = normalized_entropy(t);
  const auto act = active_layers(t);
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (LatentIndex j = 0; j < corpus.n; ++j) {
    for (LayerIndex l = 0; l < corpus.L; ++l) {
      counts_exact = counts_exact && t.count(j, l) == brute.C[j][l];
      track(t.sum(j, l), brute.S[j][l]);
    }
    const auto dist = layer_distribution(t, j);
    status_ok = status_ok && dist.has_value() == brute.distribution[j].has_value();
    if (!dist || !brute.distribution[j]) continue;
    for (LayerIndex l = 0; l < corpus.L; ++l) track((*dist)[l], (*brute.distribution[j])[l]);
    track(*expected_layer(t, j), *brute.expected[j]);
    track(*entropy.values[j], *brute.entropy[j]);
    counts_exact = counts_exact && *act.values[j] == *brute.active_layers[j];
  }
  const auto v = variance_decomposition(snap);
  track(v.total, brute.total);
  track(v.within_latent, brute.within);
  track(v.between_latent, brute.between);
  track(v.within_token, brute.within_token);
  const bool ok = worst <= kOracleTol && counts_exact && status_ok && v.active_latents == brute.active &&
                  t.tokens_processed() == corpus.tokens.size();
  return {ok, fmt("%zu tokens, n=%u, %u layers, %u active latents; max abs deviation %.1e (tol %.0e); "
                  "counts %s",
                  corpus.tokens.size(), corpus.n, corpus.L, v.active_latents, worst, kOracleTol,
                  counts_exact ? "exact" : "MISMATCH")};
}

Result lens_round_trip() {
  const std::uint32_t d = 64, L = 4;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> wdist(0.0, 0.1 / d), bdist(0.0, 0.1);
  std::vector<Eigen::MatrixXd> ws;
  std::vector<Eigen::VectorXd> bs;
  for (std::uint32_t l = 0; l < L; ++l) {
    Eigen::MatrixXd w(d, d);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(wdist(rng));
    Eigen::VectorXd b(d);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = static_cast<float>(bdist(rng));
    ws.push_back(w);
    bs.push_back(b);
  }
  auto lens = TunedLens::from_parameters(ws, bs);
  std::normal_distribution<float> xdist(0.0f, 1.0f);
  double worst = 0.0;
  for (std::uint32_t l = 0; l < L; ++l) {
    for (int i = 0; i < 1000; ++i) {
      std::vector<float> x(d);
      for (auto& v : x) v = xdist(rng);
      const auto back = lens.invert(l, lens.apply(l, x));
      for (std::uint32_t q = 0; q < d; ++q) worst = std::max(worst, double(std::abs(back[q] - x[q])));
    }
  }

  // Identity lens vs lens disabled on the same stream.
  const auto path = work_dir() / "lens.mlsa";
  {
    const toy::ModelConfig mc;
    auto w = toy::init_random(mc, 8);
    tap_stream(w, toy::make_sequences(toy::generate_corpus(30000, 8), toy::kBosToken, mc.max_seq), path);
  }
  const auto stats = compute_layer_stats(path, 1u << 30);
  const auto identity = TunedLens::identity(d, L);
  TrainConfig cfg;
  cfg.tokens_per_batch = 256;
  cfg.learning_rate = 1e-3;
  cfg.expansion_factor = 4;
  cfg.k = 8;
  cfg.dead_window_tokens = 2048;
  BatchOptions bo;
  bo.tokens_per_batch = 256;
  StreamBatchSource plain(path, stats, nullptr, bo);
  StreamBatchSource with(path, stats, &identity, bo);
  auto a = train(plain, d, cfg, TrainOptions{.prefetch = false});
  cfg.lens_enabled = true;
  auto b = train(with, d, cfg, TrainOptions{.prefetch = false});
  double worst_loss = a.steps.size() == b.steps.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.steps.size(), b.steps.size()); ++i)
    worst_loss = std::max(worst_loss, std::abs(a.steps[i].total_loss - b.steps[i].total_loss));
  const bool ok = worst <= kLensRoundTrip && worst_loss <= kLensTrainingTol && !a.steps.empty();
  return {ok, fmt("d=%u, %u layers x 1000 vectors: max |invert(apply(x)) - x| = %.1e (tol %.0e); identity lens vs "
                  "disabled over %zu steps: max loss diff %.1e (tol %.0e)",
                  d, L, worst, kLensRoundTrip, a.steps.size(), worst_loss, kLensTrainingTol)};
}

Result patching_soundness() {
  const toy::ModelConfig mc;
  const auto w = toy::init_random(mc, 4);
  auto seqs = toy::make_sequences(toy::generate_corpus(20000, 4), toy::kBosToken, mc.max_seq);
  seqs.resize(std::min<std::size_t>(seqs.size(), 16));
  Reconstructor identity = [](const RowMatrix<float>& raw, std::size_t) { return raw; };
  double worst_ce = 0.0, worst_kl = 0.0, min_kl = INFINITY;
  for (std::uint32_t l = 0; l < mc.n_layers; ++l) {
    const auto m = eval_downstream(w, seqs, l, identity);
    worst_ce = std::max(worst_ce, std::abs(m.delta_ce));
    worst_kl = std::max(worst_kl, std::abs(m.kl));
  }
  // KL under lossy reconstructions, checked per position as well as pooled.
  std::mt19937_64 rng(5);
  Reconstructor noisy = [&](const RowMatrix<float>& raw, std::size_t) {
    std::normal_distribution<float> n(0.0f, 0.5f);
    RowMatrix<float> out = raw;
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += n(rng) * std::abs(out.data()[i]);
    return out;
  };
  for (std::uint32_t l = 0; l < mc.n_layers; ++l) {
    min_kl = std::min(min_kl, eval_downstream(w, seqs, l, noisy).kl);
    const auto clean = toy::forward(seqs[0], w);
    const auto live = std::count_if(seqs[0].begin(), seqs[0].end(), [&](TokenId t) { return !mc.is_special(t); });
    auto repl = test::gaussian_rows<float>(static_cast<Eigen::Index>(live), mc.d_model, l, 2.0);
    const auto patched = toy::patched_forward(seqs[0], w, l, repl);
    for (Eigen::Index t = 0; t < patched.rows(); ++t) {
      RowMatrix<float> a = clean.logits.row(t), b = patched.row(t);
      min_kl = std::min(min_kl, toy::kl_divergence(a, b));
    }
  }
  const bool ok = worst_ce < kPatchTol && worst_kl < kPatchTol && min_kl >= 0.0;
  return {ok, fmt("desk toy model, %zu sequences, 4 layers: no-op max |delta-CE| %.1e, max KL %.1e (tol %.0e); "
                  "min KL under lossy patches %.3e (>= 0)",
                  seqs.size(), worst_ce, worst_kl, kPatchTol, min_kl)};
}

Result toy_layer_spread() {
  const auto& run = toy_run();
  const auto& v = run.decomposition;
  const bool ok = run.vectors_trained >= 2'000'000 && v.ratio_token < kTokenRatioMax && run.seconds < kToyRunRuntime;
  return {ok, fmt("MLSAE R=8 k=8, %llu vectors in %llu steps (train FVU %.3f, held-out FVU %.3f); "
                  "E[Var(L|J,T)]/E[Var(L|J)] = %.4f (< %.1f), E[Var(L|J)]/Var(L) = %.4f, %u active / %u dead; %.0f s",
                  (unsigned long long)run.vectors_trained, (unsigned long long)run.steps, run.final_fvu,
                  run.heldout_fvu, v.ratio_token, kTokenRatioMax, v.ratio_latent, v.active_latents, v.dead_latents,
                  run.seconds)};
}

template <typename Save, typename Load>
bool file_round_trip(const fs::path& a, const fs::path& b, Save save, Load load) {
  save(a);
  auto back = load(a);
  save_from(back, b);
  return test::read_file(a) == test::read_file(b) && !test::read_file(a).empty();
}

Result format_fidelity() {
  const auto dir = work_dir().path();
  std::vector<std::string> failed;
  auto same = [](const fs::path& a, const fs::path& b) {
    const auto x = test::read_file(a);
    return !x.empty() && x == test::read_file(b);
  };

  // MLSA: write, read every record, write again.
  {
    auto records = test::gaussian_records(64, 4, 500, 1, 17);
    StreamHeader h{64, 4, 500, "fidelity"};
    test::write_records(dir / "f1.mlsa", h, records);
    StreamFile f(dir / "f1.mlsa");
    std::vector<ActivationRecord> back;
    while (auto r = f.reader().next()) back.push_back(std::move(*r));
    test::write_records(dir / "f2.mlsa", f.header(), back);
    bool bits = back.size() == records.size();
    for (std::size_t i = 0; bits && i < back.size(); ++i)
      bits = std::memcmp(back[i].vectors.data(), records[i].vectors.data(), records[i].vectors.size() * 4) == 0;
    if (!same(dir / "f1.mlsa", dir / "f2.mlsa") || !bits) failed.push_back("MLSA");
  }
  // MLLN
  {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 0.01);
    std::vector<Eigen::MatrixXd> ws(4, Eigen::MatrixXd(64, 64));
    std::vector<Eigen::VectorXd> bs(4, Eigen::VectorXd(64));
    for (auto& w : ws)
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(n(rng));
    for (auto& b : bs)
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = static_cast<float>(n(rng));
    save_lens(TunedLens::from_parameters(ws, bs), dir / "f1.mlln");
    save_lens(load_lens(dir / "f1.mlln", 64u, 4u), dir / "f2.mlln");
    if (!same(dir / "f1.mlln", dir / "f2.mlln")) failed.push_back("MLLN");
  }
  // MLSC, with and without trainer state
  {
    SparseCodeOptions opt;
    SyntheticBatchSource src(SparseCodeSampler(random_unit_dictionary(16, 32, 1), opt, 2), 128, 7);
    TrainConfig cfg;
    cfg.tokens_per_batch = 128;
    cfg.expansion_factor = 2;
    cfg.k = 4;
    cfg.dead_window_tokens = 256;
    train(src, 16, cfg, TrainOptions{.checkpoint_path = dir / "f1.mlsc", .prefetch = false});
    Trainer::resume(dir / "f1.mlsc", cfg).save_checkpoint(dir / "f2.mlsc");
    auto info = load_checkpoint(dir / "f1.mlsc");
    save_sae_checkpoint(dir / "f3.mlsc", info.sae, info.params);
    auto plain = load_checkpoint(dir / "f3.mlsc");
    save_sae_checkpoint(dir / "f4.mlsc", plain.sae, plain.params);
    if (!same(dir / "f1.mlsc", dir / "f2.mlsc") || !same(dir / "f3.mlsc", dir / "f4.mlsc") || plain.has_trainer_state)
      failed.push_back("MLSC");
  }
  // MLAN
  {
    AnalyticsSnapshot snap;
    oracle_corpus(9, &snap);
    save_snapshot(snap, dir / "f1.mlan");
    save_snapshot(load_snapshot(dir / "f1.mlan"), dir / "f2.mlan");
    if (!same(dir / "f1.mlan", dir / "f2.mlan") || !(load_snapshot(dir / "f1.mlan").totals == snap.totals))
      failed.push_back("MLAN");
  }
  const std::uint32_t d = 64, n = 1000;
  const auto h = histogram(pairwise_cosines(negative_control(d, n, 42)), 50);
  const double rel = std::abs(h.variance * d - 1.0);
  std::string failures;
  for (const auto& f : failed) failures += " " + f;
  const bool ok = failed.empty() && rel <= kNegativeControlRel;
  return {ok, fmt("MLSA, MLLN, MLSC, MLAN byte-identical round trips%s; negative control d=%u n=%u: variance %.5f vs "
                  "1/d %.5f (rel dev %.3f, tol %.1f)",
                  failed.empty() ? "" : (" FAILED for" + failures).c_str(), d, n, h.variance, 1.0 / d, rel,
                  kNegativeControlRel)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Result()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gradient correctness", gradient_correctness},
      {2, "constraint maintenance", constraint_maintenance},
      {3, "dictionary recovery", dictionary_recovery},
      {4, "AuxK efficacy", auxk_efficacy},
      {5, "law of total variance", law_of_total_variance},
      {6, "streaming vs brute-force oracle", streaming_oracle},
      {7, "tuned-lens round trip", lens_round_trip},
      {8, "patching soundness", patching_soundness},
      {9, "layer spread on the toy model", toy_layer_spread},
      {10, "format fidelity", format_fidelity},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    std::cerr << "criterion " << c.id << ": " << c.name << std::endl;
    const auto start = Clock::now();
    Result r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    if (!r.pass) ++failures;
    std::cout << (r.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << r.detail << " ("
              << fmt("%.1f", seconds_since(start)) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
