#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mlsae/activation_stream.hpp"
#include "mlsae/errors.hpp"
#include "mlsae/evaluator.hpp"
#include "mlsae/layer_analytics.hpp"
#include "mlsae/parallel.hpp"
#include "mlsae/reports.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/toy_transformer.hpp"
#include "mlsae/trainer.hpp"
#include "mlsae/tuned_lens.hpp"

namespace fs = std::filesystem;

namespace mlsae::cli {
namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string lens;
  std::optional<std::uint32_t> layer;
  std::string out = ".";
};

std::string read_text(const fs::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path out_dir(const Globals& g) {
  fs::path dir = g.out;
  fs::create_directories(dir);
  return dir;
}

toy::ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  toy::ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_layers") c.n_layers = value.get<std::uint32_t>();
    else if (key == "d_model") c.d_model = value.get<std::uint32_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::uint32_t>();
    else if (key == "d_mlp") c.d_mlp = value.get<std::uint32_t>();
    else if (key == "vocab_size") c.vocab_size = value.get<std::uint32_t>();
    else if (key == "max_seq") c.max_seq = value.get<std::uint32_t>();
    else if (key == "special_token_ids") c.special_token_ids = value.get<std::vector<TokenId>>();
    else throw Error("model config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

std::optional<TunedLens> maybe_lens(const Globals& g, const StreamHeader& h) {
  if (g.lens.empty()) return std::nullopt;
  return load_lens(g.lens, h.d, h.n_layers);
}

VectorTransform lens_transform(const TunedLens* lens) {
  if (!lens) return {};
  return [lens](std::size_t layer, std::span<float> x) { lens->apply_in_place(layer, x); };
}

LayerStats stats_for(const std::string& stats_path, const fs::path& stream, const TunedLens* lens,
                     std::uint64_t stats_tokens) {
  if (!stats_path.empty()) {
    auto s = load_layer_stats(stats_path);
    const auto h = read_stream_header(stream);
    if (s.d != h.d || s.n_layers != h.n_layers) {
      throw DimensionError("stats " + stats_path + " do not match the stream (d = " + std::to_string(h.d) + ")");
    }
    return s;
  }
  return compute_layer_stats(stream, stats_tokens, lens_transform(lens));
}

CheckpointInfo load_matching_checkpoint(const fs::path& path, const StreamHeader& h) {
  auto info = load_checkpoint(path);
  if (info.sae.d != h.d) {
    throw DimensionError("dimension mismatch: checkpoint has d = " + std::to_string(info.sae.d) +
                         " but the stream has d = " + std::to_string(h.d));
  }
  return info;
}

std::vector<std::vector<TokenId>> load_sequences(const fs::path& corpus, std::size_t seq_len,
                                                 std::size_t max_sequences) {
  auto seqs = toy::make_sequences(read_text(corpus), toy::kBosToken, seq_len);
  if (max_sequences > 0 && seqs.size() > max_sequences) seqs.resize(max_sequences);
  if (seqs.empty()) throw Error("corpus " + corpus.string() + " yields no sequences");
  return seqs;
}

// ---- subcommands ----

int cmd_toygen(const Globals& g, std::size_t corpus_bytes) {
  const auto config = g.config.empty() ? toy::ModelConfig{} : model_config_from_json(read_text(g.config));
  const auto seed = g.seed.value_or(0);
  const auto dir = out_dir(g);
  toy::save_weights(toy::init_random(config, seed), dir / "model.mltw");
  write_text_file(dir / "corpus.txt", toy::generate_corpus(corpus_bytes, seed));
  std::cout << "wrote " << (dir / "model.mltw").string() << " and " << (dir / "corpus.txt").string() << '\n';
  return 0;
}

int cmd_tap(const Globals& g, const std::string& model_path, const std::string& corpus_path,
            std::size_t seq_len, std::size_t max_sequences) {
  const auto weights = toy::load_weights(model_path);
  const auto& mc = weights.config;
  if (seq_len == 0) seq_len = mc.max_seq;
  if (seq_len > mc.max_seq) throw RangeError("tap: seq_len exceeds the model's max_seq");
  const auto seqs = load_sequences(corpus_path, seq_len, max_sequences);
  StreamHeader header;
  header.d = mc.d_model;
  header.n_layers = mc.n_layers;
  header.n_tokens = seqs.size() * seq_len;
  header.model_tag = "toy-transformer";
  const auto dir = out_dir(g);
  const auto path = dir / "activations.mlsa";
  io::write_file_atomic(path, [&](std::ostream& out) {
    StreamWriter writer(out, header);
    const std::size_t chunk = std::max<std::size_t>(worker_count() * 4, 1);
    std::vector<toy::ForwardResult> results(chunk);
    std::vector<float> rec(header.record_floats());
    for (std::size_t begin = 0; begin < seqs.size(); begin += chunk) {
      const std::size_t len = std::min(chunk, seqs.size() - begin);
      parallel_for(len, [&](std::size_t i) { results[i] = toy::forward(seqs[begin + i], weights); });
      for (std::size_t i = 0; i < len; ++i) {
        const auto& seq = seqs[begin + i];
        for (std::size_t t = 0; t < seq.size(); ++t) {
          for (std::uint32_t l = 0; l < mc.n_layers; ++l) {
            const auto& tap = results[i].taps.layers[l];
            std::copy_n(tap.row(static_cast<Eigen::Index>(t)).data(), mc.d_model, rec.begin() + std::size_t{l} * mc.d_model);
          }
          writer.write(seq[t], mc.is_special(seq[t]) ? kFlagSpecial : 0, rec);
        }
      }
    }
    writer.finish();
  });
  std::cout << "wrote " << header.n_tokens << " tokens x " << header.n_layers << " layers to " << path.string()
            << '\n';
  return 0;
}

int cmd_train(const Globals& g, const std::string& stream, const std::string& resume) {
  TrainConfig config = g.config.empty() ? TrainConfig{} : load_train_config(g.config);
  if (g.seed) config.seed = *g.seed;
  if (g.layer) config.layer_subset = *g.layer;
  if (!g.lens.empty()) config.lens_enabled = true;
  config.validate();
  const auto header = read_stream_header(stream);
  if (config.layer_subset && *config.layer_subset >= header.n_layers) {
    throw RangeError("train: layer " + std::to_string(*config.layer_subset) + " out of range");
  }
  const auto lens = maybe_lens(g, header);
  const auto dir = out_dir(g);
  LayerStats stats;
  if (!resume.empty() && fs::exists(dir / "stats.mlst")) {
    stats = load_layer_stats(dir / "stats.mlst");
  } else {
    stats = compute_layer_stats(stream, config.stats_tokens, lens_transform(lens ? &*lens : nullptr));
    save_layer_stats(stats, dir / "stats.mlst");
  }
  BatchOptions opts;
  opts.tokens_per_batch = config.tokens_per_batch;
  opts.shuffle_buffer = config.shuffle_buffer;
  opts.seed = config.seed;
  StreamBatchSource source(stream, stats, lens ? &*lens : nullptr, opts, config.layer_subset);
  TrainOptions topts;
  topts.checkpoint_path = dir / "checkpoint.mlsc";
  topts.metrics_path = dir / "metrics.csv";
  if (!resume.empty()) topts.resume_from = fs::path(resume);
  topts.on_step = [&](const StepReport& r) {
    if (r.step % config.log_every == 0) {
      std::cerr << "step " << r.step << " tokens " << r.tokens_seen << " fvu " << r.fvu << " aux " << r.aux_loss
                << " dead " << r.dead_fraction << '\n';
    }
  };
  const auto result = train(source, header.d, config, topts);
  write_text_file(dir / "train_config.json", train_config_to_json(config));
  const auto& last = result.steps.empty() ? StepReport{} : result.steps.back();
  std::cout << "trained " << last.step << " steps on " << last.tokens_seen << " tokens; final fvu " << last.fvu
            << "; checkpoint " << (dir / "checkpoint.mlsc").string() << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& stream,
             const std::string& stats_path, std::uint64_t n_tokens, const std::string& model_path,
             const std::string& corpus_path, std::size_t seq_len, std::size_t max_sequences,
             std::uint64_t stats_tokens) {
  const auto header = read_stream_header(stream);
  const auto info = load_matching_checkpoint(checkpoint, header);
  const auto lens = maybe_lens(g, header);
  const TunedLens* lp = lens ? &*lens : nullptr;
  const auto stats = stats_for(stats_path, stream, lp, stats_tokens);
  auto report = eval_reconstruction(stream, info.sae, info.params, stats, lp, n_tokens);
  if (!model_path.empty()) {
    if (corpus_path.empty()) throw Error("eval: --model needs --corpus");
    const auto weights = toy::load_weights(model_path);
    if (weights.config.d_model != info.sae.d) {
      throw DimensionError("dimension mismatch: model has d = " + std::to_string(weights.config.d_model) +
                           " but the checkpoint has d = " + std::to_string(info.sae.d));
    }
    const auto seqs = load_sequences(corpus_path, seq_len ? seq_len : weights.config.max_seq, max_sequences);
    const auto rec = sae_reconstructor(info.sae, info.params, stats, lp);
    for (std::uint32_t l = 0; l < report.layers.size(); ++l) {
      const auto m = eval_downstream(weights, seqs, l, rec);
      report.layers[l].delta_ce = m.delta_ce;
      report.layers[l].kl = m.kl;
    }
    report.compute_mean();
  }
  const auto dir = out_dir(g);
  write_text_file(dir / "eval.csv", report.to_csv());
  write_text_file(dir / "eval.json", report.to_json());
  std::cout << report.to_csv();
  return 0;
}

int cmd_analyze(const Globals& g, const std::string& checkpoint, const std::string& stream,
                const std::string& stats_path, std::uint64_t n_tokens, double threshold, std::size_t bins,
                std::uint64_t stats_tokens) {
  const auto header = read_stream_header(stream);
  const auto info = load_matching_checkpoint(checkpoint, header);
  const auto lens = maybe_lens(g, header);
  const TunedLens* lp = lens ? &*lens : nullptr;
  const auto stats = stats_for(stats_path, stream, lp, stats_tokens);
  BatchOptions opts;
  opts.tokens_per_batch = 4096;
  opts.max_tokens = n_tokens;
  StreamBatchSource source(stream, stats, lp, opts);
  const auto snap = analyze(source, info.sae, info.params, header.n_layers);
  const auto dir = out_dir(g);
  save_snapshot(snap, dir / "analytics.mlan");
  write_text_file(dir / "latents.csv", latent_table_csv(snap, threshold));
  const auto summary = summary_json(snap, threshold);
  write_text_file(dir / "summary.json", summary);
  const auto hist = pairwise_cos_histogram(info.params.decoder, bins, header.n_layers, g.seed.value_or(0));
  write_text_file(dir / "cosine_hist.csv", histogram_csv(hist));
  std::cout << summary << '\n';
  return 0;
}

HeatmapMode parse_mode(const std::string& s) {
  if (s == "aggregate") return HeatmapMode::Aggregate;
  if (s == "single-prompt") return HeatmapMode::SinglePrompt;
  if (s == "totals") return HeatmapMode::Totals;
  throw Error("heatmap: unknown mode '" + s + "'");
}

int cmd_heatmap(const Globals& g, const std::string& mode_name, const std::string& snapshot,
                const std::string& checkpoint, const std::string& model_path, const std::string& stats_path,
                const std::string& prompt, std::optional<double> gamma, double min_activation,
                std::uint32_t cell) {
  HeatmapSpec spec;
  spec.mode = parse_mode(mode_name);
  spec.min_activation = min_activation;
  spec.cell_size = cell;
  if (gamma) {
    spec.normalization = HeatmapNormalization::PowerLaw;
    spec.gamma = *gamma;
  } else if (spec.mode == HeatmapMode::Totals) {
    spec.normalization = HeatmapNormalization::PowerLaw;
    spec.gamma = 0.25;
  }
  Heatmap map;
  if (spec.mode == HeatmapMode::SinglePrompt) {
    if (checkpoint.empty() || model_path.empty() || stats_path.empty()) {
      throw Error("heatmap: single-prompt mode needs --checkpoint, --model and --stats");
    }
    const auto info = load_checkpoint(checkpoint);
    const auto weights = toy::load_weights(model_path);
    const auto stats = load_layer_stats(stats_path);
    std::optional<TunedLens> lens;
    if (!g.lens.empty()) lens = load_lens(g.lens, info.sae.d, weights.config.n_layers);
    std::vector<TokenId> tokens{toy::kBosToken};
    const auto body = toy::encode_bytes(prompt);
    tokens.insert(tokens.end(), body.begin(), body.end());
    const auto acts = prompt_activations(tokens, weights, info.sae, info.params, stats, lens ? &*lens : nullptr);
    map = build_heatmap(acts, spec);
  } else {
    if (snapshot.empty()) throw Error("heatmap: --snapshot is required");
    map = build_heatmap(load_snapshot(snapshot).totals, spec);
  }
  const auto dir = out_dir(g);
  const auto stem = dir / ("heatmap_" + mode_name);
  emit_heatmap(map, spec, stem);
  std::cout << "wrote " << stem.string() << ".pgm/.csv with " << map.rows() << " latents\n";
  return 0;
}

int cmd_drift(const Globals& g, const std::string& stream, std::uint64_t max_tokens) {
  const auto drift = residual_drift(stream, max_tokens);
  const auto dir = out_dir(g);
  write_text_file(dir / "drift.csv", drift_csv(drift));
  std::cout << drift_csv(drift);
  return 0;
}

int cmd_eval_matrix(const Globals& g, const std::vector<std::string>& singles, const std::string& mlsae_path,
                    const std::string& stream, const std::string& stats_path, std::uint64_t n_tokens,
                    const std::string& model_path, const std::string& corpus_path, std::size_t seq_len,
                    std::size_t max_sequences, std::uint64_t stats_tokens) {
  const auto header = read_stream_header(stream);
  const auto lens = maybe_lens(g, header);
  const TunedLens* lp = lens ? &*lens : nullptr;
  const auto stats = stats_for(stats_path, stream, lp, stats_tokens);
  std::vector<SaeModel> models;
  for (const auto& path : singles) {
    auto info = load_matching_checkpoint(path, header);
    if (!info.layer_subset) throw Error("eval-matrix: " + path + " is not a single-layer checkpoint");
    models.push_back({info.sae, std::move(info.params), *info.layer_subset});
  }
  std::optional<SaeModel> mlsae;
  if (!mlsae_path.empty()) {
    auto info = load_matching_checkpoint(mlsae_path, header);
    mlsae = SaeModel{info.sae, std::move(info.params), 0};
  }
  std::optional<toy::ModelWeights> weights;
  std::vector<std::vector<TokenId>> seqs;
  MatrixInputs in;
  in.stream = stream;
  in.stats = &stats;
  in.lens = lp;
  in.n_tokens = n_tokens;
  if (!model_path.empty()) {
    if (corpus_path.empty()) throw Error("eval-matrix: --model needs --corpus");
    weights = toy::load_weights(model_path);
    seqs = load_sequences(corpus_path, seq_len ? seq_len : weights->config.max_seq, max_sequences);
    in.model = &*weights;
    in.sequences = &seqs;
  }
  const auto m = eval_matrix(models, mlsae ? &*mlsae : nullptr, in);
  const auto dir = out_dir(g);
  write_text_file(dir / "eval_matrix_fvu.csv", m.to_csv("fvu"));
  if (!m.delta_ce.empty() || m.mlsae_delta_ce) write_text_file(dir / "eval_matrix_delta_ce.csv", m.to_csv("delta_ce"));
  std::cout << m.to_csv("fvu");
  return 0;
}

int cmd_validate(const Globals& g, const std::string& stream, const std::string& checkpoint,
                 const std::string& snapshot) {
  if (!stream.empty()) {
    const auto s = validate_stream(stream);
    std::cout << "stream ok: d=" << s.header.d << " layers=" << s.header.n_layers << " records=" << s.records
              << " special=" << s.special_records << '\n';
    if (!g.lens.empty()) {
      const auto lens = load_lens(g.lens, s.header.d, s.header.n_layers);
      std::cout << "lens ok: min rcond " << lens.min_rcond() << '\n';
    }
  } else if (!g.lens.empty()) {
    const auto lens = load_lens(g.lens);
    std::cout << "lens ok: d=" << lens.d() << " layers=" << lens.n_layers() << '\n';
  }
  if (!checkpoint.empty()) {
    const auto info = load_checkpoint(checkpoint);
    std::cout << "checkpoint ok: d=" << info.sae.d << " n=" << info.sae.n() << " k=" << info.sae.k
              << " steps=" << info.steps << '\n';
  }
  if (!snapshot.empty()) {
    const auto snap = load_snapshot(snapshot);
    std::cout << "snapshot ok: n=" << snap.totals.n_latents() << " layers=" << snap.totals.n_layers()
              << " tokens=" << snap.totals.tokens_processed() << '\n';
  }
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Multi-layer sparse autoencoder toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--lens", g.lens, "Tuned lens (MLLN)");
  app.add_option("--layer", g.layer, "Single-layer mode: layer index");
  app.add_option("--out", g.out, "Output directory");

  std::size_t corpus_bytes = 2'000'000;
  auto* toygen = app.add_subcommand("toygen", "Write a random toy model and a synthetic corpus");
  toygen->add_option("--corpus-bytes", corpus_bytes, "Approximate corpus size");

  std::string model, corpus, stream, checkpoint, stats, resume, snapshot, mlsae_ckpt;
  std::size_t seq_len = 0, max_sequences = 0, eval_sequences = 64, bins = 100;
  std::uint64_t n_tokens = 0, stats_tokens = 100'000;
  double threshold = 0.001;
  auto* tap = app.add_subcommand("tap", "Run the toy model over a corpus and write an MLSA stream");
  tap->add_option("--model", model)->required();
  tap->add_option("--corpus", corpus)->required();
  tap->add_option("--seq-len", seq_len, "Tokens per sequence (default: model max_seq)");
  tap->add_option("--max-sequences", max_sequences, "0 = all");

  auto* train_cmd = app.add_subcommand("train", "Train an SAE on an MLSA stream");
  train_cmd->add_option("--stream", stream)->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Reconstruction and downstream metrics");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--stream", stream)->required();
  eval->add_option("--stats", stats, "Layer statistics (MLST); computed from the stream if absent");
  eval->add_option("--n-tokens", n_tokens, "0 = all");
  eval->add_option("--model", model, "Toy model for delta-CE/KL");
  eval->add_option("--corpus", corpus);
  eval->add_option("--seq-len", seq_len);
  eval->add_option("--max-sequences", eval_sequences);
  eval->add_option("--stats-tokens", stats_tokens);

  auto* analyze_cmd = app.add_subcommand("analyze", "Accumulate layer analytics and derived tables");
  analyze_cmd->add_option("--checkpoint", checkpoint)->required();
  analyze_cmd->add_option("--stream", stream)->required();
  analyze_cmd->add_option("--stats", stats);
  analyze_cmd->add_option("--n-tokens", n_tokens, "0 = all");
  analyze_cmd->add_option("--threshold", threshold, "Active-layer threshold fraction");
  analyze_cmd->add_option("--bins", bins, "Pairwise cosine histogram bins");
  analyze_cmd->add_option("--stats-tokens", stats_tokens);

  std::string mode = "aggregate", prompt(kDefaultPrompt);
  std::optional<double> gamma;
  double min_activation = 1e-3;
  std::uint32_t cell = 1;
  auto* heatmap = app.add_subcommand("heatmap", "Emit a layer heatmap (PGM + CSV)");
  heatmap->add_option("--mode", mode, "aggregate | single-prompt | totals");
  heatmap->add_option("--snapshot", snapshot);
  heatmap->add_option("--checkpoint", checkpoint);
  heatmap->add_option("--model", model);
  heatmap->add_option("--stats", stats);
  heatmap->add_option("--prompt", prompt);
  heatmap->add_option("--gamma", gamma, "Power-law normalization exponent");
  heatmap->add_option("--min-activation", min_activation);
  heatmap->add_option("--cell", cell, "Pixels per cell");

  std::uint64_t max_tokens = 0;
  auto* drift = app.add_subcommand("drift", "Adjacent-layer cosine similarity and norms");
  drift->add_option("--stream", stream)->required();
  drift->add_option("--max-tokens", max_tokens, "0 = all");

  std::vector<std::string> singles;
  auto* matrix = app.add_subcommand("eval-matrix", "Single-layer SAEs x eval layers grid");
  matrix->add_option("--single", singles, "Single-layer checkpoints")->required();
  matrix->add_option("--mlsae", mlsae_ckpt, "Multi-layer checkpoint for the extra row");
  matrix->add_option("--stream", stream)->required();
  matrix->add_option("--stats", stats);
  matrix->add_option("--n-tokens", n_tokens);
  matrix->add_option("--model", model);
  matrix->add_option("--corpus", corpus);
  matrix->add_option("--seq-len", seq_len);
  matrix->add_option("--max-sequences", eval_sequences);
  matrix->add_option("--stats-tokens", stats_tokens);

  auto* validate = app.add_subcommand("validate", "Check MLSA/MLLN/MLSC/MLAN files");
  validate->add_option("--stream", stream);
  validate->add_option("--checkpoint", checkpoint);
  validate->add_option("--snapshot", snapshot);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*toygen) return cmd_toygen(g, corpus_bytes);
    if (*tap) return cmd_tap(g, model, corpus, seq_len, max_sequences);
    if (*train_cmd) return cmd_train(g, stream, resume);
    if (*eval) {
      return cmd_eval(g, checkpoint, stream, stats, n_tokens, model, corpus, seq_len, eval_sequences, stats_tokens);
    }
    if (*analyze_cmd) return cmd_analyze(g, checkpoint, stream, stats, n_tokens, threshold, bins, stats_tokens);
    if (*heatmap) {
      return cmd_heatmap(g, mode, snapshot, checkpoint, model, stats, prompt, gamma, min_activation, cell);
    }
    if (*drift) return cmd_drift(g, stream, max_tokens);
    if (*matrix) {
      return cmd_eval_matrix(g, singles, mlsae_ckpt, stream, stats, n_tokens, model, corpus, seq_len,
                             eval_sequences, stats_tokens);
    }
    if (*validate) return cmd_validate(g, stream, checkpoint, snapshot);
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace mlsae::cli
