// Command-line surface: synthetic-corpus generation, feature extraction,
// training, sampling, the mismatched-conditioning likelihood table and the
// gradient verification suite.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "faceflow/checkpoint.hpp"
#include "faceflow/config.hpp"
#include "faceflow/data.hpp"
#include "faceflow/dsp.hpp"
#include "faceflow/eval.hpp"
#include "faceflow/gradcheck.hpp"
#include "faceflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace faceflow;

namespace {

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string ablation = "none";
  bool no_neg_train = false;
};

ConfigMap load_config(const CommonOpts& opts) {
  ConfigMap cfg;
  if (!opts.config_path.empty()) cfg = ConfigMap::load(opts.config_path);
  return cfg;
}

void apply_common(const CommonOpts& opts, ConfigMap& cfg) {
  if (opts.seed_given) cfg.set_int("train.seed", (long long)opts.seed);
  if (opts.ablation == "no-face")
    cfg.set_bool("model.no_face", true);
  else if (opts.ablation == "no-speech")
    cfg.set_bool("model.no_speech", true);
  else if (opts.ablation != "none")
    throw std::invalid_argument("unknown ablation: " + opts.ablation);
  if (opts.no_neg_train) cfg.set_double("train.negative_prob", 0.0);
}

int cmd_synth_data(const CommonOpts& common, const std::string& out_dir,
                   int sessions, int frames, double alpha, int lag,
                   double noise, double gamma) {
  ConfigMap cfg = load_config(common);
  SyntheticConfig scfg;
  scfg.n_sessions = (int)cfg.get_int("synth.sessions", sessions);
  scfg.session_len = (int)cfg.get_int("synth.frames", frames);
  scfg.mimic_gain = cfg.get_double("synth.alpha", alpha);
  scfg.lag = (int)cfg.get_int("synth.lag", lag);
  scfg.noise = cfg.get_double("synth.noise", noise);
  scfg.speech_coupling = cfg.get_double("synth.speech_coupling", gamma);
  Rng rng(common.seed);
  auto data = generate_synthetic_corpus(scfg, rng);
  save_sessions(out_dir, "manifest.txt", data);
  std::cout << "wrote " << data.size() << " sessions ("
            << scfg.session_len << " frames each) to " << out_dir
            << "/manifest.txt\n";
  return 0;
}

int cmd_featurize(const std::string& audio_path, const std::string& audio_b,
                  const std::string& face_path, const std::string& prefix) {
  if (audio_path.empty() && face_path.empty())
    throw std::invalid_argument("featurize: provide --audio and/or --face");
  if (!audio_path.empty()) {
    AudioSignal a = read_wav_mono16(audio_path);
    MatXd acoustic = assemble_acoustic(compute_mfcc_energy(a), compute_prosody(a));
    write_feature_file(prefix + "_acoustic.tsv", acoustic_columns(), acoustic);
    std::cout << "wrote " << acoustic.cols() << " acoustic frames to "
              << prefix << "_acoustic.tsv\n";
    if (!audio_b.empty()) {
      AudioSignal b = read_wav_mono16(audio_b);
      MatXd acoustic_b =
          assemble_acoustic(compute_mfcc_energy(b), compute_prosody(b));
      write_feature_file(prefix + "_b_acoustic.tsv", acoustic_columns(),
                         acoustic_b);
      auto [ma, mb] = vad_mask(a, b);
      MatXd masks(2, ma.size());
      masks.row(0) = ma.cast<double>().transpose();
      masks.row(1) = mb.cast<double>().transpose();
      write_feature_file(prefix + "_vad.tsv", {"active_a", "active_b"}, masks);
      std::cout << "wrote crosstalk VAD masks to " << prefix << "_vad.tsv\n";
    }
  }
  if (!face_path.empty()) {
    MatXd face = load_facial_track(face_path);
    write_feature_file(prefix + "_face.tsv", facial_columns(),
                       savgol_smooth(face));
    std::cout << "wrote " << face.cols() << " smoothed facial frames to "
              << prefix << "_face.tsv\n";
  }
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& manifest,
              const std::string& out_ckpt, const std::string& metrics_path) {
  ConfigMap cfg = load_config(common);
  apply_common(common, cfg);
  ModelConfig mcfg = model_config_from(cfg);
  TrainConfig tcfg = train_config_from(cfg);

  auto sessions = load_sessions(manifest);
  Rng split_rng(tcfg.seed);
  const int segment_len =
      (int)cfg.get_int("train.segment_len", 60 * kVideoFps);
  auto split = split_dataset(sessions, split_rng, segment_len);
  TrainData data;
  data.sessions = &sessions;
  data.segments = split.train;
  if (data.segments.empty())
    throw std::runtime_error("train: no full training segments in manifest");

  Rng model_rng(tcfg.seed);
  auto model = make_model<double>(mcfg, model_rng);
  TrainerState state;

  std::ofstream metrics;
  std::ostream* mptr = nullptr;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path);
    if (!metrics)
      throw std::runtime_error("cannot write metrics log: " + metrics_path);
    mptr = &metrics;
  }
  train(model, data, tcfg, state, mptr);
  save_checkpoint(out_ckpt, model, tcfg, state);
  std::cout << "trained " << state.global_step << " steps over "
            << state.epoch << " epochs; checkpoint at " << out_ckpt << "\n";
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& s_a_path,
                 const std::string& s_i_path, const std::string& f_i_path,
                 const std::string& out_path, double temperature,
                 std::uint64_t seed, const std::string& seed_motion_path) {
  auto ck = load_checkpoint(ckpt_path);
  MatXd s_a = load_acoustic_track(s_a_path);
  MatXd s_i = load_acoustic_track(s_i_path);
  MatXd f_i = load_facial_track(f_i_path);
  GenerationConfig gcfg{temperature, seed};
  MatXd seed_motion;
  const MatXd* seed_ptr = nullptr;
  if (!seed_motion_path.empty()) {
    seed_motion = load_facial_track(seed_motion_path);
    seed_ptr = &seed_motion;
  }
  MatXd track = generate(s_a, s_i, f_i, ck.model, gcfg, seed_ptr);
  write_feature_file(out_path, facial_columns(), track);
  std::cout << "generated " << track.cols() << " frames to " << out_path
            << "\n";
  return 0;
}

int cmd_evaluate(const std::vector<std::string>& ckpts,
                 const std::string& manifest, const std::string& out_path,
                 const std::string& records_path, int seq_len,
                 std::uint64_t seed) {
  auto sessions = load_sessions(manifest);
  auto seqs = cut_eval_sequences(sessions, seq_len);
  std::vector<Checkpoint> loaded;
  loaded.reserve(ckpts.size());
  std::vector<NamedModel> models;
  for (const auto& path : ckpts) {
    loaded.push_back(load_checkpoint(path));
    models.push_back({fs::path(path).stem().string(), &loaded.back().model});
  }
  auto table = mismatch_table(models, seqs, seed);
  const std::string text = render_table(table);
  std::cout << text;
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    f << text;
  }
  if (!records_path.empty()) write_table_records(table, records_path);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.facial_dim = 6;
  cfg.acoustic_dim = 7;
  cfg.flow_steps = 2;
  cfg.cond_dim = 10;
  cfg.coupling_hidden = 16;
  cfg.t_avatar_speech = 3;
  cfg.t_inter_speech = 2;
  cfg.t_inter_face = 4;
  cfg.t_history = 2;
  cfg.gru_hidden = 8;
  cfg.gru_layers = 2;
  Rng rng(seed ? seed : 5);
  auto model = make_model<double>(cfg, rng);
  randomize_model(model, rng);
  std::vector<SequenceExample<double>> batch;
  for (int i = 0; i < 2; ++i) {
    SequenceExample<double> s;
    auto rand_mat = [&](int r, int c) {
      MatXd m(r, c);
      for (int j = 0; j < c; ++j)
        for (int k = 0; k < r; ++k) m(k, j) = rng.normal();
      return m;
    };
    s.f_a = rand_mat(cfg.facial_dim, 3);
    s.s_a = rand_mat(cfg.acoustic_dim, 3);
    s.s_i = rand_mat(cfg.acoustic_dim, 3);
    s.f_i = rand_mat(cfg.facial_dim, 3);
    batch.push_back(std::move(s));
  }
  auto res = gradcheck_model(model, batch, 1e-4);
  std::cout << "checked " << res.entries_checked
            << " parameters, max relative error " << res.max_rel_err
            << " (worst: " << res.worst_tensor << "[" << res.worst_index
            << "], analytic " << res.analytic << ", central-difference "
            << res.numeric << ")\n";
  if (res.max_rel_err < 1e-4) {
    std::cout << "gradcheck PASS\n";
    return 0;
  }
  std::cout << "gradcheck FAIL\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"probabilistic interlocutor-aware facial-gesture generation"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* synth = app.add_subcommand("synth-data",
                                   "generate a synthetic dyadic corpus");
  std::string out_dir = "synth_corpus";
  int n_sessions = 30, frames = 2400, lag = 5;
  double alpha = 0.8, noise = 0.1, gamma = 0.0;
  synth->add_option("--out", out_dir, "output directory");
  synth->add_option("--sessions", n_sessions, "number of sessions");
  synth->add_option("--frames", frames, "frames per session at 25 fps");
  synth->add_option("--alpha", alpha, "mimicry gain");
  synth->add_option("--lag", lag, "mimicry lag in frames");
  synth->add_option("--noise", noise, "per-frame noise std");
  synth->add_option("--speech-coupling", gamma, "own-speech coupling gain");
  synth->add_option("--seed", common.seed, "rng seed")
      ->each([&](const std::string&) { common.seed_given = true; });
  synth->add_option("--config", common.config_path, "config file");

  auto* feat = app.add_subcommand("featurize",
                                  "extract features from audio/facial files");
  std::string audio_path, audio_b_path, face_path, prefix = "features";
  feat->add_option("--audio", audio_path, "16-bit PCM mono wav");
  feat->add_option("--audio-b", audio_b_path,
                   "second channel for the crosstalk VAD");
  feat->add_option("--face", face_path, "raw 56-channel facial track (tsv)");
  feat->add_option("--out-prefix", prefix, "output file prefix");

  auto* tr = app.add_subcommand("train", "maximum-likelihood training");
  std::string manifest, out_ckpt = "model.ckpt", metrics_path;
  tr->add_option("--manifest", manifest, "session manifest")->required();
  tr->add_option("--out", out_ckpt, "checkpoint output path");
  tr->add_option("--metrics", metrics_path, "metrics log path");
  tr->add_option("--config", common.config_path, "config file");
  tr->add_option("--seed", common.seed, "rng seed")
      ->each([&](const std::string&) { common.seed_given = true; });
  tr->add_option("--ablation", common.ablation, "none|no-face|no-speech");
  tr->add_flag("--no-neg-train", common.no_neg_train,
               "disable negative-sample training");

  auto* gen = app.add_subcommand("generate",
                                 "sample a facial track from a checkpoint");
  std::string ckpt_path, s_a_path, s_i_path, f_i_path, gen_out = "generated.tsv";
  std::string seed_motion_path;
  double temperature = 1.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--checkpoint", ckpt_path)->required();
  gen->add_option("--avatar-speech", s_a_path, "avatar acoustic track")
      ->required();
  gen->add_option("--inter-speech", s_i_path, "interlocutor acoustic track")
      ->required();
  gen->add_option("--inter-face", f_i_path, "interlocutor facial track")
      ->required();
  gen->add_option("--out", gen_out, "output facial track");
  gen->add_option("--temperature", temperature, "latent noise std multiplier");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--seed-motion", seed_motion_path,
                  "ground-truth frames used to initialize the history");

  auto* ev = app.add_subcommand(
      "evaluate", "log-likelihood table under mismatched conditioning");
  std::vector<std::string> eval_ckpts;
  std::string eval_manifest, table_out, records_out;
  int eval_seq_len = 100;
  std::uint64_t eval_seed = 0;
  ev->add_option("--checkpoint", eval_ckpts, "checkpoint(s), one row each")
      ->required();
  ev->add_option("--manifest", eval_manifest, "test-session manifest")
      ->required();
  ev->add_option("--out", table_out, "text table output");
  ev->add_option("--records", records_out, "machine-readable records output");
  ev->add_option("--seq-len", eval_seq_len, "evaluation sequence length");
  ev->add_option("--seed", eval_seed, "derangement seed");

  auto* gc = app.add_subcommand(
      "gradcheck", "finite-difference verification of all gradients");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed, "rng seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth_data(common, out_dir, n_sessions, frames, alpha, lag,
                            noise, gamma);
    if (feat->parsed())
      return cmd_featurize(audio_path, audio_b_path, face_path, prefix);
    if (tr->parsed()) return cmd_train(common, manifest, out_ckpt, metrics_path);
    if (gen->parsed())
      return cmd_generate(ckpt_path, s_a_path, s_i_path, f_i_path, gen_out,
                          temperature, gen_seed, seed_motion_path);
    if (ev->parsed())
      return cmd_evaluate(eval_ckpts, eval_manifest, table_out, records_out,
                          eval_seq_len, eval_seed);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
