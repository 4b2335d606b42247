// tools/gmekit.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Command-line front end. Exit codes: 0 on success, 1 on numerical failure,
// 2 on usage, format, or file errors.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gmekit/gmekit.hpp"

namespace {

using namespace gmekit;

double parse_nu(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double nu = gmekit::detail::parse_double(s, "nu");
  require(nu > 0.0, "nu must be positive or 'inf'");
  return nu;
}

HtPldaModel make_synth_model(int data_dim, int speaker_dim, double nu,
                             uint64_t seed) {
  // Random rotation applied to a fixed spectrum: the factor loadings get
  // singular values sliding from 2 down to 1, the residual precision is
  // identity, the mean is a mild random offset.
  Rng rng(seed ^ 0xa02bdbf7bb3c0a7ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix raw(data_dim, speaker_dim);
  for (int i = 0; i < data_dim; ++i)
    for (int j = 0; j < speaker_dim; ++j) raw(i, j) = normal(rng);
  Eigen::JacobiSVD<Matrix> svd(raw, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Vector sv(speaker_dim);
  for (int j = 0; j < speaker_dim; ++j)
    sv[j] = speaker_dim == 1
                ? 2.0
                : 2.0 - static_cast<double>(j) / (speaker_dim - 1);
  HtPldaModel model;
  model.f = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  model.w = Matrix::Identity(data_dim, data_dim);
  model.mean = Vector::Zero(data_dim);
  for (int i = 0; i < data_dim; ++i) model.mean[i] = 0.1 * normal(rng);
  model.nu = nu;
  model.validate();
  return model;
}

int cmd_synth(int data_dim, int speaker_dim, const std::string& nu_str,
              int n_speakers, int utts, uint64_t seed,
              const std::string& out_data, const std::string& out_model) {
  double nu = parse_nu(nu_str);
  HtPldaModel model = make_synth_model(data_dim, speaker_dim, nu, seed);
  LabeledDataset data = sample(model, n_speakers, utts, seed);
  write_dataset(out_data, data);
  if (!out_model.empty()) write_model(out_model, model);
  std::cout << "wrote " << data.size() << " vectors of dimension " << data.dim()
            << " from " << n_speakers << " speakers\n";
  return 0;
}

int cmd_train_gplda(const std::string& data_path, int d, int iters,
                    uint64_t seed, bool min_div, const std::string& out) {
  LabeledDataset data = read_dataset(data_path);
  EmConfig cfg;
  cfg.n_iters = iters;
  cfg.min_divergence = min_div;
  cfg.seed = seed;
  std::vector<double> history;
  GPldaModel model = em_train(data, d, cfg, &history);
  for (size_t k = 0; k + 1 < history.size(); ++k)
    std::printf("iter %zu loglik %.6f\n", k, history[k]);
  std::printf("final loglik %.6f\n", history.back());
  write_model(out, model);
  return 0;
}

int cmd_init_gme(const std::string& model_path, const std::string& nu_str,
                 const std::string& out) {
  GPldaModel gplda = read_model(model_path).to_gplda();
  write_model(out, init_gme(gplda, parse_nu(nu_str)));
  return 0;
}

int cmd_train_gme(const std::string& model_path, const std::string& data_path,
                  const std::string& out, const TrainConfig& cfg,
                  const std::string& history_path) {
  HtPldaModel init = read_model(model_path).to_htplda();
  LabeledDataset data = read_dataset(data_path);
  TrainHistory history;
  HtPldaModel trained = sgd_train(init, data, cfg, &history, &std::cout);
  write_model(out, trained);
  if (!history_path.empty()) {
    auto hout = gmekit::detail::open_out(history_path);
    hout << "epoch\ttrain_bxe\tcv_bxe\n";
    for (const auto& e : history.epochs)
      hout << e.epoch << '\t' << format_double(e.train_bxe) << '\t'
           << format_double(e.cv_bxe) << '\n';
  }
  std::printf("best epoch %d cv_bxe %.6f\n", history.best_epoch,
              history.epochs[history.best_epoch].cv_bxe);
  return 0;
}

int cmd_score(const std::string& model_path, const std::string& data_path,
              const std::string& enroll_path, const std::string& trials_path,
              const std::string& mode_str, const std::string& out) {
  HtPldaModel model = read_model(model_path).to_htplda();
  LabeledDataset data = read_dataset(data_path);
  TrialSet trials;
  trials.models = read_enroll_map(enroll_path);
  trials.trials = read_trial_list(trials_path, false);
  ScoreSet scores =
      score_trials(model, data, trials, parse_enroll_mode(mode_str));
  write_scores(out, scores);
  std::cout << "scored " << scores.entries.size() << " trials\n";
  return 0;
}

int cmd_eval(const std::string& scores_path, const std::string& key_path) {
  ScoreSet scores = read_scores(scores_path);
  TrialSet key;
  key.trials = read_trial_list(key_path, true);
  std::vector<double> tgt, non;
  split_by_label(scores, key, &tgt, &non);
  double eer = eer_percent(tgt, non);
  double d1 = min_dcf(tgt, non, 0.01);
  double d2 = min_dcf(tgt, non, 0.005);
  std::printf("EER %.4f  avg_minDCF %.4f  minDCF@0.01 %.4f  minDCF@0.005 %.4f\n",
              eer, 0.5 * (d1 + d2), d1, d2);
  return 0;
}

int cmd_bench(const std::string& gplda_path, const std::string& data_path,
              const std::string& enroll_path, const std::string& trials_path,
              const std::string& nu_str) {
  GPldaModel gplda = read_model(gplda_path).to_gplda();
  LabeledDataset data = read_dataset(data_path);
  TrialSet trials;
  trials.models = read_enroll_map(enroll_path);
  trials.trials = read_trial_list(trials_path, false);
  trials.validate(data);
  auto index = data.utt_index();

  using clock = std::chrono::steady_clock;
  // Closed-form quadratic scoring.
  auto t0 = clock::now();
  PldaScoreParams params = score_params(gplda);
  double checksum = 0.0;
  for (const auto& t : trials.trials) {
    Vector r1 = data.vectors.row(index.at(trials.models.at(t.model_id)[0]))
                    .transpose() -
                gplda.mean;
    Vector r2 = data.vectors.row(index.at(t.test_utt)).transpose() - gplda.mean;
    checksum += plda_llr(params, r1, r2);
  }
  auto t1 = clock::now();
  // Meta-embedding scoring through the shared-basis path.
  HtPldaModel extractor = init_gme(gplda, parse_nu(nu_str));
  ScoreSet scores =
      score_trials(extractor, data, trials, EnrollMode::average_vectors);
  auto t2 = clock::now();
  double sum2 = 0.0;
  for (const auto& e : scores.entries) sum2 += e.score;

  auto ms = [](auto a, auto b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  std::printf("trials %zu\n", trials.trials.size());
  std::printf("plda_quadratic_ms %.2f checksum %.6f\n", ms(t0, t1), checksum);
  std::printf("gme_pooled_ms %.2f checksum %.6f\n", ms(t1, t2), sum2);
  std::printf("ratio %.2f\n", ms(t1, t2) / std::max(1e-9, ms(t0, t1)));
  return 0;
}

int cmd_lengthnorm(const std::string& data_path, const std::string& out,
                   const std::string& mean_from) {
  LabeledDataset data = read_dataset(data_path);
  Vector center = mean_from.empty() ? Vector(data.mean_vector())
                                    : read_dataset(mean_from).mean_vector();
  write_dataset(out, length_normalize_dataset(data, center));
  std::cout << "normalized " << data.size() << " vectors\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian meta-embedding toolkit for speaker verification"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "sample a synthetic labeled dataset");
  int s_dim = 50, s_sdim = 10, s_spk = 1000, s_utts = 10;
  uint64_t s_seed = 0;
  std::string s_nu = "2", s_out_data, s_out_model;
  synth->add_option("--data-dim", s_dim, "vector dimension")->check(CLI::Range(2, 10000));
  synth->add_option("--speaker-dim", s_sdim, "speaker subspace dimension");
  synth->add_option("--nu", s_nu, "degrees of freedom, or 'inf'");
  synth->add_option("--speakers", s_spk, "number of speakers");
  synth->add_option("--utts", s_utts, "utterances per speaker");
  synth->add_option("--seed", s_seed, "random seed");
  synth->add_option("--out-data", s_out_data, "output dataset path")->required();
  synth->add_option("--out-model", s_out_model, "also write the true model here");

  // train-gplda
  auto* tg = app.add_subcommand("train-gplda", "EM training of a Gaussian PLDA model");
  std::string tg_data, tg_out;
  int tg_d = 10, tg_iters = 20;
  uint64_t tg_seed = 0;
  bool tg_mindiv = false;
  tg->add_option("--data", tg_data, "training dataset")->required();
  tg->add_option("--speaker-dim", tg_d, "speaker subspace dimension")->required();
  tg->add_option("--iters", tg_iters, "EM iterations");
  tg->add_option("--seed", tg_seed, "seed for the init fallback");
  tg->add_flag("--min-divergence", tg_mindiv, "apply the minimum-divergence step");
  tg->add_option("--out", tg_out, "output model path")->required();

  // init-gme
  auto* ig = app.add_subcommand("init-gme",
                                "turn a Gaussian PLDA model into an extractor");
  std::string ig_model, ig_nu = "2", ig_out;
  ig->add_option("--model", ig_model, "gplda model path")->required();
  ig->add_option("--nu", ig_nu, "degrees of freedom, or 'inf'")->required();
  ig->add_option("--out", ig_out, "output extractor path")->required();

  // train-gme
  auto* tr = app.add_subcommand("train-gme",
                                "discriminative refinement of an extractor");
  std::string tr_model, tr_data, tr_out, tr_config, tr_history;
  TrainConfig tr_cfg;
  tr->add_option("--model", tr_model, "initial extractor path")->required();
  tr->add_option("--data", tr_data, "training dataset")->required();
  tr->add_option("--out", tr_out, "output extractor path")->required();
  tr->add_option("--config", tr_config, "run configuration file");
  tr->add_option("--history", tr_history, "write per-epoch losses here");
  auto* o_bs = tr->add_option("--batch-side", tr_cfg.batch_side, "utterances per minibatch side");
  auto* o_lr = tr->add_option("--learning-rate", tr_cfg.learning_rate, "SGD step size");
  auto* o_mom = tr->add_option("--momentum", tr_cfg.momentum, "SGD momentum");
  auto* o_me = tr->add_option("--max-epochs", tr_cfg.max_epochs, "epoch limit");
  auto* o_pat = tr->add_option("--patience", tr_cfg.patience, "early-stopping patience");
  auto* o_cvf = tr->add_option("--cv-fraction", tr_cfg.cv_speaker_fraction,
                               "held-out speaker fraction");
  auto* o_bpe = tr->add_option("--batches-per-epoch", tr_cfg.batches_per_epoch,
                               "minibatches per epoch");
  auto* o_cvb = tr->add_option("--cv-batches", tr_cfg.cv_batches, "fixed CV minibatches");
  auto* o_tw = tr->add_option("--target-weight", tr_cfg.target_weight,
                              "target class weight in the loss");
  auto* o_seed = tr->add_option("--seed", tr_cfg.seed, "random seed");
  auto* o_rep = tr->add_flag("--identity-noise-reparam",
                             tr_cfg.identity_noise_reparam,
                             "train in the whitened parameterization");

  // score
  auto* sc = app.add_subcommand("score", "score verification trials");
  std::string sc_model, sc_data, sc_enroll, sc_trials, sc_mode = "average_vectors",
              sc_out;
  sc->add_option("--model", sc_model, "extractor path")->required();
  sc->add_option("--data", sc_data, "dataset with all trial utterances")->required();
  sc->add_option("--enroll", sc_enroll, "enrollment map path")->required();
  sc->add_option("--trials", sc_trials, "trial list path")->required();
  sc->add_option("--enroll-mode", sc_mode, "average_vectors or pool_gme");
  sc->add_option("--out", sc_out, "output score file")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "detection metrics from scores and a key");
  std::string ev_scores, ev_key;
  ev->add_option("--scores", ev_scores, "score file")->required();
  ev->add_option("--key", ev_key, "labeled key file")->required();

  // bench
  auto* be = app.add_subcommand(
      "bench", "compare quadratic PLDA scoring with meta-embedding scoring");
  std::string be_model, be_data, be_enroll, be_trials, be_nu = "inf";
  be->add_option("--model", be_model, "gplda model path")->required();
  be->add_option("--data", be_data, "dataset path")->required();
  be->add_option("--enroll", be_enroll, "enrollment map path")->required();
  be->add_option("--trials", be_trials, "trial list path")->required();
  be->add_option("--nu", be_nu, "degrees of freedom for the extractor side");

  // lengthnorm
  auto* ln = app.add_subcommand("lengthnorm",
                                "center and length-normalize a dataset");
  std::string ln_data, ln_out, ln_mean;
  ln->add_option("--data", ln_data, "input dataset")->required();
  ln->add_option("--out", ln_out, "output dataset")->required();
  ln->add_option("--mean-from", ln_mean,
                 "dataset supplying the centering mean (default: input)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth)
      return cmd_synth(s_dim, s_sdim, s_nu, s_spk, s_utts, s_seed, s_out_data,
                       s_out_model);
    if (*tg)
      return cmd_train_gplda(tg_data, tg_d, tg_iters, tg_seed, tg_mindiv, tg_out);
    if (*ig) return cmd_init_gme(ig_model, ig_nu, ig_out);
    if (*tr) {
      TrainConfig cfg = tr_cfg;
      if (!tr_config.empty()) {
        cfg = RunConfig::parse_file(tr_config).train;
        // Explicit flags win over the file.
        if (o_bs->count()) cfg.batch_side = tr_cfg.batch_side;
        if (o_lr->count()) cfg.learning_rate = tr_cfg.learning_rate;
        if (o_mom->count()) cfg.momentum = tr_cfg.momentum;
        if (o_me->count()) cfg.max_epochs = tr_cfg.max_epochs;
        if (o_pat->count()) cfg.patience = tr_cfg.patience;
        if (o_cvf->count()) cfg.cv_speaker_fraction = tr_cfg.cv_speaker_fraction;
        if (o_bpe->count()) cfg.batches_per_epoch = tr_cfg.batches_per_epoch;
        if (o_cvb->count()) cfg.cv_batches = tr_cfg.cv_batches;
        if (o_tw->count()) cfg.target_weight = tr_cfg.target_weight;
        if (o_seed->count()) cfg.seed = tr_cfg.seed;
        if (o_rep->count()) cfg.identity_noise_reparam = tr_cfg.identity_noise_reparam;
      }
      return cmd_train_gme(tr_model, tr_data, tr_out, cfg, tr_history);
    }
    if (*sc) return cmd_score(sc_model, sc_data, sc_enroll, sc_trials, sc_mode, sc_out);
    if (*ev) return cmd_eval(ev_scores, ev_key);
    if (*be) return cmd_bench(be_model, be_data, be_enroll, be_trials, be_nu);
    if (*ln) return cmd_lengthnorm(ln_data, ln_out, ln_mean);
  } catch (const gmekit::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 1;
  } catch (const gmekit::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;  // no subcommand matched; CLI11 should have caught this
}
