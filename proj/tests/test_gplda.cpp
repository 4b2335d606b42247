// tests/test_gplda.cpp

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

#include <catch2/catch_amalgamated.hpp>

#include "testing_util.hpp"

using namespace gmekit;
using gmekit::testing::random_matrix;
using gmekit::testing::random_model;
using gmekit::testing::random_vector;
using gmekit::testing::rel_close;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Ground-truth generator with a known factor spectrum: singular values of F
// slide from 2 down to 1 and W = I, so F'WF has eigenvalues sv^2.
HtPldaModel spectrum_model(int data_dim, int speaker_dim, double nu, Rng& rng) {
  Matrix raw = random_matrix(data_dim, speaker_dim, rng);
  Eigen::JacobiSVD<Matrix> svd(raw, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Vector sv(speaker_dim);
  for (int j = 0; j < speaker_dim; ++j)
    sv[j] = 2.0 - (speaker_dim > 1 ? static_cast<double>(j) / (speaker_dim - 1)
                                   : 0.0);
  HtPldaModel m;
  m.f = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  m.w = Matrix::Identity(data_dim, data_dim);
  m.mean = random_vector(data_dim, rng, 0.3);
  m.nu = nu;
  return m;
}

void check_monotone(const std::vector<double>& history) {
  for (size_t k = 0; k + 1 < history.size(); ++k) {
    REQUIRE(std::isfinite(history[k]));
    REQUIRE(history[k + 1] >= history[k] - 1e-6 * (1.0 + std::abs(history[k])));
  }
}

Vector descending_bbar_eigs(const Matrix& f, const Matrix& w) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(f.transpose() * w * f));
  return es.eigenvalues().reverse();
}

}  // namespace

TEST_CASE("EM increases the marginal likelihood", "[gplda]") {
  Rng rng(60);
  HtPldaModel truth = spectrum_model(8, 2, kInf, rng);
  LabeledDataset data = sample(truth, 50, 5, 3);
  std::vector<double> history;
  EmConfig cfg;
  cfg.n_iters = 15;
  GPldaModel model = em_train(data, 2, cfg, &history);
  REQUIRE(history.size() == 16);
  check_monotone(history);
  REQUIRE(model.f.allFinite());
  REQUIRE(model.w.allFinite());
}

TEST_CASE("EM recovers the factor spectrum", "[gplda]") {
  Rng rng(61);
  HtPldaModel truth = spectrum_model(20, 5, kInf, rng);
  LabeledDataset data = sample(truth, 500, 10, 4);
  std::vector<double> history;
  GPldaModel model = em_train(data, 5, {}, &history);
  check_monotone(history);
  Vector truth_eigs = descending_bbar_eigs(truth.f, truth.w);
  Vector est_eigs = descending_bbar_eigs(model.f, model.w);
  for (int k = 0; k < 5; ++k)
    REQUIRE(std::abs(est_eigs[k] - truth_eigs[k]) <= 0.15 * truth_eigs[k]);
}

TEST_CASE("the minimum-divergence step keeps the likelihood monotone",
          "[gplda]") {
  Rng rng(62);
  HtPldaModel truth = spectrum_model(10, 3, kInf, rng);
  LabeledDataset data = sample(truth, 100, 6, 5);
  std::vector<double> history;
  EmConfig cfg;
  cfg.n_iters = 12;
  cfg.min_divergence = true;
  GPldaModel model = em_train(data, 3, cfg, &history);
  check_monotone(history);
  Vector truth_eigs = descending_bbar_eigs(truth.f, truth.w);
  Vector est_eigs = descending_bbar_eigs(model.f, model.w);
  for (int k = 0; k < 3; ++k)
    REQUIRE(std::abs(est_eigs[k] - truth_eigs[k]) <= 0.25 * truth_eigs[k]);
}

TEST_CASE("EM rejects degenerate requests", "[gplda]") {
  LabeledDataset one;
  one.vectors = Matrix::Zero(1, 4);
  one.utt_ids = {"u1"};
  one.speaker_ids = {"s1"};
  REQUIRE_THROWS_AS(em_train(one, 2, {}), std::invalid_argument);

  Rng rng(63);
  HtPldaModel truth = spectrum_model(4, 1, kInf, rng);
  LabeledDataset data = sample(truth, 10, 3, 6);
  REQUIRE_THROWS_AS(em_train(data, 4, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(em_train(data, 0, {}), std::invalid_argument);
}

TEST_CASE("length normalization lands on the unit sphere", "[gplda]") {
  Rng rng(64);
  Vector v = random_vector(7, rng, 3.0);
  Vector n1 = length_normalize(v);
  REQUIRE(rel_close(n1.norm(), 1.0, 1e-12));
  Vector n2 = length_normalize(n1);
  REQUIRE((n2 - n1).cwiseAbs().maxCoeff() <= 1e-15);
  REQUIRE_THROWS_AS(length_normalize(Vector::Zero(3)), std::invalid_argument);
}

TEST_CASE("dataset length normalization centers first", "[gplda]") {
  Rng rng(65);
  HtPldaModel truth = spectrum_model(5, 1, kInf, rng);
  LabeledDataset data = sample(truth, 10, 4, 7);
  Vector center = data.mean_vector();
  LabeledDataset normed = length_normalize_dataset(data, center);
  for (int i = 0; i < normed.size(); ++i) {
    REQUIRE(rel_close(normed.vectors.row(i).norm(), 1.0, 1e-12));
    Vector expect =
        length_normalize(Vector(data.vectors.row(i).transpose() - center));
    REQUIRE((normed.vectors.row(i).transpose() - expect).cwiseAbs().maxCoeff() <=
            1e-15);
  }
  REQUIRE(normed.utt_ids == data.utt_ids);
}

TEST_CASE("a zero factor matrix scores every trial at zero", "[gplda]") {
  GPldaModel model;
  model.f = Matrix::Zero(4, 2);
  model.w = Matrix::Identity(4, 4);
  model.mean = Vector::Zero(4);
  PldaScoreParams p = score_params(model);
  REQUIRE(p.gamma.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(p.lambda.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(p.k == 0.0);
  Rng rng(66);
  REQUIRE(plda_llr(p, random_vector(4, rng), random_vector(4, rng)) == 0.0);
}

TEST_CASE("closed-form scoring matches the frozen scalar case", "[gplda]") {
  GPldaModel model;
  model.f.resize(2, 1);
  model.f << 0.8, 0.6;
  model.w = Matrix::Zero(2, 2);
  model.w(0, 0) = 2.0;
  model.w(1, 1) = 1.0;
  model.mean = Vector::Zero(2);
  PldaScoreParams p = score_params(model);
  REQUIRE(std::abs(p.k - 0.24380241236137212) <= 1e-14);
  Vector r1(2), r2(2);
  r1 << 0.3, -0.4;
  r2 << -0.2, 0.5;
  REQUIRE(std::abs(plda_llr(p, r1, r2) - 0.23847176948400026) <= 1e-14);
}

TEST_CASE("score parameters are symmetric matrices", "[gplda]") {
  Rng rng(67);
  HtPldaModel m = random_model(6, 2, kInf, rng);
  GPldaModel model{m.mean, m.f, m.w};
  PldaScoreParams p = score_params(model);
  REQUIRE((p.gamma - p.gamma.transpose()).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((p.lambda - p.lambda.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Vector r1 = random_vector(6, rng), r2 = random_vector(6, rng);
  REQUIRE(rel_close(plda_llr(p, r1, r2), plda_llr(p, r2, r1), 1e-12));
}

TEST_CASE("quadratic scoring equals meta-embedding scoring in the Gaussian case",
          "[gplda]") {
  Rng rng(68);
  HtPldaModel m = random_model(8, 2, kInf, rng);
  GPldaModel model{m.mean, m.f, m.w};
  PldaScoreParams p = score_params(model);
  HtPldaModel extractor = init_gme(model, kInf);
  HtPldaDerived der = derive(extractor);
  for (int trial = 0; trial < 100; ++trial) {
    Vector r1 = random_vector(8, rng, 2.0) + model.mean;
    Vector r2 = random_vector(8, rng, 2.0) + model.mean;
    double quad = plda_llr(p, r1 - model.mean, r2 - model.mean);
    double gme = llr_binary(extract(extractor, der, r1), extract(extractor, der, r2));
    REQUIRE(rel_close(gme, quad, 1e-10));
  }
}

TEST_CASE("the extractor keeps the mean direction across nu", "[gplda]") {
  Rng rng(69);
  HtPldaModel m = random_model(6, 2, kInf, rng);
  GPldaModel model{m.mean, m.f, m.w};
  REQUIRE_THROWS_AS(init_gme(model, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(init_gme(model, -2.0), std::invalid_argument);
  HtPldaModel heavy = init_gme(model, 2.0);
  HtPldaModel gauss = init_gme(model, kInf);
  HtPldaDerived der_h = derive(heavy);
  HtPldaDerived der_g = derive(gauss);
  Vector r = random_vector(6, rng, 2.0);
  GaussianMetaEmbedding fh = extract(heavy, der_h, r);
  GaussianMetaEmbedding fg = extract(gauss, der_g, r);
  // a/b = F'W rc in both cases.
  Vector dir_h = fh.a() / fh.scaled().b;
  REQUIRE((dir_h - fg.a()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + fg.a().norm()));
}

TEST_CASE("training is invariant to a dataset shift", "[gplda]") {
  Rng rng(70);
  HtPldaModel truth = spectrum_model(6, 2, kInf, rng);
  LabeledDataset data = sample(truth, 30, 4, 8);
  Vector shift = random_vector(6, rng, 5.0);
  LabeledDataset shifted = data;
  shifted.vectors.rowwise() += shift.transpose();

  EmConfig cfg;
  cfg.n_iters = 8;
  GPldaModel m1 = em_train(data, 2, cfg);
  GPldaModel m2 = em_train(shifted, 2, cfg);
  PldaScoreParams p1 = score_params(m1);
  PldaScoreParams p2 = score_params(m2);
  for (int trial = 0; trial < 20; ++trial) {
    Vector r1 = random_vector(6, rng, 2.0);
    Vector r2 = random_vector(6, rng, 2.0);
    double s1 = plda_llr(p1, r1 - m1.mean, r2 - m1.mean);
    double s2 = plda_llr(p2, (r1 + shift) - m2.mean, (r2 + shift) - m2.mean);
    REQUIRE(rel_close(s2, s1, 1e-9));
  }
}

TEST_CASE("verification accuracy is stable across moderate nu", "[gplda]") {
  Rng rng(71);
  HtPldaModel truth = spectrum_model(12, 3, 2.0, rng);
  LabeledDataset train = sample(truth, 200, 8, 9);
  EmConfig cfg;
  cfg.n_iters = 10;
  GPldaModel model = em_train(train, 3, cfg);

  LabeledDataset eval_data = sample(truth, 100, 6, 10);
  auto groups = eval_data.speaker_groups();
  std::vector<double> eers;
  for (double nu : {1.0, 2.0, 4.0, 8.0}) {
    HtPldaModel extractor = init_gme(model, nu);
    HtPldaDerived der = derive(extractor);
    std::vector<GaussianMetaEmbedding> enroll;
    std::vector<std::vector<GaussianMetaEmbedding>> tests;
    for (const auto& [spk, rows] : groups) {
      enroll.push_back(
          extract(extractor, der, eval_data.vectors.row(rows[0]).transpose()));
      tests.emplace_back();
      for (size_t k = 1; k < rows.size(); ++k)
        tests.back().push_back(extract(
            extractor, der, eval_data.vectors.row(rows[k]).transpose()));
    }
    std::vector<double> tgt, non;
    for (size_t s = 0; s < enroll.size(); ++s)
      for (size_t t = 0; t < tests.size(); ++t)
        for (const auto& gme : tests[t])
          (s == t ? tgt : non).push_back(llr_binary(enroll[s], gme));
    eers.push_back(eer_percent(tgt, non));
  }
  for (double e : eers) {
    REQUIRE(e < 40.0);  // clearly better than chance on a hard task
    REQUIRE(std::abs(e - eers[0]) < 0.1 * eers[0]);
  }
}
