// gmekit/gplda.hpp

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

#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "gmekit/common.hpp"
#include "gmekit/dataset.hpp"
#include "gmekit/gme.hpp"
#include "gmekit/htplda.hpp"

namespace gmekit {

// Gaussian PLDA: z ~ N(0, I_d), r | z ~ N(mean + Fz, W^{-1}). This is the
// nu = +inf limit of the heavy-tailed model; it has a closed-form EM update
// and a closed-form verification score.

struct GPldaModel {
  Vector mean;  // D
  Matrix f;     // D x d
  Matrix w;     // D x D within-speaker precision

  int data_dim() const { return static_cast<int>(f.rows()); }
  int speaker_dim() const { return static_cast<int>(f.cols()); }

  void validate() const {
    require(f.rows() > 0 && f.cols() > 0, "GPldaModel: empty F");
    require(f.cols() < f.rows(), "GPldaModel: need d < D");
    require(w.rows() == f.rows() && w.cols() == f.rows(),
            "GPldaModel: W dimension does not match F");
    checked_symmetric(w, "GPldaModel W");
    require(mean.size() == f.rows(), "GPldaModel: mean dimension mismatch");
  }
};

struct EmConfig {
  int n_iters = 20;
  bool min_divergence = false;
  uint64_t seed = 0;  // only used by the random fallback of the F init
};

namespace detail {

// Marginal log likelihood of the data under the current model, with speaker
// factors integrated out. With s_i the sum of speaker i's centered vectors,
// n_i the utterance count, P_i = I + n_i Bbar and a_i = F'W s_i:
//
//   log p = (N/2) logdet W - (ND/2) log 2pi - (1/2) tr(WS)
//           + sum_i [ (1/2) a_i' P_i^{-1} a_i - (1/2) logdet P_i ],
//
// where S = sum_j rc_j rc_j' over all utterances. The bracketed term is just
// the pooled meta-embedding expectation of speaker i.
inline double gplda_marginal_loglik(const Matrix& f, const Matrix& w,
                                    const Matrix& scatter, double n_total,
                                    const std::vector<Vector>& speaker_sums,
                                    const std::vector<int>& speaker_counts) {
  const int d = static_cast<int>(f.cols());
  const double ddim = static_cast<double>(f.rows());
  constexpr double kLog2Pi = 1.8378770664093453;
  Eigen::LLT<Matrix> wllt(w);
  if (wllt.info() != Eigen::Success)
    throw NumericalError("gplda: W is not positive definite");
  double logdet_w =
      2.0 * wllt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  Matrix ftw = f.transpose() * w;
  Matrix bbar = symmetrized(ftw * f);
  double total = 0.5 * n_total * logdet_w - 0.5 * n_total * ddim * kLog2Pi -
                 0.5 * (w * scatter).trace();
  for (size_t i = 0; i < speaker_sums.size(); ++i) {
    Matrix p = Matrix::Identity(d, d) + speaker_counts[i] * bbar;
    Eigen::LLT<Matrix> pllt(p);
    if (pllt.info() != Eigen::Success)
      throw NumericalError("gplda: I + n Bbar is not positive definite");
    Vector a = ftw * speaker_sums[i];
    total += 0.5 * a.dot(pllt.solve(a)) -
             pllt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  }
  return total;
}

}  // namespace detail

/// Maximum-likelihood EM for the Gaussian PLDA model. The mean is the data
/// mean; F and W are re-estimated jointly each iteration, which keeps the
/// marginal log likelihood non-decreasing. `loglik_history`, if given, gets
/// n_iters + 1 entries: the likelihood before each update and after the last.
inline GPldaModel em_train(const LabeledDataset& data, int d,
                           const EmConfig& cfg = {},
                           std::vector<double>* loglik_history = nullptr) {
  data.validate();
  require(d > 0 && d < data.dim(), "em_train: need 0 < d < D");
  require(cfg.n_iters > 0, "em_train: need at least one iteration");
  const int n = data.size();
  const int ddim = data.dim();

  GPldaModel model;
  model.mean = data.mean_vector();
  Matrix centered = data.vectors.rowwise() - model.mean.transpose();
  Matrix scatter = symmetrized(centered.transpose() * centered);

  // The model needs d directions of usable variance.
  Eigen::SelfAdjointEigenSolver<Matrix> cov_es(scatter / n);
  if (cov_es.info() != Eigen::Success)
    throw NumericalError("em_train: covariance eigendecomposition failed");
  {
    const Vector& ev = cov_es.eigenvalues();  // ascending
    double top = ev[ddim - 1];
    require(top > 0.0 && ev[ddim - d] > 1e-10 * top,
            "em_train: data has fewer than d directions of variance");
  }

  auto groups = data.speaker_groups();
  std::vector<Vector> speaker_sums;
  std::vector<int> speaker_counts;
  speaker_sums.reserve(groups.size());
  for (const auto& [spk, rows] : groups) {
    Vector s = Vector::Zero(ddim);
    for (int i : rows) s += centered.row(i).transpose();
    speaker_sums.push_back(std::move(s));
    speaker_counts.push_back(static_cast<int>(rows.size()));
  }
  const int n_spk = static_cast<int>(speaker_sums.size());

  // Init: F spans the top-d directions of the speaker-mean scatter, scaled by
  // the root eigenvalues; random fallback if that scatter is too flat.
  {
    Matrix mscatter = Matrix::Zero(ddim, ddim);
    for (int i = 0; i < n_spk; ++i) {
      Vector m = speaker_sums[i] / speaker_counts[i];
      mscatter += m * m.transpose();
    }
    mscatter /= n_spk;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(mscatter));
    const Vector& ev = es.eigenvalues();
    double top = std::max(ev[ddim - 1], 0.0);
    model.f.resize(ddim, d);
    if (top > 0.0 && ev[ddim - d] > 1e-8 * top) {
      for (int k = 0; k < d; ++k)
        model.f.col(k) = es.eigenvectors().col(ddim - 1 - k) *
                         std::sqrt(ev[ddim - 1 - k]);
    } else {
      Rng rng(cfg.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      double scale = std::sqrt(scatter.trace() / (n * ddim));
      for (int i = 0; i < ddim; ++i)
        for (int k = 0; k < d; ++k) model.f(i, k) = scale * normal(rng);
    }
  }
  {
    Matrix cov = scatter / n;
    cov.diagonal().array() += 1e-10 * (1.0 + cov.trace() / ddim);
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success)
      throw NumericalError("em_train: total covariance is not positive definite");
    model.w = symmetrized(llt.solve(Matrix::Identity(ddim, ddim)));
  }

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    if (loglik_history)
      loglik_history->push_back(detail::gplda_marginal_loglik(
          model.f, model.w, scatter, n, speaker_sums, speaker_counts));

    // E-step: posterior of each speaker factor given the current model is
    // N(m_i, P_i^{-1}) with P_i = I + n_i Bbar and m_i = P_i^{-1} F'W s_i.
    Matrix ftw = model.f.transpose() * model.w;
    Matrix bbar = symmetrized(ftw * model.f);
    Matrix t = Matrix::Zero(ddim, d);   // sum_i s_i m_i'
    Matrix r = Matrix::Zero(d, d);      // sum_i n_i (P_i^{-1} + m_i m_i')
    Matrix zcov = Matrix::Zero(d, d);   // sum_i (P_i^{-1} + m_i m_i')
    for (int i = 0; i < n_spk; ++i) {
      Matrix p = Matrix::Identity(d, d) + speaker_counts[i] * bbar;
      Eigen::LLT<Matrix> pllt(p);
      if (pllt.info() != Eigen::Success)
        throw NumericalError("em_train: posterior precision not positive definite");
      Matrix pinv = pllt.solve(Matrix::Identity(d, d));
      Vector m = pinv * (ftw * speaker_sums[i]);
      t += speaker_sums[i] * m.transpose();
      Matrix second = pinv + m * m.transpose();
      r += speaker_counts[i] * second;
      zcov += second;
    }

    // M-step, joint in F and W.
    Eigen::LLT<Matrix> rllt(symmetrized(r));
    if (rllt.info() != Eigen::Success)
      throw NumericalError("em_train: factor moment matrix is singular");
    model.f = rllt.solve(t.transpose()).transpose();
    Matrix resid = symmetrized((scatter - model.f * t.transpose()) / n);
    Eigen::LLT<Matrix> cllt(resid);
    if (cllt.info() != Eigen::Success)
      throw NumericalError("em_train: residual covariance is not positive definite");
    model.w = symmetrized(cllt.solve(Matrix::Identity(ddim, ddim)));

    if (cfg.min_divergence) {
      // Match the prior of z to its aggregate posterior: fold the posterior
      // covariance into F so the prior stays N(0, I).
      Eigen::LLT<Matrix> zllt(symmetrized(zcov / n_spk));
      if (zllt.info() != Eigen::Success)
        throw NumericalError("em_train: aggregate posterior covariance singular");
      model.f = model.f * zllt.matrixL().toDenseMatrix();
    }
  }
  if (loglik_history)
    loglik_history->push_back(detail::gplda_marginal_loglik(
        model.f, model.w, scatter, n, speaker_sums, speaker_counts));
  return model;
}

/// Projects a vector onto the unit sphere.
inline Vector length_normalize(const Vector& r) {
  double norm = r.norm();
  require(norm > 1e-300, "length_normalize: zero vector");
  return r / norm;
}

/// Centers every row by `center`, then normalizes each row to unit length.
inline LabeledDataset length_normalize_dataset(const LabeledDataset& data,
                                               const Vector& center) {
  data.validate();
  require(center.size() == data.dim(), "length_normalize_dataset: dimension mismatch");
  LabeledDataset out = data;
  for (int i = 0; i < out.size(); ++i) {
    Vector v = out.vectors.row(i).transpose() - center;
    out.vectors.row(i) = length_normalize(v).transpose();
  }
  return out;
}

/// Precomputed closed-form verification score. For centered inputs,
///   score(r1, r2) = 2 r1' Lambda r2 + r1' Gamma r1 + r2' Gamma r2 + k,
/// with
///   Lambda = (1/2) WF (I + 2Bbar)^{-1} F'W,
///   Gamma  = (1/2) WF [ (I + 2Bbar)^{-1} - (I + Bbar)^{-1} ] F'W,
///   k      = -(1/2) logdet(I + 2Bbar) + logdet(I + Bbar),
/// which is llr_binary applied to the two Gaussian meta-embeddings of the
/// inputs, collapsed into a quadratic form.
struct PldaScoreParams {
  Matrix gamma;   // D x D
  Matrix lambda;  // D x D
  double k = 0.0;
  Vector c;       // D; zero for a centered model, kept for completeness
};

inline PldaScoreParams score_params(const GPldaModel& model) {
  model.validate();
  const int d = model.speaker_dim();
  Matrix ftw = model.f.transpose() * model.w;  // d x D
  Matrix bbar = symmetrized(ftw * model.f);
  Matrix i1 = Matrix::Identity(d, d) + bbar;
  Matrix i2 = Matrix::Identity(d, d) + 2.0 * bbar;
  Eigen::LLT<Matrix> llt1(i1), llt2(i2);
  if (llt1.info() != Eigen::Success || llt2.info() != Eigen::Success)
    throw NumericalError("score_params: I + Bbar is not positive definite");
  Matrix inv1 = llt1.solve(Matrix::Identity(d, d));
  Matrix inv2 = llt2.solve(Matrix::Identity(d, d));
  PldaScoreParams out;
  out.lambda = symmetrized(0.5 * ftw.transpose() * inv2 * ftw);
  out.gamma = symmetrized(0.5 * ftw.transpose() * (inv2 - inv1) * ftw);
  double logdet1 =
      2.0 * llt1.matrixL().toDenseMatrix().diagonal().array().log().sum();
  double logdet2 =
      2.0 * llt2.matrixL().toDenseMatrix().diagonal().array().log().sum();
  out.k = -0.5 * logdet2 + logdet1;
  out.c = Vector::Zero(model.data_dim());
  return out;
}

/// Same-speaker log likelihood ratio for two centered vectors.
inline double plda_llr(const PldaScoreParams& p, const Vector& rc1,
                       const Vector& rc2) {
  require(rc1.size() == p.gamma.rows() && rc2.size() == p.gamma.rows(),
          "plda_llr: dimension mismatch");
  return 2.0 * rc1.dot(p.lambda * rc2) + rc1.dot(p.gamma * rc1) +
         rc2.dot(p.gamma * rc2) + p.k + p.c.dot(rc1 + rc2);
}

/// Reinterprets a Gaussian PLDA model as a heavy-tailed extractor with the
/// given degrees of freedom (+inf reproduces Gaussian scoring exactly).
inline HtPldaModel init_gme(const GPldaModel& model, double nu) {
  model.validate();
  require(nu > 0.0, "init_gme: nu must be positive");
  HtPldaModel out;
  out.f = model.f;
  out.w = model.w;
  out.mean = model.mean;
  out.nu = nu;
  return out;
}

}  // namespace gmekit
