// gmekit/htplda.hpp

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
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gmekit/common.hpp"
#include "gmekit/dataset.hpp"
#include "gmekit/gme.hpp"

namespace gmekit {

// Heavy-tailed PLDA generative model of D-dimensional utterance vectors:
//
//   z ~ N(0, I_d)                       speaker identity
//   u ~ Gamma(nu/2, nu/2)               per-utterance precision scale
//   r | z, u ~ N(mean + Fz, (uW)^{-1})
//
// Marginalizing u gives r | z ~ mean + Fz + t_nu(0, W), a multivariate
// t-distributed residual. nu = +inf is the Gaussian special case (u == 1).
//
// The meta-embedding extractor below rests on the likelihood of z for one
// observed r (centered, rc = r - mean). Define
//
//   Bbar = F'WF,     G = W - WF Bbar^{-1} F'W   (so that GF = 0),
//
// then the quadratic form splits as
//
//   (rc - Fz)' W (rc - Fz) = (z - zhat)' Bbar (z - zhat) + rc' G rc,
//
// with zhat = Bbar^{-1} F'W rc. The t-likelihood of z is therefore, up to a
// constant, a Gaussian in z whose precision is a scalar multiple of Bbar:
//
//   b = (nu + D - d) / (nu + rc' G rc),     a = b F'W rc,
//
// giving the meta-embedding f(z) = exp(a'z - b z'Bbar z / 2). All
// meta-embeddings from one model share the basis Bbar; only (a, b) vary.
// rc'Grc is ancillary for z (it does not move when rc moves along the columns
// of F), and b shrinks towards zero for outlying vectors: heavy tails turn
// into a per-utterance confidence weight.

struct HtPldaModel {
  Matrix f;     // D x d factor loadings
  Matrix w;     // D x D within-speaker precision, symmetric positive definite
  double nu = 2.0;  // degrees of freedom, > 0; +inf selects the Gaussian case
  Vector mean;  // D

  int data_dim() const { return static_cast<int>(f.rows()); }
  int speaker_dim() const { return static_cast<int>(f.cols()); }
  bool gaussian() const { return std::isinf(nu); }

  void validate() const {
    require(f.rows() > 0 && f.cols() > 0, "HtPldaModel: empty F");
    require(f.cols() < f.rows(), "HtPldaModel: need d < D");
    require(w.rows() == f.rows() && w.cols() == f.rows(),
            "HtPldaModel: W dimension does not match F");
    checked_symmetric(w, "HtPldaModel W");
    require(mean.size() == f.rows(), "HtPldaModel: mean dimension mismatch");
    require(nu > 0.0, "HtPldaModel: nu must be positive");
  }
};

/// Quantities derived from a model that every extraction reuses.
struct HtPldaDerived {
  Matrix bbar;  // d x d, F'WF
  Matrix ftw;   // d x D, F'W
  Matrix g;     // D x D, W - WF Bbar^{-1} F'W; PSD with GF = 0
  std::shared_ptr<const SharedPrecisionBasis> basis;
};

inline HtPldaDerived derive(const HtPldaModel& model) {
  model.validate();
  HtPldaDerived der;
  der.ftw = model.f.transpose() * model.w;
  der.bbar = symmetrized(der.ftw * model.f);
  Eigen::LLT<Matrix> llt(der.bbar);
  if (llt.info() != Eigen::Success)
    throw NumericalError("derive: F'WF is singular or not positive definite");
  der.g = symmetrized(model.w - der.ftw.transpose() * llt.solve(der.ftw));
  der.basis = SharedPrecisionBasis::make(der.bbar);
  return der;
}

/// rc' G rc for a centered vector rc; clamped at zero against roundoff.
inline double ancillary_stat(const HtPldaDerived& der, const Vector& rc) {
  require(rc.size() == der.g.rows(), "ancillary_stat: dimension mismatch");
  return std::max(0.0, rc.dot(der.g * rc));
}

/// Precision scale b = (nu + D - d) / (nu + rc'Grc); exactly 1 in the
/// Gaussian case.
inline double precision_scale(const HtPldaModel& model, const HtPldaDerived& der,
                              const Vector& rc) {
  if (model.gaussian()) return 1.0;
  double ddim = static_cast<double>(model.data_dim() - model.speaker_dim());
  return (model.nu + ddim) / (model.nu + ancillary_stat(der, rc));
}

/// Meta-embedding of one utterance vector. Centering by model.mean happens
/// here; callers pass raw vectors.
inline GaussianMetaEmbedding extract(const HtPldaModel& model,
                                     const HtPldaDerived& der, const Vector& r) {
  require(r.size() == model.data_dim(), "extract: dimension mismatch");
  Vector rc = r - model.mean;
  double b = precision_scale(model, der, rc);
  Vector a = b * (der.ftw * rc);
  return GaussianMetaEmbedding(std::move(a), b, der.basis);
}

/// Fully normalized log density log p(r | z) with the per-utterance scale u
/// marginalized out: multivariate t with nu degrees of freedom, location
/// mean + Fz and scale matrix W^{-1} (Gaussian for nu = +inf). Slow path,
/// used as a reference in tests and for exact-posterior checks.
inline double exact_t_loglik(const HtPldaModel& model, const Vector& r,
                             const Vector& z) {
  model.validate();
  require(r.size() == model.data_dim(), "exact_t_loglik: r dimension mismatch");
  require(z.size() == model.speaker_dim(), "exact_t_loglik: z dimension mismatch");
  const double ddim = static_cast<double>(model.data_dim());
  Vector delta = r - model.mean - model.f * z;
  Eigen::LLT<Matrix> llt(model.w);
  if (llt.info() != Eigen::Success)
    throw NumericalError("exact_t_loglik: W is not positive definite");
  double logdet_w =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  double q = delta.dot(model.w * delta);
  constexpr double kLogPi = 1.1447298858494002;
  if (model.gaussian())
    return -0.5 * ddim * (kLogPi + std::log(2.0)) + 0.5 * logdet_w - 0.5 * q;
  const double nu = model.nu;
  return std::lgamma(0.5 * (nu + ddim)) - std::lgamma(0.5 * nu) -
         0.5 * ddim * (std::log(nu) + kLogPi) + 0.5 * logdet_w -
         0.5 * (nu + ddim) * std::log1p(q / nu);
}

/// Draws a labeled dataset from the model: one z per speaker, then per
/// utterance u ~ Gamma(nu/2, rate nu/2) (u = 1 when Gaussian) and
/// r = mean + Fz + L^{-T} xi / sqrt(u) with W = LL' and xi ~ N(0, I).
/// The draw order is fixed, so a seed fully determines the output.
inline LabeledDataset sample(const HtPldaModel& model, int n_speakers,
                             int utts_per_speaker, uint64_t seed) {
  model.validate();
  require(n_speakers > 0 && utts_per_speaker > 0,
          "sample: counts must be positive");
  const int ddim = model.data_dim();
  const int sdim = model.speaker_dim();
  Eigen::LLT<Matrix> llt(model.w);
  if (llt.info() != Eigen::Success)
    throw NumericalError("sample: W is not positive definite");
  Matrix lt = llt.matrixL().toDenseMatrix().transpose();  // upper triangular

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Gamma(shape nu/2, rate nu/2): std::gamma_distribution takes scale 2/nu.
  std::gamma_distribution<double> gamma(0.5 * model.nu, 2.0 / model.nu);

  LabeledDataset data;
  data.vectors.resize(n_speakers * utts_per_speaker, ddim);
  data.utt_ids.reserve(data.vectors.rows());
  data.speaker_ids.reserve(data.vectors.rows());
  char buf[64];
  int row = 0;
  for (int s = 0; s < n_speakers; ++s) {
    Vector z(sdim);
    for (int k = 0; k < sdim; ++k) z[k] = normal(rng);
    Vector fz = model.f * z + model.mean;
    std::snprintf(buf, sizeof(buf), "spk%05d", s);
    std::string spk(buf);
    for (int u = 0; u < utts_per_speaker; ++u, ++row) {
      double prec = model.gaussian() ? 1.0 : gamma(rng);
      Vector xi(ddim);
      for (int k = 0; k < ddim; ++k) xi[k] = normal(rng);
      Vector eta = lt.triangularView<Eigen::Upper>().solve(xi) / std::sqrt(prec);
      data.vectors.row(row) = (fz + eta).transpose();
      std::snprintf(buf, sizeof(buf), "%s_u%04d", spk.c_str(), u);
      data.utt_ids.emplace_back(buf);
      data.speaker_ids.push_back(spk);
    }
  }
  return data;
}

}  // namespace gmekit
