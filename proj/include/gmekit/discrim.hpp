// gmekit/discrim.hpp

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

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gmekit/common.hpp"
#include "gmekit/dataset.hpp"
#include "gmekit/gme.hpp"
#include "gmekit/htplda.hpp"

namespace gmekit {

// Discriminative refinement of the extractor parameters (F, W) by gradient
// descent on a balanced binary cross-entropy over random all-vs-all
// minibatches of verification trials. nu stays fixed. W is optimized through
// its Cholesky factor C (W = CC', diagonal of C kept positive by optimizing
// its log), so W remains positive definite by construction.
//
// The gradient is computed analytically. Writing the shared basis as
// Bbar = V diag(lam) V' and, per utterance (centered rc),
//
//   qt = V'F'W rc,   g = rc'G rc,   b = (nu + D - d)/(nu + g),   at = b qt,
//
// the expectation term of a meta-embedding with parameters (at, beta) in the
// basis frame is
//
//   E(at, beta) = (1/2) sum_k at_k^2/(beta lam_k + 1)
//               - (1/2) sum_k log(beta lam_k + 1),
//
// and a trial score is s_ij = E(at_i + at_j, b_i + b_j) - E_i - E_j. With
// ut_k = (at_i + at_j)_k / (beta lam_k + 1) the partials are
//
//   dE/dat = ut,
//   dE/dbeta = -(1/2) sum_k lam_k (ut_k^2 + 1/(beta lam_k + 1)),
//   dE/dBbar = -(beta/2) (V ut)(V ut)' - (beta/2) V diag(1/(beta lam + 1)) V',
//
// so the Bbar-gradient can be accumulated exactly in the basis frame (as
// "kbar") and rotated out once; no eigenvector derivatives are ever needed.
// From the per-item gradients the chain continues through
//
//   q-path:  dM   += sum rc (dL/dq)',            with M = WF, q = M'rc,
//   g-path:  Q     = sum (dL/dg) rc rc',         G = W - M Bbar^{-1} M',
//            dM   += -2 Q M Bbar^{-1},
//            dBbar += Bbar^{-1} M' Q M Bbar^{-1},  dW += Q,
//   Bbar:    dF += 2 W F dBbar,                  dW += F dBbar F',
//   M = WF:  dF += W dM,                         dW += dM F',
//   W = CC': dC = (dW + dW') C, lower triangle only, diagonal times C_kk.

struct TrainConfig {
  int batch_side = 500;          // utterances drawn per side of a minibatch
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int max_epochs = 50;
  int patience = 10;             // epochs without CV improvement before stopping
  double cv_speaker_fraction = 0.10;
  int batches_per_epoch = 20;
  int cv_batches = 5;
  double target_weight = 0.5;    // weight of the target class in the loss
  uint64_t seed = 0;
  bool identity_noise_reparam = false;  // train in the whitened frame instead

  void validate() const {
    require(batch_side >= 2, "TrainConfig: batch_side must be >= 2");
    require(learning_rate >= 0.0, "TrainConfig: learning_rate must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum in [0, 1)");
    require(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
    require(patience >= 1, "TrainConfig: patience must be >= 1");
    require(cv_speaker_fraction > 0.0 && cv_speaker_fraction < 1.0,
            "TrainConfig: cv_speaker_fraction in (0, 1)");
    require(batches_per_epoch >= 1, "TrainConfig: batches_per_epoch must be >= 1");
    require(cv_batches >= 1, "TrainConfig: cv_batches must be >= 1");
    require(target_weight > 0.0 && target_weight < 1.0,
            "TrainConfig: target_weight in (0, 1)");
  }
};

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Two with-replacement draws of utterances scored all-vs-all.
struct Minibatch {
  Matrix enroll, test;                    // side x D raw vectors
  std::vector<int> enroll_rows, test_rows;  // dataset row of each draw
  BoolArray target;  // same speaker on both sides
  BoolArray valid;   // false where both sides are the same utterance

  int enroll_side() const { return static_cast<int>(enroll.rows()); }
  int test_side() const { return static_cast<int>(test.rows()); }

  bool has_both_classes() const {
    bool t = false, n = false;
    for (int i = 0; i < target.rows() && !(t && n); ++i)
      for (int j = 0; j < target.cols(); ++j)
        if (valid(i, j)) (target(i, j) ? t : n) = true;
    return t && n;
  }
};

inline Minibatch sample_minibatch(const LabeledDataset& data, int batch_side,
                                  Rng& rng) {
  require(batch_side >= 1, "sample_minibatch: batch_side must be >= 1");
  const int n = data.size();
  std::uniform_int_distribution<int> pick(0, n - 1);
  Minibatch mb;
  mb.enroll_rows.resize(batch_side);
  mb.test_rows.resize(batch_side);
  for (int i = 0; i < batch_side; ++i) mb.enroll_rows[i] = pick(rng);
  for (int j = 0; j < batch_side; ++j) mb.test_rows[j] = pick(rng);
  mb.enroll.resize(batch_side, data.dim());
  mb.test.resize(batch_side, data.dim());
  for (int i = 0; i < batch_side; ++i)
    mb.enroll.row(i) = data.vectors.row(mb.enroll_rows[i]);
  for (int j = 0; j < batch_side; ++j)
    mb.test.row(j) = data.vectors.row(mb.test_rows[j]);
  std::vector<int> codes = data.speaker_codes();
  mb.target.resize(batch_side, batch_side);
  mb.valid.resize(batch_side, batch_side);
  for (int i = 0; i < batch_side; ++i)
    for (int j = 0; j < batch_side; ++j) {
      mb.target(i, j) = codes[mb.enroll_rows[i]] == codes[mb.test_rows[j]];
      mb.valid(i, j) = mb.enroll_rows[i] != mb.test_rows[j];
    }
  return mb;
}

/// Balanced binary cross-entropy of a score matrix: softplus(-s) on targets,
/// softplus(s) on nontargets, each class averaged separately and mixed with
/// weight `target_weight`. Invalid cells are ignored.
inline double bxe(const Matrix& scores, const BoolArray& target,
                  const BoolArray& valid, double target_weight) {
  require(scores.rows() == target.rows() && scores.cols() == target.cols() &&
              scores.rows() == valid.rows() && scores.cols() == valid.cols(),
          "bxe: mask shape mismatch");
  require(target_weight > 0.0 && target_weight < 1.0,
          "bxe: target_weight in (0, 1)");
  double sum_t = 0.0, sum_n = 0.0;
  long n_t = 0, n_n = 0;
  for (int i = 0; i < scores.rows(); ++i)
    for (int j = 0; j < scores.cols(); ++j) {
      if (!valid(i, j)) continue;
      if (target(i, j)) {
        sum_t += softplus(-scores(i, j));
        ++n_t;
      } else {
        sum_n += softplus(scores(i, j));
        ++n_n;
      }
    }
  require(n_t > 0, "bxe: batch has no valid target trials");
  require(n_n > 0, "bxe: batch has no valid nontarget trials");
  return target_weight * sum_t / n_t + (1.0 - target_weight) * sum_n / n_n;
}

namespace detail {

// Per-utterance statistics in the shared-basis frame.
struct SideStats {
  Matrix at;  // m x d, rows at_i = b_i * qt_i
  Vector b;   // m
};

// Expectation pieces of each item alone, reused by every pair it enters.
struct SelfTerms {
  Vector e;      // E(at_i, b_i)
  Matrix ut;     // m x d
  Vector ebeta;  // dE/dbeta at (at_i, b_i)
};

inline SelfTerms self_terms(const SideStats& s, const Vector& lam) {
  const int m = static_cast<int>(s.at.rows());
  const int d = static_cast<int>(lam.size());
  SelfTerms out;
  out.e.resize(m);
  out.ebeta.resize(m);
  out.ut.resize(m, d);
  for (int i = 0; i < m; ++i) {
    double quad = 0.0, logdet = 0.0, eb = 0.0;
    for (int k = 0; k < d; ++k) {
      double denom = s.b[i] * lam[k] + 1.0;
      double u = s.at(i, k) / denom;
      out.ut(i, k) = u;
      quad += s.at(i, k) * u;
      logdet += std::log(denom);
      eb += lam[k] * (u * u + 1.0 / denom);
    }
    out.e[i] = 0.5 * quad - 0.5 * logdet;
    out.ebeta[i] = -0.5 * eb;
  }
  return out;
}

// Score matrix s_ij = E(at_i + at_j, b_i + b_j) - E_i - E_j for all pairs.
inline Matrix pair_scores(const SideStats& e, const SideStats& t,
                          const Vector& lam) {
  const int me = static_cast<int>(e.at.rows());
  const int mt = static_cast<int>(t.at.rows());
  const int d = static_cast<int>(lam.size());
  SelfTerms se = self_terms(e, lam), st = self_terms(t, lam);
  Matrix scores(me, mt);
  for (int i = 0; i < me; ++i)
    for (int j = 0; j < mt; ++j) {
      double beta = e.b[i] + t.b[j];
      double quad = 0.0, logdet = 0.0;
      for (int k = 0; k < d; ++k) {
        double denom = beta * lam[k] + 1.0;
        double asum = e.at(i, k) + t.at(j, k);
        quad += asum * asum / denom;
        logdet += std::log(denom);
      }
      scores(i, j) = 0.5 * quad - 0.5 * logdet - se.e[i] - st.e[j];
    }
  return scores;
}

// Loss and its gradients with respect to the basis-frame inputs.
struct KernelBackward {
  double loss = 0.0;
  Matrix dat_e, dat_t;  // dL/dat
  Vector db_e, db_t;    // dL/db, expectation path only (at held fixed)
  Matrix kbar;          // dL/dBbar accumulated in the basis frame
};

inline KernelBackward kernel_backward(const SideStats& e, const SideStats& t,
                                      const Vector& lam, const BoolArray& target,
                                      const BoolArray& valid, double w) {
  const int me = static_cast<int>(e.at.rows());
  const int mt = static_cast<int>(t.at.rows());
  const int d = static_cast<int>(lam.size());
  long n_t = 0, n_n = 0;
  for (int i = 0; i < me; ++i)
    for (int j = 0; j < mt; ++j)
      if (valid(i, j)) (target(i, j) ? n_t : n_n)++;
  require(n_t > 0, "bxe: batch has no valid target trials");
  require(n_n > 0, "bxe: batch has no valid nontarget trials");

  SelfTerms se = self_terms(e, lam), st = self_terms(t, lam);
  KernelBackward out;
  out.dat_e = Matrix::Zero(me, d);
  out.dat_t = Matrix::Zero(mt, d);
  out.db_e = Vector::Zero(me);
  out.db_t = Vector::Zero(mt);
  out.kbar = Matrix::Zero(d, d);
  Vector csum_e = Vector::Zero(me), csum_t = Vector::Zero(mt);
  Vector ut(d), inv_denom(d);

  for (int i = 0; i < me; ++i) {
    for (int j = 0; j < mt; ++j) {
      if (!valid(i, j)) continue;
      double beta = e.b[i] + t.b[j];
      double quad = 0.0, logdet = 0.0, eb = 0.0;
      for (int k = 0; k < d; ++k) {
        double denom = beta * lam[k] + 1.0;
        double asum = e.at(i, k) + t.at(j, k);
        double u = asum / denom;
        ut[k] = u;
        inv_denom[k] = 1.0 / denom;
        quad += asum * u;
        logdet += std::log(denom);
        eb += lam[k] * (u * u + 1.0 / denom);
      }
      double s = 0.5 * quad - 0.5 * logdet - se.e[i] - st.e[j];
      double c;  // dL/ds
      if (target(i, j)) {
        out.loss += w / n_t * softplus(-s);
        c = -w / n_t * logistic(-s);
      } else {
        out.loss += (1.0 - w) / n_n * softplus(s);
        c = (1.0 - w) / n_n * logistic(s);
      }
      out.dat_e.row(i) += c * ut.transpose();
      out.dat_t.row(j) += c * ut.transpose();
      double ebeta = -0.5 * eb;
      out.db_e[i] += c * ebeta;
      out.db_t[j] += c * ebeta;
      double hb = -0.5 * c * beta;
      out.kbar.noalias() += hb * (ut * ut.transpose());
      out.kbar.diagonal() += hb * inv_denom;
      csum_e[i] += c;
      csum_t[j] += c;
    }
  }

  // Each item's own E enters every one of its scores with weight -1.
  auto add_item_terms = [&](const SideStats& s, const SelfTerms& self,
                            const Vector& csum, Matrix* dat, Vector* db) {
    for (int i = 0; i < s.at.rows(); ++i) {
      double ci = -csum[i];
      if (ci == 0.0) continue;
      dat->row(i) += ci * self.ut.row(i);
      (*db)[i] += ci * self.ebeta[i];
      double hb = -0.5 * ci * s.b[i];
      out.kbar.noalias() +=
          hb * (self.ut.row(i).transpose() * self.ut.row(i));
      for (int k = 0; k < d; ++k)
        out.kbar(k, k) += hb / (s.b[i] * lam[k] + 1.0);
    }
  };
  add_item_terms(e, se, csum_e, &out.dat_e, &out.db_e);
  add_item_terms(t, st, csum_t, &out.dat_t, &out.db_t);
  return out;
}

}  // namespace detail

/// Scores a minibatch all-vs-all through the shared-basis fast path.
/// Invalid cells are set to NaN.
inline Matrix score_batch(const HtPldaModel& model, const Minibatch& batch) {
  HtPldaDerived der = derive(model);
  const Vector& lam = der.basis->eigvals;
  const Matrix& v = der.basis->eigvecs;
  auto stats = [&](const Matrix& raw) {
    detail::SideStats s;
    Matrix xc = raw.rowwise() - model.mean.transpose();
    Matrix qt = xc * der.ftw.transpose() * v;
    s.b.resize(raw.rows());
    for (int i = 0; i < raw.rows(); ++i)
      s.b[i] = precision_scale(model, der, xc.row(i).transpose());
    s.at = s.b.asDiagonal() * qt;
    return s;
  };
  detail::SideStats e = stats(batch.enroll), t = stats(batch.test);
  Matrix scores = detail::pair_scores(e, t, lam);
  for (int i = 0; i < scores.rows(); ++i)
    for (int j = 0; j < scores.cols(); ++j)
      if (!batch.valid(i, j))
        scores(i, j) = std::numeric_limits<double>::quiet_NaN();
  return scores;
}

/// Extractor parameters in the frame the optimizer works in. The mean is
/// carried along but never trained.
struct TrainableParams {
  Matrix f;     // D x d, unconstrained
  Matrix c;     // D x D lower triangular with positive diagonal; W = CC'
  Vector mean;  // fixed

  int data_dim() const { return static_cast<int>(f.rows()); }
  int speaker_dim() const { return static_cast<int>(f.cols()); }
  Matrix w() const { return symmetrized(c * c.transpose()); }

  static TrainableParams from_model(const HtPldaModel& model) {
    model.validate();
    TrainableParams p;
    p.f = model.f;
    p.mean = model.mean;
    Eigen::LLT<Matrix> llt(model.w);
    if (llt.info() != Eigen::Success)
      throw NumericalError("TrainableParams: W has no Cholesky factor");
    p.c = llt.matrixL().toDenseMatrix();
    return p;
  }

  HtPldaModel to_model(double nu) const {
    HtPldaModel m;
    m.f = f;
    m.w = w();
    m.mean = mean;
    m.nu = nu;
    m.validate();
    return m;
  }
};

/// Gradient of the balanced cross-entropy of one minibatch. dC lives in the
/// optimization frame: strictly-lower entries are plain partials, diagonal
/// entries are partials with respect to log C_kk; the upper triangle is zero.
struct BxeGradients {
  double loss = 0.0;
  Matrix df;
  Matrix dc;
};

namespace detail {

// Forward pass of the trainer: basis-frame statistics for one side.
struct MainForward {
  Matrix w, m, bbarinv;  // W, WF, (F'WF)^{-1}
  Matrix v;              // eigenvectors of F'WF
  Vector lam;
  Matrix g;              // W - M Bbar^{-1} M'
  Matrix xe, xt;         // centered sides
  SideStats e, t;
  Matrix qt_e, qt_t;
  Vector g_e, g_t;       // ancillary rc'Grc per item (unclamped)
};

inline MainForward main_forward(const TrainableParams& p, double nu,
                                const Minibatch& batch) {
  MainForward fw;
  fw.w = p.w();
  Matrix bbar = symmetrized(p.f.transpose() * fw.w * p.f);
  Eigen::SelfAdjointEigenSolver<Matrix> es(bbar);
  if (es.info() != Eigen::Success)
    throw NumericalError("grad_bxe: eigendecomposition of F'WF failed");
  fw.lam = es.eigenvalues();
  fw.v = es.eigenvectors();
  if (!(fw.lam.minCoeff() > 1e-12 * std::max(1.0, fw.lam.maxCoeff())))
    throw NumericalError("grad_bxe: F'WF lost positive definiteness");
  fw.bbarinv = symmetrized(fw.v * fw.lam.cwiseInverse().asDiagonal() *
                           fw.v.transpose());
  fw.m = fw.w * p.f;
  fw.g = symmetrized(fw.w - fw.m * fw.bbarinv * fw.m.transpose());
  const double nuprime =
      std::isinf(nu) ? 1.0 : nu + (p.data_dim() - p.speaker_dim());
  auto side = [&](const Matrix& raw, Matrix* xc, Matrix* qt, Vector* gq,
                  SideStats* s) {
    *xc = raw.rowwise() - p.mean.transpose();
    *qt = (*xc) * fw.m * fw.v;
    *gq = ((*xc) * fw.g).cwiseProduct(*xc).rowwise().sum();
    s->b.resize(raw.rows());
    for (int i = 0; i < raw.rows(); ++i)
      (*s).b[i] = std::isinf(nu) ? 1.0 : nuprime / (nu + (*gq)[i]);
    s->at = s->b.asDiagonal() * (*qt);
  };
  side(batch.enroll, &fw.xe, &fw.qt_e, &fw.g_e, &fw.e);
  side(batch.test, &fw.xt, &fw.qt_t, &fw.g_t, &fw.t);
  return fw;
}

// Loss through the trainer's own forward pass (no clamping), used for
// finite-difference checks and CV evaluation so it matches grad_bxe exactly.
inline double bxe_forward(const TrainableParams& p, double nu,
                          const Minibatch& batch, double target_weight) {
  MainForward fw = main_forward(p, nu, batch);
  Matrix scores = pair_scores(fw.e, fw.t, fw.lam);
  return bxe(scores, batch.target, batch.valid, target_weight);
}

}  // namespace detail

inline BxeGradients grad_bxe(const TrainableParams& p, double nu,
                             const Minibatch& batch, double target_weight) {
  require(nu > 0.0, "grad_bxe: nu must be positive");
  detail::MainForward fw = detail::main_forward(p, nu, batch);
  detail::KernelBackward kb = detail::kernel_backward(
      fw.e, fw.t, fw.lam, batch.target, batch.valid, target_weight);

  const bool gaussian = std::isinf(nu);
  auto side_back = [&](const detail::SideStats& s, const Matrix& dat,
                       const Vector& db_epath, const Matrix& qt, const Vector& gq,
                       const Matrix& xc, Matrix* dm, Matrix* q_out) {
    // at = b qt: split into the qt and b paths, then b -> g.
    Vector db = db_epath + qt.cwiseProduct(dat).rowwise().sum();
    Matrix dqt = s.b.asDiagonal() * dat;
    Matrix dq = dqt * fw.v.transpose();
    dm->noalias() += xc.transpose() * dq;
    if (!gaussian) {
      Vector dg = -(db.array() * s.b.array() / (nu + gq.array())).matrix();
      q_out->noalias() += xc.transpose() * dg.asDiagonal() * xc;
    }
  };
  const int ddim = p.data_dim();
  Matrix dm = Matrix::Zero(ddim, p.speaker_dim());
  Matrix q = Matrix::Zero(ddim, ddim);
  side_back(fw.e, kb.dat_e, kb.db_e, fw.qt_e, fw.g_e, fw.xe, &dm, &q);
  side_back(fw.t, kb.dat_t, kb.db_t, fw.qt_t, fw.g_t, fw.xt, &dm, &q);

  Matrix dbbar = fw.v * kb.kbar * fw.v.transpose();
  if (!gaussian) {
    dbbar.noalias() += fw.bbarinv * fw.m.transpose() * q * fw.m * fw.bbarinv;
    dm.noalias() += -2.0 * q * fw.m * fw.bbarinv;
  }

  Matrix dw = q + dm * p.f.transpose() + p.f * dbbar * p.f.transpose();
  BxeGradients out;
  out.loss = kb.loss;
  out.df = fw.w * dm + 2.0 * fw.m * dbbar;
  Matrix dc_full = (dw + dw.transpose()) * p.c;
  out.dc = dc_full.triangularView<Eigen::Lower>();
  out.dc.diagonal().array() *= p.c.diagonal().array();
  return out;
}

// ---------------------------------------------------------------------------
// Optional whitened parameterization: a single invertible transform T takes
// rc to coordinates in which the residual precision is the identity and the
// shared precision is diagonal (Lambda = diag(exp(rho))). Then
//
//   qt = (T rc).head(d),  g = |(T rc).tail(D-d)|^2,
//
// with no matrix inverses anywhere in the gradient. Equivalent to the main
// parameterization: scores are preserved exactly by the conversions below.

struct ReparamParams {
  Matrix t;     // D x D invertible
  Vector rho;   // d, log of the diagonal precision
  Vector mean;  // fixed

  int data_dim() const { return static_cast<int>(t.rows()); }
  int speaker_dim() const { return static_cast<int>(rho.size()); }
};

inline ReparamParams reparam_from_model(const HtPldaModel& model) {
  HtPldaDerived der = derive(model);
  const int ddim = model.data_dim();
  const int d = model.speaker_dim();
  const Vector& lam = der.basis->eigvals;
  require(lam.minCoeff() > 0.0, "reparam_from_model: F'WF must be positive definite");
  ReparamParams p;
  p.mean = model.mean;
  p.rho = lam.array().log();
  p.t.resize(ddim, ddim);
  p.t.topRows(d) = der.basis->eigvecs.transpose() * der.ftw;
  Eigen::SelfAdjointEigenSolver<Matrix> es(der.g);
  if (es.info() != Eigen::Success)
    throw NumericalError("reparam_from_model: eigendecomposition of G failed");
  const Vector& gl = es.eigenvalues();  // ascending; d of them are ~0
  double top = gl[ddim - 1];
  require(top > 0.0, "reparam_from_model: residual precision is zero");
  for (int k = 0; k < d; ++k)
    require(gl[k] < 1e-8 * top, "reparam_from_model: G has rank above D - d");
  for (int k = d; k < ddim; ++k) {
    require(gl[k] > 1e-10 * top, "reparam_from_model: G has rank below D - d");
    p.t.row(k) = std::sqrt(gl[k]) * es.eigenvectors().col(k).transpose();
  }
  return p;
}

inline HtPldaModel reparam_to_model(const ReparamParams& p, double nu) {
  const int ddim = p.data_dim();
  const int d = p.speaker_dim();
  require(d < ddim, "reparam_to_model: need d < D");
  Vector lam = p.rho.array().exp();
  Eigen::FullPivLU<Matrix> lu(p.t);
  if (!lu.isInvertible())
    throw NumericalError("reparam_to_model: transform is singular");
  Matrix rhs = Matrix::Zero(ddim, d);
  rhs.topLeftCorner(d, d) = lam.asDiagonal();
  HtPldaModel model;
  model.f = lu.solve(rhs);
  Vector wdiag(ddim);
  wdiag.head(d) = lam.cwiseInverse();
  wdiag.tail(ddim - d).setOnes();
  model.w = symmetrized(p.t.transpose() * wdiag.asDiagonal() * p.t);
  model.mean = p.mean;
  model.nu = nu;
  model.validate();
  return model;
}

/// Gradient in the whitened parameterization. dT is unconstrained, drho is
/// the gradient with respect to the log precisions.
struct ReparamGradients {
  double loss = 0.0;
  Matrix dt;
  Vector drho;
};

namespace detail {

struct ReparamForward {
  Vector lam;
  Matrix ye, yt;  // transformed centered sides, m x D
  SideStats e, t;
  Vector g_e, g_t;
};

inline ReparamForward reparam_forward(const ReparamParams& p, double nu,
                                      const Minibatch& batch) {
  ReparamForward fw;
  fw.lam = p.rho.array().exp();
  const int d = p.speaker_dim();
  const double nuprime =
      std::isinf(nu) ? 1.0 : nu + (p.data_dim() - p.speaker_dim());
  auto side = [&](const Matrix& raw, Matrix* y, Vector* gq, SideStats* s) {
    Matrix xc = raw.rowwise() - p.mean.transpose();
    *y = xc * p.t.transpose();
    *gq = y->rightCols(p.data_dim() - d).rowwise().squaredNorm();
    s->b.resize(raw.rows());
    for (int i = 0; i < raw.rows(); ++i)
      (*s).b[i] = std::isinf(nu) ? 1.0 : nuprime / (nu + (*gq)[i]);
    s->at = s->b.asDiagonal() * y->leftCols(d);
  };
  side(batch.enroll, &fw.ye, &fw.g_e, &fw.e);
  side(batch.test, &fw.yt, &fw.g_t, &fw.t);
  return fw;
}

inline double bxe_forward_reparam(const ReparamParams& p, double nu,
                                  const Minibatch& batch, double target_weight) {
  ReparamForward fw = reparam_forward(p, nu, batch);
  Matrix scores = pair_scores(fw.e, fw.t, fw.lam);
  return bxe(scores, batch.target, batch.valid, target_weight);
}

}  // namespace detail

inline ReparamGradients grad_bxe_reparam(const ReparamParams& p, double nu,
                                         const Minibatch& batch,
                                         double target_weight) {
  require(nu > 0.0, "grad_bxe_reparam: nu must be positive");
  detail::ReparamForward fw = detail::reparam_forward(p, nu, batch);
  detail::KernelBackward kb = detail::kernel_backward(
      fw.e, fw.t, fw.lam, batch.target, batch.valid, target_weight);
  const int d = p.speaker_dim();
  const int ddim = p.data_dim();
  const bool gaussian = std::isinf(nu);

  ReparamGradients out;
  out.loss = kb.loss;
  out.drho = fw.lam.cwiseProduct(kb.kbar.diagonal());
  out.dt = Matrix::Zero(ddim, ddim);
  auto side_back = [&](const detail::SideStats& s, const Matrix& dat,
                       const Vector& db_epath, const Matrix& y, const Vector& gq,
                       const Matrix& raw) {
    Matrix xc = raw.rowwise() - p.mean.transpose();
    Matrix dy(y.rows(), ddim);
    dy.leftCols(d) = s.b.asDiagonal() * dat;
    if (gaussian) {
      dy.rightCols(ddim - d).setZero();
    } else {
      Vector db = db_epath + y.leftCols(d).cwiseProduct(dat).rowwise().sum();
      Vector dg = -(db.array() * s.b.array() / (nu + gq.array())).matrix();
      dy.rightCols(ddim - d) =
          2.0 * dg.asDiagonal() * y.rightCols(ddim - d);
    }
    out.dt.noalias() += dy.transpose() * xc;
  };
  side_back(fw.e, kb.dat_e, kb.db_e, fw.ye, fw.g_e, batch.enroll);
  side_back(fw.t, kb.dat_t, kb.db_t, fw.yt, fw.g_t, batch.test);
  return out;
}

// ---------------------------------------------------------------------------
// SGD driver.

struct EpochStats {
  int epoch = 0;
  double train_bxe = 0.0;  // epoch 0: loss of a fixed probe batch
  double cv_bxe = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::vector<std::string> train_speakers, cv_speakers;
  int resampled_batches = 0;
  int best_epoch = 0;
};

namespace detail {

// Flat parameter vectors so one momentum update serves both parameterizations.
inline Vector pack_main(const TrainableParams& p) {
  const int ddim = p.data_dim(), d = p.speaker_dim();
  Vector v(ddim * d + ddim * (ddim - 1) / 2 + ddim);
  int pos = 0;
  for (int k = 0; k < d; ++k)
    for (int i = 0; i < ddim; ++i) v[pos++] = p.f(i, k);
  for (int k = 0; k < ddim; ++k)
    for (int i = k + 1; i < ddim; ++i) v[pos++] = p.c(i, k);
  for (int k = 0; k < ddim; ++k) v[pos++] = std::log(p.c(k, k));
  return v;
}

inline TrainableParams unpack_main(const Vector& v, int ddim, int d,
                                   Vector mean) {
  TrainableParams p;
  p.mean = std::move(mean);
  p.f.resize(ddim, d);
  p.c = Matrix::Zero(ddim, ddim);
  int pos = 0;
  for (int k = 0; k < d; ++k)
    for (int i = 0; i < ddim; ++i) p.f(i, k) = v[pos++];
  for (int k = 0; k < ddim; ++k)
    for (int i = k + 1; i < ddim; ++i) p.c(i, k) = v[pos++];
  for (int k = 0; k < ddim; ++k) p.c(k, k) = std::exp(v[pos++]);
  return p;
}

inline Vector pack_main_grad(const BxeGradients& g) {
  const int ddim = static_cast<int>(g.dc.rows());
  const int d = static_cast<int>(g.df.cols());
  Vector v(ddim * d + ddim * (ddim - 1) / 2 + ddim);
  int pos = 0;
  for (int k = 0; k < d; ++k)
    for (int i = 0; i < ddim; ++i) v[pos++] = g.df(i, k);
  for (int k = 0; k < ddim; ++k)
    for (int i = k + 1; i < ddim; ++i) v[pos++] = g.dc(i, k);
  for (int k = 0; k < ddim; ++k) v[pos++] = g.dc(k, k);
  return v;
}

inline Vector pack_reparam(const ReparamParams& p) {
  const int ddim = p.data_dim(), d = p.speaker_dim();
  Vector v(ddim * ddim + d);
  int pos = 0;
  for (int k = 0; k < ddim; ++k)
    for (int i = 0; i < ddim; ++i) v[pos++] = p.t(i, k);
  for (int k = 0; k < d; ++k) v[pos++] = p.rho[k];
  return v;
}

inline ReparamParams unpack_reparam(const Vector& v, int ddim, int d,
                                    Vector mean) {
  ReparamParams p;
  p.mean = std::move(mean);
  p.t.resize(ddim, ddim);
  p.rho.resize(d);
  int pos = 0;
  for (int k = 0; k < ddim; ++k)
    for (int i = 0; i < ddim; ++i) p.t(i, k) = v[pos++];
  for (int k = 0; k < d; ++k) p.rho[k] = v[pos++];
  return p;
}

inline Vector pack_reparam_grad(const ReparamGradients& g) {
  const int ddim = static_cast<int>(g.dt.rows());
  const int d = static_cast<int>(g.drho.size());
  Vector v(ddim * ddim + d);
  int pos = 0;
  for (int k = 0; k < ddim; ++k)
    for (int i = 0; i < ddim; ++i) v[pos++] = g.dt(i, k);
  for (int k = 0; k < d; ++k) v[pos++] = g.drho[k];
  return v;
}

inline Minibatch sample_valid_minibatch(const LabeledDataset& data,
                                        int batch_side, Rng& rng,
                                        int* resampled, std::ostream* log) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Minibatch mb = sample_minibatch(data, batch_side, rng);
    if (mb.has_both_classes()) return mb;
    if (resampled) ++(*resampled);
    if (log)
      *log << "resampling minibatch without both trial types (attempt "
           << attempt + 1 << ")\n";
  }
  throw std::invalid_argument(
      "sgd_train: could not draw a minibatch containing both target and "
      "nontarget trials");
}

}  // namespace detail

/// Minimizes the balanced cross-entropy over random minibatches with
/// SGD + momentum. A fixed fraction of speakers is held out; their fixed CV
/// minibatches drive early stopping, and the parameters with the best CV
/// loss are returned. nu is inherited from `init` and never updated.
inline HtPldaModel sgd_train(const HtPldaModel& init, const LabeledDataset& data,
                             const TrainConfig& cfg,
                             TrainHistory* history = nullptr,
                             std::ostream* log = nullptr) {
  cfg.validate();
  init.validate();
  data.validate();
  require(data.dim() == init.data_dim(), "sgd_train: data/model dimension mismatch");
  const double nu = init.nu;
  const int ddim = init.data_dim();
  const int d = init.speaker_dim();

  // Speaker-disjoint CV split, deterministic in the seed.
  std::vector<std::string> speakers;
  {
    std::unordered_map<std::string, int> seen;
    for (const auto& s : data.speaker_ids)
      if (seen.emplace(s, 0).second) speakers.push_back(s);
  }
  require(speakers.size() >= 2, "sgd_train: need at least two speakers");
  Rng master(cfg.seed);
  std::shuffle(speakers.begin(), speakers.end(), master);
  int n_cv = static_cast<int>(
      std::lround(cfg.cv_speaker_fraction * speakers.size()));
  n_cv = std::clamp(n_cv, 1, static_cast<int>(speakers.size()) - 1);
  std::vector<std::string> cv_speakers(speakers.begin(), speakers.begin() + n_cv);
  std::vector<std::string> train_speakers(speakers.begin() + n_cv, speakers.end());
  std::sort(cv_speakers.begin(), cv_speakers.end());
  std::sort(train_speakers.begin(), train_speakers.end());
  auto in_cv = [&](const std::string& s) {
    return std::binary_search(cv_speakers.begin(), cv_speakers.end(), s);
  };
  std::vector<int> cv_rows, train_rows;
  for (int i = 0; i < data.size(); ++i)
    (in_cv(data.speaker_ids[i]) ? cv_rows : train_rows).push_back(i);
  LabeledDataset cv_data = data.subset(cv_rows);
  LabeledDataset train_data = data.subset(train_rows);

  TrainHistory local_history;
  TrainHistory* hist = history ? history : &local_history;
  hist->epochs.clear();
  hist->train_speakers = train_speakers;
  hist->cv_speakers = cv_speakers;
  hist->resampled_batches = 0;
  hist->best_epoch = 0;

  Rng train_rng(master()), cv_rng(master()), probe_rng(master());
  std::vector<Minibatch> cv_set;
  cv_set.reserve(cfg.cv_batches);
  for (int k = 0; k < cfg.cv_batches; ++k)
    cv_set.push_back(detail::sample_valid_minibatch(
        cv_data, cfg.batch_side, cv_rng, &hist->resampled_batches, log));
  Minibatch probe = detail::sample_valid_minibatch(
      train_data, cfg.batch_side, probe_rng, &hist->resampled_batches, log);

  const bool reparam = cfg.identity_noise_reparam;
  Vector theta = reparam
                     ? detail::pack_reparam(reparam_from_model(init))
                     : detail::pack_main(TrainableParams::from_model(init));
  auto loss_at = [&](const Vector& th, const Minibatch& mb) {
    if (reparam)
      return detail::bxe_forward_reparam(
          detail::unpack_reparam(th, ddim, d, init.mean), nu, mb,
          cfg.target_weight);
    return detail::bxe_forward(detail::unpack_main(th, ddim, d, init.mean), nu,
                               mb, cfg.target_weight);
  };
  auto grad_at = [&](const Vector& th, const Minibatch& mb, double* loss) {
    if (reparam) {
      ReparamGradients g = grad_bxe_reparam(
          detail::unpack_reparam(th, ddim, d, init.mean), nu, mb,
          cfg.target_weight);
      *loss = g.loss;
      return detail::pack_reparam_grad(g);
    }
    BxeGradients g = grad_bxe(detail::unpack_main(th, ddim, d, init.mean), nu,
                              mb, cfg.target_weight);
    *loss = g.loss;
    return detail::pack_main_grad(g);
  };
  auto cv_loss = [&](const Vector& th) {
    double total = 0.0;
    for (const auto& mb : cv_set) total += loss_at(th, mb);
    return total / cv_set.size();
  };

  double cv0 = cv_loss(theta);
  hist->epochs.push_back({0, loss_at(theta, probe), cv0});
  if (log)
    *log << "epoch 0 train_bxe " << hist->epochs[0].train_bxe << " cv_bxe "
         << cv0 << "\n";
  Vector best_theta = theta;
  double best_cv = cv0;
  Vector velocity = Vector::Zero(theta.size());
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double accum = 0.0;
    for (int batch = 0; batch < cfg.batches_per_epoch; ++batch) {
      Minibatch mb = detail::sample_valid_minibatch(
          train_data, cfg.batch_side, train_rng, &hist->resampled_batches, log);
      double loss = 0.0;
      Vector g = grad_at(theta, mb, &loss);
      velocity = cfg.momentum * velocity - cfg.learning_rate * g;
      theta += velocity;
      accum += loss;
    }
    double cv = cv_loss(theta);
    hist->epochs.push_back({epoch, accum / cfg.batches_per_epoch, cv});
    if (log)
      *log << "epoch " << epoch << " train_bxe "
           << accum / cfg.batches_per_epoch << " cv_bxe " << cv << "\n";
    if (cv < best_cv) {
      best_cv = cv;
      best_theta = theta;
      hist->best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      if (log) *log << "stopping: no CV improvement in " << cfg.patience
                    << " epochs\n";
      break;
    }
  }

  if (reparam)
    return reparam_to_model(
        detail::unpack_reparam(best_theta, ddim, d, init.mean), nu);
  return detail::unpack_main(best_theta, ddim, d, init.mean).to_model(nu);
}

}  // namespace gmekit
