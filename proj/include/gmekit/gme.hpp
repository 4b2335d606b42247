// gmekit/gme.hpp

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
#include <iostream>
#include <memory>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "gmekit/common.hpp"

namespace gmekit {

// A Gaussian meta-embedding represents an utterance as an unnormalized
// Gaussian likelihood function over a hidden identity variable z in R^d,
//
//   f(z) = exp(a'z - (1/2) z'Bz),
//
// stored by its natural parameters (a, B). The arbitrary positive constant
// multiplying f is dropped: every score below is a ratio of expectations in
// which it cancels, so we never store or track it.
//
// Two facts carry the whole module:
//
//  * Pooling. The joint likelihood of several utterances sharing one z is the
//    product of their f's, i.e. the natural parameters add.
//
//  * Expectation. With z ~ N(0, I),
//
//      E[f(z)] = integral N(z|0,I) exp(a'z - z'Bz/2) dz
//              = exp( (1/2) a'(B+I)^{-1}a - (1/2) logdet(B+I) ),
//
//    which exists whenever B+I is positive definite (true for any PSD B).
//
// Likelihood ratios for "same speaker or not" questions are then ratios of
// such expectations over pooled meta-embeddings.

/// Spectral decomposition of a precision matrix Bbar that a whole set of
/// meta-embeddings shares up to a scalar factor. Holding it once lets
/// log_expectation run in O(d^2) per call instead of O(d^3).
struct SharedPrecisionBasis {
  Matrix bbar;     // d x d, symmetric PSD
  Vector eigvals;  // ascending, >= 0
  Matrix eigvecs;  // orthonormal columns

  int dim() const { return static_cast<int>(bbar.rows()); }

  /// Builds the basis from a symmetric PSD matrix. Eigenvalues that come out
  /// slightly negative from roundoff are clamped at zero; a clamp beyond
  /// floating-point noise is reported on stderr but still applied.
  static std::shared_ptr<const SharedPrecisionBasis> make(const Matrix& bbar_in) {
    Matrix bbar = checked_symmetric(bbar_in, "SharedPrecisionBasis");
    Eigen::SelfAdjointEigenSolver<Matrix> es(bbar);
    if (es.info() != Eigen::Success)
      throw NumericalError("SharedPrecisionBasis: eigendecomposition failed");
    Vector lam = es.eigenvalues();
    double lam_max = std::max(lam.maxCoeff(), 0.0);
    for (int k = 0; k < lam.size(); ++k) {
      if (lam[k] < 0.0) {
        if (lam[k] < -1e-10 * (1.0 + lam_max))
          std::cerr << "gmekit: warning: clamping eigenvalue " << lam[k]
                    << " of shared precision to zero\n";
        lam[k] = 0.0;
      }
    }
    auto basis = std::make_shared<SharedPrecisionBasis>();
    basis->bbar = std::move(bbar);
    basis->eigvals = std::move(lam);
    basis->eigvecs = es.eigenvectors();
    return basis;
  }
};

/// Precision of the form b * basis->bbar with b >= 0.
struct ScaledPrecision {
  double b = 0.0;
  std::shared_ptr<const SharedPrecisionBasis> basis;
};

/// Dense d x d precision, or a scalar multiple of a shared basis.
using PrecisionRep = std::variant<Matrix, ScaledPrecision>;

class GaussianMetaEmbedding {
 public:
  /// Dense form. The precision must be symmetric; positive semi-definiteness
  /// is not verified eagerly and surfaces as a NumericalError when an
  /// expectation is requested.
  GaussianMetaEmbedding(Vector a, Matrix precision)
      : a_(std::move(a)), prec_(checked_symmetric(precision, "GaussianMetaEmbedding")) {
    const Matrix& b = std::get<Matrix>(prec_);
    require(b.rows() == a_.size(),
            "GaussianMetaEmbedding: precision dimension does not match a");
  }

  /// Scaled form, precision = b * basis->bbar.
  GaussianMetaEmbedding(Vector a, double b,
                        std::shared_ptr<const SharedPrecisionBasis> basis)
      : a_(std::move(a)), prec_(ScaledPrecision{b, std::move(basis)}) {
    const ScaledPrecision& sp = std::get<ScaledPrecision>(prec_);
    require(sp.basis != nullptr, "GaussianMetaEmbedding: null basis");
    require(sp.b >= 0.0, "GaussianMetaEmbedding: scale factor must be >= 0");
    require(sp.basis->dim() == a_.size(),
            "GaussianMetaEmbedding: basis dimension does not match a");
  }

  /// The constant function f(z) = 1, i.e. a = 0, B = 0.
  static GaussianMetaEmbedding unit(int dim) {
    require(dim > 0, "GaussianMetaEmbedding: dimension must be positive");
    return GaussianMetaEmbedding(Vector::Zero(dim), Matrix::Zero(dim, dim));
  }

  int dim() const { return static_cast<int>(a_.size()); }
  const Vector& a() const { return a_; }
  const PrecisionRep& precision() const { return prec_; }

  bool is_scaled() const { return std::holds_alternative<ScaledPrecision>(prec_); }

  const ScaledPrecision& scaled() const { return std::get<ScaledPrecision>(prec_); }

  Matrix dense_precision() const {
    if (is_scaled()) {
      const ScaledPrecision& sp = scaled();
      return sp.b * sp.basis->bbar;
    }
    return std::get<Matrix>(prec_);
  }

  GaussianMetaEmbedding densified() const {
    return GaussianMetaEmbedding(a_, dense_precision());
  }

 private:
  Vector a_;
  PrecisionRep prec_;
};

/// Product of meta-embeddings sharing one identity variable: natural
/// parameters add. If every input is in scaled form on the same basis the
/// result stays scaled (sum of scale factors); otherwise the result is dense.
/// Scaled inputs on two different bases are rejected: the caller must densify
/// first, since silently mixing bases would defeat the shared-basis fast path.
inline GaussianMetaEmbedding pool(std::span<const GaussianMetaEmbedding> gmes) {
  require(!gmes.empty(), "pool: empty input");
  const int d = gmes[0].dim();
  const SharedPrecisionBasis* basis = nullptr;
  bool all_scaled = true;
  for (const auto& g : gmes) {
    require(g.dim() == d, "pool: dimension mismatch");
    if (g.is_scaled()) {
      const SharedPrecisionBasis* b = g.scaled().basis.get();
      require(basis == nullptr || basis == b,
              "pool: scaled inputs have different shared bases; densify first");
      basis = b;
    } else {
      all_scaled = false;
    }
  }
  Vector a = Vector::Zero(d);
  for (const auto& g : gmes) a += g.a();
  if (all_scaled) {
    double b = 0.0;
    for (const auto& g : gmes) b += g.scaled().b;
    return GaussianMetaEmbedding(std::move(a), b, gmes[0].scaled().basis);
  }
  Matrix prec = Matrix::Zero(d, d);
  for (const auto& g : gmes) prec += g.dense_precision();
  return GaussianMetaEmbedding(std::move(a), std::move(prec));
}

inline GaussianMetaEmbedding pool(std::initializer_list<GaussianMetaEmbedding> gmes) {
  std::vector<GaussianMetaEmbedding> v(gmes);
  return pool(std::span<const GaussianMetaEmbedding>(v));
}

/// log E[f(z)] under z ~ N(0, I); see the expectation identity above.
/// Dense form costs one Cholesky of B+I; scaled form reuses the basis
/// eigendecomposition: with B = b*Bbar and Bbar = V diag(lam) V',
///   log E = (1/2) sum_k at_k^2/(b lam_k + 1) - (1/2) sum_k log(b lam_k + 1),
/// where at = V'a.
inline double log_expectation(const GaussianMetaEmbedding& f) {
  if (f.is_scaled()) {
    const ScaledPrecision& sp = f.scaled();
    const Vector at = sp.basis->eigvecs.transpose() * f.a();
    double quad = 0.0, logdet = 0.0;
    for (int k = 0; k < at.size(); ++k) {
      double denom = sp.b * sp.basis->eigvals[k] + 1.0;
      quad += at[k] * at[k] / denom;
      logdet += std::log(denom);
    }
    return 0.5 * quad - 0.5 * logdet;
  }
  Matrix bp1 = f.dense_precision();
  bp1.diagonal().array() += 1.0;
  Eigen::LLT<Matrix> llt(bp1);
  if (llt.info() != Eigen::Success)
    throw NumericalError("log_expectation: B+I is not positive definite");
  double quad = f.a().dot(llt.solve(f.a()));
  double half_logdet = llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return 0.5 * quad - half_logdet;
}

/// log E[f(z) g(z)], the meta-embedding inner product.
inline double log_inner_product(const GaussianMetaEmbedding& f,
                                const GaussianMetaEmbedding& g) {
  return log_expectation(pool({f, g}));
}

/// Log likelihood ratio for "f and g share a speaker" against "f and g are
/// from independent speakers":
///   llr = log E[fg] - log E[f] - log E[g].
inline double llr_binary(const GaussianMetaEmbedding& f,
                         const GaussianMetaEmbedding& g) {
  return log_inner_product(f, g) - log_expectation(f) - log_expectation(g);
}

/// A partition of {0, ..., n-1} into disjoint non-empty subsets.
struct Partition {
  std::vector<std::vector<int>> subsets;

  static Partition of(std::vector<std::vector<int>> subsets) {
    Partition p;
    p.subsets = std::move(subsets);
    return p;
  }

  void validate(int n) const {
    require(n > 0, "Partition: n must be positive");
    std::vector<char> seen(n, 0);
    int total = 0;
    for (const auto& s : subsets) {
      require(!s.empty(), "Partition: empty subset");
      for (int i : s) {
        require(i >= 0 && i < n, "Partition: index out of range");
        require(!seen[i], "Partition: duplicate index");
        seen[i] = 1;
        ++total;
      }
    }
    require(total == n, "Partition: subsets do not cover all indices");
  }
};

/// Log likelihood ratio between two speaker-partition hypotheses over one
/// recording set: each subset of a partition pools into a single speaker,
/// and a partition's log likelihood is the sum of its pooled expectations.
inline double llr_partition(std::span<const GaussianMetaEmbedding> gmes,
                            const Partition& num, const Partition& den) {
  const int n = static_cast<int>(gmes.size());
  num.validate(n);
  den.validate(n);
  auto partition_loglik = [&](const Partition& p) {
    double total = 0.0;
    std::vector<GaussianMetaEmbedding> subset;
    for (const auto& s : p.subsets) {
      subset.clear();
      for (int i : s) subset.push_back(gmes[i]);
      total += log_expectation(pool(std::span<const GaussianMetaEmbedding>(subset)));
    }
    return total;
  };
  return partition_loglik(num) - partition_loglik(den);
}

}  // namespace gmekit
