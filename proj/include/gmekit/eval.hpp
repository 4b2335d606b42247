// gmekit/eval.hpp

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
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmekit/common.hpp"
#include "gmekit/dataset.hpp"
#include "gmekit/gme.hpp"
#include "gmekit/htplda.hpp"

namespace gmekit {

enum class TrialLabel { target, nontarget, unknown };

/// Verification trials: enrollment models (each a set of utterances) scored
/// against single test utterances.
struct TrialSet {
  struct Trial {
    std::string model_id;
    std::string test_utt;
    TrialLabel label = TrialLabel::unknown;
  };
  std::map<std::string, std::vector<std::string>> models;  // model -> enrolled utts
  std::vector<Trial> trials;

  void validate(const LabeledDataset& data) const {
    auto index = data.utt_index();
    require(!trials.empty(), "TrialSet: no trials");
    for (const auto& [id, utts] : models) {
      require(!utts.empty(), "TrialSet: model '" + id + "' has no enrollment");
      for (const auto& u : utts)
        require(index.count(u), "TrialSet: unknown enrollment utterance '" + u + "'");
    }
    for (const auto& t : trials) {
      require(models.count(t.model_id),
              "TrialSet: trial references unknown model '" + t.model_id + "'");
      require(index.count(t.test_utt),
              "TrialSet: unknown test utterance '" + t.test_utt + "'");
    }
  }
};

/// How multi-utterance enrollments are combined: average the raw vectors and
/// extract once, or extract per utterance and pool the meta-embeddings.
enum class EnrollMode { average_vectors, pool_gme };

inline EnrollMode parse_enroll_mode(const std::string& s) {
  if (s == "average_vectors") return EnrollMode::average_vectors;
  if (s == "pool_gme") return EnrollMode::pool_gme;
  throw std::invalid_argument("unknown enroll mode '" + s +
                              "' (expected average_vectors or pool_gme)");
}

struct ScoreSet {
  struct Entry {
    std::string model_id;
    std::string test_utt;
    double score = 0.0;
  };
  std::vector<Entry> entries;
};

inline ScoreSet score_trials(const HtPldaModel& model, const LabeledDataset& data,
                             const TrialSet& trials, EnrollMode mode) {
  data.validate();
  trials.validate(data);
  HtPldaDerived der = derive(model);
  auto index = data.utt_index();
  auto row_vec = [&](const std::string& utt) {
    return Vector(data.vectors.row(index.at(utt)).transpose());
  };

  // One meta-embedding per enrollment model.
  std::unordered_map<std::string, GaussianMetaEmbedding> enrolled;
  enrolled.reserve(trials.models.size());
  for (const auto& [id, utts] : trials.models) {
    if (mode == EnrollMode::average_vectors) {
      Vector avg = Vector::Zero(data.dim());
      for (const auto& u : utts) avg += row_vec(u);
      avg /= static_cast<double>(utts.size());
      enrolled.emplace(id, extract(model, der, avg));
    } else {
      std::vector<GaussianMetaEmbedding> parts;
      parts.reserve(utts.size());
      for (const auto& u : utts) parts.push_back(extract(model, der, row_vec(u)));
      enrolled.emplace(id, pool(std::span<const GaussianMetaEmbedding>(parts)));
    }
  }

  // Test meta-embeddings, each extracted once.
  std::unordered_map<std::string, GaussianMetaEmbedding> tested;
  for (const auto& t : trials.trials)
    if (!tested.count(t.test_utt))
      tested.emplace(t.test_utt, extract(model, der, row_vec(t.test_utt)));

  ScoreSet out;
  out.entries.reserve(trials.trials.size());
  for (const auto& t : trials.trials)
    out.entries.push_back(
        {t.model_id, t.test_utt,
         llr_binary(enrolled.at(t.model_id), tested.at(t.test_utt))});
  return out;
}

namespace detail {

// Decision rule: accept iff score > threshold. Candidate thresholds are the
// midpoints between adjacent distinct scores plus -inf and +inf; error rates
// are constant between adjacent scores, so these corners see every
// achievable operating point.
inline std::vector<double> candidate_thresholds(std::vector<double> all) {
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<double> th;
  th.reserve(all.size() + 1);
  th.push_back(-std::numeric_limits<double>::infinity());
  for (size_t i = 0; i + 1 < all.size(); ++i)
    th.push_back(0.5 * (all[i] + all[i + 1]));
  th.push_back(std::numeric_limits<double>::infinity());
  return th;
}

// P_miss and P_fa at each candidate threshold, via sorted score arrays.
inline void error_curve(const std::vector<double>& tgt,
                        const std::vector<double>& non,
                        std::vector<double>* th, std::vector<double>* pmiss,
                        std::vector<double>* pfa) {
  require(!tgt.empty() && !non.empty(),
          "error_curve: need both target and nontarget scores");
  std::vector<double> all(tgt);
  all.insert(all.end(), non.begin(), non.end());
  *th = candidate_thresholds(std::move(all));
  std::vector<double> st(tgt), sn(non);
  std::sort(st.begin(), st.end());
  std::sort(sn.begin(), sn.end());
  pmiss->resize(th->size());
  pfa->resize(th->size());
  for (size_t k = 0; k < th->size(); ++k) {
    double t = (*th)[k];
    auto miss = std::upper_bound(st.begin(), st.end(), t) - st.begin();
    auto acc = sn.end() - std::upper_bound(sn.begin(), sn.end(), t);
    (*pmiss)[k] = static_cast<double>(miss) / st.size();
    (*pfa)[k] = static_cast<double>(acc) / sn.size();
  }
}

}  // namespace detail

/// Equal error rate in percent. P_miss - P_fa is non-decreasing in the
/// threshold and spans [-1, 1]; the EER is read off at its zero crossing,
/// linearly interpolating between the two bracketing operating points.
inline double eer_percent(const std::vector<double>& tgt,
                          const std::vector<double>& non) {
  std::vector<double> th, pmiss, pfa;
  detail::error_curve(tgt, non, &th, &pmiss, &pfa);
  for (size_t k = 0; k < th.size(); ++k) {
    if (pmiss[k] >= pfa[k]) {
      if (pmiss[k] == pfa[k] || k == 0) return 100.0 * pmiss[k];
      double m0 = pmiss[k - 1], f0 = pfa[k - 1];
      double dm = pmiss[k] - m0, df = pfa[k] - f0;
      double alpha = (f0 - m0) / (dm - df);
      return 100.0 * (m0 + alpha * dm);
    }
  }
  return 100.0;  // unreachable: pmiss = 1, pfa = 0 at +inf
}

/// Minimum normalized detection cost at the given target prior:
///   min over thresholds of [p P_miss + (1-p) P_fa] / min(p, 1-p).
inline double min_dcf(const std::vector<double>& tgt,
                      const std::vector<double>& non, double p_target) {
  require(p_target > 0.0 && p_target < 1.0, "min_dcf: prior must be in (0, 1)");
  std::vector<double> th, pmiss, pfa;
  detail::error_curve(tgt, non, &th, &pmiss, &pfa);
  double best = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < th.size(); ++k)
    best = std::min(best, p_target * pmiss[k] + (1.0 - p_target) * pfa[k]);
  return best / std::min(p_target, 1.0 - p_target);
}

/// Average of the minimum detection costs at priors 0.01 and 0.005.
inline double avg_min_dcf(const std::vector<double>& tgt,
                          const std::vector<double>& non) {
  return 0.5 * (min_dcf(tgt, non, 0.01) + min_dcf(tgt, non, 0.005));
}

/// Splits scores into target / nontarget lists according to a keyed TrialSet.
/// Every score must have a labeled key entry.
inline void split_by_label(const ScoreSet& scores, const TrialSet& key,
                           std::vector<double>* tgt, std::vector<double>* non) {
  std::map<std::pair<std::string, std::string>, TrialLabel> labels;
  for (const auto& t : key.trials)
    labels[{t.model_id, t.test_utt}] = t.label;
  tgt->clear();
  non->clear();
  for (const auto& e : scores.entries) {
    auto it = labels.find({e.model_id, e.test_utt});
    require(it != labels.end(), "split_by_label: no key entry for trial " +
                                    e.model_id + " / " + e.test_utt);
    require(it->second != TrialLabel::unknown,
            "split_by_label: unlabeled trial in key");
    (it->second == TrialLabel::target ? tgt : non)->push_back(e.score);
  }
}

/// Compact one-line results row.
inline std::string format_condition_row(double avg_dcf, double eer_pct) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "C_min %.3f EER %.2f", avg_dcf, eer_pct);
  return buf;
}

}  // namespace gmekit
