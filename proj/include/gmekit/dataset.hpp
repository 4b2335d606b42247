// gmekit/dataset.hpp

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

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmekit/common.hpp"

namespace gmekit {

/// A set of labeled utterance vectors: one row per utterance.
struct LabeledDataset {
  Matrix vectors;  // n x D
  std::vector<std::string> utt_ids;
  std::vector<std::string> speaker_ids;

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }

  void validate() const {
    require(vectors.rows() > 0 && vectors.cols() > 0, "LabeledDataset: empty");
    require(utt_ids.size() == static_cast<size_t>(vectors.rows()) &&
                speaker_ids.size() == static_cast<size_t>(vectors.rows()),
            "LabeledDataset: id count does not match row count");
    std::unordered_map<std::string, int> seen;
    for (size_t i = 0; i < utt_ids.size(); ++i) {
      require(!utt_ids[i].empty() && !speaker_ids[i].empty(),
              "LabeledDataset: empty id");
      require(seen.emplace(utt_ids[i], static_cast<int>(i)).second,
              "LabeledDataset: duplicate utterance id '" + utt_ids[i] + "'");
    }
  }

  /// Speaker id -> row indices, in deterministic (sorted-by-speaker) order.
  std::map<std::string, std::vector<int>> speaker_groups() const {
    std::map<std::string, std::vector<int>> groups;
    for (int i = 0; i < size(); ++i) groups[speaker_ids[i]].push_back(i);
    return groups;
  }

  /// Row index per utterance id.
  std::unordered_map<std::string, int> utt_index() const {
    std::unordered_map<std::string, int> index;
    for (int i = 0; i < size(); ++i) index.emplace(utt_ids[i], i);
    return index;
  }

  /// Speaker label of each row as a dense integer (first-appearance order).
  std::vector<int> speaker_codes() const {
    std::vector<int> codes(size());
    std::unordered_map<std::string, int> map;
    for (int i = 0; i < size(); ++i) {
      auto [it, fresh] = map.emplace(speaker_ids[i], static_cast<int>(map.size()));
      (void)fresh;
      codes[i] = it->second;
    }
    return codes;
  }

  Vector mean_vector() const {
    require(vectors.rows() > 0, "LabeledDataset: empty");
    return vectors.colwise().mean().transpose();
  }

  LabeledDataset subset(const std::vector<int>& rows) const {
    require(!rows.empty(), "LabeledDataset: empty subset");
    LabeledDataset out;
    out.vectors.resize(static_cast<int>(rows.size()), dim());
    out.utt_ids.reserve(rows.size());
    out.speaker_ids.reserve(rows.size());
    for (size_t k = 0; k < rows.size(); ++k) {
      int i = rows[k];
      require(i >= 0 && i < size(), "LabeledDataset: subset index out of range");
      out.vectors.row(static_cast<int>(k)) = vectors.row(i);
      out.utt_ids.push_back(utt_ids[i]);
      out.speaker_ids.push_back(speaker_ids[i]);
    }
    return out;
  }
};

}  // namespace gmekit
