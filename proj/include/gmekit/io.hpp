// gmekit/io.hpp

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

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "gmekit/common.hpp"
#include "gmekit/dataset.hpp"
#include "gmekit/discrim.hpp"
#include "gmekit/eval.hpp"
#include "gmekit/gplda.hpp"
#include "gmekit/htplda.hpp"

namespace gmekit {

// Plain-text formats. Datasets:
//
//   GMEKIT-VEC 1 <n> <D>
//   <utt_id>\t<speaker_id>\t<v1> <v2> ... <vD>     (n lines)
//
// Models:
//
//   GMEKIT-MODEL 1 <gplda|htplda> <D> <d> <nu|inf>
//   mean                                            (1 row of D values)
//   F                                               (D rows of d values)
//   W                                               (D rows of D values)
//
// Floating-point values are written with enough digits to round-trip
// exactly. Scores are one trial per line, `model\ttest\tscore`; keys are
// `model\ttest\ttgt|non`.

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline double parse_double(const std::string& s, const std::string& what) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw IoError(what + ": bad number '" + s + "'");
  return v;
}

inline long parse_long(const std::string& s, const std::string& what) {
  errno = 0;
  char* end = nullptr;
  long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw IoError(what + ": bad integer '" + s + "'");
  return v;
}

inline std::vector<double> parse_row(const std::string& line, int expect,
                                     const std::string& what) {
  std::vector<double> out;
  out.reserve(expect);
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(parse_double(tok, what));
  if (static_cast<int>(out.size()) != expect)
    throw IoError(what + ": expected " + std::to_string(expect) +
                  " values, got " + std::to_string(out.size()));
  return out;
}

inline std::string next_line(std::istream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line)) throw IoError(what + ": unexpected end of file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

inline void write_matrix_rows(std::ostream& out, const Matrix& m) {
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ' ';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

inline Matrix read_matrix_rows(std::istream& in, int rows, int cols,
                               const std::string& what) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    std::vector<double> row = parse_row(next_line(in, what), cols, what);
    for (int j = 0; j < cols; ++j) m(i, j) = row[j];
  }
  return m;
}

}  // namespace detail

// ----------------------------------------------------------------- datasets

inline void write_dataset(std::ostream& out, const LabeledDataset& data) {
  data.validate();
  out << "GMEKIT-VEC 1 " << data.size() << ' ' << data.dim() << '\n';
  for (int i = 0; i < data.size(); ++i) {
    out << data.utt_ids[i] << '\t' << data.speaker_ids[i] << '\t';
    for (int j = 0; j < data.dim(); ++j) {
      if (j) out << ' ';
      out << format_double(data.vectors(i, j));
    }
    out << '\n';
  }
}

inline void write_dataset(const std::string& path, const LabeledDataset& data) {
  auto out = detail::open_out(path);
  write_dataset(out, data);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline LabeledDataset read_dataset(std::istream& in,
                                   const std::string& what = "dataset") {
  std::istringstream header(detail::next_line(in, what));
  std::string magic;
  long version = 0, n = 0, dim = 0;
  std::string vtok, ntok, dtok, extra;
  header >> magic >> vtok >> ntok >> dtok;
  if (!header || magic != "GMEKIT-VEC" || (header >> extra))
    throw IoError(what + ": bad header (expected 'GMEKIT-VEC 1 <n> <D>')");
  version = detail::parse_long(vtok, what);
  n = detail::parse_long(ntok, what);
  dim = detail::parse_long(dtok, what);
  if (version != 1) throw IoError(what + ": unsupported version");
  if (n <= 0 || dim <= 0) throw IoError(what + ": bad counts in header");
  LabeledDataset data;
  data.vectors.resize(n, dim);
  data.utt_ids.reserve(n);
  data.speaker_ids.reserve(n);
  for (long i = 0; i < n; ++i) {
    std::string line = detail::next_line(in, what);
    auto fields = detail::split_tabs(line);
    if (fields.size() != 3)
      throw IoError(what + ": expected 3 tab-separated fields on line " +
                    std::to_string(i + 2));
    std::vector<double> row = detail::parse_row(fields[2], static_cast<int>(dim), what);
    for (long j = 0; j < dim; ++j) data.vectors(i, j) = row[j];
    data.utt_ids.push_back(fields[0]);
    data.speaker_ids.push_back(fields[1]);
  }
  try {
    data.validate();
  } catch (const std::invalid_argument& e) {
    throw IoError(what + ": " + e.what());
  }
  return data;
}

inline LabeledDataset read_dataset(const std::string& path) {
  auto in = detail::open_in(path);
  return read_dataset(in, path);
}

// ------------------------------------------------------------------- models

struct ModelFile {
  std::string kind;  // "gplda" or "htplda"
  double nu = std::numeric_limits<double>::infinity();
  Vector mean;
  Matrix f, w;

  GPldaModel to_gplda() const {
    require(kind == "gplda", "ModelFile: not a gplda model");
    GPldaModel m{mean, f, w};
    m.validate();
    return m;
  }

  HtPldaModel to_htplda() const {
    require(kind == "htplda", "ModelFile: not an htplda model");
    HtPldaModel m;
    m.f = f;
    m.w = w;
    m.nu = nu;
    m.mean = mean;
    m.validate();
    return m;
  }
};

namespace detail {

inline void write_model_file(std::ostream& out, const std::string& kind,
                             const Vector& mean, const Matrix& f,
                             const Matrix& w, double nu) {
  out << "GMEKIT-MODEL 1 " << kind << ' ' << f.rows() << ' ' << f.cols() << ' '
      << (std::isinf(nu) ? std::string("inf") : format_double(nu)) << '\n';
  out << "mean\n";
  write_matrix_rows(out, mean.transpose());
  out << "F\n";
  write_matrix_rows(out, f);
  out << "W\n";
  write_matrix_rows(out, w);
}

}  // namespace detail

inline void write_model(std::ostream& out, const GPldaModel& model) {
  model.validate();
  detail::write_model_file(out, "gplda", model.mean, model.f, model.w,
                           std::numeric_limits<double>::infinity());
}

inline void write_model(std::ostream& out, const HtPldaModel& model) {
  model.validate();
  detail::write_model_file(out, "htplda", model.mean, model.f, model.w, model.nu);
}

template <typename ModelT>
inline void write_model(const std::string& path, const ModelT& model) {
  auto out = detail::open_out(path);
  write_model(out, model);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline ModelFile read_model(std::istream& in,
                            const std::string& what = "model") {
  std::istringstream header(detail::next_line(in, what));
  std::string magic, kind, vtok, dtok, stok, nutok, extra;
  header >> magic >> vtok >> kind >> dtok >> stok >> nutok;
  if (!header || magic != "GMEKIT-MODEL" || (header >> extra))
    throw IoError(what +
                  ": bad header (expected 'GMEKIT-MODEL 1 <kind> <D> <d> <nu>')");
  if (detail::parse_long(vtok, what) != 1)
    throw IoError(what + ": unsupported version");
  if (kind != "gplda" && kind != "htplda")
    throw IoError(what + ": unknown model kind '" + kind + "'");
  long ddim = detail::parse_long(dtok, what);
  long d = detail::parse_long(stok, what);
  if (ddim <= 0 || d <= 0 || d >= ddim)
    throw IoError(what + ": bad dimensions in header");
  ModelFile mf;
  mf.kind = kind;
  mf.nu = detail::parse_double(nutok, what);
  if (!(mf.nu > 0.0)) throw IoError(what + ": nu must be positive");
  if (detail::next_line(in, what) != "mean")
    throw IoError(what + ": expected 'mean' block");
  mf.mean = detail::read_matrix_rows(in, 1, static_cast<int>(ddim), what)
                .row(0)
                .transpose();
  if (detail::next_line(in, what) != "F")
    throw IoError(what + ": expected 'F' block");
  mf.f = detail::read_matrix_rows(in, static_cast<int>(ddim),
                                  static_cast<int>(d), what);
  if (detail::next_line(in, what) != "W")
    throw IoError(what + ": expected 'W' block");
  mf.w = detail::read_matrix_rows(in, static_cast<int>(ddim),
                                  static_cast<int>(ddim), what);
  return mf;
}

inline ModelFile read_model(const std::string& path) {
  auto in = detail::open_in(path);
  return read_model(in, path);
}

// ----------------------------------------------------- trials, scores, keys

/// Enrollment map: each line `model_id\tutt_id[ utt_id ...]`. Repeated model
/// ids append.
inline std::map<std::string, std::vector<std::string>> read_enroll_map(
    const std::string& path) {
  auto in = detail::open_in(path);
  std::map<std::string, std::vector<std::string>> models;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 2)
      throw IoError(path + ": expected 'model<TAB>utt [utt ...]'");
    std::istringstream ss(fields[1]);
    std::string utt;
    auto& list = models[fields[0]];
    while (ss >> utt) list.push_back(utt);
    if (list.empty()) throw IoError(path + ": model with no utterances");
  }
  if (models.empty()) throw IoError(path + ": no enrollment entries");
  return models;
}

/// Trial list: `model_id\ttest_utt[\ttgt|non]`.
inline std::vector<TrialSet::Trial> read_trial_list(const std::string& path,
                                                    bool require_labels) {
  auto in = detail::open_in(path);
  std::vector<TrialSet::Trial> trials;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 2 && fields.size() != 3)
      throw IoError(path + ": expected 2 or 3 tab-separated fields");
    if (require_labels && fields.size() != 3)
      throw IoError(path + ": key lines need a tgt|non label");
    TrialSet::Trial t;
    t.model_id = fields[0];
    t.test_utt = fields[1];
    if (fields.size() == 3) {
      if (fields[2] == "tgt")
        t.label = TrialLabel::target;
      else if (fields[2] == "non")
        t.label = TrialLabel::nontarget;
      else
        throw IoError(path + ": bad label '" + fields[2] + "' (want tgt|non)");
    }
    trials.push_back(std::move(t));
  }
  if (trials.empty()) throw IoError(path + ": no trials");
  return trials;
}

inline void write_scores(const std::string& path, const ScoreSet& scores) {
  auto out = detail::open_out(path);
  char buf[48];
  for (const auto& e : scores.entries) {
    std::snprintf(buf, sizeof(buf), "%.12g", e.score);
    out << e.model_id << '\t' << e.test_utt << '\t' << buf << '\n';
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline ScoreSet read_scores(const std::string& path) {
  auto in = detail::open_in(path);
  ScoreSet scores;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 3)
      throw IoError(path + ": expected 'model<TAB>test<TAB>score'");
    scores.entries.push_back(
        {fields[0], fields[1], detail::parse_double(fields[2], path)});
  }
  if (scores.entries.empty()) throw IoError(path + ": no scores");
  return scores;
}

// --------------------------------------------------------------- run config

/// Flat `key = value` run configuration. Unknown keys are rejected so typos
/// cannot silently fall back to defaults. '#' starts a comment.
struct RunConfig {
  // synthesis
  int data_dim = 50;
  int speaker_dim = 10;
  double nu = 2.0;
  int n_speakers = 1000;
  int utts_per_speaker = 10;
  // em
  int em_iters = 20;
  bool min_divergence = false;
  // sgd
  TrainConfig train;
  // scoring / evaluation
  EnrollMode enroll_mode = EnrollMode::average_vectors;
  std::vector<std::string> metrics = {"eer", "avg_min_dcf"};
  uint64_t seed = 0;

  static RunConfig parse(std::istream& in, const std::string& what = "config");
  static RunConfig parse_file(const std::string& path) {
    auto in = detail::open_in(path);
    return parse(in, path);
  }
};

inline RunConfig RunConfig::parse(std::istream& in, const std::string& what) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      size_t e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw IoError(what + ":" + std::to_string(lineno) +
                    ": expected 'key = value'");
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty() || value.empty())
      throw IoError(what + ":" + std::to_string(lineno) + ": empty key or value");

    auto as_int = [&](int lo) {
      long v = detail::parse_long(value, what);
      if (v < lo || v > std::numeric_limits<int>::max())
        throw IoError(what + ": value out of range for '" + key + "'");
      return static_cast<int>(v);
    };
    auto as_bool = [&]() {
      if (value == "true") return true;
      if (value == "false") return false;
      throw IoError(what + ": expected true|false for '" + key + "'");
    };

    if (key == "data_dim") cfg.data_dim = as_int(2);
    else if (key == "speaker_dim") cfg.speaker_dim = as_int(1);
    else if (key == "nu") cfg.nu = detail::parse_double(value, what);
    else if (key == "n_speakers") cfg.n_speakers = as_int(1);
    else if (key == "utts_per_speaker") cfg.utts_per_speaker = as_int(1);
    else if (key == "em_iters") cfg.em_iters = as_int(1);
    else if (key == "min_divergence") cfg.min_divergence = as_bool();
    else if (key == "batch_side") cfg.train.batch_side = as_int(2);
    else if (key == "learning_rate")
      cfg.train.learning_rate = detail::parse_double(value, what);
    else if (key == "momentum")
      cfg.train.momentum = detail::parse_double(value, what);
    else if (key == "max_epochs") cfg.train.max_epochs = as_int(1);
    else if (key == "patience") cfg.train.patience = as_int(1);
    else if (key == "cv_speaker_fraction")
      cfg.train.cv_speaker_fraction = detail::parse_double(value, what);
    else if (key == "batches_per_epoch") cfg.train.batches_per_epoch = as_int(1);
    else if (key == "cv_batches") cfg.train.cv_batches = as_int(1);
    else if (key == "target_weight")
      cfg.train.target_weight = detail::parse_double(value, what);
    else if (key == "identity_noise_reparam")
      cfg.train.identity_noise_reparam = as_bool();
    else if (key == "enroll_mode") cfg.enroll_mode = parse_enroll_mode(value);
    else if (key == "metrics") {
      cfg.metrics.clear();
      std::istringstream ms(value);
      std::string tok;
      while (std::getline(ms, tok, ',')) {
        std::string m;
        for (char ch : tok)
          if (ch != ' ' && ch != '\t') m.push_back(ch);
        if (m != "eer" && m != "avg_min_dcf" && m != "min_dcf@0.01" &&
            m != "min_dcf@0.005")
          throw IoError(what + ": unknown metric '" + m + "'");
        cfg.metrics.push_back(m);
      }
      if (cfg.metrics.empty()) throw IoError(what + ": empty metrics list");
    } else if (key == "seed") {
      cfg.seed = static_cast<uint64_t>(detail::parse_long(value, what));
      cfg.train.seed = cfg.seed;
    } else {
      throw IoError(what + ": unknown configuration key '" + key + "'");
    }
  }
  if (!(cfg.nu > 0.0)) throw IoError(what + ": nu must be positive");
  return cfg;
}

}  // namespace gmekit
