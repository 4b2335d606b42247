// tests/test_io.cpp

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

#include <filesystem>
#include <sstream>

#include "testing_util.hpp"

using namespace gmekit;
using gmekit::testing::random_model;

namespace {

LabeledDataset awkward_dataset() {
  LabeledDataset data;
  data.vectors.resize(4, 3);
  data.vectors << 1.0 / 3.0, -2.5e-13, 1e300,
      -1e-300, 0.0, 123456789.123456789,
      std::nextafter(1.0, 2.0), -7.0, 2.2250738585072014e-308,
      3.141592653589793, -1.0 / 7.0, 42.0;
  data.utt_ids = {"u1", "u2", "u3", "u4"};
  data.speaker_ids = {"a", "a", "b", "c"};
  return data;
}

std::filesystem::path temp_file(const std::string& stem) {
  return std::filesystem::temp_directory_path() / ("gmekit_test_" + stem);
}

}  // namespace

TEST_CASE("datasets round-trip exactly through text", "[io]") {
  LabeledDataset data = awkward_dataset();
  std::stringstream buf;
  write_dataset(buf, data);
  LabeledDataset back = read_dataset(buf);
  REQUIRE(back.utt_ids == data.utt_ids);
  REQUIRE(back.speaker_ids == data.speaker_ids);
  REQUIRE(back.vectors.rows() == data.vectors.rows());
  for (int i = 0; i < data.size(); ++i)
    for (int j = 0; j < data.dim(); ++j)
      REQUIRE(back.vectors(i, j) == data.vectors(i, j));
}

TEST_CASE("datasets round-trip through files", "[io]") {
  LabeledDataset data = awkward_dataset();
  auto path = temp_file("dataset.txt");
  write_dataset(path.string(), data);
  LabeledDataset back = read_dataset(path.string());
  REQUIRE(back.utt_ids == data.utt_ids);
  for (int i = 0; i < data.size(); ++i)
    for (int j = 0; j < data.dim(); ++j)
      REQUIRE(back.vectors(i, j) == data.vectors(i, j));
  std::filesystem::remove(path);
  REQUIRE_THROWS_AS(read_dataset(path.string()), IoError);
}

TEST_CASE("malformed dataset headers are rejected", "[io]") {
  auto fails = [](const std::string& text) {
    std::istringstream in(text);
    REQUIRE_THROWS_AS(read_dataset(in), IoError);
  };
  fails("");
  fails("WRONG-MAGIC 1 1 2\nu\ts\t0 1\n");
  fails("GMEKIT-VEC 2 1 2\nu\ts\t0 1\n");
  fails("GMEKIT-VEC 1 0 2\n");
  fails("GMEKIT-VEC 1 1 2 extra\nu\ts\t0 1\n");
  fails("GMEKIT-VEC 1 x 2\nu\ts\t0 1\n");
  // Truncated body.
  fails("GMEKIT-VEC 1 2 2\nu\ts\t0 1\n");
}

TEST_CASE("malformed dataset rows are rejected", "[io]") {
  auto fails = [](const std::string& text) {
    std::istringstream in(text);
    REQUIRE_THROWS_AS(read_dataset(in), IoError);
  };
  // Missing speaker field.
  fails("GMEKIT-VEC 1 1 2\nu\t0 1\n");
  // Wrong vector length.
  fails("GMEKIT-VEC 1 1 2\nu\ts\t0 1 2\n");
  fails("GMEKIT-VEC 1 1 2\nu\ts\t0\n");
  // Bad number.
  fails("GMEKIT-VEC 1 1 2\nu\ts\t0 1.2.3\n");
  // Duplicate utterance id and empty ids (contract errors become IoError).
  fails("GMEKIT-VEC 1 2 1\nu\ts\t0\nu\ts\t1\n");
  fails("GMEKIT-VEC 1 1 1\n\ts\t0\n");
  fails("GMEKIT-VEC 1 1 1\nu\t\t0\n");
}

TEST_CASE("dataset reading tolerates CRLF line endings", "[io]") {
  std::istringstream in("GMEKIT-VEC 1 1 2\r\nu\ts\t0.5 -1.5\r\n");
  LabeledDataset data = read_dataset(in);
  REQUIRE(data.utt_ids[0] == "u");
  REQUIRE(data.vectors(0, 1) == -1.5);
}

TEST_CASE("both model kinds round-trip exactly", "[io]") {
  Rng rng(400);
  HtPldaModel ht = random_model(5, 2, 2.75, rng);
  std::stringstream buf;
  write_model(buf, ht);
  ModelFile mf = read_model(buf);
  REQUIRE(mf.kind == "htplda");
  HtPldaModel back = mf.to_htplda();
  REQUIRE(back.nu == ht.nu);
  REQUIRE((back.f - ht.f).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((back.w - ht.w).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((back.mean - ht.mean).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THROWS_AS(mf.to_gplda(), std::invalid_argument);

  GPldaModel gp{ht.mean, ht.f, ht.w};
  std::stringstream buf2;
  write_model(buf2, gp);
  ModelFile mf2 = read_model(buf2);
  REQUIRE(mf2.kind == "gplda");
  REQUIRE(std::isinf(mf2.nu));
  GPldaModel gback = mf2.to_gplda();
  REQUIRE((gback.f - gp.f).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THROWS_AS(mf2.to_htplda(), std::invalid_argument);
}

TEST_CASE("a Gaussian heavy-tailed model writes its nu as inf", "[io]") {
  Rng rng(401);
  HtPldaModel ht = random_model(4, 2, std::numeric_limits<double>::infinity(), rng);
  std::stringstream buf;
  write_model(buf, ht);
  std::string header;
  std::getline(buf, header);
  REQUIRE(header == "GMEKIT-MODEL 1 htplda 4 2 inf");
  buf.seekg(0);
  ModelFile mf = read_model(buf);
  REQUIRE(std::isinf(mf.nu));
  REQUIRE(mf.to_htplda().gaussian());
}

TEST_CASE("malformed model files are rejected", "[io]") {
  Rng rng(402);
  HtPldaModel ht = random_model(4, 2, 2.0, rng);
  std::stringstream good;
  write_model(good, ht);
  std::string text = good.str();

  auto fails = [](std::string t) {
    std::istringstream in(t);
    REQUIRE_THROWS_AS(read_model(in), IoError);
  };
  fails("");
  fails("GMEKIT-MODEL 1 mystery 4 2 2\n");
  fails("GMEKIT-MODEL 2 htplda 4 2 2\n" + text.substr(text.find('\n') + 1));
  fails("GMEKIT-MODEL 1 htplda 2 4 2\n");   // d >= D
  fails("GMEKIT-MODEL 1 htplda 4 2 0\n");   // nu <= 0
  fails("GMEKIT-MODEL 1 htplda 4 2 -1\n");
  // Wrong block label.
  std::string swapped = text;
  swapped.replace(swapped.find("\nF\n"), 3, "\nG\n");
  fails(swapped);
  // Truncated.
  fails(text.substr(0, text.size() / 2));
}

TEST_CASE("enrollment maps parse models with one or more utterances", "[io]") {
  auto path = temp_file("enroll.txt");
  {
    std::ofstream out(path);
    out << "spk1\tu1 u2 u3\n";
    out << "spk2\tu9\n";
    out << "\n";
    out << "spk1\tu4\r\n";
  }
  auto models = read_enroll_map(path.string());
  REQUIRE(models.size() == 2);
  REQUIRE(models.at("spk1") ==
          std::vector<std::string>({"u1", "u2", "u3", "u4"}));
  REQUIRE(models.at("spk2") == std::vector<std::string>({"u9"}));
  std::filesystem::remove(path);
}

TEST_CASE("malformed enrollment maps are rejected", "[io]") {
  auto path = temp_file("enroll_bad.txt");
  auto fails = [&](const std::string& text) {
    std::ofstream(path) << text;
    REQUIRE_THROWS_AS(read_enroll_map(path.string()), IoError);
  };
  fails("");
  fails("only_one_field\n");
  fails("spk1\t\n");
  fails("spk1\tu1\tu2\n");  // three tab fields
  std::filesystem::remove(path);
}

TEST_CASE("trial lists parse with and without labels", "[io]") {
  auto path = temp_file("trials.txt");
  {
    std::ofstream out(path);
    out << "spk1\tu7\ttgt\n";
    out << "spk1\tu8\tnon\n";
    out << "spk2\tu7\n";
  }
  auto trials = read_trial_list(path.string(), false);
  REQUIRE(trials.size() == 3);
  REQUIRE(trials[0].label == TrialLabel::target);
  REQUIRE(trials[1].label == TrialLabel::nontarget);
  REQUIRE(trials[2].label == TrialLabel::unknown);
  // As a key the unlabeled line is an error.
  REQUIRE_THROWS_AS(read_trial_list(path.string(), true), IoError);

  std::ofstream(path) << "spk1\tu7\tmaybe\n";
  REQUIRE_THROWS_AS(read_trial_list(path.string(), false), IoError);
  std::ofstream(path) << "";
  REQUIRE_THROWS_AS(read_trial_list(path.string(), false), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("score files round-trip to displayed precision", "[io]") {
  ScoreSet scores;
  scores.entries = {{"m1", "t1", -3.0517578125},
                    {"m1", "t2", 0.4999999999999999},
                    {"m2", "t1", 1234.5678901234}};
  auto path = temp_file("scores.txt");
  write_scores(path.string(), scores);
  ScoreSet back = read_scores(path.string());
  REQUIRE(back.entries.size() == 3);
  for (size_t k = 0; k < 3; ++k) {
    REQUIRE(back.entries[k].model_id == scores.entries[k].model_id);
    REQUIRE(back.entries[k].test_utt == scores.entries[k].test_utt);
    REQUIRE(std::abs(back.entries[k].score - scores.entries[k].score) <=
            1e-11 * (1.0 + std::abs(scores.entries[k].score)));
  }
  std::ofstream(path) << "m1\tt1\n";
  REQUIRE_THROWS_AS(read_scores(path.string()), IoError);
  std::ofstream(path) << "m1\tt1\tnot_a_number\n";
  REQUIRE_THROWS_AS(read_scores(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("run configurations parse every known key", "[io]") {
  std::istringstream in(
      "# synthesis\n"
      "data_dim = 12\n"
      "speaker_dim = 3\n"
      "nu = 4.5\n"
      "n_speakers = 40   # inline comment\n"
      "utts_per_speaker = 6\n"
      "\n"
      "em_iters = 7\n"
      "min_divergence = true\n"
      "batch_side = 64\n"
      "learning_rate = 5e-4\n"
      "momentum = 0.8\n"
      "max_epochs = 9\n"
      "patience = 3\n"
      "cv_speaker_fraction = 0.2\n"
      "batches_per_epoch = 11\n"
      "cv_batches = 4\n"
      "target_weight = 0.35\n"
      "identity_noise_reparam = true\n"
      "enroll_mode = pool_gme\n"
      "metrics = eer, avg_min_dcf, min_dcf@0.01\n"
      "seed = 123\n");
  RunConfig cfg = RunConfig::parse(in);
  REQUIRE(cfg.data_dim == 12);
  REQUIRE(cfg.speaker_dim == 3);
  REQUIRE(cfg.nu == 4.5);
  REQUIRE(cfg.n_speakers == 40);
  REQUIRE(cfg.utts_per_speaker == 6);
  REQUIRE(cfg.em_iters == 7);
  REQUIRE(cfg.min_divergence);
  REQUIRE(cfg.train.batch_side == 64);
  REQUIRE(cfg.train.learning_rate == 5e-4);
  REQUIRE(cfg.train.momentum == 0.8);
  REQUIRE(cfg.train.max_epochs == 9);
  REQUIRE(cfg.train.patience == 3);
  REQUIRE(cfg.train.cv_speaker_fraction == 0.2);
  REQUIRE(cfg.train.batches_per_epoch == 11);
  REQUIRE(cfg.train.cv_batches == 4);
  REQUIRE(cfg.train.target_weight == 0.35);
  REQUIRE(cfg.train.identity_noise_reparam);
  REQUIRE(cfg.enroll_mode == EnrollMode::pool_gme);
  REQUIRE(cfg.metrics ==
          std::vector<std::string>({"eer", "avg_min_dcf", "min_dcf@0.01"}));
  REQUIRE(cfg.seed == 123);
  REQUIRE(cfg.train.seed == 123);
}

TEST_CASE("run configurations reject unknown keys and bad values", "[io]") {
  auto fails = [](const std::string& text) {
    std::istringstream in(text);
    REQUIRE_THROWS_AS(RunConfig::parse(in), IoError);
  };
  fails("data_dmi = 12\n");     // typo must not fall back to a default
  fails("data_dim 12\n");       // missing '='
  fails("data_dim =\n");
  fails("data_dim = 1\n");      // below minimum
  fails("min_divergence = yes\n");
  fails("metrics = eer, dcf\n");
  fails("metrics = \n");
  fails("nu = -2\n");
  fails("em_iters = many\n");
  std::istringstream bad_mode("enroll_mode = mean\n");
  REQUIRE_THROWS_AS(RunConfig::parse(bad_mode), std::invalid_argument);
}

TEST_CASE("run configuration defaults survive an empty file", "[io]") {
  std::istringstream in("# nothing but comments\n\n");
  RunConfig cfg = RunConfig::parse(in);
  REQUIRE(cfg.data_dim == 50);
  REQUIRE(cfg.speaker_dim == 10);
  REQUIRE(cfg.nu == 2.0);
  REQUIRE(cfg.metrics == std::vector<std::string>({"eer", "avg_min_dcf"}));
  REQUIRE(cfg.enroll_mode == EnrollMode::average_vectors);
}
