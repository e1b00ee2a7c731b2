#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "saga/config.hpp"
#include "saga/corpus.hpp"
#include "saga/tensor.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = saga::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  const auto b = saga::read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "saga_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.cfg") << R"([synth]
num_ids = 12
images_per_id_cam = 3
grid_h = 4
grid_w = 4
dim = 8
proj_dim = 4
num_parts = 2
[model]
text_dim = 8
text_blocks = 1
text_heads = 2
text_max_len = 8
anchors_k = 3
context_len = 2
domain_anchors_m = 2
domain_hidden = 6
refine_heads = 2
[train]
p = 3
k_img = 2
epochs = 2
checkpoint_every = 1
[occlusion]
coverages = [0, 0.4, 0.8]
seeds = [0, 1]
)";
    ASSERT_EQ(run({"gen-synth", "--config", path("tiny.cfg"), "--out", path("c.sfc")}).code, 0);
    ASSERT_EQ(run({"train", "--corpus", path("c.sfc"), "--config", path("tiny.cfg"), "--out", path("ck")}).code, 0);
  }
  static std::string path(const std::string& name) { return (dir_ / name).string(); }
  static fs::path dir_;
};
fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, FlopsPrintsTheCount) {
  const Result r = run({"flops", "--n", "128", "--anchors", "27", "--dim", "768"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "5308416\n");
  EXPECT_EQ(run({"flops", "--n", "0", "--anchors", "27", "--dim", "768"}).code, 1);
}

TEST_F(Cli, UsageErrorsExitTwoWithHelp) {
  Result r = run({"flops", "--n", "1", "--anchors", "1", "--dim", "1", "--bogus"});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.err, "--bogus"));
  EXPECT_TRUE(contains(r.err, "Usage"));
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"flops", "--n", "1"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--module", "nope"}).code, 2);
  r = run({"sweep-occlusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--coverages", "0,x"});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.err, "not a number"));
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(Cli, BothFusionWeightsZeroIsADomainError) {
  const Result r = run({"eval", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--wr", "0", "--wi", "0"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "both fusion weights zero"));
}

TEST_F(Cli, GradcheckReportsEveryModule) {
  const Result r = run({"gradcheck"});
  EXPECT_EQ(r.code, 0) << r.out;
  for (const char* m : {"ops", "anchors", "refine", "objective"}) EXPECT_TRUE(contains(r.out, m));
  EXPECT_FALSE(contains(r.out, "FAIL"));
  EXPECT_EQ(run({"gradcheck", "--module", "refine"}).code, 0);
}

TEST_F(Cli, GenSynthWritesCorpusAndSidecar) {
  const auto meta = nlohmann::json::parse(slurp(saga::sidecar_path(path("c.sfc"))));
  EXPECT_EQ(meta["version"], saga::kVersion);
  EXPECT_EQ(meta["config"]["synth"]["num_ids"], 12);
  EXPECT_EQ(run({"validate", "--corpus", path("c.sfc")}).code, 0);

  ASSERT_EQ(run({"gen-synth", "--config", path("tiny.cfg"), "--out", path("c2.sfc")}).code, 0);
  EXPECT_EQ(slurp(path("c.sfc")), slurp(path("c2.sfc")));
  ASSERT_EQ(run({"gen-synth", "--config", path("tiny.cfg"), "--out", path("c3.sfc"), "--seed", "99"}).code, 0);
  EXPECT_NE(slurp(path("c.sfc")), slurp(path("c3.sfc")));
}

TEST_F(Cli, ValidateRejectsBrokenCorpus) {
  auto bytes = saga::read_file_bytes(path("c.sfc"));
  bytes.resize(bytes.size() - 5);
  saga::write_file_bytes(path("broken.sfc"), bytes);
  const Result r = run({"validate", "--corpus", path("broken.sfc")});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "byte offset"));
}

TEST_F(Cli, BadConfigNamesTheLine) {
  std::ofstream(dir_ / "bad.cfg") << "[train]\nepochs = 2\nwarmup = 3\n";
  const Result r = run({"train", "--corpus", path("c.sfc"), "--config", path("bad.cfg"), "--out", path("x")});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "line 3"));
}

TEST_F(Cli, TrainWritesCheckpointsAndLog) {
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "epoch-001" / "params.swt"));
  const std::string log = slurp(dir_ / "ck" / "train_log.csv");
  EXPECT_EQ(log.rfind("# saga ", 0), 0u);
  EXPECT_TRUE(contains(log, "# config {"));
  ASSERT_EQ(run({"train", "--corpus", path("c.sfc"), "--config", path("tiny.cfg"), "--out", path("ck_again")}).code, 0);
  EXPECT_EQ(slurp(dir_ / "ck" / "params.swt"), slurp(dir_ / "ck_again" / "params.swt"));
  EXPECT_EQ(slurp(dir_ / "ck" / "manifest.json"), slurp(dir_ / "ck_again" / "manifest.json"));
  EXPECT_EQ(log, slurp(dir_ / "ck_again" / "train_log.csv"));
}

TEST_F(Cli, OutputsEmbedConfigAndAreThreadIndependent) {
  const std::vector<std::vector<std::string>> commands = {
      {"eval", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--variant", "fused"},
      {"sweep-occlusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck")},
      {"sweep-fusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--ratios", "0,1,inf"},
      {"export-attention", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--image-index", "30"},
  };
  for (const auto& base : commands) {
    std::string first;
    for (const char* threads : {"1", "3", "1"}) {
      auto args = base;
      args.insert(args.end(), {"--threads", threads, "--out", path("out.txt")});
      const Result r = run(args);
      ASSERT_EQ(r.code, 0) << base[0] << ": " << r.err;
      const std::string text = slurp(path("out.txt"));
      EXPECT_TRUE(contains(text, saga::kVersion)) << base[0];
      EXPECT_TRUE(contains(text, "\"num_ids\":12") || contains(text, "\"num_ids\": 12")) << base[0];
      if (first.empty()) first = text;
      EXPECT_EQ(text, first) << base[0] << " threads " << threads;
    }
  }
}

TEST_F(Cli, EvalJsonCarriesTheResult) {
  ASSERT_EQ(run({"eval", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--variant", "cls_only", "--out",
                 path("e.json")})
                .code,
            0);
  const auto j = nlohmann::json::parse(slurp(path("e.json")));
  EXPECT_EQ(j["variant"], "cls_only");
  EXPECT_EQ(j["result"]["cmc"].size(), 10u);
  EXPECT_GT(j["result"]["num_valid_queries"].get<int>(), 0);
  EXPECT_EQ(j["config"]["train"]["epochs"], 2);
}

TEST_F(Cli, SweepOcclusionUsesTheRequestedGrid) {
  const Result r = run({"sweep-occlusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--kinds",
                        "upper_half", "--coverages", "0.5", "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "upper_half,0.5,4,fused"));
  EXPECT_FALSE(contains(r.out, "lower_half,"));
  EXPECT_EQ(run({"sweep-occlusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--seeds", "1",
                 "--seed", "2"})
                .code,
            2);
  EXPECT_EQ(run({"sweep-occlusion", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--coverages", "0.9"})
                .code,
            1);
}

TEST_F(Cli, ExportAttentionHasOneLinePerPatch) {
  const Result r = run({"export-attention", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--image-index", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t data = 0;
  std::istringstream is(r.out);
  for (std::string line; std::getline(is, line);)
    if (!line.empty() && line[0] != '#' && line.rfind("row,", 0) != 0) ++data;
  EXPECT_EQ(data, 16u);
  EXPECT_EQ(run({"export-attention", "--corpus", path("c.sfc"), "--checkpoint", path("ck"), "--image-index", "999"})
                .code,
            1);
}
