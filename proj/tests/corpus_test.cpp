#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "saga/corpus.hpp"
#include "saga/weights.hpp"

using namespace saga;

namespace {

Corpus small_corpus() {
  Corpus c;
  c.header = {3, 8, 16, 4, 2, 4};
  for (std::uint32_t i = 0; i < 3; ++i) {
    FeatureRecord r;
    r.person_id = 100 + i;
    r.camera_id = i % 2;
    r.split = static_cast<Split>(i);
    r.cls = Tensor({16}, 0.25 * i);
    r.proj = Tensor({4}, -1.5);
    r.tokens = Tensor({8, 16});
    for (std::size_t k = 0; k < r.tokens.size(); ++k) r.tokens[k] = static_cast<float>(0.01 * k - i);
    c.records.push_back(std::move(r));
  }
  return c;
}

SynthConfig tiny_synth() {
  SynthConfig s;
  s.num_ids = 6;
  s.images_per_id_cam = 2;
  s.grid_h = 4;
  s.grid_w = 2;
  s.dim = 8;
  s.proj_dim = 4;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("saga_corpus_test_" + name);
}

}  // namespace

TEST(CorpusFormat, RoundTripIsBitExact) {
  const Corpus c = small_corpus();
  const auto bytes = encode_corpus(c);
  EXPECT_EQ(bytes.size(), kCorpusHeaderBytes + 3 * c.header.record_bytes());
  const Corpus back = decode_corpus(bytes);
  EXPECT_EQ(back.header, c.header);
  ASSERT_EQ(back.records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(back.records[i].identical(c.records[i]));
  EXPECT_EQ(encode_corpus(back), bytes);

  const auto path = temp_file("rt.sfc");
  write_corpus(path, c);
  EXPECT_EQ(read_file_bytes(path), bytes);
  std::filesystem::remove(path);
}

TEST(CorpusFormat, BadMagic) {
  auto bytes = encode_corpus(small_corpus());
  std::copy_n("XXXX", 4, bytes.begin());
  try {
    decode_corpus(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(CorpusFormat, EmptyRecordListIsHeaderOnly) {
  Corpus c;
  c.header = {0, 8, 16, 4, 2, 4};
  const auto bytes = encode_corpus(c);
  EXPECT_EQ(bytes.size(), kCorpusHeaderBytes);
  EXPECT_TRUE(decode_corpus(bytes).records.empty());
}

TEST(CorpusFormat, TruncatedAndTrailing) {
  auto bytes = encode_corpus(small_corpus());
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  try {
    decode_corpus(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), kCorpusHeaderBytes + 2 * small_corpus().header.record_bytes());
  }
  bytes.push_back(0);
  EXPECT_THROW(decode_corpus(bytes), FormatError);
  EXPECT_THROW(decode_corpus({'S', 'F'}), FormatError);
}

TEST(CorpusFormat, InvalidSplitOffset) {
  auto bytes = encode_corpus(small_corpus());
  bytes[kCorpusHeaderBytes + 12] = 7;
  try {
    decode_corpus(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), kCorpusHeaderBytes + 12);
  }
}

TEST(CorpusFormat, HeaderRecordMismatch) {
  Corpus c = small_corpus();
  c.header.record_count = 4;
  EXPECT_THROW(encode_corpus(c), FormatError);
  c = small_corpus();
  c.records[1].cls = Tensor({15});
  EXPECT_THROW(encode_corpus(c), FormatError);
  c = small_corpus();
  c.header.grid_w = 3;
  EXPECT_THROW(encode_corpus(c), ConfigError);
}

TEST(Synthetic, DeterministicBytes) {
  SynthConfig s = tiny_synth();
  s.seed = 7;
  EXPECT_EQ(encode_corpus(generate_synthetic(s)), encode_corpus(generate_synthetic(s)));
  s.seed = 8;
  SynthConfig t = s;
  t.seed = 7;
  EXPECT_NE(encode_corpus(generate_synthetic(s)), encode_corpus(generate_synthetic(t)));
}

TEST(Synthetic, NoiselessIdentityHasIdenticalTokens) {
  SynthConfig s = tiny_synth();
  s.noise_scale = 0.0;
  s.camera_shift_scale = 0.0;
  s.background_fraction = 0.0;
  const Corpus c = generate_synthetic(s);
  for (const auto& r : c.records) {
    for (const auto& o : c.records) {
      if (r.person_id == o.person_id) EXPECT_TRUE(r.tokens.identical(o.tokens));
    }
  }
}

TEST(Synthetic, BackgroundPatchesCarryNoPersonSignal) {
  SynthConfig s = tiny_synth();
  s.grid_h = 16;
  s.grid_w = 8;
  s.noise_scale = 0.0;
  s.camera_shift_scale = 0.0;
  s.background_fraction = 0.3;
  const Corpus c = generate_synthetic(s);
  std::size_t zero = 0, total = 0;
  for (const auto& r : c.records) {
    for (std::size_t p = 0; p < r.tokens.rows(); ++p) {
      bool all_zero = true;
      for (std::size_t k = 0; k < r.tokens.cols(); ++k) all_zero = all_zero && r.tokens.at(p, k) == 0.0;
      zero += all_zero;
      ++total;
    }
  }
  // 3072 Bernoulli(0.3) draws: sd ≈ 0.008.
  EXPECT_NEAR(static_cast<double>(zero) / static_cast<double>(total), 0.3, 0.04);
  s.background_fraction = 1.0;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(Synthetic, LayoutAndSplits) {
  const SynthConfig s = tiny_synth();
  const Corpus c = generate_synthetic(s);
  EXPECT_EQ(c.records.size(), 6u * 2 * 2);
  EXPECT_EQ(c.header.n_patches, 8u);
  EXPECT_EQ(c.person_ids(Split::train), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.indices(Split::query).size(), 3u * 2);
  EXPECT_EQ(c.indices(Split::gallery).size(), 3u * 2);
  // In-memory values are already float32-representable.
  EXPECT_EQ(encode_corpus(decode_corpus(encode_corpus(c))), encode_corpus(c));
  const auto rt = decode_corpus(encode_corpus(c));
  for (std::size_t i = 0; i < c.records.size(); ++i) EXPECT_TRUE(rt.records[i].identical(c.records[i]));
}

TEST(Synthetic, RejectsBadConfig) {
  SynthConfig s = tiny_synth();
  s.num_ids = 1;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = tiny_synth();
  s.noise_scale = -1;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = tiny_synth();
  s.region_profile = {1.0, 0.5};
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(Synthetic, DefaultProfileFavoursUpperRows) {
  const auto p = SynthConfig{}.effective_profile();
  ASSERT_EQ(p.size(), 16u);
  EXPECT_DOUBLE_EQ(p.front(), 1.0);
  EXPECT_DOUBLE_EQ(p.back(), 0.5);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_LT(p[i], p[i - 1]);
}

TEST(Validate, GeneratedCorpusIsClean) {
  for (std::uint64_t seed : {1, 2, 3}) {
    SynthConfig s = tiny_synth();
    s.seed = seed;
    const auto rep = validate_corpus(generate_synthetic(s));
    EXPECT_TRUE(rep.ok()) << rep.summary();
    EXPECT_TRUE(rep.warnings.empty()) << rep.summary();
  }
}

TEST(Validate, NaNIsFatalWithIndex) {
  Corpus c = generate_synthetic(tiny_synth());
  c.records[5].tokens[3] = std::numeric_limits<double>::quiet_NaN();
  const auto rep = validate_corpus(c);
  ASSERT_EQ(rep.fatal.size(), 1u);
  EXPECT_EQ(rep.fatal[0].record, 5u);
  EXPECT_NE(rep.fatal[0].message.find("record 5"), std::string::npos);
}

TEST(Validate, SingleCameraIdentityWarns) {
  Corpus c = generate_synthetic(tiny_synth());
  for (auto& r : c.records)
    if (r.person_id == 4) r.camera_id = 0;
  const auto rep = validate_corpus(c);
  EXPECT_TRUE(rep.ok());
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.warnings[0].message.find(" 4"), std::string::npos);
}

TEST(TextBank, UnitRowsOnePerTrainId) {
  const Corpus c = generate_synthetic(tiny_synth());
  const auto bank = make_text_bank(c, 7);
  EXPECT_EQ(bank.rows.rows(), c.person_ids(Split::train).size());
  EXPECT_EQ(bank.rows.cols(), 4u);
  for (std::size_t i = 0; i < bank.rows.rows(); ++i) EXPECT_NEAR(l2_norm(bank.rows.row(i)), 1.0, 1e-12);
  EXPECT_EQ(bank.index_of(2), 1u);
  EXPECT_FALSE(bank.index_of(5).has_value());
  EXPECT_TRUE(bank.rows.identical(make_text_bank(c, 7).rows));
}

TEST(Sidecar, SameBasename) {
  EXPECT_EQ(sidecar_path("/a/b/ref.sfc"), std::filesystem::path("/a/b/ref.meta.json"));
}

TEST(WeightBlob, RoundTripAndShapeCheck) {
  WeightFile w;
  w.tensors.emplace_back("a", Tensor::matrix({{1.5, -2}, {0.25, 3}}));
  w.tensors.emplace_back("b", Tensor::vector({0.1, 0.2, 0.3}));
  const auto back = decode_weights(encode_weights(w, WeightDtype::f64));
  EXPECT_TRUE(back.get("b").identical(w.get("b")));
  const auto f32 = decode_weights(encode_weights(w, WeightDtype::f32));
  EXPECT_EQ(f32.get("b")[0], static_cast<double>(0.1f));
  EXPECT_THROW(back.expect("a", {3, 2}), DimensionError);
  EXPECT_THROW(back.get("c"), FormatError);
  auto bytes = encode_weights(w, WeightDtype::f64);
  bytes.pop_back();
  EXPECT_THROW(decode_weights(bytes), FormatError);
}
