#include <gtest/gtest.h>

#include <cmath>

#include "natf/nat.hpp"

namespace natf {
namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_hidden = 32;
  cfg.n_layer = 2;
  cfg.n_head = 2;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.max_length = 40;
  return cfg;
}

FertilityDist dist_rows(std::initializer_list<std::vector<double>> rows) {
  const std::size_t cols = rows.begin()->size();
  FertilityDist d(Shape{rows.size(), cols});
  std::size_t r = 0;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < cols; ++c) d(r, c) = row[c];
    ++r;
  }
  return d;
}

TEST(Copy, UniformIndices) {
  const TokenSeq abc{4, 5, 6};
  EXPECT_EQ(copy_uniform(abc, 2), (TokenSeq{5, 6}));
  EXPECT_EQ(copy_uniform(abc, 3), abc);
  EXPECT_EQ(copy_uniform(TokenSeq{4, 5}, 4), (TokenSeq{4, 4, 5, 5}));
  EXPECT_THROW(copy_uniform(abc, 0), UsageError);
}

TEST(Copy, Fertility) {
  // Thank you . with [2, 0, 1]
  EXPECT_EQ(copy_fertility(TokenSeq{7, 8, 9}, {2, 0, 1}), (TokenSeq{7, 7, 9}));
  EXPECT_EQ(copy_fertility(TokenSeq{7, 8, 9}, {1, 1, 1}), (TokenSeq{7, 8, 9}));
  EXPECT_EQ(copy_fertility(TokenSeq{4, 5}, {0, 3}), (TokenSeq{5, 5, 5}));
  EXPECT_THROW(copy_fertility(TokenSeq{4, 5}, {0, 0}), UsageError);
}

TEST(FertilityRules, Argmax) {
  EXPECT_EQ(argmax_fertilities(dist_rows({{0.1, 0.6, 0.3}})), (FertilitySeq{1}));
  const auto zero = dist_rows({{0.9, 0.05, 0.05}, {0.7, 0.2, 0.1}, {0.8, 0.15, 0.05}});
  EXPECT_EQ(argmax_fertilities(zero), (FertilitySeq{0, 1, 0}));
}

TEST(FertilityRules, Average) {
  EXPECT_EQ(average_fertilities(dist_rows({{0.1, 0.6, 0.3}})), (FertilitySeq{1}));
  EXPECT_EQ(average_fertilities(dist_rows({{0, 0, 0, 1, 0}})), (FertilitySeq{3}));
  EXPECT_EQ(average_fertilities(dist_rows({{0.5, 0.5}})), (FertilitySeq{1}));
}

TEST(FertilityRules, NpdCandidatesNested) {
  const auto d = dist_rows({{0.2, 0.5, 0.3}, {0.4, 0.1, 0.5}});
  const auto c10 = npd_candidates(d, 10, 3);
  const auto c4 = npd_candidates(d, 4, 3);
  ASSERT_EQ(c10.size(), 10u);
  EXPECT_EQ(c10[0], argmax_fertilities(d));
  EXPECT_EQ(c10[1], average_fertilities(d));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c4[i], c10[i]);
  EXPECT_THROW(npd_candidates(d, 0, 3), UsageError);
}

class NatTest : public ::testing::Test {
 protected:
  NatModel<float> model{small_config(), 5};
  TeacherModel<float> teacher{small_config(), 6};
  TokenSeq src{4, 9, 6, 5};
};

TEST_F(NatTest, FertilityDistributionShape) {
  const FertilityDist d = predict_fertility(model, src);
  EXPECT_EQ(d.shape(), (Shape{4, 50}));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    double s = 0;
    for (const double p : d.row(r)) s += p;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const FertilityDist padded = predict_fertility(model, TokenSeq{4, kPad});
  EXPECT_EQ(padded(1, 0), 1.0);
}

TEST_F(NatTest, OnePassRegardlessOfLength) {
  for (std::size_t len = 1; len <= 30; len += 7) {
    model.reset_pass_counter();
    const Tensor<float> out = nat_forward(model, src, TokenSeq(std::vector<TokenId>(len, 5)));
    EXPECT_EQ(out.shape(), (Shape{len, 12}));
    EXPECT_EQ(model.decoder_passes(), 1u);
  }
}

TEST_F(NatTest, PositionalAttentionRowsSumToOne) {
  Graph<float> g(GradMode::kInference);
  const PackedBatch s = single(src);
  const auto memory = model.encode(g, s);
  std::vector<float> probs;
  model.decode(g, memory, s.layout, single(TokenSeq{4, 4, 9, 6, 6, 5}), &probs);
  ASSERT_EQ(probs.size(), 2u * 2u * 36u);
  for (std::size_t r = 0; r < probs.size() / 6; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 6; ++c) sum += probs[r * 6 + c];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST_F(NatTest, TranslateIsDeterministicArgmax) {
  const FertilitySeq f{2, 0, 1, 3};
  const TokenSeq a = translate_given_fertility(model, src, f);
  EXPECT_EQ(a, translate_given_fertility(model, src, f));
  EXPECT_EQ(a.size(), 6u);
  const Tensor<float> table = nat_forward(model, src, copy_fertility(src, f));
  for (std::size_t t = 0; t < table.rows(); ++t) {
    TokenId best = kUnk;
    for (TokenId y = kUnk; y < 12; ++y) {
      if (table(t, static_cast<std::size_t>(y)) > table(t, static_cast<std::size_t>(best))) best = y;
    }
    EXPECT_EQ(a[t], best);
  }
}

TEST_F(NatTest, OutputsDependOnlyOnSourceAndFertilities) {
  const Tensor<float> a = nat_forward(model, src, TokenSeq{4, 9, 9, 6});
  const Tensor<float> b = nat_forward(model, src, TokenSeq{4, 9, 9, 6});
  EXPECT_EQ(a, b);
}

TEST_F(NatTest, DecodeLengthsMatchFertilities) {
  const auto r = decode_argmax(model, src);
  EXPECT_EQ(r.output.size(), fertility_total(r.fertilities));
  EXPECT_EQ(r.nat_passes, 1u);
  const auto avg = decode_average(model, src);
  EXPECT_EQ(avg.output.size(), fertility_total(avg.fertilities));
}

TEST_F(NatTest, NpdSingleSampleIsArgmax) {
  const auto a = decode_argmax(model, src);
  const auto n = decode_npd(model, teacher, src, 1, 9);
  EXPECT_EQ(a.output, n.output);
  EXPECT_EQ(a.fertilities, n.fertilities);
}

TEST_F(NatTest, NpdPassCounts) {
  const auto n = decode_npd(model, teacher, src, 10, 9);
  EXPECT_EQ(n.nat_passes, 10u);
  EXPECT_EQ(n.teacher_passes, 10u);
  EXPECT_THROW(decode_npd(model, teacher, src, 0, 9), UsageError);
}

TEST_F(NatTest, NpdScoreMonotoneInSamples) {
  const double argmax_score = score_parallel(teacher, src, decode_argmax(model, src).output);
  double prev = -1e300;
  for (std::size_t s = 1; s <= 12; ++s) {
    const double score = *decode_npd(model, teacher, src, s, 21).teacher_score;
    EXPECT_GE(score, prev);
    EXPECT_GE(score, argmax_score);
    prev = score;
  }
}

TEST_F(NatTest, ArgmaxInvariantToLogitScaling) {
  Graph<float> g(GradMode::kInference);
  const auto memory = model.encode(g, single(src));
  const auto lp = model.fertility_log_probs(g, memory).value();
  // log-softmax of scaled logits: scaling log-probs by c>0 and renormalizing.
  FertilityDist base(lp.shape()), scaled(lp.shape());
  for (std::size_t r = 0; r < lp.rows(); ++r) {
    double z1 = 0, z2 = 0;
    for (std::size_t c = 0; c < lp.cols(); ++c) {
      z1 += std::exp(static_cast<double>(lp(r, c)));
      z2 += std::exp(3.0 * lp(r, c));
    }
    for (std::size_t c = 0; c < lp.cols(); ++c) {
      base(r, c) = std::exp(static_cast<double>(lp(r, c))) / z1;
      scaled(r, c) = std::exp(3.0 * lp(r, c)) / z2;
    }
  }
  EXPECT_EQ(argmax_fertilities(base), argmax_fertilities(scaled));
}

TEST(NatUniform, UsesLengthFromOptions) {
  NatOptions opts;
  opts.copy = CopyMode::kUniform;
  NatModel<float> m(small_config(), 2, opts);
  DecodeOptions d;
  d.target_length = 7;
  EXPECT_EQ(nat_decode<float>(m, TokenSeq{4, 5, 6}, d).output.size(), 7u);
  DecodeOptions r;
  r.length_ratio = 1.5;
  EXPECT_EQ(nat_decode<float>(m, TokenSeq{4, 5, 6}, r).output.size(), 5u);
}

TEST(NatAblation, PositionalAttentionToggle) {
  NatOptions opts;
  opts.positional_attention = false;
  NatModel<float> off(small_config(), 2, opts);
  NatModel<float> on(small_config(), 2);
  EXPECT_LT(off.params().size(), on.params().size());
  EXPECT_FALSE(off.params().contains("decoder.layers.0.pos_attn.query.weight"));
  EXPECT_EQ(translate_given_fertility(off, TokenSeq{4, 5}, {1, 2}).size(), 3u);
}

}  // namespace
}  // namespace natf
