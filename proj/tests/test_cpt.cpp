#include "support.hpp"

#include <gtest/gtest.h>

using namespace testing_support;

namespace {

struct Fixture {
  ModelConfig cfg = tiny_config();
  AttributeSchema schema = schema_with(3);
  ViewRegistry views = default_views();
  Model model = make_model(cfg, schema, views, 4, 33);
  std::mt19937_64 rng{5};

  Matrix attrs() { return random_matrix(cfg.T, cfg.C_t, rng); }
};

int differing_rows(const Matrix& a, const Matrix& b) {
  int n = 0;
  for (Index i = 0; i < a.rows(); ++i) n += (a.row(i) - b.row(i)).cwiseAbs().maxCoeff() > 0 ? 1 : 0;
  return n;
}

}  // namespace

TEST(Template, LayoutReadsAsTheSentence) {
  ModelConfig cfg = tiny_config();
  const cpt::Vocabulary vocab(default_views());
  EXPECT_EQ(cpt::render_layout(cpt::sentence_layout(cfg, vocab), vocab, 1),
            "<BOS> a UAV view photo of a [M1] [M2] [A1] [A2] [A3] person <EOS>");
  cfg.use_view_token = false;
  EXPECT_EQ(cpt::render_layout(cpt::sentence_layout(cfg, vocab), vocab, 1),
            "<BOS> a view photo of a [M1] [M2] [A1] [A2] [A3] person <EOS>");
}

TEST(Template, SlotCountForPaperScale) {
  ModelConfig cfg;
  cfg.K = 8;
  cfg.T = 15;
  EXPECT_EQ(cpt::sentence_layout(cfg, cpt::Vocabulary(default_views())).size(), 32u);
}

TEST(Template, SlotCountOverRandomConfigs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg = tiny_config();
    cfg.K = 1 + static_cast<int>(rng() % 8);
    cfg.T = 1 + static_cast<int>(rng() % 6);
    cfg.T_hat = cfg.T + 1;
    cfg.context_len = 40;
    const auto schema = schema_with(cfg.T);
    const auto m = make_model(cfg, schema, default_views(), 2, rng());
    const Matrix s = cpt::build_sentence(0, m.params, cfg, m.views, random_matrix(cfg.T, cfg.C_t, rng));
    EXPECT_EQ(s.rows(), 9 + cfg.K + cfg.T) << "K=" << cfg.K << " T=" << cfg.T;
    EXPECT_EQ(s.cols(), cfg.C_t);
  }
}

TEST(Template, ViewSubstitutionChangesOneSlot) {
  Fixture f;
  const Matrix a = f.attrs();
  const Matrix s0 = cpt::build_sentence(0, f.model.params, f.cfg, f.views, a);
  const Matrix s1 = cpt::build_sentence(1, f.model.params, f.cfg, f.views, a);
  EXPECT_EQ(differing_rows(s0, s1), 1);
  EXPECT_GT((s0.row(2) - s1.row(2)).norm(), 0.0);
  EXPECT_THROW(cpt::build_sentence(7, f.model.params, f.cfg, f.views, a), UnknownView);
}

TEST(Template, SlotsCarryTheirEmbeddings) {
  Fixture f;
  const Matrix a = f.attrs();
  const Matrix s = cpt::build_sentence(1, f.model.params, f.cfg, f.views, a);
  const cpt::Vocabulary vocab(f.views);
  const Matrix& words = f.model.params.at("cpt.word_embedding").var.value();
  const Matrix& shared = f.model.params.at("cpt.shared").var.value();
  EXPECT_EQ(s.row(0), words.row(cpt::Vocabulary::kBos));
  EXPECT_EQ(s.row(2), words.row(vocab.view_token(1)));
  for (int k = 0; k < f.cfg.K; ++k) EXPECT_EQ(s.row(7 + k), shared.row(k));
  for (int t = 0; t < f.cfg.T; ++t) EXPECT_EQ(s.row(7 + f.cfg.K + t), a.row(t));
  EXPECT_EQ(s.row(s.rows() - 2), words.row(vocab.id("person")));
  EXPECT_EQ(s.row(s.rows() - 1), words.row(cpt::Vocabulary::kEos));
}

TEST(Template, ViewTokenCanBeDropped) {
  Fixture f;
  ModelConfig cfg = f.cfg;
  cfg.use_view_token = false;
  const Matrix a = f.attrs();
  const Matrix s0 = cpt::build_sentence(0, f.model.params, cfg, f.views, a);
  EXPECT_EQ(s0.rows(), 8 + cfg.K + cfg.T);
  EXPECT_EQ(s0, cpt::build_sentence(1, f.model.params, cfg, f.views, a));
}

TEST(Template, RejectsWrongAttributeShapes) {
  Fixture f;
  EXPECT_THROW(cpt::build_sentence(0, f.model.params, f.cfg, f.views, Matrix::Zero(f.cfg.T + 1, f.cfg.C_t)),
               ShapeMismatch);
  EXPECT_THROW(cpt::build_sentence(0, f.model.params, f.cfg, f.views, Matrix::Zero(f.cfg.T, f.cfg.C_t + 1)),
               ShapeMismatch);
}

TEST(Template, PseudoRowsAreProjected) {
  ModelConfig cfg = tiny_config();
  cfg.C_v = 12;
  cfg.attribute_mode = AttributeMode::pseudo;
  cfg.use_pacg = false;
  const auto schema = schema_with(cfg.T);
  const auto m = make_model(cfg, schema, default_views(), 3, 8);
  std::mt19937_64 rng(2);
  const Matrix raw = random_matrix(cfg.T, cfg.C_v, rng);
  const Matrix s = cpt::build_sentence(0, m.params, cfg, m.views, raw);
  EXPECT_EQ(s.rows(), 9 + cfg.K + cfg.T);
  const Matrix& w = m.params.at("cpt.pseudo.W").var.value();
  const Matrix& b = m.params.at("cpt.pseudo.b").var.value();
  for (int t = 0; t < cfg.T; ++t)
    EXPECT_LT((s.row(7 + cfg.K + t) - (raw.row(t) * w + b.row(0))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(cpt::build_sentence(0, m.params, cfg, m.views, Matrix::Zero(cfg.T, cfg.C_t)), ShapeMismatch);
}

TEST(Template, GroundTruthSentenceUsesLabelTable) {
  Fixture f;
  const std::vector<int> labels{1, 0, 2};
  const Matrix s = cpt::gt_attribute_sentence(0, f.model.params, f.cfg, f.views, f.schema, labels);
  const Matrix& table = f.model.params.at("cpt.gt_attribute_table").var.value();
  EXPECT_EQ(table.rows(), f.schema.total_subcategories());
  for (int t = 0; t < f.cfg.T; ++t)
    EXPECT_EQ(s.row(7 + f.cfg.K + t), table.row(f.schema.offset(t) + labels[static_cast<size_t>(t)]));
  const Matrix other = cpt::gt_attribute_sentence(0, f.model.params, f.cfg, f.views, f.schema, {0, 0, 2});
  EXPECT_EQ(differing_rows(s, other), 1);
  EXPECT_THROW(cpt::gt_attribute_sentence(0, f.model.params, f.cfg, f.views, f.schema, {2, 0, 0}),
               AttributeOutOfRange);
}

TEST(TextEncoder, CausalMaskHidesLaterSlots) {
  Fixture f;
  Matrix s = cpt::build_sentence(0, f.model.params, f.cfg, f.views, f.attrs());
  const Index person = s.rows() - 2;
  auto hidden = [&](const Matrix& x) {
    ad::NoGradGuard g;
    return Matrix(cpt::encode_text(f.model.params, f.cfg, ad::constant(x), 1).hidden.value());
  };
  const Matrix before = hidden(s);
  s.row(person) += random_matrix(1, f.cfg.C_t, f.rng, 2.0);
  const Matrix after = hidden(s);
  EXPECT_EQ(before.topRows(person), after.topRows(person));
  EXPECT_GT((before.bottomRows(2) - after.bottomRows(2)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(TextEncoder, FeatureRespondsToViewAndAttributes) {
  Fixture f;
  const Matrix a = f.attrs();
  const auto base = cpt::encode_text(cpt::build_sentence(0, f.model.params, f.cfg, f.views, a), f.model.params, f.cfg);
  EXPECT_EQ(base.size(), f.cfg.C);
  const auto viewed = cpt::encode_text(cpt::build_sentence(1, f.model.params, f.cfg, f.views, a), f.model.params, f.cfg);
  EXPECT_GT((base - viewed).norm(), 1e-8);
  for (int t = 0; t < f.cfg.T; ++t) {
    Matrix b = a;
    b.row(t) += random_matrix(1, f.cfg.C_t, f.rng);
    const auto changed = cpt::encode_text(cpt::build_sentence(0, f.model.params, f.cfg, f.views, b), f.model.params, f.cfg);
    EXPECT_GT((base - changed).norm(), 1e-8) << "attribute " << t;
  }
}

TEST(TextEncoder, BatchRowsMatchSingleSentences) {
  Fixture f;
  const Matrix a0 = f.attrs(), a1 = f.attrs();
  Matrix rows(2 * f.cfg.T, f.cfg.C_t);
  rows << a0, a1;
  ad::NoGradGuard g;
  const Var sentences = cpt::build_sentences(f.model.params, f.cfg, f.views, {0, 1}, ad::constant(rows));
  const Matrix batch = cpt::encode_text(f.model.params, f.cfg, sentences, 2).feature.value();
  const auto s0 = cpt::encode_text(cpt::build_sentence(0, f.model.params, f.cfg, f.views, a0), f.model.params, f.cfg);
  const auto s1 = cpt::encode_text(cpt::build_sentence(1, f.model.params, f.cfg, f.views, a1), f.model.params, f.cfg);
  EXPECT_LT((batch.row(0) - s0).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((batch.row(1) - s1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TextEncoder, ContextOverflowIsReported) {
  Fixture f;
  const Matrix s = cpt::build_sentence(0, f.model.params, f.cfg, f.views, f.attrs());
  ModelConfig small = f.cfg;
  small.context_len = static_cast<int>(s.rows()) - 1;
  EXPECT_THROW(cpt::encode_text(s, f.model.params, small), cpt::ContextOverflow);
  small.context_len = static_cast<int>(s.rows());
  EXPECT_NO_THROW(cpt::encode_text(s, f.model.params, small));
}

TEST(RetrievalFeature, HalvesAreBalanced) {
  std::mt19937_64 rng(4);
  const Eigen::RowVectorXd v = random_matrix(1, 6, rng, 10.0).row(0);
  const Eigen::RowVectorXd d = random_matrix(1, 4, rng, 0.01).row(0);
  const auto r = cpt::retrieval_feature(v, d);
  EXPECT_NEAR(r.norm(), 1.0, 1e-12);
  EXPECT_NEAR(r.head(6).norm(), r.tail(4).norm(), 1e-12);
}

TEST(RetrievalFeature, ZeroTextGivesVisualRanking) {
  std::mt19937_64 rng(9);
  const Matrix visual = random_matrix(20, 8, rng);
  Matrix fused(20, 12);
  for (Index i = 0; i < 20; ++i) fused.row(i) = cpt::retrieval_feature(visual.row(i), Eigen::RowVectorXd::Zero(4));
  for (Index q = 0; q < 20; ++q) {
    const auto a = eval::attribute_query_retrieval(visual.row(q), visual);
    const auto b = eval::attribute_query_retrieval(fused.row(q), fused);
    EXPECT_EQ(a.order, b.order);
  }
}
