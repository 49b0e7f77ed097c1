#include "support.hpp"

using namespace nutripred;
using testing_support::random_tensor;
using testing_support::TempDir;

namespace {

ModelConfig tiny(HeadKind head, int feature_dim = 8, std::vector<int> widths = {16, 16}, int task_width = 8) {
  ModelConfig mc;
  mc.backbone = BackboneConfig::defaults(BackboneKind::tiny_test);
  mc.backbone.feature_dim = feature_dim;
  mc.backbone.image_size = 16;
  mc.head = HeadTopology::defaults(head);
  if (head == HeadKind::full) {
    mc.head.shared_widths = widths;
    mc.head.task_width = task_width;
  } else {
    mc.head.shared_widths = {widths.front()};
  }
  return mc;
}

/// Hand count: weights plus biases of every layer.
std::size_t head_count_oracle(HeadKind kind, std::size_t f, std::size_t w1, std::size_t w2, std::size_t t) {
  if (kind == HeadKind::compressed) return f * w1 + w1 + 5 * (w1 + 1);
  return f * w1 + w1 + w1 * w2 + w2 + 5 * (w2 * t + t + t + 1);
}

Tensor<float>* find(nn::StateList<float>& st, const std::string& name) {
  for (auto& ref : st) {
    if (ref.name == name) return ref.value;
  }
  return nullptr;
}

}  // namespace

TEST(HeadParameters, WorkedExamples) {
  const auto full = build_model<float>(tiny(HeadKind::full));
  const auto compressed = build_model<float>(tiny(HeadKind::compressed));
  EXPECT_EQ(parameter_count(*full, ParamScope::head_only), 1141u);
  EXPECT_EQ(parameter_count(*compressed, ParamScope::head_only), 229u);
  EXPECT_EQ(head_count_oracle(HeadKind::full, 8, 16, 16, 8), 1141u);
  EXPECT_EQ(head_count_oracle(HeadKind::compressed, 8, 16, 0, 0), 229u);
}

TEST(HeadParameters, PartitionIdentity) {
  for (auto kind : {HeadKind::full, HeadKind::compressed}) {
    const auto m = build_model<float>(tiny(kind));
    EXPECT_EQ(parameter_count(*m, ParamScope::all),
              parameter_count(*m, ParamScope::head_only) + parameter_count(*m, ParamScope::backbone_only));
    // tiny backbone: conv 3->8 (3x3, bias) + linear 8->8
    EXPECT_EQ(parameter_count(*m, ParamScope::backbone_only), 8u * 3 * 9 + 8 + 8 * 8 + 8);
  }
}

TEST(HeadParameters, CompressedBelowFullOnRandomConfigs) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int f = 1 + static_cast<int>(rng.below(24));
    const int w1 = 1 + static_cast<int>(rng.below(24));
    const int w2 = 1 + static_cast<int>(rng.below(24));
    const int t = 1 + static_cast<int>(rng.below(24));
    const auto full = build_model<float>(tiny(HeadKind::full, f, {w1, w2}, t));
    const auto comp = build_model<float>(tiny(HeadKind::compressed, f, {w1}));
    const auto nf = parameter_count(*full, ParamScope::head_only);
    const auto nc = parameter_count(*comp, ParamScope::head_only);
    EXPECT_EQ(nf, head_count_oracle(HeadKind::full, f, w1, w2, t));
    EXPECT_EQ(nc, head_count_oracle(HeadKind::compressed, f, w1, 0, 0));
    EXPECT_LT(nc, nf);
  }
}

TEST(HeadParameters, NamesFollowTaskOrder) {
  auto m = build_model<float>(tiny(HeadKind::full));
  std::vector<std::string> names;
  for (auto& ref : m->state()) names.push_back(ref.name);
  const std::vector<std::string> head_expected{
      "head.shared.0.weight", "head.shared.0.bias", "head.shared.1.weight", "head.shared.1.bias",
      "head.calories.hidden.weight", "head.calories.hidden.bias", "head.calories.out.weight",
      "head.calories.out.bias"};
  const auto first_head = std::find(names.begin(), names.end(), "head.shared.0.weight");
  ASSERT_NE(first_head, names.end());
  EXPECT_TRUE(std::equal(head_expected.begin(), head_expected.end(), first_head));
  EXPECT_EQ(names.back(), "head.carbohydrates.out.bias");
}

TEST(Backbones, TinyShapeAndDeterminism) {
  auto cfg = BackboneConfig::defaults(BackboneKind::tiny_test);
  cfg.feature_dim = 8;
  cfg.image_size = 32;
  const auto a = build_backbone<float>(cfg, 3);
  const auto b = build_backbone<float>(cfg, 3);
  Rng rng(1);
  const auto x = random_tensor<float>({4, 3, 32, 32}, rng, 0, 1);
  const auto fa = a->infer(x);
  EXPECT_EQ(fa.shape(), (Shape{4, 8}));
  EXPECT_TRUE(fa.all_finite());
  EXPECT_EQ(fa, b->infer(x));
}

TEST(Backbones, VitDefaultsAreBaseGeometry) {
  const auto vit = build_backbone<float>(BackboneConfig::defaults(BackboneKind::vit));
  const auto info = vit->info();
  EXPECT_EQ(info.attention_heads, 12u);
  EXPECT_EQ(info.transformer_blocks, 12u);
  EXPECT_EQ(info.feature_dim, 768u);
  EXPECT_EQ(info.image_size, 224u);
}

TEST(Backbones, MaeDecoderShapesFollowConfiguredGeometry) {
  const auto cfg = BackboneConfig::defaults(BackboneKind::mae_encoder);
  const auto shapes = mae_decoder_shapes(cfg);
  EXPECT_EQ(shapes.at("decoder_blocks.7.attn.qkv.weight"), (Shape{1536, 512}));
  EXPECT_FALSE(shapes.contains("decoder_blocks.8.attn.qkv.weight"));
  EXPECT_EQ(shapes.at("decoder_embed.weight"), (Shape{512, 768}));
}

TEST(Backbones, PretrainedWeightsLoadAndMismatchIsReported) {
  TempDir dir("bb");
  auto cfg = BackboneConfig::defaults(BackboneKind::tiny_test);
  cfg.image_size = 16;
  auto source = build_backbone<float>(cfg, 77);
  Container c;
  c.kind = "weights";
  for (auto& ref : source->state()) c.arrays.push_back(StoredArray::from_tensor(ref.name, *ref.value));
  write_container(dir / "bb.bin", c);

  auto with_weights = cfg;
  with_weights.pretrained_weights = (dir / "bb.bin").string();
  const auto loaded = build_backbone<float>(with_weights, 1);
  Rng rng(2);
  const auto x = random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  EXPECT_EQ(loaded->infer(x), source->infer(x));

  auto wrong = with_weights;
  wrong.feature_dim = 9;
  try {
    build_backbone<float>(wrong);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.proj.weight"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("(9,8)"), std::string::npos) << e.what();
  }

  auto missing = cfg;
  missing.pretrained_weights = (dir / "nope.bin").string();
  EXPECT_THROW(build_backbone<float>(missing), FileError);
}

TEST(Backbones, MaeWeightsMayCarryDecoderArrays) {
  TempDir dir("mae");
  auto cfg = BackboneConfig::defaults(BackboneKind::mae_encoder);
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.feature_dim = 8;
  cfg.attention_heads = 2;
  cfg.hidden_layers = 1;
  cfg.mlp_dim = 16;
  cfg.decoder_dim = 4;
  cfg.decoder_heads = 2;
  cfg.decoder_layers = 1;
  auto source = build_backbone<float>(cfg, 5);
  Container c;
  c.kind = "weights";
  for (auto& ref : source->state()) c.arrays.push_back(StoredArray::from_tensor(ref.name, *ref.value));
  for (const auto& [name, shape] : mae_decoder_shapes(cfg)) {
    c.arrays.push_back(StoredArray::from_tensor("backbone." + name, Tensor<float>(shape)));
  }
  write_container(dir / "mae.bin", c);
  auto with = cfg;
  with.pretrained_weights = (dir / "mae.bin").string();
  EXPECT_NO_THROW(build_backbone<float>(with));

  for (auto& a : c.arrays) {
    if (a.name == "backbone.decoder_pred.weight") a = StoredArray::from_tensor(a.name, Tensor<float>({1, 1}));
  }
  write_container(dir / "bad.bin", c);
  with.pretrained_weights = (dir / "bad.bin").string();
  EXPECT_THROW(build_backbone<float>(with), LoadError);
}

TEST(Model, OutputIsBatchByFiveForEveryBatchSize) {
  for (auto kind : {HeadKind::full, HeadKind::compressed}) {
    const auto m = build_model<float>(tiny(kind));
    Rng rng(4);
    for (std::size_t b : {1u, 2u, 5u, 17u, 64u}) {
      const auto y = forward(*m, random_tensor<float>({b, 3, 16, 16}, rng, 0, 1));
      EXPECT_EQ(y.shape(), (Shape{b, 5}));
      EXPECT_TRUE(y.all_finite());
    }
  }
}

TEST(Model, SameSeedSameModelDifferentSeedDifferentModel) {
  auto cfg = tiny(HeadKind::full);
  const auto a = build_model<float>(cfg);
  const auto b = build_model<float>(cfg);
  cfg.seed = 1;
  const auto c = build_model<float>(cfg);
  Rng rng(5);
  const auto x = random_tensor<float>({3, 3, 16, 16}, rng, 0, 1);
  EXPECT_EQ(a->predict(x), b->predict(x));
  EXPECT_NE(a->predict(x), c->predict(x));
}

TEST(Model, DuplicatedRowGivesDuplicatedPrediction) {
  const auto m = build_model<float>(tiny(HeadKind::full));
  Rng rng(6);
  auto x = random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  std::copy(x.data(), x.data() + 3 * 16 * 16, x.data() + 3 * 16 * 16);
  const auto y = m->predict(x);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(y(0, k), y(1, k));
}

TEST(Model, ZeroImageEqualsBiasCompositionByHand) {
  auto m = build_model<float>(tiny(HeadKind::compressed));
  auto st = m->state();
  Rng rng(7);
  for (auto& ref : st) {
    if (ref.name.ends_with("bias")) {
      for (auto& v : ref.value->values()) v = static_cast<float>(rng.uniform(-1, 1));
    }
  }
  // conv of zero input with zero padding is its bias; ReLU; pooling of a constant map is the constant.
  const Tensor<float>& conv_b = *find(st, "backbone.conv.bias");
  const Tensor<float>& proj_w = *find(st, "backbone.proj.weight");
  const Tensor<float>& proj_b = *find(st, "backbone.proj.bias");
  const Tensor<float>& s_w = *find(st, "head.shared.0.weight");
  const Tensor<float>& s_b = *find(st, "head.shared.0.bias");
  std::vector<double> pooled(conv_b.size()), feat(proj_b.size()), hidden(s_b.size());
  for (std::size_t c = 0; c < pooled.size(); ++c) pooled[c] = std::max(0.0, double(conv_b[c]));
  for (std::size_t o = 0; o < feat.size(); ++o) {
    feat[o] = proj_b[o];
    for (std::size_t c = 0; c < pooled.size(); ++c) feat[o] += proj_w(o, c) * pooled[c];
  }
  for (std::size_t o = 0; o < hidden.size(); ++o) {
    double s = s_b[o];
    for (std::size_t i = 0; i < feat.size(); ++i) s += s_w(o, i) * feat[i];
    hidden[o] = std::max(0.0, s);
  }
  const auto y = m->predict(Tensor<float>({1, 3, 16, 16}));
  for (std::size_t k = 0; k < 5; ++k) {
    const std::string base = "head." + std::string(kTaskNames[k]) + ".out.";
    const Tensor<float>& w = *find(st, base + "weight");
    double s = (*find(st, base + "bias"))[0];
    for (std::size_t i = 0; i < hidden.size(); ++i) s += w(0, i) * hidden[i];
    EXPECT_NEAR(y(0, k), s, 1e-5) << kTaskNames[k];
  }
}

TEST(Model, PerturbingOneTaskHeadChangesOnlyThatColumn) {
  for (auto kind : {HeadKind::full, HeadKind::compressed}) {
    auto m = build_model<float>(tiny(kind));
    Rng rng(8);
    const auto x = random_tensor<float>({4, 3, 16, 16}, rng, 0, 1);
    for (std::size_t k = 0; k < 5; ++k) {
      const auto before = m->predict(x);
      const std::string prefix = "head." + std::string(kTaskNames[k]) + ".";
      for (auto& ref : m->state()) {
        if (!ref.name.starts_with(prefix)) continue;
        for (auto& v : ref.value->values()) v += static_cast<float>(rng.uniform(0.1, 0.5));
      }
      const auto after = m->predict(x);
      for (std::size_t b = 0; b < 4; ++b) {
        for (std::size_t j = 0; j < 5; ++j) {
          if (j == k) {
            EXPECT_NE(before(b, j), after(b, j));
          } else {
            EXPECT_EQ(before(b, j), after(b, j));
          }
        }
      }
    }
  }
}

TEST(Model, WrongImageShapeIsShapeError) {
  const auto m = build_model<float>(tiny(HeadKind::full));
  EXPECT_THROW(m->predict(Tensor<float>({1, 3, 15, 16})), ShapeError);
  EXPECT_THROW(m->predict(Tensor<float>({1, 1, 16, 16})), ShapeError);
  EXPECT_THROW(m->predict(Tensor<float>({3, 16, 16})), ShapeError);
}

TEST(Model, InvalidTopologyIsConfigError) {
  auto cfg = tiny(HeadKind::full);
  cfg.head.shared_widths = {4};
  EXPECT_THROW(build_model<float>(cfg), ConfigError);
  cfg = tiny(HeadKind::compressed);
  cfg.head.shared_widths = {4, 4};
  EXPECT_THROW(build_model<float>(cfg), ConfigError);
}

TEST(Model, WeightsRoundTripBitExact) {
  TempDir dir("w");
  auto m = build_model<float>(tiny(HeadKind::full));
  save_weights(*m, dir / "m.bin");
  const auto back = load_weights<float>(dir / "m.bin");
  auto a = m->state();
  auto b = back->state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(*a[i].value, *b[i].value);
  }
  EXPECT_EQ(nlohmann::json(back->config()), nlohmann::json(m->config()));
}

TEST(Model, ImportStateIsAllOrNothing) {
  auto m = build_model<float>(tiny(HeadKind::full));
  auto arrays = export_state(*m);
  auto other_cfg = tiny(HeadKind::full);
  other_cfg.seed = 9;
  auto other = build_model<float>(other_cfg);
  const auto before = export_state(*other);
  arrays.back().shape = {2, 2};  // corrupt one entry
  arrays.back().bytes.resize(16);
  EXPECT_THROW(import_state(*other, arrays, "", ErrorKind::load), LoadError);
  const auto after = export_state(*other);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].bytes, after[i].bytes);
}
