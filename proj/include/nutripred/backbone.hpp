#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nutripred/config.hpp"
#include "nutripred/nn.hpp"
#include "nutripred/rng.hpp"
#include "nutripred/serialize.hpp"

namespace nutripred {

/// Structural summary used for introspection (`inspect`, tests).
struct BackboneInfo {
  BackboneKind kind = BackboneKind::tiny_test;
  std::size_t feature_dim = 0;
  std::size_t image_size = 0;
  std::size_t attention_heads = 0;     // per transformer block, 0 for convolutional kinds
  std::size_t transformer_blocks = 0;  // 0 for convolutional kinds
  std::size_t residual_blocks = 0;     // 0 for transformer kinds
};

/// Maps an image batch (B, 3, H, W) to features (B, feature_dim).
template <std::floating_point T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual BackboneInfo info() const = 0;
  virtual Tensor<T> infer(const Tensor<T>& images) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& images) = 0;
  virtual void backward(const Tensor<T>& dfeatures) = 0;
  virtual void collect(const std::string& prefix, nn::StateList<T>& out) = 0;

  const BackboneConfig& config() const { return config_; }
  std::size_t feature_dim() const { return static_cast<std::size_t>(config_.feature_dim); }

  nn::StateList<T> state() {
    nn::StateList<T> out;
    collect("backbone", out);
    return out;
  }

 protected:
  explicit FeatureExtractor(BackboneConfig config) : config_(std::move(config)) {}

  void check_images(const Tensor<T>& images) const {
    const auto r = static_cast<std::size_t>(config_.image_size);
    if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != 3 || images.dim(2) != r || images.dim(3) != r) {
      throw ShapeError("expected images (B,3," + std::to_string(r) + "," + std::to_string(r) + ") with B>=1, got " +
                       shape_string(images.shape()));
    }
  }

  BackboneConfig config_;
};

// ---------------------------------------------------------------------------

/// Strided 3x3 conv + ReLU + global average pool + linear projection.
template <std::floating_point T>
class TinyBackbone final : public FeatureExtractor<T> {
 public:
  TinyBackbone(const BackboneConfig& config, Rng& rng)
      : FeatureExtractor<T>(config),
        conv_(nn::Conv2dSpec{3, static_cast<std::size_t>(config.tiny_channels), 3, 2, 1, true}),
        proj_(static_cast<std::size_t>(config.tiny_channels), static_cast<std::size_t>(config.feature_dim)) {
    conv_.init(rng);
    proj_.init(rng);
  }

  BackboneInfo info() const override {
    return {BackboneKind::tiny_test, this->feature_dim(), static_cast<std::size_t>(this->config_.image_size), 0, 0, 0};
  }

  Tensor<T> infer(const Tensor<T>& images) const override {
    this->check_images(images);
    return proj_.infer(nn::GlobalAvgPool<T>::infer(nn::ReLU<T>::infer(conv_.infer(images))));
  }

  Tensor<T> forward(const Tensor<T>& images) override {
    this->check_images(images);
    return proj_.forward(pool_.forward(relu_.forward(conv_.forward(images))));
  }

  void backward(const Tensor<T>& dfeatures) override {
    conv_.backward(relu_.backward(pool_.backward(proj_.backward(dfeatures))), false);
  }

  void collect(const std::string& prefix, nn::StateList<T>& out) override {
    conv_.collect(nn::join_name(prefix, "conv"), out);
    proj_.collect(nn::join_name(prefix, "proj"), out);
  }

 private:
  nn::Conv2d<T> conv_;
  nn::ReLU<T> relu_;
  nn::GlobalAvgPool<T> pool_;
  nn::Linear<T> proj_;
};

// ---------------------------------------------------------------------------

/// Vision transformer encoder (patch embedding, class token, learned positions, pre-norm
/// blocks, final norm). Parameter names follow the common `blocks.N.attn.qkv` convention so
/// converted checkpoints load without renaming. Used for both `vit` (class-token feature)
/// and `mae_encoder` (mean over patch tokens, no masking).
template <std::floating_point T>
class VisionTransformer final : public FeatureExtractor<T> {
 public:
  VisionTransformer(const BackboneConfig& config, Rng& rng)
      : FeatureExtractor<T>(config),
        dim_(static_cast<std::size_t>(config.feature_dim)),
        grid_(static_cast<std::size_t>(config.image_size / config.patch_size)),
        patch_embed_(nn::Conv2dSpec{3, dim_, static_cast<std::size_t>(config.patch_size),
                                    static_cast<std::size_t>(config.patch_size), 0, true}),
        cls_token_({1, 1, dim_}),
        pos_embed_({1, grid_ * grid_ + 1, dim_}),
        norm_(dim_) {
    patch_embed_.init(rng);
    nn::fill_uniform(cls_token_.value, rng, 0.02);
    nn::fill_uniform(pos_embed_.value, rng, 0.02);
    blocks_.reserve(static_cast<std::size_t>(config.hidden_layers));
    for (int i = 0; i < config.hidden_layers; ++i) {
      blocks_.emplace_back(dim_, static_cast<std::size_t>(config.attention_heads),
                           static_cast<std::size_t>(config.mlp_dim));
      blocks_.back().init(rng);
    }
  }

  BackboneInfo info() const override {
    return {this->config_.kind, dim_, static_cast<std::size_t>(this->config_.image_size),
            blocks_.empty() ? 0 : blocks_.front().attention().heads(), blocks_.size(), 0};
  }

  std::size_t tokens() const { return grid_ * grid_ + 1; }

  Tensor<T> infer(const Tensor<T>& images) const override {
    this->check_images(images);
    Tensor<T> x = embed(patch_embed_.infer(images));
    for (const auto& block : blocks_) x = block.infer(x);
    return pool(norm_.infer(x));
  }

  Tensor<T> forward(const Tensor<T>& images) override {
    this->check_images(images);
    Tensor<T> x = embed(patch_embed_.forward(images));
    for (auto& block : blocks_) x = block.forward(x);
    return pool(norm_.forward(x));
  }

  void backward(const Tensor<T>& dfeatures) override {
    const std::size_t batch = dfeatures.dim(0), n = tokens(), patches = grid_ * grid_;
    Tensor<T> dy({batch, n, dim_});
    for (std::size_t b = 0; b < batch; ++b) {
      if (this->config_.pooling == TokenPooling::cls) {
        for (std::size_t d = 0; d < dim_; ++d) dy(b, 0, d) = dfeatures(b, d);
      } else {
        const T scale = T(1) / static_cast<T>(patches);
        for (std::size_t t = 1; t < n; ++t) {
          for (std::size_t d = 0; d < dim_; ++d) dy(b, t, d) = dfeatures(b, d) * scale;
        }
      }
    }
    Tensor<T> dx = norm_.backward(dy);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) dx = it->backward(dx);

    Tensor<T>& dcls = cls_token_.gradient();
    Tensor<T>& dpos = pos_embed_.gradient();
    Tensor<T> dpatch({batch, dim_, grid_, grid_});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t d = 0; d < dim_; ++d) {
          const T g = dx(b, t, d);
          dpos(0, t, d) += g;
          if (t == 0) {
            dcls(0, 0, d) += g;
          } else {
            dpatch[(b * dim_ + d) * patches + (t - 1)] = g;
          }
        }
      }
    }
    patch_embed_.backward(dpatch, false);
  }

  void collect(const std::string& prefix, nn::StateList<T>& out) override {
    nn::add_param(out, prefix, "cls_token", cls_token_);
    nn::add_param(out, prefix, "pos_embed", pos_embed_);
    patch_embed_.collect(nn::join_name(prefix, "patch_embed.proj"), out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect(nn::join_name(prefix, "blocks." + std::to_string(i)), out);
    }
    norm_.collect(nn::join_name(prefix, "norm"), out);
  }

 private:
  // (B, D, g, g) patch grid -> (B, 1 + g*g, D) tokens with class token and positions added.
  Tensor<T> embed(const Tensor<T>& patches) const {
    const std::size_t batch = patches.dim(0), n = tokens(), count = grid_ * grid_;
    Tensor<T> x({batch, n, dim_});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t d = 0; d < dim_; ++d) x(b, 0, d) = cls_token_.value[d] + pos_embed_.value(0, 0, d);
      for (std::size_t t = 1; t < n; ++t) {
        for (std::size_t d = 0; d < dim_; ++d) {
          x(b, t, d) = patches[(b * dim_ + d) * count + (t - 1)] + pos_embed_.value(0, t, d);
        }
      }
    }
    return x;
  }

  Tensor<T> pool(const Tensor<T>& x) const {
    const std::size_t batch = x.dim(0), n = tokens();
    Tensor<T> f({batch, dim_});
    for (std::size_t b = 0; b < batch; ++b) {
      if (this->config_.pooling == TokenPooling::cls) {
        for (std::size_t d = 0; d < dim_; ++d) f(b, d) = x(b, 0, d);
      } else {
        for (std::size_t d = 0; d < dim_; ++d) {
          double acc = 0.0;
          for (std::size_t t = 1; t < n; ++t) acc += x(b, t, d);
          f(b, d) = static_cast<T>(acc / static_cast<double>(n - 1));
        }
      }
    }
    return f;
  }

  std::size_t dim_;
  std::size_t grid_;
  nn::Conv2d<T> patch_embed_;
  nn::Parameter<T> cls_token_;
  nn::Parameter<T> pos_embed_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
};

// ---------------------------------------------------------------------------

template <std::floating_point T>
class BasicBlock {
 public:
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride)
      : conv1_(nn::Conv2dSpec{in, out, 3, stride, 1, false}),
        bn1_(out),
        conv2_(nn::Conv2dSpec{out, out, 3, 1, 1, false}),
        bn2_(out),
        has_downsample_(stride != 1 || in != out) {
    if (has_downsample_) {
      down_conv_ = nn::Conv2d<T>(nn::Conv2dSpec{in, out, 1, stride, 0, false});
      down_bn_ = nn::FrozenBatchNorm2d<T>(out);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (has_downsample_) down_conv_.init(rng);
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> main = bn2_.infer(conv2_.infer(nn::ReLU<T>::infer(bn1_.infer(conv1_.infer(x)))));
    main += has_downsample_ ? down_bn_.infer(down_conv_.infer(x)) : x;
    return nn::ReLU<T>::infer(std::move(main));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> main = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x)))));
    main += has_downsample_ ? down_bn_.forward(down_conv_.forward(x)) : x;
    return relu_out_.forward(main);
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) {
    const Tensor<T> dsum = relu_out_.backward(dy);
    Tensor<T> dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dsum)))),
                                   need_input_grad);
    if (has_downsample_) {
      Tensor<T> dshort = down_conv_.backward(down_bn_.backward(dsum), need_input_grad);
      if (need_input_grad) dx += dshort;
    } else if (need_input_grad) {
      dx += dsum;
    }
    return dx;
  }

  void collect(const std::string& prefix, nn::StateList<T>& out) {
    conv1_.collect(nn::join_name(prefix, "conv1"), out);
    bn1_.collect(nn::join_name(prefix, "bn1"), out);
    conv2_.collect(nn::join_name(prefix, "conv2"), out);
    bn2_.collect(nn::join_name(prefix, "bn2"), out);
    if (has_downsample_) {
      down_conv_.collect(nn::join_name(prefix, "downsample.0"), out);
      down_bn_.collect(nn::join_name(prefix, "downsample.1"), out);
    }
  }

 private:
  nn::Conv2d<T> conv1_;
  nn::FrozenBatchNorm2d<T> bn1_;
  nn::ReLU<T> relu1_;
  nn::Conv2d<T> conv2_;
  nn::FrozenBatchNorm2d<T> bn2_;
  bool has_downsample_;
  nn::Conv2d<T> down_conv_;
  nn::FrozenBatchNorm2d<T> down_bn_;
  nn::ReLU<T> relu_out_;
};

/// Residual convolutional network: 7x7/2 stem, 3x3/2 max pool, stages of basic blocks
/// (first block of every stage after the first downsamples by 2), global average pool.
/// Names follow the `conv1`, `bn1`, `layerN.M.*` convention. Batch norm statistics are frozen.
template <std::floating_point T>
class ConvResidualBackbone final : public FeatureExtractor<T> {
 public:
  ConvResidualBackbone(const BackboneConfig& config, Rng& rng)
      : FeatureExtractor<T>(config),
        stem_(nn::Conv2dSpec{3, static_cast<std::size_t>(config.stage_widths.front()), 7, 2, 3, false}),
        stem_bn_(static_cast<std::size_t>(config.stage_widths.front())),
        pool_(3, 2, 1) {
    stem_.init(rng);
    std::size_t in = static_cast<std::size_t>(config.stage_widths.front());
    for (std::size_t s = 0; s < config.stage_widths.size(); ++s) {
      const auto out = static_cast<std::size_t>(config.stage_widths[s]);
      std::vector<BasicBlock<T>> stage;
      for (int b = 0; b < config.stage_blocks[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        stage.emplace_back(b == 0 ? in : out, out, stride);
        stage.back().init(rng);
      }
      stages_.push_back(std::move(stage));
      in = out;
    }
  }

  BackboneInfo info() const override {
    std::size_t blocks = 0;
    for (const auto& s : stages_) blocks += s.size();
    return {BackboneKind::conv_residual, this->feature_dim(), static_cast<std::size_t>(this->config_.image_size), 0, 0,
            blocks};
  }

  Tensor<T> infer(const Tensor<T>& images) const override {
    this->check_images(images);
    Tensor<T> x = pool_.infer(nn::ReLU<T>::infer(stem_bn_.infer(stem_.infer(images))));
    for (const auto& stage : stages_) {
      for (const auto& block : stage) x = block.infer(x);
    }
    return nn::GlobalAvgPool<T>::infer(x);
  }

  Tensor<T> forward(const Tensor<T>& images) override {
    this->check_images(images);
    Tensor<T> x = pool_.forward(stem_relu_.forward(stem_bn_.forward(stem_.forward(images))));
    for (auto& stage : stages_) {
      for (auto& block : stage) x = block.forward(x);
    }
    return gap_.forward(x);
  }

  void backward(const Tensor<T>& dfeatures) override {
    Tensor<T> dx = gap_.backward(dfeatures);
    for (auto s = stages_.rbegin(); s != stages_.rend(); ++s) {
      for (auto b = s->rbegin(); b != s->rend(); ++b) dx = b->backward(dx, true);
    }
    stem_.backward(stem_bn_.backward(stem_relu_.backward(pool_.backward(dx))), false);
  }

  void collect(const std::string& prefix, nn::StateList<T>& out) override {
    stem_.collect(nn::join_name(prefix, "conv1"), out);
    stem_bn_.collect(nn::join_name(prefix, "bn1"), out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(nn::join_name(prefix, "layer" + std::to_string(s + 1) + "." + std::to_string(b)), out);
      }
    }
  }

 private:
  nn::Conv2d<T> stem_;
  nn::FrozenBatchNorm2d<T> stem_bn_;
  nn::ReLU<T> stem_relu_;
  nn::MaxPool2d<T> pool_;
  std::vector<std::vector<BasicBlock<T>>> stages_;
  nn::GlobalAvgPool<T> gap_;
};

// ---------------------------------------------------------------------------

/// Expected shapes of the (never executed) masked-autoencoder decoder arrays, keyed by name
/// without the `backbone.` prefix.
inline std::map<std::string, Shape> mae_decoder_shapes(const BackboneConfig& c) {
  const auto enc = static_cast<std::size_t>(c.feature_dim);
  const auto dec = static_cast<std::size_t>(c.decoder_dim);
  const auto grid = static_cast<std::size_t>(c.image_size / c.patch_size);
  const auto patch = static_cast<std::size_t>(c.patch_size);
  const std::size_t mlp = 4 * dec;
  std::map<std::string, Shape> s{
      {"mask_token", {1, 1, dec}},
      {"decoder_embed.weight", {dec, enc}},
      {"decoder_embed.bias", {dec}},
      {"decoder_pos_embed", {1, grid * grid + 1, dec}},
      {"decoder_norm.weight", {dec}},
      {"decoder_norm.bias", {dec}},
      {"decoder_pred.weight", {patch * patch * 3, dec}},
      {"decoder_pred.bias", {patch * patch * 3}},
  };
  for (int i = 0; i < c.decoder_layers; ++i) {
    const std::string p = "decoder_blocks." + std::to_string(i) + ".";
    s[p + "norm1.weight"] = {dec};
    s[p + "norm1.bias"] = {dec};
    s[p + "attn.qkv.weight"] = {3 * dec, dec};
    s[p + "attn.qkv.bias"] = {3 * dec};
    s[p + "attn.proj.weight"] = {dec, dec};
    s[p + "attn.proj.bias"] = {dec};
    s[p + "norm2.weight"] = {dec};
    s[p + "norm2.bias"] = {dec};
    s[p + "mlp.fc1.weight"] = {mlp, dec};
    s[p + "mlp.fc1.bias"] = {mlp};
    s[p + "mlp.fc2.weight"] = {dec, mlp};
    s[p + "mlp.fc2.bias"] = {dec};
  }
  return s;
}

/// Copies `backbone.*` arrays from a weights container into the extractor. Every expected
/// array must be present with the right shape, and every `backbone.*` array in the file must
/// be known; otherwise nothing is modified and a LoadError lists all problems.
template <std::floating_point T>
void load_backbone_weights(FeatureExtractor<T>& backbone, const Container& file) {
  constexpr std::string_view prefix = "backbone.";
  auto state = backbone.state();
  std::vector<std::string> problems;
  std::vector<std::pair<Tensor<T>*, const StoredArray*>> assignments;
  std::map<std::string, bool> seen;
  for (auto& ref : state) {
    const StoredArray* a = file.find(ref.name);
    seen[ref.name] = true;
    if (!a) {
      problems.push_back("missing " + ref.name + " " + shape_string(ref.value->shape()));
    } else if (a->shape != ref.value->shape()) {
      problems.push_back(ref.name + ": expected " + shape_string(ref.value->shape()) + ", file has " +
                         shape_string(a->shape));
    } else {
      assignments.emplace_back(ref.value, a);
    }
  }
  const auto& cfg = backbone.config();
  const auto decoder = cfg.kind == BackboneKind::mae_encoder ? mae_decoder_shapes(cfg) : std::map<std::string, Shape>{};
  for (const auto& a : file.arrays) {
    if (!a.name.starts_with(prefix) || seen.contains(a.name)) continue;
    const std::string local = a.name.substr(prefix.size());
    if (auto it = decoder.find(local); it != decoder.end()) {
      if (it->second != a.shape) {
        problems.push_back(a.name + ": expected " + shape_string(it->second) + ", file has " + shape_string(a.shape));
      }
    } else {
      problems.push_back("unexpected " + a.name + " " + shape_string(a.shape));
    }
  }
  if (!problems.empty()) {
    std::string msg = "backbone weights do not match the architecture:";
    for (const auto& p : problems) msg += (&p == &problems.front() ? " " : "; ") + p;
    throw LoadError(msg);
  }
  for (auto& [dst, src] : assignments) *dst = src->template to_tensor<T>();
}

/// Builds a feature extractor. Fresh parameters are drawn from `seed`; if the config names
/// pretrained weights they replace the fresh values after validation.
template <std::floating_point T>
std::unique_ptr<FeatureExtractor<T>> build_backbone(const BackboneConfig& config, std::uint64_t seed = 0) {
  config.validate();
  Rng rng(derive_seed(seed, "backbone"));
  std::unique_ptr<FeatureExtractor<T>> backbone;
  switch (config.kind) {
    case BackboneKind::tiny_test:
      backbone = std::make_unique<TinyBackbone<T>>(config, rng);
      break;
    case BackboneKind::vit:
    case BackboneKind::mae_encoder:
      backbone = std::make_unique<VisionTransformer<T>>(config, rng);
      break;
    case BackboneKind::conv_residual:
      backbone = std::make_unique<ConvResidualBackbone<T>>(config, rng);
      break;
  }
  if (config.pretrained_weights) {
    const Container file = read_container(*config.pretrained_weights, "weights", ErrorKind::load);
    load_backbone_weights(*backbone, file);
  }
  return backbone;
}

}  // namespace nutripred
