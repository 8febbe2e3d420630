#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixtrain/ops.hpp"
#include "mixtrain/rng.hpp"
#include "mixtrain/tensor.hpp"

namespace mixtrain {

enum class BackboneKind { transformer, mlp };
enum class LossTarget { masked, unmasked, all };

std::string to_string(BackboneKind kind);
std::string to_string(LossTarget target);
BackboneKind parse_backbone_kind(const std::string& text);
LossTarget parse_loss_target(const std::string& text);

struct BackboneConfig {
  std::size_t input_height = 16;
  std::size_t input_width = 16;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 4;
  BackboneKind kind = BackboneKind::transformer;

  std::size_t tokens() const;
  std::size_t patch_dim() const;  // patch_size^2 * channels
  void validate() const;          // throws ConfigError
};

struct DecoderConfig {
  std::size_t dim = 32;
  std::size_t depth = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 4;
};

struct TaskHeadSpec {
  int task_id = 0;
  std::size_t num_classes = 10;
};

struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  std::vector<TaskHeadSpec> tasks{TaskHeadSpec{}};
  double mask_ratio = 0.75;
  LossTarget loss_target = LossTarget::masked;

  void validate() const;
};

/// Token positions hidden from the reconstruction path for one step.
struct MaskPlan {
  std::size_t token_count = 0;
  std::vector<std::size_t> masked_indices;  // sorted, unique
  std::uint64_t seed = 0;
};

// Uniform subset of round(mask_ratio * token_count) positions.
MaskPlan make_mask_plan(std::size_t token_count, double mask_ratio, std::uint64_t seed);

// Per-element selection mask over target patches [b, t, p] for a loss target.
Mask reconstruction_mask(const MaskPlan& plan, std::size_t batch, std::size_t patch_dim, LossTarget target);

// [C, H, W] -> [tokens, p*p*C] or [B, C, H, W] -> [B, tokens, p*p*C].
// Patches are taken row-major over the grid; each patch is flattened as
// (row, col, channel).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size);

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t channels, std::size_t height, std::size_t width,
                     std::size_t patch_size);

// MSE between predicted and target patches on the plan's loss positions.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& target_patches, const MaskPlan& plan,
                              LossTarget target);

enum class ParamGroup { backbone, recon_head, cls_head };

template <typename T>
struct NamedParameter {
  std::string name;
  ParamGroup group;
  int task_id = -1;  // cls_head only
  bool decay = true;
  Tensor<T> tensor;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Pre-norm residual block; `attn` is absent for MLP-only backbones.
template <typename T>
struct Block {
  bool has_attention = true;
  std::size_t heads = 1;
  LayerNorm<T> norm1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;

  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Shared backbone f, a reconstruction decoder and one classifier per task.
template <typename T>
class MixModel {
 public:
  MixModel(ModelConfig config, RngStream& init);

  const ModelConfig& config() const { return config_; }

  // tokens [b, t, patch_dim] -> features [b, t, embed_dim]; no masking.
  Tensor<T> encode(const Tensor<T>& tokens) const;
  // Features with masked rows replaced by the mask token, decoded to patches.
  Tensor<T> decode(const Tensor<T>& features, const MaskPlan& plan) const;
  Tensor<T> reconstruct(const Tensor<T>& features, const MaskPlan& plan, const Tensor<T>& target_patches) const;
  Tensor<T> reconstruct(const Tensor<T>& features, const MaskPlan& plan, const Tensor<T>& target_patches,
                        LossTarget target) const;
  // Mean-pooled full features through the task's linear head.
  Tensor<T> classify(const Tensor<T>& features, int task_id) const;

  bool has_task(int task_id) const;
  std::vector<int> task_ids() const;

  std::vector<NamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;

 private:
  struct ClassifierHead {
    int task_id;
    Linear<T> fc;
  };

  const ClassifierHead& head(int task_id) const;

  ModelConfig config_;
  Linear<T> patch_embed_;
  Tensor<T> pos_embed_;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> norm_;

  Tensor<T> mask_token_;
  Linear<T> dec_embed_;
  Tensor<T> dec_pos_embed_;
  std::vector<Block<T>> dec_blocks_;
  LayerNorm<T> dec_norm_;
  Linear<T> dec_pred_;

  std::vector<ClassifierHead> heads_;
};

// Per-sample forward multiply-accumulate counts. Backward is counted as
// twice the forward cost.
struct MacProfile {
  std::uint64_t backbone = 0;
  std::uint64_t recon_head = 0;
  std::vector<std::uint64_t> cls_heads;  // in task order of ModelConfig
};

MacProfile mac_profile(const ModelConfig& config);

extern template class MixModel<float>;
extern template class MixModel<double>;

}  // namespace mixtrain
