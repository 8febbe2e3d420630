#include "mixtrain/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixtrain/errors.hpp"

namespace mixtrain {

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::transformer ? "transformer" : "mlp";
}

std::string to_string(LossTarget target) {
  switch (target) {
    case LossTarget::masked: return "masked";
    case LossTarget::unmasked: return "unmasked";
    case LossTarget::all: return "all";
  }
  return "masked";
}

BackboneKind parse_backbone_kind(const std::string& text) {
  if (text == "transformer") return BackboneKind::transformer;
  if (text == "mlp") return BackboneKind::mlp;
  throw ConfigError("unknown backbone kind '" + text + "' (transformer|mlp)");
}

LossTarget parse_loss_target(const std::string& text) {
  if (text == "masked") return LossTarget::masked;
  if (text == "unmasked") return LossTarget::unmasked;
  if (text == "all") return LossTarget::all;
  throw ConfigError("unknown loss target '" + text + "' (masked|unmasked|all)");
}

std::size_t BackboneConfig::tokens() const {
  return (input_height / patch_size) * (input_width / patch_size);
}

std::size_t BackboneConfig::patch_dim() const {
  return patch_size * patch_size * channels;
}

void BackboneConfig::validate() const {
  if (!input_height || !input_width || !channels || !patch_size || !embed_dim || !depth || !num_heads || !mlp_ratio)
    throw ConfigError("backbone extents must be positive");
  if (input_height % patch_size || input_width % patch_size)
    throw ConfigError("patch size " + std::to_string(patch_size) + " does not divide " +
                      std::to_string(input_height) + "x" + std::to_string(input_width));
  if (tokens() < 2) throw ConfigError("backbone needs at least 2 tokens, got " + std::to_string(tokens()));
  if (kind == BackboneKind::transformer && embed_dim % num_heads)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
}

void ModelConfig::validate() const {
  backbone.validate();
  if (!decoder.dim || !decoder.depth || !decoder.num_heads || !decoder.mlp_ratio)
    throw ConfigError("decoder extents must be positive");
  if (decoder.dim % decoder.num_heads)
    throw ConfigError("decoder dim " + std::to_string(decoder.dim) + " is not divisible by its heads");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw ConfigError("mask_ratio must lie in [0, 1), got " + std::to_string(mask_ratio));
  if (tasks.empty()) throw ConfigError("model needs at least one classification head");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].num_classes < 2) throw ConfigError("classification head needs at least 2 classes");
    for (std::size_t j = 0; j < i; ++j)
      if (tasks[j].task_id == tasks[i].task_id)
        throw ConfigError("duplicate task id " + std::to_string(tasks[i].task_id));
  }
}

MaskPlan make_mask_plan(std::size_t token_count, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw ValidationError("mask ratio must lie in [0, 1), got " + std::to_string(mask_ratio));
  const auto count = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(token_count)));
  std::vector<std::size_t> order(token_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng(seed);
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + rng.uniform_index(token_count - i)]);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return MaskPlan{token_count, std::move(order), seed};
}

Mask reconstruction_mask(const MaskPlan& plan, std::size_t batch, std::size_t patch_dim, LossTarget target) {
  std::vector<std::uint8_t> masked_token(plan.token_count, 0);
  for (auto i : plan.masked_indices) masked_token.at(i) = 1;
  Mask mask(batch * plan.token_count * patch_dim, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < plan.token_count; ++t) {
      bool take = target == LossTarget::all || (target == LossTarget::masked) == (masked_token[t] != 0);
      if (!take) continue;
      auto first = mask.begin() + static_cast<std::ptrdiff_t>((b * plan.token_count + t) * patch_dim);
      std::fill(first, first + static_cast<std::ptrdiff_t>(patch_dim), std::uint8_t{1});
    }
  return mask;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t p) {
  if (images.rank() != 3 && images.rank() != 4)
    throw DimensionError("patchify expects [C,H,W] or [B,C,H,W], got " + shape_string(images.shape()));
  const bool batched = images.rank() == 4;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? images.dim(0) : 1;
  const std::size_t c = images.dim(off), h = images.dim(off + 1), w = images.dim(off + 2);
  if (p == 0 || h % p || w % p)
    throw ConfigError("patch size " + std::to_string(p) + " does not divide " + std::to_string(h) + "x" +
                      std::to_string(w));
  const std::size_t gh = h / p, gw = w / p, pd = p * p * c;
  Shape shape = batched ? Shape{batch, gh * gw, pd} : Shape{gh * gw, pd};
  Tensor<T> out(std::move(shape));
  auto src = images.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        T* tok = dst.data() + ((b * gh + gy) * gw + gx) * pd;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              tok[(py * p + px) * c + ch] = src[((b * c + ch) * h + gy * p + py) * w + gx * p + px];
      }
  return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p || w % p) throw ConfigError("patch size does not divide image extents");
  const std::size_t gh = h / p, gw = w / p, pd = p * p * c;
  const bool batched = tokens.rank() == 3;
  if ((tokens.rank() != 2 && !batched) || tokens.shape().back() != pd || tokens.dim(batched ? 1 : 0) != gh * gw)
    throw DimensionError("unpatchify: tokens " + shape_string(tokens.shape()) + " do not tile " +
                         std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t batch = batched ? tokens.dim(0) : 1;
  Tensor<T> out(batched ? Shape{batch, c, h, w} : Shape{c, h, w});
  auto src = tokens.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        const T* tok = src.data() + ((b * gh + gy) * gw + gx) * pd;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              dst[((b * c + ch) * h + gy * p + py) * w + gx * p + px] = tok[(py * p + px) * c + ch];
      }
  return out;
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& target_patches, const MaskPlan& plan,
                              LossTarget target) {
  if (target_patches.rank() != 3 || target_patches.dim(1) != plan.token_count)
    throw ValidationError("mask plan covers " + std::to_string(plan.token_count) + " tokens, target is " +
                          shape_string(target_patches.shape()));
  if (target == LossTarget::all) return mse(pred, target_patches);
  return mse(pred, target_patches,
             reconstruction_mask(plan, target_patches.dim(0), target_patches.dim(2), target));
}

template <typename T>
Tensor<T> Block<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> h = x;
  if (has_attention) h = add(h, proj(attention(qkv(norm1(h)), heads)));
  return add(h, fc2(gelu(fc1(norm2(h)))));
}

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, RngStream& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, RngStream& rng) {
  return Linear<T>{trunc_normal<T>({in, out}, rng), filled<T>({out}, T(0))};
}

template <typename T>
LayerNorm<T> make_norm(std::size_t width) {
  return LayerNorm<T>{filled<T>({width}, T(1)), filled<T>({width}, T(0))};
}

template <typename T>
Block<T> make_block(std::size_t width, std::size_t heads, std::size_t mlp_ratio, bool attention, RngStream& rng) {
  Block<T> b;
  b.has_attention = attention;
  b.heads = heads;
  if (attention) {
    b.norm1 = make_norm<T>(width);
    b.qkv = make_linear<T>(width, 3 * width, rng);
    b.proj = make_linear<T>(width, width, rng);
  }
  b.norm2 = make_norm<T>(width);
  b.fc1 = make_linear<T>(width, mlp_ratio * width, rng);
  b.fc2 = make_linear<T>(mlp_ratio * width, width, rng);
  return b;
}

template <typename T>
void push_linear(std::vector<NamedParameter<T>>& out, const std::string& name, const Linear<T>& l, ParamGroup g,
                 int task = -1) {
  out.push_back({name + ".weight", g, task, true, l.weight});
  out.push_back({name + ".bias", g, task, false, l.bias});
}

template <typename T>
void push_norm(std::vector<NamedParameter<T>>& out, const std::string& name, const LayerNorm<T>& n, ParamGroup g) {
  out.push_back({name + ".gamma", g, -1, false, n.gamma});
  out.push_back({name + ".beta", g, -1, false, n.beta});
}

template <typename T>
void push_block(std::vector<NamedParameter<T>>& out, const std::string& name, const Block<T>& b, ParamGroup g) {
  if (b.has_attention) {
    push_norm(out, name + ".norm1", b.norm1, g);
    push_linear(out, name + ".qkv", b.qkv, g);
    push_linear(out, name + ".proj", b.proj, g);
  }
  push_norm(out, name + ".norm2", b.norm2, g);
  push_linear(out, name + ".fc1", b.fc1, g);
  push_linear(out, name + ".fc2", b.fc2, g);
}

std::uint64_t block_macs(std::size_t tokens, std::size_t width, std::size_t mlp_ratio, bool attention) {
  const std::uint64_t t = tokens, e = width;
  std::uint64_t macs = 2 * t * e * (mlp_ratio * e);
  if (attention) macs += t * e * 3 * e + 2 * t * t * e + t * e * e;
  return macs;
}

}  // namespace

template <typename T>
MixModel<T>::MixModel(ModelConfig config, RngStream& init) : config_(std::move(config)) {
  config_.validate();
  const auto& bb = config_.backbone;
  const auto& dc = config_.decoder;
  const std::size_t t = bb.tokens();
  const bool attn = bb.kind == BackboneKind::transformer;

  patch_embed_ = make_linear<T>(bb.patch_dim(), bb.embed_dim, init);
  pos_embed_ = trunc_normal<T>({t, bb.embed_dim}, init);
  for (std::size_t i = 0; i < bb.depth; ++i)
    blocks_.push_back(make_block<T>(bb.embed_dim, bb.num_heads, bb.mlp_ratio, attn, init));
  norm_ = make_norm<T>(bb.embed_dim);

  mask_token_ = trunc_normal<T>({bb.embed_dim}, init);
  dec_embed_ = make_linear<T>(bb.embed_dim, dc.dim, init);
  dec_pos_embed_ = trunc_normal<T>({t, dc.dim}, init);
  for (std::size_t i = 0; i < dc.depth; ++i)
    dec_blocks_.push_back(make_block<T>(dc.dim, dc.num_heads, dc.mlp_ratio, true, init));
  dec_norm_ = make_norm<T>(dc.dim);
  dec_pred_ = make_linear<T>(dc.dim, bb.patch_dim(), init);

  for (const auto& task : config_.tasks)
    heads_.push_back(ClassifierHead{task.task_id, make_linear<T>(bb.embed_dim, task.num_classes, init)});
}

template <typename T>
Tensor<T> MixModel<T>::encode(const Tensor<T>& tokens) const {
  const auto& bb = config_.backbone;
  if (tokens.rank() != 3 || tokens.dim(1) != bb.tokens() || tokens.dim(2) != bb.patch_dim())
    throw DimensionError("encode: tokens " + shape_string(tokens.shape()) + " do not match patch embedding [b x " +
                         std::to_string(bb.tokens()) + " x " + std::to_string(bb.patch_dim()) + "]");
  Tensor<T> x = add_position(patch_embed_(tokens), pos_embed_);
  for (const auto& block : blocks_) x = block(x);
  return norm_(x);
}

template <typename T>
Tensor<T> MixModel<T>::decode(const Tensor<T>& features, const MaskPlan& plan) const {
  if (features.rank() != 3 || features.dim(2) != config_.backbone.embed_dim)
    throw DimensionError("decode: features " + shape_string(features.shape()));
  if (plan.token_count != features.dim(1))
    throw ValidationError("mask plan covers " + std::to_string(plan.token_count) + " tokens, features have " +
                          std::to_string(features.dim(1)));
  Tensor<T> x = plan.masked_indices.empty() ? features : replace_tokens(features, mask_token_, plan.masked_indices);
  x = add_position(dec_embed_(x), dec_pos_embed_);
  for (const auto& block : dec_blocks_) x = block(x);
  return dec_pred_(dec_norm_(x));
}

template <typename T>
Tensor<T> MixModel<T>::reconstruct(const Tensor<T>& features, const MaskPlan& plan,
                                   const Tensor<T>& target_patches) const {
  return reconstruct(features, plan, target_patches, config_.loss_target);
}

template <typename T>
Tensor<T> MixModel<T>::reconstruct(const Tensor<T>& features, const MaskPlan& plan, const Tensor<T>& target_patches,
                                   LossTarget target) const {
  return reconstruction_loss(decode(features, plan), target_patches, plan, target);
}

template <typename T>
const typename MixModel<T>::ClassifierHead& MixModel<T>::head(int task_id) const {
  for (const auto& h : heads_)
    if (h.task_id == task_id) return h;
  throw ValidationError("no classification head registered for task " + std::to_string(task_id));
}

template <typename T>
Tensor<T> MixModel<T>::classify(const Tensor<T>& features, int task_id) const {
  const auto& h = head(task_id);
  if (features.rank() != 3 || features.dim(2) != config_.backbone.embed_dim)
    throw DimensionError("classify: features " + shape_string(features.shape()));
  return h.fc(mean_tokens(features));
}

template <typename T>
bool MixModel<T>::has_task(int task_id) const {
  return std::any_of(heads_.begin(), heads_.end(), [&](const auto& h) { return h.task_id == task_id; });
}

template <typename T>
std::vector<int> MixModel<T>::task_ids() const {
  std::vector<int> ids;
  for (const auto& h : heads_) ids.push_back(h.task_id);
  return ids;
}

template <typename T>
std::vector<NamedParameter<T>> MixModel<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  const auto bb = ParamGroup::backbone;
  push_linear(out, "backbone.patch_embed", patch_embed_, bb);
  out.push_back({"backbone.pos_embed", bb, -1, false, pos_embed_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) push_block(out, "backbone.blocks." + std::to_string(i), blocks_[i], bb);
  push_norm(out, "backbone.norm", norm_, bb);

  const auto rh = ParamGroup::recon_head;
  out.push_back({"recon.mask_token", rh, -1, false, mask_token_});
  push_linear(out, "recon.embed", dec_embed_, rh);
  out.push_back({"recon.pos_embed", rh, -1, false, dec_pos_embed_});
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
    push_block(out, "recon.blocks." + std::to_string(i), dec_blocks_[i], rh);
  push_norm(out, "recon.norm", dec_norm_, rh);
  push_linear(out, "recon.pred", dec_pred_, rh);

  for (const auto& h : heads_) push_linear(out, "cls." + std::to_string(h.task_id), h.fc, ParamGroup::cls_head, h.task_id);
  return out;
}

template <typename T>
std::size_t MixModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

MacProfile mac_profile(const ModelConfig& config) {
  const auto& bb = config.backbone;
  const auto& dc = config.decoder;
  const std::uint64_t t = bb.tokens();
  MacProfile m;
  m.backbone = t * bb.patch_dim() * bb.embed_dim;
  for (std::size_t i = 0; i < bb.depth; ++i)
    m.backbone += block_macs(t, bb.embed_dim, bb.mlp_ratio, bb.kind == BackboneKind::transformer);
  m.recon_head = t * bb.embed_dim * dc.dim + t * dc.dim * bb.patch_dim();
  for (std::size_t i = 0; i < dc.depth; ++i) m.recon_head += block_macs(t, dc.dim, dc.mlp_ratio, true);
  for (const auto& task : config.tasks) m.cls_heads.push_back(std::uint64_t{bb.embed_dim} * task.num_classes);
  return m;
}

template class MixModel<float>;
template class MixModel<double>;
template struct Block<float>;
template struct Block<double>;

#define MIXTRAIN_INSTANTIATE_NN(T)                                                                          \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> unpatchify(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);    \
  template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, const MaskPlan&, LossTarget);

MIXTRAIN_INSTANTIATE_NN(float)
MIXTRAIN_INSTANTIATE_NN(double)

#undef MIXTRAIN_INSTANTIATE_NN

}  // namespace mixtrain
