#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "physiosync/ad/nn.hpp"
#include "physiosync/dataset.hpp"

namespace physiosync::model {

using ad::Rng;
using ad::Shape;
using ad::Tensor;

struct EncoderConfig {
  std::size_t views = 16;       // z
  std::size_t embed_dim = 128;  // d_e
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 0;  // 0 means 4 * embed_dim
  std::size_t prompts = 4;
  std::size_t input_dim = 0;  // channels * samples of one clip
  double dropout = 0.1;

  std::size_t ffn() const { return ffn_dim ? ffn_dim : 4 * embed_dim; }
  std::size_t sequence_length() const { return 1 + views + prompts; }

  void validate() const {
    if (views == 0 || embed_dim == 0 || heads == 0 || blocks == 0 || input_dim == 0)
      throw ConfigError("encoder: views, embed_dim, heads, blocks and input_dim must be positive");
    if (embed_dim % heads != 0) throw ConfigError("encoder: embed_dim must be divisible by heads");
    if (!(dropout >= 0 && dropout < 1)) throw ConfigError("encoder: dropout must lie in [0, 1)");
  }
};

/// Forward-pass switches shared by all modules.
struct Mode {
  bool train = false;
  Rng* rng = nullptr;  // dropout stream; required when train and dropout > 0
};

template <class T>
Tensor<T> apply_dropout(const Tensor<T>& x, double p, const Mode& mode) {
  if (!mode.train || p == 0.0) return x;
  if (!mode.rng) throw ConfigError("dropout in train mode needs a random stream");
  return ad::dropout(x, static_cast<T>(p), *mode.rng, true);
}

/// Scaled dot-product attention per group: softmax(Q K^T / sqrt(d_head)) V.
/// q, k, v are [G x T x d_head].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(q.dim(2)));
  auto weights = ad::softmax(ad::scale(ad::bmm(q, ad::transpose(k)), inv_sqrt));
  return ad::bmm(weights, v);
}

template <class T>
struct MultiHeadAttention {
  ad::Linear<T> q, k, v, out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t h, Rng& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), out(dim, dim, rng), heads(h) {}

  /// x: [B x T x d]
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
    auto split = [&](const Tensor<T>& y) {
      return ad::reshape(ad::permute(ad::reshape(y, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
    };
    auto mixed = attention(split(q(x)), split(k(x)), split(v(x)));
    auto merged = ad::reshape(ad::permute(ad::reshape(mixed, {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, d});
    return out(merged);
  }

  void collect(const std::string& prefix, ad::ParamRefs<T>& refs) const {
    q.collect(prefix + ".q", refs);
    k.collect(prefix + ".k", refs);
    v.collect(prefix + ".v", refs);
    out.collect(prefix + ".out", refs);
  }
};

/// Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
template <class T>
struct TransformerBlock {
  ad::LayerNorm<T> norm1, norm2;
  MultiHeadAttention<T> attn;
  ad::Linear<T> ff1, ff2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ffn, Rng& rng)
      : norm1(dim), norm2(dim), attn(dim, heads, rng), ff1(dim, ffn, rng), ff2(ffn, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, double p, const Mode& mode) const {
    auto h = ad::add(x, apply_dropout(attn(norm1(x)), p, mode));
    auto f = ff2(apply_dropout(ad::relu(ff1(norm2(h))), p, mode));
    return ad::add(h, apply_dropout(f, p, mode));
  }

  void collect(const std::string& prefix, ad::ParamRefs<T>& refs) const {
    norm1.collect(prefix + ".norm1", refs);
    attn.collect(prefix + ".attn", refs);
    norm2.collect(prefix + ".norm2", refs);
    ff1.collect(prefix + ".ff1", refs);
    ff2.collect(prefix + ".ff2", refs);
  }
};

/// Modality encoder: gated multi-view embedding, token assembly with class,
/// prompt, positional and modality embeddings, then transformer blocks. The
/// class-token output is the clip representation.
///
/// The z view projections are stored as one [input_dim x z*d_e] matrix whose
/// i-th column block is view i; the per-view batch norms are likewise one
/// batch norm over z*d_e features (statistics are per feature either way).
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const std::size_t d = config.embed_dim, z = config.views;
    views_ = ad::Linear<T>(config.input_dim, z * d, rng);
    gate_ = ad::Linear<T>(config.input_dim, d, rng);
    view_norm_ = ad::BatchNorm<T>(z * d);
    const T s = T(0.02);
    cls_ = ad::normal_tensor<T>({d}, s, rng);
    pos_ = ad::normal_tensor<T>({config.sequence_length(), d}, s, rng);
    mod_ = ad::normal_tensor<T>({d}, s, rng);
    if (config.prompts) prompts_ = ad::normal_tensor<T>({config.prompts, d}, s, rng);
    for (std::size_t b = 0; b < config.blocks; ++b) blocks_.emplace_back(d, config.heads, config.ffn(), rng);
    out_norm_ = ad::LayerNorm<T>(d);
  }

  const EncoderConfig& config() const { return config_; }

  /// x: [B x input_dim] -> tokens [B x z x d_e]
  Tensor<T> mvge_forward(const Tensor<T>& x, const Mode& mode) {
    check_input(x);
    const std::size_t b = x.dim(0), z = config_.views, d = config_.embed_dim;
    auto embeddings = views_(x);
    auto gate = ad::sigmoid(gate_(x));
    auto gated = ad::hadamard(embeddings, ad::concat(std::vector<Tensor<T>>(z, gate), 1));
    return ad::reshape(ad::relu(view_norm_(gated, mode.train)), {b, z, d});
  }

  /// tokens [B x z x d_e] -> [B x (1 + z + P) x d_e]
  Tensor<T> assemble_tokens(const Tensor<T>& tokens) const {
    const std::size_t b = tokens.dim(0), d = config_.embed_dim, len = config_.sequence_length();
    std::vector<Tensor<T>> parts{ad::reshape(ad::repeat_rows(cls_, b), {b, 1, d}), tokens};
    if (config_.prompts)
      parts.push_back(ad::reshape(ad::repeat_rows(ad::reshape(prompts_, {config_.prompts * d}), b), {b, config_.prompts, d}));
    auto seq = ad::concat(parts, 1);
    seq = ad::reshape(ad::add_bias(ad::reshape(seq, {b, len * d}), ad::reshape(pos_, {len * d})), {b, len, d});
    return ad::add_bias(seq, mod_);
  }

  /// Full encoder: x [B x input_dim] -> class-token features [B x d_e]
  Tensor<T> encode(const Tensor<T>& x, const Mode& mode) {
    auto seq = assemble_tokens(mvge_forward(x, mode));
    for (const auto& block : blocks_) seq = block(seq, config_.dropout, mode);
    seq = out_norm_(seq);
    return ad::reshape(ad::slice(seq, 1, 0, 1), {x.dim(0), config_.embed_dim});
  }

  ad::ParamRefs<T> parameters() {
    ad::ParamRefs<T> refs;
    views_.collect("mvge.views", refs);
    gate_.collect("mvge.gate", refs);
    view_norm_.collect("mvge.norm", refs);
    refs.add("tokens.cls", cls_);
    refs.add("tokens.pos", pos_);
    refs.add("tokens.mod", mod_);
    if (config_.prompts) refs.add("tokens.prompts", prompts_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("block" + std::to_string(b), refs);
    out_norm_.collect("out_norm", refs);
    return refs;
  }

  // Direct access for tests that pin individual parameters.
  ad::Linear<T>& views() { return views_; }
  ad::Linear<T>& gate() { return gate_; }
  ad::BatchNorm<T>& view_norm() { return view_norm_; }
  Tensor<T>& cls_token() { return cls_; }
  Tensor<T>& positional() { return pos_; }
  Tensor<T>& modality_embedding() { return mod_; }
  Tensor<T>& prompts() { return prompts_; }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != config_.input_dim)
      throw ShapeError("encoder expects [B x " + std::to_string(config_.input_dim) + "], got " + ad::to_string(x.shape()));
  }

  EncoderConfig config_;
  ad::Linear<T> views_, gate_;
  ad::BatchNorm<T> view_norm_;
  Tensor<T> cls_, pos_, mod_, prompts_;
  std::vector<TransformerBlock<T>> blocks_;
  ad::LayerNorm<T> out_norm_;
};

/// Flattens clips of one modality and resolution into rows of [B x C*S].
template <class T>
Tensor<T> clips_to_tensor(const std::vector<data::Clip>& clips) {
  if (clips.empty()) throw ShapeError("clips_to_tensor: empty batch");
  const auto& first = clips.front();
  const std::size_t width = first.data.data.size();
  std::vector<T> values;
  values.reserve(clips.size() * width);
  for (const auto& c : clips) {
    if (c.modality != first.modality) throw DatasetError("encoder batch mixes modalities '" + first.modality + "' and '" + c.modality + "'");
    if (c.t_seconds != first.t_seconds || c.data.data.size() != width)
      throw ShapeError("encoder batch mixes clip lengths");
    values.insert(values.end(), c.data.data.begin(), c.data.data.end());
  }
  return Tensor<T>({clips.size(), width}, std::move(values));
}

}  // namespace physiosync::model
