#pragma once

#include <utility>
#include <vector>

#include "kvd/tensor.hpp"

namespace kvd {

enum class PositionScheme { kRotary, kLearnedAbsolute };

struct TransformerConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int vocab_size = 96;
  int max_seq = 128;
  int d_ff = 256;
  PositionScheme position_scheme = PositionScheme::kRotary;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor w_q, w_k, w_v, w_o;  // [d_model x d_model]
  Tensor mlp_norm;   // [d_model]
  Tensor w_in;       // [d_model x d_ff]
  Tensor w_out;      // [d_ff x d_model]
};

/// Full weight set of one decoder. Teacher and student instantiate the same
/// shape set so caches transport between them.
struct DecoderWeights {
  TransformerConfig config;
  std::vector<LayerWeights> layers;
  Tensor token_embed;  // [V x d_model]
  Tensor pos_embed;    // [max_seq x d_model], learned-absolute only
  Tensor final_norm;   // [d_model]
  Tensor head;         // [d_model x V]

  static DecoderWeights init(const TransformerConfig& cfg, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<Tensor> parameters();
  void set_requires_grad(bool value);
  uint64_t weights_hash() const;
};

struct KVCache {
  std::vector<Tensor> keys;    // per layer, [seq x n_heads*d_head], post-rotary
  std::vector<Tensor> values;  // per layer, [seq x n_heads*d_head]

  int layer_count() const { return static_cast<int>(keys.size()); }
  int seq_len() const { return keys.empty() ? 0 : keys[0].dim(0); }
  KVCache detach() const;
};

struct AttentionMask {
  int seq_len = 0;
  std::vector<double> additive;  // [seq x seq], 0 visible, -1e9 hidden
  std::vector<uint8_t> valid;    // per position, 1 = real token, 0 = padding
};

constexpr double kMaskHidden = -1e9;

/// Causal visibility with padded positions hidden as keys for every query.
AttentionMask build_causal_mask(int seq_len, const std::vector<uint8_t>& padding = {});

/// Multi-head scaled dot-product attention with an additive mask. Q, K, V are
/// [seq x n_heads*d_head] with heads laid out contiguously along columns.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask& mask, int n_heads);

/// Rotates head-local coordinate pairs by position-dependent angles.
Tensor apply_rotary(const Tensor& x, int n_heads);

struct DecoderOutput {
  Tensor logits;   // [seq x V]
  KVCache cache;   // own cache in self mode, the injected cache unchanged otherwise
};

/// Full teacher-forced forward. When `inject` is non-null, K/V projections are
/// not computed anywhere: attention at layer l uses inject->keys[l]/values[l],
/// while queries, norms, MLPs and the head come from `weights`.
DecoderOutput decoder_forward(DecoderWeights& weights, const Tensor& input_embeds,
                              const AttentionMask& mask,
                              const KVCache* inject = nullptr);

/// Token rows from the embedding table, plus learned-absolute positions when
/// that scheme is active (rotary defers positions to attention).
Tensor embed_tokens(const DecoderWeights& weights, const std::vector<int>& ids);

}  // namespace kvd
