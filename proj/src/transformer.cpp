#include "kvd/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace kvd {

namespace {

constexpr double kRotaryBase = 10000.0;

Tensor rotate_with_sign(const Tensor& x, int n_heads, double sign) {
  int seq = x.dim(0), width = x.dim(1);
  int dh = width / n_heads;
  std::vector<double> out(x.data().size());
  for (int t = 0; t < seq; ++t) {
    const double* row = x.data().data() + static_cast<size_t>(t) * width;
    double* orow = out.data() + static_cast<size_t>(t) * width;
    for (int h = 0; h < n_heads; ++h) {
      const double* hr = row + h * dh;
      double* ho = orow + h * dh;
      for (int i = 0; i < dh / 2; ++i) {
        double theta = sign * t * std::pow(kRotaryBase, -2.0 * i / dh);
        double c = std::cos(theta), s = std::sin(theta);
        double a = hr[2 * i], b = hr[2 * i + 1];
        ho[2 * i] = a * c - b * s;
        ho[2 * i + 1] = a * s + b * c;
      }
    }
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace

void TransformerConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq < 1 ||
      d_ff < 1) {
    throw std::invalid_argument("TransformerConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("TransformerConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (position_scheme == PositionScheme::kRotary && d_head() % 2 != 0) {
    throw std::invalid_argument("TransformerConfig: rotary needs an even head dim, got " +
                                std::to_string(d_head()));
  }
}

DecoderWeights DecoderWeights::init(const TransformerConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  DecoderWeights w;
  w.config = cfg;
  double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  double ff_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = Tensor::full({cfg.d_model}, 1.0, true);
    lw.w_q = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std, true);
    lw.w_k = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std, true);
    lw.w_v = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std, true);
    lw.w_o = Tensor::randn({cfg.d_model, cfg.d_model}, rng, proj_std, true);
    lw.mlp_norm = Tensor::full({cfg.d_model}, 1.0, true);
    lw.w_in = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, proj_std, true);
    lw.w_out = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, ff_std, true);
    w.layers.push_back(std::move(lw));
  }
  w.token_embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02, true);
  if (cfg.position_scheme == PositionScheme::kLearnedAbsolute) {
    w.pos_embed = Tensor::randn({cfg.max_seq, cfg.d_model}, rng, 0.02, true);
  }
  w.final_norm = Tensor::full({cfg.d_model}, 1.0, true);
  w.head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, proj_std, true);
  return w;
}

std::vector<std::pair<std::string, Tensor>> DecoderWeights::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t l = 0; l < layers.size(); ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", layers[l].attn_norm);
    out.emplace_back(p + "w_q", layers[l].w_q);
    out.emplace_back(p + "w_k", layers[l].w_k);
    out.emplace_back(p + "w_v", layers[l].w_v);
    out.emplace_back(p + "w_o", layers[l].w_o);
    out.emplace_back(p + "mlp_norm", layers[l].mlp_norm);
    out.emplace_back(p + "w_in", layers[l].w_in);
    out.emplace_back(p + "w_out", layers[l].w_out);
  }
  out.emplace_back("token_embed", token_embed);
  if (pos_embed.defined()) out.emplace_back("pos_embed", pos_embed);
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("head", head);
  return out;
}

std::vector<Tensor> DecoderWeights::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void DecoderWeights::set_requires_grad(bool value) {
  for (auto& [name, t] : named_parameters()) t.impl()->requires_grad = value;
}

uint64_t DecoderWeights::weights_hash() const {
  uint64_t h = 1469598103934665603ull;
  for (auto& [name, t] : const_cast<DecoderWeights*>(this)->named_parameters()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
  }
  return h;
}

KVCache KVCache::detach() const {
  KVCache out;
  for (const auto& k : keys) out.keys.push_back(k.detach());
  for (const auto& v : values) out.values.push_back(v.detach());
  return out;
}

AttentionMask build_causal_mask(int seq_len, const std::vector<uint8_t>& padding) {
  if (!padding.empty() && static_cast<int>(padding.size()) != seq_len) {
    throw std::invalid_argument("build_causal_mask: padding length " +
                                std::to_string(padding.size()) + " != seq_len " +
                                std::to_string(seq_len));
  }
  AttentionMask m;
  m.seq_len = seq_len;
  m.additive.assign(static_cast<size_t>(seq_len) * seq_len, 0.0);
  m.valid.assign(static_cast<size_t>(seq_len), 1);
  for (int i = 0; i < seq_len; ++i) {
    if (!padding.empty() && padding[static_cast<size_t>(i)]) m.valid[static_cast<size_t>(i)] = 0;
  }
  for (int i = 0; i < seq_len; ++i) {
    for (int j = 0; j < seq_len; ++j) {
      bool hidden = j > i || !m.valid[static_cast<size_t>(j)];
      if (hidden) m.additive[static_cast<size_t>(i) * seq_len + j] = kMaskHidden;
    }
  }
  return m;
}

Tensor apply_rotary(const Tensor& x, int n_heads) {
  if (x.ndim() != 2 || x.dim(1) % n_heads != 0 || (x.dim(1) / n_heads) % 2 != 0) {
    throw std::invalid_argument("apply_rotary: bad shape " + shape_str(x.shape()) +
                                " for " + std::to_string(n_heads) + " heads");
  }
  Tensor rotated = rotate_with_sign(x, n_heads, 1.0);
  if (!x.requires_grad()) return rotated;
  // Rotation is orthogonal per pair; backward applies the inverse rotation.
  auto impl = rotated.impl();
  impl->requires_grad = true;
  impl->parents.push_back(x.impl());
  TensorImpl* self = impl.get();
  impl->backprop = [self, n_heads]() {
    auto& p = self->parents[0];
    if (!p->requires_grad) return;
    Tensor g = Tensor::from_data(self->shape, self->grad);
    Tensor back = rotate_with_sign(g, n_heads, -1.0);
    p->ensure_grad();
    for (size_t i = 0; i < back.data().size(); ++i) p->grad[i] += back.data()[i];
  };
  return rotated;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask& mask, int n_heads) {
  if (q.ndim() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw std::invalid_argument("causal_attention: Q " + shape_str(q.shape()) + ", K " +
                                shape_str(k.shape()) + ", V " + shape_str(v.shape()) +
                                " must be identical 2-d shapes");
  }
  int seq = q.dim(0), width = q.dim(1);
  if (width % n_heads != 0) {
    throw std::invalid_argument("causal_attention: width " + std::to_string(width) +
                                " not divisible by heads " + std::to_string(n_heads));
  }
  if (mask.seq_len != seq) {
    throw std::invalid_argument("causal_attention: mask seq " +
                                std::to_string(mask.seq_len) + " != input seq " +
                                std::to_string(seq));
  }
  int dh = width / n_heads;
  Tensor mask_t = Tensor::from_data({seq, seq}, mask.additive);
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), mask_t);
    Tensor attn = softmax_lastdim(scores);
    heads.push_back(matmul(attn, vh));
  }
  return n_heads == 1 ? heads[0] : concat(heads, 1);
}

DecoderOutput decoder_forward(DecoderWeights& weights, const Tensor& input_embeds,
                              const AttentionMask& mask, const KVCache* inject) {
  const auto& cfg = weights.config;
  int seq = input_embeds.dim(0);
  if (input_embeds.dim(1) != cfg.d_model) {
    throw std::invalid_argument("decoder_forward: embeds width " +
                                std::to_string(input_embeds.dim(1)) + " != d_model " +
                                std::to_string(cfg.d_model));
  }
  if (seq > cfg.max_seq) {
    throw std::invalid_argument("decoder_forward: seq " + std::to_string(seq) +
                                " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  if (inject) {
    if (inject->layer_count() != cfg.n_layers) {
      throw std::invalid_argument("decoder_forward: injected cache has " +
                                  std::to_string(inject->layer_count()) +
                                  " layers, decoder has " + std::to_string(cfg.n_layers));
    }
    if (inject->seq_len() != seq) {
      throw std::invalid_argument("decoder_forward: injected cache seq " +
                                  std::to_string(inject->seq_len()) + " != input seq " +
                                  std::to_string(seq));
    }
  }
  bool rotary = cfg.position_scheme == PositionScheme::kRotary;
  Tensor h = input_embeds;
  KVCache cache;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& lw = weights.layers[static_cast<size_t>(l)];
    Tensor xn = rms_norm(h, lw.attn_norm);
    Tensor q = matmul(xn, lw.w_q);
    if (rotary) q = apply_rotary(q, cfg.n_heads);
    Tensor key, val;
    if (inject) {
      key = inject->keys[static_cast<size_t>(l)];
      val = inject->values[static_cast<size_t>(l)];
    } else {
      key = matmul(xn, lw.w_k);
      if (rotary) key = apply_rotary(key, cfg.n_heads);
      val = matmul(xn, lw.w_v);
      cache.keys.push_back(key);
      cache.values.push_back(val);
    }
    Tensor attn = causal_attention(q, key, val, mask, cfg.n_heads);
    h = add(h, matmul(attn, lw.w_o));
    Tensor mn = rms_norm(h, lw.mlp_norm);
    h = add(h, matmul(gelu(matmul(mn, lw.w_in)), lw.w_out));
  }
  Tensor hn = rms_norm(h, weights.final_norm);
  DecoderOutput out;
  out.logits = matmul(hn, weights.head);
  out.cache = inject ? *inject : std::move(cache);
  return out;
}

Tensor embed_tokens(const DecoderWeights& weights, const std::vector<int>& ids) {
  Tensor rows = embedding_lookup(weights.token_embed, ids);
  if (weights.config.position_scheme == PositionScheme::kLearnedAbsolute) {
    int seq = static_cast<int>(ids.size());
    if (seq > weights.config.max_seq) {
      throw std::invalid_argument("embed_tokens: sequence longer than max_seq");
    }
    rows = add(rows, slice_rows(weights.pos_embed, 0, seq));
  }
  return rows;
}

}  // namespace kvd
