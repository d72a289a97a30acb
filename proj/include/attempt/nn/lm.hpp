#pragma once
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attempt/core/error.hpp"
#include "attempt/core/hash.hpp"
#include "attempt/core/rng.hpp"
#include "attempt/core/tensor.hpp"

namespace attempt {

struct LMConfig {
  std::size_t vocab_size = 64;
  std::size_t model_dim = 64;
  std::size_t n_layers = 2;  // per stack (encoder and decoder)
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 128;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (model_dim == 0 || n_heads == 0 || model_dim % n_heads != 0)
      throw ConfigError("LMConfig: model_dim must be divisible by n_heads");
    if (vocab_size < 4) throw ConfigError("LMConfig: vocab_size too small");
    if (n_layers == 0 || ffn_dim == 0 || max_len == 0)
      throw ConfigError("LMConfig: zero-sized dimension");
  }
};

template <class T>
struct EmbeddedInput {
  Tensor<T> X;             // [l x d]
  std::vector<bool> mask;  // false at pad positions
  std::vector<int> tokens;
};

// Pre-LN transformer encoder-decoder with learned absolute positions and a
// tied embedding/output matrix. Parameters are frozen immediately after
// construction; the brief optional pretraining pass in the trainer unfreezes
// them, trains, and freezes again before the model is ever used as a
// backbone.
template <class T>
class FrozenLM {
 public:
  struct Attn {
    Tensor<T> wq, wk, wv, wo;
  };
  struct EncLayer {
    Tensor<T> ln1_g, ln1_b;
    Attn attn;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, b1, w2, b2;
  };
  struct DecLayer {
    Tensor<T> ln1_g, ln1_b;
    Attn self_attn;
    Tensor<T> ln2_g, ln2_b;
    Attn cross_attn;
    Tensor<T> ln3_g, ln3_b;
    Tensor<T> w1, b1, w2, b2;
  };

  FrozenLM(const LMConfig& cfg, Rng rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.model_dim;
    // Fan-in scaling keeps the random backbone signal-preserving, which the
    // soft prompts need to have any leverage before/without pretraining.
    auto w = [&](std::size_t r, std::size_t c) {
      return Tensor<T>::randn({r, c}, rng, 1.0 / std::sqrt(static_cast<double>(r)));
    };
    embedding_ = Tensor<T>::randn({cfg.vocab_size, d}, rng,
                                  1.0 / std::sqrt(static_cast<double>(d)));
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d));
    pos_enc_ = Tensor<T>::randn({cfg.max_len, d}, rng, emb_scale);
    pos_dec_ = Tensor<T>::randn({cfg.max_len, d}, rng, emb_scale);
    auto make_attn = [&] { return Attn{w(d, d), w(d, d), w(d, d), w(d, d)}; };
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      EncLayer l;
      l.ln1_g = Tensor<T>::full({d}, T(1));
      l.ln1_b = Tensor<T>::zeros({d});
      l.attn = make_attn();
      l.ln2_g = Tensor<T>::full({d}, T(1));
      l.ln2_b = Tensor<T>::zeros({d});
      l.w1 = w(d, cfg.ffn_dim);
      l.b1 = Tensor<T>::zeros({cfg.ffn_dim});
      l.w2 = w(cfg.ffn_dim, d);
      l.b2 = Tensor<T>::zeros({d});
      enc_.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      DecLayer l;
      l.ln1_g = Tensor<T>::full({d}, T(1));
      l.ln1_b = Tensor<T>::zeros({d});
      l.self_attn = make_attn();
      l.ln2_g = Tensor<T>::full({d}, T(1));
      l.ln2_b = Tensor<T>::zeros({d});
      l.cross_attn = make_attn();
      l.ln3_g = Tensor<T>::full({d}, T(1));
      l.ln3_b = Tensor<T>::zeros({d});
      l.w1 = w(d, cfg.ffn_dim);
      l.b1 = Tensor<T>::zeros({cfg.ffn_dim});
      l.w2 = w(cfg.ffn_dim, d);
      l.b2 = Tensor<T>::zeros({d});
      dec_.push_back(std::move(l));
    }
    enc_ln_g_ = Tensor<T>::full({d}, T(1));
    enc_ln_b_ = Tensor<T>::zeros({d});
    dec_ln_g_ = Tensor<T>::full({d}, T(1));
    dec_ln_b_ = Tensor<T>::zeros({d});
  }

  const LMConfig& config() const { return cfg_; }
  const Tensor<T>& embedding() const { return embedding_; }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embedding", embedding_);
    out.emplace_back("pos_enc", pos_enc_);
    out.emplace_back("pos_dec", pos_dec_);
    auto add_attn = [&](const std::string& p, const Attn& a) {
      out.emplace_back(p + ".wq", a.wq);
      out.emplace_back(p + ".wk", a.wk);
      out.emplace_back(p + ".wv", a.wv);
      out.emplace_back(p + ".wo", a.wo);
    };
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      const std::string p = "enc." + std::to_string(i);
      out.emplace_back(p + ".ln1_g", enc_[i].ln1_g);
      out.emplace_back(p + ".ln1_b", enc_[i].ln1_b);
      add_attn(p + ".attn", enc_[i].attn);
      out.emplace_back(p + ".ln2_g", enc_[i].ln2_g);
      out.emplace_back(p + ".ln2_b", enc_[i].ln2_b);
      out.emplace_back(p + ".w1", enc_[i].w1);
      out.emplace_back(p + ".b1", enc_[i].b1);
      out.emplace_back(p + ".w2", enc_[i].w2);
      out.emplace_back(p + ".b2", enc_[i].b2);
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      const std::string p = "dec." + std::to_string(i);
      out.emplace_back(p + ".ln1_g", dec_[i].ln1_g);
      out.emplace_back(p + ".ln1_b", dec_[i].ln1_b);
      add_attn(p + ".self", dec_[i].self_attn);
      out.emplace_back(p + ".ln2_g", dec_[i].ln2_g);
      out.emplace_back(p + ".ln2_b", dec_[i].ln2_b);
      add_attn(p + ".cross", dec_[i].cross_attn);
      out.emplace_back(p + ".ln3_g", dec_[i].ln3_g);
      out.emplace_back(p + ".ln3_b", dec_[i].ln3_b);
      out.emplace_back(p + ".w1", dec_[i].w1);
      out.emplace_back(p + ".b1", dec_[i].b1);
      out.emplace_back(p + ".w2", dec_[i].w2);
      out.emplace_back(p + ".b2", dec_[i].b2);
    }
    out.emplace_back("enc_ln_g", enc_ln_g_);
    out.emplace_back("enc_ln_b", enc_ln_b_);
    out.emplace_back("dec_ln_g", dec_ln_g_);
    out.emplace_back("dec_ln_b", dec_ln_b_);
    return out;
  }

  std::size_t trainable_param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters())
      if (t.requires_grad()) n += t.numel();
    return n;
  }

  // Only the brief pretraining pass may flip this; everything downstream
  // requires the frozen state.
  void set_trainable(bool trainable) {
    for (auto& [name, t] : named_parameters())
      t.node()->requires_grad = trainable;
  }

  std::uint64_t theta_hash() const {
    Fnv1a64 h;
    for (auto& [name, t] : named_parameters()) {
      h.update_string(name);
      h.update_values(t.data());
    }
    return h.digest();
  }

  EmbeddedInput<T> embed(const std::vector<int>& tokens) const {
    std::vector<bool> mask;
    for (int tok : tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab_size)
        throw DataError("embed: token id " + std::to_string(tok) +
                        " outside vocabulary of size " +
                        std::to_string(cfg_.vocab_size));
      mask.push_back(tok != cfg_.pad_id);
    }
    return {gather_rows(embedding_, tokens), mask, tokens};
  }

  // Teacher-forced negative log-likelihood of `target` given the already
  // prompted encoder embedding sequence. `target` must end with eos_id;
  // pad_id positions in the target are ignored in the loss.
  Tensor<T> conditional_nll(const Tensor<T>& prompted_input,
                            const std::vector<bool>& input_mask,
                            const std::vector<int>& target) const {
    const std::size_t s = prompted_input.rows();
    if (s > cfg_.max_len || target.size() + 1 > cfg_.max_len)
      throw DimensionError("conditional_nll: sequence exceeds max_len " +
                           std::to_string(cfg_.max_len));
    if (input_mask.size() != s)
      throw DimensionError("conditional_nll: mask length mismatch");
    auto enc_out = encode(prompted_input, input_mask);

    std::vector<int> dec_in;
    dec_in.push_back(cfg_.bos_id);
    for (std::size_t i = 0; i + 1 < target.size(); ++i) dec_in.push_back(target[i]);
    auto logits = decode_logits(dec_in, enc_out, input_mask);
    return cross_entropy(logits, target, cfg_.pad_id);
  }

  Tensor<T> encode(const Tensor<T>& input, const std::vector<bool>& mask) const {
    const std::size_t s = input.rows();
    auto x = add(input, slice_rows(pos_enc_, 0, s));
    auto attn_mask = key_mask_matrix(s, mask);
    for (const auto& l : enc_) {
      auto h = layer_norm(x, l.ln1_g, l.ln1_b, ln_eps());
      x = add(x, mha(l.attn, h, h, attn_mask));
      auto f = layer_norm(x, l.ln2_g, l.ln2_b, ln_eps());
      f = add_row_broadcast(matmul(silu(add_row_broadcast(matmul(f, l.w1), l.b1)), l.w2),
                            l.b2);
      x = add(x, f);
    }
    return layer_norm(x, enc_ln_g_, enc_ln_b_, ln_eps());
  }

  Tensor<T> decode_logits(const std::vector<int>& dec_tokens, const Tensor<T>& enc_out,
                          const std::vector<bool>& enc_mask) const {
    const std::size_t n = dec_tokens.size();
    auto y = add(embed(dec_tokens).X, slice_rows(pos_dec_, 0, n));
    auto causal = causal_mask_matrix(n);
    auto cross_mask = key_mask_matrix_rect(n, enc_mask);
    for (const auto& l : dec_) {
      auto h = layer_norm(y, l.ln1_g, l.ln1_b, ln_eps());
      y = add(y, mha(l.self_attn, h, h, causal));
      auto c = layer_norm(y, l.ln2_g, l.ln2_b, ln_eps());
      y = add(y, mha(l.cross_attn, c, enc_out, cross_mask));
      auto f = layer_norm(y, l.ln3_g, l.ln3_b, ln_eps());
      f = add_row_broadcast(matmul(silu(add_row_broadcast(matmul(f, l.w1), l.b1)), l.w2),
                            l.b2);
      y = add(y, f);
    }
    y = layer_norm(y, dec_ln_g_, dec_ln_b_, ln_eps());
    return matmul(y, transpose(embedding_));  // tied output projection
  }

  // Deterministic argmax decoding from bos until eos or max_steps; the
  // returned sequence excludes both bos and eos.
  std::vector<int> greedy_decode(const Tensor<T>& prompted_input,
                                 const std::vector<bool>& input_mask,
                                 std::size_t max_steps) const {
    if (max_steps < 1) throw ConfigError("greedy_decode: max_steps must be >= 1");
    NoGradGuard no_grad;
    auto enc_out = encode(prompted_input, input_mask);
    std::vector<int> out;
    std::vector<int> dec_in{cfg_.bos_id};
    for (std::size_t step = 0; step < max_steps; ++step) {
      if (dec_in.size() >= cfg_.max_len) break;
      auto logits = decode_logits(dec_in, enc_out, input_mask);
      const std::size_t v = cfg_.vocab_size;
      const T* row = logits.data().data() + (dec_in.size() - 1) * v;
      int best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
      if (best == cfg_.eos_id) break;
      out.push_back(best);
      dec_in.push_back(best);
    }
    return out;
  }

 private:
  static constexpr T ln_eps() { return T(1e-6); }

  Tensor<T> mha(const Attn& a, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                const Tensor<T>& additive_mask) const {
    const std::size_t d = cfg_.model_dim;
    const std::size_t nh = cfg_.n_heads, dh = d / nh;
    auto q = matmul(q_in, a.wq);
    auto k = matmul(kv_in, a.wk);
    auto v = matmul(kv_in, a.wv);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> heads;
    heads.reserve(nh);
    for (std::size_t h = 0; h < nh; ++h) {
      auto qh = slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = slice_cols(v, h * dh, (h + 1) * dh);
      auto scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), additive_mask);
      heads.push_back(matmul(row_softmax(scores), vh));
    }
    return matmul(concat_cols(heads), a.wo);
  }

  // [s x s] additive mask: -1e9 on columns whose key position is padding.
  Tensor<T> key_mask_matrix(std::size_t s, const std::vector<bool>& mask) const {
    std::vector<T> m(s * s, T(0));
    for (std::size_t j = 0; j < s; ++j)
      if (!mask[j])
        for (std::size_t i = 0; i < s; ++i) m[i * s + j] = T(-1e9);
    return Tensor<T>::from_vector({s, s}, std::move(m));
  }

  Tensor<T> key_mask_matrix_rect(std::size_t rows, const std::vector<bool>& key_mask) const {
    const std::size_t s = key_mask.size();
    std::vector<T> m(rows * s, T(0));
    for (std::size_t j = 0; j < s; ++j)
      if (!key_mask[j])
        for (std::size_t i = 0; i < rows; ++i) m[i * s + j] = T(-1e9);
    return Tensor<T>::from_vector({rows, s}, std::move(m));
  }

  Tensor<T> causal_mask_matrix(std::size_t n) const {
    std::vector<T> m(n * n, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = T(-1e9);
    return Tensor<T>::from_vector({n, n}, std::move(m));
  }

  LMConfig cfg_;
  Tensor<T> embedding_, pos_enc_, pos_dec_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Tensor<T> enc_ln_g_, enc_ln_b_, dec_ln_g_, dec_ln_b_;
};

template <class T>
FrozenLM<T> build_frozen_lm(const LMConfig& cfg, Rng& rng) {
  cfg.validate();
  return FrozenLM<T>(cfg, rng.fork(0x1a));
}

}  // namespace attempt
