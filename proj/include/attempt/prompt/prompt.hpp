#pragma once
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attempt/core/error.hpp"
#include "attempt/core/hash.hpp"
#include "attempt/core/rng.hpp"
#include "attempt/core/tensor.hpp"
#include "attempt/nn/lm.hpp"

namespace attempt {

enum class PromptOrigin { random_vocab, copied_from_source, trained };

inline std::string origin_name(PromptOrigin o) {
  switch (o) {
    case PromptOrigin::random_vocab: return "random_vocab";
    case PromptOrigin::copied_from_source: return "copied_from_source";
    case PromptOrigin::trained: return "trained";
  }
  return "?";
}

template <class T>
struct SoftPrompt {
  std::string name;
  Tensor<T> P;  // [m x d]
  bool trainable = false;
  PromptOrigin origin = PromptOrigin::random_vocab;

  std::size_t length() const { return P.rows(); }
  std::size_t dim() const { return P.cols(); }

  std::uint64_t hash() const {
    Fnv1a64 h;
    h.update_string(name);
    h.update_values(P.data());
    return h.digest();
  }
};

// Prompt initialized from m randomly sampled (non-special) vocabulary rows
// of the frozen embedding table.
template <class T>
SoftPrompt<T> init_prompt_from_vocab(const FrozenLM<T>& lm, std::size_t m,
                                     const std::string& name, Rng& rng) {
  const auto& cfg = lm.config();
  std::vector<int> ids;
  for (std::size_t i = 0; i < m; ++i) {
    int tok;
    do {
      tok = static_cast<int>(rng.next_below(cfg.vocab_size));
    } while (tok == cfg.pad_id || tok == cfg.bos_id || tok == cfg.eos_id);
    ids.push_back(tok);
  }
  const std::size_t d = cfg.model_dim;
  std::vector<T> rows;
  rows.reserve(m * d);
  for (int tok : ids)
    rows.insert(rows.end(), lm.embedding().data().begin() + tok * d,
                lm.embedding().data().begin() + (tok + 1) * d);
  SoftPrompt<T> p;
  p.name = name;
  p.P = Tensor<T>::from_vector({m, d}, std::move(rows), true);
  p.trainable = true;
  p.origin = PromptOrigin::random_vocab;
  return p;
}

// Ordered set of frozen source prompts. Attention index j refers to this
// order; pooled vectors are cached since the prompts never change.
template <class T>
class PromptBank {
 public:
  void add(SoftPrompt<T> prompt) {
    if (prompt.trainable)
      throw ConfigError("PromptBank: source prompts must be frozen");
    for (const auto& p : prompts_)
      if (p.name == prompt.name)
        throw ConfigError("PromptBank: duplicate prompt name '" + prompt.name + "'");
    if (!prompts_.empty() &&
        (prompt.P.shape() != prompts_.front().P.shape()))
      throw DimensionError("PromptBank: prompt shape mismatch");
    prompts_.push_back(std::move(prompt));
    pooled_cache_.clear();
  }

  std::size_t size() const { return prompts_.size(); }
  bool empty() const { return prompts_.empty(); }
  const SoftPrompt<T>& at(std::size_t i) const { return prompts_.at(i); }

  const SoftPrompt<T>* find(const std::string& name) const {
    for (const auto& p : prompts_)
      if (p.name == name) return &p;
    return nullptr;
  }

  const std::vector<SoftPrompt<T>>& prompts() const { return prompts_; }

  // Pooled P-hat vectors, cached as constant leaves (sources are frozen).
  const std::vector<Tensor<T>>& pooled() const {
    if (pooled_cache_.size() != prompts_.size()) {
      pooled_cache_.clear();
      for (const auto& p : prompts_) {
        NoGradGuard no_grad;
        pooled_cache_.push_back(
            max_pool_seq(p.P, std::vector<bool>(p.P.rows(), true)));
      }
    }
    return pooled_cache_;
  }

  void invalidate_pooled_cache() { pooled_cache_.clear(); }

  std::uint64_t hash() const {
    Fnv1a64 h;
    for (const auto& p : prompts_) {
      h.update_string(p.name);
      h.update_values(p.P.data());
    }
    return h.digest();
  }

 private:
  std::vector<SoftPrompt<T>> prompts_;
  mutable std::vector<Tensor<T>> pooled_cache_;
};

// The attention sub-network: down/up projection with SiLU, layer norm, and
// a temperature-scaled softmax over pooled prompt dot products.
template <class T>
struct AttentionModule {
  Tensor<T> w_down;   // [d x r]
  Tensor<T> w_up;     // [r x d]
  Tensor<T> ln_gain;  // [d]
  Tensor<T> ln_bias;  // [d]
  double temperature_k = 1.0;

  static AttentionModule init(std::size_t d, std::size_t r, double temperature_k,
                              Rng& rng) {
    if (r >= d)
      throw ConfigError("AttentionModule: bottleneck r must satisfy r < d");
    AttentionModule g;
    g.w_down = Tensor<T>::randn({d, r}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    g.w_up = Tensor<T>::randn({r, d}, rng, 1.0 / std::sqrt(static_cast<double>(r)), true);
    g.ln_gain = Tensor<T>::full({d}, T(1), true);
    g.ln_bias = Tensor<T>::zeros({d}, true);
    g.temperature_k = temperature_k;
    return g;
  }

  std::size_t dim() const { return w_down.rows(); }
  std::size_t bottleneck() const { return w_down.cols(); }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    return {{"w_down", w_down}, {"w_up", w_up}, {"ln_gain", ln_gain}, {"ln_bias", ln_bias}};
  }

  void set_trainable(bool trainable) {
    for (auto& [name, t] : named_parameters()) t.node()->requires_grad = trainable;
  }

  AttentionModule clone() const {
    AttentionModule g;
    g.w_down = w_down.detach();
    g.w_up = w_up.detach();
    g.ln_gain = ln_gain.detach();
    g.ln_bias = ln_bias.detach();
    g.temperature_k = temperature_k;
    for (auto& [name, t] : g.named_parameters()) t.node()->requires_grad = true;
    return g;
  }
};

template <class T>
struct AttentionWeights {
  Tensor<T> a;  // bank order, target last (absent under no_target)
};

template <class T>
struct InstancePrompt {
  Tensor<T> P_instance;            // [m x d]
  std::vector<T> attention_snapshot;  // values of a at composition time
};

struct AblationFlags {
  bool no_target = false;
  bool constant_attention = false;
  std::optional<std::string> single_source;
  bool no_prior = false;
};

// X-hat: masked per-dimension max over the input embeddings.
template <class T>
Tensor<T> pool_input(const EmbeddedInput<T>& x) {
  return max_pool_seq(x.X, x.mask);
}

// P-hat for a single prompt (no masking; prompts have no padding).
template <class T>
Tensor<T> pool_prompt(const SoftPrompt<T>& p) {
  return max_pool_seq(p.P, std::vector<bool>(p.P.rows(), true));
}

// H_up = LayerNorm(W_up^T SiLU(W_down^T x_hat))
template <class T>
Tensor<T> project(const AttentionModule<T>& g, const Tensor<T>& x_hat) {
  auto h_down = vecmat(x_hat, g.w_down);
  auto h_up = vecmat(silu(h_down), g.w_up);
  return layer_norm(h_up, g.ln_gain, g.ln_bias, T(1e-6));
}

// Softmax over pooled-prompt dot products with H_up, with logits divided by
// d * exp(K).
template <class T>
AttentionWeights<T> attend(const AttentionModule<T>& g, const Tensor<T>& x_hat,
                           const Tensor<T>& pooled) {
  auto h_up = project(g, x_hat);
  auto logits = matvec(pooled, h_up);
  const T s = T(1.0 / (static_cast<double>(g.dim()) * std::exp(g.temperature_k)));
  return {softmax(scale(logits, s))};
}

// Interpolation: P_instance = P_target + sum_j a_j P_j with the target
// as entry t+1, so its total coefficient is 1 + a_{t+1}.
template <class T>
InstancePrompt<T> interpolate(const PromptBank<T>& bank, const SoftPrompt<T>& target,
                              const AttentionWeights<T>& a) {
  if (a.a.numel() != bank.size() + 1)
    throw DimensionError("interpolate: attention length " +
                         std::to_string(a.a.numel()) + " != t+1 = " +
                         std::to_string(bank.size() + 1));
  std::vector<Tensor<T>> mats;
  for (const auto& p : bank.prompts()) mats.push_back(p.P);
  mats.push_back(target.P);
  auto mixture = weighted_sum(a.a, mats);
  std::vector<T> snapshot(a.a.data().begin(), a.a.data().end());
  return {add(target.P, mixture), std::move(snapshot)};
}

// Full pipeline pool -> project -> attend -> interpolate, honoring the
// ablation flags. `target` may be null only with no_target set.
template <class T>
InstancePrompt<T> compose_instance_prompt(const PromptBank<T>& bank,
                                          const SoftPrompt<T>* target,
                                          const AttentionModule<T>& g,
                                          const EmbeddedInput<T>& x,
                                          const AblationFlags& ablation = {}) {
  const PromptBank<T>* active_bank = &bank;
  PromptBank<T> restricted;
  if (ablation.single_source) {
    const auto* chosen = bank.find(*ablation.single_source);
    if (!chosen)
      throw ConfigError("single_source: no prompt named '" + *ablation.single_source + "'");
    auto copy = *chosen;
    restricted.add(std::move(copy));
    active_bank = &restricted;
  }
  const std::size_t t = active_bank->size();

  if (ablation.no_target) {
    if (t == 0)
      throw ConfigError("no_target ablation requires a non-empty prompt bank");
    auto x_hat = pool_input(x);
    auto pooled = stack_rows(active_bank->pooled());
    AttentionWeights<T> a = attend(g, x_hat, pooled);
    std::vector<Tensor<T>> mats;
    for (const auto& p : active_bank->prompts()) mats.push_back(p.P);
    std::vector<T> snapshot(a.a.data().begin(), a.a.data().end());
    return {weighted_sum(a.a, mats), std::move(snapshot)};
  }

  if (!target) throw ConfigError("compose_instance_prompt: target prompt missing");

  if (ablation.constant_attention) {
    // a_j = 1/t on every source, nothing on the target beyond its own term
    std::vector<T> w(t + 1, t ? T(1) / T(t) : T(0));
    w[t] = T(0);
    AttentionWeights<T> a{Tensor<T>::from_vector({t + 1}, std::move(w))};
    return interpolate(*active_bank, *target, a);
  }

  auto x_hat = pool_input(x);
  std::vector<Tensor<T>> rows = active_bank->pooled();
  rows.push_back(pool_prompt(*target));
  auto pooled = stack_rows(rows);
  AttentionWeights<T> a = attend(g, x_hat, pooled);
  return interpolate(*active_bank, *target, a);
}

// Cosine of the flattened prompt tensors; utility for single-source
// selection.
template <class T>
double cosine_similarity(const SoftPrompt<T>& p1, const SoftPrompt<T>& p2) {
  if (p1.P.shape() != p2.P.shape())
    throw DimensionError("cosine_similarity: prompt shape mismatch");
  double dot = 0, n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < p1.P.numel(); ++i) {
    const double a = p1.P.data()[i], b = p2.P.data()[i];
    dot += a * b;
    n1 += a * a;
    n2 += b * b;
  }
  if (n1 == 0.0 || n2 == 0.0)
    throw NumericError("cosine_similarity: zero-norm prompt");
  return dot / (std::sqrt(n1) * std::sqrt(n2));
}

}  // namespace attempt
