#pragma once
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attempt/core/error.hpp"
#include "attempt/core/rng.hpp"
#include "attempt/core/tensor.hpp"
#include "attempt/data/dataset.hpp"
#include "attempt/nn/lm.hpp"
#include "attempt/prompt/prompt.hpp"
#include "attempt/train/adam.hpp"

namespace attempt {

enum class TargetInit { random_vocab, from_source };

struct TrainConfig {
  double prompt_lr = 0.3;
  double attention_lr = 0.3;
  double weight_decay = 1e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  double temperature_k = 1.0;
  std::size_t prompt_length = 10;
  std::size_t bottleneck_r = 16;
  std::size_t warmup_steps = 500;
  std::size_t grad_accum = 1;
  bool balanced_sampling = false;
  AblationFlags ablation;
  TargetInit target_init = TargetInit::random_vocab;
  std::string target_init_source;  // prompt name, for from_source

  void validate() const {
    if (prompt_lr < 0 || attention_lr < 0 || weight_decay < 0)
      throw ConfigError("TrainConfig: negative rate");
    if (batch_size < 1 || epochs < 1 || prompt_length < 1 || bottleneck_r < 1)
      throw ConfigError("TrainConfig: zero-sized setting");
    if (grad_accum < 1 || batch_size % grad_accum != 0)
      throw ConfigError("TrainConfig: grad_accum must divide batch_size");
    if (target_init == TargetInit::from_source && target_init_source.empty())
      throw ConfigError("TrainConfig: from_source init needs a source name");
  }
};

struct EpochStat {
  double train_loss = 0;
  double dev_metric = 0;  // exact match on dev, higher is better
};

struct TrainReport {
  std::vector<EpochStat> epochs;
  std::vector<std::vector<double>> dev_mean_attention;  // per epoch, may be empty
  std::size_t best_epoch = 0;
  double best_dev_metric = 0;
  double wall_clock_sec = 0;
  std::uint64_t seed = 0;
  std::size_t steps = 0;

  nlohmann::json to_json() const {
    nlohmann::json je = nlohmann::json::array();
    for (const auto& e : epochs)
      je.push_back({{"train_loss", e.train_loss}, {"dev_metric", e.dev_metric}});
    return {{"epochs", je},
            {"dev_mean_attention", dev_mean_attention},
            {"best_epoch", best_epoch},
            {"best_dev_metric", best_dev_metric},
            {"wall_clock_sec", wall_clock_sec},
            {"seed", seed},
            {"steps", steps}};
  }
};

struct ParamCount {
  long long total = 0;        // N prompts plus one shared attention module
  long long prompt_only = 0;  // m*d, the prompt-tuning baseline
  double per_task = 0;        // m*d + (2rd + 2d)/N
};

inline ParamCount count_trainable_params(std::size_t d, std::size_t m, std::size_t r,
                                         std::size_t n_tasks) {
  if (n_tasks < 1) throw ConfigError("count_trainable_params: need n_tasks >= 1");
  ParamCount c;
  const long long attn = 2ll * r * d + 2ll * d;
  c.prompt_only = static_cast<long long>(m) * d;
  c.total = static_cast<long long>(n_tasks) * c.prompt_only + attn;
  c.per_task = static_cast<double>(c.prompt_only) +
               static_cast<double>(attn) / static_cast<double>(n_tasks);
  return c;
}

namespace detail {

inline std::size_t decode_budget(const std::vector<Example>& split) {
  std::size_t n = 1;
  for (const auto& ex : split) n = std::max(n, ex.target_tokens.size());
  return n + 2;
}

inline std::vector<int> strip_eos(const std::vector<int>& target, int eos_id) {
  std::vector<int> t = target;
  while (!t.empty() && (t.back() == eos_id || t.back() == 0)) t.pop_back();
  return t;
}

template <class T>
std::vector<T> snapshot(const Tensor<T>& t) {
  return t.data();
}

template <class T>
void restore(Tensor<T>& t, const std::vector<T>& values) {
  std::copy(values.begin(), values.end(), t.data().begin());
}

template <class T>
void log_step(std::ostream* log, std::size_t step, double loss, double lr) {
  if (log) *log << "step " << step << " loss " << loss << " lr " << lr << "\n";
}

inline double warmup_scale(std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0) return 1.0;
  return std::min(1.0, static_cast<double>(step + 1) /
                           static_cast<double>(warmup_steps));
}

}  // namespace detail

// Mean teacher-forced loss over one group of batch rows; prompted input is
// [prompt rows ; input embeddings].
template <class T>
Tensor<T> batch_group_loss(const FrozenLM<T>& lm, const Batch& batch,
                           std::size_t first, std::size_t last, std::size_t total,
                           const std::function<Tensor<T>(std::size_t)>& prompt_for) {
  Tensor<T> acc;
  bool first_term = true;
  for (std::size_t i = first; i < last; ++i) {
    auto x = lm.embed(batch.input_tokens[i]);
    auto p = prompt_for(i);
    auto prompted = concat_rows<T>({p, x.X});
    std::vector<bool> mask(p.rows(), true);
    mask.insert(mask.end(), x.mask.begin(), x.mask.end());
    auto nll = lm.conditional_nll(prompted, mask, batch.target_tokens[i]);
    acc = first_term ? nll : add(acc, nll);
    first_term = false;
  }
  return scale(acc, T(1) / T(total));
}

template <class T>
double exact_match_prompted(const FrozenLM<T>& lm, const Tensor<T>& prompt_rows,
                            const std::vector<Example>& split) {
  if (split.empty()) return 0;
  NoGradGuard no_grad;
  const std::size_t budget = detail::decode_budget(split);
  std::size_t hit = 0;
  for (const auto& ex : split) {
    auto x = lm.embed(ex.input_tokens);
    auto prompted = concat_rows<T>({prompt_rows, x.X});
    std::vector<bool> mask(prompt_rows.rows(), true);
    mask.insert(mask.end(), x.mask.begin(), x.mask.end());
    auto out = lm.greedy_decode(prompted, mask, budget);
    if (out == detail::strip_eos(ex.target_tokens, lm.config().eos_id)) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(split.size());
}

// Plain prompt tuning of a single soft prompt against a frozen backbone.
// Returns the prompt at the best dev epoch, frozen and ready for a bank.
template <class T>
std::pair<SoftPrompt<T>, TrainReport> train_source_prompt(
    const FrozenLM<T>& lm, const TaskDataset& task, const TrainConfig& cfg,
    std::ostream* log = nullptr) {
  cfg.validate();
  if (lm.trainable_param_count() != 0)
    throw ConfigError("train_source_prompt: backbone must be frozen");
  if (task.train.empty()) throw DataError("train_source_prompt: empty train split");
  const auto start = std::chrono::steady_clock::now();

  Rng rng(cfg.seed ^ 0x50a7ceull);
  auto prompt = init_prompt_from_vocab(lm, cfg.prompt_length, task.task_id, rng);
  ParamGroup<T> group({{"prompt." + prompt.name, prompt.P}}, cfg.prompt_lr,
                      cfg.weight_decay);

  TrainReport report;
  report.seed = cfg.seed;
  std::vector<T> best_values = detail::snapshot(prompt.P);
  double best_metric = -1e300;
  std::size_t step = 0;
  const std::size_t micro = cfg.batch_size / cfg.grad_accum;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batches = make_batches({&task}, cfg.batch_size,
                                cfg.seed ^ (epoch * 0x9e3779b97f4a7c15ull), true);
    double epoch_loss = 0;
    std::size_t n_batches = 0;
    for (const auto& batch : batches) {
      group.zero_grad();
      double batch_loss = 0;
      for (std::size_t first = 0; first < batch.size(); first += micro) {
        const std::size_t last = std::min(first + micro, batch.size());
        auto loss = batch_group_loss<T>(lm, batch, first, last, batch.size(),
                                        [&](std::size_t) { return prompt.P; });
        batch_loss += static_cast<double>(loss.item());
        loss.backward();
      }
      const double s = detail::warmup_scale(step, cfg.warmup_steps);
      group.step(s);
      detail::log_step<T>(log, step, batch_loss, cfg.prompt_lr * s);
      ++step;
      epoch_loss += batch_loss;
      ++n_batches;
    }
    EpochStat stat;
    stat.train_loss = epoch_loss / std::max<std::size_t>(1, n_batches);
    stat.dev_metric = task.dev.empty() ? -stat.train_loss
                                       : exact_match_prompted(lm, prompt.P, task.dev);
    report.epochs.push_back(stat);
    if (stat.dev_metric > best_metric) {
      best_metric = stat.dev_metric;
      report.best_epoch = epoch;
      best_values = detail::snapshot(prompt.P);
    }
  }
  report.best_dev_metric = best_metric;
  report.steps = step;
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  SoftPrompt<T> out;
  out.name = prompt.name;
  out.P = Tensor<T>::from_vector({cfg.prompt_length, lm.config().model_dim},
                                 std::move(best_values));
  out.trainable = false;
  out.origin = PromptOrigin::trained;
  return {std::move(out), std::move(report)};
}

template <class T>
SoftPrompt<T> init_target_prompt(const FrozenLM<T>& lm, const PromptBank<T>& bank,
                                 const std::string& name, const TrainConfig& cfg,
                                 Rng& rng) {
  if (cfg.target_init == TargetInit::from_source) {
    const auto* src = bank.find(cfg.target_init_source);
    if (!src)
      throw ConfigError("target init: no source prompt named '" +
                        cfg.target_init_source + "'");
    SoftPrompt<T> p;
    p.name = name;
    p.P = src->P.detach();
    p.P.node()->requires_grad = true;
    p.trainable = true;
    p.origin = PromptOrigin::copied_from_source;
    return p;
  }
  return init_prompt_from_vocab(lm, cfg.prompt_length, name, rng);
}

template <class T>
struct TargetArtifacts {
  SoftPrompt<T> target;
  AttentionModule<T> g;
  TrainReport report;
};

// Shared inner loop for single- and multi-task target training. `tasks` are
// the tasks being trained; prompt i belongs to task i. The attention module
// takes a step every iteration; a prompt steps only when one of its
// instances appears in the batch.
template <class T>
struct TargetTrainer {
  const FrozenLM<T>& lm;
  const PromptBank<T>& bank;
  std::vector<const TaskDataset*> tasks;
  TrainConfig cfg;
  std::ostream* log = nullptr;

  std::vector<SoftPrompt<T>> prompts;
  AttentionModule<T> g;

  TrainReport run() {
    const auto start = std::chrono::steady_clock::now();
    TrainReport report;
    report.seed = cfg.seed;

    std::map<std::string, std::size_t> task_index;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i]->train.empty())
        throw DataError("train: empty train split for '" + tasks[i]->task_id + "'");
      if (!task_index.emplace(tasks[i]->task_id, i).second)
        throw ConfigError("train: duplicate task id '" + tasks[i]->task_id + "'");
    }

    std::vector<ParamGroup<T>> prompt_groups;
    for (auto& p : prompts)
      prompt_groups.emplace_back(
          std::vector<std::pair<std::string, Tensor<T>>>{{"prompt." + p.name, p.P}},
          cfg.prompt_lr, cfg.weight_decay);
    ParamGroup<T> attn_group(g.named_parameters(), cfg.attention_lr,
                             cfg.weight_decay);

    std::vector<std::vector<T>> best_prompts;
    for (auto& p : prompts) best_prompts.push_back(detail::snapshot(p.P));
    std::vector<std::vector<T>> best_g;
    for (auto& [name, t] : g.named_parameters()) best_g.push_back(detail::snapshot(t));
    double best_metric = -1e300;
    std::size_t step = 0;
    const std::size_t micro = cfg.batch_size / cfg.grad_accum;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      auto batches = make_batches(tasks, cfg.batch_size,
                                  cfg.seed ^ (epoch * 0x9e3779b97f4a7c15ull), true,
                                  {}, cfg.balanced_sampling);
      double epoch_loss = 0;
      std::size_t n_batches = 0;
      for (const auto& batch : batches) {
        for (auto& gp : prompt_groups) gp.zero_grad();
        attn_group.zero_grad();
        std::set<std::size_t> used;
        double batch_loss = 0;
        for (std::size_t first = 0; first < batch.size(); first += micro) {
          const std::size_t last = std::min(first + micro, batch.size());
          auto loss = batch_group_loss<T>(
              lm, batch, first, last, batch.size(), [&](std::size_t i) {
                const auto it = task_index.find(batch.task_ids[i]);
                if (it == task_index.end())
                  throw DataError("train: instance from unknown task '" +
                                  batch.task_ids[i] + "'");
                used.insert(it->second);
                auto x = lm.embed(batch.input_tokens[i]);
                x.mask = batch.input_mask[i];
                return compose_instance_prompt(bank, &prompts[it->second], g, x,
                                               cfg.ablation)
                    .P_instance;
              });
          batch_loss += static_cast<double>(loss.item());
          loss.backward();
        }
        const double s = detail::warmup_scale(step, cfg.warmup_steps);
        attn_group.step(s);
        for (std::size_t i : used) prompt_groups[i].step(s);
        detail::log_step<T>(log, step, batch_loss, cfg.prompt_lr * s);
        ++step;
        epoch_loss += batch_loss;
        ++n_batches;
      }

      EpochStat stat;
      stat.train_loss = epoch_loss / std::max<std::size_t>(1, n_batches);
      double metric = 0;
      std::vector<double> mean_attn;
      std::size_t n_attn = 0;
      bool have_dev = false;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i]->dev.empty()) continue;
        have_dev = true;
        metric += dev_exact_match(i, tasks[i]->dev, mean_attn, n_attn);
      }
      stat.dev_metric = have_dev ? metric / tasks.size() : -stat.train_loss;
      if (n_attn)
        for (auto& v : mean_attn) v /= static_cast<double>(n_attn);
      report.epochs.push_back(stat);
      report.dev_mean_attention.push_back(std::move(mean_attn));
      if (stat.dev_metric > best_metric) {
        best_metric = stat.dev_metric;
        report.best_epoch = epoch;
        for (std::size_t i = 0; i < prompts.size(); ++i)
          best_prompts[i] = detail::snapshot(prompts[i].P);
        std::size_t k = 0;
        for (auto& [name, t] : g.named_parameters())
          best_g[k++] = detail::snapshot(t);
      }
    }

    for (std::size_t i = 0; i < prompts.size(); ++i)
      detail::restore(prompts[i].P, best_prompts[i]);
    std::size_t k = 0;
    for (auto&& [name, t] : g.named_parameters()) detail::restore(t, best_g[k++]);
    report.best_dev_metric = best_metric;
    report.steps = step;
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    return report;
  }

  double dev_exact_match(std::size_t task_i, const std::vector<Example>& split,
                         std::vector<double>& mean_attn, std::size_t& n_attn) {
    NoGradGuard no_grad;
    const std::size_t budget = detail::decode_budget(split);
    std::size_t hit = 0;
    for (const auto& ex : split) {
      auto x = lm.embed(ex.input_tokens);
      auto inst = compose_instance_prompt(bank, &prompts[task_i], g, x, cfg.ablation);
      auto prompted = concat_rows<T>({inst.P_instance, x.X});
      std::vector<bool> mask(inst.P_instance.rows(), true);
      mask.insert(mask.end(), x.mask.begin(), x.mask.end());
      auto out = lm.greedy_decode(prompted, mask, budget);
      if (out == detail::strip_eos(ex.target_tokens, lm.config().eos_id)) ++hit;
      if (mean_attn.size() < inst.attention_snapshot.size())
        mean_attn.resize(inst.attention_snapshot.size(), 0.0);
      for (std::size_t j = 0; j < inst.attention_snapshot.size(); ++j)
        mean_attn[j] += static_cast<double>(inst.attention_snapshot[j]);
      ++n_attn;
    }
    return static_cast<double>(hit) / static_cast<double>(split.size());
  }
};

// Target-task training: instance-wise interpolation over the frozen bank,
// with separate learning rates for the target prompt and the attention
// sub-network. Pass `prior` to start the attention weights from a
// pretrained state.
template <class T>
TargetArtifacts<T> train_target(const FrozenLM<T>& lm, const PromptBank<T>& bank,
                                const TaskDataset& task, const TrainConfig& cfg,
                                const AttentionModule<T>* prior = nullptr,
                                std::ostream* log = nullptr) {
  cfg.validate();
  if (cfg.ablation.no_target)
    throw ConfigError("train_target: no_target ablation has nothing to train");
  if (lm.trainable_param_count() != 0)
    throw ConfigError("train_target: backbone must be frozen");

  Rng rng(cfg.seed ^ 0x7a46e7ull);
  TargetTrainer<T> tr{lm, bank, {&task}, cfg, log};
  tr.g = prior ? prior->clone()
               : AttentionModule<T>::init(lm.config().model_dim, cfg.bottleneck_r,
                                          cfg.temperature_k, rng);
  tr.g.temperature_k = cfg.temperature_k;
  tr.prompts.push_back(init_target_prompt(lm, bank, task.task_id, cfg, rng));

  TargetArtifacts<T> out;
  out.report = tr.run();
  out.target = std::move(tr.prompts[0]);
  out.target.trainable = false;
  out.target.origin = PromptOrigin::trained;
  out.g = std::move(tr.g);
  return out;
}

template <class T>
struct MultiTaskArtifacts {
  std::vector<SoftPrompt<T>> prompts;  // aligned with the task order
  AttentionModule<T> g;
  TrainReport report;
};

// Joint training over several target tasks: one prompt per task, one shared
// attention module. Batches mix instances across tasks; routing decides
// which prompts step.
template <class T>
MultiTaskArtifacts<T> train_multi_task(const FrozenLM<T>& lm,
                                       const PromptBank<T>& bank,
                                       const std::vector<const TaskDataset*>& tasks,
                                       const TrainConfig& cfg,
                                       const AttentionModule<T>* prior = nullptr,
                                       std::ostream* log = nullptr) {
  cfg.validate();
  if (cfg.ablation.no_target)
    throw ConfigError("train_multi_task: no_target ablation has nothing to train");
  if (tasks.size() < 2)
    throw ConfigError("train_multi_task: need at least two tasks");
  if (lm.trainable_param_count() != 0)
    throw ConfigError("train_multi_task: backbone must be frozen");

  Rng rng(cfg.seed ^ 0x3417a5ull);
  TargetTrainer<T> tr{lm, bank, tasks, cfg, log};
  tr.g = prior ? prior->clone()
               : AttentionModule<T>::init(lm.config().model_dim, cfg.bottleneck_r,
                                          cfg.temperature_k, rng);
  tr.g.temperature_k = cfg.temperature_k;
  for (const auto* t : tasks)
    tr.prompts.push_back(init_target_prompt(lm, bank, t->task_id, cfg, rng));

  MultiTaskArtifacts<T> out;
  out.report = tr.run();
  for (auto& p : tr.prompts) {
    p.trainable = false;
    p.origin = PromptOrigin::trained;
    out.prompts.push_back(std::move(p));
  }
  out.g = std::move(tr.g);
  return out;
}

// Attention-prior pretraining: run target training over the source tasks
// (fresh throwaway prompts) and keep only the attention module.
template <class T>
AttentionModule<T> pretrain_attention_prior(const FrozenLM<T>& lm,
                                            const PromptBank<T>& bank,
                                            const std::vector<const TaskDataset*>& tasks,
                                            const TrainConfig& cfg,
                                            std::ostream* log = nullptr) {
  if (tasks.empty())
    throw ConfigError("pretrain_attention_prior: need at least one source task");
  const AttentionModule<T>* no_prior = nullptr;
  if (tasks.size() == 1) {
    auto art = train_target(lm, bank, *tasks[0], cfg, no_prior, log);
    return std::move(art.g);
  }
  auto art = train_multi_task(lm, bank, tasks, cfg, no_prior, log);
  return std::move(art.g);
}

struct EvalReport {
  double exact_match = 0;
  std::vector<std::vector<double>> per_instance_attention;
  std::vector<double> mean_attention;
  std::size_t n = 0;

  nlohmann::json to_json() const {
    return {{"exact_match", exact_match},
            {"mean_attention", mean_attention},
            {"n", n}};
  }
};

// Greedy-decoding evaluation with instance-wise prompt composition.
// `target` may be null only under the no_target ablation.
template <class T>
EvalReport evaluate(const FrozenLM<T>& lm, const PromptBank<T>& bank,
                    const AttentionModule<T>& g, const SoftPrompt<T>* target,
                    const std::vector<Example>& split,
                    const AblationFlags& ablation = {}) {
  EvalReport r;
  if (split.empty()) return r;
  NoGradGuard no_grad;
  const std::size_t budget = detail::decode_budget(split);
  std::size_t hit = 0;
  for (const auto& ex : split) {
    auto x = lm.embed(ex.input_tokens);
    auto inst = compose_instance_prompt(bank, target, g, x, ablation);
    auto prompted = concat_rows<T>({inst.P_instance, x.X});
    std::vector<bool> mask(inst.P_instance.rows(), true);
    mask.insert(mask.end(), x.mask.begin(), x.mask.end());
    auto out = lm.greedy_decode(prompted, mask, budget);
    if (out == detail::strip_eos(ex.target_tokens, lm.config().eos_id)) ++hit;
    std::vector<double> a(inst.attention_snapshot.begin(),
                          inst.attention_snapshot.end());
    if (r.mean_attention.size() < a.size()) r.mean_attention.resize(a.size(), 0.0);
    for (std::size_t j = 0; j < a.size(); ++j) r.mean_attention[j] += a[j];
    r.per_instance_attention.push_back(std::move(a));
  }
  r.n = split.size();
  r.exact_match = static_cast<double>(hit) / static_cast<double>(r.n);
  for (auto& v : r.mean_attention) v /= static_cast<double>(r.n);
  return r;
}

// Tag token for task index i during backbone pretraining: unused label slots
// first, then content tokens (an occasional collision with input content is
// harmless, the tag is positional).
inline int pretrain_tag_token(std::size_t task_index, const VocabLayout& v = {}) {
  if (task_index < 4) return v.label(4 + static_cast<int>(task_index));
  return v.first_content() + static_cast<int>(task_index - 4);
}

// Brief supervised pretraining of the backbone on a task mixture. Each input
// is prefixed with `tag_len` copies of a per-task tag token, so that soft
// prompts occupying those positions can later steer task selection. The
// backbone is unfrozen for the duration and re-frozen before returning.
// Returns the final-epoch mean train loss.
template <class T>
double pretrain_lm(FrozenLM<T>& lm, const std::vector<const TaskDataset*>& tasks,
                   std::size_t epochs, std::size_t batch_size, double lr,
                   std::size_t tag_len, std::uint64_t seed,
                   std::ostream* log = nullptr) {
  if (tasks.empty()) throw ConfigError("pretrain_lm: no tasks");
  if (epochs < 1 || batch_size < 1 || tag_len < 1)
    throw ConfigError("pretrain_lm: zero-sized setting");
  std::map<std::string, int> tags;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    tags[tasks[i]->task_id] = pretrain_tag_token(i);

  lm.set_trainable(true);
  ParamGroup<T> group(lm.named_parameters(), lr, 0.0);
  double last_epoch_loss = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto batches = make_batches(tasks, batch_size,
                                seed ^ (epoch * 0x9e3779b97f4a7c15ull), true);
    double epoch_loss = 0;
    std::size_t n_batches = 0;
    for (const auto& batch : batches) {
      group.zero_grad();
      Tensor<T> acc;
      bool first = true;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::vector<int> tokens(tag_len, tags.at(batch.task_ids[i]));
        tokens.insert(tokens.end(), batch.input_tokens[i].begin(),
                      batch.input_tokens[i].end());
        auto x = lm.embed(tokens);
        auto nll = lm.conditional_nll(x.X, x.mask, batch.target_tokens[i]);
        acc = first ? nll : add(acc, nll);
        first = false;
      }
      auto loss = scale(acc, T(1) / T(batch.size()));
      const double l = static_cast<double>(loss.item());
      loss.backward();
      group.step(1.0);
      detail::log_step<T>(log, step, l, lr);
      ++step;
      epoch_loss += l;
      ++n_batches;
    }
    last_epoch_loss = epoch_loss / std::max<std::size_t>(1, n_batches);
    if (log) *log << "pretrain epoch " << epoch << " loss " << last_epoch_loss << "\n";
  }
  lm.set_trainable(false);
  for (auto&& [name, t] : lm.named_parameters()) t.clear_grad();
  return last_epoch_loss;
}

}  // namespace attempt
