#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "attempt/io/checkpoint.hpp"
#include "attempt/io/export.hpp"
#include "attempt/train/train.hpp"
#include "gradient_check.hpp"

using namespace attempt;

namespace {

void verdict(int id, const std::string& name, bool pass,
             const std::string& detail = "") {
  std::cout << "criterion " << id << " (" << name << "): "
            << (pass ? "PASS" : "FAIL");
  if (!detail.empty()) std::cout << " — " << detail;
  std::cout << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

LMConfig small_cfg(std::uint64_t seed) {
  LMConfig cfg;
  cfg.vocab_size = 64;
  cfg.model_dim = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_dim = 64;
  cfg.max_len = 64;
  cfg.seed = seed;
  return cfg;
}

template <class T>
FrozenLM<T> small_lm(std::uint64_t seed) {
  auto cfg = small_cfg(seed);
  Rng rng(seed);
  return build_frozen_lm<T>(cfg, rng);
}

template <class T>
SoftPrompt<T> frozen_prompt(const FrozenLM<T>& lm, std::size_t m,
                            const std::string& name, Rng& rng) {
  auto p = init_prompt_from_vocab(lm, m, name, rng);
  p.trainable = false;
  p.P.node()->requires_grad = false;
  return p;
}

// Shared desk-scale transfer setup: a backbone pretrained on a tagged task
// mixture, source prompts for copy and sort, and an attention prior.
struct TransferSetup {
  FrozenLM<float> lm;
  TaskDataset copy_task, sort_task, target_task;
  PromptBank<float> bank;
  AttentionModule<float> prior;
  TrainConfig tc;  // target-phase budget shared by every arm
  double build_seconds = 0;
};

TransferSetup build_transfer_setup() {
  const auto t0 = std::chrono::steady_clock::now();
  LMConfig cfg;
  cfg.vocab_size = 64;
  cfg.model_dim = 64;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.ffn_dim = 128;
  cfg.max_len = 64;
  cfg.seed = 1;
  Rng rng(1);
  auto lm = build_frozen_lm<float>(cfg, rng);

  GenOptions opt;
  opt.min_input_len = 3;
  opt.max_input_len = 6;
  auto copy_task = gen_synthetic_task(TaskKind::copy, 950, 101, opt);
  auto sort_task = gen_synthetic_task(TaskKind::sort, 950, 102, opt);
  auto rev_corpus = gen_synthetic_task(TaskKind::reverse, 950, 104, opt);
  auto target_task = gen_synthetic_task(TaskKind::reverse, 100, 103, opt);

  pretrain_lm(lm, {&copy_task, &sort_task, &rev_corpus}, 10, 16, 3e-3, 10, 7);

  TrainConfig src_cfg;
  src_cfg.prompt_lr = 0.3;
  src_cfg.attention_lr = 0.3;
  src_cfg.batch_size = 16;
  src_cfg.epochs = 3;
  src_cfg.prompt_length = 10;
  src_cfg.bottleneck_r = 16;
  src_cfg.warmup_steps = 50;
  src_cfg.seed = 42;
  auto [pc, rc] = train_source_prompt(lm, copy_task, src_cfg);
  auto [ps, rs] = train_source_prompt(lm, sort_task, src_cfg);
  PromptBank<float> bank;
  bank.add(std::move(pc));
  bank.add(std::move(ps));

  auto prior_cfg = src_cfg;
  prior_cfg.epochs = 2;
  prior_cfg.warmup_steps = 20;
  auto prior =
      pretrain_attention_prior(lm, bank, {&copy_task, &sort_task}, prior_cfg);

  TrainConfig tc = src_cfg;
  tc.epochs = 12;
  tc.batch_size = 8;
  tc.warmup_steps = 16;

  TransferSetup s{std::move(lm),   std::move(copy_task), std::move(sort_task),
                  std::move(target_task), std::move(bank), std::move(prior), tc};
  s.build_seconds = seconds_since(t0);
  return s;
}

TransferSetup& transfer_setup() {
  static TransferSetup s = build_transfer_setup();
  return s;
}

}  // namespace

TEST_CASE("criterion 1: end-to-end gradient fidelity") {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::size_t checked = 0;

  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    LMConfig cfg;
    cfg.vocab_size = 12;
    cfg.model_dim = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_len = 32;
    cfg.seed = 300 + trial;
    Rng lm_rng(300 + trial);
    auto lm = build_frozen_lm<double>(cfg, lm_rng);

    Rng rng(500 + trial);
    PromptBank<double> bank;
    for (int j = 0; j < 3; ++j)
      bank.add(frozen_prompt(lm, 4, "s" + std::to_string(j), rng));
    // Gaussian init keeps the max-pool argmax tie-free so central differences
    // agree with the subgradient.
    SoftPrompt<double> target;
    target.name = "tgt";
    target.P = Tensor<double>::randn({4, 16}, rng, 0.5, true);
    target.trainable = true;
    auto g = AttentionModule<double>::init(16, 5, 1.0, rng);

    std::vector<int> input;
    const std::size_t in_len = 3 + rng.next_below(4);
    for (std::size_t i = 0; i < in_len; ++i)
      input.push_back(3 + static_cast<int>(rng.next_below(9)));
    std::vector<int> tgt_tokens;
    const std::size_t out_len = 2 + rng.next_below(3);
    for (std::size_t i = 0; i < out_len; ++i)
      tgt_tokens.push_back(3 + static_cast<int>(rng.next_below(9)));
    tgt_tokens.push_back(cfg.eos_id);

    auto loss_fn = [&]() {
      auto x = lm.embed(input);
      auto inst = compose_instance_prompt(bank, &target, g, x);
      auto prompted = concat_rows<double>({inst.P_instance, x.X});
      std::vector<bool> mask(inst.P_instance.rows(), true);
      mask.insert(mask.end(), x.mask.begin(), x.mask.end());
      return lm.conditional_nll(prompted, mask, tgt_tokens);
    };
    auto res = testing_util::check_gradients(
        loss_fn, {target.P, g.w_down, g.w_up, g.ln_gain, g.ln_bias});
    worst = std::max(worst, res.max_rel_err);
    checked += res.checked;
  }

  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && secs < 60.0;
  std::ostringstream d;
  d << "max rel err " << worst << " over " << checked << " coords in " << secs
    << "s";
  verdict(1, "gradient fidelity", pass, d.str());
  REQUIRE(worst < 1e-4);
  REQUIRE(secs < 60.0);
}

TEST_CASE("criterion 2: frozen-set invariance over 200 steps per regime") {
  auto lm = small_lm<float>(21);
  const auto theta0 = lm.theta_hash();
  GenOptions opt;
  opt.min_input_len = 3;
  opt.max_input_len = 6;

  TrainConfig tc;
  tc.batch_size = 4;
  tc.prompt_length = 4;
  tc.bottleneck_r = 8;
  tc.warmup_steps = 10;
  tc.seed = 5;

  // source regime: 42 train examples, batch 4, 20 epochs -> 220 steps
  auto src_task = gen_synthetic_task(TaskKind::copy, 52, 31, opt);
  tc.epochs = 20;
  auto [src, src_report] = train_source_prompt(lm, src_task, tc);
  const bool src_ok = src_report.steps >= 200 && lm.theta_hash() == theta0;

  PromptBank<float> bank;
  bank.add(src);
  {
    Rng rng(77);
    bank.add(frozen_prompt(lm, 4, "extra", rng));
  }
  const auto bank0 = bank.hash();
  std::vector<std::uint64_t> prompt_hashes;
  for (const auto& p : bank.prompts()) prompt_hashes.push_back(p.hash());

  // target regime
  auto tgt_task = gen_synthetic_task(TaskKind::reverse, 52, 32, opt);
  auto art = train_target(lm, bank, tgt_task, tc);
  bool tgt_ok = art.report.steps >= 200 && lm.theta_hash() == theta0 &&
                bank.hash() == bank0;
  for (std::size_t i = 0; i < bank.size(); ++i)
    tgt_ok = tgt_ok && bank.at(i).hash() == prompt_hashes[i];

  // multi-task regime: 24+24 train examples, batch 4, 20 epochs -> 240 steps
  auto mt_a = gen_synthetic_task(TaskKind::copy, 28, 33, opt);
  auto mt_b = gen_synthetic_task(TaskKind::sort, 28, 34, opt);
  auto mt = train_multi_task(lm, bank, {&mt_a, &mt_b}, tc);
  const bool mt_ok = mt.report.steps >= 200 && lm.theta_hash() == theta0 &&
                     bank.hash() == bank0;

  const bool pass = src_ok && tgt_ok && mt_ok;
  std::ostringstream d;
  d << "steps " << src_report.steps << "/" << art.report.steps << "/"
    << mt.report.steps << ", hashes exactly unchanged";
  verdict(2, "frozen-set invariance", pass, d.str());
  REQUIRE(src_ok);
  REQUIRE(tgt_ok);
  REQUIRE(mt_ok);
}

TEST_CASE("criterion 3: interpolation closed forms") {
  const std::size_t m = 3, d = 6, t = 3;
  Rng rng(11);

  // (a) identical pooled prompts -> uniform attention
  std::vector<double> shared(m * d);
  Rng vals(12);
  for (auto& v : shared) v = vals.next_normal();
  PromptBank<double> bank;
  for (std::size_t j = 0; j < t; ++j) {
    SoftPrompt<double> p;
    p.name = "s" + std::to_string(j);
    p.P = Tensor<double>::from_vector({m, d}, shared);
    bank.add(std::move(p));
  }
  SoftPrompt<double> target;
  target.name = "tgt";
  target.P = Tensor<double>::from_vector({m, d}, shared, true);
  target.trainable = true;
  auto g = AttentionModule<double>::init(d, 2, 1.0, rng);

  std::vector<double> x_vals(2 * d);
  for (auto& v : x_vals) v = vals.next_normal();
  EmbeddedInput<double> x{Tensor<double>::from_vector({2, d}, x_vals),
                          {true, true},
                          {0, 0}};
  auto inst = compose_instance_prompt(bank, &target, g, x);
  double uniform_err = 0;
  for (double a : inst.attention_snapshot)
    uniform_err = std::max(uniform_err, std::fabs(a - 1.0 / (t + 1)));

  // (b) one-hot on the target -> P_instance = 2 * P_target
  PromptBank<double> bank2;
  Rng rng2(13);
  auto lm = small_lm<double>(14);
  for (std::size_t j = 0; j < t; ++j)
    bank2.add(frozen_prompt(lm, m, "r" + std::to_string(j), rng2));
  auto target2 = init_prompt_from_vocab(lm, m, "tgt2", rng2);
  std::vector<double> onehot(t + 1, 0.0);
  onehot.back() = 1.0;
  auto one = interpolate(bank2, target2,
                         AttentionWeights<double>{
                             Tensor<double>::from_vector({t + 1}, onehot)});
  double onehot_err = 0;
  for (std::size_t i = 0; i < one.P_instance.numel(); ++i)
    onehot_err = std::max(onehot_err, std::fabs(one.P_instance.data()[i] -
                                                2.0 * target2.P.data()[i]));

  // (c) constant-attention ablation -> target + mean of sources
  AblationFlags const_attn;
  const_attn.constant_attention = true;
  auto x2 = lm.embed({4, 5, 6});
  auto ca = compose_instance_prompt(bank2, &target2, g, x2, const_attn);
  double const_err = 0;
  for (std::size_t i = 0; i < ca.P_instance.numel(); ++i) {
    double want = target2.P.data()[i];
    for (std::size_t j = 0; j < t; ++j)
      want += bank2.at(j).P.data()[i] / static_cast<double>(t);
    const_err = std::max(const_err, std::fabs(ca.P_instance.data()[i] - want));
  }

  const bool pass = uniform_err < 1e-6 && onehot_err < 1e-6 && const_err < 1e-6;
  std::ostringstream det;
  det << "uniform err " << uniform_err << ", one-hot err " << onehot_err
      << ", const-attn err " << const_err;
  verdict(3, "closed-form interpolation", pass, det.str());
  REQUIRE(uniform_err < 1e-6);
  REQUIRE(onehot_err < 1e-6);
  REQUIRE(const_err < 1e-6);
}

TEST_CASE("criterion 4: parameter accounting") {
  auto c = count_trainable_params(768, 100, 100, 1);
  const long long rounded_total = (c.total + 500) / 1000;
  const long long rounded_prompt = (c.prompt_only + 500) / 1000;
  const bool pass = c.total == 231936 && c.prompt_only == 76800 &&
                    rounded_total == 232 && rounded_prompt == 77;
  std::ostringstream d;
  d << "total " << c.total << " (~" << rounded_total << "k), prompt-only "
    << c.prompt_only << " (~" << rounded_prompt << "k)";
  verdict(4, "parameter accounting", pass, d.str());
  REQUIRE(c.total == 231936);
  REQUIRE(c.prompt_only == 76800);
  REQUIRE(rounded_total == 232);
  REQUIRE(rounded_prompt == 77);
}

TEST_CASE("criterion 5: multi-task routing gradients") {
  auto lm = small_lm<float>(41);
  Rng rng(42);
  PromptBank<float> bank;
  bank.add(frozen_prompt(lm, 4, "src", rng));
  auto g = AttentionModule<float>::init(32, 8, 1.0, rng);
  auto prompt_a = init_prompt_from_vocab(lm, 4, "task_a", rng);
  auto prompt_b = init_prompt_from_vocab(lm, 4, "task_b", rng);

  bool pass = true;
  for (int trial = 0; trial < 100 && pass; ++trial) {
    Rng trng(1000 + trial);
    std::vector<int> input;
    const std::size_t len = 3 + trng.next_below(4);
    for (std::size_t i = 0; i < len; ++i)
      input.push_back(3 + static_cast<int>(trng.next_below(50)));

    // the mixed batch happens to contain only task-A instances
    auto x = lm.embed(input);
    auto inst = compose_instance_prompt(bank, &prompt_a, g, x);
    auto prompted = concat_rows<float>({inst.P_instance, x.X});
    std::vector<bool> mask(inst.P_instance.rows(), true);
    mask.insert(mask.end(), x.mask.begin(), x.mask.end());
    auto loss = lm.conditional_nll(prompted, mask, {input[0], input[1], 2});
    loss.backward();

    pass = pass && prompt_a.P.has_grad() && !prompt_b.P.has_grad();
    double g_norm = 0;
    for (auto& [name, p] : g.named_parameters()) {
      pass = pass && p.has_grad();
      for (float v : p.grad()) g_norm += std::fabs(v);
    }
    pass = pass && g_norm > 0;

    prompt_a.P.clear_grad();
    for (auto&& [name, p] : g.named_parameters()) p.clear_grad();
  }
  verdict(5, "multi-task routing", pass,
          "100 trials: absent task exactly zero, attention module nonzero");
  REQUIRE(pass);
}

TEST_CASE("criterion 6: transfer benefit over prompt tuning") {
  const auto t0 = std::chrono::steady_clock::now();
  auto& s = transfer_setup();

  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    auto tc = s.tc;
    tc.seed = seed;
    auto [pt_prompt, pt_report] = train_source_prompt(s.lm, s.target_task, tc);
    auto art = train_target(s.lm, s.bank, s.target_task, tc, &s.prior);
    const bool win = art.report.best_dev_metric >= pt_report.best_dev_metric;
    wins += win;
    detail << " seed " << seed << ": PT " << pt_report.best_dev_metric
           << " vs " << art.report.best_dev_metric << (win ? "" : " (loss)");
  }
  const double secs = s.build_seconds + seconds_since(t0);
  const bool pass = wins >= 4 && secs < 600.0;
  std::ostringstream d;
  d << wins << "/5 seeds," << detail.str() << "; " << secs << "s total";
  verdict(6, "transfer benefit", pass, d.str());
  REQUIRE(wins >= 4);
  REQUIRE(secs < 600.0);
}

TEST_CASE("criterion 7: ablation ordering") {
  auto& s = transfer_setup();

  int beat_const = 0, beat_single = 0;
  std::vector<std::uint64_t> const_failures, single_failures;
  std::ostringstream detail;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    auto tc = s.tc;
    tc.seed = seed;
    auto full = train_target(s.lm, s.bank, s.target_task, tc, &s.prior);
    auto tc_const = tc;
    tc_const.ablation.constant_attention = true;
    auto ca = train_target(s.lm, s.bank, s.target_task, tc_const, &s.prior);
    auto tc_single = tc;
    tc_single.ablation.single_source = s.bank.at(0).name;
    auto ss = train_target(s.lm, s.bank, s.target_task, tc_single, &s.prior);

    if (full.report.best_dev_metric >= ca.report.best_dev_metric)
      ++beat_const;
    else
      const_failures.push_back(seed);
    if (full.report.best_dev_metric >= ss.report.best_dev_metric)
      ++beat_single;
    else
      single_failures.push_back(seed);
    detail << " seed " << seed << ": full " << full.report.best_dev_metric
           << " const " << ca.report.best_dev_metric << " single "
           << ss.report.best_dev_metric;
  }
  const bool pass = beat_const >= 3 && beat_single >= 3;
  std::ostringstream d;
  d << "full>=const " << beat_const << "/5, full>=single " << beat_single
    << "/5;" << detail.str();
  if (!const_failures.empty() || !single_failures.empty()) {
    d << "; failing seeds:";
    for (auto f : const_failures) d << " const@" << f;
    for (auto f : single_failures) d << " single@" << f;
  }
  verdict(7, "ablation ordering", pass, d.str());
  REQUIRE(beat_const >= 3);
  REQUIRE(beat_single >= 3);
}

TEST_CASE("criterion 8: determinism, persistence, corruption") {
  GenOptions opt;
  opt.min_input_len = 3;
  opt.max_input_len = 6;
  auto task = gen_synthetic_task(TaskKind::reverse, 24, 81, opt);

  auto run = [&](const std::string& path) {
    auto lm = small_lm<float>(82);
    Rng rng(83);
    PromptBank<float> bank;
    bank.add(frozen_prompt(lm, 4, "src", rng));
    TrainConfig tc;
    tc.batch_size = 4;
    tc.epochs = 3;
    tc.prompt_length = 4;
    tc.bottleneck_r = 8;
    tc.warmup_steps = 5;
    tc.seed = 84;
    auto art = train_target(lm, bank, task, tc);
    auto ckpt = make_checkpoint(lm, bank, &art.target, art.g,
                                {{"kind", "target"}}, tc.seed);
    save_checkpoint(ckpt, path);
    return ckpt;
  };

  const std::string p1 = "/tmp/attempt_acc_a.ckpt", p2 = "/tmp/attempt_acc_b.ckpt";
  auto ckpt1 = run(p1);
  run(p2);
  auto bytes = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string{std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>()};
  };
  const auto b1 = bytes(p1), b2 = bytes(p2);
  const bool identical = !b1.empty() && b1 == b2;

  auto loaded = load_checkpoint(p1);
  bool round_trip = loaded.arrays.size() == ckpt1.arrays.size();
  for (std::size_t i = 0; round_trip && i < loaded.arrays.size(); ++i)
    round_trip = loaded.arrays[i].values == ckpt1.arrays[i].values &&
                 loaded.arrays[i].name == ckpt1.arrays[i].name;

  auto corrupted = b1;
  corrupted[corrupted.size() - 3] ^= 0x01;
  {
    std::ofstream out(p2, std::ios::binary);
    out.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
  }
  bool rejected = false;
  try {
    load_checkpoint(p2);
  } catch (const IoError&) {
    rejected = true;
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());

  const bool pass = identical && round_trip && rejected;
  std::ostringstream d;
  d << "bit-identical reruns " << (identical ? "yes" : "NO") << ", round trip "
    << (round_trip ? "identity" : "BROKEN") << ", corruption "
    << (rejected ? "rejected" : "ACCEPTED");
  verdict(8, "determinism and persistence", pass, d.str());
  REQUIRE(identical);
  REQUIRE(round_trip);
  REQUIRE(rejected);
}

TEST_CASE("criterion 9: attention export properties") {
  auto lm = small_lm<float>(91);
  Rng rng(92);
  PromptBank<float> bank;
  bank.add(frozen_prompt(lm, 4, "s1", rng));
  bank.add(frozen_prompt(lm, 4, "s2", rng));
  auto target = init_prompt_from_vocab(lm, 4, "tgt", rng);
  auto g = AttentionModule<float>::init(32, 8, 1.0, rng);

  GenOptions opt;
  opt.min_input_len = 3;
  opt.max_input_len = 6;
  auto task = gen_synthetic_task(TaskKind::copy, 40, 93, opt);
  auto ev = evaluate(lm, bank, g, &target, task.test);

  bool rows_ok = !ev.per_instance_attention.empty();
  for (const auto& row : ev.per_instance_attention) {
    double sum = 0;
    for (double v : row) {
      rows_ok = rows_ok && v >= 0.0 && v <= 1.0;
      sum += v;
    }
    rows_ok = rows_ok && std::fabs(sum - 1.0) < 1e-6;
  }
  double mean_sum = 0;
  for (double v : ev.mean_attention) mean_sum += v;
  const bool mean_ok = std::fabs(mean_sum - 1.0) < 1e-6;

  // instance-wise distinctness at random init
  NoGradGuard no_grad;
  double min_distinct = 1e9;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i + 1 < task.test.size(); ++i) {
    auto xa = lm.embed(task.test[i].input_tokens);
    auto xb = lm.embed(task.test[i + 1].input_tokens);
    auto pa = pool_input(xa), pb = pool_input(xb);
    bool pooled_differ = false;
    for (std::size_t k = 0; k < pa.numel(); ++k)
      if (pa.data()[k] != pb.data()[k]) pooled_differ = true;
    if (!pooled_differ) continue;
    auto ia = compose_instance_prompt(bank, &target, g, xa);
    auto ib = compose_instance_prompt(bank, &target, g, xb);
    double diff = 0;
    for (std::size_t k = 0; k < ia.attention_snapshot.size(); ++k)
      diff = std::max(diff, std::fabs(static_cast<double>(
                                ia.attention_snapshot[k] -
                                ib.attention_snapshot[k])));
    min_distinct = std::min(min_distinct, diff);
    ++pairs;
  }
  const bool distinct_ok = pairs > 0 && min_distinct > 1e-9;

  const bool pass = rows_ok && mean_ok && distinct_ok;
  std::ostringstream d;
  d << "probability rows ok, mean row sum " << mean_sum << ", min pairwise "
    << "attention gap " << min_distinct << " over " << pairs << " pairs";
  verdict(9, "attention export", pass, d.str());
  REQUIRE(rows_ok);
  REQUIRE(mean_ok);
  REQUIRE(distinct_ok);
}
