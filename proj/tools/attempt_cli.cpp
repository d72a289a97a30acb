#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "attempt/data/dataset.hpp"
#include "attempt/io/checkpoint.hpp"
#include "attempt/io/export.hpp"
#include "attempt/nn/lm.hpp"
#include "attempt/prompt/prompt.hpp"
#include "attempt/train/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attempt;

using Scalar = float;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok)
      throw ConfigError("config: unknown key '" + it.key() + "' in " + ctx);
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

struct TaskSpec {
  std::string name;
  std::optional<TaskKind> kind;
  std::size_t size = 100;
  std::uint64_t seed = 0;
  GenOptions gen;
  std::string path;  // jsonl source instead of a generator
};

struct ExperimentConfig {
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  LMConfig lm;
  std::string lm_checkpoint;  // relative to out_dir
  std::size_t pretrain_epochs = 0;
  std::size_t pretrain_batch_size = 8;
  double pretrain_lr = 0.01;
  std::size_t pretrain_tag_len = 10;
  std::vector<TaskSpec> tasks;
  TrainConfig train;
  std::vector<std::string> source_tasks;
  std::vector<std::string> target_tasks;  // one entry unless multi-task
  std::vector<std::string> bank_paths;
  std::string prior_path;
};

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': malformed JSON: " + e.what());
  }
  check_keys(j,
             {"out_dir", "seed", "lm", "tasks", "train", "source_tasks",
              "target_task", "target_tasks", "bank", "prior"},
             "top level");

  ExperimentConfig cfg;
  cfg.out_dir = get_or<std::string>(j, "out_dir", "out");
  if (const char* env = std::getenv("ATTEMPT_OUT_DIR")) cfg.out_dir = env;
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);

  if (j.contains("lm")) {
    const auto& l = j.at("lm");
    check_keys(l,
               {"vocab_size", "model_dim", "n_layers", "n_heads", "ffn_dim",
                "max_len", "seed", "checkpoint", "pretrain_epochs",
                "pretrain_batch_size", "pretrain_lr", "pretrain_tag_len"},
               "lm");
    cfg.lm.vocab_size = get_or<std::size_t>(l, "vocab_size", 64);
    cfg.lm.model_dim = get_or<std::size_t>(l, "model_dim", 64);
    cfg.lm.n_layers = get_or<std::size_t>(l, "n_layers", 1);
    cfg.lm.n_heads = get_or<std::size_t>(l, "n_heads", 4);
    cfg.lm.ffn_dim = get_or<std::size_t>(l, "ffn_dim", 128);
    cfg.lm.max_len = get_or<std::size_t>(l, "max_len", 64);
    cfg.lm.seed = get_or<std::uint64_t>(l, "seed", cfg.seed);
    cfg.lm_checkpoint = get_or<std::string>(l, "checkpoint", "lm.ckpt");
    cfg.pretrain_epochs = get_or<std::size_t>(l, "pretrain_epochs", 0);
    cfg.pretrain_batch_size = get_or<std::size_t>(l, "pretrain_batch_size", 8);
    cfg.pretrain_lr = get_or<double>(l, "pretrain_lr", 0.01);
    cfg.pretrain_tag_len = get_or<std::size_t>(l, "pretrain_tag_len", 10);
  } else {
    cfg.lm.n_layers = 1;
    cfg.lm.ffn_dim = 128;
    cfg.lm.max_len = 64;
    cfg.lm.seed = cfg.seed;
    cfg.lm_checkpoint = "lm.ckpt";
  }

  for (const auto& t : get_or<json>(j, "tasks", json::array())) {
    check_keys(t, {"name", "kind", "size", "seed", "path", "min_input_len", "max_input_len"},
               "tasks[]");
    TaskSpec spec;
    spec.name = t.at("name").get<std::string>();
    if (t.contains("path")) {
      spec.path = t.at("path").get<std::string>();
    } else {
      spec.kind = task_kind_from_string(
          get_or<std::string>(t, "kind", spec.name));
      spec.size = get_or<std::size_t>(t, "size", 100);
      spec.seed = get_or<std::uint64_t>(t, "seed", cfg.seed);
      spec.gen.min_input_len = get_or<std::size_t>(t, "min_input_len", 4);
      spec.gen.max_input_len = get_or<std::size_t>(t, "max_input_len", 10);
      spec.gen.vocab.vocab_size = cfg.lm.vocab_size;
    }
    cfg.tasks.push_back(std::move(spec));
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"prompt_lr", "attention_lr", "weight_decay", "batch_size",
                "epochs", "temperature_k", "prompt_length", "bottleneck_r",
                "warmup_steps", "grad_accum", "balanced_sampling"},
               "train");
    cfg.train.prompt_lr = get_or<double>(t, "prompt_lr", 0.3);
    cfg.train.attention_lr = get_or<double>(t, "attention_lr", 0.3);
    cfg.train.weight_decay = get_or<double>(t, "weight_decay", 1e-5);
    cfg.train.batch_size = get_or<std::size_t>(t, "batch_size", 16);
    cfg.train.epochs = get_or<std::size_t>(t, "epochs", 5);
    cfg.train.temperature_k = get_or<double>(t, "temperature_k", 1.0);
    cfg.train.prompt_length = get_or<std::size_t>(t, "prompt_length", 10);
    cfg.train.bottleneck_r = get_or<std::size_t>(t, "bottleneck_r", 16);
    cfg.train.warmup_steps = get_or<std::size_t>(t, "warmup_steps", 500);
    cfg.train.grad_accum = get_or<std::size_t>(t, "grad_accum", 1);
    cfg.train.balanced_sampling = get_or<bool>(t, "balanced_sampling", false);
  }
  cfg.train.seed = cfg.seed;

  cfg.source_tasks = get_or<std::vector<std::string>>(j, "source_tasks", {});
  if (j.contains("target_task"))
    cfg.target_tasks.push_back(j.at("target_task").get<std::string>());
  for (const auto& t : get_or<std::vector<std::string>>(j, "target_tasks", {}))
    cfg.target_tasks.push_back(t);
  cfg.bank_paths = get_or<std::vector<std::string>>(j, "bank", {});
  cfg.prior_path = get_or<std::string>(j, "prior", "");
  return cfg;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

TaskDataset materialize_task(const ExperimentConfig& cfg, const std::string& name) {
  for (const auto& spec : cfg.tasks) {
    if (spec.name != name) continue;
    if (!spec.path.empty()) {
      auto ds = load_jsonl(spec.path, cfg.lm.vocab_size);
      ds.task_id = spec.name;
      return ds;
    }
    auto ds = gen_synthetic_task(*spec.kind, spec.size, spec.seed, spec.gen);
    ds.task_id = spec.name;
    for (auto* split : {&ds.train, &ds.dev, &ds.test})
      for (auto& ex : *split) ex.task_id = spec.name;
    return ds;
  }
  throw ConfigError("config: no task named '" + name + "'");
}

json lm_config_json(const LMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},       {"max_len", c.max_len},
          {"seed", c.seed}};
}

LMConfig lm_config_from_json(const json& j) {
  LMConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

NamedArray theta_array(const std::string& name, const Tensor<Scalar>& t) {
  NamedArray a;
  a.name = name;
  a.role = "theta";
  a.shape = t.shape();
  a.values.assign(t.data().begin(), t.data().end());
  return a;
}

void save_lm_checkpoint(const FrozenLM<Scalar>& lm, const std::string& path,
                        std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = {{"kind", "backbone"}, {"lm", lm_config_json(lm.config())}};
  ckpt.seed = seed;
  ckpt.theta_hash = lm.theta_hash();
  for (const auto& [name, t] : lm.named_parameters())
    ckpt.arrays.push_back(theta_array(name, t));
  save_checkpoint(ckpt, path);
}

FrozenLM<Scalar> load_lm_checkpoint(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.config.value("kind", "") != "backbone")
    throw IoError("'" + path + "' is not a backbone checkpoint");
  auto cfg = lm_config_from_json(ckpt.config.at("lm"));
  Rng rng(cfg.seed);
  auto lm = build_frozen_lm<Scalar>(cfg, rng);
  auto params = lm.named_parameters();
  std::map<std::string, Tensor<Scalar>> by_name(params.begin(), params.end());
  for (const auto& a : ckpt.arrays) {
    if (a.role != "theta") continue;
    auto it = by_name.find(a.name);
    if (it == by_name.end())
      throw IoError("backbone checkpoint: unexpected array '" + a.name + "'");
    if (it->second.numel() != a.values.size())
      throw IoError("backbone checkpoint: size mismatch for '" + a.name + "'");
    std::copy(a.values.begin(), a.values.end(), it->second.data().begin());
  }
  if (lm.theta_hash() != ckpt.theta_hash)
    throw IoError("backbone checkpoint: theta hash mismatch after load");
  return lm;
}

void save_prompt_checkpoint(const SoftPrompt<Scalar>& p, const FrozenLM<Scalar>& lm,
                            const std::string& path, std::uint64_t seed,
                            const json& config) {
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.seed = seed;
  ckpt.theta_hash = lm.theta_hash();
  NamedArray a;
  a.name = p.name;
  a.role = "source";
  a.shape = p.P.shape();
  a.values.assign(p.P.data().begin(), p.P.data().end());
  ckpt.arrays.push_back(std::move(a));
  save_checkpoint(ckpt, path);
}

PromptBank<Scalar> load_bank(const std::vector<std::string>& paths,
                             const FrozenLM<Scalar>& lm) {
  PromptBank<Scalar> bank;
  for (const auto& path : paths) {
    auto ckpt = load_checkpoint(path);
    if (ckpt.theta_hash != lm.theta_hash())
      throw IoError("bank prompt '" + path +
                    "' was trained against a different backbone (theta hash mismatch)");
    const auto* a = ckpt.find("source");
    if (!a) throw IoError("'" + path + "' contains no source prompt");
    SoftPrompt<Scalar> p;
    p.name = a->name;
    p.P = Tensor<Scalar>::from_vector(a->shape,
                                      std::vector<Scalar>(a->values.begin(),
                                                          a->values.end()));
    p.trainable = false;
    p.origin = PromptOrigin::trained;
    bank.add(std::move(p));
  }
  return bank;
}

AttentionModule<Scalar> load_prior(const std::string& path, const FrozenLM<Scalar>& lm) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.theta_hash != lm.theta_hash())
    throw IoError("prior '" + path + "': theta hash mismatch");
  auto st = restore_state(ckpt, lm);
  return st.g;
}

AblationFlags parse_ablation(const std::string& s) {
  AblationFlags f;
  if (s.empty() || s == "none") return f;
  if (s == "no-target") {
    f.no_target = true;
  } else if (s == "const-attn") {
    f.constant_attention = true;
  } else if (s == "no-prior") {
    f.no_prior = true;
  } else if (s.rfind("single:", 0) == 0) {
    f.single_source = s.substr(7);
  } else {
    throw ConfigError("unknown ablation '" + s +
                      "' (expected no-target, const-attn, single:NAME, no-prior)");
  }
  return f;
}

json report_json(const TrainReport& report) {
  auto j = report.to_json();
  j.erase("wall_clock_sec");  // keep artifacts byte-identical across runs
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

FrozenLM<Scalar> obtain_lm(const ExperimentConfig& cfg) {
  const std::string path = out_path(cfg, cfg.lm_checkpoint);
  if (fs::exists(path)) return load_lm_checkpoint(path);
  throw IoError("backbone checkpoint '" + path + "' not found; run build-lm first");
}

void require_files(const std::vector<std::string>& paths) {
  for (const auto& p : paths)
    if (!fs::exists(p)) throw IoError("required file '" + p + "' not found");
}

// ---------------------------------------------------------------------------

int cmd_build_lm(const std::string& config_path) {
  auto cfg = load_config(config_path);
  Rng rng(cfg.lm.seed);
  auto lm = build_frozen_lm<Scalar>(cfg.lm, rng);

  if (cfg.pretrain_epochs > 0) {
    if (cfg.source_tasks.empty())
      throw ConfigError("build-lm: pretraining requires source_tasks");
    std::vector<TaskDataset> tasks;
    for (const auto& name : cfg.source_tasks)
      tasks.push_back(materialize_task(cfg, name));
    std::vector<const TaskDataset*> ptrs;
    for (const auto& t : tasks) ptrs.push_back(&t);
    const double loss =
        pretrain_lm(lm, ptrs, cfg.pretrain_epochs, cfg.pretrain_batch_size,
                    cfg.pretrain_lr, cfg.pretrain_tag_len, cfg.lm.seed, &std::cout);
    std::cout << "pretrain final loss " << loss << "\n";
  }

  const std::string path = out_path(cfg, cfg.lm_checkpoint);
  save_lm_checkpoint(lm, path, cfg.lm.seed);
  std::size_t total = 0;
  for (const auto& [name, t] : lm.named_parameters()) total += t.numel();
  std::cout << "backbone parameters " << total << " (trainable "
            << lm.trainable_param_count() << ")\n"
            << "theta hash " << std::hex << lm.theta_hash() << std::dec << "\n"
            << "wrote " << path << "\n";
  return 0;
}

int cmd_train_source(const std::string& config_path) {
  auto cfg = load_config(config_path);
  if (cfg.source_tasks.empty())
    throw ConfigError("train-source: config lists no source_tasks");
  auto lm = obtain_lm(cfg);

  for (const auto& name : cfg.source_tasks) {
    auto task = materialize_task(cfg, name);
    auto [prompt, report] = train_source_prompt(lm, task, cfg.train, &std::cout);
    const std::string ckpt_path = out_path(cfg, "prompt_" + name + ".ckpt");
    save_prompt_checkpoint(prompt, lm, ckpt_path, cfg.seed,
                           {{"kind", "source_prompt"}, {"task", name}});
    write_json(out_path(cfg, "report_" + name + ".json"), report_json(report));
    std::cout << "task " << name << " best dev " << report.best_dev_metric
              << " (epoch " << report.best_epoch << ") -> " << ckpt_path << "\n";
  }
  return 0;
}

struct TargetRunResult {
  double test_exact_match = 0;
  TrainReport report;
};

TargetRunResult run_target_once(const ExperimentConfig& cfg,
                                const FrozenLM<Scalar>& lm,
                                const PromptBank<Scalar>& bank,
                                const AttentionModule<Scalar>* prior,
                                const std::string& tag, bool quiet) {
  TargetRunResult res;
  auto task = materialize_task(cfg, cfg.target_tasks.at(0));
  std::ostream* log = quiet ? nullptr : &std::cout;

  if (cfg.train.ablation.no_target) {
    // nothing trainable in this mode: compose + evaluate only
    Rng rng(cfg.seed ^ 0x7a46e7ull);
    auto g = prior ? prior->clone()
                   : AttentionModule<Scalar>::init(lm.config().model_dim,
                                                   cfg.train.bottleneck_r,
                                                   cfg.train.temperature_k, rng);
    g.temperature_k = cfg.train.temperature_k;
    auto ev = evaluate<Scalar>(lm, bank, g, nullptr, task.test, cfg.train.ablation);
    res.test_exact_match = ev.exact_match;
    auto ckpt = make_checkpoint<Scalar>(lm, bank, nullptr, g,
                                        {{"kind", "target"}, {"ablation", "no-target"}},
                                        cfg.seed);
    save_checkpoint(ckpt, out_path(cfg, "target_" + tag + ".ckpt"));
    return res;
  }

  auto art = train_target(lm, bank, task, cfg.train,
                          cfg.train.ablation.no_prior ? nullptr : prior, log);
  res.report = art.report;
  if (!quiet) {
    for (std::size_t e = 0; e < art.report.dev_mean_attention.size(); ++e) {
      std::cout << "epoch " << e << " mean attention";
      for (double v : art.report.dev_mean_attention[e]) std::cout << " " << v;
      std::cout << "\n";
    }
  }
  auto ev = evaluate(lm, bank, art.g, &art.target, task.test, cfg.train.ablation);
  res.test_exact_match = ev.exact_match;

  auto ckpt = make_checkpoint(lm, bank, &art.target, art.g,
                              {{"kind", "target"}, {"task", task.task_id}},
                              cfg.seed);
  save_checkpoint(ckpt, out_path(cfg, "target_" + tag + ".ckpt"));
  write_json(out_path(cfg, "target_" + tag + ".report.json"),
             report_json(art.report));
  return res;
}

int cmd_train_target(const std::string& config_path, bool multi_task,
                     const std::string& ablation_str, const std::string& prior_flag,
                     const std::string& target_init, double attention_lr,
                     double prompt_lr, bool grid) {
  auto cfg = load_config(config_path);
  if (cfg.target_tasks.empty())
    throw ConfigError("train-target: config names no target task");

  cfg.train.ablation = parse_ablation(ablation_str);
  if (!prior_flag.empty()) cfg.prior_path = prior_flag;
  if (attention_lr >= 0) cfg.train.attention_lr = attention_lr;
  if (prompt_lr >= 0) cfg.train.prompt_lr = prompt_lr;
  if (!target_init.empty()) {
    if (target_init == "random") {
      cfg.train.target_init = TargetInit::random_vocab;
    } else if (target_init.rfind("source:", 0) == 0) {
      cfg.train.target_init = TargetInit::from_source;
      cfg.train.target_init_source = target_init.substr(7);
    } else {
      throw ConfigError("unknown --target-init '" + target_init +
                        "' (expected random or source:NAME)");
    }
  }

  // resolve every referenced file before any training starts
  std::vector<std::string> needed = cfg.bank_paths;
  needed.push_back(out_path(cfg, cfg.lm_checkpoint));
  if (!cfg.prior_path.empty()) needed.push_back(cfg.prior_path);
  require_files(needed);

  auto lm = obtain_lm(cfg);
  auto bank = load_bank(cfg.bank_paths, lm);
  std::optional<AttentionModule<Scalar>> prior;
  if (!cfg.prior_path.empty()) prior = load_prior(cfg.prior_path, lm);
  const AttentionModule<Scalar>* prior_ptr = prior ? &*prior : nullptr;

  if (multi_task) {
    if (cfg.target_tasks.size() < 2)
      throw ConfigError("--multi-task needs at least two target tasks");
    std::vector<TaskDataset> tasks;
    for (const auto& name : cfg.target_tasks)
      tasks.push_back(materialize_task(cfg, name));
    std::vector<const TaskDataset*> ptrs;
    for (const auto& t : tasks) ptrs.push_back(&t);
    auto art = train_multi_task(lm, bank, ptrs, cfg.train,
                                cfg.train.ablation.no_prior ? nullptr : prior_ptr,
                                &std::cout);
    for (std::size_t i = 0; i < art.prompts.size(); ++i) {
      auto ckpt = make_checkpoint(lm, bank, &art.prompts[i], art.g,
                                  {{"kind", "target"}, {"task", art.prompts[i].name}},
                                  cfg.seed);
      save_checkpoint(ckpt, out_path(cfg, "target_" + art.prompts[i].name + ".ckpt"));
    }
    write_json(out_path(cfg, "target_multi.report.json"), report_json(art.report));
    std::cout << "multi-task best dev " << art.report.best_dev_metric << " (epoch "
              << art.report.best_epoch << ")\n";
    return 0;
  }

  if (grid) {
    const std::string target_name = cfg.target_tasks.at(0);
    std::cout << "ablation grid over target '" << target_name << "'\n";

    auto full_cfg = cfg;
    full_cfg.train.ablation = {};
    auto full = run_target_once(full_cfg, lm, bank, prior_ptr, target_name + "_full",
                                true);

    // pick the single source most similar to the trained full-run target
    std::string best_single = bank.empty() ? "" : bank.at(0).name;
    if (bank.size() > 1) {
      auto full_ckpt =
          load_checkpoint(out_path(cfg, "target_" + target_name + "_full.ckpt"));
      auto st = restore_state(full_ckpt, lm);
      double best_sim = -2;
      for (std::size_t i = 0; i < bank.size(); ++i) {
        const double sim = cosine_similarity(bank.at(i), st.target);
        if (sim > best_sim) {
          best_sim = sim;
          best_single = bank.at(i).name;
        }
      }
    }

    struct Row {
      std::string name;
      std::string ablation;
    };
    std::vector<Row> rows{{"full", "none"},
                          {"no-target", "no-target"},
                          {"const-attn", "const-attn"},
                          {"single:" + best_single, "single:" + best_single},
                          {"no-prior", "no-prior"}};
    std::cout << std::left << std::setw(24) << "variant" << "test_exact_match\n";
    for (const auto& row : rows) {
      double em;
      if (row.name == "full") {
        em = full.test_exact_match;
      } else {
        auto run_cfg = cfg;
        run_cfg.train.ablation = parse_ablation(row.ablation);
        em = run_target_once(run_cfg, lm, bank, prior_ptr,
                             target_name + "_" + row.ablation, true)
                 .test_exact_match;
      }
      std::cout << std::left << std::setw(24) << row.name << em << "\n";
    }
    return 0;
  }

  auto res = run_target_once(cfg, lm, bank, prior_ptr, cfg.target_tasks.at(0), false);
  std::cout << "target test exact match " << res.test_exact_match << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& artifact_flag) {
  auto cfg = load_config(config_path);
  if (cfg.target_tasks.empty())
    throw ConfigError("eval: config names no target task");
  const std::string target_name = cfg.target_tasks.at(0);
  const std::string artifact = artifact_flag.empty()
                                   ? out_path(cfg, "target_" + target_name + ".ckpt")
                                   : artifact_flag;
  require_files({artifact, out_path(cfg, cfg.lm_checkpoint)});

  auto lm = obtain_lm(cfg);
  auto st = restore_state(load_checkpoint(artifact), lm);

  if (!st.bank.empty() && st.g.dim() != st.bank.at(0).P.cols())
    throw ConfigError("attention module dimension [" + std::to_string(st.g.dim()) +
                      " x " + std::to_string(st.g.bottleneck()) +
                      "] incompatible with bank prompt shape [" +
                      std::to_string(st.bank.at(0).P.rows()) + " x " +
                      std::to_string(st.bank.at(0).P.cols()) + "]");

  auto task = materialize_task(cfg, target_name);
  AblationFlags ablation;
  ablation.no_target = !st.has_target;
  auto ev = evaluate(lm, st.bank, st.g, st.has_target ? &st.target : nullptr,
                     task.test, ablation);

  std::vector<std::string> columns;
  for (const auto& p : st.bank.prompts()) columns.push_back(p.name);
  if (st.has_target) columns.push_back("target");
  std::vector<std::string> instance_tasks(ev.per_instance_attention.size(),
                                          target_name);

  write_json(out_path(cfg, "eval_" + target_name + ".json"), ev.to_json());
  write_instance_attention_csv(out_path(cfg, "attention_" + target_name + ".csv"),
                               instance_tasks, ev.per_instance_attention, columns);
  write_mean_attention_csv(out_path(cfg, "attention_mean_" + target_name + ".csv"),
                           {target_name}, columns, {ev.mean_attention});
  write_attention_svg(out_path(cfg, "attention_" + target_name + ".svg"),
                      {target_name}, columns, {ev.mean_attention});
  std::cout << "exact match " << ev.exact_match << " over " << ev.n
            << " test instances\n";
  return 0;
}

int cmd_params(const std::string& config_path, std::size_t d, std::size_t m,
               std::size_t r, std::size_t n) {
  if (!config_path.empty()) {
    auto cfg = load_config(config_path);
    if (d == 0) d = cfg.lm.model_dim;
    if (m == 0) m = cfg.train.prompt_length;
    if (r == 0) r = cfg.train.bottleneck_r;
    if (n == 0) n = std::max<std::size_t>(1, cfg.target_tasks.size());
  }
  if (d == 0 || m == 0 || r == 0 || n == 0)
    throw ConfigError("params: need d, m, r, and n (via flags or --config)");
  auto c = count_trainable_params(d, m, r, n);
  std::cout << "d=" << d << " m=" << m << " r=" << r << " N=" << n << "\n"
            << "total trainable       " << c.total << "\n"
            << "per-task amortized    " << c.per_task << "\n"
            << "prompt-only baseline  " << c.prompt_only << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attentional soft-prompt mixtures over a frozen seq2seq backbone"};
  app.require_subcommand(1);

  std::string config_path;

  auto* build = app.add_subcommand("build-lm", "Build (and optionally pretrain) the frozen backbone");
  build->add_option("--config", config_path, "experiment config JSON")->required();

  auto* src = app.add_subcommand("train-source", "Train one soft prompt per source task");
  src->add_option("--config", config_path, "experiment config JSON")->required();

  auto* tgt = app.add_subcommand("train-target", "Train a target prompt with attentional mixing");
  bool multi_task = false, grid = false;
  std::string ablation_str, prior_flag, target_init;
  double attention_lr = -1, prompt_lr = -1;
  tgt->add_option("--config", config_path, "experiment config JSON")->required();
  tgt->add_flag("--multi-task", multi_task, "train all target_tasks jointly");
  tgt->add_option("--ablation", ablation_str,
                  "no-target | const-attn | single:NAME | no-prior");
  tgt->add_option("--prior", prior_flag, "attention-module checkpoint to start from");
  tgt->add_option("--target-init", target_init, "random | source:NAME");
  tgt->add_option("--attention-lr", attention_lr, "override attention learning rate");
  tgt->add_option("--prompt-lr", prompt_lr, "override prompt learning rate");
  tgt->add_flag("--grid", grid, "run the five-variant ablation comparison");

  auto* ev = app.add_subcommand("eval", "Evaluate saved artifacts and export attention");
  std::string artifact_flag;
  ev->add_option("--config", config_path, "experiment config JSON")->required();
  ev->add_option("--artifact", artifact_flag, "target checkpoint path");

  auto* params = app.add_subcommand("params", "Print trainable-parameter accounting");
  std::size_t pd = 0, pm = 0, pr = 0, pn = 0;
  params->add_option("--config", config_path, "experiment config JSON");
  params->add_option("-d,--model-dim", pd, "embedding dimension");
  params->add_option("-m,--prompt-length", pm, "prompt length");
  params->add_option("-r,--bottleneck", pr, "attention bottleneck");
  params->add_option("-n,--tasks", pn, "number of target tasks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed()) return cmd_build_lm(config_path);
    if (src->parsed()) return cmd_train_source(config_path);
    if (tgt->parsed())
      return cmd_train_target(config_path, multi_task, ablation_str, prior_flag,
                              target_init, attention_lr, prompt_lr, grid);
    if (ev->parsed()) return cmd_eval(config_path, artifact_flag);
    if (params->parsed()) return cmd_params(config_path, pd, pm, pr, pn);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
