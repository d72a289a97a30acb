#pragma once
#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "attempt/core/error.hpp"
#include "attempt/core/rng.hpp"

namespace attempt {

struct Example {
  std::vector<int> input_tokens;
  std::vector<int> target_tokens;  // always ends with eos
  std::string task_id;
};

struct TaskDataset {
  std::string task_id;
  std::vector<Example> train, dev, test;
  std::string source;  // generator spec or file path

  std::size_t size() const { return train.size() + dev.size() + test.size(); }
};

// A padded mini-batch. Instances may come from multiple tasks; the task of
// each instance travels with it.
struct Batch {
  std::vector<std::vector<int>> input_tokens;   // padded with pad_id
  std::vector<std::vector<bool>> input_mask;    // false at pad positions
  std::vector<std::vector<int>> target_tokens;  // padded with pad_id after eos
  std::vector<std::string> task_ids;

  std::size_t size() const { return input_tokens.size(); }
};

enum class TaskKind { copy, reverse, sort, parity_classify, pattern_classify, entail_toy };

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "sort") return TaskKind::sort;
  if (s == "parity_classify") return TaskKind::parity_classify;
  if (s == "pattern_classify") return TaskKind::pattern_classify;
  if (s == "entail_toy") return TaskKind::entail_toy;
  throw ConfigError("unknown task kind '" + s + "'");
}

inline std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sort: return "sort";
    case TaskKind::parity_classify: return "parity_classify";
    case TaskKind::pattern_classify: return "pattern_classify";
    case TaskKind::entail_toy: return "entail_toy";
  }
  return "?";
}

// Vocabulary layout shared by all synthetic tasks. Classification labels are
// ordinary generated tokens (reserved ids at the top of the vocabulary), so
// every task is sequence-to-sequence.
struct VocabLayout {
  std::size_t vocab_size = 64;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;

  int first_content() const { return 3; }
  int label(int k) const { return static_cast<int>(vocab_size) - 8 + k; }
  int n_content() const { return label(0) - first_content(); }
};

struct GenOptions {
  VocabLayout vocab;
  std::size_t min_input_len = 4;
  std::size_t max_input_len = 10;
};

// Deterministic synthetic datasets with a seeded 80/10/10 split. Inputs are
// de-duplicated so the splits stay disjoint.
//
// Task relatedness: copy/reverse/sort all map the same token multiset to an
// ordering of itself; parity_classify and pattern_classify both read
// structural properties; entail_toy checks token membership, which overlaps
// with the copy/sort family.
inline TaskDataset gen_synthetic_task(TaskKind kind, std::size_t size,
                                      std::uint64_t seed,
                                      const GenOptions& opt = {}) {
  if (size < 12)
    throw ConfigError("gen_synthetic_task: size must be >= 12 for nonempty splits");
  const auto& v = opt.vocab;
  Rng rng(seed ^ 0x5eedda7aull);

  auto random_content = [&](std::size_t len) {
    std::vector<int> s(len);
    for (auto& t : s)
      t = v.first_content() + static_cast<int>(rng.next_below(v.n_content()));
    return s;
  };

  TaskDataset ds;
  ds.task_id = task_kind_name(kind);
  ds.source = "generator:" + ds.task_id + ":size=" + std::to_string(size) +
              ":seed=" + std::to_string(seed);

  std::set<std::vector<int>> seen;
  std::vector<Example> all;
  while (all.size() < size) {
    std::size_t len =
        opt.min_input_len + rng.next_below(opt.max_input_len - opt.min_input_len + 1);
    std::vector<int> input;
    switch (kind) {
      case TaskKind::copy:
      case TaskKind::reverse:
      case TaskKind::sort:
      case TaskKind::parity_classify:
      case TaskKind::pattern_classify:
        input = random_content(len);
        break;
      case TaskKind::entail_toy: {
        std::size_t half = std::max<std::size_t>(2, len / 2);
        auto premise = random_content(half);
        std::vector<int> hypo;
        if (rng.next_below(2) == 0) {
          for (std::size_t i = 0; i < half; ++i)
            hypo.push_back(premise[rng.next_below(half)]);
        } else {
          hypo = random_content(half);
        }
        input = premise;
        input.insert(input.end(), hypo.begin(), hypo.end());
        break;
      }
    }
    if (!seen.insert(input).second) continue;

    Example ex;
    ex.task_id = ds.task_id;
    ex.input_tokens = input;
    switch (kind) {
      case TaskKind::copy:
        ex.target_tokens = input;
        break;
      case TaskKind::reverse:
        ex.target_tokens.assign(input.rbegin(), input.rend());
        break;
      case TaskKind::sort:
        ex.target_tokens = input;
        std::sort(ex.target_tokens.begin(), ex.target_tokens.end());
        break;
      case TaskKind::parity_classify: {
        std::size_t count = 0;
        for (int t : input)
          if (t == 3) ++count;
        ex.target_tokens = {count % 2 == 0 ? v.label(0) : v.label(1)};
        break;
      }
      case TaskKind::pattern_classify: {
        bool repeat = false;
        for (std::size_t i = 0; i + 1 < input.size(); ++i)
          if (input[i] == input[i + 1]) repeat = true;
        ex.target_tokens = {repeat ? v.label(2) : v.label(3)};
        break;
      }
      case TaskKind::entail_toy: {
        std::size_t half = input.size() / 2;
        bool entailed = true;
        for (std::size_t i = half; i < input.size(); ++i) {
          bool found = false;
          for (std::size_t j = 0; j < half; ++j)
            if (input[j] == input[i]) found = true;
          entailed = entailed && found;
        }
        ex.target_tokens = {entailed ? v.label(2) : v.label(3)};
        break;
      }
    }
    ex.target_tokens.push_back(v.eos_id);
    all.push_back(std::move(ex));
  }

  const std::size_t n_dev = std::max<std::size_t>(1, size / 10);
  const std::size_t n_test = std::max<std::size_t>(1, size / 10);
  const std::size_t n_train = size - n_dev - n_test;
  ds.train.assign(all.begin(), all.begin() + n_train);
  ds.dev.assign(all.begin() + n_train, all.begin() + n_train + n_dev);
  ds.test.assign(all.begin() + n_train + n_dev, all.end());
  return ds;
}

inline void save_jsonl(const TaskDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_jsonl: cannot open '" + path + "' for writing");
  auto dump = [&](const std::vector<Example>& split, const char* tag) {
    for (const auto& ex : split) {
      nlohmann::json j{{"task_id", ex.task_id},
                       {"input_tokens", ex.input_tokens},
                       {"target_tokens", ex.target_tokens},
                       {"split", tag}};
      out << j.dump() << "\n";
    }
  };
  dump(ds.train, "train");
  dump(ds.dev, "dev");
  dump(ds.test, "test");
}

inline TaskDataset load_jsonl(const std::string& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw IoError("load_jsonl: cannot open '" + path + "'");
  TaskDataset ds;
  ds.source = path;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed JSON: " + e.what());
    }
    for (const char* field : {"task_id", "input_tokens", "target_tokens", "split"})
      if (!j.contains(field))
        throw DataError(where + ": missing field '" + std::string(field) + "'");
    Example ex;
    ex.task_id = j["task_id"].get<std::string>();
    ex.input_tokens = j["input_tokens"].get<std::vector<int>>();
    ex.target_tokens = j["target_tokens"].get<std::vector<int>>();
    for (int t : ex.input_tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size)
        throw DataError(where + ": input token " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab_size));
    for (int t : ex.target_tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size)
        throw DataError(where + ": target token " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab_size));
    if (ds.task_id.empty())
      ds.task_id = ex.task_id;
    else if (ds.task_id != ex.task_id)
      throw DataError(where + ": task_id '" + ex.task_id +
                      "' differs from '" + ds.task_id + "'");
    const std::string split = j["split"].get<std::string>();
    if (split == "train")
      ds.train.push_back(std::move(ex));
    else if (split == "dev")
      ds.dev.push_back(std::move(ex));
    else if (split == "test")
      ds.test.push_back(std::move(ex));
    else
      throw DataError(where + ": bad split tag '" + split + "'");
  }
  return ds;
}

inline nlohmann::json dataset_manifest(const TaskDataset& ds) {
  return {{"task_id", ds.task_id},
          {"train", ds.train.size()},
          {"dev", ds.dev.size()},
          {"test", ds.test.size()},
          {"source", ds.source}};
}

// One epoch of batches over the concatenated train splits. With mixed=true
// the pool is shuffled with the seeded PRNG; the last partial batch is kept.
// balanced=true oversamples smaller tasks (cycling their examples) so every
// task contributes equally to the epoch.
inline std::vector<Batch> make_batches(const std::vector<const TaskDataset*>& tasks,
                                       std::size_t batch_size, std::uint64_t seed,
                                       bool mixed, const VocabLayout& vocab = {},
                                       bool balanced = false) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<const Example*> pool;
  if (balanced && tasks.size() > 1) {
    std::size_t largest = 0;
    for (const auto* t : tasks) largest = std::max(largest, t->train.size());
    for (const auto* t : tasks) {
      if (t->train.empty()) continue;
      for (std::size_t i = 0; i < largest; ++i)
        pool.push_back(&t->train[i % t->train.size()]);
    }
  } else {
    for (const auto* t : tasks)
      for (const auto& ex : t->train) pool.push_back(&ex);
  }
  if (mixed) {
    Rng rng(seed ^ 0xba7c4e5ull);
    rng.shuffle(pool);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < pool.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, pool.size());
    Batch b;
    std::size_t max_in = 0, max_tg = 0;
    for (std::size_t i = start; i < end; ++i) {
      max_in = std::max(max_in, pool[i]->input_tokens.size());
      max_tg = std::max(max_tg, pool[i]->target_tokens.size());
    }
    for (std::size_t i = start; i < end; ++i) {
      auto in = pool[i]->input_tokens;
      std::vector<bool> mask(in.size(), true);
      in.resize(max_in, vocab.pad_id);
      mask.resize(max_in, false);
      auto tg = pool[i]->target_tokens;
      tg.resize(max_tg, vocab.pad_id);
      b.input_tokens.push_back(std::move(in));
      b.input_mask.push_back(std::move(mask));
      b.target_tokens.push_back(std::move(tg));
      b.task_ids.push_back(pool[i]->task_id);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace attempt
