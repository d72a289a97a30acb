#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "attempt/io/checkpoint.hpp"

using namespace attempt;

namespace {

FrozenLM<float> make_lm(std::uint64_t seed) {
  LMConfig cfg;
  cfg.vocab_size = 32;
  cfg.model_dim = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_dim = 32;
  cfg.max_len = 32;
  cfg.seed = seed;
  Rng rng(seed);
  return build_frozen_lm<float>(cfg, rng);
}

struct Fixture {
  FrozenLM<float> lm = make_lm(5);
  PromptBank<float> bank;
  SoftPrompt<float> target;
  AttentionModule<float> g;

  Fixture() {
    Rng rng(9);
    for (const char* name : {"alpha", "beta"}) {
      auto p = init_prompt_from_vocab(lm, 3, name, rng);
      p.trainable = false;
      p.P.node()->requires_grad = false;
      bank.add(std::move(p));
    }
    target = init_prompt_from_vocab(lm, 3, "tgt", rng);
    g = AttentionModule<float>::init(16, 4, 1.5, rng);
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

TEST_CASE("checkpoint round trip restores every array exactly") {
  Fixture fx;
  nlohmann::json config{{"note", "round-trip"}, {"epochs", 3}};
  auto ckpt = make_checkpoint(fx.lm, fx.bank, &fx.target, fx.g, config, 42);
  const std::string path = "/tmp/attempt_ckpt_rt.bin";
  save_checkpoint(ckpt, path);
  auto loaded = load_checkpoint(path);

  REQUIRE(loaded.seed == 42);
  REQUIRE(loaded.config["note"] == "round-trip");
  REQUIRE(loaded.theta_hash == fx.lm.theta_hash());
  REQUIRE(loaded.temperature_k == 1.5);
  REQUIRE(loaded.arrays.size() == ckpt.arrays.size());
  for (std::size_t i = 0; i < ckpt.arrays.size(); ++i) {
    REQUIRE(loaded.arrays[i].name == ckpt.arrays[i].name);
    REQUIRE(loaded.arrays[i].role == ckpt.arrays[i].role);
    REQUIRE(loaded.arrays[i].shape == ckpt.arrays[i].shape);
    REQUIRE(loaded.arrays[i].values == ckpt.arrays[i].values);  // bitwise
  }

  auto st = restore_state(loaded, fx.lm);
  REQUIRE(st.bank.size() == 2);
  REQUIRE(st.bank.at(0).name == "alpha");
  REQUIRE(st.bank.at(0).P.data() == fx.bank.at(0).P.data());
  REQUIRE(st.has_target);
  REQUIRE(st.target.P.data() == fx.target.P.data());
  REQUIRE(st.g.temperature_k == 1.5);
  REQUIRE(st.g.w_down.data() == fx.g.w_down.data());
  REQUIRE(st.g.ln_bias.data() == fx.g.ln_bias.data());
  std::remove(path.c_str());
}

TEST_CASE("checkpoint without a target restores none") {
  Fixture fx;
  auto ckpt = make_checkpoint<float>(fx.lm, fx.bank, nullptr, fx.g, nlohmann::json::object(), 1);
  const std::string path = "/tmp/attempt_ckpt_nt.bin";
  save_checkpoint(ckpt, path);
  auto st = restore_state(load_checkpoint(path), fx.lm);
  REQUIRE(!st.has_target);
  REQUIRE(st.bank.size() == 2);
  std::remove(path.c_str());
}

TEST_CASE("corrupted payload bytes are rejected") {
  Fixture fx;
  auto ckpt = make_checkpoint(fx.lm, fx.bank, &fx.target, fx.g, nlohmann::json::object(), 7);
  const std::string path = "/tmp/attempt_ckpt_corrupt.bin";
  save_checkpoint(ckpt, path);
  auto bytes = read_file(path);
  bytes[bytes.size() - 5] ^= 0x40;  // flip a bit inside the float payload
  write_file(path, bytes);
  REQUIRE_THROWS_MATCHES(load_checkpoint(path), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("hash mismatch")));
  std::remove(path.c_str());
}

TEST_CASE("bad magic, truncation, and version are rejected") {
  Fixture fx;
  auto ckpt = make_checkpoint(fx.lm, fx.bank, &fx.target, fx.g, nlohmann::json::object(), 7);
  const std::string path = "/tmp/attempt_ckpt_bad.bin";
  save_checkpoint(ckpt, path);
  auto bytes = read_file(path);

  auto mangled = bytes;
  mangled[0] = 'X';
  write_file(path, mangled);
  REQUIRE_THROWS_MATCHES(load_checkpoint(path), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("magic")));

  write_file(path, bytes.substr(0, bytes.size() / 2));
  REQUIRE_THROWS_AS(load_checkpoint(path), IoError);

  mangled = bytes;
  mangled[9] = 99;  // version field follows the 9-byte magic
  write_file(path, mangled);
  REQUIRE_THROWS_MATCHES(load_checkpoint(path), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("version")));
  std::remove(path.c_str());
}

TEST_CASE("restore refuses a different backbone") {
  Fixture fx;
  auto ckpt = make_checkpoint(fx.lm, fx.bank, &fx.target, fx.g, nlohmann::json::object(), 7);
  const std::string path = "/tmp/attempt_ckpt_theta.bin";
  save_checkpoint(ckpt, path);
  auto other = make_lm(6);
  REQUIRE(other.theta_hash() != fx.lm.theta_hash());
  REQUIRE_THROWS_MATCHES(restore_state(load_checkpoint(path), other), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("theta hash")));
  std::remove(path.c_str());
}

TEST_CASE("restored state evaluates identically to the original") {
  Fixture fx;
  auto ckpt = make_checkpoint(fx.lm, fx.bank, &fx.target, fx.g, nlohmann::json::object(), 7);
  const std::string path = "/tmp/attempt_ckpt_eval.bin";
  save_checkpoint(ckpt, path);
  auto st = restore_state(load_checkpoint(path), fx.lm);

  NoGradGuard no_grad;
  auto x = fx.lm.embed({4, 5, 6, 7});
  auto a = compose_instance_prompt(fx.bank, &fx.target, fx.g, x);
  auto b = compose_instance_prompt(st.bank, &st.target, st.g, x);
  REQUIRE(a.P_instance.data() == b.P_instance.data());
  REQUIRE(a.attention_snapshot == b.attention_snapshot);
  std::remove(path.c_str());
}
