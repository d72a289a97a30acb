#pragma once
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attempt/core/error.hpp"
#include "attempt/core/hash.hpp"
#include "attempt/core/tensor.hpp"
#include "attempt/nn/lm.hpp"
#include "attempt/prompt/prompt.hpp"

namespace attempt {

// Binary checkpoint layout:
//   magic "ATMPTCKPT" | u32 version | u64 header length | header JSON |
//   named float32 arrays, little-endian, in header order
// The header records config, seed, backbone/bank hashes, array shapes, and
// a hash of the payload bytes; any of these failing to match on load is a
// hard error.

inline constexpr char kCheckpointMagic[] = "ATMPTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::string role;  // e.g. "source", "target", "attn.w_down"
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::uint64_t theta_hash = 0;
  std::uint64_t bank_hash = 0;
  double temperature_k = 1.0;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& role, const std::string& name = "") const {
    for (const auto& a : arrays)
      if (a.role == role && (name.empty() || a.name == name)) return &a;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& where;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw IoError("checkpoint '" + where + "': truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
};

inline std::uint64_t payload_hash(const std::string& payload) {
  Fnv1a64 h;
  h.update(payload.data(), payload.size());
  return h.digest();
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string payload;
  for (const auto& a : ckpt.arrays) {
    std::size_t n = 1;
    for (auto s : a.shape) n *= s;
    if (n != a.values.size())
      throw DimensionError("save_checkpoint: array '" + a.name +
                           "' shape does not match value count");
    for (float f : a.values) detail::put_f32(payload, f);
  }

  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& a : ckpt.arrays)
    arrays.push_back({{"name", a.name}, {"role", a.role}, {"shape", a.shape}});
  nlohmann::json header{{"config", ckpt.config},
                        {"seed", ckpt.seed},
                        {"theta_hash", ckpt.theta_hash},
                        {"bank_hash", ckpt.bank_hash},
                        {"temperature_k", ckpt.temperature_k},
                        {"payload_hash", detail::payload_hash(payload)},
                        {"arrays", arrays}};
  const std::string header_str = header.dump();

  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header_str.size());
  out += header_str;
  out += payload;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  constexpr std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (buf.size() < magic_len || buf.compare(0, magic_len, kCheckpointMagic) != 0)
    throw IoError("checkpoint '" + path + "': bad magic");
  detail::ByteReader r{buf, magic_len, path};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + path + "': unsupported version " +
                  std::to_string(version));
  const std::uint64_t header_len = r.u64();
  r.need(header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(r.pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + path + "': malformed header: " + e.what());
  }
  r.pos += header_len;

  Checkpoint ckpt;
  try {
    ckpt.config = header.at("config");
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.theta_hash = header.at("theta_hash").get<std::uint64_t>();
    ckpt.bank_hash = header.at("bank_hash").get<std::uint64_t>();
    ckpt.temperature_k = header.at("temperature_k").get<double>();
    for (const auto& ja : header.at("arrays")) {
      NamedArray a;
      a.name = ja.at("name").get<std::string>();
      a.role = ja.at("role").get<std::string>();
      a.shape = ja.at("shape").get<std::vector<std::size_t>>();
      ckpt.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + path + "': bad header field: " + e.what());
  }

  const std::string payload = buf.substr(r.pos);
  if (detail::payload_hash(payload) != header.at("payload_hash").get<std::uint64_t>())
    throw IoError("checkpoint '" + path + "': payload hash mismatch (corrupt data)");
  for (auto& a : ckpt.arrays) {
    std::size_t n = 1;
    for (auto s : a.shape) n *= s;
    a.values.resize(n);
    for (auto& v : a.values) v = r.f32();
  }
  if (r.pos != buf.size())
    throw IoError("checkpoint '" + path + "': trailing bytes after arrays");
  return ckpt;
}

namespace detail {

template <class T>
NamedArray to_array(const std::string& name, const std::string& role,
                    const Tensor<T>& t) {
  NamedArray a;
  a.name = name;
  a.role = role;
  a.shape = t.shape();
  a.values.assign(t.data().begin(), t.data().end());
  return a;
}

template <class T>
Tensor<T> to_tensor(const NamedArray& a, bool trainable = false) {
  std::vector<T> v(a.values.begin(), a.values.end());
  return Tensor<T>::from_vector(a.shape, std::move(v), trainable);
}

}  // namespace detail

// Full model state: the frozen bank, the target prompt (optional under the
// no_target ablation), and the attention module, bound to a specific
// backbone via its hash.
template <class T>
Checkpoint make_checkpoint(const FrozenLM<T>& lm, const PromptBank<T>& bank,
                           const SoftPrompt<T>* target, const AttentionModule<T>& g,
                           nlohmann::json config, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = std::move(config);
  ckpt.seed = seed;
  ckpt.theta_hash = lm.theta_hash();
  ckpt.bank_hash = bank.hash();
  ckpt.temperature_k = g.temperature_k;
  for (const auto& p : bank.prompts())
    ckpt.arrays.push_back(detail::to_array(p.name, "source", p.P));
  if (target)
    ckpt.arrays.push_back(detail::to_array(target->name, "target", target->P));
  for (const auto& [name, t] : g.named_parameters())
    ckpt.arrays.push_back(detail::to_array(name, "attn." + name, t));
  return ckpt;
}

template <class T>
struct RestoredState {
  PromptBank<T> bank;
  SoftPrompt<T> target;
  bool has_target = false;
  AttentionModule<T> g;
};

// Rebuilds bank, target prompt, and attention module from a checkpoint,
// refusing to attach to a different backbone.
template <class T>
RestoredState<T> restore_state(const Checkpoint& ckpt, const FrozenLM<T>& lm) {
  if (ckpt.theta_hash != lm.theta_hash())
    throw IoError("checkpoint was created against a different backbone "
                  "(theta hash mismatch)");
  RestoredState<T> st;
  for (const auto& a : ckpt.arrays) {
    if (a.role == "source") {
      SoftPrompt<T> p;
      p.name = a.name;
      p.P = detail::to_tensor<T>(a);
      p.trainable = false;
      p.origin = PromptOrigin::trained;
      st.bank.add(std::move(p));
    } else if (a.role == "target") {
      st.target.name = a.name;
      st.target.P = detail::to_tensor<T>(a);
      st.target.trainable = false;
      st.target.origin = PromptOrigin::trained;
      st.has_target = true;
    }
  }
  if (st.bank.hash() != ckpt.bank_hash)
    throw IoError("checkpoint bank hash mismatch after restore");

  auto need = [&](const char* name) -> const NamedArray& {
    const auto* a = ckpt.find(std::string("attn.") + name);
    if (!a) throw IoError("checkpoint missing attention array '" + std::string(name) + "'");
    return *a;
  };
  st.g.w_down = detail::to_tensor<T>(need("w_down"), true);
  st.g.w_up = detail::to_tensor<T>(need("w_up"), true);
  st.g.ln_gain = detail::to_tensor<T>(need("ln_gain"), true);
  st.g.ln_bias = detail::to_tensor<T>(need("ln_bias"), true);
  st.g.temperature_k = ckpt.temperature_k;
  return st;
}

}  // namespace attempt
