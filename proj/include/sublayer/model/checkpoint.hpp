#pragma once

// Checkpoint container:
//
//   "CSCP" | u32 version | u64 len | metadata JSON (UTF-8, len bytes)
//   | u64 count | count x { u32 len | name | u32 rank | rank x u64 dim | f64 payload }
//
// All integers and floats are little-endian. Initial parameters live under
// the "init/" name prefix next to the current ones.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>

#include <json.hpp>

#include "sublayer/errors.hpp"
#include "sublayer/model/config.hpp"
#include "sublayer/model/parameters.hpp"

namespace sublayer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kInitPrefix = "init/";

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json removed = nlohmann::json::array();
  for (const auto& id : c.removed) removed.push_back(to_string(id));
  return {{"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers}, {"d_model", c.d_model},
          {"d_ff", c.d_ff},             {"n_heads", c.n_heads},       {"src_vocab", c.src_vocab},
          {"tgt_vocab", c.tgt_vocab},   {"max_len", c.max_len},       {"dropout", c.dropout},
          {"layerdrop", c.layerdrop},   {"removed", removed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.src_vocab = j.at("src_vocab").get<std::size_t>();
  c.tgt_vocab = j.at("tgt_vocab").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.layerdrop = j.at("layerdrop").get<double>();
  for (const auto& s : j.at("removed")) c.removed.insert(parse_component(s.get<std::string>()));
  return c;
}

struct Checkpoint {
  ModelConfig config;
  Parameters params;
  std::optional<Parameters> init;
  // Free-form run metadata: seeds, step, epoch, RNG stream states, train config.
  nlohmann::json metadata = nlohmann::json::object();

  const Parameters& require_init() const {
    if (!init) throw FormatError("checkpoint has no init/ namespace");
    return *init;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  const auto data = t.data();
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json meta = ck.metadata;
  meta["model"] = model_config_to_json(ck.config);
  const std::string meta_text = meta.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  const std::size_t count = ck.params.tensor_count() + (ck.init ? ck.init->tensor_count() : 0);
  detail::put<std::uint64_t>(out, count);
  for (const auto& [name, t] : ck.params.tensors()) detail::put_tensor(out, name, t);
  if (ck.init)
    for (const auto& [name, t] : ck.init->tensors()) detail::put_tensor(out, kInitPrefix + name, t);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.take(4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = in.get<std::uint64_t>();
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(in.take(meta_len));
    ck.config = model_config_from_json(ck.metadata.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  ck.metadata.erase("model");
  const auto count = in.get<std::uint64_t>();
  Parameters init;
  bool has_init = false;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = in.take(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    const std::string payload = in.take(n * sizeof(double));
    std::vector<double> data(n);
    std::memcpy(data.data(), payload.data(), payload.size());
    Tensor t(std::move(shape), std::move(data));
    if (name.rfind(kInitPrefix, 0) == 0) {
      init.set(name.substr(kInitPrefix.size()), std::move(t));
      has_init = true;
    } else {
      ck.params.set(name, std::move(t));
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  if (has_init) ck.init = std::move(init);
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }
  auto check = [&](const Parameters& p, const std::string& ns) {
    const auto expected = all_param_shapes(ck.config);
    if (p.tensor_count() != expected.size())
      throw FormatError(ns + "parameter count does not match the model config");
    for (const auto& s : expected)
      if (!p.contains(s.name) || p.at(s.name).shape() != s.shape)
        throw FormatError("checkpoint tensor " + ns + s.name + " missing or misshapen");
  };
  check(ck.params, "");
  if (ck.init) check(*ck.init, kInitPrefix);
  return ck;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing checkpoint " + path.string());
  return deserialize_checkpoint(read_file(path));
}

}  // namespace sublayer
