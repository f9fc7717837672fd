#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "natf/error.hpp"
#include "natf/nat.hpp"
#include "natf/teacher.hpp"
#include "natf/transformer.hpp"

namespace natf {

// Layout: "NATF", u32 version, u64 manifest length, JSON manifest, then one
// little-endian f32 blob per manifest parameter, in manifest order.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kCheckpointMagic{'N', 'A', 'T', 'F'};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},     {"d_hidden", c.d_hidden},   {"n_layer", c.n_layer},
          {"n_head", c.n_head},       {"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab},
          {"max_length", c.max_length}, {"scaling", c.scaling == AttentionScaling::kPerHead ? "head" : "model"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_hidden = j.at("d_hidden").get<std::size_t>();
  c.n_layer = j.at("n_layer").get<std::size_t>();
  c.n_head = j.at("n_head").get<std::size_t>();
  c.src_vocab = j.at("src_vocab").get<std::size_t>();
  c.tgt_vocab = j.at("tgt_vocab").get<std::size_t>();
  c.max_length = j.at("max_length").get<std::size_t>();
  c.scaling = j.value("scaling", std::string("head")) == "head" ? AttentionScaling::kPerHead
                                                                : AttentionScaling::kModelWidth;
  return c;
}

inline nlohmann::json to_json(const NatOptions& o) {
  return {{"fertility_classes", o.fertility_classes},
          {"positional_attention", o.positional_attention},
          {"copy", o.copy == CopyMode::kFertility ? "fertility" : "uniform"}};
}

inline NatOptions nat_options_from_json(const nlohmann::json& j) {
  NatOptions o;
  o.fertility_classes = j.at("fertility_classes").get<std::size_t>();
  o.positional_attention = j.at("positional_attention").get<bool>();
  o.copy = j.at("copy").get<std::string>() == "fertility" ? CopyMode::kFertility : CopyMode::kUniform;
  return o;
}

struct CheckpointFile {
  nlohmann::json manifest;  // kind, config, extra, params[{name, shape}]
  std::vector<NamedTensor<float>> params;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 24)};
  out.write(b.data(), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("checkpoint " + path + ": truncated header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  const std::uint64_t lo = get_u32(in, path);
  return lo | static_cast<std::uint64_t>(get_u32(in, path)) << 32;
}

}  // namespace detail

template <typename T>
void write_checkpoint(const std::string& path, const std::string& kind, const ModelConfig& cfg,
                      const ParamStore<T>& params, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest{{"kind", kind}, {"config", to_json(cfg)}, {"extra", extra}};
  manifest["params"] = nlohmann::json::array();
  for (const auto& nt : params.snapshot()) {
    manifest["params"].push_back({{"name", nt.name}, {"shape", nt.value.shape()}});
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic.data(), 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& v : params.vars()) {
    for (const T x : v.value().values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
  if (!out) throw DataError("short write to checkpoint " + path);
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) {
    throw DataError("checkpoint " + path + ": bad magic bytes");
  }
  const std::uint32_t version = detail::get_u32(in, path);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path + ": format version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const std::uint64_t len = detail::get_u64(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw DataError("checkpoint " + path + ": truncated manifest");
  }
  CheckpointFile file;
  try {
    file.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": bad manifest: " + e.what());
  }
  for (const auto& p : file.manifest.at("params")) {
    Tensor<float> t(p.at("shape").get<Shape>());
    for (float& x : t.values()) x = std::bit_cast<float>(detail::get_u32(in, path));
    file.params.push_back({p.at("name").get<std::string>(), std::move(t)});
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint " + path + ": trailing bytes");
  }
  return file;
}

namespace detail {

template <typename T>
std::vector<NamedTensor<T>> cast_params(const std::vector<NamedTensor<float>>& in) {
  std::vector<NamedTensor<T>> out;
  for (const auto& nt : in) out.push_back({nt.name, nt.value.template cast<T>()});
  return out;
}

template <typename T>
void restore(ParamStore<T>& store, const std::vector<NamedTensor<float>>& params, const std::string& path) {
  if (params.size() != store.size()) {
    throw DataError("checkpoint " + path + ": " + std::to_string(params.size()) + " parameters, model has " +
                    std::to_string(store.size()));
  }
  store.assign(cast_params<T>(params));
}

inline void expect_kind(const CheckpointFile& f, const std::string& kind, const std::string& path) {
  const std::string found = f.manifest.at("kind").get<std::string>();
  if (found != kind) throw DataError("checkpoint " + path + " holds a " + found + " model, expected " + kind);
}

}  // namespace detail

template <typename T>
void save_teacher(const std::string& path, const TeacherModel<T>& m, const nlohmann::json& extra = nlohmann::json::object()) {
  write_checkpoint(path, "teacher", m.config(), m.params(), extra);
}

template <typename T>
void save_nat(const std::string& path, const NatModel<T>& m, nlohmann::json extra = nlohmann::json::object()) {
  extra["nat_options"] = to_json(m.options());
  write_checkpoint(path, "nat", m.config(), m.params(), extra);
}

template <typename T>
TeacherModel<T> load_teacher(const std::string& path, nlohmann::json* extra = nullptr) {
  const CheckpointFile f = read_checkpoint(path);
  detail::expect_kind(f, "teacher", path);
  TeacherModel<T> m(model_config_from_json(f.manifest.at("config")), 0);
  detail::restore(m.params(), f.params, path);
  if (extra) *extra = f.manifest.at("extra");
  return m;
}

template <typename T>
NatModel<T> load_nat(const std::string& path, nlohmann::json* extra = nullptr) {
  const CheckpointFile f = read_checkpoint(path);
  detail::expect_kind(f, "nat", path);
  const nlohmann::json& x = f.manifest.at("extra");
  NatModel<T> m(model_config_from_json(f.manifest.at("config")), 0, nat_options_from_json(x.at("nat_options")));
  detail::restore(m.params(), f.params, path);
  if (extra) *extra = x;
  return m;
}

}  // namespace natf
