#pragma once

// Parameter checkpoints: a JSON manifest (name, shape, byte offset per entry)
// next to one flat little-endian float64 blob.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stg/autodiff.hpp"

namespace stg {

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

inline void put_le(std::vector<char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/// Writes `<stem>.json` and `<stem>.bin`. `extra` is stored verbatim under
/// the manifest's "meta" key.
inline void save_checkpoint(const std::filesystem::path& stem, const std::vector<NamedTensor>& tensors,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format"] = "stg-checkpoint-v1";
  manifest["blob"] = stem.filename().string() + ".bin";
  manifest["meta"] = extra;
  manifest["tensors"] = nlohmann::json::array();
  std::vector<char> blob;
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", blob.size()}});
    for (double v : t.value.data()) detail::put_le(blob, v);
  }
  auto bin = stem;
  bin += ".bin";
  auto js = stem;
  js += ".json";
  {
    std::ofstream b(bin, std::ios::binary | std::ios::trunc);
    if (!b) throw InputError("cannot write " + bin.string());
    b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream m(js, std::ios::trunc);
  if (!m) throw InputError("cannot write " + js.string());
  m << manifest.dump(2) << '\n';
}

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta;

  const Tensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw StateError("checkpoint has no tensor named '" + name + "'");
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  auto js = stem;
  js += ".json";
  std::ifstream m(js);
  if (!m) throw StateError("checkpoint manifest not found: " + js.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw StateError("malformed checkpoint manifest " + js.string() + ": " + e.what());
  }
  const auto bin = stem.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream b(bin, std::ios::binary);
  if (!b) throw StateError("checkpoint blob not found: " + bin.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  Checkpoint cp;
  cp.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_volume(shape);
    if (off + 8 * n > blob.size()) throw StateError("checkpoint blob truncated at '" + e.at("name").get<std::string>() + "'");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = detail::get_le(blob.data() + off + 8 * i);
    cp.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  return cp;
}

inline std::vector<NamedTensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<NamedTensor> out;
  for (const auto* p : params) out.push_back({p->name, p->value});
  return out;
}

/// Copies checkpoint values into matching parameters; names and shapes must agree exactly.
inline void restore(const std::vector<Parameter*>& params, const Checkpoint& cp) {
  if (cp.tensors.size() != params.size()) {
    throw StateError("checkpoint holds " + std::to_string(cp.tensors.size()) + " tensors, model expects " +
                     std::to_string(params.size()));
  }
  for (auto* p : params) {
    const Tensor& v = cp.get(p->name);
    if (v.shape() != p->value.shape()) {
      throw StateError("checkpoint tensor '" + p->name + "' has shape " + shape_str(v.shape()) + ", expected " +
                       shape_str(p->value.shape()));
    }
    p->value = v;
  }
}

}  // namespace stg
