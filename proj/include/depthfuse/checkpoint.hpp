// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthfuse/config.hpp"
#include "depthfuse/data.hpp"
#include "depthfuse/encoder.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/io.hpp"
#include "depthfuse/param.hpp"

namespace depthfuse {

// Container layout (all integers little-endian):
//
//   "DFCKPT\0\0"                  8 bytes magic
//   u32 version                   currently 1
//   u64 header length, header     UTF-8 JSON: encoder config, vocabulary, metadata
//   u64 tensor count
//   per tensor:
//     u32 name length, name bytes
//     u8  is_buffer
//     u32 rank, u64 dims[rank]
//     f64 data[prod(dims)]        IEEE-754 binary64, row-major

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'F', 'C', 'K', 'P', 'T', 0, 0};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  bool buffer = false;
  Tensor value;
};

struct Checkpoint {
  EncoderConfig encoder;
  std::vector<std::string> vocab;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const NamedTensor& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) {
    throw ParseError(std::string("checkpoint truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  nlohmann::ordered_json header = {
      {"encoder", to_json(ck.encoder)}, {"vocab", ck.vocab}, {"meta", ck.meta}};
  const std::string h = header.dump();
  detail::put_le<std::uint64_t>(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put_le<std::uint64_t>(os, ck.tensors.size());
  for (const NamedTensor& t : ck.tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint8_t>(os, t.buffer ? 1 : 0);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) detail::put_le<std::uint64_t>(os, d);
    for (double v : t.value.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw ParseError("not a depthfuse checkpoint (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = detail::get_le<std::uint64_t>(is, "header length");
  std::string h(hlen, '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(hlen))) throw ParseError("checkpoint header truncated");
  Checkpoint ck;
  try {
    auto header = nlohmann::ordered_json::parse(h);
    read_encoder(header.at("encoder"), ck.encoder);
    ck.vocab = header.at("vocab").get<std::vector<std::string>>();
    ck.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  const auto count = detail::get_le<std::uint64_t>(is, "tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name.resize(detail::get_le<std::uint32_t>(is, "name length"));
    if (!is.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) {
      throw ParseError("checkpoint truncated in tensor name");
    }
    t.buffer = detail::get_le<std::uint8_t>(is, "flags") != 0;
    Shape shape(detail::get_le<std::uint32_t>(is, "rank"));
    for (std::size_t& d : shape) d = detail::get_le<std::uint64_t>(is, "dims");
    std::vector<double> data(numel_of(shape));
    for (double& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, t.name.c_str()));
    t.value = Tensor(std::move(shape), std::move(data));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

/// Snapshot of every entry in `store` whose name starts with `prefix`.
inline Checkpoint make_checkpoint(const ParamStore& store, const EncoderConfig& enc, const Vocab& vocab,
                                  nlohmann::ordered_json meta = nlohmann::ordered_json::object(),
                                  std::string_view prefix = {}) {
  Checkpoint ck;
  ck.encoder = enc;
  ck.vocab = vocab.tokens();
  ck.meta = std::move(meta);
  for (const Parameter& p : store.all()) {
    if (std::string_view(p.name).starts_with(prefix)) ck.tensors.push_back({p.name, p.buffer, p.value.detach()});
  }
  return ck;
}

/// Copies checkpoint values into the same-named entries of `store` under
/// `prefix`. Every such entry must be present with a matching shape.
inline void restore(ParamStore& store, const Checkpoint& ck, std::string_view prefix = {}) {
  for (Parameter& p : store.all()) {
    if (!std::string_view(p.name).starts_with(prefix)) continue;
    const NamedTensor* t = ck.find(p.name);
    if (!t) throw ContractError("checkpoint has no entry " + p.name);
    if (t->value.shape() != p.value.shape()) {
      throw ShapeError("checkpoint entry " + p.name + " has shape " + shape_str(t->value.shape()) +
                       ", model expects " + shape_str(p.value.shape()));
    }
    std::copy(t->value.data().begin(), t->value.data().end(), p.value.data().begin());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, [&](std::ostream& os) { write_checkpoint(os, ck); }, true);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace depthfuse
