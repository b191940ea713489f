#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "htr/model.hpp"
#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// Binary model container. Layout, all integers little-endian:
//   8 bytes   magic "HTRMODEL"
//   u32       format version (1)
//   u32       config length, then that many bytes of config text
//   u32       tensor count
// per tensor:
//   u32       name length, then that many bytes
//   u8        layer kind tag
//   u8        rank, then rank x u32 dims
//   f64[n]    values as raw IEEE-754 bit patterns
// Doubles travel as bit patterns, so save/load round-trips bit-exactly.

namespace detail {

constexpr char kCheckpointMagic[8] = {'H', 'T', 'R', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& where)
      : bytes_(bytes), where_(where) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }

  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  std::string str(std::size_t n) { return std::string(take(n), n); }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw ValidationError(where_ + ": truncated checkpoint");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, Model& m) {
  std::string out;
  out.append(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::put_u32(out, detail::kCheckpointVersion);
  const std::string config = serialize_config(m.cfg);
  detail::put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  const std::vector<ParamRef> params = collect_params(m);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    out.push_back(static_cast<char>(p.kind));
    out.push_back(static_cast<char>(p.tensor->rank()));
    for (std::size_t d = 0; d < p.tensor->rank(); ++d)
      detail::put_u32(out, static_cast<std::uint32_t>(p.tensor->dim(d)));
    for (double v : p.tensor->raw()) detail::put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw RuntimeFailure("short write to checkpoint: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes, path);

  if (r.str(sizeof detail::kCheckpointMagic) !=
      std::string(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic))
    throw ValidationError(path + ": not a model checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    throw ValidationError(path + ": unsupported checkpoint version " +
                          std::to_string(version));
  const std::string config = r.str(r.u32());
  Model m = build_model(parse_config(config), 0);

  std::map<std::string, ParamRef> by_name;
  for (ParamRef& p : collect_params(m)) by_name.emplace(p.name, p);

  const std::uint32_t count = r.u32();
  if (count != by_name.size())
    throw ValidationError(path + ": checkpoint holds " + std::to_string(count) +
                          " tensors, model wants " + std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw ValidationError(path + ": unknown tensor '" + name + "'");
    const std::uint8_t kind = r.u8();
    if (kind != static_cast<std::uint8_t>(it->second.kind))
      throw ValidationError(path + ": tensor '" + name + "' has wrong kind tag");
    const std::uint8_t rank = r.u8();
    std::vector<std::size_t> dims(rank);
    for (std::uint8_t d = 0; d < rank; ++d) dims[d] = r.u32();
    Tensor& dst = *it->second.tensor;
    if (rank != dst.rank() || dims != dst.shape())
      throw ValidationError(path + ": tensor '" + name + "' shape mismatch");
    for (double& v : dst.raw()) v = r.f64();
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw ValidationError(path + ": checkpoint is missing tensor '" +
                          by_name.begin()->first + "'");
  if (!r.at_end()) throw ValidationError(path + ": trailing bytes after tensors");
  return m;
}

}  // namespace htr
