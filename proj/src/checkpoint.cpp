#include "cmdgoal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cmdgoal/error.hpp"

namespace cmdgoal {

namespace {

constexpr char kMagic[8] = {'C', 'M', 'D', 'G', 'C', 'K', 'P', 'T'};

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void update(const std::uint8_t* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  }
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CorruptCheckpoint("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

constexpr std::array<std::string_view, 6> kKindNames = {"pdpc", "single_point", "unimodal",
                                                        "mdn",  "nonparam",     "grounding"};

}  // namespace

std::string_view to_string(ModelKind k) noexcept { return kKindNames[static_cast<int>(k)]; }

ModelKind parse_model_kind(std::string_view s) {
  std::string norm(s);
  for (auto& ch : norm) {
    if (ch == '-') ch = '_';
  }
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == norm) return static_cast<ModelKind>(i);
  }
  throw InvalidArgument("unknown model kind '" + std::string(s) + "'");
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  nlohmann::json header;
  header["model_kind"] = std::string(to_string(c.model_kind));
  header["config"] = c.config;
  header["rng_seed"] = std::to_string(c.rng_seed);
  header["epoch"] = c.epoch;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : c.parameters) {
    std::size_t n = 1;
    for (int d : a.shape) n *= static_cast<std::size_t>(d);
    if (n != a.values.size()) throw ShapeMismatch("array '" + a.name + "' size does not match its shape");
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  }
  const std::string hs = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, c.format_version);
  put_u64(out, hs.size());
  out.insert(out.end(), hs.begin(), hs.end());
  for (const auto& a : c.parameters) {
    for (float f : a.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  Fnv1a h;
  h.update(out.data(), out.size());
  put_u64(out, h.h);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf);
  if (std::memcmp(r.take(8), kMagic, 8) != 0) throw CorruptCheckpoint("'" + path + "' is not a checkpoint");
  Checkpoint c;
  c.format_version = r.u32();
  if (c.format_version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(c.format_version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const std::uint64_t hlen = r.u64();
  if (hlen > buf.size()) throw CorruptCheckpoint("checkpoint truncated (header)");
  const auto* hp = r.take(hlen);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hp, hp + hlen);
    c.model_kind = parse_model_kind(header.at("model_kind").get<std::string>());
    c.config = header.at("config");
    c.rng_seed = std::stoull(header.at("rng_seed").get<std::string>());
    c.epoch = header.at("epoch").get<int>();
    for (const auto& a : header.at("arrays")) {
      c.parameters.push_back({a.at("name").get<std::string>(), a.at("shape").get<std::vector<int>>(), {}});
    }
  } catch (const CorruptCheckpoint&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptCheckpoint(std::string("bad checkpoint header: ") + e.what());
  }
  for (auto& a : c.parameters) {
    std::size_t n = 1;
    for (int d : a.shape) {
      if (d < 0) throw CorruptCheckpoint("negative dimension in '" + a.name + "'");
      n *= static_cast<std::size_t>(d);
    }
    if (n > buf.size() / 4) throw CorruptCheckpoint("checkpoint truncated (array '" + a.name + "')");
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = std::bit_cast<float>(r.u32());
  }
  const std::size_t body = r.pos();
  const std::uint64_t stored = r.u64();
  if (r.pos() != buf.size()) throw CorruptCheckpoint("trailing bytes after checkpoint payload");
  Fnv1a h;
  h.update(buf.data(), body);
  if (h.h != stored) throw CorruptCheckpoint("checkpoint hash mismatch");
  return c;
}

std::vector<NamedArray> pack_parameters(const nn::ParamLayout& layout, const std::vector<float>& flat) {
  if (flat.size() != layout.total()) throw ShapeMismatch("flat parameter count does not match layout");
  std::vector<NamedArray> out;
  out.reserve(layout.specs().size());
  for (const auto& s : layout.specs()) {
    out.push_back({s.name, s.shape,
                   std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(s.offset),
                                      flat.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size))});
  }
  return out;
}

std::vector<float> unpack_parameters(const nn::ParamLayout& layout, const std::vector<NamedArray>& arrays) {
  if (arrays.size() != layout.specs().size()) {
    throw ShapeMismatch("checkpoint has " + std::to_string(arrays.size()) + " arrays, model expects " +
                        std::to_string(layout.specs().size()));
  }
  std::vector<float> flat(layout.total());
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& s = layout.specs()[i];
    if (arrays[i].name != s.name || arrays[i].shape != s.shape) {
      throw ShapeMismatch("checkpoint array '" + arrays[i].name + "' does not match model parameter '" +
                          s.name + "'");
    }
    std::copy(arrays[i].values.begin(), arrays[i].values.end(), flat.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  return flat;
}

}  // namespace cmdgoal
