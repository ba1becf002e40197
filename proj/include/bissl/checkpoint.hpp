#pragma once

// Versioned text checkpoints. Doubles are written as hexadecimal floats so a
// save/load round trip is bit-exact. Entries are kept sorted by name, so equal
// contents always serialize to identical bytes.

#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bissl/errors.hpp"
#include "bissl/params.hpp"

namespace bissl {

inline constexpr const char* kCheckpointMagic = "BISSL-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ConfigError("checkpoint: bad number '" + s + "'");
  return v;
}

/// Hex SHA-1 of "blob <size>\0<content>", the content address git assigns to a file.
inline std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += digits[md[i] >> 4];
    out += digits[md[i] & 0xF];
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw ConfigError("write failed for '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string file_hash(const std::filesystem::path& path) { return git_blob_hash(read_file(path)); }

/// Named parameter vectors, integers and strings.
class Checkpoint {
 public:
  std::map<std::string, ParamVector> vectors;
  std::map<std::string, long long> ints;
  std::map<std::string, std::string> strings;

  const ParamVector& vector(const std::string& name) const {
    auto it = vectors.find(name);
    if (it == vectors.end()) throw ConfigError("checkpoint: missing vector '" + name + "'");
    return it->second;
  }
  long long integer(const std::string& name) const {
    auto it = ints.find(name);
    if (it == ints.end()) throw ConfigError("checkpoint: missing integer '" + name + "'");
    return it->second;
  }
  const std::string& string(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) throw ConfigError("checkpoint: missing string '" + name + "'");
    return it->second;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [name, v] : vectors) {
      os << "vector " << name << ' ' << v.layout().num_segments() << '\n';
      for (const auto& seg : v.layout().segments()) {
        os << "segment " << seg.name << ' ' << seg.shape.size();
        for (auto d : seg.shape) os << ' ' << d;
        os << '\n';
      }
      os << "values " << v.size();
      for (double x : v.values()) os << ' ' << hexfloat(x);
      os << '\n';
    }
    for (const auto& [name, x] : ints) os << "int " << name << ' ' << x << '\n';
    for (const auto& [name, s] : strings) os << "string " << name << ' ' << s.size() << '\n' << s << '\n';
    os << "end\n";
    return os.str();
  }

  static Checkpoint parse(const std::string& text) {
    std::istringstream is(text);
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kCheckpointMagic) throw ConfigError("checkpoint: missing format header");
    if (version != kCheckpointVersion) {
      throw ConfigError("checkpoint: unsupported format version " + std::to_string(version));
    }
    Checkpoint ck;
    std::string kind;
    while (is >> kind) {
      if (kind == "end") return ck;
      std::string name;
      is >> name;
      if (kind == "vector") {
        std::size_t nseg = 0;
        is >> nseg;
        std::vector<std::pair<std::string, Shape>> blocks;
        for (std::size_t s = 0; s < nseg; ++s) {
          std::string tag, seg_name;
          std::size_t rank = 0;
          is >> tag >> seg_name >> rank;
          if (tag != "segment") throw ConfigError("checkpoint: expected segment record in '" + name + "'");
          Shape shape(rank);
          for (auto& d : shape) is >> d;
          blocks.push_back({seg_name, shape});
        }
        std::string tag;
        std::size_t count = 0;
        is >> tag >> count;
        if (tag != "values") throw ConfigError("checkpoint: expected values record in '" + name + "'");
        std::vector<double> values(count);
        for (auto& x : values) {
          std::string tok;
          is >> tok;
          x = parse_hexfloat(tok);
        }
        auto layout = nseg ? make_layout(ParamLayout::packed(blocks)) : std::make_shared<const ParamLayout>();
        ck.vectors.emplace(name, ParamVector(layout, std::move(values)));
      } else if (kind == "int") {
        long long x = 0;
        is >> x;
        ck.ints[name] = x;
      } else if (kind == "string") {
        std::size_t len = 0;
        is >> len;
        is.get();
        std::string s(len, '\0');
        is.read(s.data(), static_cast<std::streamsize>(len));
        ck.strings[name] = s;
      } else {
        throw ConfigError("checkpoint: unknown record '" + kind + "'");
      }
      if (is.fail()) throw ConfigError("checkpoint: truncated record '" + name + "'");
    }
    throw ConfigError("checkpoint: missing end marker");
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static Checkpoint load(const std::filesystem::path& path) { return parse(read_file(path)); }
};

}  // namespace bissl
