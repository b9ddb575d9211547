#pragma once

// Image files (raw DNIM and 16-bit PGM) and dataset manifests.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/feature_map.hpp"

namespace denomamba {

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::string& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_floating_point_v<T>) {
    static_assert(sizeof(T) == 8);
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

/// Sequential little-endian reader over a byte buffer.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_floating_point_v<T>)
      return std::bit_cast<T>(bits);
    else
      return static_cast<T>(bits);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IntegrityError(what_ + ": truncated");
  }

  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("failed writing " + path.string());
}

inline void require_single_plane(const FeatureMap& img, const char* what) {
  const Shape& s = img.shape();
  if (s.batch != 1 || s.channels != 1 || s.height == 0 || s.width == 0)
    throw ShapeError(std::string(what) + ": expected a (1, 1, H, W) image, got " + s.str());
}

/// "DNIM", height u32, width u32, reserved u32, then H*W little-endian f64.
inline std::string encode_dnim(const FeatureMap& img) {
  require_single_plane(img, "dnim");
  std::string out = "DNIM";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(img.shape().height));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(img.shape().width));
  detail::put_le<std::uint32_t>(out, 0);
  for (double v : img.data()) detail::put_le(out, v);
  return out;
}

inline FeatureMap decode_dnim(const std::string& bytes, const std::string& what = "dnim") {
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "DNIM") throw IntegrityError(what + ": bad magic");
  const auto h = r.get<std::uint32_t>();
  const auto w = r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  if (r.remaining() != static_cast<std::size_t>(h) * w * 8)
    throw IntegrityError(what + ": payload size does not match " + std::to_string(h) + "x" +
                         std::to_string(w));
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (double& x : v) x = r.get<double>();
  return FeatureMap(Shape{1, 1, h, w}, std::move(v));
}

/// Binary P5 with maxval 65535 (big-endian samples), value = round(clamp(v) * 65535).
inline std::string encode_pgm16(const FeatureMap& img) {
  require_single_plane(img, "pgm");
  std::string out = "P5\n" + std::to_string(img.shape().width) + " " +
                    std::to_string(img.shape().height) + "\n65535\n";
  for (double v : img.data()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<char>(q >> 8));
    out.push_back(static_cast<char>(q & 0xff));
  }
  return out;
}

inline FeatureMap decode_pgm16(const std::string& bytes, const std::string& what = "pgm") {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") throw IntegrityError(what + ": not a binary PGM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IntegrityError(what + ": malformed header");
  }
  ++pos;  // single whitespace after maxval
  if (maxval == 0 || maxval > 65535) throw IntegrityError(what + ": bad maxval");
  const std::size_t bps = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos || bytes.size() - pos != w * h * bps)
    throw IntegrityError(what + ": payload size does not match header");
  std::vector<double> v(w * h);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * bps);
    const std::size_t q = bps == 2 ? (std::size_t{p[0]} << 8) | p[1] : p[0];
    v[i] = static_cast<double>(q) / static_cast<double>(maxval);
  }
  return FeatureMap(Shape{1, 1, h, w}, std::move(v));
}

enum class ImageFormat { dnim, pgm };

inline ImageFormat parse_image_format(const std::string& name) {
  if (name == "dnim" || name == "raw") return ImageFormat::dnim;
  if (name == "pgm") return ImageFormat::pgm;
  throw ConfigError("unknown image format '" + name + "' (expected dnim or pgm)");
}

inline const char* image_extension(ImageFormat f) { return f == ImageFormat::dnim ? ".dnim" : ".pgm"; }

inline FeatureMap read_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (path.extension() == ".pgm") return decode_pgm16(bytes, path.string());
  return decode_dnim(bytes, path.string());
}

inline void write_image(const std::filesystem::path& path, const FeatureMap& img) {
  write_file(path, path.extension() == ".pgm" ? encode_pgm16(img) : encode_dnim(img));
}

/// Side-by-side panels of equal height, separated by one zero column.
inline FeatureMap montage(const std::vector<FeatureMap>& panels) {
  if (panels.empty()) throw UsageError("montage: no panels");
  const std::size_t h = panels.front().shape().height;
  std::size_t w = 0;
  for (const auto& p : panels) {
    require_single_plane(p, "montage");
    if (p.shape().height != h) throw ShapeError("montage: panel heights differ");
    w += p.shape().width;
  }
  w += panels.size() - 1;
  FeatureMap out(Shape{1, 1, h, w});
  auto o = out.mutable_data();
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    const std::size_t pw = p.shape().width;
    auto d = p.data();
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * pw), pw,
                  o.begin() + static_cast<std::ptrdiff_t>(i * w + x0));
    x0 += pw + 1;
  }
  return out;
}

struct ManifestEntry {
  std::size_t index = 0;
  std::string ndct_path;  // relative to the manifest directory
  std::string ldct_path;
  double dose = 1.0;
  std::uint64_t seed = 0;
};

/// Shortest decimal that round-trips.
inline std::string format_real(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return {buf.data(), res.ptr};
}

inline std::string encode_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out = "index,ndct_path,ldct_path,dose,seed\n";
  for (const auto& e : entries)
    out += std::to_string(e.index) + "," + e.ndct_path + "," + e.ldct_path + "," +
           format_real(e.dose) + "," + std::to_string(e.seed) + "\n";
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::vector<ManifestEntry> decode_manifest(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("index,ndct_path,ldct_path,dose,seed", 0) != 0)
    throw IntegrityError(what + ": missing manifest header");
  std::vector<ManifestEntry> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 5) throw IntegrityError(what + ": row " + std::to_string(row) + " needs 5 fields");
    try {
      out.push_back({std::stoul(c[0]), c[1], c[2], std::stod(c[3]), std::stoull(c[4])});
    } catch (const std::exception&) {
      throw IntegrityError(what + ": row " + std::to_string(row) + " is malformed");
    }
  }
  return out;
}

struct LoadedPair {
  ManifestEntry entry;
  FeatureMap ndct;
  FeatureMap ldct;
};

inline std::vector<LoadedPair> load_manifest_pairs(const std::filesystem::path& manifest) {
  const auto entries = decode_manifest(read_file(manifest), manifest.string());
  const auto dir = manifest.parent_path();
  std::vector<LoadedPair> out;
  out.reserve(entries.size());
  for (const auto& e : entries)
    out.push_back({e, read_image(dir / e.ndct_path), read_image(dir / e.ldct_path)});
  return out;
}

}  // namespace denomamba
