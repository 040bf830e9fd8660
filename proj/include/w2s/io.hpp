#pragma once

// On-disk formats: the line-oriented preference-pair file and the binary
// float32 checkpoint.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "w2s/datamodel.hpp"

namespace w2s {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON mapping

inline Json to_json(const VisualContext& v) {
  Json j = {{"id", v.id}};
  if (v.uri) j["uri"] = *v.uri;
  if (!v.features.empty() || !v.uri) j["features"] = v.features;
  return j;
}

inline Json to_json(const Question& q) { return {{"id", q.id}, {"text", q.text}}; }

inline Json to_json(const Candidate& c) {
  Json j = {{"text", c.text}, {"source", c.source}};
  j["score"] = c.score ? Json(*c.score) : Json(nullptr);
  return j;
}

inline Json to_json(const PreferencePair& p) {
  Json cands = Json::array();
  for (const auto& c : p.all_candidates) cands.push_back(to_json(c));
  return {{"id", p.id},
          {"video", to_json(p.context)},
          {"question", to_json(p.question)},
          {"chosen", to_json(p.chosen)},
          {"rejected", to_json(p.rejected)},
          {"candidates", std::move(cands)}};
}

namespace detail {

inline const Json& require(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
  return j.at(key);
}

}  // namespace detail

inline VisualContext context_from_json(const Json& j) {
  VisualContext v;
  v.id = detail::require(j, "id").get<std::string>();
  if (j.contains("features")) v.features = j.at("features").get<std::vector<double>>();
  if (j.contains("uri") && !j.at("uri").is_null()) v.uri = j.at("uri").get<std::string>();
  if (v.id.empty()) throw ValidationError("empty video id");
  return v;
}

inline Question question_from_json(const Json& j) {
  Question q;
  q.id = j.value("id", std::string{});
  q.text = detail::require(j, "text").get<std::string>();
  if (q.text.empty()) throw ValidationError("empty question text");
  return q;
}

inline Candidate candidate_from_json(const Json& j) {
  Candidate c;
  c.text = detail::require(j, "text").get<std::string>();
  c.source = j.value("source", std::string{});
  if (j.contains("score") && !j.at("score").is_null()) c.score = j.at("score").get<int>();
  validate(c);
  return c;
}

inline PreferencePair pair_from_json(const Json& j) {
  PreferencePair p;
  p.id = detail::require(j, "id").get<std::string>();
  p.context = context_from_json(detail::require(j, "video"));
  p.question = question_from_json(detail::require(j, "question"));
  p.chosen = candidate_from_json(detail::require(j, "chosen"));
  p.rejected = candidate_from_json(detail::require(j, "rejected"));
  for (const auto& c : detail::require(j, "candidates")) p.all_candidates.push_back(candidate_from_json(c));
  validate(p);
  return p;
}

// ---------------------------------------------------------------------------
// Pair files: one JSON object per line.

inline void write_pair(std::ostream& out, const PreferencePair& p) { out << to_json(p).dump() << '\n'; }

inline void write_pairs(std::ostream& out, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs) write_pair(out, p);
}

inline void write_pairs(const std::filesystem::path& path, std::span<const PreferencePair> pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_pairs(out, pairs);
  if (!out) throw Error("write failed: " + path.string());
}

/// Applies `parse` to each nonblank line, rethrowing failures as FormatError
/// tagged with the 1-based line number.
template <typename Parse>
auto read_json_lines(std::istream& in, Parse&& parse) {
  using T = decltype(parse(std::declval<const Json&>()));
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw FormatError(lineno, e.what());
    } catch (const ValidationError& e) {
      throw FormatError(lineno, e.what());
    }
  }
  return out;
}

inline std::vector<PreferencePair> read_pairs(std::istream& in) {
  return read_json_lines(in, [](const Json& j) { return pair_from_json(j); });
}

inline std::vector<PreferencePair> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_pairs(in);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "W2SCKPT1" | u8 version | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f32 values
//
// All integers and floats little-endian.

inline constexpr std::string_view kCheckpointMagic = "W2SCKPT1";
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError(0, "checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ParameterVector& params) {
  if (manifest_size(params.manifest()) != params.size())
    throw ValidationError("checkpoint manifest inconsistent with value count");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint8_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.manifest().size()));
  const auto values = params.values();
  std::size_t off = 0;
  for (const auto& t : params.manifest()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_le<std::uint64_t>(out, d);
    for (std::size_t i = 0; i < t.numel(); ++i) detail::put_le<float>(out, values[off + i]);
    off += t.numel();
  }
}

inline ParameterVector read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::string_view(magic, sizeof magic) != kCheckpointMagic)
    throw FormatError(0, "not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint8_t>(in);
  if (version != kCheckpointVersion)
    throw FormatError(0, "unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(in);
  Manifest manifest;
  std::vector<float> values;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorShape t;
    const auto name_len = detail::get_le<std::uint32_t>(in);
    if (name_len > (1u << 16)) throw FormatError(0, "checkpoint tensor name too long");
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len)) throw FormatError(0, "checkpoint truncated");
    const auto rank = detail::get_le<std::uint32_t>(in);
    if (rank > 16) throw FormatError(0, "checkpoint tensor rank too large");
    for (std::uint32_t r = 0; r < rank; ++r) t.dims.push_back(detail::get_le<std::uint64_t>(in));
    const auto n = t.numel();
    for (std::size_t k = 0; k < n; ++k) values.push_back(detail::get_le<float>(in));
    manifest.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(0, "trailing bytes after checkpoint");
  return ParameterVector(std::move(manifest), std::move(values));
}

inline void write_checkpoint(const std::filesystem::path& path, const ParameterVector& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, params);
  if (!out) throw Error("write failed: " + path.string());
}

inline ParameterVector read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace w2s
