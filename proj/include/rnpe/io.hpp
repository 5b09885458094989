#ifndef RNPE_IO_HPP
#define RNPE_IO_HPP

#include "rnpe/numerics.hpp"
#include "rnpe/tasks.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace rnpe {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + p.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("write failed for '" + p.string() + "'");
}

/// Parses a JSON manifest; syntax errors report the byte offset.
inline json read_manifest(const fs::path& p) {
  const std::string text = read_text(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("malformed manifest '" + p.string() + "' at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

inline void write_manifest(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

template <class T>
T manifest_get(const json& j, const char* key, const fs::path& p) {
  if (!j.contains(key)) throw FormatError("manifest '" + p.string() + "' lacks key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + p.string() + "' key '" + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Little-endian f64 blocks
// ---------------------------------------------------------------------------

inline void write_f64(const fs::path& p, const std::vector<double>& values) {
  std::string bytes(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto u = std::bit_cast<std::uint64_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
    std::memcpy(bytes.data() + 8 * i, &u, 8);
  }
  write_text(p, bytes);
}

inline std::vector<double> read_f64(const fs::path& p, std::size_t expected) {
  const std::string bytes = read_text(p);
  if (bytes.size() != expected * 8)
    throw FormatError("'" + p.string() + "' holds " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected * 8));
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t u;
    std::memcpy(&u, bytes.data() + 8 * i, 8);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

/// Row-major flattening.
inline std::vector<double> flatten_rows(const Matrix& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

inline Matrix unflatten_rows(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols, std::size_t offset = 0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[offset + static_cast<std::size_t>(i * cols + j)];
  return m;
}

inline json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vector(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// ---------------------------------------------------------------------------
// Task / dataset persistence
// ---------------------------------------------------------------------------

inline json task_json(const TaskSpec& t) {
  json j;
  j["name"] = std::string(to_string(t.name));
  j["theta_dim"] = t.theta_dim;
  j["x_dim"] = t.x_dim;
  j["noise_sigma"] = t.noise_sigma;
  j["time_points"] = t.time_points;
  j["prior"] = {{"kind", t.prior.kind == PriorKind::standard_normal ? "standard_normal" : "scaled_normal"},
                {"sigma", t.prior.sigma},
                {"sigmoid_transform", t.prior.sigmoid_transform},
                {"transform_low", vector_json(t.prior.transform_low)},
                {"transform_high", vector_json(t.prior.transform_high)}};
  j["linear_diag"] = vector_json(t.linear_diag);
  j["task_seed"] = t.task_seed;
  j["initial_state"] = vector_json(t.initial_state);
  j["t_end"] = t.t_end;
  j["substeps"] = t.substeps;
  return j;
}

inline TaskSpec task_from_json(const json& j) {
  try {
    TaskSpec t;
    t.name = task_from_string(j.at("name").get<std::string>());
    t.theta_dim = j.at("theta_dim").get<int>();
    t.x_dim = j.at("x_dim").get<int>();
    t.noise_sigma = j.at("noise_sigma").get<double>();
    t.time_points = j.at("time_points").get<int>();
    const json& p = j.at("prior");
    t.prior.kind = p.at("kind").get<std::string>() == "standard_normal" ? PriorKind::standard_normal
                                                                        : PriorKind::scaled_normal;
    t.prior.sigma = p.at("sigma").get<double>();
    t.prior.sigmoid_transform = p.at("sigmoid_transform").get<bool>();
    t.prior.transform_low = json_vector(p.at("transform_low"));
    t.prior.transform_high = json_vector(p.at("transform_high"));
    t.linear_diag = json_vector(j.at("linear_diag"));
    t.task_seed = j.at("task_seed").get<std::uint64_t>();
    t.initial_state = json_vector(j.at("initial_state"));
    t.t_end = j.at("t_end").get<double>();
    t.substeps = j.at("substeps").get<int>();
    validate(t);
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("task descriptor: ") + e.what());
  }
}

/// Writes <stem>.json, <stem>.thetas.f64 and <stem>.xs.f64.
inline void save_dataset(const fs::path& stem, const Dataset& ds, const std::string& config_hash) {
  json j;
  j["format"] = "rnpe-dataset-1";
  j["config_hash"] = config_hash;
  j["task"] = task_json(ds.task);
  j["n"] = ds.size();
  j["seed"] = ds.seed;
  j["prior_predictive_std"] = ds.prior_predictive_std;
  j["x_min"] = vector_json(ds.x_min);
  j["x_max"] = vector_json(ds.x_max);
  j["thetas"] = stem.filename().string() + ".thetas.f64";
  j["xs"] = stem.filename().string() + ".xs.f64";
  write_f64(stem.string() + ".thetas.f64", flatten_rows(ds.thetas));
  write_f64(stem.string() + ".xs.f64", flatten_rows(ds.xs));
  write_manifest(stem.string() + ".json", j);
}

struct LoadedDataset {
  Dataset data;
  std::string config_hash;
};

inline LoadedDataset load_dataset(const fs::path& stem) {
  const fs::path mpath = stem.string() + ".json";
  const json j = read_manifest(mpath);
  if (manifest_get<std::string>(j, "format", mpath) != "rnpe-dataset-1") throw FormatError("unknown dataset format");
  LoadedDataset out;
  Dataset& ds = out.data;
  ds.task = task_from_json(j.at("task"));
  const auto n = manifest_get<Eigen::Index>(j, "n", mpath);
  ds.seed = manifest_get<std::uint64_t>(j, "seed", mpath);
  const fs::path dir = stem.parent_path();
  ds.thetas = unflatten_rows(read_f64(dir / manifest_get<std::string>(j, "thetas", mpath),
                                      static_cast<std::size_t>(n * ds.task.theta_dim)),
                             n, ds.task.theta_dim);
  ds.xs = unflatten_rows(
      read_f64(dir / manifest_get<std::string>(j, "xs", mpath), static_cast<std::size_t>(n * ds.task.x_dim)), n,
      ds.task.x_dim);
  ds.prior_predictive_std = manifest_get<double>(j, "prior_predictive_std", mpath);
  ds.x_min = json_vector(j.at("x_min"));
  ds.x_max = json_vector(j.at("x_max"));
  out.config_hash = manifest_get<std::string>(j, "config_hash", mpath);
  return out;
}

}  // namespace rnpe

#endif  // RNPE_IO_HPP
