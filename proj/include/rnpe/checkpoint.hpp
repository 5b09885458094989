#ifndef RNPE_CHECKPOINT_HPP
#define RNPE_CHECKPOINT_HPP

#include "rnpe/estimator.hpp"
#include "rnpe/io.hpp"

#include <variant>

namespace rnpe {

using AnyEstimator = std::variant<MlpEstimator, GlmEstimator>;

namespace detail {

inline void append(std::vector<double>& out, const Vector& v) { out.insert(out.end(), v.data(), v.data() + v.size()); }

inline Vector take(const std::vector<double>& in, std::size_t& pos, Eigen::Index n) {
  Vector v = Eigen::Map<const Vector>(in.data() + pos, n);
  pos += static_cast<std::size_t>(n);
  return v;
}

}  // namespace detail

/// Writes <stem>.json (architecture) and <stem>.params.f64.
///
/// Block order, MLP: params, input_shift, input_scale, output_shift,
/// output_scale. GLM: params, offset, then (random_fourier only) the
/// frequency matrix row-major and the phases.
inline void save_checkpoint(const fs::path& stem, const AnyEstimator& est, const std::string& config_hash,
                            const json& extra = json::object()) {
  json j;
  j["format"] = "rnpe-checkpoint-1";
  j["config_hash"] = config_hash;
  std::vector<double> block;
  if (const auto* m = std::get_if<MlpEstimator>(&est)) {
    j["kind"] = "mlp";
    j["layer_sizes"] = m->layer_sizes();
    j["activation"] = "tanh";
    j["sigma_floor"] = MlpEstimator::kSigmaFloor;
    for (const Vector* v : {&m->params(), &m->input_shift, &m->input_scale, &m->output_shift, &m->output_scale})
      detail::append(block, *v);
  } else {
    const auto& g = std::get<GlmEstimator>(est);
    const FeatureMap& fm = g.feature_map();
    j["kind"] = "glm";
    j["theta_dim"] = g.theta_dim();
    j["feature_map"] = {{"kind", std::string(to_string(fm.kind))},
                        {"x_dim", fm.x_dim},
                        {"feature_dim", fm.feature_dim},
                        {"bandwidth", fm.bandwidth},
                        {"seed", fm.seed}};
    detail::append(block, g.params());
    detail::append(block, g.offset);
    if (fm.kind == FeatureKind::random_fourier) {
      const auto f = flatten_rows(fm.frequencies);
      block.insert(block.end(), f.begin(), f.end());
      detail::append(block, fm.phases);
    }
  }
  j["num_values"] = block.size();
  j["params"] = stem.filename().string() + ".params.f64";
  if (!extra.empty()) j["provenance"] = extra;
  write_f64(stem.string() + ".params.f64", block);
  write_manifest(stem.string() + ".json", j);
}

struct LoadedCheckpoint {
  AnyEstimator estimator;
  std::string config_hash;
  json manifest;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& stem) {
  const fs::path mpath = stem.string() + ".json";
  LoadedCheckpoint out;
  out.manifest = read_manifest(mpath);
  const json& j = out.manifest;
  if (manifest_get<std::string>(j, "format", mpath) != "rnpe-checkpoint-1") throw FormatError("unknown checkpoint format");
  out.config_hash = manifest_get<std::string>(j, "config_hash", mpath);
  const auto n = manifest_get<std::size_t>(j, "num_values", mpath);
  const auto block = read_f64(stem.parent_path() / manifest_get<std::string>(j, "params", mpath), n);
  std::size_t pos = 0;
  const auto kind = manifest_get<std::string>(j, "kind", mpath);
  try {
    if (kind == "mlp") {
      MlpEstimator m = MlpEstimator::zeros(manifest_get<std::vector<int>>(j, "layer_sizes", mpath));
      const std::size_t need = static_cast<std::size_t>(m.num_params() + 2 * m.x_dim() + 2 * m.theta_dim());
      if (need != n) throw FormatError("checkpoint block size does not match the architecture");
      m.params() = detail::take(block, pos, m.num_params());
      m.input_shift = detail::take(block, pos, m.x_dim());
      m.input_scale = detail::take(block, pos, m.x_dim());
      m.output_shift = detail::take(block, pos, m.theta_dim());
      m.output_scale = detail::take(block, pos, m.theta_dim());
      out.estimator = std::move(m);
    } else if (kind == "glm") {
      const json& f = j.at("feature_map");
      const FeatureKind fk = feature_kind_from_string(f.at("kind").get<std::string>());
      const int xd = f.at("x_dim").get<int>();
      FeatureMap fm = fk == FeatureKind::identity
                          ? FeatureMap::identity(xd)
                          : FeatureMap::random_fourier(xd, f.at("feature_dim").get<int>(),
                                                       f.at("bandwidth").get<double>(), f.at("seed").get<std::uint64_t>());
      GlmEstimator g(fm, manifest_get<int>(j, "theta_dim", mpath));
      std::size_t need = static_cast<std::size_t>(g.num_params() + g.theta_dim());
      if (fk == FeatureKind::random_fourier) need += static_cast<std::size_t>(fm.feature_dim) * (fm.x_dim + 1);
      if (need != n) throw FormatError("checkpoint block size does not match the architecture");
      g.params() = detail::take(block, pos, g.num_params());
      g.offset = detail::take(block, pos, g.theta_dim());
      if (fk == FeatureKind::random_fourier) {
        const Matrix freq = unflatten_rows(block, fm.feature_dim, fm.x_dim, pos);
        pos += static_cast<std::size_t>(freq.size());
        const Vector ph = detail::take(block, pos, fm.feature_dim);
        if (freq != fm.frequencies || ph != fm.phases)
          throw FormatError("checkpoint feature map does not match its seed");
      }
      out.estimator = std::move(g);
    } else {
      throw FormatError("unknown estimator kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  return out;
}

}  // namespace rnpe

#endif  // RNPE_CHECKPOINT_HPP
