#ifndef ROBUSTCERT_MODEL_IO_HPP
#define ROBUSTCERT_MODEL_IO_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "network.hpp"

namespace robustcert {

/// Writes `contents` to a sibling temporary file, then renames it over `path`,
/// so readers never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << contents;
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace detail {

inline std::vector<double> to_std(const Eigen::Ref<const Vector>& v) { return {v.data(), v.data() + v.size()}; }

inline Vector read_floats(const nlohmann::json& j, const char* key, std::size_t expected, std::size_t index) {
  if (!j.contains(key) || !j[key].is_array())
    throw FormatError("layer " + std::to_string(index) + ": missing array '" + key + "'");
  const auto& arr = j[key];
  if (arr.size() != expected)
    throw FormatError("layer " + std::to_string(index) + ": '" + key + "' has " + std::to_string(arr.size()) +
                      " values, expected " + std::to_string(expected));
  Vector v(static_cast<Eigen::Index>(expected));
  for (std::size_t i = 0; i < expected; ++i) {
    if (!arr[i].is_number()) throw FormatError("layer " + std::to_string(index) + ": non-numeric entry in " + key);
    v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  }
  return v;
}

inline int read_int(const nlohmann::json& j, const char* key, std::size_t index) {
  if (!j.contains(key) || !j[key].is_number_integer())
    throw FormatError("layer " + std::to_string(index) + ": missing integer '" + key + "'");
  return j[key].get<int>();
}

}  // namespace detail

/// Model JSON: a list of layer records. Dense weights are row-major out x in;
/// conv weights are in [out_ch, in_ch, kh, kw] order and activations use the
/// channel-major "chw" layout.
inline nlohmann::json network_to_json(const Network& net) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    nlohmann::json rec;
    // Row-major flattening of an Eigen (column-major) matrix.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = l.weight();
    const std::vector<double> flat(w.data(), w.data() + w.size());
    if (l.is_conv()) {
      const auto& g = *l.conv();
      rec = {{"kind", "conv2d"}, {"in_ch", g.in_ch}, {"out_ch", g.out_ch}, {"kh", g.kernel}, {"kw", g.kernel},
             {"stride", g.stride}, {"pad", g.pad},   {"in_h", g.in_h},     {"in_w", g.in_w}, {"layout", "chw"}};
    } else {
      rec = {{"kind", "dense"}, {"in", l.input_dim()}, {"out", l.output_dim()}};
    }
    rec["weight"] = flat;
    rec["bias"] = detail::to_std(l.bias());
    arr.push_back(std::move(rec));
  }
  return arr;
}

inline Network network_from_json(const nlohmann::json& arr) {
  if (!arr.is_array() || arr.empty()) throw FormatError("model must be a non-empty list of layer records");
  std::vector<AffineLayer> layers;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& rec = arr[i];
    const std::string kind = rec.value("kind", "");
    if (kind == "dense") {
      const int in = detail::read_int(rec, "in", i), out = detail::read_int(rec, "out", i);
      if (in <= 0 || out <= 0) throw FormatError("layer " + std::to_string(i) + ": in/out must be positive");
      Vector w = detail::read_floats(rec, "weight", static_cast<std::size_t>(in) * out, i);
      Matrix wm = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data(), out, in);
      layers.push_back(AffineLayer::dense(std::move(wm), detail::read_floats(rec, "bias", out, i)));
    } else if (kind == "conv2d") {
      ConvGeometry g;
      g.in_ch = detail::read_int(rec, "in_ch", i);
      g.out_ch = detail::read_int(rec, "out_ch", i);
      const int kh = detail::read_int(rec, "kh", i), kw = detail::read_int(rec, "kw", i);
      if (kh != kw) throw FormatError("layer " + std::to_string(i) + ": only square kernels are supported");
      g.kernel = kh;
      g.stride = detail::read_int(rec, "stride", i);
      g.pad = detail::read_int(rec, "pad", i);
      g.in_h = detail::read_int(rec, "in_h", i);
      g.in_w = detail::read_int(rec, "in_w", i);
      if (rec.contains("layout") && rec["layout"] != "chw")
        throw FormatError("layer " + std::to_string(i) + ": unsupported activation layout");
      try {
        g.validate();
      } catch (const InvalidArgument& e) {
        throw FormatError("layer " + std::to_string(i) + ": " + e.what());
      }
      Vector w = detail::read_floats(rec, "weight", static_cast<std::size_t>(g.out_ch) * g.patch_size(), i);
      Matrix km = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          w.data(), g.out_ch, g.patch_size());
      layers.push_back(AffineLayer::conv2d(g, std::move(km), detail::read_floats(rec, "bias", g.out_ch, i)));
    } else {
      throw FormatError("layer " + std::to_string(i) + ": unknown kind '" + kind + "'");
    }
  }
  try {
    return Network(std::move(layers));
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent layer dimensions: ") + e.what());
  }
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
  write_file_atomic(path, network_to_json(net).dump() + "\n");
}

inline Network load_network(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return network_from_json(j);
}

}  // namespace robustcert

#endif  // ROBUSTCERT_MODEL_IO_HPP
