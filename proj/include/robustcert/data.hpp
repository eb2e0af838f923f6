#ifndef ROBUSTCERT_DATA_HPP
#define ROBUSTCERT_DATA_HPP

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "core.hpp"
#include "model_io.hpp"
#include "rng.hpp"

namespace robustcert {

/// Labeled examples, one per row of `inputs`.
struct Dataset {
  Matrix inputs;  // N x d
  std::vector<int> labels;
  int num_classes = 0;
  /// Per-coordinate input domain [lo, hi]; unbounded when absent.
  std::optional<std::pair<Vector, Vector>> domain;

  std::size_t size() const noexcept { return labels.size(); }
  Eigen::Index dim() const noexcept { return inputs.cols(); }
  Vector example(std::size_t i) const { return inputs.row(static_cast<Eigen::Index>(i)).transpose(); }

  void validate() const {
    if (labels.empty()) throw InvalidArgument("dataset is empty");
    if (static_cast<std::size_t>(inputs.rows()) != labels.size())
      throw DimensionError("dataset has " + std::to_string(inputs.rows()) + " inputs but " +
                           std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw InvalidArgument("label " + std::to_string(y) + " out of range");
    if (!inputs.allFinite()) throw InvalidArgument("dataset inputs must be finite");
  }

  /// Rows [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) throw InvalidArgument("slice out of range");
    Dataset d;
    d.inputs = inputs.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    d.num_classes = num_classes;
    d.domain = domain;
    return d;
  }
};

/// Clamps x into the dataset domain when one is set.
inline Vector clip_to_domain(const Dataset& data, Vector x) {
  if (data.domain) x = x.cwiseMax(data.domain->first).cwiseMin(data.domain->second);
  return x;
}

/// Points placed one at a time uniformly in [0,1]^2, each redrawn until it is
/// at least `min_sep` away (l-infinity) from every earlier point, with labels
/// drawn uniformly from {0, 1}.
inline Dataset gen_2d(std::uint64_t seed, std::size_t n_points = 12, double min_sep = 0.16,
                      std::size_t max_rejections = 1'000'000) {
  if (n_points == 0) throw InvalidArgument("n_points must be positive");
  Rng rng = substream(seed, "data");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n_points), 2);
  d.num_classes = 2;
  std::size_t rejections = 0;
  for (std::size_t i = 0; i < n_points; ++i) {
    for (;;) {
      const double px = unif(rng), py = unif(rng);
      bool ok = true;
      for (std::size_t j = 0; j < i && ok; ++j) {
        const auto r = static_cast<Eigen::Index>(j);
        ok = std::max(std::abs(d.inputs(r, 0) - px), std::abs(d.inputs(r, 1) - py)) >= min_sep;
      }
      if (ok) {
        d.inputs(static_cast<Eigen::Index>(i), 0) = px;
        d.inputs(static_cast<Eigen::Index>(i), 1) = py;
        break;
      }
      if (++rejections >= max_rejections)
        throw InvalidArgument("gen_2d: could not place " + std::to_string(n_points) + " points " +
                              std::to_string(min_sep) + " apart");
    }
  }
  for (std::size_t i = 0; i < n_points; ++i) d.labels.push_back(coin(rng) ? 1 : 0);
  return d;
}

namespace detail {

inline std::string read_maybe_gzip(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("no such file: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw Error("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw FormatError(path.string() + ": decompression failed");
    }
    if (n == 0) break;
    out.append(buf.data(), static_cast<std::size_t>(n));
  }
  gzclose(f);
  return out;
}

inline std::uint32_t be32(const std::string& s, std::size_t off) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3]));
}

}  // namespace detail

/// Reads an IDX image/label pair (gzip or raw). Pixels are scaled by 1/255
/// into [0, 1]; `limit` keeps only the first examples.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::optional<std::size_t> limit = std::nullopt) {
  const std::string im = detail::read_maybe_gzip(images_path);
  const std::string lb = detail::read_maybe_gzip(labels_path);
  if (im.size() < 16 || detail::be32(im, 0) != 0x00000803u)
    throw FormatError(images_path.string() + ": bad magic (expected 0x00000803)");
  if (lb.size() < 8 || detail::be32(lb, 0) != 0x00000801u)
    throw FormatError(labels_path.string() + ": bad magic (expected 0x00000801)");
  const std::size_t n = detail::be32(im, 4), rows = detail::be32(im, 8), cols = detail::be32(im, 12);
  const std::size_t nl = detail::be32(lb, 4);
  if (n != nl)
    throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (im.size() < 16 + n * rows * cols) throw FormatError(images_path.string() + ": truncated payload");
  if (lb.size() < 8 + n) throw FormatError(labels_path.string() + ": truncated payload");
  const std::size_t keep = limit ? std::min(*limit, n) : n;
  const std::size_t d = rows * cols;
  Dataset ds;
  ds.inputs.resize(static_cast<Eigen::Index>(keep), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < keep; ++i)
    for (std::size_t p = 0; p < d; ++p)
      ds.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
          static_cast<unsigned char>(im[16 + i * d + p]) / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    const int y = static_cast<unsigned char>(lb[8 + i]);
    ds.labels.push_back(y);
    max_label = std::max(max_label, y);
  }
  ds.num_classes = std::max(10, max_label + 1);
  ds.domain = std::make_pair(Vector::Zero(static_cast<Eigen::Index>(d)), Vector::Ones(static_cast<Eigen::Index>(d)));
  ds.validate();
  return ds;
}

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

/// CSV with header x0,...,x{d-1},label; values are printed in shortest
/// round-trip form.
inline std::string dataset_to_csv(const Dataset& ds) {
  std::ostringstream out;
  for (Eigen::Index j = 0; j < ds.dim(); ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) out << format_double(ds.inputs(static_cast<Eigen::Index>(i), j)) << ',';
    out << ds.labels[i] << '\n';
  }
  return out.str();
}

inline void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, dataset_to_csv(ds));
}

/// Parses the CSV written by save_csv. The class count is the larger of
/// `num_classes` and max label + 1.
inline Dataset dataset_from_csv(const std::string& text, int num_classes = 0) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset csv is empty");
  std::size_t d = 0;
  {
    std::istringstream hs(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(hs, cell, ',')) cols.push_back(cell);
    if (cols.size() < 2 || cols.back() != "label") throw FormatError("dataset csv header must end with 'label'");
    d = cols.size() - 1;
    for (std::size_t j = 0; j < d; ++j)
      if (cols[j] != "x" + std::to_string(j)) throw FormatError("unexpected header column '" + cols[j] + "'");
  }
  std::vector<double> values;
  Dataset ds;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    std::size_t start = 0;
    for (std::size_t j = 0; j <= d; ++j) {
      const std::size_t end = j == d ? line.size() : line.find(',', start);
      if (end == std::string::npos) throw FormatError("row " + std::to_string(row) + ": too few columns");
      const char* b = line.data() + start;
      const char* e = line.data() + end;
      if (j < d) {
        double v = 0.0;
        auto [p, ec] = std::from_chars(b, e, v);
        if (ec != std::errc() || p != e) throw FormatError("row " + std::to_string(row) + ": bad number");
        values.push_back(v);
      } else {
        int y = 0;
        auto [p, ec] = std::from_chars(b, e, y);
        if (ec != std::errc() || p != e) throw FormatError("row " + std::to_string(row) + ": bad label");
        ds.labels.push_back(y);
      }
      start = end + 1;
    }
  }
  ds.inputs = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(ds.labels.size()), static_cast<Eigen::Index>(d));
  int max_label = -1;
  for (int y : ds.labels) max_label = std::max(max_label, y);
  ds.num_classes = std::max(num_classes, max_label + 1);
  ds.validate();
  return ds;
}

inline Dataset load_csv(const std::filesystem::path& path, int num_classes = 0) {
  return dataset_from_csv(read_file(path), num_classes);
}

}  // namespace robustcert

#endif  // ROBUSTCERT_DATA_HPP
