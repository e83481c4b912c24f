#pragma once

// Dataset ingestion: big-endian IDX image/label pairs, numeric CSV tables,
// seeded splits with train-statistics normalization, and synthetic toy sets
// for smoke tests.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace advdrop {

// Per-feature z-score record; invertible.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;  // population std, floored at 1e-12

  bool empty() const { return mean.empty(); }

  void apply(Tensor<double>& X) const {
    const std::size_t D = X.cols();
    if (mean.size() != D)
      throw std::invalid_argument("normalization width mismatch");
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < D; ++j)
        X(i, j) = (X(i, j) - mean[j]) / std[j];
  }

  void invert(Tensor<double>& X) const {
    const std::size_t D = X.cols();
    if (mean.size() != D)
      throw std::invalid_argument("normalization width mismatch");
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < D; ++j) X(i, j) = X(i, j) * std[j] + mean[j];
  }

  static Normalization fit(const Tensor<double>& X) {
    const std::size_t N = X.rows(), D = X.cols();
    if (N == 0) throw std::invalid_argument("cannot normalize an empty set");
    Normalization nz;
    nz.mean.assign(D, 0.0);
    nz.std.assign(D, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < D; ++j) nz.mean[j] += X(i, j);
    for (std::size_t j = 0; j < D; ++j) nz.mean[j] /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < D; ++j) {
        const double d = X(i, j) - nz.mean[j];
        nz.std[j] += d * d;
      }
    for (std::size_t j = 0; j < D; ++j) {
      nz.std[j] = std::sqrt(nz.std[j] / static_cast<double>(N));
      if (nz.std[j] < 1e-12) nz.std[j] = 1e-12;  // constant column guard
    }
    return nz;
  }
};

struct Dataset {
  Tensor<double> X;             // N x D
  std::vector<int> labels;      // classification targets (else empty)
  Tensor<double> targets;       // regression targets N x 1 (else empty)
  std::size_t num_classes = 0;  // classification only
  Normalization norm;           // record applied to X (possibly empty)

  bool classification() const { return !labels.empty(); }
  std::size_t size() const { return X.rows(); }
  std::size_t dim() const { return X.cols(); }
};

// Dataset cache directory; defaults to ./data when the variable is unset.
inline std::string data_dir() {
  const char* env = std::getenv("ADVDROP_DATA_DIR");
  return env != nullptr && *env != '\0' ? std::string(env) : "data";
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

// Big-endian IDX pair: images (magic 0x00000803, u8 pixels scaled by /255,
// flattened row-major) and labels (magic 0x00000801).
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw FormatError(images_path + ": cannot open");
  std::uint32_t magic = detail::read_be32(img, images_path);
  if (magic != 0x00000803u) {
    std::ostringstream os;
    os << images_path << ": bad image magic 0x" << std::hex << magic;
    throw FormatError(os.str());
  }
  const std::uint32_t n = detail::read_be32(img, images_path);
  const std::uint32_t rows = detail::read_be32(img, images_path);
  const std::uint32_t cols = detail::read_be32(img, images_path);
  const std::size_t d = std::size_t(rows) * cols;
  std::vector<unsigned char> bytes(std::size_t(n) * d);
  if (!img.read(reinterpret_cast<char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size())))
    throw FormatError(images_path + ": truncated pixel data");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw FormatError(labels_path + ": cannot open");
  magic = detail::read_be32(lab, labels_path);
  if (magic != 0x00000801u) {
    std::ostringstream os;
    os << labels_path << ": bad label magic 0x" << std::hex << magic;
    throw FormatError(os.str());
  }
  const std::uint32_t n_lab = detail::read_be32(lab, labels_path);
  if (n_lab != n)
    throw FormatError(labels_path + ": label count " + std::to_string(n_lab) +
                      " does not match image count " + std::to_string(n));
  std::vector<unsigned char> raw_labels(n_lab);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()),
                static_cast<std::streamsize>(raw_labels.size())))
    throw FormatError(labels_path + ": truncated label data");

  Dataset ds;
  ds.X = Tensor<double>::zeros({n, d});
  for (std::size_t i = 0; i < bytes.size(); ++i)
    ds.X.data[i] = static_cast<double>(bytes[i]) / 255.0;
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

// Numeric CSV (RFC-4180 subset: comma separator, LF or CRLF, no quoting,
// optional auto-detected header). One column is the regression target; the
// rest become features. Non-numeric payload cells fail with row/column.
inline Dataset load_csv(const std::string& path, std::size_t target_column) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_checked = false;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(
          start, comma == std::string::npos ? std::string::npos
                                            : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    std::vector<double> parsed(cells.size());
    bool numeric = true;
    std::size_t bad_col = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        parsed[c] = std::stod(cells[c], &used);
        while (used < cells[c].size() &&
               std::isspace(static_cast<unsigned char>(cells[c][used])))
          ++used;
        if (used != cells[c].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        numeric = false;
        bad_col = c;
        break;
      }
    }
    if (!numeric) {
      if (!header_checked && rows.empty()) {
        header_checked = true;  // first non-numeric line is the header
        width = cells.size();
        continue;
      }
      throw FormatError(path + ": non-numeric cell at row " +
                        std::to_string(line_no) + ", column " +
                        std::to_string(bad_col + 1));
    }
    header_checked = true;
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw FormatError(path + ": row " + std::to_string(line_no) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(width));
    rows.push_back(std::move(parsed));
  }
  if (rows.empty()) throw FormatError(path + ": no data rows");
  if (target_column >= width)
    throw FormatError(path + ": target column " +
                      std::to_string(target_column) + " out of range");

  Dataset ds;
  const std::size_t n = rows.size(), d = width - 1;
  ds.X = Tensor<double>::zeros({n, d});
  ds.targets = Tensor<double>::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t fj = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (c == target_column)
        ds.targets(i, 0) = rows[i][c];
      else
        ds.X(i, fj++) = rows[i][c];
    }
  }
  return ds;
}

// Seeded permutation split. Feature normalization is fit on the train part
// only and applied to both; regression targets stay in raw units.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction,
                                         std::uint64_t seed,
                                         bool normalize = true) {
  if (!(fraction > 0.0) || !(fraction < 1.0))
    throw std::invalid_argument("split fraction outside (0,1)");
  const std::size_t n = ds.size();
  const std::size_t n_train = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n)
    throw std::invalid_argument("split produces an empty part");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  auto take = [&](std::size_t begin, std::size_t end) {
    Dataset out;
    const std::size_t m = end - begin, d = ds.dim();
    out.X = Tensor<double>::zeros({m, d});
    out.num_classes = ds.num_classes;
    if (ds.classification()) out.labels.resize(m);
    if (ds.targets.numel() > 0)
      out.targets = Tensor<double>::zeros({m, ds.targets.cols()});
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t src = order[begin + i];
      for (std::size_t j = 0; j < d; ++j) out.X(i, j) = ds.X(src, j);
      if (ds.classification()) out.labels[i] = ds.labels[src];
      if (ds.targets.numel() > 0)
        for (std::size_t j = 0; j < ds.targets.cols(); ++j)
          out.targets(i, j) = ds.targets(src, j);
    }
    return out;
  };
  Dataset train = take(0, n_train);
  Dataset test = take(n_train, n);
  if (normalize) {
    Normalization nz = Normalization::fit(train.X);
    nz.apply(train.X);
    nz.apply(test.X);
    train.norm = nz;
    test.norm = nz;
  }
  return {std::move(train), std::move(test)};
}

enum class SyntheticKind { kTwoGaussians, kLinearRegression, kXor };

// Reproducible toy sets with known attainable behavior.
inline Dataset synthetic(SyntheticKind kind, std::size_t n,
                         std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("synthetic set needs n >= 4");
  Rng rng(seed);
  Dataset ds;
  switch (kind) {
    case SyntheticKind::kTwoGaussians: {
      // classes at (+2,+2) and (-2,-2), identity covariance
      ds.X = Tensor<double>::zeros({n, 2});
      ds.labels.resize(n);
      ds.num_classes = 2;
      for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % 2);
        const double cx = c == 0 ? 2.0 : -2.0;
        ds.X(i, 0) = cx + rng.normal();
        ds.X(i, 1) = cx + rng.normal();
        ds.labels[i] = c;
      }
      return ds;
    }
    case SyntheticKind::kLinearRegression: {
      // y = 2 x0 - x1 + 0.5, noiseless
      ds.X = Tensor<double>::zeros({n, 2});
      ds.targets = Tensor<double>::zeros({n, 1});
      for (std::size_t i = 0; i < n; ++i) {
        ds.X(i, 0) = rng.normal();
        ds.X(i, 1) = rng.normal();
        ds.targets(i, 0) = 2.0 * ds.X(i, 0) - ds.X(i, 1) + 0.5;
      }
      return ds;
    }
    case SyntheticKind::kXor: {
      // the four corners with small jitter; label = sign parity
      ds.X = Tensor<double>::zeros({n, 2});
      ds.labels.resize(n);
      ds.num_classes = 2;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (i & 1) ? 1.0 : -1.0;
        const double b = (i & 2) ? 1.0 : -1.0;
        ds.X(i, 0) = a + 0.1 * rng.normal();
        ds.X(i, 1) = b + 0.1 * rng.normal();
        ds.labels[i] = (a * b > 0) ? 1 : 0;
      }
      return ds;
    }
  }
  throw std::logic_error("unknown synthetic kind");
}

}  // namespace advdrop
