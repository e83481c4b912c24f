#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "advdrop/data.hpp"

using namespace advdrop;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("advdrop_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter_++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static inline int counter_ = 0;
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
}

void append_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back((v >> 24) & 0xff);
  b.push_back((v >> 16) & 0xff);
  b.push_back((v >> 8) & 0xff);
  b.push_back(v & 0xff);
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows,
                                      std::uint32_t cols,
                                      const std::vector<unsigned char>& px,
                                      std::uint32_t magic = 0x00000803u) {
  std::vector<unsigned char> b;
  append_be32(b, magic);
  append_be32(b, n);
  append_be32(b, rows);
  append_be32(b, cols);
  b.insert(b.end(), px.begin(), px.end());
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n,
                                      const std::vector<unsigned char>& ls,
                                      std::uint32_t magic = 0x00000801u) {
  std::vector<unsigned char> b;
  append_be32(b, magic);
  append_be32(b, n);
  b.insert(b.end(), ls.begin(), ls.end());
  return b;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("idx image/label ingestion") {
  TempDir dir;
  const std::string img = dir.file("images");
  const std::string lab = dir.file("labels");

  SECTION("pixels scale to [0,1] and labels carry through") {
    write_bytes(img, idx_images(2, 2, 2, {0, 51, 102, 255, 10, 20, 30, 40}));
    write_bytes(lab, idx_labels(2, {3, 1}));
    Dataset ds = load_idx(img, lab);
    REQUIRE(ds.classification());
    REQUIRE(ds.size() == 2);
    REQUIRE(ds.dim() == 4);
    REQUIRE(ds.X(0, 0) == 0.0);
    REQUIRE_THAT(ds.X(0, 1), WithinAbs(51.0 / 255.0, 1e-15));
    REQUIRE(ds.X(0, 3) == 1.0);
    REQUIRE_THAT(ds.X(1, 2), WithinAbs(30.0 / 255.0, 1e-15));
    REQUIRE(ds.labels == std::vector<int>{3, 1});
    REQUIRE(ds.num_classes == 4);
    REQUIRE(ds.targets.numel() == 0);
  }

  SECTION("loading is pure: repeated loads are identical") {
    write_bytes(img, idx_images(2, 2, 2, {0, 51, 102, 255, 10, 20, 30, 40}));
    write_bytes(lab, idx_labels(2, {3, 1}));
    Dataset a = load_idx(img, lab);
    Dataset b = load_idx(img, lab);
    REQUIRE(a.X.data == b.X.data);
    REQUIRE(a.labels == b.labels);
  }

  SECTION("wrong magic numbers are rejected") {
    write_bytes(img, idx_images(1, 1, 1, {7}, 0x00000802u));
    write_bytes(lab, idx_labels(1, {0}));
    REQUIRE_THROWS_MATCHES(load_idx(img, lab), FormatError,
                           Catch::Matchers::MessageMatches(
                               ContainsSubstring("magic")));
    write_bytes(img, idx_images(1, 1, 1, {7}));
    write_bytes(lab, idx_labels(1, {0}, 0x00000804u));
    REQUIRE_THROWS_AS(load_idx(img, lab), FormatError);
  }

  SECTION("image/label count mismatch is rejected") {
    write_bytes(img, idx_images(2, 1, 1, {7, 8}));
    write_bytes(lab, idx_labels(3, {0, 1, 2}));
    REQUIRE_THROWS_MATCHES(load_idx(img, lab), FormatError,
                           Catch::Matchers::MessageMatches(
                               ContainsSubstring("does not match")));
  }

  SECTION("truncated payloads and missing files are rejected") {
    write_bytes(img, idx_images(2, 2, 2, {0, 1, 2}));  // 3 of 8 pixels
    write_bytes(lab, idx_labels(2, {0, 1}));
    REQUIRE_THROWS_AS(load_idx(img, lab), FormatError);
    REQUIRE_THROWS_AS(load_idx(dir.file("nope"), lab), FormatError);
  }

  SECTION("committed digits fixture loads with expected geometry") {
    const std::string root = std::string(ADVDROP_FIXTURE_DIR) + "/digits/";
    Dataset train = load_idx(root + "train-images-idx3-ubyte",
                             root + "train-labels-idx1-ubyte");
    Dataset test = load_idx(root + "test-images-idx3-ubyte",
                            root + "test-labels-idx1-ubyte");
    REQUIRE(train.size() == 1200);
    REQUIRE(test.size() == 597);
    REQUIRE(train.dim() == 784);
    REQUIRE(test.dim() == 784);
    REQUIRE(train.num_classes == 10);
    for (double v : test.X.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    std::set<int> seen(train.labels.begin(), train.labels.end());
    REQUIRE(seen.size() == 10);
  }
}

TEST_CASE("csv ingestion") {
  TempDir dir;
  const std::string path = dir.file("table.csv");

  SECTION("header is auto-detected and the target column is extracted") {
    write_text(path, "a,b,y\r\n1,2,10\n3,4,20\n5,6,30\n");
    Dataset ds = load_csv(path, 2);
    REQUIRE_FALSE(ds.classification());
    REQUIRE(ds.size() == 3);
    REQUIRE(ds.dim() == 2);
    REQUIRE(ds.X(1, 0) == 3.0);
    REQUIRE(ds.X(2, 1) == 6.0);
    REQUIRE(ds.targets(0, 0) == 10.0);
    REQUIRE(ds.targets(2, 0) == 30.0);
  }

  SECTION("target column need not be last") {
    write_text(path, "1,10,2\n3,20,4\n");
    Dataset ds = load_csv(path, 1);
    REQUIRE(ds.X(0, 0) == 1.0);
    REQUIRE(ds.X(0, 1) == 2.0);
    REQUIRE(ds.targets(1, 0) == 20.0);
  }

  SECTION("non-numeric payload cells report row and column") {
    write_text(path, "a,b,y\n1,2,3\n4,oops,6\n");
    REQUIRE_THROWS_MATCHES(
        load_csv(path, 2), FormatError,
        Catch::Matchers::MessageMatches(ContainsSubstring("row 3") &&
                                        ContainsSubstring("column 2")));
  }

  SECTION("ragged rows, empty tables, and bad target columns are rejected") {
    write_text(path, "1,2,3\n4,5\n");
    REQUIRE_THROWS_AS(load_csv(path, 0), FormatError);
    write_text(path, "a,b,c\n");
    REQUIRE_THROWS_AS(load_csv(path, 0), FormatError);
    write_text(path, "1,2\n");
    REQUIRE_THROWS_AS(load_csv(path, 5), FormatError);
  }

  SECTION("committed diabetes fixture loads with expected geometry") {
    Dataset ds = load_csv(std::string(ADVDROP_FIXTURE_DIR) +
                              "/uci/diabetes.csv",
                          10);
    REQUIRE(ds.size() == 442);
    REQUIRE(ds.dim() == 10);
    REQUIRE_FALSE(ds.classification());
    REQUIRE(ds.targets(0, 0) == 151.0);
  }
}

TEST_CASE("normalization") {
  SECTION("z-scores use population statistics") {
    Tensor<double> X = Tensor<double>::zeros({3, 1});
    X(0, 0) = 1.0;
    X(1, 0) = 2.0;
    X(2, 0) = 3.0;
    Normalization nz = Normalization::fit(X);
    REQUIRE_THAT(nz.mean[0], WithinAbs(2.0, 1e-15));
    REQUIRE_THAT(nz.std[0], WithinAbs(std::sqrt(2.0 / 3.0), 1e-15));
    nz.apply(X);
    REQUIRE_THAT(X(0, 0), WithinAbs(-1.224744871391589, 1e-12));
    REQUIRE_THAT(X(1, 0), WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(X(2, 0), WithinAbs(1.224744871391589, 1e-12));
  }

  SECTION("apply then invert is the identity to 1e-12") {
    Rng rng(8);
    Tensor<double> X = Tensor<double>::randn({20, 5}, rng, 3.0);
    for (std::size_t i = 0; i < X.rows(); ++i) X(i, 2) += 100.0;
    Tensor<double> orig = X;
    Normalization nz = Normalization::fit(X);
    nz.apply(X);
    nz.invert(X);
    for (std::size_t i = 0; i < X.numel(); ++i)
      REQUIRE_THAT(X.data[i], WithinAbs(orig.data[i], 1e-12));
  }

  SECTION("constant columns do not divide by zero") {
    Tensor<double> X = Tensor<double>::full({4, 1}, 5.0);
    Normalization nz = Normalization::fit(X);
    nz.apply(X);
    for (double v : X.data) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("seeded splits") {
  // rows tagged by a unique feature value so provenance is checkable
  Dataset ds;
  ds.X = Tensor<double>::zeros({10, 2});
  ds.targets = Tensor<double>::zeros({10, 1});
  for (std::size_t i = 0; i < 10; ++i) {
    ds.X(i, 0) = static_cast<double>(i);
    ds.X(i, 1) = 10.0 + static_cast<double>(i);
    ds.targets(i, 0) = 100.0 + static_cast<double>(i);
  }

  SECTION("80/20 split covers every row exactly once") {
    auto [train, test] = split(ds, 0.8, 42, /*normalize=*/false);
    REQUIRE(train.size() == 8);
    REQUIRE(test.size() == 2);
    std::multiset<double> tags;
    for (std::size_t i = 0; i < train.size(); ++i) tags.insert(train.X(i, 0));
    for (std::size_t i = 0; i < test.size(); ++i) tags.insert(test.X(i, 0));
    REQUIRE(tags.size() == 10);
    for (std::size_t i = 0; i < 10; ++i)
      REQUIRE(tags.count(static_cast<double>(i)) == 1);
    // rows stay intact: feature pair and target move together
    for (std::size_t i = 0; i < train.size(); ++i) {
      REQUIRE(train.X(i, 1) == train.X(i, 0) + 10.0);
      REQUIRE(train.targets(i, 0) == train.X(i, 0) + 100.0);
    }
  }

  SECTION("same seed reproduces the split; different seed changes it") {
    auto [a_train, a_test] = split(ds, 0.8, 7, false);
    auto [b_train, b_test] = split(ds, 0.8, 7, false);
    REQUIRE(a_train.X.data == b_train.X.data);
    REQUIRE(a_test.X.data == b_test.X.data);
    bool any_diff = false;
    for (std::uint64_t s = 8; s < 16 && !any_diff; ++s) {
      auto [c_train, c_test] = split(ds, 0.8, s, false);
      any_diff = c_train.X.data != a_train.X.data;
    }
    REQUIRE(any_diff);
  }

  SECTION("features are standardized with train statistics only") {
    auto [train, test] = split(ds, 0.8, 42, /*normalize=*/true);
    for (std::size_t j = 0; j < 2; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < train.size(); ++i) mean += train.X(i, j);
      mean /= static_cast<double>(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) {
        const double d = train.X(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(train.size());
      REQUIRE_THAT(mean, WithinAbs(0.0, 1e-12));
      REQUIRE_THAT(var, WithinAbs(1.0, 1e-12));
    }
    // test rows transform with the train record, recoverable exactly
    REQUIRE(test.norm.mean == train.norm.mean);
    Tensor<double> back = test.X;
    test.norm.invert(back);
    std::multiset<double> tags;
    for (std::size_t i = 0; i < back.rows(); ++i)
      tags.insert(std::round(back(i, 0)));
    for (double t : tags) REQUIRE((t >= 0.0 && t <= 9.0));
    // targets stay in raw units
    for (std::size_t i = 0; i < train.size(); ++i)
      REQUIRE(train.targets(i, 0) >= 100.0);
  }

  SECTION("degenerate fractions are rejected") {
    REQUIRE_THROWS_AS(split(ds, 0.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(split(ds, 1.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(split(ds, 0.01, 1), std::invalid_argument);
  }

  SECTION("classification labels travel with their rows") {
    Dataset cls;
    cls.X = Tensor<double>::zeros({10, 1});
    cls.labels.resize(10);
    cls.num_classes = 10;
    for (std::size_t i = 0; i < 10; ++i) {
      cls.X(i, 0) = static_cast<double>(i);
      cls.labels[i] = static_cast<int>(i);
    }
    auto [train, test] = split(cls, 0.8, 3, false);
    REQUIRE(train.num_classes == 10);
    for (std::size_t i = 0; i < train.size(); ++i)
      REQUIRE(train.labels[i] == static_cast<int>(train.X(i, 0)));
    for (std::size_t i = 0; i < test.size(); ++i)
      REQUIRE(test.labels[i] == static_cast<int>(test.X(i, 0)));
  }
}

TEST_CASE("synthetic datasets") {
  SECTION("two gaussians are nearly separated by the diagonal rule") {
    Dataset ds = synthetic(SyntheticKind::kTwoGaussians, 400, 5);
    REQUIRE(ds.num_classes == 2);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const int pred = (ds.X(i, 0) + ds.X(i, 1) > 0.0) ? 0 : 1;
      if (pred == ds.labels[i]) ++correct;
    }
    REQUIRE(static_cast<double>(correct) / 400.0 > 0.95);
  }

  SECTION("linear regression targets are a noiseless affine map") {
    Dataset ds = synthetic(SyntheticKind::kLinearRegression, 100, 6);
    REQUIRE_FALSE(ds.classification());
    double mse = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double pred = 2.0 * ds.X(i, 0) - ds.X(i, 1) + 0.5;
      const double d = pred - ds.targets(i, 0);
      mse += d * d;
    }
    REQUIRE(mse == 0.0);
  }

  SECTION("xor labels defeat every linear rule") {
    Dataset ds = synthetic(SyntheticKind::kXor, 400, 7);
    const double kPi = std::acos(-1.0);
    double best = 0.0;
    for (int ang = 0; ang < 360; ang += 2) {
      const double w0 = std::cos(ang * kPi / 180.0);
      const double w1 = std::sin(ang * kPi / 180.0);
      for (double b = -2.0; b <= 2.0; b += 0.1) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          const int pred = (w0 * ds.X(i, 0) + w1 * ds.X(i, 1) + b > 0) ? 1 : 0;
          if (pred == ds.labels[i]) ++correct;
        }
        const double acc = static_cast<double>(correct) / 400.0;
        best = std::max({best, acc, 1.0 - acc});
      }
    }
    REQUIRE(best <= 0.755);
    REQUIRE(best >= 0.745);  // the three-corner rule is in the grid
  }

  SECTION("generation is seed deterministic") {
    Dataset a = synthetic(SyntheticKind::kTwoGaussians, 50, 9);
    Dataset b = synthetic(SyntheticKind::kTwoGaussians, 50, 9);
    REQUIRE(a.X.data == b.X.data);
    REQUIRE(a.labels == b.labels);
  }
}

TEST_CASE("dataset cache directory resolution") {
  const char* saved = std::getenv("ADVDROP_DATA_DIR");
  const std::string saved_copy = saved ? saved : "";
  ::setenv("ADVDROP_DATA_DIR", "/tmp/elsewhere", 1);
  REQUIRE(data_dir() == "/tmp/elsewhere");
  ::unsetenv("ADVDROP_DATA_DIR");
  REQUIRE(data_dir() == "data");
  if (saved)
    ::setenv("ADVDROP_DATA_DIR", saved_copy.c_str(), 1);
}
