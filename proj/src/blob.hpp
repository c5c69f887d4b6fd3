#pragma once

// Little-endian-as-host binary blobs with bounds-checked reads.

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "divergent/errors.hpp"

namespace divergent::detail {

class BlobWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void vec(const Eigen::VectorXd& v) {
    put(static_cast<std::uint64_t>(v.size()));
    bytes(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  void mat(const Eigen::MatrixXd& m) {
    put(static_cast<std::uint64_t>(m.rows()));
    put(static_cast<std::uint64_t>(m.cols()));
    bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class BlobReader {
 public:
  BlobReader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw Error(ErrorKind::SchemaMismatch, "truncated " + what_);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    check_size(n);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Eigen::VectorXd vec() {
    const auto n = get<std::uint64_t>();
    check_size(n * sizeof(double));
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    bytes(v.data(), sizeof(double) * n);
    return v;
  }
  Eigen::MatrixXd mat() {
    const auto r = get<std::uint64_t>(), c = get<std::uint64_t>();
    check_size(r * c * sizeof(double));
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    bytes(m.data(), sizeof(double) * r * c);
    return m;
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw Error(ErrorKind::SchemaMismatch, "trailing bytes in " + what_);
  }

 private:
  void check_size(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw Error(ErrorKind::SchemaMismatch, "truncated " + what_);
  }
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace divergent::detail
