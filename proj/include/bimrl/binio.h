#pragma once

// Little helpers for the binary checkpoint format (host byte order).

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "bimrl/autodiff.h"

namespace bimrl::binio {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("unexpected end of stream");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::uint64_t limit = 1u << 30) {
  const auto n = get<std::uint64_t>(in);
  if (n > limit) throw FormatError("string length out of range");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("unexpected end of stream");
  return s;
}

inline void put_mat(std::ostream& out, const Mat& m) {
  put<std::int64_t>(out, m.rows());
  put<std::int64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Mat get_mat(std::istream& in) {
  const auto r = get<std::int64_t>(in);
  const auto c = get<std::int64_t>(in);
  if (r < 0 || c < 0 || r * c > (1ll << 28)) throw FormatError("matrix shape out of range");
  Mat m(r, c);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw FormatError("unexpected end of stream");
  return m;
}

}  // namespace bimrl::binio
