#pragma once

#include <charconv>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dydet {

/// Shortest round-trip text for a double; "inf", "-inf" and "nan" otherwise.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& file, const std::vector<std::string>& header)
      : file_(file), os_(file, std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot write " + file.string());
    width_ = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << '\n';
  }

  template <typename... Ts>
  void row(const Ts&... values) {
    if (sizeof...(Ts) != width_) throw std::logic_error("csv row width mismatch in " + file_.string());
    std::size_t i = 0;
    ((os_ << (i++ ? "," : "") << cell(values)), ...);
    os_ << '\n';
    if (!os_) throw std::runtime_error("I/O failure writing " + file_.string());
  }

 private:
  template <typename T>
  static std::string cell(const T& v) {
    if constexpr (std::floating_point<T>) {
      return format_real(static_cast<double>(v));
    } else if constexpr (std::integral<T>) {
      return std::to_string(v);
    } else {
      return std::string(std::string_view(v));
    }
  }

  std::filesystem::path file_;
  std::ofstream os_;
  std::size_t width_ = 0;
};

}  // namespace dydet
