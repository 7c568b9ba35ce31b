#pragma once

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "msq/common.hpp"

namespace msq {

// CSV emitter. First line is the header; every row carries its schema tag in
// the leading column so files stay self-describing and versionable.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::string schema,
            const std::vector<std::string>& columns)
      : out_(path), schema_(std::move(schema)) {
    if (!out_) throw DataError("cannot open " + path + " for writing");
    out_ << "schema";
    for (const auto& c : columns) out_ << ',' << c;
    out_ << '\n';
  }

  template <typename... Ts>
  void row(const Ts&... fields) {
    out_ << schema_;
    ((out_ << ',' << format(fields)), ...);
    out_ << '\n';
  }

  void flush() { out_.flush(); }

 private:
  static std::string format(const std::string& s) { return s; }
  static std::string format(const char* s) { return s; }
  static std::string format(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
  }
  static std::string format(float v) { return format(double(v)); }
  template <typename T>
  static std::string format(const T& v) {
    return std::to_string(v);
  }

  std::ofstream out_;
  std::string schema_;
};

}  // namespace msq
