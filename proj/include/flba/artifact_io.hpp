// Copyright 2026 The fewshot-backdoor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Shared layout of the binary artifacts (trigger file, perturbation and
// poisoned-set bundles): a text header of "key value..." lines terminated
// by a "payload" line, followed by raw little-endian float64 payload.

#ifndef FLBA_ARTIFACT_IO_HPP_
#define FLBA_ARTIFACT_IO_HPP_

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "flba/common.hpp"
#include "flba/embedding.hpp"

namespace flba::artifact {

// Percent-encodes whitespace and '%' so free-form ids fit in one token.
inline std::string escape_token(const std::string& s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char ch : s) {
    if (ch <= ' ' || ch == '%' || ch == 0x7f) {
      out += '%';
      out += kHex[ch >> 4];
      out += kHex[ch & 0xf];
    } else {
      out += static_cast<char>(ch);
    }
  }
  return out.empty() ? "%00" : out;
}

inline std::string unescape_token(const std::string& s) {
  if (s == "%00") return {};
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

class Writer {
 public:
  explicit Writer(const std::string& magic) { header_ << magic << '\n'; }

  template <typename... Ts>
  Writer& line(const std::string& key, const Ts&... values) {
    header_ << key;
    ((header_ << ' ' << values), ...);
    header_ << '\n';
    return *this;
  }

  Writer& real(const std::string& key, double v) {
    return line(key, detail::format_double(v));
  }

  void payload(std::span<const double> values) {
    for (double v : values) detail::append_le64(payload_, v);
  }

  std::string bytes() const { return header_.str() + "payload\n" + payload_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
    const std::string b = bytes();
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!out) fail(ErrorKind::kIo, "short write to " + path.string());
  }

 private:
  std::ostringstream header_;
  std::string payload_;
};

class Reader {
 public:
  Reader(std::string bytes, const std::string& magic, std::string what)
      : bytes_(std::move(bytes)), what_(std::move(what)) {
    if (next_line() != magic) bad("bad magic string");
  }

  static Reader open(const std::filesystem::path& path, const std::string& magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::kMissingArtifact, path.string() + " not found");
    return Reader(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()),
                  magic, path.string());
  }

  // Reads the next header line, which must start with `key`; returns the
  // remaining tokens as a stream.
  std::istringstream expect(const std::string& key) {
    std::istringstream ls(next_line());
    std::string k;
    ls >> k;
    if (k != key) bad("expected '" + key + "', found '" + k + "'");
    return ls;
  }

  template <typename T>
  T value(const std::string& key) {
    auto ls = expect(key);
    T v{};
    ls >> v;
    if (ls.fail()) bad("malformed value for '" + key + "'");
    return v;
  }

  double real(const std::string& key) {
    auto ls = expect(key);
    std::string token;
    ls >> token;
    try {
      return std::stod(token);
    } catch (const std::exception&) {
      bad("malformed value for '" + key + "'");
    }
  }

  std::uint64_t hex(const std::string& key) {
    auto ls = expect(key);
    std::string token;
    ls >> token;
    try {
      return std::stoull(token, nullptr, 16);
    } catch (const std::exception&) {
      bad("malformed value for '" + key + "'");
    }
  }

  // Consumes the "payload" marker and returns the float64 payload.
  std::vector<double> payload() {
    if (next_line() != "payload") bad("missing payload marker");
    const std::size_t n = bytes_.size() - pos_;
    if (n % 8 != 0) bad("payload is not a whole number of float64 values");
    std::vector<double> out(n / 8);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::read_le64(bytes_.data() + pos_ + 8 * i);
    pos_ = bytes_.size();
    return out;
  }

  [[noreturn]] void bad(const std::string& why) const { fail(ErrorKind::kLoad, what_ + ": " + why); }

 private:
  std::string next_line() {
    const std::size_t nl = bytes_.find('\n', pos_);
    if (nl == std::string::npos) bad("truncated header");
    std::string line = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return line;
  }

  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace flba::artifact

#endif  // FLBA_ARTIFACT_IO_HPP_
