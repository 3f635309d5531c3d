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

// Image decoding (binary/ASCII PPM and PGM, PNG through libpng) and the
// class-per-folder dataset loader. Users of this header link libpng.

#ifndef FLBA_IMAGE_IO_HPP_
#define FLBA_IMAGE_IO_HPP_

#include <png.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flba/dataset.hpp"
#include "flba/image.hpp"

namespace flba {

namespace detail {

inline std::string lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

inline ImageTensor gray_to_rgb_if_needed(const ImageTensor& img, int channels) {
  if (img.channels() == channels) return img;
  if (img.channels() == 1 && channels == 3) {
    ImageTensor out(img.height(), img.width(), 3);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c) out(y, x, c) = img(y, x, 0);
    return out;
  }
  if (img.channels() == 3 && channels == 1) {
    ImageTensor out(img.height(), img.width(), 1);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        out(y, x, 0) = 0.299 * img(y, x, 0) + 0.587 * img(y, x, 1) + 0.114 * img(y, x, 2);
    return out;
  }
  fail(ErrorKind::kLoad, "cannot convert " + std::to_string(img.channels()) + " channels to " +
                             std::to_string(channels));
}

}  // namespace detail

// Netpbm P2/P3/P5/P6 with maxval up to 65535.
inline ImageTensor decode_pnm(const std::string& bytes, const std::string& what) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(ErrorKind::kLoad, what + ": malformed netpbm header");
    return std::stol(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes[0] != 'P') fail(ErrorKind::kLoad, what + ": not a netpbm file");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    fail(ErrorKind::kLoad, what + ": unsupported netpbm variant P" + std::string(1, kind));
  }
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    fail(ErrorKind::kLoad, what + ": invalid netpbm dimensions");
  }
  const int channels = (kind == '3' || kind == '6') ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<double> px(count);
  if (kind == '2' || kind == '3') {
    for (std::size_t i = 0; i < count; ++i) {
      const long v = read_int();
      if (v > maxval) fail(ErrorKind::kLoad, what + ": sample exceeds maxval");
      px[i] = static_cast<double>(v) / maxval;
    }
  } else {
    ++pos;  // single whitespace after maxval
    const int bpp = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + count * bpp) fail(ErrorKind::kLoad, what + ": truncated pixel data");
    for (std::size_t i = 0; i < count; ++i) {
      unsigned v = static_cast<unsigned char>(bytes[pos + i * bpp]);
      if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i * bpp + 1]);
      if (v > static_cast<unsigned>(maxval)) fail(ErrorKind::kLoad, what + ": sample exceeds maxval");
      px[i] = static_cast<double>(v) / maxval;
    }
  }
  return ImageTensor(static_cast<int>(h), static_cast<int>(w), channels, std::move(px));
}

inline ImageTensor decode_png(const std::string& bytes, const std::string& what) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    fail(ErrorKind::kLoad, what + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    fail(ErrorKind::kLoad, what + ": " + msg);
  }
  std::vector<double> px(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) px[i] = buf[i] / 255.0;
  return ImageTensor(static_cast<int>(image.height), static_cast<int>(image.width), 3,
                     std::move(px));
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = detail::lower(p.extension().string());
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

inline ImageTensor read_image(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  static const unsigned char kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngMagic, kPngMagic + 8,
                                      reinterpret_cast<const unsigned char*>(bytes.data()))) {
    return decode_png(bytes, path.string());
  }
  return decode_pnm(bytes, path.string());
}

// Writes 8-bit binary PPM (3 channels) or PGM (1 channel).
inline void write_pnm(const std::filesystem::path& path, const ImageTensor& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << (img.channels() == 1 ? "P5" : "P6") << '\n'
      << img.width() << ' ' << img.height() << "\n255\n";
  if (img.channels() != 1 && img.channels() != 3) {
    fail(ErrorKind::kIo, "netpbm output needs 1 or 3 channels");
  }
  for (double v : img.pixels()) {
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

inline void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  if (img.channels() != 3) fail(ErrorKind::kIo, "png output needs 3 channels");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(img.size());
  auto px = img.pixels();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<unsigned char>(std::lround(px[i] * 255.0));
  }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    fail(ErrorKind::kIo, path.string() + ": " + image.message);
  }
}

// Split manifest: one `<class_name> <split>` pair per line; blank lines and
// lines starting with '#' are ignored. Splits: train|auxiliary,
// test|novel, val|validation.
struct ManifestEntry {
  std::string class_name;
  SplitRole split;
};

inline std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  std::map<std::string, std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string name, split, extra;
    if (!(ls >> name) || name[0] == '#') continue;
    if (!(ls >> split) || (ls >> extra)) {
      fail(ErrorKind::kLoad, "manifest line " + std::to_string(lineno) +
                                 ": expected '<class_name> <split>'");
    }
    const std::string s = detail::lower(split);
    SplitRole role;
    if (s == "train" || s == "auxiliary") {
      role = SplitRole::kAuxiliary;
    } else if (s == "test" || s == "novel") {
      role = SplitRole::kSupportPool;
    } else if (s == "val" || s == "validation") {
      role = SplitRole::kValidation;
    } else {
      fail(ErrorKind::kLoad, "manifest line " + std::to_string(lineno) + ": unknown split '" +
                                 split + "'");
    }
    auto [it, inserted] = seen.emplace(name, s);
    if (!inserted) {
      fail(ErrorKind::kLoad, "class '" + name + "' appears in two manifest entries (" +
                                 it->second + ", " + s + ")");
    }
    out.push_back({name, role});
  }
  return out;
}

struct DirectoryLoadOptions {
  int resolution = 32;
  int channels = 3;
};

// Loads <root>/<class_name>/<images> according to the manifest. Novel
// ("test") classes are split per class: the first half of the sorted file
// list forms the support pool, the rest the query pool.
inline DatasetSplits load_directory_dataset(const std::filesystem::path& root,
                                            const std::filesystem::path& manifest_path,
                                            const DirectoryLoadOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) fail(ErrorKind::kLoad, "dataset root " + root.string() + " missing");
  const auto entries = parse_manifest(read_file_bytes(manifest_path));
  DatasetSplits d;
  d.auxiliary.role = SplitRole::kAuxiliary;
  d.support_pool.role = SplitRole::kSupportPool;
  d.query_pool.role = SplitRole::kQueryPool;
  d.validation.role = SplitRole::kValidation;
  for (const auto& entry : entries) {
    const fs::path dir = root / entry.class_name;
    if (!fs::is_directory(dir)) {
      fail(ErrorKind::kLoad, "class folder '" + entry.class_name + "' missing under " + root.string());
    }
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file() && is_image_file(f.path())) files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(ErrorKind::kLoad, "class folder '" + entry.class_name + "' is empty");
    std::vector<LabeledExample> examples;
    for (const auto& f : files) {
      ImageTensor img = detail::gray_to_rgb_if_needed(read_image(f), opts.channels);
      img = resize_bilinear(img, opts.resolution, opts.resolution);
      examples.push_back({std::move(img), entry.class_name,
                          entry.class_name + "/" + f.filename().string()});
    }
    if (entry.split == SplitRole::kSupportPool) {
      if (examples.size() < 2) {
        fail(ErrorKind::kLoad, "novel class '" + entry.class_name + "' needs at least 2 images");
      }
      const std::size_t half = examples.size() / 2;
      d.support_pool.class_set.push_back(entry.class_name);
      d.query_pool.class_set.push_back(entry.class_name);
      for (std::size_t i = 0; i < examples.size(); ++i) {
        (i < half ? d.support_pool : d.query_pool).examples.push_back(std::move(examples[i]));
      }
    } else {
      SplitSet& target = entry.split == SplitRole::kAuxiliary ? d.auxiliary : d.validation;
      target.class_set.push_back(entry.class_name);
      for (auto& e : examples) target.examples.push_back(std::move(e));
    }
  }
  for (SplitSet* s : {&d.auxiliary, &d.support_pool, &d.query_pool, &d.validation}) {
    std::sort(s->class_set.begin(), s->class_set.end());
  }
  validate(d);
  return d;
}

}  // namespace flba

#endif  // FLBA_IMAGE_IO_HPP_
