#pragma once

// Plain-text mesh files.
//
//   x,y,z[,nx,ny,nz][,area][,t1,...,tk]
//   <one comma-separated row per point, each row terminated by '\n'>
//
// Reals are written with 17 significant digits, which round-trips binary64
// exactly. A final row without its newline is reported as truncation.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "transolver/error.hpp"
#include "transolver/mesh.hpp"

namespace transolver {

struct MeshLayout {
  bool normals = false;
  bool area = false;
  std::size_t targets = 0;

  std::size_t columns() const { return 3 + (normals ? 3 : 0) + (area ? 1 : 0) + targets; }

  std::string header() const {
    std::string h = "x,y,z";
    if (normals) h += ",nx,ny,nz";
    if (area) h += ",area";
    for (std::size_t k = 1; k <= targets; ++k) h += ",t" + std::to_string(k);
    return h;
  }

  static MeshLayout of(const MeshBatch& m) {
    return {m.normals.has_value(), m.areas.has_value(), m.targets ? m.targets->cols() : 0};
  }
};

inline void append_real(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

inline void write_mesh_header(std::ostream& os, const MeshLayout& layout) {
  os << layout.header() << '\n';
}

inline void write_mesh_rows(std::ostream& os, const MeshBatch& m) {
  if (m.coords.cols() != 3) throw ShapeError("mesh files store 3-D coordinates");
  std::string line;
  for (std::size_t i = 0; i < m.size(); ++i) {
    line.clear();
    auto put_row = [&](const Matrix<double>& mat) {
      for (double v : mat.row(i)) {
        if (!line.empty()) line.push_back(',');
        append_real(line, v);
      }
    };
    put_row(m.coords);
    if (m.normals) put_row(*m.normals);
    if (m.areas) put_row(*m.areas);
    if (m.targets) put_row(*m.targets);
    line.push_back('\n');
    os.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
  if (!os) throw std::runtime_error("mesh write failed");
}

inline void write_mesh(std::ostream& os, const MeshBatch& m) {
  write_mesh_header(os, MeshLayout::of(m));
  write_mesh_rows(os, m);
}

inline void write_mesh(const std::string& path, const MeshBatch& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_mesh(os, m);
}

// Sequential reader yielding index-ordered chunks.
class ChunkedMeshReader {
 public:
  explicit ChunkedMeshReader(std::istream& is) : is_(&is) { read_header(); }
  explicit ChunkedMeshReader(const std::string& path)
      : owned_(std::make_unique<std::ifstream>(path, std::ios::binary)), is_(owned_.get()) {
    if (!*owned_) throw std::runtime_error("cannot open mesh file '" + path + "'");
    read_header();
  }

  const MeshLayout& layout() const { return layout_; }
  std::size_t rows_read() const { return rows_read_; }

  // Up to max_rows points; nullopt once the file is exhausted.
  std::optional<MeshBatch> next(std::size_t max_rows) {
    if (max_rows == 0) throw ShapeError("chunk size must be >= 1");
    std::vector<double> vals;
    std::size_t got = 0;
    const std::size_t cols = layout_.columns();
    std::string line;
    while (got < max_rows && read_line(line)) {
      parse_row(line, cols, vals);
      ++got;
    }
    if (got == 0) return std::nullopt;
    MeshBatch m;
    m.coords = Matrix<double>(got, 3);
    m.features = Matrix<double>(got, 0);
    if (layout_.normals) m.normals = Matrix<double>(got, 3);
    if (layout_.area) m.areas = Matrix<double>(got, 1);
    if (layout_.targets) m.targets = Matrix<double>(got, layout_.targets);
    for (std::size_t i = 0; i < got; ++i) {
      const double* r = vals.data() + i * cols;
      std::size_t c = 0;
      for (std::size_t k = 0; k < 3; ++k) m.coords(i, k) = r[c++];
      if (layout_.normals)
        for (std::size_t k = 0; k < 3; ++k) (*m.normals)(i, k) = r[c++];
      if (layout_.area) (*m.areas)(i, 0) = r[c++];
      for (std::size_t k = 0; k < layout_.targets; ++k) (*m.targets)(i, k) = r[c++];
      m.indices.push_back(rows_read_ + i);
    }
    rows_read_ += got;
    return m;
  }

 private:
  bool read_line(std::string& line) {
    line_start_ = offset_;
    if (!std::getline(*is_, line)) return false;
    ++line_no_;
    offset_ += line.size();
    if (is_->eof()) throw FormatError("truncated row: missing end of line", line_no_, line_start_);
    offset_ += 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  void read_header() {
    std::string line;
    if (!read_line(line)) throw FormatError("missing header line", 1, 0);
    std::vector<std::string_view> cols;
    std::string_view sv(line);
    while (true) {
      auto p = sv.find(',');
      cols.push_back(sv.substr(0, p));
      if (p == std::string_view::npos) break;
      sv.remove_prefix(p + 1);
    }
    auto bad = [&](const std::string& why) { return FormatError("malformed header: " + why, line_no_, line_start_); };
    if (cols.size() < 3 || cols[0] != "x" || cols[1] != "y" || cols[2] != "z") throw bad("expected x,y,z");
    std::size_t c = 3;
    if (c < cols.size() && cols[c] == "nx") {
      if (c + 2 >= cols.size() || cols[c + 1] != "ny" || cols[c + 2] != "nz") throw bad("incomplete normal columns");
      layout_.normals = true;
      c += 3;
    }
    if (c < cols.size() && cols[c] == "area") {
      layout_.area = true;
      ++c;
    }
    for (std::size_t k = 1; c < cols.size(); ++c, ++k)
      if (cols[c] != "t" + std::to_string(k)) throw bad("unexpected column '" + std::string(cols[c]) + "'");
    layout_.targets = cols.size() - layout_.columns() + layout_.targets;
  }

  void parse_row(const std::string& line, std::size_t cols, std::vector<double>& out) {
    const char* p = line.data();
    const char* end = p + line.size();
    for (std::size_t c = 0; c < cols; ++c) {
      double v = 0.0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc())
        throw FormatError("bad number in column " + std::to_string(c + 1), line_no_,
                          line_start_ + static_cast<std::size_t>(p - line.data()));
      p = res.ptr;
      out.push_back(v);
      if (c + 1 < cols) {
        if (p == end || *p != ',')
          throw FormatError("expected " + std::to_string(cols) + " fields, found " + std::to_string(c + 1),
                            line_no_, line_start_ + static_cast<std::size_t>(p - line.data()));
        ++p;
      }
    }
    if (p != end)
      throw FormatError("trailing data after " + std::to_string(cols) + " fields", line_no_,
                        line_start_ + static_cast<std::size_t>(p - line.data()));
    if (layout_.area) {
      const double a = out[out.size() - cols + 3 + (layout_.normals ? 3 : 0)];
      if (!(a > 0.0) || !std::isfinite(a)) throw FormatError("area must be positive", line_no_, line_start_);
    }
  }

  std::unique_ptr<std::ifstream> owned_;
  std::istream* is_;
  MeshLayout layout_;
  std::size_t line_no_ = 0;
  std::size_t offset_ = 0;
  std::size_t line_start_ = 0;
  std::size_t rows_read_ = 0;
};

inline MeshBatch read_mesh(std::istream& is) {
  ChunkedMeshReader reader(is);
  MeshBatch all;
  all.coords = Matrix<double>(0, 3);
  all.features = Matrix<double>(0, 0);
  const auto& lay = reader.layout();
  if (lay.normals) all.normals = Matrix<double>(0, 3);
  if (lay.area) all.areas = Matrix<double>(0, 1);
  if (lay.targets) all.targets = Matrix<double>(0, lay.targets);
  while (auto chunk = reader.next(1 << 16)) all.append(*chunk);
  all.indices.clear();
  return all;
}

inline MeshBatch read_mesh(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open mesh file '" + path + "'");
  return read_mesh(is);
}

}  // namespace transolver
