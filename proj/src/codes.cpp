#include "gridpose/codes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gridpose/errors.hpp"

namespace gridpose {

void GridSpec::validate() const {
  if (base_depth < 1 || base_depth > depth) throw InvalidArgument("grid requires 1 <= d_0 <= d");
  if (depth > 16) throw InvalidArgument("grid depth above 16 is not supported");
  if (roi_size <= 0 || roi_size % (1 << depth) != 0) {
    throw InvalidArgument("roi_size must be a positive multiple of 2^d");
  }
}

GridMask GridMask::filled(int level, bool value) {
  if (level < 0 || level > 12) throw InvalidArgument("mask level out of range");
  GridMask m;
  m.level = level;
  m.cells.assign(static_cast<std::size_t>(1) << (2 * level), value ? 1 : 0);
  return m;
}

std::size_t GridMask::count() const {
  std::size_t n = 0;
  for (auto c : cells) n += c != 0;
  return n;
}

std::uint32_t code_to_index(std::span<const std::uint8_t> bits) {
  std::uint32_t index = 0;
  for (auto b : bits) index = (index << 1) | (b ? 1u : 0u);
  return index;
}

BitCode index_to_code(std::uint32_t index, int depth) {
  if (depth < 1 || depth > 31) throw InvalidArgument("code depth out of range");
  if (index >= (1u << depth)) {
    throw InvalidArgument("index " + std::to_string(index) + " does not fit in " +
                          std::to_string(depth) + " bits");
  }
  BitCode bits(depth);
  for (int k = 0; k < depth; ++k) bits[k] = (index >> (depth - 1 - k)) & 1u;
  return bits;
}

CellIndex cell_of_point(const Vec2& rho, int level, const GridSpec& grid) {
  const int n = grid.cells(level);
  const auto axis = [&](double c) {
    const auto i = static_cast<int>(std::floor(c * n / grid.roi_size));
    return std::clamp(i, 0, n - 1);
  };
  return {level, axis(rho.x()), axis(rho.y())};
}

KeypointCode encode_projection(const Vec2& rho, const GridSpec& grid) {
  if (!rho.allFinite()) throw InvalidArgument("cannot encode a non-finite projection");
  KeypointCode code;
  const double size = grid.roi_size;
  code.v = rho.x() >= 0.0 && rho.x() < size && rho.y() >= 0.0 && rho.y() < size;
  if (!code.v) {
    code.x.assign(grid.depth, 0);
    code.y.assign(grid.depth, 0);
    return code;
  }
  const CellIndex cell = cell_of_point(rho, grid.depth, grid);
  code.x = index_to_code(cell.ix, grid.depth);
  code.y = index_to_code(cell.iy, grid.depth);
  return code;
}

BinaryCodeSet encode_projections(std::span<const Vec2> rhos, const GridSpec& grid) {
  grid.validate();
  BinaryCodeSet out;
  out.reserve(rhos.size());
  for (const auto& r : rhos) out.push_back(encode_projection(r, grid));
  return out;
}

Vec2 decode_prefix(const KeypointCode& code, int level, const GridSpec& grid) {
  const CellIndex c = prefix_cell(code, level);
  const double s = grid.cell_size(level);
  return {(c.ix + 0.5) * s, (c.iy + 0.5) * s};
}

DecodedPoints decode_codes(const BinaryCodeSet& codes, const GridSpec& grid) {
  DecodedPoints out;
  out.points.reserve(codes.size());
  out.valid.reserve(codes.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& c : codes) {
    if (!c.v || c.x.size() != c.y.size() || c.x.empty()) {
      out.points.emplace_back(nan, nan);
      out.valid.push_back(false);
      continue;
    }
    out.points.push_back(decode_prefix(c, static_cast<int>(c.x.size()), grid));
    out.valid.push_back(true);
  }
  return out;
}

CellIndex prefix_cell(const KeypointCode& code, int level) {
  if (level < 1 || level > static_cast<int>(code.x.size()) || level > static_cast<int>(code.y.size())) {
    throw InvalidArgument("prefix level " + std::to_string(level) + " out of range");
  }
  const auto n = static_cast<std::size_t>(level);
  return {level, static_cast<int>(code_to_index(std::span(code.x).first(n))),
          static_cast<int>(code_to_index(std::span(code.y).first(n)))};
}

std::array<CellIndex, 4> child_cells(const CellIndex& cell) {
  if (cell.level < 0 || cell.level >= 16) throw InvalidArgument("cell level out of range");
  const int l = cell.level + 1, x = 2 * cell.ix, y = 2 * cell.iy;
  return {CellIndex{l, x, y}, CellIndex{l, x + 1, y}, CellIndex{l, x, y + 1}, CellIndex{l, x + 1, y + 1}};
}

CellIndex parent_cell(const CellIndex& cell) {
  if (cell.level < 1) throw InvalidArgument("level-0 cell has no parent");
  return {cell.level - 1, cell.ix >> 1, cell.iy >> 1};
}

bool cell_contains(const CellIndex& outer, const CellIndex& inner) {
  if (inner.level < outer.level) return false;
  const int shift = inner.level - outer.level;
  return (inner.ix >> shift) == outer.ix && (inner.iy >> shift) == outer.iy;
}

BinaryCodeSet harden(const SoftCodeSet& soft, double threshold) {
  BinaryCodeSet out;
  out.reserve(soft.size());
  const auto bit = [threshold](double p) -> std::uint8_t { return p >= threshold ? 1 : 0; };
  for (const auto& s : soft) {
    KeypointCode c;
    c.v = s.v >= threshold;
    c.x.reserve(s.x.size());
    c.y.reserve(s.y.size());
    for (double p : s.x) c.x.push_back(bit(p));
    for (double p : s.y) c.y.push_back(bit(p));
    out.push_back(std::move(c));
  }
  return out;
}

BinaryCodeSet truncate_codes(const BinaryCodeSet& codes, int bits) {
  BinaryCodeSet out = codes;
  for (auto& c : out) {
    if (bits > static_cast<int>(c.x.size())) throw InvalidArgument("cannot truncate to more bits");
    c.x.resize(bits);
    c.y.resize(bits);
  }
  return out;
}

namespace {

std::string bits_to_string(const BitCode& bits) {
  std::string s;
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

BitCode bits_from_string(const std::string& s) {
  BitCode bits;
  for (char ch : s) {
    if (ch != '0' && ch != '1') throw InvalidArgument("code string contains '" + std::string(1, ch) + "'");
    bits.push_back(ch == '1');
  }
  return bits;
}

}  // namespace

nlohmann::json codes_to_json(const BinaryCodeSet& codes) {
  auto arr = nlohmann::json::array();
  for (const auto& c : codes) {
    arr.push_back({{"b_v", c.v ? 1 : 0}, {"b_x", bits_to_string(c.x)}, {"b_y", bits_to_string(c.y)}});
  }
  return arr;
}

BinaryCodeSet codes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidArgument("code set JSON must be an array");
  BinaryCodeSet out;
  for (const auto& item : j) {
    KeypointCode c;
    const int v = item.at("b_v").get<int>();
    if (v != 0 && v != 1) throw InvalidArgument("b_v must be 0 or 1");
    c.v = v == 1;
    c.x = bits_from_string(item.at("b_x").get<std::string>());
    c.y = bits_from_string(item.at("b_y").get<std::string>());
    if (c.x.size() != c.y.size()) throw InvalidArgument("b_x and b_y lengths differ");
    out.push_back(std::move(c));
  }
  return out;
}

nlohmann::json soft_codes_to_json(const SoftCodeSet& soft) {
  auto arr = nlohmann::json::array();
  for (const auto& s : soft) arr.push_back({{"b_v", s.v}, {"b_x", s.x}, {"b_y", s.y}});
  return arr;
}

std::vector<std::uint8_t> pack_codes(const BinaryCodeSet& codes, int depth) {
  const int bits_per = 1 + 2 * depth;
  const int bytes_per = (bits_per + 7) / 8;
  std::vector<std::uint8_t> out(codes.size() * bytes_per, 0);
  for (std::size_t k = 0; k < codes.size(); ++k) {
    const auto& c = codes[k];
    if (static_cast<int>(c.x.size()) != depth || static_cast<int>(c.y.size()) != depth) {
      throw InvalidArgument("code length does not match packing depth");
    }
    std::uint8_t* base = out.data() + k * bytes_per;
    int pos = 0;
    const auto put = [&](bool b) {
      if (b) base[pos / 8] |= static_cast<std::uint8_t>(0x80u >> (pos % 8));
      ++pos;
    };
    put(c.v);
    for (auto b : c.x) put(b != 0);
    for (auto b : c.y) put(b != 0);
  }
  return out;
}

BinaryCodeSet unpack_codes(std::span<const std::uint8_t> bytes, int depth) {
  const int bytes_per = (1 + 2 * depth + 7) / 8;
  if (bytes.size() % bytes_per != 0) throw InvalidArgument("packed code buffer has a partial record");
  BinaryCodeSet out;
  for (std::size_t off = 0; off < bytes.size(); off += bytes_per) {
    int pos = 0;
    const auto get = [&]() -> std::uint8_t {
      const std::uint8_t b = (bytes[off + pos / 8] >> (7 - pos % 8)) & 1u;
      ++pos;
      return b;
    };
    KeypointCode c;
    c.v = get() != 0;
    for (int i = 0; i < depth; ++i) c.x.push_back(get());
    for (int i = 0; i < depth; ++i) c.y.push_back(get());
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace gridpose
