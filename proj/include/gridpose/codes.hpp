#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridpose/geometry.hpp"

namespace gridpose {

/// The d-level quadtree over the square RoI. Level j splits the RoI into
/// 2^j x 2^j cells; level `depth` is the finest grid, `base_depth` the
/// resolution predicted before any refinement.
struct GridSpec {
  int roi_size = 256;
  int depth = 6;
  int base_depth = 3;

  void validate() const;
  int cells(int level) const { return 1 << level; }
  double cell_size(int level) const { return static_cast<double>(roi_size) / cells(level); }
};

struct CellIndex {
  int level = 1;
  int ix = 0;
  int iy = 0;

  bool operator==(const CellIndex&) const = default;
};

// Bits are stored most-significant first, one per element (0 or 1).
using BitCode = std::vector<std::uint8_t>;

struct KeypointCode {
  bool v = false;
  BitCode x;
  BitCode y;

  bool operator==(const KeypointCode&) const = default;
};
using BinaryCodeSet = std::vector<KeypointCode>;

struct SoftCode {
  double v = 0.5;
  std::vector<double> x;
  std::vector<double> y;
};
using SoftCodeSet = std::vector<SoftCode>;

struct DecodedPoints {
  std::vector<Vec2> points;  // RoI coordinates; NaN where invalid
  std::vector<bool> valid;
};

/// Binary grid of 2^level x 2^level cells over the RoI, row-major (iy, ix).
struct GridMask {
  int level = 6;
  std::vector<std::uint8_t> cells;

  static GridMask filled(int level, bool value);
  int size() const { return 1 << level; }
  bool at(int ix, int iy) const { return cells[static_cast<std::size_t>(iy) * size() + ix] != 0; }
  void set(int ix, int iy, bool value) { cells[static_cast<std::size_t>(iy) * size() + ix] = value ? 1 : 0; }
  std::size_t count() const;
};

std::uint32_t code_to_index(std::span<const std::uint8_t> bits);
BitCode index_to_code(std::uint32_t index, int depth);

// Throws InvalidArgument on non-finite coordinates.
KeypointCode encode_projection(const Vec2& rho, const GridSpec& grid);
BinaryCodeSet encode_projections(std::span<const Vec2> rhos, const GridSpec& grid);

DecodedPoints decode_codes(const BinaryCodeSet& codes, const GridSpec& grid);

// Center of the level-`level` ancestor cell, i.e. decoding only the first `level` bits.
Vec2 decode_prefix(const KeypointCode& code, int level, const GridSpec& grid);

CellIndex prefix_cell(const KeypointCode& code, int level);
std::array<CellIndex, 4> child_cells(const CellIndex& cell);
CellIndex parent_cell(const CellIndex& cell);
bool cell_contains(const CellIndex& outer, const CellIndex& inner);
CellIndex cell_of_point(const Vec2& rho, int level, const GridSpec& grid);

BinaryCodeSet harden(const SoftCodeSet& soft, double threshold = 0.5);

// Truncates/keeps codes at `bits` bits per axis.
BinaryCodeSet truncate_codes(const BinaryCodeSet& codes, int bits);

nlohmann::json codes_to_json(const BinaryCodeSet& codes);
BinaryCodeSet codes_from_json(const nlohmann::json& j);
nlohmann::json soft_codes_to_json(const SoftCodeSet& soft);

/// Packed layout: per keypoint 1 + 2d bits (b_v, b_x MSB first, b_y MSB
/// first), written MSB-first into ceil((1 + 2d) / 8) bytes.
std::vector<std::uint8_t> pack_codes(const BinaryCodeSet& codes, int depth);
BinaryCodeSet unpack_codes(std::span<const std::uint8_t> bytes, int depth);

}  // namespace gridpose
