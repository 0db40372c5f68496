#pragma once

#include <filesystem>
#include <istream>
#include <ostream>

#include "gridpose/geometry.hpp"

namespace gridpose {

// ASCII PLY subset: element vertex (x, y, z plus ignored extra properties),
// element face with a vertex_indices list. Polygons are fan-triangulated.
ObjectModel read_ply(std::istream& in);

// OBJ subset: `v x y z` and `f a b c ...` lines (a/b/c and negative indices accepted).
ObjectModel read_obj(std::istream& in);

// Dispatches on the file extension (.ply / .obj). Units are meters.
ObjectModel load_mesh(const std::filesystem::path& path);

void write_ply(std::ostream& out, const ObjectModel& model);
void save_ply(const std::filesystem::path& path, const ObjectModel& model);

}  // namespace gridpose
