#pragma once

#include <cstdint>
#include <random>

#include "gridpose/geometry.hpp"

namespace gridpose {

// Icosahedron subdivided `level` times and projected onto a sphere;
// 10 * 4^level + 2 vertices in a fixed canonical order.
ObjectModel make_icosphere(int level, double radius = 1.0);

// Closed axis-aligned box centered at the origin, each face a regular
// `cells` x `cells` triangulated grid.
ObjectModel make_box(const Vec3& extents, int cells);

// Open-top box with walls of thickness `wall`: outer and inner surfaces of
// the five faces (the rim is left open). The inner surface is visible only
// through the opening.
ObjectModel make_open_box(const Vec3& extents, double wall, int cells);

// Asymmetric procedural object used by the synthetic benchmark and trainer:
// a box body with an offset block attached on one side.
ObjectModel make_toy_object(double size = 0.2, int cells = 10);

// Area-weighted uniform samples on the mesh faces. Returns the vertices
// themselves when the model has no faces.
std::vector<Vec3> sample_surface(const ObjectModel& model, std::size_t count, std::mt19937_64& rng);

}  // namespace gridpose
