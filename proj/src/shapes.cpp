#include "gridpose/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>

#include "gridpose/errors.hpp"

namespace gridpose {
namespace {

using Face = std::array<int, 3>;

struct MeshBuilder {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  // Adds a (cells+1)^2 vertex grid spanning origin + s*u + t*v, s,t in [0,1].
  void add_grid(const Vec3& origin, const Vec3& u, const Vec3& v, int cells) {
    const int base = static_cast<int>(vertices.size());
    for (int b = 0; b <= cells; ++b) {
      for (int a = 0; a <= cells; ++a) {
        vertices.push_back(origin + u * (double(a) / cells) + v * (double(b) / cells));
      }
    }
    const int row = cells + 1;
    for (int b = 0; b < cells; ++b) {
      for (int a = 0; a < cells; ++a) {
        const int i0 = base + b * row + a;
        faces.push_back({i0, i0 + 1, i0 + row + 1});
        faces.push_back({i0, i0 + row + 1, i0 + row});
      }
    }
  }

  // Merges coincident vertices (shared grid edges) so the vertex set has no duplicates.
  ObjectModel finish(double quantum = 1e-9) {
    std::map<std::array<long long, 3>, int> index;
    std::vector<int> remap(vertices.size());
    std::vector<Vec3> unique;
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      const std::array<long long, 3> key{std::llround(vertices[i].x() / quantum),
                                         std::llround(vertices[i].y() / quantum),
                                         std::llround(vertices[i].z() / quantum)};
      auto [it, inserted] = index.try_emplace(key, static_cast<int>(unique.size()));
      if (inserted) unique.push_back(vertices[i]);
      remap[i] = it->second;
    }
    std::vector<Face> out_faces;
    out_faces.reserve(faces.size());
    for (const auto& f : faces) out_faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
    return ObjectModel::from_mesh(std::move(unique), std::move(out_faces));
  }
};

void add_box_faces(MeshBuilder& mb, const Vec3& lo, const Vec3& hi, int cells, bool with_top) {
  const Vec3 d = hi - lo;
  const Vec3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
  mb.add_grid(lo, ey, ex, cells);                 // bottom, z = lo
  if (with_top) mb.add_grid(lo + ez, ex, ey, cells);  // top, z = hi
  mb.add_grid(lo, ex, ez, cells);                 // y = lo
  mb.add_grid(lo + ey, ez, ex, cells);            // y = hi
  mb.add_grid(lo, ez, ey, cells);                 // x = lo
  mb.add_grid(lo + ex, ey, ez, cells);            // x = hi
}

}  // namespace

ObjectModel make_icosphere(int level, double radius) {
  if (level < 0) throw InvalidArgument("icosphere level must be >= 0");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                         {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                         {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                         {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int idx = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const int a = mid(tri[0], tri[1]), b = mid(tri[1], tri[2]), c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  for (auto& p : v) p *= radius;
  return ObjectModel::from_mesh(std::move(v), std::move(f));
}

ObjectModel make_box(const Vec3& extents, int cells) {
  if (cells < 1) throw InvalidArgument("box needs at least one cell per face");
  MeshBuilder mb;
  add_box_faces(mb, -extents / 2, extents / 2, cells, true);
  return mb.finish();
}

ObjectModel make_open_box(const Vec3& extents, double wall, int cells) {
  if (cells < 1) throw InvalidArgument("box needs at least one cell per face");
  if (!(wall > 0.0) || 2 * wall >= extents.minCoeff()) throw InvalidArgument("wall thickness out of range");
  MeshBuilder mb;
  const Vec3 lo = -extents / 2, hi = extents / 2;
  add_box_faces(mb, lo, hi, cells, false);
  const Vec3 ilo(lo.x() + wall, lo.y() + wall, lo.z() + wall), ihi(hi.x() - wall, hi.y() - wall, hi.z());
  add_box_faces(mb, ilo, ihi, cells, false);
  return mb.finish();
}

ObjectModel make_toy_object(double size, int cells) {
  MeshBuilder mb;
  const Vec3 body(size, 0.6 * size, 0.4 * size);
  add_box_faces(mb, -body / 2, body / 2, cells, true);
  // block on top, shifted towards +x/+y so no nontrivial symmetry survives
  const Vec3 lo(0.05 * size, -0.05 * size, body.z() / 2);
  const Vec3 hi(0.45 * size, 0.25 * size, body.z() / 2 + 0.3 * size);
  add_box_faces(mb, lo, hi, std::max(2, cells / 2), true);
  return mb.finish();
}

std::vector<Vec3> sample_surface(const ObjectModel& model, std::size_t count, std::mt19937_64& rng) {
  if (model.faces.empty()) return model.vertices;
  std::vector<double> cumulative;
  cumulative.reserve(model.faces.size());
  double total = 0.0;
  for (const auto& f : model.faces) {
    const Vec3& a = model.vertices[f[0]];
    total += 0.5 * (model.vertices[f[1]] - a).cross(model.vertices[f[2]] - a).norm();
    cumulative.push_back(total);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = unit(rng) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const auto& f = model.faces[std::min<std::size_t>(it - cumulative.begin(), model.faces.size() - 1)];
    double s = unit(rng), t = unit(rng);
    if (s + t > 1.0) {
      s = 1.0 - s;
      t = 1.0 - t;
    }
    const Vec3& a = model.vertices[f[0]];
    out.push_back(a + s * (model.vertices[f[1]] - a) + t * (model.vertices[f[2]] - a));
  }
  return out;
}

}  // namespace gridpose
