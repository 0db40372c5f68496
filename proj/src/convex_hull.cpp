#include "gridpose/convex_hull.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>

#include "gridpose/errors.hpp"

namespace gridpose {
namespace {

struct Face {
  std::array<int, 3> v;
  Vec3 normal;
  double offset = 0.0;
  std::vector<int> outside;
  bool alive = true;
  int visit = -1;
};

std::uint64_t edge_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

class QuickHull {
 public:
  explicit QuickHull(std::span<const Vec3> pts) : pts_(pts) {}

  ConvexHull run() {
    if (pts_.size() < 4) throw DegenerateConfiguration("convex hull needs at least 4 points");
    double scale = 0.0;
    for (int a = 0; a < 3; ++a) {
      double m = 0.0;
      for (const auto& p : pts_) m = std::max(m, std::abs(p[a]));
      scale += m;
    }
    eps_ = 64.0 * std::numeric_limits<double>::epsilon() * std::max(scale, 1e-300);
    build_simplex();
    run_iterations();
    ConvexHull hull;
    std::vector<char> used(pts_.size(), 0);
    for (const auto& f : faces_) {
      if (!f.alive) continue;
      hull.faces.push_back(f.v);
      for (int i : f.v) used[i] = 1;
    }
    for (std::size_t i = 0; i < used.size(); ++i)
      if (used[i]) hull.vertices.push_back(static_cast<int>(i));
    return hull;
  }

 private:
  double dist(const Face& f, int p) const { return f.normal.dot(pts_[p]) - f.offset; }

  int add_face(int a, int b, int c) {
    Face f;
    f.v = {a, b, c};
    const Vec3 n = (pts_[b] - pts_[a]).cross(pts_[c] - pts_[a]);
    const double len = n.norm();
    f.normal = len > 0.0 ? Vec3(n / len) : Vec3::Zero();
    f.offset = f.normal.dot(pts_[a]);
    faces_.push_back(std::move(f));
    const int id = static_cast<int>(faces_.size()) - 1;
    edges_[edge_key(a, b)] = id;
    edges_[edge_key(b, c)] = id;
    edges_[edge_key(c, a)] = id;
    return id;
  }

  void kill_face(int id) {
    Face& f = faces_[id];
    f.alive = false;
    for (int e = 0; e < 3; ++e) {
      auto it = edges_.find(edge_key(f.v[e], f.v[(e + 1) % 3]));
      if (it != edges_.end() && it->second == id) edges_.erase(it);
    }
  }

  void build_simplex() {
    const int n = static_cast<int>(pts_.size());
    // two extreme points along the axis of largest spread
    int i0 = 0, i1 = 0;
    double spread = -1.0;
    for (int a = 0; a < 3; ++a) {
      int lo = 0, hi = 0;
      for (int i = 1; i < n; ++i) {
        if (pts_[i][a] < pts_[lo][a]) lo = i;
        if (pts_[i][a] > pts_[hi][a]) hi = i;
      }
      if (pts_[hi][a] - pts_[lo][a] > spread) {
        spread = pts_[hi][a] - pts_[lo][a];
        i0 = lo;
        i1 = hi;
      }
    }
    if (spread <= eps_) throw DegenerateConfiguration("points are coincident");
    const Vec3 dir = (pts_[i1] - pts_[i0]).normalized();
    int i2 = -1;
    double best = eps_;
    for (int i = 0; i < n; ++i) {
      const Vec3 r = pts_[i] - pts_[i0];
      const double d = (r - dir * dir.dot(r)).norm();
      if (d > best) {
        best = d;
        i2 = i;
      }
    }
    if (i2 < 0) throw DegenerateConfiguration("points are collinear");
    const Vec3 normal = (pts_[i1] - pts_[i0]).cross(pts_[i2] - pts_[i0]).normalized();
    int i3 = -1;
    best = eps_;
    for (int i = 0; i < n; ++i) {
      const double d = std::abs(normal.dot(pts_[i] - pts_[i0]));
      if (d > best) {
        best = d;
        i3 = i;
      }
    }
    if (i3 < 0) throw DegenerateConfiguration("points are coplanar");
    if (normal.dot(pts_[i3] - pts_[i0]) > 0.0) std::swap(i1, i2);  // base faces away from i3
    const int f[4] = {add_face(i0, i1, i2), add_face(i0, i3, i1), add_face(i1, i3, i2), add_face(i2, i3, i0)};
    for (int i = 0; i < n; ++i) {
      if (i == i0 || i == i1 || i == i2 || i == i3) continue;
      for (int id : f) {
        if (dist(faces_[id], i) > eps_) {
          faces_[id].outside.push_back(i);
          break;
        }
      }
    }
  }

  void run_iterations() {
    std::vector<int> stack;
    for (std::size_t id = 0; id < faces_.size(); ++id) stack.push_back(static_cast<int>(id));
    int stamp = 0;
    std::vector<int> visible;
    std::vector<std::pair<int, int>> horizon;
    while (!stack.empty()) {
      const int fid = stack.back();
      stack.pop_back();
      if (!faces_[fid].alive || faces_[fid].outside.empty()) continue;

      int apex = -1;
      double far = -1.0;
      for (int p : faces_[fid].outside) {
        const double d = dist(faces_[fid], p);
        if (d > far) {
          far = d;
          apex = p;
        }
      }

      ++stamp;
      visible.clear();
      horizon.clear();
      std::vector<int> bfs{fid};
      faces_[fid].visit = stamp;
      while (!bfs.empty()) {
        const int cur = bfs.back();
        bfs.pop_back();
        visible.push_back(cur);
        const auto v = faces_[cur].v;
        for (int e = 0; e < 3; ++e) {
          const int a = v[e], b = v[(e + 1) % 3];
          const auto it = edges_.find(edge_key(b, a));
          if (it == edges_.end()) throw DegenerateConfiguration("convex hull lost edge adjacency");
          const int nb = it->second;
          if (faces_[nb].visit == stamp) continue;
          if (dist(faces_[nb], apex) > eps_) {
            faces_[nb].visit = stamp;
            bfs.push_back(nb);
          }
        }
      }
      // horizon: edges of visible faces whose twin face is not visible
      for (int id : visible) {
        const auto v = faces_[id].v;
        for (int e = 0; e < 3; ++e) {
          const int a = v[e], b = v[(e + 1) % 3];
          const int nb = edges_.at(edge_key(b, a));
          if (faces_[nb].visit != stamp) horizon.emplace_back(a, b);
        }
      }
      std::vector<int> orphans;
      for (int id : visible) {
        for (int p : faces_[id].outside)
          if (p != apex) orphans.push_back(p);
        faces_[id].outside.clear();
        kill_face(id);
      }
      std::vector<int> created;
      created.reserve(horizon.size());
      for (const auto& [a, b] : horizon) created.push_back(add_face(a, b, apex));
      for (int p : orphans) {
        int target = -1;
        double bestd = eps_;
        for (int id : created) {
          const double d = dist(faces_[id], p);
          if (d > bestd) {
            bestd = d;
            target = id;
          }
        }
        if (target >= 0) faces_[target].outside.push_back(p);
      }
      for (int id : created) stack.push_back(id);
    }
  }

  std::span<const Vec3> pts_;
  double eps_ = 0.0;
  std::vector<Face> faces_;
  std::unordered_map<std::uint64_t, int> edges_;
};

}  // namespace

ConvexHull convex_hull(std::span<const Vec3> points) { return QuickHull(points).run(); }

}  // namespace gridpose
