#include "gridpose/mesh_io.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "gridpose/errors.hpp"

namespace gridpose {
namespace {

struct LineReader {
  std::istream& in;
  std::size_t line_no = 0;

  bool next(std::string& line) {
    if (!std::getline(in, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }
};

void append_polygon(const std::vector<int>& poly, std::vector<std::array<int, 3>>& faces) {
  for (std::size_t i = 1; i + 1 < poly.size(); ++i) faces.push_back({poly[0], poly[i], poly[i + 1]});
}

}  // namespace

ObjectModel read_ply(std::istream& in) {
  LineReader reader{in};
  std::string line;
  if (!reader.next(line) || line != "ply") throw ParseError("missing 'ply' magic", reader.line_no);

  std::size_t vertex_count = 0;
  std::size_t face_count = 0;
  std::vector<std::string> vertex_props;
  std::string current_element;
  bool ascii = false;
  bool face_has_list = false;
  while (true) {
    if (!reader.next(line)) throw ParseError("unexpected end of header", reader.line_no);
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key.empty() || key == "comment" || key == "obj_info") continue;
    if (key == "end_header") break;
    if (key == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") throw ParseError("only ascii PLY is supported, got " + fmt, reader.line_no);
      ascii = true;
    } else if (key == "element") {
      std::size_t count = 0;
      ss >> current_element >> count;
      if (ss.fail()) throw ParseError("malformed element line", reader.line_no);
      if (current_element == "vertex") vertex_count = count;
      else if (current_element == "face") face_count = count;
      else if (count != 0) throw ParseError("unsupported element " + current_element, reader.line_no);
    } else if (key == "property") {
      std::string type;
      ss >> type;
      if (type == "list") {
        std::string count_type, item_type, name;
        ss >> count_type >> item_type >> name;
        if (current_element != "face") throw ParseError("list property outside face element", reader.line_no);
        face_has_list = true;
      } else {
        std::string name;
        ss >> name;
        if (ss.fail()) throw ParseError("malformed property line", reader.line_no);
        if (current_element == "vertex") vertex_props.push_back(name);
      }
    } else {
      throw ParseError("unknown header keyword '" + key + "'", reader.line_no);
    }
  }
  if (!ascii) throw ParseError("missing format line", reader.line_no);
  const auto find_prop = [&](const char* name) -> std::size_t {
    auto it = std::find(vertex_props.begin(), vertex_props.end(), name);
    if (it == vertex_props.end()) throw ParseError(std::string("vertex property missing: ") + name, reader.line_no);
    return static_cast<std::size_t>(it - vertex_props.begin());
  };
  const std::size_t ix = find_prop("x"), iy = find_prop("y"), iz = find_prop("z");
  if (face_count > 0 && !face_has_list) throw ParseError("face element without vertex_indices list", reader.line_no);

  std::vector<Vec3> vertices;
  vertices.reserve(vertex_count);
  std::vector<double> values(vertex_props.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!reader.next(line)) throw ParseError("unexpected end of vertex data", reader.line_no);
    std::istringstream ss(line);
    for (auto& val : values) {
      if (!(ss >> val)) throw ParseError("malformed vertex line", reader.line_no);
    }
    vertices.emplace_back(values[ix], values[iy], values[iz]);
  }
  std::vector<std::array<int, 3>> faces;
  for (std::size_t f = 0; f < face_count; ++f) {
    if (!reader.next(line)) throw ParseError("unexpected end of face data", reader.line_no);
    std::istringstream ss(line);
    int count = 0;
    if (!(ss >> count) || count < 3) throw ParseError("malformed face line", reader.line_no);
    std::vector<int> poly(count);
    for (auto& idx : poly) {
      if (!(ss >> idx)) throw ParseError("malformed face line", reader.line_no);
      if (idx < 0 || static_cast<std::size_t>(idx) >= vertex_count) {
        throw ParseError("face index out of range", reader.line_no);
      }
    }
    append_polygon(poly, faces);
  }
  if (vertices.empty()) throw ParseError("mesh has no vertices", reader.line_no);
  return ObjectModel::from_mesh(std::move(vertices), std::move(faces));
}

ObjectModel read_obj(std::istream& in) {
  LineReader reader{in};
  std::string line;
  std::vector<Vec3> vertices;
  std::vector<std::vector<int>> polys;
  std::vector<std::size_t> poly_lines;
  while (reader.next(line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) throw ParseError("malformed vertex line", reader.line_no);
      vertices.emplace_back(x, y, z);
    } else if (key == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ss >> tok) {
        const std::string head = tok.substr(0, tok.find('/'));
        int idx = 0;
        try {
          std::size_t used = 0;
          idx = std::stoi(head, &used);
          if (used != head.size()) throw std::invalid_argument(head);
        } catch (const std::exception&) {
          throw ParseError("malformed face index '" + tok + "'", reader.line_no);
        }
        const int n = static_cast<int>(vertices.size());
        idx = idx < 0 ? n + idx : idx - 1;
        if (idx < 0 || idx >= n) throw ParseError("face index out of range", reader.line_no);
        poly.push_back(idx);
      }
      if (poly.size() < 3) throw ParseError("face with fewer than 3 vertices", reader.line_no);
      polys.push_back(std::move(poly));
    }
    // other records (vn, vt, o, g, usemtl, s, comments) are ignored
  }
  if (vertices.empty()) throw ParseError("mesh has no vertices", reader.line_no);
  std::vector<std::array<int, 3>> faces;
  for (const auto& p : polys) append_polygon(p, faces);
  return ObjectModel::from_mesh(std::move(vertices), std::move(faces));
}

ObjectModel load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open mesh file " + path.string());
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ply") return read_ply(in);
  if (ext == ".obj") return read_obj(in);
  throw InvalidArgument("unsupported mesh extension '" + ext + "'");
}

void write_ply(std::ostream& out, const ObjectModel& model) {
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << model.vertices.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "element face " << model.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  out << std::setprecision(17);
  for (const auto& v : model.vertices) out << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& f : model.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

void save_ply(const std::filesystem::path& path, const ObjectModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write mesh file " + path.string());
  write_ply(out, model);
}

}  // namespace gridpose
