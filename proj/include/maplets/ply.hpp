#pragma once

// ASCII PLY polygon soup: four vertices and one quad face per patch.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "maplets/errors.hpp"
#include "maplets/plane_extract.hpp"

namespace maplets {

struct PolygonMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::vector<std::uint32_t>> faces;
};

inline PolygonMesh patch_mesh(const std::vector<PlanarPatch>& patches) {
  PolygonMesh mesh;
  for (const auto& p : patches) {
    const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
    for (const auto& c : p.corners) mesh.vertices.push_back(c);
    mesh.faces.push_back({base, base + 1, base + 2, base + 3});
  }
  return mesh;
}

inline void write_ply(std::ostream& out, const PolygonMesh& mesh, const std::string& comment = {}) {
  out << "ply\nformat ascii 1.0\n";
  if (!comment.empty()) out << "comment " << comment << '\n';
  out << "element vertex " << mesh.vertices.size() << '\n'
      << "property double x\nproperty double y\nproperty double z\n"
      << "element face " << mesh.faces.size() << '\n'
      << "property list uchar uint vertex_indices\nend_header\n";
  std::ostringstream line;
  line.precision(17);
  for (const auto& v : mesh.vertices) {
    line.str({});
    line << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    out << line.str();
  }
  for (const auto& f : mesh.faces) {
    out << f.size();
    for (auto i : f) out << ' ' << i;
    out << '\n';
  }
}

inline PolygonMesh read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw FormatError("missing ply magic");
  if (!std::getline(in, line) || line != "format ascii 1.0") throw FormatError("only ascii ply is supported");
  std::size_t nv = 0, nf = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") {
      header_done = true;
      break;
    }
    if (word == "element") {
      std::string name;
      std::size_t n = 0;
      if (!(ls >> name >> n)) throw FormatError("bad element line: " + line);
      if (name == "vertex") nv = n;
      else if (name == "face") nf = n;
      else throw FormatError("unexpected element " + name);
    } else if (word != "comment" && word != "property") {
      throw FormatError("unexpected header line: " + line);
    }
  }
  if (!header_done) throw FormatError("ply header is not terminated");
  PolygonMesh mesh;
  mesh.vertices.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    Eigen::Vector3d v;
    if (!(in >> v.x() >> v.y() >> v.z())) throw FormatError("truncated vertex list");
    mesh.vertices.push_back(v);
  }
  for (std::size_t i = 0; i < nf; ++i) {
    std::size_t k = 0;
    if (!(in >> k)) throw FormatError("truncated face list");
    std::vector<std::uint32_t> f(k);
    for (auto& idx : f) {
      if (!(in >> idx) || idx >= nv) throw FormatError("bad face index");
    }
    mesh.faces.push_back(std::move(f));
  }
  return mesh;
}

inline void write_ply(const std::filesystem::path& path, const PolygonMesh& mesh,
                      const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_ply(out, mesh, comment);
}

inline PolygonMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return read_ply(in);
}

}  // namespace maplets
