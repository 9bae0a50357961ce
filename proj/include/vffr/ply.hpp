#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vffr/surface.hpp"

namespace vffr {

/// Binary little-endian PLY. Vertex properties: float x, y, z plus one
/// float property per named scalar channel (alphabetical map order).
/// Inlet/outlet markers are carried in meta.json, not in the PLY.
inline void save_ply(const SurfaceMesh& mesh, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);

  std::ostringstream hdr;
  hdr << "ply\nformat binary_little_endian 1.0\n";
  hdr << "element vertex " << mesh.vertex_count() << "\n";
  hdr << "property float x\nproperty float y\nproperty float z\n";
  for (const auto& [name, ch] : mesh.channels) hdr << "property float " << name << "\n";
  hdr << "element face " << mesh.faces.size() << "\n";
  hdr << "property list uchar int vertex_indices\n";
  hdr << "end_header\n";
  f << hdr.str();

  const int n = mesh.vertex_count();
  std::vector<const std::vector<double>*> chans;
  for (const auto& [name, ch] : mesh.channels) chans.push_back(&ch);
  for (int i = 0; i < n; ++i) {
    float xyz[3] = {static_cast<float>(mesh.vertices[i].x()), static_cast<float>(mesh.vertices[i].y()),
                    static_cast<float>(mesh.vertices[i].z())};
    f.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    for (const auto* ch : chans) {
      float v = static_cast<float>((*ch)[i]);
      f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  for (const auto& face : mesh.faces) {
    uint8_t cnt = 3;
    f.write(reinterpret_cast<const char*>(&cnt), 1);
    int32_t idx[3] = {face[0], face[1], face[2]};
    f.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
}

inline SurfaceMesh load_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(f, line);
  if (line != "ply") throw std::runtime_error(path + ": not a PLY file");
  size_t n_vertex = 0, n_face = 0;
  std::vector<std::string> vprops;
  std::string element;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "end_header") break;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "binary_little_endian") throw std::runtime_error(path + ": unsupported PLY format " + fmt);
    } else if (tok == "element") {
      ss >> element;
      if (element == "vertex") ss >> n_vertex;
      if (element == "face") ss >> n_face;
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      ss >> type >> name;
      if (type != "float") throw std::runtime_error(path + ": unsupported vertex property type " + type);
      vprops.push_back(name);
    }
  }
  if (vprops.size() < 3 || vprops[0] != "x" || vprops[1] != "y" || vprops[2] != "z")
    throw std::runtime_error(path + ": expected x,y,z leading vertex properties");

  SurfaceMesh mesh;
  mesh.vertices.resize(n_vertex);
  for (size_t c = 3; c < vprops.size(); ++c) mesh.channels[vprops[c]].resize(n_vertex);
  std::vector<float> row(vprops.size());
  for (size_t i = 0; i < n_vertex; ++i) {
    f.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
    mesh.vertices[i] = Eigen::Vector3d(row[0], row[1], row[2]);
    for (size_t c = 3; c < vprops.size(); ++c) mesh.channels[vprops[c]][i] = row[c];
  }
  mesh.faces.resize(n_face);
  for (size_t i = 0; i < n_face; ++i) {
    uint8_t cnt = 0;
    f.read(reinterpret_cast<char*>(&cnt), 1);
    if (cnt != 3) throw std::runtime_error(path + ": non-triangle face");
    int32_t idx[3];
    f.read(reinterpret_cast<char*>(idx), sizeof(idx));
    mesh.faces[i] = {idx[0], idx[1], idx[2]};
  }
  if (!f) throw std::runtime_error(path + ": truncated PLY payload");
  return mesh;
}

}  // namespace vffr
