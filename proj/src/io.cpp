// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/image_codec.hpp>
#include <endosplat/io.hpp>

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace endosplat {

using json = nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "file I/O assumes a little-endian host");

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  return bytes;
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// .gsc

namespace {

void append_floats(std::vector<std::uint8_t>& out, const double* values, std::size_t n) {
  const std::size_t start = out.size();
  out.resize(start + n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(values[i]);
    std::memcpy(out.data() + start + i * 4, &f, 4);
  }
}

class FloatReader {
 public:
  FloatReader(std::span<const std::uint8_t> bytes, std::size_t offset) : bytes_(bytes), pos_(offset) {}
  double next() {
    float f;
    std::memcpy(&f, bytes_.data() + pos_, 4);
    pos_ += 4;
    return static_cast<double>(f);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

}  // namespace

std::vector<std::uint8_t> encode_cloud(const GaussianCloud& cloud) {
  cloud.validate();
  const nlohmann::ordered_json header = {{"magic", "GSC1"}, {"count", cloud.size()}, {"sh_degree", cloud.sh_degree()}};
  const std::string line = header.dump() + "\n";
  std::vector<std::uint8_t> out(line.begin(), line.end());
  const std::size_t n = cloud.size();
  out.reserve(out.size() + n * (11 + 3 * cloud.coeffs_per_channel()) * 4);
  for (const auto& p : cloud.positions) append_floats(out, p.data(), 3);
  for (const auto& q : cloud.rotations) append_floats(out, q.data(), 4);
  for (const auto& s : cloud.scales) append_floats(out, s.data(), 3);
  append_floats(out, cloud.opacities.data(), n);
  append_floats(out, cloud.sh.data(), cloud.sh.size());
  return out;
}

GaussianCloud decode_cloud(std::span<const std::uint8_t> bytes) {
  const auto newline = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
  if (newline == bytes.end()) throw FormatError("missing header line terminator", bytes.size());
  const std::size_t header_len = static_cast<std::size_t>(newline - bytes.begin());
  const std::string text(bytes.begin(), newline);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!header.is_object() || header.value("magic", std::string{}) != "GSC1") {
    throw FormatError("header magic is not GSC1", 0);
  }
  if (!header.contains("count") || !header["count"].is_number_unsigned()) {
    throw FormatError("header 'count' must be a nonnegative integer", 0);
  }
  if (!header.contains("sh_degree") || !header["sh_degree"].is_number_integer()) {
    throw FormatError("header 'sh_degree' must be an integer", 0);
  }
  const auto count = header["count"].get<std::size_t>();
  const int degree = header["sh_degree"].get<int>();
  if (degree < 0 || degree > kMaxShDegree) throw FormatError("header 'sh_degree' must be in 0..3", 0);

  const std::size_t per_record = 11 + 3 * static_cast<std::size_t>(sh_coeff_count(degree));
  const std::size_t payload = bytes.size() - header_len - 1;
  if (payload != count * per_record * 4) {
    std::ostringstream msg;
    msg << "header declares " << count << " Gaussians (" << count * per_record * 4
        << " payload bytes) but the file holds " << payload << " payload bytes";
    if (payload % (per_record * 4) == 0) msg << " (" << payload / (per_record * 4) << " records)";
    throw StructuralError(msg.str());
  }

  GaussianCloud cloud(count, degree);
  FloatReader r(bytes, header_len + 1);
  for (auto& p : cloud.positions) for (int k = 0; k < 3; ++k) p[k] = r.next();
  for (auto& q : cloud.rotations) for (int k = 0; k < 4; ++k) q[k] = r.next();
  for (auto& s : cloud.scales) for (int k = 0; k < 3; ++k) s[k] = r.next();
  for (auto& o : cloud.opacities) o = r.next();
  for (auto& c : cloud.sh) c = r.next();
  // Renormalize only quaternions that are off by more than float32 rounding,
  // so files written from unit quaternions load bit-exactly.
  for (auto& q : cloud.rotations) {
    if (std::abs(q.norm() - 1.0) > 1e-6) q = normalized_quat(q);
  }
  return cloud;
}

void save_cloud(const GaussianCloud& cloud, const fs::path& path) { write_file_bytes(path, encode_cloud(cloud)); }

GaussianCloud load_cloud(const fs::path& path) { return decode_cloud(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// PFM

void write_pfm(const Image& image, const fs::path& path) {
  if (image.channels() != 1 && image.channels() != 3) throw ArgumentError("PFM holds 1 or 3 channels");
  std::ostringstream head;
  head << (image.channels() == 3 ? "PF" : "Pf") << "\n" << image.width() << " " << image.height() << "\n-1.0\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  const std::size_t row = static_cast<std::size_t>(image.width()) * image.channels();
  // PFM rows run bottom to top.
  for (int y = image.height() - 1; y >= 0; --y) {
    append_floats(out, image.data().data() + static_cast<std::size_t>(y) * row, row);
  }
  write_file_bytes(path, out);
}

Image read_pfm(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("truncated PFM header", start);
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  const std::string magic = token();
  int channels = 0;
  if (magic == "PF") channels = 3;
  else if (magic == "Pf") channels = 1;
  else throw FormatError("not a PFM file", 0);
  int w = 0, h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    scale = std::stod(token());
  } catch (const std::logic_error&) {
    throw FormatError("malformed PFM header", pos);
  }
  if (scale >= 0.0) throw FormatError("only little-endian PFM (negative scale) is supported", pos);
  ++pos;  // single whitespace after the scale
  const std::size_t row = static_cast<std::size_t>(w) * channels;
  if (bytes.size() - pos != row * h * 4) throw StructuralError("PFM payload size does not match header");
  Image img(w, h, channels);
  FloatReader r(bytes, pos);
  for (int y = h - 1; y >= 0; --y) {
    for (std::size_t i = 0; i < row; ++i) img.data()[static_cast<std::size_t>(y) * row + i] = r.next();
  }
  return img;
}

// ---------------------------------------------------------------------------
// PLY

namespace {

struct PlyProperty {
  std::string type;
  std::string name;
};

std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw FormatError("unsupported PLY property type '" + t + "'", 0);
}

double ply_read_binary(const std::uint8_t* p, const std::string& t) {
  auto load = [p]<typename T>(T) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return load(std::int8_t{});
  if (t == "uchar" || t == "uint8") return load(std::uint8_t{});
  if (t == "short" || t == "int16") return load(std::int16_t{});
  if (t == "ushort" || t == "uint16") return load(std::uint16_t{});
  if (t == "int" || t == "int32") return load(std::int32_t{});
  if (t == "uint" || t == "uint32") return load(std::uint32_t{});
  if (t == "float" || t == "float32") return load(float{});
  return load(double{});
}

bool is_integer_type(const std::string& t) {
  return t != "float" && t != "float32" && t != "double" && t != "float64";
}

}  // namespace

PointCloud read_ply(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    if (pos >= bytes.size()) throw FormatError("truncated PLY header", start);
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
    ++pos;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  if (next_line() != "ply") throw FormatError("missing 'ply' magic", 0);
  bool binary = false;
  std::size_t vertex_count = 0;
  bool in_vertex = false, vertex_seen = false, other_before_vertex = false;
  std::vector<PlyProperty> props;
  for (;;) {
    const std::size_t line_start = pos;
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw FormatError("unsupported PLY format '" + fmt + "'", line_start);
    } else if (kw == "element") {
      std::string name;
      std::size_t n = 0;
      ls >> name >> n;
      in_vertex = name == "vertex";
      if (in_vertex) {
        vertex_count = n;
        vertex_seen = true;
      } else if (!vertex_seen) {
        other_before_vertex = true;
      }
    } else if (kw == "property" && in_vertex) {
      PlyProperty p;
      ls >> p.type;
      if (p.type == "list") throw FormatError("list properties on vertices are not supported", line_start);
      ls >> p.name;
      props.push_back(p);
    }
  }
  if (!vertex_seen) throw FormatError("PLY has no vertex element", pos);
  if (other_before_vertex) throw FormatError("PLY vertex element must come first", pos);

  auto index_of = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i) if (props[i].name == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
  if (ix < 0 || iy < 0 || iz < 0) throw FormatError("PLY vertices need x, y, z", pos);

  PointCloud pc;
  pc.positions.resize(vertex_count);
  pc.colors.assign(vertex_count, Vec3::Constant(0.5));
  std::vector<double> values(props.size());
  auto color_of = [&](int idx) {
    if (idx < 0) return 0.5;
    return is_integer_type(props[idx].type) ? values[idx] / 255.0 : values[idx];
  };
  if (binary) {
    std::size_t stride = 0;
    std::vector<std::size_t> offs;
    for (const auto& p : props) {
      offs.push_back(stride);
      stride += ply_type_size(p.type);
    }
    if (bytes.size() - pos < stride * vertex_count) throw StructuralError("PLY vertex data is truncated");
    for (std::size_t v = 0; v < vertex_count; ++v) {
      const std::uint8_t* base = bytes.data() + pos + v * stride;
      for (std::size_t k = 0; k < props.size(); ++k) values[k] = ply_read_binary(base + offs[k], props[k].type);
      pc.positions[v] = Vec3(values[ix], values[iy], values[iz]);
      pc.colors[v] = Vec3(color_of(ir), color_of(ig), color_of(ib));
    }
  } else {
    std::istringstream body(std::string(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end()));
    for (std::size_t v = 0; v < vertex_count; ++v) {
      for (auto& x : values) {
        if (!(body >> x)) throw StructuralError("PLY vertex data is truncated");
      }
      pc.positions[v] = Vec3(values[ix], values[iy], values[iz]);
      pc.colors[v] = Vec3(color_of(ir), color_of(ig), color_of(ib));
    }
  }
  return pc;
}

void write_ply(const PointCloud& points, const fs::path& path, bool binary) {
  if (points.colors.size() != points.positions.size()) throw StructuralError("point colors and positions differ in length");
  std::ostringstream head;
  head << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
       << "element vertex " << points.positions.size() << "\n"
       << "property float x\nproperty float y\nproperty float z\n"
       << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  std::ostringstream ascii;
  for (std::size_t i = 0; i < points.positions.size(); ++i) {
    std::uint8_t rgb[3];
    for (int k = 0; k < 3; ++k) {
      rgb[k] = static_cast<std::uint8_t>(std::lround(std::clamp(points.colors[i][k], 0.0, 1.0) * 255.0));
    }
    if (binary) {
      append_floats(out, points.positions[i].data(), 3);
      out.insert(out.end(), rgb, rgb + 3);
    } else {
      ascii << static_cast<float>(points.positions[i].x()) << ' ' << static_cast<float>(points.positions[i].y()) << ' '
            << static_cast<float>(points.positions[i].z()) << ' ' << int(rgb[0]) << ' ' << int(rgb[1]) << ' '
            << int(rgb[2]) << '\n';
    }
  }
  if (!binary) {
    const std::string body = ascii.str();
    out.insert(out.end(), body.begin(), body.end());
  }
  write_file_bytes(path, out);
}

// ---------------------------------------------------------------------------
// Scene bundle

SceneBundle load_scene(const fs::path& dir) {
  const fs::path cameras_path = dir / "cameras.json";
  if (!fs::exists(cameras_path)) throw NotFoundError("scene has no cameras.json: " + dir.string());
  json cams;
  try {
    const auto bytes = read_file_bytes(cameras_path);
    cams = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed cameras.json: ") + e.what(), e.byte);
  }
  if (!cams.is_array()) throw FormatError("cameras.json must hold an array", 0);

  SceneBundle bundle;
  for (const auto& c : cams) {
    TrainingRecord rec;
    try {
      rec.camera.fx = c.at("fx").get<double>();
      rec.camera.fy = c.at("fy").get<double>();
      rec.camera.cx = c.at("cx").get<double>();
      rec.camera.cy = c.at("cy").get<double>();
      rec.camera.width = c.at("width").get<int>();
      rec.camera.height = c.at("height").get<int>();
      const auto q = c.at("qvec").get<std::vector<double>>();
      const auto t = c.at("tvec").get<std::vector<double>>();
      if (q.size() != 4 || t.size() != 3) throw StructuralError("qvec needs 4 and tvec 3 entries");
      rec.camera.qvec = normalized_quat(Quat(q[0], q[1], q[2], q[3]));
      rec.camera.tvec = Vec3(t[0], t[1], t[2]);
      const std::string image = c.at("image").get<std::string>();
      rec.name = c.value("name", fs::path(image).stem().string());
      rec.rgb = read_png(dir / image);
      if (rec.rgb.channels() == 1) {
        Image rgb(rec.rgb.width(), rec.rgb.height(), 3);
        for (std::size_t i = 0; i < rec.rgb.pixel_count(); ++i)
          for (int k = 0; k < 3; ++k) rgb.data()[i * 3 + k] = rec.rgb.data()[i];
        rec.rgb = std::move(rgb);
      }
      if (c.contains("depth") && c["depth"].is_string()) rec.depth = read_pfm(dir / c["depth"].get<std::string>());
    } catch (const json::exception& e) {
      throw FormatError(std::string("invalid camera record: ") + e.what(), 0);
    }
    bundle.records.push_back(std::move(rec));
  }
  if (fs::exists(dir / "points3d.ply")) bundle.init_points = read_ply(dir / "points3d.ply");
  if (fs::exists(dir / "splits.json")) {
    const auto bytes = read_file_bytes(dir / "splits.json");
    const json splits = json::parse(bytes.begin(), bytes.end());
    for (const auto& [name, s] : splits.items()) {
      bundle.splits[name] = Split{s.at("train").get<std::vector<int>>(), s.at("test").get<std::vector<int>>()};
    }
  }
  bundle.validate();
  return bundle;
}

void save_scene(const SceneBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir / "images");
  json cams = json::array();
  for (std::size_t i = 0; i < bundle.records.size(); ++i) {
    const auto& r = bundle.records[i];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%05zu", i);
    const std::string image = std::string("images/") + stem + ".png";
    write_png(r.rgb, dir / image);
    json rec = {{"name", r.name.empty() ? std::string(stem) : r.name},
                {"fx", r.camera.fx}, {"fy", r.camera.fy}, {"cx", r.camera.cx}, {"cy", r.camera.cy},
                {"width", r.camera.width}, {"height", r.camera.height},
                {"qvec", {r.camera.qvec[0], r.camera.qvec[1], r.camera.qvec[2], r.camera.qvec[3]}},
                {"tvec", {r.camera.tvec[0], r.camera.tvec[1], r.camera.tvec[2]}},
                {"image", image}, {"depth", nullptr}};
    if (r.depth) {
      const std::string depth = std::string("depths/") + stem + ".pfm";
      write_pfm(*r.depth, dir / depth);
      rec["depth"] = depth;
    }
    cams.push_back(rec);
  }
  const std::string text = cams.dump(2);
  write_file_bytes(dir / "cameras.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  if (bundle.init_points) write_ply(*bundle.init_points, dir / "points3d.ply");
  if (!bundle.splits.empty()) {
    json splits = json::object();
    for (const auto& [name, s] : bundle.splits) splits[name] = {{"train", s.train}, {"test", s.test}};
    const std::string st = splits.dump(2);
    write_file_bytes(dir / "splits.json", std::span(reinterpret_cast<const std::uint8_t*>(st.data()), st.size()));
  }
}

}  // namespace endosplat
