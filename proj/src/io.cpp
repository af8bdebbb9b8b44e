#include "dglue/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dglue/error.hpp"
#include "json.hpp"

namespace dglue {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int kSchemaVersion = 1;
constexpr char kDepthMagic[4] = {'D', 'G', 'D', 'M'};
constexpr char kMaskMagic[4] = {'D', 'G', 'I', 'M'};

[[noreturn]] void parse_error(const std::string& what) { throw Error(ErrorKind::ParseError, what); }

ordered_json parse_json(const std::string& text, const std::string& origin) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    parse_error(origin + ": " + e.what());
  }
}

// Wraps nlohmann accessors so that schema errors surface as ParseError.
template <class T>
T get(const ordered_json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) parse_error(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    parse_error(std::string("field '") + key + "': " + e.what());
  }
}

void check_schema(const ordered_json& j, const std::string& origin) {
  const int v = get<int>(j, "schema_version");
  if (v != kSchemaVersion) {
    parse_error(origin + ": unsupported schema_version " + std::to_string(v));
  }
}

ordered_json mat_json(const Mat3& m) {
  ordered_json rows = ordered_json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

Mat3 json_mat(const ordered_json& j) {
  if (!j.is_array() || j.size() != 3) parse_error("expected a 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 3) parse_error("expected a 3x3 matrix");
    for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

ordered_json pose_json(const RigidTransform& T) {
  return {{"R", mat_json(T.R)}, {"t", {T.t.x(), T.t.y(), T.t.z()}}};
}

RigidTransform json_pose(const ordered_json& j) {
  RigidTransform T;
  T.R = json_mat(get<ordered_json>(j, "R"));
  const auto t = get<std::vector<double>>(j, "t");
  if (t.size() != 3) parse_error("pose translation needs 3 values");
  T.t = Vec3(t[0], t[1], t[2]);
  if (!T.is_rigid(1e-6)) throw Error(ErrorKind::NonRigidPose, "pose rotation is not orthonormal");
  return T;
}

ordered_json frame_json(const ImageFrame& f) {
  ordered_json kps = ordered_json::array();
  for (const auto& k : f.keypoints) {
    kps.push_back({{"x", k.position.x()}, {"y", k.position.y()},
                   {"descriptor", encode_descriptor(k.descriptor)}});
  }
  return {{"width", f.camera.width},
          {"height", f.camera.height},
          {"intrinsics", mat_json(f.camera.K)},
          {"timestamp", f.timestamp},
          {"keypoints", std::move(kps)}};
}

ImageFrame json_frame(const ordered_json& j) {
  ImageFrame f;
  f.camera.width = get<int>(j, "width");
  f.camera.height = get<int>(j, "height");
  f.camera.K = json_mat(get<ordered_json>(j, "intrinsics"));
  try {
    f.camera.validate();
  } catch (const Error& e) {
    parse_error(std::string("intrinsics: ") + e.what());
  }
  f.timestamp = get<double>(j, "timestamp");
  const auto kps = get<ordered_json>(j, "keypoints");
  if (!kps.is_array()) parse_error("'keypoints' must be an array");
  int dim = -1;
  for (const auto& k : kps) {
    Keypoint kp;
    kp.position = Vec2(get<double>(k, "x"), get<double>(k, "y"));
    kp.descriptor = decode_descriptor(get<std::string>(k, "descriptor"));
    if (dim >= 0 && kp.descriptor.size() != dim) parse_error("descriptor dimensions differ");
    dim = static_cast<int>(kp.descriptor.size());
    kp.index = f.size();
    f.keypoints.push_back(std::move(kp));
  }
  return f;
}

std::vector<bool> json_flags(const ordered_json& j, const char* key, std::size_t n) {
  if (!j.contains(key)) return {};
  const auto v = get<std::vector<bool>>(j, key);
  if (v.size() != n) parse_error(std::string("'") + key + "' length differs from keypoints");
  return v;
}

const char* source_name(LabelSource s) {
  switch (s) {
    case LabelSource::LandmarkProjection: return "landmark-projection";
    case LabelSource::DepthProjection: return "depth-projection";
    case LabelSource::DynamicMask: return "dynamic-mask";
  }
  return "?";
}

LabelSource source_from(const std::string& s) {
  if (s == "landmark-projection") return LabelSource::LandmarkProjection;
  if (s == "depth-projection") return LabelSource::DepthProjection;
  if (s == "dynamic-mask") return LabelSource::DynamicMask;
  parse_error("unknown label source '" + s + "'");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= std::uint32_t(static_cast<unsigned char>(in[at + k])) << (8 * k);
  return v;
}

std::string sidecar(int state, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d.bin", kind, state);
  return buf;
}

void write_depth(const std::string& path, const DepthMap& d) {
  std::string out(kDepthMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(d.width));
  put_u32(out, static_cast<std::uint32_t>(d.height));
  for (float v : d.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  write_text(path, out);
}

std::shared_ptr<DepthMap> read_depth(const std::string& path) {
  const std::string in = read_text(path);
  if (in.size() < 12 || std::memcmp(in.data(), kDepthMagic, 4) != 0) {
    throw Error(ErrorKind::FormatError, path + ": not a depth map (expected DGDM)");
  }
  auto d = std::make_shared<DepthMap>();
  d->width = static_cast<int>(get_u32(in, 4));
  d->height = static_cast<int>(get_u32(in, 8));
  const std::size_t n = static_cast<std::size_t>(d->width) * d->height;
  if (in.size() != 12 + 4 * n) throw Error(ErrorKind::FormatError, path + ": size mismatch");
  d->data.resize(n);
  for (std::size_t i = 0; i < n; ++i) d->data[i] = std::bit_cast<float>(get_u32(in, 12 + 4 * i));
  return d;
}

void write_mask(const std::string& path, const InstanceMask& m) {
  std::string out(kMaskMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(m.width));
  put_u32(out, static_cast<std::uint32_t>(m.height));
  for (auto v : m.data) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
  }
  write_text(path, out);
}

std::shared_ptr<InstanceMask> read_mask(const std::string& path) {
  const std::string in = read_text(path);
  if (in.size() < 12 || std::memcmp(in.data(), kMaskMagic, 4) != 0) {
    throw Error(ErrorKind::FormatError, path + ": not an instance mask (expected DGIM)");
  }
  auto m = std::make_shared<InstanceMask>();
  m->width = static_cast<int>(get_u32(in, 4));
  m->height = static_cast<int>(get_u32(in, 8));
  const std::size_t n = static_cast<std::size_t>(m->width) * m->height;
  if (in.size() != 12 + 2 * n) throw Error(ErrorKind::FormatError, path + ": size mismatch");
  m->data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m->data[i] = static_cast<std::uint16_t>(static_cast<unsigned char>(in[12 + 2 * i]) |
                                            (static_cast<unsigned char>(in[13 + 2 * i]) << 8));
  }
  return m;
}

}  // namespace

std::string encode_descriptor(const Eigen::VectorXd& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(16 * d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(d(i));
    for (int k = 0; k < 8; ++k) {
      const auto byte = static_cast<unsigned>((bits >> (8 * k)) & 0xff);
      out.push_back(kHex[byte >> 4]);
      out.push_back(kHex[byte & 0xf]);
    }
  }
  return out;
}

Eigen::VectorXd decode_descriptor(const std::string& hex) {
  if (hex.size() % 16 != 0) parse_error("descriptor hex length is not a multiple of 16");
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    parse_error(std::string("bad hex digit '") + c + "'");
  };
  Eigen::VectorXd d(static_cast<Eigen::Index>(hex.size() / 16));
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) {
      const std::size_t at = 16 * i + 2 * k;
      bits |= std::uint64_t(nibble(hex[at]) << 4 | nibble(hex[at + 1])) << (8 * k);
    }
    d(i) = std::bit_cast<double>(bits);
  }
  return d;
}

void write_text(const std::string& path, const std::string& contents) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!f) throw Error(ErrorKind::IoError, "write to " + path + " failed");
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_pair_file(const std::string& path, const PairFile& pair) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["state_a"] = pair.state_a;
  j["state_b"] = pair.state_b;
  j["image_a"] = frame_json(pair.a);
  j["image_b"] = frame_json(pair.b);
  if (pair.T_b_a) j["relative_pose"] = pose_json(*pair.T_b_a);
  if (!pair.moving_a.empty() || !pair.moving_b.empty()) {
    j["moving_a"] = pair.moving_a;
    j["moving_b"] = pair.moving_b;
  }
  write_text(path, j.dump(1) + "\n");
}

PairFile read_pair_file(const std::string& path) {
  const ordered_json j = parse_json(read_text(path), path);
  check_schema(j, path);
  PairFile p;
  p.state_a = j.value("state_a", 0);
  p.state_b = j.value("state_b", 1);
  p.a = json_frame(get<ordered_json>(j, "image_a"));
  p.b = json_frame(get<ordered_json>(j, "image_b"));
  if (p.a.size() > 0 && p.b.size() > 0 && p.a.descriptor_dim() != p.b.descriptor_dim()) {
    parse_error(path + ": descriptor dimensions differ between images");
  }
  if (j.contains("relative_pose")) p.T_b_a = json_pose(j["relative_pose"]);
  p.moving_a = json_flags(j, "moving_a", p.a.keypoints.size());
  p.moving_b = json_flags(j, "moving_b", p.b.keypoints.size());
  return p;
}

void write_session(const std::string& dir, const PoseGraphSession& session,
                   const SynthGroundTruth* truth) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir + ": " + ec.message());
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  ordered_json states = ordered_json::array();
  for (std::size_t s = 0; s < session.states.size(); ++s) {
    const SessionState& st = session.states[s];
    ordered_json sj;
    sj["timestamp"] = st.timestamp;
    sj["pose"] = pose_json(st.pose);
    sj["image"] = frame_json(st.frame);
    if (st.depth) {
      sj["depth"] = sidecar(static_cast<int>(s), "depth");
      write_depth((fs::path(dir) / sidecar(static_cast<int>(s), "depth")).string(), *st.depth);
    }
    if (st.mask) {
      sj["mask"] = sidecar(static_cast<int>(s), "mask");
      write_mask((fs::path(dir) / sidecar(static_cast<int>(s), "mask")).string(), *st.mask);
    }
    states.push_back(std::move(sj));
  }
  j["states"] = std::move(states);
  ordered_json lms = ordered_json::array();
  for (const auto& [id, obs] : session.landmarks) {
    ordered_json o = ordered_json::array();
    for (const auto& ob : obs) o.push_back({ob.state, ob.keypoint, ob.pixel.x(), ob.pixel.y()});
    lms.push_back({{"id", id}, {"observations", std::move(o)}});
  }
  j["landmarks"] = std::move(lms);
  write_text((fs::path(dir) / "session.json").string(), j.dump(1) + "\n");

  if (truth) {
    ordered_json g;
    g["schema_version"] = kSchemaVersion;
    g["point_ids"] = truth->point_ids;
    g["instance_ids"] = truth->instance_ids;
    g["moving_instances"] = truth->moving_instances;
    g["static_instances"] = truth->static_instances;
    write_text((fs::path(dir) / "groundtruth.json").string(), g.dump(1) + "\n");
  }
}

PoseGraphSession read_session(const std::string& dir) {
  const std::string path = (fs::path(dir) / "session.json").string();
  const ordered_json j = parse_json(read_text(path), path);
  check_schema(j, path);
  PoseGraphSession session;
  for (const auto& sj : get<ordered_json>(j, "states")) {
    SessionState st;
    st.timestamp = get<double>(sj, "timestamp");
    st.pose = json_pose(get<ordered_json>(sj, "pose"));
    st.frame = json_frame(get<ordered_json>(sj, "image"));
    if (sj.contains("depth")) {
      st.depth = read_depth((fs::path(dir) / get<std::string>(sj, "depth")).string());
    }
    if (sj.contains("mask")) {
      st.mask = read_mask((fs::path(dir) / get<std::string>(sj, "mask")).string());
    }
    session.states.push_back(std::move(st));
  }
  for (const auto& lj : get<ordered_json>(j, "landmarks")) {
    auto& obs = session.landmarks[get<int>(lj, "id")];
    for (const auto& o : get<ordered_json>(lj, "observations")) {
      if (!o.is_array() || o.size() != 4) parse_error("landmark observation needs 4 values");
      obs.push_back({o[0].get<int>(), o[1].get<int>(), Vec2(o[2].get<double>(), o[3].get<double>())});
    }
  }
  session.validate();
  return session;
}

std::optional<SynthGroundTruth> read_groundtruth(const std::string& dir) {
  const fs::path path = fs::path(dir) / "groundtruth.json";
  if (!fs::exists(path)) return std::nullopt;
  const ordered_json j = parse_json(read_text(path.string()), path.string());
  check_schema(j, path.string());
  SynthGroundTruth t;
  t.point_ids = get<std::vector<std::vector<int>>>(j, "point_ids");
  t.instance_ids = get<std::vector<std::vector<int>>>(j, "instance_ids");
  t.moving_instances = get<std::set<int>>(j, "moving_instances");
  t.static_instances = get<std::set<int>>(j, "static_instances");
  return t;
}

void write_labels(const std::string& path, const std::vector<MatchLabelSet>& labels) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  ordered_json arr = ordered_json::array();
  for (const auto& l : labels) {
    ordered_json lj;
    lj["state_a"] = l.state_a;
    lj["state_b"] = l.state_b;
    ordered_json m = ordered_json::array();
    for (std::size_t k = 0; k < l.matches.size(); ++k) {
      m.push_back({l.matches[k].a, l.matches[k].b, source_name(l.match_sources.at(k))});
    }
    lj["matches"] = std::move(m);
    for (int side = 0; side < 2; ++side) {
      const auto& idx = side == 0 ? l.unmatched_a : l.unmatched_b;
      const auto& src = side == 0 ? l.unmatched_a_sources : l.unmatched_b_sources;
      ordered_json u = ordered_json::array();
      for (std::size_t k = 0; k < idx.size(); ++k) u.push_back({idx[k], source_name(src.at(k))});
      lj[side == 0 ? "unmatched_a" : "unmatched_b"] = std::move(u);
    }
    lj["moving_instances"] = l.moving_instances;
    arr.push_back(std::move(lj));
  }
  j["pairs"] = std::move(arr);
  write_text(path, j.dump(1) + "\n");
}

std::vector<MatchLabelSet> read_labels(const std::string& path) {
  const ordered_json j = parse_json(read_text(path), path);
  check_schema(j, path);
  std::vector<MatchLabelSet> out;
  for (const auto& lj : get<ordered_json>(j, "pairs")) {
    MatchLabelSet l;
    l.state_a = get<int>(lj, "state_a");
    l.state_b = get<int>(lj, "state_b");
    for (const auto& m : get<ordered_json>(lj, "matches")) {
      if (!m.is_array() || m.size() != 3) parse_error("match entries are [a, b, source]");
      l.matches.push_back({m[0].get<int>(), m[1].get<int>()});
      l.match_sources.push_back(source_from(m[2].get<std::string>()));
    }
    for (int side = 0; side < 2; ++side) {
      auto& idx = side == 0 ? l.unmatched_a : l.unmatched_b;
      auto& src = side == 0 ? l.unmatched_a_sources : l.unmatched_b_sources;
      for (const auto& u : get<ordered_json>(lj, side == 0 ? "unmatched_a" : "unmatched_b")) {
        if (!u.is_array() || u.size() != 2) parse_error("unmatched entries are [index, source]");
        idx.push_back(u[0].get<int>());
        src.push_back(source_from(u[1].get<std::string>()));
      }
    }
    l.moving_instances = get<std::vector<int>>(lj, "moving_instances");
    out.push_back(std::move(l));
  }
  return out;
}

std::string match_result_json(const MatchResult& result, bool dump_P) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["num_a"] = result.P.rows();
  j["num_b"] = result.P.cols();
  ordered_json m = ordered_json::array();
  for (const auto& s : result.matches) m.push_back({{"a", s.a}, {"b", s.b}, {"score", s.score}});
  j["matches"] = std::move(m);
  if (dump_P) {
    ordered_json rows = ordered_json::array();
    for (Eigen::Index i = 0; i < result.P.rows(); ++i) {
      std::vector<double> r(result.P.cols());
      for (Eigen::Index c = 0; c < result.P.cols(); ++c) r[c] = result.P(i, c);
      rows.push_back(r);
    }
    j["P"] = std::move(rows);
  }
  return j.dump(1) + "\n";
}

}  // namespace dglue
