#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <type_traits>

#include "dglue/error.hpp"
#include "dglue/model.hpp"

namespace dglue {

namespace {

constexpr char kMagic[4] = {'D', 'G', 'W', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void le(T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    bytes(buf, sizeof(T));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > s_.size()) throw Error(ErrorKind::FormatError, "DGW1 file is truncated");
    std::memcpy(p, s_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T le() {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_weights(const ModelParams& params) {
  const ModelConfig& c = params.config;
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kVersion);
  w.le<std::int32_t>(c.descriptor_dim);
  w.le<std::int32_t>(c.embed_dim);
  w.le<std::int32_t>(c.num_rounds);
  w.le<std::int32_t>(c.num_heads);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.mlp_dims.size()));
  for (int d : c.mlp_dims) w.le<std::int32_t>(d);
  w.le<double>(c.assign_threshold);
  w.le<double>(c.pairnorm_scale);
  params.visit([&w](const std::string&, const double* data, Eigen::Index r, Eigen::Index cols) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(r));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(cols));
    for (Eigen::Index i = 0; i < r * cols; ++i) w.le<double>(data[i]);
  });
  return w.take();
}

ModelParams deserialize_weights(const std::string& bytes) {
  Reader r(bytes);
  char magic[4] = {};
  if (bytes.size() < 4) throw Error(ErrorKind::FormatError, "not a DGW1 weights file");
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorKind::FormatError, "bad magic bytes: expected DGW1");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) {
    throw Error(ErrorKind::FormatError,
                "unsupported DGW1 version " + std::to_string(version));
  }
  ModelConfig c;
  c.descriptor_dim = r.le<std::int32_t>();
  c.embed_dim = r.le<std::int32_t>();
  c.num_rounds = r.le<std::int32_t>();
  c.num_heads = r.le<std::int32_t>();
  const auto n_mlp = r.le<std::uint32_t>();
  if (n_mlp > 64) throw Error(ErrorKind::FormatError, "DGW1 header has too many MLP layers");
  c.mlp_dims.resize(n_mlp);
  for (auto& d : c.mlp_dims) d = r.le<std::int32_t>();
  c.assign_threshold = r.le<double>();
  c.pairnorm_scale = r.le<double>();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::FormatError, std::string("DGW1 header: ") + e.what());
  }

  ModelParams p = ModelParams::zeros(c);
  p.visit([&r](const std::string& name, double* data, Eigen::Index rows, Eigen::Index cols) {
    const auto fr = r.le<std::uint32_t>();
    const auto fc = r.le<std::uint32_t>();
    if (fr != rows || fc != cols) {
      throw Error(ErrorKind::FormatError, "DGW1 block " + name + " has shape " +
                                              std::to_string(fr) + "x" + std::to_string(fc) +
                                              ", expected " + std::to_string(rows) + "x" +
                                              std::to_string(cols));
    }
    for (Eigen::Index i = 0; i < rows * cols; ++i) data[i] = r.le<double>();
  });
  if (!r.done()) throw Error(ErrorKind::FormatError, "trailing bytes after DGW1 parameters");
  return p;
}

void save_weights(const ModelParams& params, const std::string& path) {
  const std::string bytes = serialize_weights(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::IoError, "failed writing " + path);
}

ModelParams load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_weights(ss.str());
}

}  // namespace dglue
