#include "osaka/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "osaka/errors.hpp"

namespace osaka {

namespace {

constexpr char kMagic[4] = {'O', 'S', 'K', 'A'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 4;
};

}  // namespace

std::string encode_checkpoint(const ModelParams& params) {
  const NetSpec& s = params.spec;
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.input_dim));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.hidden_dims.size()));
  for (int h : s.hidden_dims) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.output_dim));
  put_le<std::uint32_t>(out, s.activation == Activation::relu ? 0u : 1u);
  put_le<std::uint32_t>(out, s.shared_inner_lr ? 1u : 0u);
  put_le<std::uint64_t>(out, s.seed);
  put_le<double>(out, s.inner_lr_init);
  const Vector flat = flatten(params);
  for (Eigen::Index i = 0; i < flat.size(); ++i) put_le<double>(out, flat(i));
  return out;
}

ModelParams decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an OSKA checkpoint");
  Reader r(bytes);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  NetSpec s;
  s.input_dim = static_cast<int>(r.get<std::uint32_t>());
  const auto n_hidden = r.get<std::uint32_t>();
  if (n_hidden > 1024) throw FormatError("implausible hidden layer count " + std::to_string(n_hidden));
  s.hidden_dims.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) s.hidden_dims.push_back(static_cast<int>(r.get<std::uint32_t>()));
  s.output_dim = static_cast<int>(r.get<std::uint32_t>());
  const auto act = r.get<std::uint32_t>();
  if (act > 1) throw FormatError("unknown activation tag " + std::to_string(act));
  s.activation = act == 0 ? Activation::relu : Activation::tanh;
  s.shared_inner_lr = r.get<std::uint32_t>() != 0;
  s.seed = r.get<std::uint64_t>();
  s.inner_lr_init = r.get<double>();
  try {
    validate(s);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  ModelParams p = init_params(s);
  Vector flat(p.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = r.get<double>();
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  unflatten(p, flat);
  return p;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("checkpoint '" + path + "' not found");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace osaka
