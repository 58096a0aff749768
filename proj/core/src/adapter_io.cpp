#include "hta/adapter_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace hta {

namespace {

using nlohmann::json;

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (std::size_t i = 0; i < v.dim(); ++i) arr.push_back(v[i]);
  return arr;
}

Vector vector_from_json(const json& arr) {
  Vector v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

json matrix_to_json(const DenseMatrix& m) {
  json arr = json::array();
  for (double x : m.values()) arr.push_back(x);
  return arr;
}

DenseMatrix matrix_from_json(const json& arr, std::size_t rows, std::size_t cols) {
  if (arr.size() != rows * cols) throw ConfigError("adapter json: array length mismatch");
  DenseMatrix m(rows, cols);
  std::size_t k = 0;
  for (double& x : m.values()) x = arr[k++].get<double>();
  return m;
}

// ---- binary primitives, little-endian regardless of host order ----

void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  put_bytes(out, buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw ConfigError("adapter binary: truncated stream");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

void put_f64(std::ostream& out, double x) { put_le(out, std::bit_cast<std::uint64_t>(x)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

void put_array(std::ostream& out, std::span<const double> xs) {
  put_le<std::uint64_t>(out, xs.size());
  for (double x : xs) put_f64(out, x);
}

std::vector<double> get_array(std::istream& in) {
  const auto n = get_le<std::uint64_t>(in);
  if (n > (1ull << 32)) throw ConfigError("adapter binary: implausible array length");
  std::vector<double> xs(n);
  for (double& x : xs) x = get_f64(in);
  return xs;
}

constexpr char kMagic[4] = {'H', 'T', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;

std::uint8_t activation_code(Activation a) {
  switch (a) {
    case Activation::relu: return 0;
    case Activation::gelu: return 1;
    case Activation::identity: return 2;
  }
  throw ConfigError("activation_code: unknown activation");
}

Activation activation_from_code(std::uint8_t c) {
  switch (c) {
    case 0: return Activation::relu;
    case 1: return Activation::gelu;
    case 2: return Activation::identity;
  }
  throw ConfigError("adapter binary: bad activation code");
}

}  // namespace

// ---- JSON --------------------------------------------------------------------

std::string adapter_to_json(const AnyAdapter& a) {
  json doc;
  doc["version"] = 1;
  if (const auto* hta = std::get_if<HtaAdapter>(&a)) {
    hta->validate();
    doc["kind"] = "hta";
    doc["dim"] = hta->dim;
    doc["r"] = hta->rank_r;
    doc["normalize_v"] = hta->normalize_v;
    doc["v_left"] = vector_to_json(hta->v_left);
    doc["v_right"] = vector_to_json(hta->v_right);
    doc["d"] = vector_to_json(hta->d);
    if (hta->lowrank) {
      doc["w_down"] = matrix_to_json(hta->lowrank->w_down);
      doc["w_up"] = matrix_to_json(hta->lowrank->w_up);
    }
  } else if (const auto* lora = std::get_if<LoraAdapter>(&a)) {
    lora->validate();
    doc["kind"] = "lora";
    doc["dim_in"] = lora->w_down.rows();
    doc["dim_out"] = lora->w_up.cols();
    doc["r"] = lora->rank_r;
    doc["w_down"] = matrix_to_json(lora->w_down);
    doc["w_up"] = matrix_to_json(lora->w_up);
  } else {
    const auto& bn = std::get<BottleneckAdapter>(a);
    bn.validate();
    doc["kind"] = "bottleneck";
    doc["dim"] = bn.w_down.rows();
    doc["r"] = bn.w_down.cols();
    doc["activation"] = activation_name(bn.activation);
    doc["w_down"] = matrix_to_json(bn.w_down);
    doc["w_up"] = matrix_to_json(bn.w_up);
  }
  return doc.dump();
}

AnyAdapter adapter_from_json(const std::string& text) {
  const json doc = json::parse(text);
  if (doc.at("version").get<int>() != 1) throw ConfigError("adapter json: unknown version");
  const std::string kind = doc.at("kind").get<std::string>();
  if (kind == "hta") {
    HtaAdapter a;
    a.dim = doc.at("dim").get<std::size_t>();
    a.rank_r = doc.at("r").get<std::size_t>();
    a.normalize_v = doc.at("normalize_v").get<bool>();
    a.v_left = vector_from_json(doc.at("v_left"));
    a.v_right = vector_from_json(doc.at("v_right"));
    a.d = vector_from_json(doc.at("d"));
    if (a.rank_r > 0) {
      a.lowrank = LowRankPair{matrix_from_json(doc.at("w_down"), a.dim, a.rank_r),
                              matrix_from_json(doc.at("w_up"), a.rank_r, a.dim)};
    }
    a.validate();
    return a;
  }
  if (kind == "lora") {
    LoraAdapter a;
    const auto dim_in = doc.at("dim_in").get<std::size_t>();
    const auto dim_out = doc.at("dim_out").get<std::size_t>();
    a.rank_r = doc.at("r").get<std::size_t>();
    a.w_down = matrix_from_json(doc.at("w_down"), dim_in, a.rank_r);
    a.w_up = matrix_from_json(doc.at("w_up"), a.rank_r, dim_out);
    a.validate();
    return a;
  }
  if (kind == "bottleneck") {
    BottleneckAdapter a;
    const auto dim = doc.at("dim").get<std::size_t>();
    const auto r = doc.at("r").get<std::size_t>();
    a.activation = activation_from_name(doc.at("activation").get<std::string>());
    a.w_down = matrix_from_json(doc.at("w_down"), dim, r);
    a.w_up = matrix_from_json(doc.at("w_up"), r, dim);
    a.validate();
    return a;
  }
  throw ConfigError("adapter json: unknown kind '" + kind + "'");
}

void save_adapter_json(const AnyAdapter& a, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << adapter_to_json(a) << '\n';
}

AnyAdapter load_adapter_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return adapter_from_json(buf.str());
}

// ---- binary --------------------------------------------------------------------

void write_adapter_binary(const AnyAdapter& a, std::ostream& out) {
  put_bytes(out, kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);

  std::uint8_t kind = 0, flags = 0;
  std::uint32_t dim_in = 0, dim_out = 0, r = 0;
  std::span<const double> v_left, v_right, d, w_down, w_up;

  if (const auto* hta = std::get_if<HtaAdapter>(&a)) {
    hta->validate();
    kind = 0;
    flags = hta->normalize_v ? 1 : 0;
    dim_in = dim_out = static_cast<std::uint32_t>(hta->dim);
    r = static_cast<std::uint32_t>(hta->rank_r);
    v_left = hta->v_left.values();
    v_right = hta->v_right.values();
    d = hta->d.values();
    if (hta->lowrank) {
      w_down = hta->lowrank->w_down.values();
      w_up = hta->lowrank->w_up.values();
    }
  } else if (const auto* lora = std::get_if<LoraAdapter>(&a)) {
    lora->validate();
    kind = 1;
    dim_in = static_cast<std::uint32_t>(lora->w_down.rows());
    dim_out = static_cast<std::uint32_t>(lora->w_up.cols());
    r = static_cast<std::uint32_t>(lora->rank_r);
    w_down = lora->w_down.values();
    w_up = lora->w_up.values();
  } else {
    const auto& bn = std::get<BottleneckAdapter>(a);
    bn.validate();
    kind = 2;
    flags = static_cast<std::uint8_t>(activation_code(bn.activation) << 1);
    dim_in = dim_out = static_cast<std::uint32_t>(bn.w_down.rows());
    r = static_cast<std::uint32_t>(bn.w_down.cols());
    w_down = bn.w_down.values();
    w_up = bn.w_up.values();
  }

  put_le(out, kind);
  put_le(out, flags);
  put_le(out, dim_in);
  put_le(out, dim_out);
  put_le(out, r);
  put_array(out, v_left);
  put_array(out, v_right);
  put_array(out, d);
  put_array(out, w_down);
  put_array(out, w_up);
  if (!out) throw ConfigError("adapter binary: write failed");
}

AnyAdapter read_adapter_binary(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ConfigError("adapter binary: bad magic");
  }
  if (get_le<std::uint32_t>(in) != kVersion) throw ConfigError("adapter binary: unknown version");
  const auto kind = get_le<std::uint8_t>(in);
  const auto flags = get_le<std::uint8_t>(in);
  const auto dim_in = get_le<std::uint32_t>(in);
  const auto dim_out = get_le<std::uint32_t>(in);
  const auto r = get_le<std::uint32_t>(in);
  const std::vector<double> v_left = get_array(in);
  const std::vector<double> v_right = get_array(in);
  const std::vector<double> d = get_array(in);
  const std::vector<double> w_down = get_array(in);
  const std::vector<double> w_up = get_array(in);

  const auto fill_vector = [](const std::vector<double>& src) {
    Vector v(src.size());
    std::memcpy(v.data(), src.data(), src.size() * sizeof(double));
    return v;
  };
  const auto fill_matrix = [](const std::vector<double>& src, std::size_t rows,
                              std::size_t cols) {
    if (src.size() != rows * cols) throw ConfigError("adapter binary: array length mismatch");
    DenseMatrix m(rows, cols);
    std::memcpy(m.data(), src.data(), src.size() * sizeof(double));
    return m;
  };

  if (kind == 0) {
    HtaAdapter a;
    a.dim = dim_in;
    a.rank_r = r;
    a.normalize_v = (flags & 1) != 0;
    a.v_left = fill_vector(v_left);
    a.v_right = fill_vector(v_right);
    a.d = fill_vector(d);
    if (r > 0) a.lowrank = LowRankPair{fill_matrix(w_down, dim_in, r), fill_matrix(w_up, r, dim_in)};
    a.validate();
    return a;
  }
  if (kind == 1) {
    LoraAdapter a;
    a.rank_r = r;
    a.w_down = fill_matrix(w_down, dim_in, r);
    a.w_up = fill_matrix(w_up, r, dim_out);
    a.validate();
    return a;
  }
  if (kind == 2) {
    BottleneckAdapter a;
    a.activation = activation_from_code(static_cast<std::uint8_t>(flags >> 1));
    a.w_down = fill_matrix(w_down, dim_in, r);
    a.w_up = fill_matrix(w_up, r, dim_in);
    a.validate();
    return a;
  }
  throw ConfigError("adapter binary: unknown kind code");
}

void save_adapter_binary(const AnyAdapter& a, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_adapter_binary(a, out);
}

AnyAdapter load_adapter_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return read_adapter_binary(in);
}

}  // namespace hta
