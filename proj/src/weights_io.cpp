#include "raglab/weights_io.h"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "raglab/error.h"

namespace raglab {

namespace {

static_assert(std::endian::native == std::endian::little,
              "weight serialization assumes a little-endian host");

constexpr char kMagic[4] = {'R', 'G', 'S', 'W'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  void bytes(void* out, std::size_t n) {
    if (n > data_.size() - pos_) {
      throw FormatError("weight file truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw FormatError("config field '" + key + "' is not an integer: '" + v + "'");
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_weights(const ModelWeights& weights) {
  weights.validate();
  const auto& c = weights.config;
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kWeightsVersion);
  const std::vector<std::pair<std::string, std::string>> pairs = {
      {"n_layers", std::to_string(c.n_layers)},
      {"n_heads", std::to_string(c.n_heads)},
      {"d_model", std::to_string(c.d_model)},
      {"d_ff", std::to_string(c.d_ff)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"max_seq", std::to_string(c.max_seq)},
      {"activation", std::string(to_string(c.activation))},
      {"tie_embeddings", c.tie_embeddings ? "1" : "0"},
      {"layernorm_eps", format_double(c.layernorm_eps)},
      {"real_bits", std::to_string(sizeof(Real) * 8)},
  };
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& [k, v] : pairs) {
    w.str(k);
    w.str(v);
  }
  const auto tensors = weights.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) w.u64(d);
    w.bytes(t->data().data(), t->size() * sizeof(Real));
  }
  return w.take();
}

ModelWeights decode_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic: not an RGSW weight file");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw FormatError("unsupported weight file version " + std::to_string(version));
  }
  ModelConfig c;
  std::size_t real_bits = 64;
  const std::uint32_t n_pairs = r.u32();
  std::map<std::string, std::string> header;
  for (std::uint32_t i = 0; i < n_pairs; ++i) {
    std::string k = r.str();
    header[k] = r.str();
  }
  for (const auto& [k, v] : header) {
    if (k == "n_layers") c.n_layers = parse_size(k, v);
    else if (k == "n_heads") c.n_heads = parse_size(k, v);
    else if (k == "d_model") c.d_model = parse_size(k, v);
    else if (k == "d_ff") c.d_ff = parse_size(k, v);
    else if (k == "vocab_size") c.vocab_size = parse_size(k, v);
    else if (k == "max_seq") c.max_seq = parse_size(k, v);
    else if (k == "activation") c.activation = parse_activation(v);
    else if (k == "tie_embeddings") c.tie_embeddings = v == "1";
    else if (k == "layernorm_eps") c.layernorm_eps = std::strtod(v.c_str(), nullptr);
    else if (k == "real_bits") real_bits = parse_size(k, v);
    else throw FormatError("unknown config field '" + k + "'");
  }
  if (real_bits != 32 && real_bits != 64) {
    throw FormatError("unsupported real width " + std::to_string(real_bits));
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("config header invalid: ") + e.what());
  }

  ModelWeights w = init_weights(c, 0);
  auto slots = w.named_tensors();
  std::map<std::string, Tensor*> by_name(slots.begin(), slots.end());
  const std::uint32_t n_tensors = r.u32();
  if (n_tensors != slots.size()) {
    throw FormatError("expected " + std::to_string(slots.size()) + " tensors, file has " +
                      std::to_string(n_tensors));
  }
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unexpected tensor '" + name + "'");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    if (shape != it->second->shape()) {
      throw FormatError("tensor '" + name + "' shape " + shape_string(shape) +
                        " disagrees with config header (expected " +
                        shape_string(it->second->shape()) + ")");
    }
    auto dst = it->second->mutable_data();
    if (real_bits == sizeof(Real) * 8) {
      r.bytes(dst.data(), dst.size() * sizeof(Real));
    } else if (real_bits == 32) {
      for (auto& v : dst) {
        float f;
        r.bytes(&f, sizeof f);
        v = static_cast<Real>(f);
      }
    } else {
      for (auto& v : dst) {
        double d;
        r.bytes(&d, sizeof d);
        v = static_cast<Real>(d);
      }
    }
    by_name.erase(it);
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  if (c.tie_embeddings) w.unembedding = w.token_embedding;
  return w;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  const auto bytes = encode_weights(weights);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open weight file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_weights(bytes);
}

}  // namespace raglab
