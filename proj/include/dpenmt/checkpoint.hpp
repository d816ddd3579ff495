#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/model.hpp"

namespace dpenmt {

// Binary layout: magic "DPEC", u32 format version, u64 entry count, then
// per entry a u64 name length, the UTF-8 name, a u64 rank, u64 dims and the
// f32 values. All integers and floats are little-endian; round trips are
// bit-exact. Step, seed and the config snapshot ride along as reserved
// "__"-prefixed entries.
constexpr char kCheckpointMagic[4] = {'D', 'P', 'E', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw input_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw input_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> params;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  ModelConfig config;

  static Checkpoint from_model(const TransformerModel<float>& model, std::uint64_t step,
                               std::uint64_t seed) {
    Checkpoint ck;
    ck.step = step;
    ck.seed = seed;
    ck.config = model.config();
    ck.params.reserve(model.params().items.size());
    for (const auto& [name, t] : model.params().items)
      ck.params.emplace_back(name, Tensor(t.shape(), t.data()));
    return ck;
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }

  void apply_to(TransformerModel<float>& model) const {
    for (auto& [name, t] : model.params().items) {
      const Tensor* src = find(name);
      if (!src) throw input_error("checkpoint: missing parameter '" + name + "'");
      if (src->shape() != t.shape())
        throw input_error("checkpoint: parameter '" + name + "' has shape " +
                          shape_str(src->shape()) + ", model expects " + shape_str(t.shape()));
      t.data() = src->data();
    }
  }

  TransformerModel<float> build_model() const {
    TransformerModel<float> model(config, seed);
    apply_to(model);
    return model;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw input_error("cannot write " + path);
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);

    std::vector<std::pair<std::string, std::vector<float>>> meta;
    meta.emplace_back("__config__", config_vector());
    meta.emplace_back("__step__", std::vector<float>{static_cast<float>(step)});
    meta.emplace_back("__seed__", seed_vector(seed));

    detail::put_u64(os, params.size() + meta.size());
    for (const auto& [name, values] : meta) write_entry(os, name, {values.size()}, values);
    for (const auto& [name, t] : params) write_entry(os, name, t.shape(), t.data());
    if (!os) throw input_error("write failed for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw input_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
      throw input_error(path + " is not a checkpoint file (bad magic)");
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
      throw input_error(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t count = detail::get_u64(is);
    Checkpoint ck;
    bool have_config = false;
    for (std::uint64_t e = 0; e < count; ++e) {
      auto [name, shape, values] = read_entry(is, path);
      if (name == "__config__") {
        ck.config = config_from_vector(values, path);
        have_config = true;
      } else if (name == "__step__") {
        if (values.size() != 1) throw input_error(path + ": malformed __step__ entry");
        ck.step = static_cast<std::uint64_t>(values[0]);
      } else if (name == "__seed__") {
        ck.seed = seed_from_vector(values, path);
      } else {
        ck.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
      }
    }
    if (!have_config) throw input_error(path + ": checkpoint has no config snapshot");
    return ck;
  }

  static std::vector<float> config_vector(const ModelConfig& c) {
    return {static_cast<float>(c.d_model),      static_cast<float>(c.n_heads),
            static_cast<float>(c.n_enc_layers), static_cast<float>(c.n_dec_layers),
            static_cast<float>(c.ff_dim),       static_cast<float>(c.vocab_src),
            static_cast<float>(c.vocab_tgt),    static_cast<float>(c.max_len),
            static_cast<float>(c.dpe_layers),   c.lambda,
            c.label_smoothing,                  static_cast<float>(static_cast<int>(c.dpe_mode)),
            static_cast<float>(c.pad_id),       static_cast<float>(c.bos_id),
            static_cast<float>(c.eos_id)};
  }

 private:
  std::vector<float> config_vector() const { return config_vector(config); }

  static ModelConfig config_from_vector(const std::vector<float>& v, const std::string& path) {
    if (v.size() != 15) throw input_error(path + ": malformed __config__ entry");
    ModelConfig c;
    c.d_model = static_cast<int>(v[0]);
    c.n_heads = static_cast<int>(v[1]);
    c.n_enc_layers = static_cast<int>(v[2]);
    c.n_dec_layers = static_cast<int>(v[3]);
    c.ff_dim = static_cast<int>(v[4]);
    c.vocab_src = static_cast<int>(v[5]);
    c.vocab_tgt = static_cast<int>(v[6]);
    c.max_len = static_cast<int>(v[7]);
    c.dpe_layers = static_cast<int>(v[8]);
    c.lambda = v[9];
    c.label_smoothing = v[10];
    c.dpe_mode = static_cast<DpeMode>(static_cast<int>(v[11]));
    c.pad_id = static_cast<int>(v[12]);
    c.bos_id = static_cast<int>(v[13]);
    c.eos_id = static_cast<int>(v[14]);
    return c;
  }

  // u64 split into three 24-bit-safe floats.
  static std::vector<float> seed_vector(std::uint64_t seed) {
    return {static_cast<float>(seed & 0xFFFFFF), static_cast<float>((seed >> 24) & 0xFFFFFF),
            static_cast<float>(seed >> 48)};
  }

  static std::uint64_t seed_from_vector(const std::vector<float>& v, const std::string& path) {
    if (v.size() != 3) throw input_error(path + ": malformed __seed__ entry");
    return static_cast<std::uint64_t>(v[0]) | (static_cast<std::uint64_t>(v[1]) << 24) |
           (static_cast<std::uint64_t>(v[2]) << 48);
  }

  static void write_entry(std::ostream& os, const std::string& name, const Shape& shape,
                          const std::vector<float>& values) {
    detail::put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(os, shape.size());
    for (std::size_t d : shape) detail::put_u64(os, d);
    for (float v : values) detail::put_f32(os, v);
  }

  static std::tuple<std::string, Shape, std::vector<float>> read_entry(std::istream& is,
                                                                       const std::string& path) {
    const std::uint64_t name_len = detail::get_u64(is);
    if (name_len > 4096) throw input_error(path + ": implausible name length");
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw input_error(path + ": truncated name");
    const std::uint64_t rank = detail::get_u64(is);
    if (rank > 8) throw input_error(path + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u64(is);
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = detail::get_f32(is);
    return {std::move(name), std::move(shape), std::move(values)};
  }
};

// Arithmetic mean per parameter over checkpoints with identical name sets
// and shapes; step is the max of the inputs.
inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& cks) {
  if (cks.empty()) throw contract_error("average_checkpoints: no inputs");
  Checkpoint out = cks[0];
  for (std::size_t c = 1; c < cks.size(); ++c) {
    if (cks[c].params.size() != out.params.size())
      throw input_error("average_checkpoints: checkpoint " + std::to_string(c) + " has " +
                        std::to_string(cks[c].params.size()) + " parameters, expected " +
                        std::to_string(out.params.size()));
    out.step = std::max(out.step, cks[c].step);
  }
  for (auto& [name, t] : out.params) {
    std::vector<double> acc(t.numel(), 0.0);
    for (const auto& ck : cks) {
      const Tensor* src = ck.find(name);
      if (!src) throw input_error("average_checkpoints: parameter '" + name + "' missing");
      if (src->shape() != t.shape())
        throw input_error("average_checkpoints: parameter '" + name + "' shape mismatch: " +
                          shape_str(src->shape()) + " vs " + shape_str(t.shape()));
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src->data()[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i)
      t.data()[i] = static_cast<float>(acc[i] / static_cast<double>(cks.size()));
  }
  return out;
}

inline Checkpoint average_checkpoint_files(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> cks;
  cks.reserve(paths.size());
  for (const auto& p : paths) cks.push_back(Checkpoint::load(p));
  return average_checkpoints(cks);
}

}  // namespace dpenmt
