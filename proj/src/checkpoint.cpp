#include "steermoe/checkpoint.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "steermoe/errors.hpp"
#include "steermoe/hashing.hpp"

#include <openssl/evp.h>

namespace steermoe {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'T', 'M', 'O', 'E', 'C', 'K', 'P'};
constexpr size_t kDigestBytes = 32;

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const unsigned char* take(size_t n) {
    if (n > bytes_.size() - at_) throw FormatError("checkpoint: truncated file");
    const unsigned char* p = bytes_.data() + at_;
    at_ += n;
    return p;
  }
  bool done() const { return at_ == bytes_.size(); }

 private:
  std::span<const unsigned char> bytes_;
  size_t at_ = 0;
};

std::array<unsigned char, kDigestBytes> digest(std::span<const unsigned char> bytes) {
  std::array<unsigned char, kDigestBytes> out{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr);
  return out;
}

double metadata_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.at(key).get<double>();
}

void assign(const Checkpoint& ckpt, const ParameterRefs& targets) {
  if (ckpt.parameters.size() != targets.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.parameters.size()) + " arrays, model expects " +
                      std::to_string(targets.size()));
  }
  for (Parameter* p : targets) {
    const Parameter& src = ckpt.find(p->name);
    if (src.value.shape() != p->value.shape()) {
      throw FormatError("checkpoint array " + p->name + " has shape " + shape_string(src.value.shape()) +
                        ", model expects " + shape_string(p->value.shape()));
    }
    *p = src;
  }
}

nlohmann::json merged(nlohmann::json base, const nlohmann::json& extra) {
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) base[it.key()] = it.value();
  }
  return base;
}

void require_kind(const Checkpoint& ckpt, const char* kind) {
  if (ckpt.metadata.value("kind", "") != kind) {
    throw FormatError(std::string("checkpoint is not a ") + kind + " checkpoint");
  }
}

}  // namespace

const Parameter& Checkpoint::find(std::string_view name) const {
  for (const auto& p : parameters) {
    if (p.name == name) return p;
  }
  throw FormatError("checkpoint lacks array " + std::string(name));
}

std::vector<unsigned char> serialize_checkpoint(const ConstParameterRefs& params, const nlohmann::json& metadata) {
  Writer w;
  w.put_bytes(kMagic.data(), kMagic.size());
  w.put(kCheckpointVersion);
  const std::string meta = metadata.dump();
  w.put(static_cast<std::uint64_t>(meta.size()));
  w.put_bytes(meta.data(), meta.size());
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    w.put(static_cast<std::uint32_t>(p->name.size()));
    w.put_bytes(p->name.data(), p->name.size());
    w.put(static_cast<std::uint8_t>(p->trainable));
    w.put(static_cast<std::uint8_t>(p->lr_group));
    w.put(static_cast<std::uint8_t>(p->weight_decay));
    w.put(static_cast<std::uint32_t>(p->value.rank()));
    for (Index d : p->value.shape()) w.put(static_cast<std::int64_t>(d));
    w.put_bytes(p->value.data(), static_cast<size_t>(p->value.size()) * sizeof(double));
  }
  const auto d = digest(w.bytes());
  w.put_bytes(d.data(), d.size());
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < kMagic.size() + kDigestBytes) throw FormatError("checkpoint: file too short");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) throw FormatError("checkpoint: bad magic");
  const auto body = bytes.first(bytes.size() - kDigestBytes);
  const auto expected = digest(body);
  if (std::memcmp(expected.data(), bytes.data() + body.size(), kDigestBytes) != 0) {
    throw FormatError("checkpoint: checksum mismatch (file is corrupted)");
  }
  Reader r(body);
  r.take(kMagic.size());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint64_t>();
  const auto* meta = reinterpret_cast<const char*>(r.take(meta_len));
  try {
    ckpt.metadata = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter p;
    const auto name_len = r.get<std::uint32_t>();
    p.name.assign(reinterpret_cast<const char*>(r.take(name_len)), name_len);
    p.trainable = r.get<std::uint8_t>() != 0;
    const auto group = r.get<std::uint8_t>();
    if (group > 2) throw FormatError("checkpoint: bad lr group for " + p.name);
    p.lr_group = static_cast<LrGroup>(group);
    p.weight_decay = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    std::vector<Index> shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.get<std::int64_t>()));
    Tensor t(shape);
    std::memcpy(t.data(), r.take(static_cast<size_t>(t.size()) * sizeof(double)),
                static_cast<size_t>(t.size()) * sizeof(double));
    p.value = std::move(t);
    ckpt.parameters.push_back(std::move(p));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ConstParameterRefs& params,
                     const nlohmann::json& metadata) {
  const auto bytes = serialize_checkpoint(params, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------

void save_encoder(const std::filesystem::path& path, const EncoderWeights& w, const nlohmann::json& extra) {
  nlohmann::json meta{{"kind", "encoder"},
                      {"software_version", STEERMOE_VERSION},
                      {"config", w.config},
                      {"frame_accuracy", w.frame_accuracy},
                      {"hook_point", "block_output"}};
  save_checkpoint(path, w.parameters(), merged(std::move(meta), extra));
}

EncoderWeights encoder_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "encoder");
  EncoderWeights w = EncoderWeights::init(ckpt.metadata.at("config").get<EncoderConfig>(), 0);
  assign(ckpt, w.parameters());
  w.frame_accuracy = metadata_double(ckpt.metadata, "frame_accuracy");
  return w;
}

EncoderWeights load_encoder(const std::filesystem::path& path) { return encoder_from_checkpoint(load_checkpoint(path)); }

void save_decoder(const std::filesystem::path& path, const DecoderWeights& w, const nlohmann::json& extra) {
  nlohmann::json meta{{"kind", "decoder"},
                      {"software_version", STEERMOE_VERSION},
                      {"config", w.config},
                      {"validation_perplexity", w.validation_perplexity}};
  save_checkpoint(path, w.parameters(), merged(std::move(meta), extra));
}

DecoderWeights decoder_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "decoder");
  DecoderWeights w = DecoderWeights::init(ckpt.metadata.at("config").get<DecoderConfig>(), 0);
  assign(ckpt, w.parameters());
  w.validation_perplexity = metadata_double(ckpt.metadata, "validation_perplexity");
  return w;
}

DecoderWeights load_decoder(const std::filesystem::path& path) { return decoder_from_checkpoint(load_checkpoint(path)); }

nlohmann::json alignment_decisions() {
  return nlohmann::json{
      {"base_lr_group", "alphas and projection (both backbones stay frozen)"},
      {"encoder_hook_point", "after each full block output"},
      {"instruction_loss_masked", true},
      {"instruction_position", "head of the text segment, after the audio prompt"},
      {"alpha_sign", "unconstrained"},
      {"loss_reduction", "mean over masked positions"},
      {"pool_partial_window", "mean over actual rows"},
  };
}

void save_steering(const std::filesystem::path& path, const SteeringState& s, const nlohmann::json& extra) {
  nlohmann::json meta{{"kind", "steering"},
                      {"software_version", STEERMOE_VERSION},
                      {"config", s.config},
                      {"layers", s.layers},
                      {"dim", s.dim},
                      {"decisions", alignment_decisions()}};
  save_checkpoint(path, s.parameters(), merged(std::move(meta), extra));
}

SteeringState steering_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "steering");
  SteeringState s = SteeringState::init(ckpt.metadata.at("config").get<SteeringConfig>(),
                                        ckpt.metadata.at("layers").get<int>(), ckpt.metadata.at("dim").get<int>());
  assign(ckpt, s.parameters());
  return s;
}

SteeringState load_steering(const std::filesystem::path& path) { return steering_from_checkpoint(load_checkpoint(path)); }

}  // namespace steermoe
