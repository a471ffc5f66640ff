#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "steermoe/decoder.hpp"
#include "steermoe/encoder.hpp"
#include "steermoe/steering.hpp"

namespace steermoe {

// Binary container of named parameter arrays:
//   "STMOECKP" | u32 version | u64 n + metadata JSON | u32 count |
//   per array: u32 n + name, u8 trainable, u8 lr_group, u8 decay,
//              u32 rank, i64 dims[rank], f64 data[]  |  32-byte SHA-256
// All integers and doubles are little-endian. The trailing digest covers
// every preceding byte, so a damaged file is rejected before any state is
// built.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;
  std::vector<Parameter> parameters;

  const Parameter& find(std::string_view name) const;
};

std::vector<unsigned char> serialize_checkpoint(const ConstParameterRefs& params, const nlohmann::json& metadata);
Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, const ConstParameterRefs& params,
                     const nlohmann::json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model-level wrappers. `extra` is merged into the stored metadata.
void save_encoder(const std::filesystem::path& path, const EncoderWeights& w, const nlohmann::json& extra = {});
EncoderWeights load_encoder(const std::filesystem::path& path);
EncoderWeights encoder_from_checkpoint(const Checkpoint& ckpt);

void save_decoder(const std::filesystem::path& path, const DecoderWeights& w, const nlohmann::json& extra = {});
DecoderWeights load_decoder(const std::filesystem::path& path);
DecoderWeights decoder_from_checkpoint(const Checkpoint& ckpt);

void save_steering(const std::filesystem::path& path, const SteeringState& s, const nlohmann::json& extra = {});
SteeringState load_steering(const std::filesystem::path& path);
SteeringState steering_from_checkpoint(const Checkpoint& ckpt);

// Open-question resolutions recorded with every steering checkpoint.
nlohmann::json alignment_decisions();

}  // namespace steermoe
