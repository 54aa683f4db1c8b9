#pragma once

#include <filesystem>

#include "mialab/nn/model.hpp"

namespace mialab::nn {

/// Checkpoint layout:
///   "MIAF" | u8 version (1) | u32 LE header length | JSON header | f32 LE payload
/// The header holds the model config and, per tensor in storage order, its
/// name, shape and byte offset into the payload.
inline constexpr char kCheckpointMagic[4] = {'M', 'I', 'A', 'F'};
inline constexpr unsigned char kCheckpointVersion = 1;

void save_checkpoint(const ModelState& model, const std::filesystem::path& path);

/// Throws FormatError on bad magic/version, truncation, or a tensor whose
/// advertised shape disagrees with the payload; IoError when unreadable.
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace mialab::nn
