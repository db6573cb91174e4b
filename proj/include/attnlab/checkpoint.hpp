#pragma once

#include <filesystem>
#include <string>

#include "attnlab/decoder.hpp"

namespace attnlab {

// Checkpoint file, little-endian:
//   bytes 0..3   magic "MBL1"
//   8 x uint32   layer_count, head_count, model_dim, feedforward_dim,
//                vocab_size, max_seq_len, yes_token_id, no_token_id
//   float32[]    every parameter in ParamLayout order, row-major
// Values are stored at float32 precision; a parameter set that has been
// through DecoderParams::round_to_float() round-trips exactly.
std::string encode_checkpoint(const DecoderParams& params);
DecoderParams decode_checkpoint(const std::string& bytes);

void save_checkpoint(const DecoderParams& params, const std::filesystem::path& path);
DecoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace attnlab
