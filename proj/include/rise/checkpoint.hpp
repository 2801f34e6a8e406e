#pragma once

// Binary checkpoint container.
//
// Layout (little-endian):
//   8 bytes   magic "RISEMOE1"
//   u32       format version (1)
//   u32       scalar width in bytes (8, IEEE-754 double)
//   i64 x 7   vocab_size, d_model, d_expert_hidden, n_layers, n_experts,
//             top_k, max_seq_len
//   u64       seed
//   matrices, row-major: embedding; per layer: router, router prior, shared,
//   then per expert w_in, w_out, then n_experts routable flags (u8);
//   finally head.

#include "rise/moe.hpp"

#include <filesystem>
#include <string>

namespace rise {

inline constexpr char kCheckpointMagic[8] = {'R', 'I', 'S', 'E', 'M', 'O', 'E', '1'};

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// True when both models have identical configs, routability and bit-identical
/// parameters.
bool bitwise_equal(const Model& a, const Model& b);

}  // namespace rise
