// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tspm/optim.hpp"
#include "tspm/tensor.hpp"

namespace tspm {

// Checkpoint container: "TSPMCKPT", u32 version, then records of
// (u32 name length, name, u32 rank, u32 dims[rank], f32 data) until EOF.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorRecord = std::pair<std::string, Tensor>;

std::vector<std::uint8_t> encode_checkpoint(const std::vector<TensorRecord>& records);
std::vector<TensorRecord> decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_checkpoint(const std::filesystem::path& path);

// Parameters under their own names; Adam moments under "optim/m/<name>" and
// "optim/v/<name>"; the step count as rank-0 "optim/step".
std::vector<TensorRecord> store_records(const ParameterStore& store);
// Copies values and optimizer state into an existing store with the same
// parameter names and shapes. Records outside the store's namespace are ignored.
void restore_store(const std::vector<TensorRecord>& records, ParameterStore& store);

}  // namespace tspm
