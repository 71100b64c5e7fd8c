#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dccl/tensor.hpp"

namespace dccl {

// Binary checkpoint of named tensors. Values are raw little-endian doubles,
// so a write/read round trip is bit exact. Files are written to a temporary
// name and renamed into place, so a crash never leaves a torn checkpoint.

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

// Helpers for loading into an existing layout. Throws if a name is missing
// or a shape differs.
const Tensor& find_tensor(const NamedTensors& ts, const std::string& name);
void load_into(const NamedTensors& ts, const std::string& name, Tensor& dst);

}  // namespace dccl
