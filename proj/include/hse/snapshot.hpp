#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hse/core.hpp"

namespace hse {

// Parameter snapshot container: magic "HSEB", version u32, then per tensor a
// name (u32 length + bytes), u32 rank, u32 extents and float32 values, all
// little-endian. A "__config__" meta tensor carries the model hyperparameters
// and trained variant so `eval`/`predict` can rebuild the architecture from
// the file alone.
void save_model(const std::string& path, const ModelParams<float>& model, const VariantConfig& variant);

std::pair<ModelParams<float>, VariantConfig> load_model(const std::string& path);

// Raw container access (used by tests and the backbone snapshot interface).
void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor<float>>>& tensors);
std::vector<std::pair<std::string, Tensor<float>>> load_named_tensors(const std::string& path);

}  // namespace hse
