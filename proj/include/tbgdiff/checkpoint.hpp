#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>
#include <torch/torch.h>

namespace tbgdiff {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  int64_t epoch = 0;
  int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json history = nlohmann::json::array();  // one {step, loss, ...} record per logged step
  std::map<std::string, torch::Tensor> parameters;   // by module path, e.g. "dsa.query.weight"
  std::map<std::string, torch::Tensor> optimizer;    // "<param>.exp_avg", "<param>.exp_avg_sq", "<param>.step"
};

// Layout: "TBGDCKPT" | u32 version | u64 header length | JSON header | tensor bytes | u32 crc32.
// Everything little-endian; the header lists tensors in name order with offsets into the payload.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view bytes);

// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Named parameters and buffers of a module, detached copies.
std::map<std::string, torch::Tensor> module_state(const torch::nn::Module& module);
// Copies tensors into the module; missing, unexpected or misshapen entries throw DataError.
void load_module_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& state);

std::map<std::string, torch::Tensor> optimizer_state(const torch::nn::Module& module, torch::optim::AdamW& optimizer);
void load_optimizer_state(const torch::nn::Module& module, torch::optim::AdamW& optimizer,
                          const std::map<std::string, torch::Tensor>& state);

}  // namespace tbgdiff
