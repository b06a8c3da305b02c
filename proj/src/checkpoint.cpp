#include "tbgdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "tbgdiff/errors.hpp"

namespace tbgdiff {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'B', 'G', 'D', 'C', 'K', 'P', 'T'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.append(raw, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kUInt8: return "u8";
    default: throw std::invalid_argument("checkpoint cannot store tensors of this dtype");
  }
}

torch::Dtype parse_dtype(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  if (name == "u8") return torch::kUInt8;
  throw IntegrityError("checkpoint header names unknown dtype " + name);
}

uint32_t crc(std::string_view bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<size_t>(bytes.size() - pos, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + pos), n);
    pos += n;
  }
  return static_cast<uint32_t>(c);
}

json describe(const std::map<std::string, torch::Tensor>& tensors, std::string& payload) {
  json list = json::array();
  for (const auto& [name, tensor] : tensors) {
    const auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<size_t>(t.numel()) * t.element_size();
    list.push_back({{"name", name},
                    {"dtype", dtype_name(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"offset", payload.size()},
                    {"bytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  return list;
}

std::map<std::string, torch::Tensor> restore(const json& list, std::string_view payload) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& entry : list) {
    const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<size_t>();
    const auto nbytes = entry.at("bytes").get<size_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<size_t>(t.numel()) * t.element_size() != nbytes || offset + nbytes > payload.size()) {
      throw IntegrityError("checkpoint entry " + entry.at("name").get<std::string>() + " is out of bounds");
    }
    std::memcpy(t.data_ptr(), payload.data() + offset, nbytes);
    out.emplace(entry.at("name").get<std::string>(), t);
  }
  return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  std::string payload;
  json header = {{"epoch", checkpoint.epoch},
                 {"step", checkpoint.step},
                 {"config", checkpoint.config},
                 {"history", checkpoint.history}};
  header["parameters"] = describe(checkpoint.parameters, payload);
  header["optimizer"] = describe(checkpoint.optimizer, payload);
  const auto text = header.dump();  // nlohmann objects iterate in sorted key order

  std::string out(kMagic, sizeof kMagic);
  put<uint32_t>(out, kCheckpointVersion);
  put<uint64_t>(out, text.size());
  out += text;
  out += payload;
  put<uint32_t>(out, crc(out));
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  constexpr size_t kPrefix = sizeof kMagic + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < kPrefix + sizeof(uint32_t)) throw IntegrityError("checkpoint is truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw IntegrityError("not a checkpoint file");
  const auto version = get<uint32_t>(bytes, sizeof kMagic);
  if (version != kCheckpointVersion) {
    throw VersionError(static_cast<int>(version), static_cast<int>(kCheckpointVersion));
  }
  const auto body = bytes.substr(0, bytes.size() - sizeof(uint32_t));
  if (crc(body) != get<uint32_t>(bytes, body.size())) {
    throw IntegrityError("checkpoint checksum mismatch (truncated or corrupted)");
  }
  const auto header_len = get<uint64_t>(bytes, sizeof kMagic + sizeof(uint32_t));
  if (header_len > body.size() - kPrefix) throw IntegrityError("checkpoint header is truncated");
  json header;
  try {
    header = json::parse(body.substr(kPrefix, header_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header does not parse: ") + e.what());
  }
  const auto payload = body.substr(kPrefix + header_len);
  Checkpoint out;
  try {
    out.epoch = header.at("epoch").get<int64_t>();
    out.step = header.at("step").get<int64_t>();
    out.config = header.at("config");
    out.history = header.at("history");
    out.parameters = restore(header.at("parameters"), payload);
    out.optimizer = restore(header.at("optimizer"), payload);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is malformed: ") + e.what());
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

std::map<std::string, torch::Tensor> module_state(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : module.named_parameters()) out.emplace(item.key(), item.value().detach().clone());
  for (const auto& item : module.named_buffers()) out.emplace(item.key(), item.value().detach().clone());
  return out;
}

void load_module_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& state) {
  torch::NoGradGuard no_grad;
  size_t seen = 0;
  auto copy = [&](const std::string& name, torch::Tensor target) {
    auto it = state.find(name);
    if (it == state.end()) throw DataError("checkpoint is missing tensor " + name);
    if (it->second.sizes() != target.sizes()) throw DataError("checkpoint tensor " + name + " has the wrong shape");
    target.copy_(it->second);
    ++seen;
  };
  for (auto& item : module.named_parameters()) copy(item.key(), item.value());
  for (auto& item : module.named_buffers()) copy(item.key(), item.value());
  if (seen != state.size()) {
    for (const auto& [name, t] : state) {
      if (!module.named_parameters().contains(name) && !module.named_buffers().contains(name)) {
        throw DataError("checkpoint has unexpected tensor " + name);
      }
    }
  }
}

std::map<std::string, torch::Tensor> optimizer_state(const torch::nn::Module& module,
                                                     torch::optim::AdamW& optimizer) {
  std::map<std::string, torch::Tensor> out;
  auto& states = optimizer.state();
  for (const auto& item : module.named_parameters()) {
    auto it = states.find(item.value().unsafeGetTensorImpl());
    if (it == states.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    out.emplace(item.key() + ".exp_avg", s.exp_avg().detach().clone());
    out.emplace(item.key() + ".exp_avg_sq", s.exp_avg_sq().detach().clone());
    out.emplace(item.key() + ".step", torch::tensor(s.step(), torch::kInt64));
  }
  return out;
}

void load_optimizer_state(const torch::nn::Module& module, torch::optim::AdamW& optimizer,
                          const std::map<std::string, torch::Tensor>& state) {
  auto& states = optimizer.state();
  states.clear();
  size_t used = 0;
  for (const auto& item : module.named_parameters()) {
    auto avg = state.find(item.key() + ".exp_avg");
    if (avg == state.end()) continue;
    auto sq = state.find(item.key() + ".exp_avg_sq");
    auto step = state.find(item.key() + ".step");
    if (sq == state.end() || step == state.end()) {
      throw DataError("checkpoint optimizer state for " + item.key() + " is incomplete");
    }
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(step->second.item<int64_t>());
    s->exp_avg(avg->second.clone());
    s->exp_avg_sq(sq->second.clone());
    states[item.value().unsafeGetTensorImpl()] = std::move(s);
    used += 3;
  }
  if (used != state.size()) throw DataError("checkpoint optimizer state names unknown parameters");
}

}  // namespace tbgdiff
