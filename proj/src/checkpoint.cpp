#include "dfpf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"

namespace fs = std::filesystem;

namespace dfpf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'F', 'P', 'F', 'C', 'K', 'P', 'T'};

void write_tensor(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::ifstream& in, const Shape& shape, const std::string& what) {
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!in) throw CheckpointError("checkpoint truncated while reading " + what);
  return t;
}

}  // namespace

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  nlohmann::json ja, jb;
  to_json(ja, a.model_config);
  to_json(jb, b.model_config);
  nlohmann::json ta, tb;
  to_json(ta, a.train_config);
  to_json(tb, b.train_config);
  return a.format_version == b.format_version && ja == jb && ta == tb && a.parameters == b.parameters &&
         a.optimizer_step == b.optimizer_step && a.adam_m == b.adam_m && a.adam_v == b.adam_v && a.epoch == b.epoch &&
         std::memcmp(&a.best_val_f1, &b.best_val_f1, sizeof(double)) == 0 &&
         std::memcmp(&a.best_metric_value, &b.best_metric_value, sizeof(double)) == 0;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  if (ckpt.adam_m.size() != ckpt.adam_v.size() ||
      (!ckpt.adam_m.empty() && ckpt.adam_m.size() != ckpt.parameters.size())) {
    throw PreconditionError("save_checkpoint: optimizer state does not match parameters");
  }
  nlohmann::json header;
  header["model_config"] = ckpt.model_config;
  header["train_config"] = ckpt.train_config;
  header["optimizer_step"] = ckpt.optimizer_step;
  header["has_optimizer_state"] = !ckpt.adam_m.empty();
  header["epoch"] = ckpt.epoch;
  // Bit patterns keep the round trip exact regardless of float formatting.
  header["best_val_f1_bits"] = std::bit_cast<uint64_t>(ckpt.best_val_f1);
  header["best_metric_value_bits"] = std::bit_cast<uint64_t>(ckpt.best_metric_value);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.parameters) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  header["parameters"] = tensors;
  const std::string text = header.dump();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const uint32_t version = static_cast<uint32_t>(ckpt.format_version);
    const uint64_t size = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& entry : ckpt.parameters) write_tensor(out, entry.second);
    for (const Tensor& t : ckpt.adam_m) write_tensor(out, t);
    for (const Tensor& t : ckpt.adam_v) write_tensor(out, t);
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  uint32_t version = 0;
  uint64_t size = 0;
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError(path.string() + ": unsupported format_version " + std::to_string(version));
  }
  if (size > (uint64_t{1} << 30)) throw CheckpointError(path.string() + ": implausible header size");
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError(path.string() + ": truncated header");

  Checkpoint ckpt;
  ckpt.format_version = static_cast<int>(version);
  std::vector<std::pair<std::string, Shape>> layout;
  bool has_optimizer = false;
  try {
    const nlohmann::json header = nlohmann::json::parse(text);
    ckpt.model_config = header.at("model_config").get<ModelConfig>();
    ckpt.train_config = header.at("train_config").get<TrainConfig>();
    ckpt.optimizer_step = header.at("optimizer_step").get<int64_t>();
    has_optimizer = header.at("has_optimizer_state").get<bool>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.best_val_f1 = std::bit_cast<double>(header.at("best_val_f1_bits").get<uint64_t>());
    ckpt.best_metric_value = std::bit_cast<double>(header.at("best_metric_value_bits").get<uint64_t>());
    for (const auto& t : header.at("parameters")) {
      layout.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }
  for (const auto& [name, shape] : layout) ckpt.parameters.emplace_back(name, read_tensor(in, shape, name));
  if (has_optimizer) {
    for (const auto& [name, shape] : layout) ckpt.adam_m.push_back(read_tensor(in, shape, name + " (m)"));
    for (const auto& [name, shape] : layout) ckpt.adam_v.push_back(read_tensor(in, shape, name + " (v)"));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return ckpt;
}

std::vector<std::pair<std::string, Tensor>> snapshot_parameters(const ChangeDetector& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const NamedParam& p : model.params().entries()) out.emplace_back(p.name, p.var.value());
  return out;
}

void restore_parameters(ChangeDetector& model, const Checkpoint& ckpt) {
  const auto& entries = model.params().entries();
  if (entries.size() != ckpt.parameters.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.parameters.size()) + " parameters, model expects " +
                          std::to_string(entries.size()));
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, value] = ckpt.parameters[i];
    if (entries[i].name != name) throw CheckpointError("parameter order mismatch at " + name);
    if (entries[i].var.shape() != value.shape()) {
      throw CheckpointError(name + ": shape " + shape_str(value.shape()) + " does not match model " +
                            shape_str(entries[i].var.shape()));
    }
    entries[i].var.mutable_value() = value;
  }
}

std::unique_ptr<ChangeDetector> instantiate(const Checkpoint& ckpt) {
  auto model = std::make_unique<ChangeDetector>(ckpt.model_config, 0);
  restore_parameters(*model, ckpt);
  return model;
}

}  // namespace dfpf
