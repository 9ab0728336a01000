#include "hmode/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace hmode {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void put_u32(std::ostream& out, std::size_t v) {
  const auto x = static_cast<std::uint32_t>(v);
  out.write(reinterpret_cast<const char*>(&x), sizeof x);
}

std::uint32_t get_u32(std::istream& in, const fs::path& path) {
  std::uint32_t x = 0;
  if (!in.read(reinterpret_cast<char*>(&x), sizeof x)) throw CheckpointError(path.string() + ": truncated file");
  return x;
}

template <typename T>
void put_array(std::ostream& out, const std::string& name, const Shape& shape, std::span<const T> values) {
  put_u32(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, shape.size());
  for (std::size_t d : shape) put_u32(out, d);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

NamedArray get_array(std::istream& in, const fs::path& path, int precision) {
  NamedArray a;
  const std::uint32_t len = get_u32(in, path);
  if (len > 4096) throw CheckpointError(path.string() + ": corrupt array name");
  a.name.resize(len);
  if (!in.read(a.name.data(), len)) throw CheckpointError(path.string() + ": truncated file");
  const std::uint32_t rank = get_u32(in, path);
  if (rank > 8) throw CheckpointError(path.string() + ": corrupt rank for " + a.name);
  for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(get_u32(in, path));
  const std::size_t n = shape_numel(a.shape);
  a.values.resize(n);
  if (precision == 32) {
    std::vector<float> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
      throw CheckpointError(path.string() + ": truncated data for " + a.name);
    }
    std::copy(buf.begin(), buf.end(), a.values.begin());
  } else if (!in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw CheckpointError(path.string() + ": truncated data for " + a.name);
  }
  return a;
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& path, const TrainConfig& cfg, const HmodeNet<T>& net, std::size_t step,
                     const std::vector<std::vector<T>>& adam_m, const std::vector<std::vector<T>>& adam_v) {
  const auto& params = net.parameters();
  if (adam_m.size() != adam_v.size() || (!adam_m.empty() && adam_m.size() != params.size())) {
    throw InvalidArgument("save_checkpoint: optimizer state does not match parameters");
  }
  nlohmann::json header;
  header["model"] = to_json(net.config());
  header["train"] = to_json(cfg);
  header["step"] = step;
  header["precision"] = sizeof(T) == 4 ? 32 : 64;
  header["parameters"] = params.size();
  header["optimizer_state"] = !adam_m.empty();
  const std::string text = header.dump();

  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, 6);
    put_u32(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) put_array<T>(out, p.name, p.value.shape(), p.value.values());
    for (std::size_t i = 0; i < adam_m.size(); ++i) {
      put_array<T>(out, "adam.m." + params[i].name, params[i].value.shape(), adam_m[i]);
    }
    for (std::size_t i = 0; i < adam_v.size(); ++i) {
      put_array<T>(out, "adam.v." + params[i].name, params[i].value.shape(), adam_v[i]);
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

CheckpointData read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kCheckpointMagic, 6) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t len = get_u32(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw CheckpointError(path.string() + ": truncated header");

  CheckpointData ck;
  std::size_t count = 0;
  bool has_state = false;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.config = train_config_from_json(header.at("train"));
    ck.config.model = backbone_config_from_json(header.at("model"));
    ck.step = header.at("step").get<std::size_t>();
    ck.precision = header.at("precision").get<int>();
    count = header.at("parameters").get<std::size_t>();
    has_state = header.at("optimizer_state").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": bad embedded config: " + e.what());
  }
  if (ck.precision != 32 && ck.precision != 64) throw CheckpointError(path.string() + ": bad precision");
  for (std::size_t i = 0; i < count; ++i) ck.params.push_back(get_array(in, path, ck.precision));
  if (has_state) {
    for (std::size_t i = 0; i < count; ++i) ck.adam_m.push_back(get_array(in, path, ck.precision));
    for (std::size_t i = 0; i < count; ++i) ck.adam_v.push_back(get_array(in, path, ck.precision));
  }
  return ck;
}

template <typename T>
void load_parameters(HmodeNet<T>& net, const CheckpointData& ckpt) {
  if (!(ckpt.config.model == net.config())) {
    throw CheckpointError("checkpoint model config does not match the requested model");
  }
  auto& params = net.parameters();
  if (ckpt.params.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedArray& a = ckpt.params[i];
    if (a.name != params[i].name || a.shape != params[i].value.shape()) {
      throw CheckpointError("checkpoint parameter " + a.name + " " + shape_string(a.shape) + " does not match " +
                            params[i].name + " " + shape_string(params[i].value.shape()));
    }
    auto dst = params[i].value.mutable_values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(a.values[j]);
  }
}

template void save_checkpoint(const fs::path&, const TrainConfig&, const HmodeNet<float>&, std::size_t,
                              const std::vector<std::vector<float>>&, const std::vector<std::vector<float>>&);
template void save_checkpoint(const fs::path&, const TrainConfig&, const HmodeNet<double>&, std::size_t,
                              const std::vector<std::vector<double>>&, const std::vector<std::vector<double>>&);
template void load_parameters(HmodeNet<float>&, const CheckpointData&);
template void load_parameters(HmodeNet<double>&, const CheckpointData&);

}  // namespace hmode
