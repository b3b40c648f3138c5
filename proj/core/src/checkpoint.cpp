#include "textif/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <string_view>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/image_io.hpp"

namespace textif {

namespace {

constexpr std::string_view kMagic = "TXIFCKPT";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, std::string_view s) {
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError("checkpoint is truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const NetConfig& cfg, const ParamStore& params) {
  std::vector<std::uint8_t> out;
  put_bytes(out, kMagic);
  put_u32(out, kCheckpointVersion);
  const std::string config = cfg.to_json().dump();
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  put_bytes(out, config);
  put_u32(out, static_cast<std::uint32_t>(params.tensor_count()));
  for (const std::string& name : params.names()) {
    const Tensor& t = params.at(name);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (in.str(kMagic.size()) != kMagic) throw LoadError("not a checkpoint file");
  if (const auto v = in.u32(); v != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ck;
  try {
    ck.config = NetConfig::from_json(nlohmann::json::parse(in.str(in.u32())));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint config rejected: ") + e.what());
  }
  const auto inventory = parameter_inventory(ck.config);
  const std::uint32_t count = in.u32();
  if (count != inventory.size()) {
    throw LoadError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                    std::to_string(inventory.size()));
  }
  for (const ParamSpec& spec : inventory) {
    const std::string name = in.str(in.u32());
    if (name != spec.name) {
      throw LoadError("checkpoint tensor '" + name + "' where '" + spec.name + "' was expected");
    }
    const std::uint32_t rank = in.u32();
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(in.u32()));
    if (shape != spec.shape) {
      throw LoadError("checkpoint tensor '" + name + "' has shape " + shape_to_string(shape) +
                      ", expected " + shape_to_string(spec.shape));
    }
    Tensor t(shape);
    for (double& v : t.values()) v = static_cast<double>(in.f32());
    ck.params.add(name, std::move(t));
  }
  if (!in.done()) throw LoadError("trailing bytes after checkpoint data");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const NetConfig& cfg,
                     const ParamStore& params) {
  write_file_bytes(path, serialize_checkpoint(cfg, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

ParamStore round_to_float32(const ParamStore& params) {
  ParamStore out;
  for (const std::string& name : params.names()) {
    Tensor t = params.at(name);
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace textif
