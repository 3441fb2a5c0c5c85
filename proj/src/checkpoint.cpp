#include "fqa/checkpoint.hpp"

#include <cstring>
#include <map>

#include "fqa/binary_io.hpp"
#include "fqa/config.hpp"

namespace fqa {
namespace {

constexpr char kMagic[4] = {'F', 'Q', 'A', '1'};

void write_array(io::ByteWriter& w, const std::string& name, const Shape& shape, std::span<const double> values) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u64(d);
  w.f64s(values);
}

struct StoredArray {
  Shape shape;
  std::vector<double> values;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& state,
                                            const std::vector<std::string>& vocab) {
  const auto& params = model.parameters();
  if (!vocab.empty() && vocab.size() != model.config().vocab_size)
    throw std::invalid_argument("vocabulary has " + std::to_string(vocab.size()) + " symbols but the model outputs " +
                                std::to_string(model.config().vocab_size));
  const bool has_moments = !state.m.empty();
  if (has_moments && (state.m.size() != params.size() || state.v.size() != params.size()))
    throw std::invalid_argument("optimizer state does not match the model parameters");

  std::string text = format_model_section(model.config());
  text += "\n[vocab]\nsymbols =";
  for (const auto& s : vocab) text += " " + s;
  text += "\n";

  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(text);
  w.u64(state.step);
  w.u32(static_cast<std::uint32_t>(params.size() * (has_moments ? 3 : 1)));
  for (const auto& p : params) write_array(w, p.name, p.tensor.shape(), p.tensor.values());
  if (has_moments) {
    for (std::size_t i = 0; i < params.size(); ++i)
      write_array(w, "adam.m/" + params[i].name, params[i].tensor.shape(), state.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i)
      write_array(w, "adam.v/" + params[i].name, params[i].tensor.shape(), state.v[i]);
  }
  return std::move(w.buffer());
}

void save_checkpoint(const std::string& path, const Model& model, const AdamState& state,
                     const std::vector<std::string>& vocab) {
  io::write_file(path, encode_checkpoint(model, state, vocab));
}

LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected) {
  io::ByteReader r(bytes);
  RunConfig stored;
  std::uint64_t step = 0;
  std::map<std::string, StoredArray> arrays;
  std::vector<std::string> order;
  try {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("corrupt checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    const std::string text = r.str();
    try {
      stored = parse_config(text);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    }
    step = r.u64();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::string name = r.str();
      const auto rank = r.u32();
      if (rank > 8) throw CheckpointError("corrupt checkpoint: array " + name + " has rank " + std::to_string(rank));
      StoredArray a;
      for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.u64());
      a.values = r.f64s(shape_numel(a.shape));
      if (!arrays.emplace(name, std::move(a)).second)
        throw CheckpointError("corrupt checkpoint: duplicate array " + name);
      order.push_back(name);
    }
    if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint: trailing bytes");
  } catch (const io::TruncatedInput&) {
    throw CheckpointError("corrupt checkpoint: truncated");
  }

  if (expected && !(stored.model == *expected))
    throw CheckpointError("checkpoint config mismatch: checkpoint holds a " + to_string(stored.model.variant) +
                          " model that differs from the requested " + to_string(expected->variant) + " config");
  if (stored.vocab.size() != stored.model.vocab_size)
    throw CheckpointError("corrupt checkpoint: vocabulary size " + std::to_string(stored.vocab.size()) +
                          " does not match vocab_size " + std::to_string(stored.model.vocab_size));

  LoadedCheckpoint out{Model(stored.model, 0), AdamState{}, stored.vocab};
  auto params = out.model.parameters();
  const auto take = [&](const std::string& name, const Shape& shape) -> std::vector<double>& {
    const auto it = arrays.find(name);
    if (it == arrays.end()) throw CheckpointError("corrupt checkpoint: missing array " + name);
    if (it->second.shape != shape)
      throw CheckpointError("checkpoint size mismatch: array " + name + " is " + shape_string(it->second.shape) +
                            ", model expects " + shape_string(shape));
    return it->second.values;
  };
  for (auto& p : params) {
    const auto& v = take(p.name, p.tensor.shape());
    std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
  }
  const bool has_moments = arrays.size() > params.size();
  if (has_moments) {
    if (arrays.size() != 3 * params.size()) throw CheckpointError("corrupt checkpoint: unexpected array count");
    for (auto& p : params) out.state.m.push_back(std::move(take("adam.m/" + p.name, p.tensor.shape())));
    for (auto& p : params) out.state.v.push_back(std::move(take("adam.v/" + p.name, p.tensor.shape())));
  } else if (arrays.size() != params.size()) {
    throw CheckpointError("corrupt checkpoint: unexpected array count");
  }
  out.state.step = step;
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  return decode_checkpoint(io::read_file(path), expected);
}

}  // namespace fqa
