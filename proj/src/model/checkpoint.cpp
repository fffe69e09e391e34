#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "distil/errors.hpp"
#include "distil/model.hpp"
#include "distil/sha256.hpp"

namespace distil {

namespace {

constexpr const char* kFormat = "distil-checkpoint/1";

std::string format_shape(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) shape.push_back(std::stoull(part));
  return shape;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::filesystem::path manifest_path(const std::string& dir) { return std::filesystem::path(dir) / "manifest"; }
std::filesystem::path weights_path(const std::string& dir) { return std::filesystem::path(dir) / "weights.bin"; }

std::size_t to_size(const std::map<std::string, std::string>& kv, const std::string& key, const std::string& dir) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointCorrupt("checkpoint " + dir + ": manifest is missing '" + key + "'");
  try {
    std::size_t used = 0;
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw CheckpointCorrupt("checkpoint " + dir + ": bad value for '" + key + "'");
  }
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());

  std::vector<std::uint8_t> payload;
  std::vector<CheckpointInfo::Entry> entries;
  for (const auto& p : model.parameters()) {
    entries.push_back({p.name, p.tensor.shape(), payload.size()});
    const auto bytes = p.tensor.to(DType::f32).raw_bytes();
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  }

  const auto& c = model.config();
  std::ostringstream m;
  m << "format = " << kFormat << "\n";
  m << "hidden_dim = " << c.hidden_dim << "\n";
  m << "intermediate_size = " << c.intermediate_size << "\n";
  m << "num_layers = " << c.num_layers << "\n";
  m << "num_heads = " << c.num_heads << "\n";
  m << "max_positions = " << c.max_positions << "\n";
  m << "vocab_size = " << c.vocab_size << "\n";
  m << "dropout_rate = " << format_double(c.dropout_rate) << "\n";
  m << "vocab_sha256 = " << model.vocab_hash() << "\n";
  m << "weights_sha256 = " << sha256_hex(payload) << "\n";
  m << "payload_bytes = " << payload.size() << "\n";
  m << "dtype = f32-le\n";
  for (const auto& e : entries) m << "tensor = " << e.name << " " << format_shape(e.shape) << " " << e.offset << "\n";

  std::ofstream w(weights_path(dir), std::ios::binary | std::ios::trunc);
  w.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  std::ofstream mf(manifest_path(dir), std::ios::binary | std::ios::trunc);
  mf << m.str();
  if (!w || !mf) throw IoError("failed writing checkpoint " + dir);
}

CheckpointInfo read_checkpoint_manifest(const std::string& dir) {
  std::ifstream in(manifest_path(dir), std::ios::binary);
  if (!in) throw CheckpointCorrupt("checkpoint " + dir + ": no manifest");
  std::map<std::string, std::string> kv;
  CheckpointInfo info;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw CheckpointCorrupt("checkpoint " + dir + ": malformed manifest line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    if (key == "tensor") {
      std::istringstream ts(value);
      CheckpointInfo::Entry e;
      std::string shape;
      if (!(ts >> e.name >> shape >> e.offset)) {
        throw CheckpointCorrupt("checkpoint " + dir + ": malformed tensor entry '" + value + "'");
      }
      try {
        e.shape = parse_shape(shape);
      } catch (const std::logic_error&) {
        throw CheckpointCorrupt("checkpoint " + dir + ": malformed shape '" + shape + "'");
      }
      info.tensors.push_back(std::move(e));
    } else {
      kv[key] = value;
    }
  }
  if (kv["format"] != kFormat) throw CheckpointCorrupt("checkpoint " + dir + ": unknown format '" + kv["format"] + "'");
  auto& c = info.config;
  c.hidden_dim = to_size(kv, "hidden_dim", dir);
  c.intermediate_size = to_size(kv, "intermediate_size", dir);
  c.num_layers = to_size(kv, "num_layers", dir);
  c.num_heads = to_size(kv, "num_heads", dir);
  c.max_positions = to_size(kv, "max_positions", dir);
  c.vocab_size = to_size(kv, "vocab_size", dir);
  try {
    c.dropout_rate = std::stod(kv.at("dropout_rate"));
  } catch (const std::exception&) {
    throw CheckpointCorrupt("checkpoint " + dir + ": bad value for 'dropout_rate'");
  }
  info.vocab_sha256 = kv["vocab_sha256"];
  info.weights_sha256 = kv["weights_sha256"];
  info.payload_bytes = to_size(kv, "payload_bytes", dir);
  return info;
}

EncoderModel load_checkpoint_unchecked(const std::string& dir) {
  const CheckpointInfo info = read_checkpoint_manifest(dir);

  std::ifstream in(weights_path(dir), std::ios::binary);
  if (!in) throw CheckpointCorrupt("checkpoint " + dir + ": no weights.bin");
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != info.payload_bytes) {
    throw CheckpointCorrupt("checkpoint " + dir + ": payload is " + std::to_string(payload.size()) +
                            " bytes, manifest says " + std::to_string(info.payload_bytes));
  }
  if (sha256_hex(payload) != info.weights_sha256) {
    throw CheckpointCorrupt("checkpoint " + dir + ": payload digest does not match manifest");
  }

  EncoderModel model;
  try {
    model = EncoderModel::allocate(info.config);
  } catch (const ConfigError& e) {
    throw CheckpointShapeMismatch("checkpoint " + dir + ": invalid config: " + e.what());
  }
  auto params = model.parameters();
  if (params.size() != info.tensors.size()) {
    throw CheckpointShapeMismatch("checkpoint " + dir + ": " + std::to_string(info.tensors.size()) +
                                  " tensors listed, config implies " + std::to_string(params.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = info.tensors[i];
    if (e.name != params[i].name || e.shape != params[i].tensor.shape()) {
      throw CheckpointShapeMismatch("checkpoint " + dir + ": tensor '" + e.name + "' " + shape_str(e.shape) +
                                    " does not match expected '" + params[i].name + "' " +
                                    shape_str(params[i].tensor.shape()));
    }
    const std::size_t bytes = params[i].tensor.numel() * sizeof(float);
    if (e.offset != expected_offset || e.offset + bytes > payload.size()) {
      throw CheckpointCorrupt("checkpoint " + dir + ": tensor '" + e.name + "' has a bad offset");
    }
    auto dst = params[i].tensor.data<float>();
    std::memcpy(dst.data(), payload.data() + e.offset, bytes);
    expected_offset += bytes;
  }
  if (expected_offset != payload.size()) throw CheckpointCorrupt("checkpoint " + dir + ": trailing payload bytes");
  model.set_vocab_hash(info.vocab_sha256);
  return model;
}

EncoderModel load_checkpoint(const std::string& dir, const Vocab& vocab) {
  const CheckpointInfo info = read_checkpoint_manifest(dir);
  if (info.vocab_sha256 != vocab.sha256()) {
    throw CheckpointHashMismatch("checkpoint " + dir + " was saved with vocabulary " + info.vocab_sha256 +
                                 ", got " + vocab.sha256());
  }
  if (info.config.vocab_size != vocab.size()) {
    throw CheckpointShapeMismatch("checkpoint " + dir + " expects " + std::to_string(info.config.vocab_size) +
                                  " tokens, vocabulary has " + std::to_string(vocab.size()));
  }
  return load_checkpoint_unchecked(dir);
}

}  // namespace distil
