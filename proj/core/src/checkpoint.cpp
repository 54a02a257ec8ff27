#include "pgunet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pgu {

namespace fs = std::filesystem;

namespace {

struct Entry {
  std::string kind;  // "param" or "rms"
  std::string name;
  int origin = 0;
  Shape shape;
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& field) {
  Shape s;
  std::stringstream in(field);
  std::string part;
  while (std::getline(in, part, ',')) s.push_back(std::stoull(part));
  return s;
}

void append_le(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* dst = out.data() + start;
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
}

std::vector<float> read_le(const std::string& payload, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  const auto* src = reinterpret_cast<const unsigned char*>(payload.data() + offset);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::uint32_t checksum(const std::string& payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < payload.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(payload.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

[[noreturn]] void bad(const fs::path& path, const std::string& what) {
  throw CheckpointError(path.string() + ": " + what);
}

}  // namespace

void save_checkpoint(const Model<float>& model, const RmspropState& state, std::size_t epoch, const fs::path& path) {
  const StageConfig& c = model.config();
  std::string payload;
  std::vector<Entry> entries;
  for (const auto& [name, p] : model.parameters()) {
    entries.push_back({"param", name, p.stage_of_origin, p.tensor.shape(), payload.size(), p.tensor.numel() * 4});
    append_le(payload, p.tensor.data());
  }
  for (const auto& [name, v] : state.mean_square) {
    entries.push_back({"rms", name, 0, {v.size()}, payload.size(), v.size() * 4});
    append_le(payload, v);
  }

  std::ostringstream m;
  m << kCheckpointVersion << '\n';
  m << "stage " << c.stage << '\n';
  m << "epoch " << epoch << '\n';
  m << "seed " << model.seed() << '\n';
  m << "widths";
  for (auto w : c.widths) m << ' ' << w;
  m << '\n';
  m << "num_classes " << c.num_classes << '\n';
  m << "epochs " << c.epochs << '\n';
  m << "lr_new " << fmt_double(c.lr_new) << '\n';
  m << "lr_transferred " << fmt_double(c.lr_transferred) << '\n';
  m << "residual " << (c.residual ? 1 : 0) << '\n';
  m << "rms_decay " << fmt_double(state.decay) << '\n';
  m << "rms_epsilon " << fmt_double(state.epsilon) << '\n';
  for (const auto& e : entries) {
    m << e.kind << ' ' << e.name << ' ';
    if (e.kind == "param") m << e.origin << ' ';
    m << shape_field(e.shape) << ' ' << e.offset << ' ' << e.bytes << '\n';
  }
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", checksum(payload));
  m << "payload " << payload.size() << '\n';
  m << "crc32 " << crc << '\n';
  m << "end\n";

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::string manifest = m.str();
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string version;
  std::getline(in, version);
  if (version != kCheckpointVersion) bad(path, "unknown checkpoint format '" + version.substr(0, 16) + "'");

  StageConfig config;
  config.widths.clear();
  std::uint64_t seed = 0;
  std::size_t epoch = 0, payload_bytes = 0;
  std::string crc_hex;
  RmspropState state;
  std::vector<Entry> entries;
  bool ended = false;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line == "end") {
        ended = true;
        break;
      }
      std::istringstream f(line);
      std::string key;
      f >> key;
      if (key == "stage") f >> config.stage;
      else if (key == "epoch") f >> epoch;
      else if (key == "seed") f >> seed;
      else if (key == "widths") { for (std::size_t w; f >> w;) config.widths.push_back(w); f.clear(); }
      else if (key == "num_classes") f >> config.num_classes;
      else if (key == "epochs") f >> config.epochs;
      else if (key == "lr_new") f >> config.lr_new;
      else if (key == "lr_transferred") f >> config.lr_transferred;
      else if (key == "residual") { int r = 1; f >> r; config.residual = r != 0; }
      else if (key == "rms_decay") f >> state.decay;
      else if (key == "rms_epsilon") f >> state.epsilon;
      else if (key == "payload") f >> payload_bytes;
      else if (key == "crc32") f >> crc_hex;
      else if (key == "param" || key == "rms") {
        Entry e;
        e.kind = key;
        std::string shape;
        f >> e.name;
        if (key == "param") f >> e.origin;
        f >> shape >> e.offset >> e.bytes;
        e.shape = parse_shape(shape);
        entries.push_back(std::move(e));
      } else {
        bad(path, "unexpected manifest line '" + line.substr(0, 40) + "'");
      }
      if (f.fail()) bad(path, "malformed manifest line '" + line.substr(0, 40) + "'");
    }
  } catch (const std::logic_error&) {
    bad(path, "malformed manifest line '" + line.substr(0, 40) + "'");
  }
  if (!ended) bad(path, "manifest is not terminated");

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char actual[16];
  std::snprintf(actual, sizeof actual, "%08x", checksum(payload));
  if (crc_hex != actual || payload.size() != payload_bytes) {
    bad(path, "checksum mismatch (payload " + std::to_string(payload.size()) + " bytes, manifest says " +
                  std::to_string(payload_bytes) + ")");
  }

  ParameterMap params;
  std::size_t expected_offset = 0;
  for (const auto& e : entries) {
    const std::size_t count = shape_numel(e.shape);
    if (e.shape.empty() || count * 4 != e.bytes) bad(path, "entry " + e.name + ": shape does not match its byte span");
    if (e.offset != expected_offset || e.offset + e.bytes > payload.size()) {
      bad(path, "entry " + e.name + ": byte offset inconsistent with the payload");
    }
    expected_offset += e.bytes;
    auto values = read_le(payload, e.offset, count);
    if (e.kind == "param") {
      auto t = Tensor::from_data(e.shape, std::move(values));
      t.set_requires_grad();
      if (!params.emplace(e.name, Parameter<float>{e.name, t, e.origin}).second) bad(path, "duplicate entry " + e.name);
    } else {
      state.mean_square[e.name] = std::move(values);
    }
  }
  if (expected_offset != payload.size()) bad(path, "payload has trailing bytes");
  for (const auto& [name, v] : state.mean_square) {
    const auto it = params.find(name);
    if (it == params.end() || it->second.tensor.numel() != v.size()) bad(path, "optimizer state for unknown " + name);
  }
  try {
    Model<float> model(config, seed, std::move(params));
    return {std::move(model), std::move(state), epoch};
  } catch (const Error& e) {
    bad(path, std::string("parameters do not match the recorded config: ") + e.what());
  }
}

}  // namespace pgu
