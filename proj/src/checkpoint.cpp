#include "xreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace xreg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {
constexpr const char* kMagic = "XREG1";

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size() || v == 0) throw FormatError("bad extent");
      shape.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: malformed shape '" + text + "'");
    }
  }
  if (shape.empty()) throw FormatError("checkpoint: empty shape");
  return shape;
}

std::string format_shape(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
  return out;
}
}  // namespace

const NamedArray& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("checkpoint has no array named '" + name + "'");
}

std::string Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return {};
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream head;
  head << kMagic << '\n';
  for (const auto& [k, v] : ckpt.metadata) head << "# " << k << ' ' << v << '\n';
  std::size_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (a.name.empty() || a.name.find_first_of(" \n\t") != std::string::npos) {
      throw std::invalid_argument("checkpoint array names must be non-empty without whitespace");
    }
    if (shape_numel(a.shape) != a.values.size()) throw std::invalid_argument("checkpoint array '" + a.name + "' shape mismatch");
    head << a.name << ' ' << format_shape(a.shape) << ' ' << offset << '\n';
    offset += a.values.size() * sizeof(float);
  }
  head << '\n';
  std::string out = head.str();
  const std::size_t start = out.size();
  out.resize(start + offset);
  std::size_t pos = start;
  for (const auto& a : ckpt.arrays) {
    std::memcpy(out.data() + pos, a.values.data(), a.values.size() * sizeof(float));
    pos += a.values.size() * sizeof(float);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  const auto next_line = [&]() {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos) throw FormatError("checkpoint: truncated manifest");
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    return line;
  };
  if (next_line() != kMagic) throw FormatError("checkpoint: missing XREG1 magic");

  Checkpoint ckpt;
  std::vector<std::size_t> offsets;
  for (std::string line = next_line(); !line.empty(); line = next_line()) {
    if (line[0] == '#') {
      const auto body = line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1);
      const auto sp = body.find(' ');
      ckpt.metadata.emplace_back(body.substr(0, sp), sp == std::string::npos ? "" : body.substr(sp + 1));
      continue;
    }
    std::istringstream ls(line);
    std::string name, shape, offset;
    if (!(ls >> name >> shape >> offset)) throw FormatError("checkpoint: malformed manifest line '" + line + "'");
    NamedArray a;
    a.name = name;
    a.shape = parse_shape(shape);
    try {
      offsets.push_back(std::stoull(offset));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: malformed offset in '" + line + "'");
    }
    ckpt.arrays.push_back(std::move(a));
  }

  const std::size_t payload = pos;
  for (std::size_t i = 0; i < ckpt.arrays.size(); ++i) {
    auto& a = ckpt.arrays[i];
    const std::size_t count = shape_numel(a.shape);
    const std::size_t begin = payload + offsets[i];
    if (begin + count * sizeof(float) > bytes.size()) throw FormatError("checkpoint: truncated payload for '" + a.name + "'");
    a.values.resize(count);
    std::memcpy(a.values.data(), bytes.data() + begin, count * sizeof(float));
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace xreg
