// Checkpoint files.
//
//   XREG1\n
//   # <key> <value...>\n              (metadata, optional, any number)
//   <name> <d0>x<d1>x... <offset>\n    (one line per array, offset in bytes
//   ...                                 from the start of the payload)
//   \n
//   <payload: IEEE-754 float32, little-endian, in manifest order>

#pragma once

#include "xreg/errors.hpp"
#include "xreg/tensor.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace xreg {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& get(const std::string& name) const;
  // Empty string when absent.
  std::string meta(const std::string& key) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace xreg
