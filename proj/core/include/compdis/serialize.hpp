#pragma once

#include <string>
#include <utility>
#include <vector>

#include "compdis/tensor.hpp"

namespace compdis {

// Keyed binary tensor archive with an embedded JSON config string. Writes are
// atomic (temp file + rename).
struct Archive {
  std::string json_config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_archive(const std::string& path, const Archive& a);
Archive read_archive(const std::string& path);

// Raw little-endian byte helpers shared with the dataset container.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace compdis
