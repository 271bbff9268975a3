#include "compdis/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace compdis {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'A', 'R', 'C', 'H', '0', '1'};

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& in, size_t& pos) {
  if (pos + 8 > in.size()) throw std::runtime_error("archive: truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_archive(const std::string& path, const Archive& a) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u64(out, a.json_config.size());
  out.append(a.json_config);
  put_u64(out, a.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    put_u64(out, name.size());
    out.append(name);
    put_u64(out, static_cast<uint64_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u64(out, static_cast<uint64_t>(t.dim(i)));
    put_u64(out, t.numel());
    const size_t bytes = t.numel() * sizeof(double);
    const size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, t.data(), bytes);
  }
  write_file_atomic(path, out);
}

Archive read_archive(const std::string& path) {
  const std::string in = read_file(path);
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("archive: bad magic in " + path);
  size_t pos = sizeof(kMagic);
  Archive a;
  const uint64_t json_len = get_u64(in, pos);
  if (pos + json_len > in.size()) throw std::runtime_error("archive: truncated config");
  a.json_config = in.substr(pos, json_len);
  pos += json_len;
  const uint64_t count = get_u64(in, pos);
  for (uint64_t i = 0; i < count; ++i) {
    const uint64_t name_len = get_u64(in, pos);
    if (pos + name_len > in.size()) throw std::runtime_error("archive: truncated name");
    std::string name = in.substr(pos, name_len);
    pos += name_len;
    const uint64_t rank = get_u64(in, pos);
    std::vector<int> shape;
    for (uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(get_u64(in, pos)));
    const uint64_t n = get_u64(in, pos);
    if (n != shape_numel(shape)) throw std::runtime_error("archive: shape/count mismatch");
    const size_t bytes = n * sizeof(double);
    if (pos + bytes > in.size()) throw std::runtime_error("archive: truncated data");
    std::vector<double> data(n);
    std::memcpy(data.data(), in.data() + pos, bytes);
    pos += bytes;
    a.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return a;
}

}  // namespace compdis
