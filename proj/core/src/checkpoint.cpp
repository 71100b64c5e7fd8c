#include "dccl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dccl {
namespace {

constexpr std::uint64_t kMagic = 0x31504B43'4C434344ull;  // "DCCLCKP1"

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& why) {
  throw std::runtime_error("checkpoint " + path.string() + ": " + why);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
    put_u64(os, kMagic);
    put_u64(os, tensors.size());
    for (const auto& [name, t] : tensors) {
      put_u64(os, name.size());
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u64(os, t.rank());
      for (std::size_t e : t.shape()) put_u64(os, e);
      static_assert(sizeof(double) == 8);
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  if (get_u64(is) != kMagic || !is) corrupt(path, "bad magic");
  const std::uint64_t count = get_u64(is);
  if (!is || count > (1ull << 20)) corrupt(path, "bad tensor count");
  NamedTensors out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = get_u64(is);
    if (!is || name_len > 4096) corrupt(path, "bad name length");
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = get_u64(is);
    if (!is || rank > 8) corrupt(path, "bad rank for " + name);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<std::size_t>(get_u64(is));
      n *= shape[r];
    }
    if (!is || n > (1ull << 31)) corrupt(path, "bad shape for " + name);
    std::vector<double> values(n);
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) corrupt(path, "truncated values for " + name);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

const Tensor& find_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: tensor '" + name + "' not found");
}

void load_into(const NamedTensors& ts, const std::string& name, Tensor& dst) {
  const Tensor& src = find_tensor(ts, name);
  if (!src.same_shape(dst))
    throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                             shape_str(src.shape()) + ", expected " +
                             shape_str(dst.shape()));
  dst = src;
}

}  // namespace dccl
