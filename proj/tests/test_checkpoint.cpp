#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "dccl/checkpoint.hpp"
#include "dccl/hashing.hpp"

using namespace dccl;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  fs::path dir = fs::temp_directory_path() / "dccl_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip is bit exact, including awkward doubles") {
  NamedTensors ts;
  Tensor odd({6}, {1.0 / 3.0, -0.0, std::numeric_limits<double>::denorm_min(),
                   3.141592653589793, -1e300, 5e-324});
  ts.emplace_back("odd", odd);
  ts.emplace_back("mat", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  ts.emplace_back("scalar", Tensor::scalar(-42.5));
  ts.emplace_back("empty_name_ok", Tensor({1}, {7.0}));

  fs::path p = temp_file("roundtrip.ckpt");
  write_checkpoint(p, ts);
  NamedTensors back = read_checkpoint(p);
  REQUIRE(back.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].first == ts[i].first);
    CHECK(back[i].second.shape() == ts[i].second.shape());
    REQUIRE(back[i].second.size() == ts[i].second.size());
    CHECK(std::memcmp(back[i].second.data(), ts[i].second.data(),
                      ts[i].second.size() * sizeof(double)) == 0);
  }
  CHECK(hash_tensor(find_tensor(back, "odd")) == hash_tensor(odd));
}

TEST_CASE("write leaves no temporary file behind") {
  fs::path p = temp_file("clean.ckpt");
  write_checkpoint(p, {{"t", Tensor({1}, {1.0})}});
  CHECK(fs::exists(p));
  fs::path tmp = p;
  tmp += ".tmp";
  CHECK(!fs::exists(tmp));
}

TEST_CASE("missing and corrupt files are reported") {
  CHECK_THROWS_AS(read_checkpoint(temp_file("missing.ckpt")),
                  std::runtime_error);

  fs::path bad = temp_file("bad.ckpt");
  {
    std::ofstream os(bad, std::ios::binary);
    os << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(read_checkpoint(bad), std::runtime_error);

  // Truncate a valid file in the middle of tensor values.
  fs::path trunc = temp_file("trunc.ckpt");
  write_checkpoint(trunc, {{"big", Tensor({100}, std::vector<double>(100, 1.0))}});
  const auto full = fs::file_size(trunc);
  fs::resize_file(trunc, full - 40);
  CHECK_THROWS_AS(read_checkpoint(trunc), std::runtime_error);
}

TEST_CASE("lookup helpers enforce names and shapes") {
  NamedTensors ts;
  ts.emplace_back("w", Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK_THROWS_AS(find_tensor(ts, "nope"), std::runtime_error);
  Tensor dst({2, 2});
  load_into(ts, "w", dst);
  CHECK(dst[3] == 4.0);
  Tensor wrong({4});
  CHECK_THROWS_AS(load_into(ts, "w", wrong), std::runtime_error);
}

}  // TEST_SUITE
