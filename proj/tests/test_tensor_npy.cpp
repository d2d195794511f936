#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "movia/npy.hpp"
#include "movia/rng.hpp"
#include "movia/tensor.hpp"

using namespace movia;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "movia_npy_test";
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("tensor basics") {
  TensorF t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  t(1, 2, 3) = 5.0f;
  REQUIRE(t[23] == 5.0f);
  TensorF r = t.reshaped({6, 4});
  REQUIRE(r(5, 3) == 5.0f);
  REQUIRE_THROWS_AS(t.reshaped({5, 5}), ContractError);
}

TEST_CASE("npy round trip is bit-identical") {
  Rng rng(7);
  TensorF t = rng.normal_tensor<float>({3, 5, 4, 2});
  fs::path p = temp_dir() / "rt.npy";
  save_tensor(p, t);
  TensorF back = load_tensor(p);
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) REQUIRE(back[i] == t[i]);
}

TEST_CASE("npy zero-element tensor") {
  TensorF t({0, 4, 2});
  fs::path p = temp_dir() / "empty.npy";
  save_tensor(p, t);
  TensorF back = load_tensor(p);
  REQUIRE(back.shape() == std::vector<int64_t>{0, 4, 2});
  REQUIRE(back.numel() == 0);
}

TEST_CASE("npy u8 masks round trip") {
  TensorU8 m({2, 2, 1});
  m[0] = 1;
  m[3] = 1;
  fs::path p = temp_dir() / "mask.npy";
  save_tensor(p, m);
  TensorU8 back = load_tensor_as<uint8_t>(p);
  REQUIRE(back[0] == 1);
  REQUIRE(back[1] == 0);
  TensorF widened = load_tensor(p);
  REQUIRE(widened[3] == 1.0f);
}

TEST_CASE("npy refuses NaN and writes nothing") {
  TensorF t({2, 2});
  t[1] = std::numeric_limits<float>::quiet_NaN();
  fs::path p = temp_dir() / "nan.npy";
  fs::remove(p);
  REQUIRE_THROWS_AS(save_tensor(p, t), ValidationError);
  REQUIRE(!fs::exists(p));
}

TEST_CASE("npy rejects big-endian payloads") {
  fs::path p = temp_dir() / "be.npy";
  {
    TensorF t({2, 2}, 1.0f);
    save_tensor(p, t);
    // rewrite the descr byte '<' -> '>'
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    std::string content((std::istreambuf_iterator<char>(f)), {});
    size_t at = content.find("<f4");
    REQUIRE(at != std::string::npos);
    f.seekp(static_cast<std::streamoff>(at));
    f.put('>');
  }
  REQUIRE_THROWS_WITH(load_tensor(p), Catch::Matchers::ContainsSubstring("big-endian"));
}

TEST_CASE("npy rejects bad magic with offset") {
  fs::path p = temp_dir() / "magic.npy";
  std::ofstream f(p, std::ios::binary);
  f << "NOTNPYxxxxxxxxxxxxxxxxxxxxxx";
  f.close();
  REQUIRE_THROWS_WITH(load_tensor(p), Catch::Matchers::ContainsSubstring("offset 0"));
}

TEST_CASE("npy rejects truncated payload") {
  fs::path p = temp_dir() / "trunc.npy";
  TensorF t({8, 8}, 2.0f);
  save_tensor(p, t);
  fs::resize_file(p, fs::file_size(p) - 17);
  REQUIRE_THROWS_AS(load_tensor(p), IoError);
}

TEST_CASE("rng determinism and fork independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());
  Rng c = Rng(42).fork(1);
  Rng d = Rng(42).fork(2);
  REQUIRE(c.next_u64() != d.next_u64());
}

TEST_CASE("rng normal moments") {
  Rng rng(3);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  REQUIRE(std::abs(s / n) < 0.01);
  REQUIRE(std::abs(s2 / n - 1.0) < 0.02);
}
