#include <cstdint>
#include <filesystem>
#include <fstream>

#include "crlab/checkpoint.hpp"
#include "doctest.h"

using namespace crlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / (stem + ".ckpt");
}

}  // namespace

TEST_CASE("checkpoint round-trip preserves every bit") {
  Checkpoint ck;
  ck.config_hash = "deadbeef01234567";
  ck.step = 123456789;
  ck.meta["mode"] = "crssm";
  ck.meta["ctx_lo"] = {4.9, 0.35};
  ck.meta["rng_counter"] = std::uint64_t(0xDEADBEEF12345678ull);

  Rng rng(17);
  MatT<float> w = MatT<float>::NullaryExpr(7, 5, [&] {
    return float(rng.normal());
  });
  MatT<double> env_state =
      MatT<double>::NullaryExpr(4, 1, [&] { return rng.uniform(-1.0, 1.0); });
  ck.put_f32("params/wm/gru/wx", w);
  ck.put_f64("env/state", env_state);

  fs::path path = temp_file("roundtrip");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.config_hash == ck.config_hash);
  CHECK(back.step == ck.step);
  CHECK(back.meta.at("mode") == "crssm");
  CHECK(back.meta.at("rng_counter").get<std::uint64_t>() ==
        std::uint64_t(0xDEADBEEF12345678ull));
  CHECK(back.f32("params/wm/gru/wx") == w);
  CHECK(back.f64("env/state") == env_state);
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  fs::remove(path);
}

TEST_CASE("parameter stores round-trip under a prefix") {
  ParamStore<float> ps;
  Rng rng(3);
  add_mlp(ps, "wm/dec", 6, 5, 2, rng);
  add_dense_head(ps, "wm/dec/obs", 5, 4, rng);

  Checkpoint ck;
  ck.put_params(ps, "params/");
  fs::path path = temp_file("params");
  save_checkpoint(path, ck);

  Checkpoint back = load_checkpoint(path);
  ParamStore<float> restored = back.params<float>("params/");
  REQUIRE(restored.entries.size() == ps.entries.size());
  for (const auto& [name, value] : ps.entries)
    CHECK(restored.at(name) == value);
  fs::remove(path);
}

TEST_CASE("manifest layout is inspectable without the loader") {
  Checkpoint ck;
  ck.config_hash = "cafe";
  ck.step = 42;
  ck.put_f32("a", MatT<float>::Ones(2, 3));
  fs::path path = temp_file("manifest");
  save_checkpoint(path, ck);

  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "CRLABCKP");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string bytes(len, '\0');
  in.read(bytes.data(), std::streamsize(len));
  REQUIRE(bool(in));

  auto manifest = nlohmann::json::parse(bytes);
  CHECK(manifest.at("format_version") == 1);
  CHECK(manifest.at("config_hash") == "cafe");
  CHECK(manifest.at("step") == 42);
  REQUIRE(manifest.at("arrays").size() == 1);
  CHECK(manifest["arrays"][0].at("name") == "a");
  CHECK(manifest["arrays"][0].at("rows") == 2);
  CHECK(manifest["arrays"][0].at("cols") == 3);
  CHECK(manifest["arrays"][0].at("dtype") == "f32");

  // Payload: six little-endian f32 ones follow immediately.
  float payload[6];
  in.read(reinterpret_cast<char*>(payload), sizeof(payload));
  REQUIRE(bool(in));
  for (float x : payload) CHECK(x == 1.0f);
  fs::remove(path);
}

TEST_CASE("checkpoint loader rejects damage") {
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_file("nonexistent")), IoError);
  }

  SUBCASE("bad magic") {
    fs::path path = temp_file("badmagic");
    std::ofstream(path, std::ios::binary) << "NOTMYFMT garbage";
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
  }

  SUBCASE("truncated payload") {
    Checkpoint ck;
    ck.put_f32("a", MatT<float>::Ones(64, 64));
    fs::path path = temp_file("truncated");
    save_checkpoint(path, ck);
    auto full = fs::file_size(path);
    fs::resize_file(path, full - 128);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
  }

  SUBCASE("manifest not json") {
    fs::path path = temp_file("badmanifest");
    std::ofstream out(path, std::ios::binary);
    out.write("CRLABCKP", 8);
    std::uint64_t len = 4;
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write("oops", 4);
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
  }

  SUBCASE("reading an f64 array as f32 is a contract violation") {
    Checkpoint ck;
    ck.put_f64("wide", MatT<double>::Ones(1, 1));
    CHECK_THROWS_AS(ck.f32("wide"), ContractError);
    CHECK_THROWS_AS(ck.f64("absent"), ContractError);
  }
}

TEST_CASE("saving over an existing checkpoint replaces it") {
  fs::path path = temp_file("replace");
  Checkpoint first;
  first.step = 1;
  save_checkpoint(path, first);
  Checkpoint second;
  second.step = 2;
  save_checkpoint(path, second);
  CHECK(load_checkpoint(path).step == 2);
  fs::remove(path);
}
