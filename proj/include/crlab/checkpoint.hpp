#pragma once

// Single-file checkpoint archive: an 8-byte magic, a length-prefixed JSON
// manifest (format version, config hash, step count, array table, free-form
// metadata) and the raw little-endian array payloads in manifest order.
// Parameters are stored at their training width (f32); trajectory state that
// must survive a resume bit-exactly (environment physics, replay contents)
// is stored as f64.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "crlab/nn.hpp"
#include "json.hpp"

namespace crlab {

static_assert(std::endian::native == std::endian::little,
              "archive payloads are little-endian");

struct Checkpoint {
  struct Entry {
    MatT<double> data;
    bool wide = false;  // true: f64 payload, false: f32
  };

  std::string config_hash;
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Entry> arrays;

  bool has(const std::string& name) const { return arrays.count(name) != 0; }

  void put_f32(const std::string& name, const MatT<float>& m) {
    arrays[name] = Entry{m.cast<double>(), false};
  }
  void put_f64(const std::string& name, const MatT<double>& m) {
    arrays[name] = Entry{m, true};
  }

  MatT<float> f32(const std::string& name) const {
    const Entry& e = entry(name);
    check(!e.wide, "checkpoint: array " + name + " stored as f64");
    return e.data.cast<float>();
  }
  const MatT<double>& f64(const std::string& name) const {
    const Entry& e = entry(name);
    check(e.wide, "checkpoint: array " + name + " stored as f32");
    return e.data;
  }

  // Parameter stores round-trip under a name prefix, one array per entry.
  template <class S>
  void put_params(const ParamStore<S>& ps, const std::string& prefix) {
    for (const auto& [name, value] : ps.entries) {
      if constexpr (std::is_same_v<S, double>)
        put_f64(prefix + name, value);
      else
        put_f32(prefix + name, value.template cast<float>());
    }
  }

  template <class S>
  ParamStore<S> params(const std::string& prefix) const {
    ParamStore<S> ps;
    for (const auto& [name, e] : arrays) {
      if (name.rfind(prefix, 0) != 0) continue;
      std::string key = name.substr(prefix.size());
      if constexpr (std::is_same_v<S, double>)
        ps.add(key, f64(name));
      else
        ps.add(key, f32(name).template cast<S>());
    }
    return ps;
  }

 private:
  const Entry& entry(const std::string& name) const {
    auto it = arrays.find(name);
    check(it != arrays.end(), "checkpoint: missing array " + name);
    return it->second;
  }
};

// Writes to a temporary sibling and renames, so a crash mid-write never
// clobbers the previous checkpoint.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);

// Throws IoError on missing files, bad magic, manifest damage, or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace crlab
