#include "crlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace crlab {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'L', 'A', 'B', 'C', 'K', 'P'};
constexpr int kFormatVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config_hash"] = ck.config_hash;
  manifest["step"] = ck.step;
  manifest["meta"] = ck.meta;
  auto table = nlohmann::json::array();
  for (const auto& [name, e] : ck.arrays)
    table.push_back({{"name", name},
                     {"rows", e.data.rows()},
                     {"cols", e.data.cols()},
                     {"dtype", e.wide ? "f64" : "f32"}});
  manifest["arrays"] = std::move(table);
  const std::string bytes = manifest.dump();

  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    std::uint64_t len = bytes.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(bytes.data(), std::streamsize(bytes.size()));
    for (const auto& [name, e] : ck.arrays) {
      if (e.wide) {
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  std::streamsize(std::size_t(e.data.size()) * 8));
      } else {
        MatT<float> narrow = e.data.cast<float>();
        out.write(reinterpret_cast<const char*>(narrow.data()),
                  std::streamsize(std::size_t(narrow.size()) * 4));
      }
    }
    out.flush();
    if (!out) throw IoError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());

  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError("checkpoint: truncated manifest length");
  std::string bytes(len, '\0');
  in.read(bytes.data(), std::streamsize(len));
  if (!in) throw IoError("checkpoint: truncated manifest");

  nlohmann::json manifest = nlohmann::json::parse(bytes, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object())
    throw IoError("checkpoint: manifest is not valid JSON");
  if (manifest.value("format_version", -1) != kFormatVersion)
    throw IoError("checkpoint: unsupported format version");

  Checkpoint ck;
  ck.config_hash = manifest.value("config_hash", std::string());
  ck.step = manifest.value("step", std::uint64_t(0));
  ck.meta = manifest.value("meta", nlohmann::json::object());

  for (const auto& item : manifest.value("arrays", nlohmann::json::array())) {
    const auto name = item.at("name").get<std::string>();
    const auto rows = item.at("rows").get<Eigen::Index>();
    const auto cols = item.at("cols").get<Eigen::Index>();
    const auto dtype = item.at("dtype").get<std::string>();
    if (ck.arrays.count(name))
      throw IoError("checkpoint: duplicate array " + name);
    Checkpoint::Entry e;
    e.wide = dtype == "f64";
    if (!e.wide && dtype != "f32")
      throw IoError("checkpoint: unknown dtype " + dtype);
    if (e.wide) {
      MatT<double> m(rows, cols);
      in.read(reinterpret_cast<char*>(m.data()),
              std::streamsize(std::size_t(m.size()) * 8));
      e.data = std::move(m);
    } else {
      MatT<float> m(rows, cols);
      in.read(reinterpret_cast<char*>(m.data()),
              std::streamsize(std::size_t(m.size()) * 4));
      e.data = m.cast<double>();
    }
    if (!in) throw IoError("checkpoint: truncated payload for " + name);
    ck.arrays.emplace(name, std::move(e));
  }
  return ck;
}

}  // namespace crlab
