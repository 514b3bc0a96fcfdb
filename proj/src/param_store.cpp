#include "ssr/param_store.hpp"

#include <cstring>
#include <fstream>

#include "nlohmann/json.hpp"
#include "ssr/error.hpp"
#include "ssr/util.hpp"

namespace ssr {

std::size_t ParamStore::add(const std::string& name, std::size_t rows, std::size_t cols) {
  if (index_.count(name)) throw config_error("duplicate parameter name: " + name);
  names_.push_back(name);
  mats_.emplace_back(rows, cols);
  index_[name] = mats_.size() - 1;
  return mats_.size() - 1;
}

Mat& ParamStore::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw config_error("unknown parameter: " + name);
  return mats_[it->second];
}

const Mat& ParamStore::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw config_error("unknown parameter: " + name);
  return mats_[it->second];
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& m : mats_) n += m.v.size();
  return n;
}

void ParamStore::zero_all() {
  for (auto& m : mats_) m.zero();
}

ParamStore ParamStore::zeros_like(const ParamStore& other) {
  ParamStore s;
  for (std::size_t i = 0; i < other.size(); ++i)
    s.add(other.name(i), other[i].rows, other[i].cols);
  return s;
}

void write_tensor_archive(const std::filesystem::path& path, const std::string& magic,
                          const std::string& meta_json,
                          const std::vector<std::pair<std::string, const Mat*>>& tensors) {
  nlohmann::ordered_json header;
  try {
    header["meta"] = nlohmann::ordered_json::parse(meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("tensor archive metadata is not valid JSON: ") + e.what());
  }
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const auto& [name, mat] : tensors) {
    manifest.push_back({{"name", name}, {"rows", mat->rows}, {"cols", mat->cols}});
  }
  header["tensors"] = std::move(manifest);
  const std::string header_text = header.dump();

  std::string blob;
  blob += magic;
  const std::uint64_t hlen = header_text.size();
  blob.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  blob += header_text;
  for (const auto& [name, mat] : tensors) {
    (void)name;
    blob.append(reinterpret_cast<const char*>(mat->v.data()), mat->v.size() * sizeof(double));
  }
  write_file_atomic(path, blob);
}

TensorArchive read_tensor_archive(const std::filesystem::path& path, const std::string& magic) {
  const std::string blob = read_file(path);
  if (blob.size() < magic.size() + sizeof(std::uint64_t) ||
      blob.compare(0, magic.size(), magic) != 0)
    throw io_error("not a " + magic + " archive: " + path.string());
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, blob.data() + magic.size(), sizeof(hlen));
  const std::size_t header_off = magic.size() + sizeof(hlen);
  if (header_off + hlen > blob.size()) throw io_error("truncated archive header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(header_off, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("bad archive header: ") + e.what());
  }

  TensorArchive out;
  out.meta_json = header.at("meta").dump();
  std::size_t off = header_off + hlen;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const auto rows = t.at("rows").get<std::size_t>();
    const auto cols = t.at("cols").get<std::size_t>();
    Mat m(rows, cols);
    const std::size_t bytes = m.v.size() * sizeof(double);
    if (off + bytes > blob.size()) throw io_error("truncated tensor data: " + path.string());
    std::memcpy(m.v.data(), blob.data() + off, bytes);
    off += bytes;
    out.tensors.emplace_back(name, std::move(m));
  }
  return out;
}

}  // namespace ssr
