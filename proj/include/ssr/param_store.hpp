#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ssr/kernels.hpp"

namespace ssr {

// Ordered registry of named matrices. Registration order is part of the
// identity: fingerprints and archives walk it front to back.
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols);

  std::size_t size() const { return mats_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Mat& operator[](std::size_t i) { return mats_[i]; }
  const Mat& operator[](std::size_t i) const { return mats_[i]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;

  std::size_t scalar_count() const;
  void zero_all();

  // Same names/shapes, all values zero. Used for gradient and moment
  // buffers.
  static ParamStore zeros_like(const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Mat> mats_;
  std::map<std::string, std::size_t> index_;
};

// Flat named-tensor archive: magic, a JSON metadata header (arbitrary
// fields plus the tensor manifest), then raw little-endian doubles in
// manifest order.
void write_tensor_archive(const std::filesystem::path& path, const std::string& magic,
                          const std::string& meta_json,
                          const std::vector<std::pair<std::string, const Mat*>>& tensors);

struct TensorArchive {
  std::string meta_json;
  std::vector<std::pair<std::string, Mat>> tensors;
};

// Throws io_error when the file is missing or the magic does not match.
TensorArchive read_tensor_archive(const std::filesystem::path& path, const std::string& magic);

}  // namespace ssr
