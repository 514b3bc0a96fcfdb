#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ssr {

// One DIMT record. `image` is either a file path or an inline glyph
// grid of the form "glyph:<rows separated by newlines>"; the inline
// form needs no assets on disk.
struct Sample {
  std::string id;
  std::string image;
  std::string target_text;               // markdown, target language
  std::optional<std::string> source_text;
  std::string domain;
  std::string lang_pair;                 // e.g. "en-zh"

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  std::string split_name;
  std::string manifest_path;

  std::size_t size() const { return samples.size(); }
};

inline bool is_glyph_image(const std::string& image) {
  return image.rfind("glyph:", 0) == 0;
}
// The grid text behind a "glyph:" reference.
std::string glyph_grid_text(const std::string& image);

// Line-delimited JSON manifest, one record per line, UTF-8. Field names
// are exactly {id, image, target_text, source_text, domain, lang_pair}.
// `strict` escalates validation warnings (currently: image paths that do
// not resolve on disk) to errors.
Dataset load_manifest(const std::string& path, bool strict = false);
void write_manifest(const Dataset& d, const std::string& path);

// Deterministic disjoint splits; Fisher-Yates over std::mt19937_64
// seeded by `seed`, then consecutive chunks of the shuffled order.
std::vector<Dataset> split(const Dataset& d, const std::vector<std::size_t>& sizes,
                           std::uint64_t seed);

// Deterministic n-element subset (same shuffle, first n).
Dataset subsample(const Dataset& d, std::size_t n, std::uint64_t seed);

}  // namespace ssr
