#include "ssr/corpus.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ssr/error.hpp"
#include "ssr/rng.hpp"

namespace ssr {

using nlohmann::json;

std::string glyph_grid_text(const std::string& image) {
  if (!is_glyph_image(image)) throw input_error("not a glyph image reference: " + image);
  return image.substr(6);
}

namespace {

Sample parse_record(const json& j, std::size_t line_no) {
  auto require_string = [&](const char* field) -> std::string {
    if (!j.contains(field) || !j[field].is_string() || j[field].get<std::string>().empty()) {
      std::string id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : "?";
      throw validation_error("manifest line " + std::to_string(line_no) + " (id " + id +
                             "): missing or empty field " + field);
    }
    return j[field].get<std::string>();
  };
  Sample s;
  s.id = require_string("id");
  s.image = require_string("image");
  s.target_text = require_string("target_text");
  if (j.contains("source_text") && !j["source_text"].is_null())
    s.source_text = j["source_text"].get<std::string>();
  if (j.contains("domain") && !j["domain"].is_null()) s.domain = j["domain"].get<std::string>();
  if (j.contains("lang_pair") && !j["lang_pair"].is_null())
    s.lang_pair = j["lang_pair"].get<std::string>();
  return s;
}

}  // namespace

Dataset load_manifest(const std::string& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open manifest: " + path);

  Dataset d;
  d.manifest_path = path;
  d.split_name = std::filesystem::path(path).stem().string();

  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw validation_error("manifest line " + std::to_string(line_no) +
                             ": malformed record: " + e.what());
    }
    Sample s = parse_record(j, line_no);
    if (!seen.insert(s.id).second)
      throw validation_error("manifest line " + std::to_string(line_no) + ": duplicate id \"" +
                             s.id + "\"");
    if (!is_glyph_image(s.image) && !std::filesystem::exists(s.image)) {
      if (strict)
        throw validation_error("manifest line " + std::to_string(line_no) + " (id " + s.id +
                               "): image path does not resolve: " + s.image);
      // non-strict: tolerated; resolution is re-checked when the image is used
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

void write_manifest(const Dataset& d, const std::string& path) {
  std::ostringstream out;
  for (const Sample& s : d.samples) {
    json j;
    j["id"] = s.id;
    j["image"] = s.image;
    j["target_text"] = s.target_text;
    if (s.source_text) j["source_text"] = *s.source_text;
    if (!s.domain.empty()) j["domain"] = s.domain;
    if (!s.lang_pair.empty()) j["lang_pair"] = s.lang_pair;
    out << j.dump() << "\n";
  }
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write manifest: " + path);
  f << out.str();
}

std::vector<Dataset> split(const Dataset& d, const std::vector<std::size_t>& sizes,
                           std::uint64_t seed) {
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (total > d.size())
    throw size_error("split sizes sum to " + std::to_string(total) + " but dataset has " +
                     std::to_string(d.size()) + " samples");

  Rng rng(seed);
  std::vector<std::size_t> order = shuffled_indices(d.size(), rng);

  std::vector<Dataset> out;
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    Dataset part;
    part.split_name = d.split_name + ".part" + std::to_string(k);
    part.samples.reserve(sizes[k]);
    for (std::size_t i = 0; i < sizes[k]; ++i) part.samples.push_back(d.samples[order[cursor++]]);
    out.push_back(std::move(part));
  }
  return out;
}

Dataset subsample(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n > d.size())
    throw size_error("subsample of " + std::to_string(n) + " from dataset of " +
                     std::to_string(d.size()));
  return std::move(split(d, {n}, seed)[0]);
}

}  // namespace ssr
