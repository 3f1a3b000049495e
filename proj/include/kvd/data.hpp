#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kvd/objective.hpp"

namespace kvd {

/// Fixed ordered symbol table shared by every generator and model.
class Vocabulary {
 public:
  Vocabulary();

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbol(int id) const { return symbols_[static_cast<size_t>(id)]; }
  int id(const std::string& symbol) const;
  int glyph_id(char c) const;  // 'A'..'Z', '0'..'9'
  bool is_glyph(int id) const;
  char glyph_char(int id) const;

  int pad, bos, eos, q_marker, a_marker;
  std::vector<int> color_ids;     // red green blue yellow
  std::vector<int> shape_ids;     // circle square triangle cross
  std::vector<int> number_ids;    // zero .. seven
  std::vector<int> relation_ids;  // left-of right-of above below

 private:
  std::vector<std::string> symbols_;
  std::vector<int> glyph_ids_;  // by char
  int glyph_first_ = 0;
};

const Vocabulary& vocab();

constexpr int kImageSize = 24;
constexpr int kStampSize = 5;

struct ImageGrid {
  int height = kImageSize;
  int width = kImageSize;
  std::vector<double> pixels;  // row-major, [0,1]

  ImageGrid() : pixels(static_cast<size_t>(kImageSize) * kImageSize, 0.0) {}
  double& at(int y, int x) { return pixels[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

struct SceneObject {
  enum class Kind { kShape, kGlyph } kind = Kind::kShape;
  int shape = 0;   // index into vocab().shape_ids
  int color = 0;   // index into vocab().color_ids
  char glyph = 'A';
  int x = 0, y = 0;  // top-left of the 5x5 stamp
};

struct Scene {
  std::vector<SceneObject> objects;
};

/// 25-bit row-major stamp for a glyph ('A'-'Z', '0'-'9') or shape index.
uint32_t glyph_bitmap(char c);
uint32_t shape_bitmap(int shape_index);
double color_intensity(int color_index);

ImageGrid render_image(const Scene& scene);

struct Sample {
  std::vector<int> tokens;
  std::vector<uint8_t> mask;   // 1 = real token
  std::vector<int> labels;     // next-token targets on the answer span, else -100
  std::optional<ImageGrid> image;
  SourceTag tag;
};

std::vector<Sample> gen_text_corpus(uint64_t seed, int n);
std::vector<Sample> gen_lang_mm_samples(uint64_t seed, int n);
std::vector<Sample> gen_ocr_mm_samples(uint64_t seed, int n);

struct Batch {
  std::vector<Sample> examples;  // right-padded to a common length
  int seq_len = 0;
};

Batch collate_batch(const std::vector<Sample>& samples, int max_seq);

struct ManifestEntry {
  std::string name;
  SourceCategory category;
  int count = 0;
  uint64_t seed = 0;
  std::string params;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

void write_samples(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_samples(const std::string& path);

uint64_t hash_sample(const Sample& s);

}  // namespace kvd
