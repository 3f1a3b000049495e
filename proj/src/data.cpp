#include "kvd/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace kvd {

namespace {

// 5x5 bitmap font, one row per byte, bit 4 = leftmost pixel.
constexpr uint8_t kGlyphRows[36][5] = {
    {0b01110, 0b10001, 0b11111, 0b10001, 0b10001},  // A
    {0b11110, 0b10001, 0b11110, 0b10001, 0b11110},  // B
    {0b01111, 0b10000, 0b10000, 0b10000, 0b01111},  // C
    {0b11110, 0b10001, 0b10001, 0b10001, 0b11110},  // D
    {0b11111, 0b10000, 0b11110, 0b10000, 0b11111},  // E
    {0b11111, 0b10000, 0b11110, 0b10000, 0b10000},  // F
    {0b01111, 0b10000, 0b10011, 0b10001, 0b01111},  // G
    {0b10001, 0b10001, 0b11111, 0b10001, 0b10001},  // H
    {0b11111, 0b00100, 0b00100, 0b00100, 0b11111},  // I
    {0b00111, 0b00010, 0b00010, 0b10010, 0b01100},  // J
    {0b10001, 0b10010, 0b11100, 0b10010, 0b10001},  // K
    {0b10000, 0b10000, 0b10000, 0b10000, 0b11111},  // L
    {0b10001, 0b11011, 0b10101, 0b10001, 0b10001},  // M
    {0b10001, 0b11001, 0b10101, 0b10011, 0b10001},  // N
    {0b01110, 0b10001, 0b10001, 0b10001, 0b01110},  // O
    {0b11110, 0b10001, 0b11110, 0b10000, 0b10000},  // P
    {0b01110, 0b10001, 0b10101, 0b10010, 0b01101},  // Q
    {0b11110, 0b10001, 0b11110, 0b10010, 0b10001},  // R
    {0b01111, 0b10000, 0b01110, 0b00001, 0b11110},  // S
    {0b11111, 0b00100, 0b00100, 0b00100, 0b00100},  // T
    {0b10001, 0b10001, 0b10001, 0b10001, 0b01110},  // U
    {0b10001, 0b10001, 0b10001, 0b01010, 0b00100},  // V
    {0b10001, 0b10001, 0b10101, 0b11011, 0b10001},  // W
    {0b10001, 0b01010, 0b00100, 0b01010, 0b10001},  // X
    {0b10001, 0b01010, 0b00100, 0b00100, 0b00100},  // Y
    {0b11111, 0b00010, 0b00100, 0b01000, 0b11111},  // Z
    {0b01110, 0b10011, 0b10101, 0b11001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00110, 0b01000, 0b11111},  // 2
    {0b11110, 0b00001, 0b00110, 0b00001, 0b11110},  // 3
    {0b00010, 0b00110, 0b01010, 0b11111, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b11110},  // 5
    {0b01110, 0b10000, 0b11110, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b00100},  // 7
    {0b01110, 0b10001, 0b01110, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b01111, 0b00001, 0b01110},  // 9
};

constexpr uint8_t kShapeRows[4][5] = {
    {0b01110, 0b11111, 0b11111, 0b11111, 0b01110},  // circle
    {0b11111, 0b11111, 0b11111, 0b11111, 0b11111},  // square
    {0b00100, 0b00100, 0b01110, 0b01110, 0b11111},  // triangle
    {0b00100, 0b00100, 0b11111, 0b00100, 0b00100},  // cross
};

uint32_t pack_rows(const uint8_t rows[5]) {
  uint32_t v = 0;
  for (int r = 0; r < 5; ++r) v = (v << 5) | rows[r];
  return v;
}

int glyph_index(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= '0' && c <= '9') return 26 + (c - '0');
  throw std::invalid_argument(std::string("no bitmap for glyph '") + c + "'");
}

void stamp(ImageGrid& img, uint32_t bitmap, int x, int y, double intensity) {
  if (x < 0 || y < 0 || x + kStampSize > img.width || y + kStampSize > img.height) {
    throw std::out_of_range("render_image: stamp at (" + std::to_string(x) + "," +
                            std::to_string(y) + ") leaves the grid");
  }
  for (int r = 0; r < kStampSize; ++r) {
    for (int c = 0; c < kStampSize; ++c) {
      int bit = 24 - (r * kStampSize + c);
      if ((bitmap >> bit) & 1u) img.at(y + r, x + c) = intensity;
    }
  }
}

// Mask all-ones; labels supervise the tokens strictly after the answer marker
// (the answer words and the closing EOS).
Sample finish_sample(std::vector<int> tokens, SourceTag tag,
                     std::optional<ImageGrid> image = std::nullopt) {
  const auto& v = vocab();
  size_t a_pos = tokens.size();
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == v.a_marker) {
      a_pos = i;
      break;
    }
  }
  Sample s;
  s.mask.assign(tokens.size(), 1);
  s.labels.assign(tokens.size(), kIgnoreIndex);
  for (size_t t = 0; t + 1 < tokens.size(); ++t) {
    if (t + 1 > a_pos) s.labels[t] = tokens[t + 1];
  }
  s.tokens = std::move(tokens);
  s.image = std::move(image);
  s.tag = std::move(tag);
  return s;
}

// The four 12x12 cells a stamp can occupy, top-left corners.
constexpr int kCellOrigins[4][2] = {{3, 3}, {3, 15}, {15, 3}, {15, 15}};  // (y, x)

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("dataset file: truncated read");
  return v;
}

constexpr char kRecordMagic[8] = {'K', 'V', 'D', 'R', 'E', 'C', '0', '1'};

}  // namespace

Vocabulary::Vocabulary() {
  auto push = [this](const std::string& s) {
    symbols_.push_back(s);
    return static_cast<int>(symbols_.size()) - 1;
  };
  pad = push("<pad>");
  bos = push("<bos>");
  eos = push("<eos>");
  q_marker = push("<q>");
  a_marker = push("<a>");
  for (const char* c : {"red", "green", "blue", "yellow"}) color_ids.push_back(push(c));
  for (const char* s : {"circle", "square", "triangle", "cross"})
    shape_ids.push_back(push(s));
  for (const char* n :
       {"zero", "one", "two", "three", "four", "five", "six", "seven"})
    number_ids.push_back(push(n));
  for (const char* r : {"left-of", "right-of", "above", "below"})
    relation_ids.push_back(push(r));
  for (const char* w : {"how", "many", "where", "map", "copy"}) push(w);
  glyph_first_ = static_cast<int>(symbols_.size());
  for (char c = 'A'; c <= 'Z'; ++c) push(std::string(1, c));
  for (char c = '0'; c <= '9'; ++c) push(std::string(1, c));
}

int Vocabulary::id(const std::string& symbol) const {
  for (size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i] == symbol) return static_cast<int>(i);
  }
  throw std::out_of_range("vocabulary: unknown symbol '" + symbol + "'");
}

int Vocabulary::glyph_id(char c) const { return glyph_first_ + glyph_index(c); }

bool Vocabulary::is_glyph(int id) const {
  return id >= glyph_first_ && id < glyph_first_ + 36;
}

char Vocabulary::glyph_char(int id) const {
  int idx = id - glyph_first_;
  if (idx < 0 || idx >= 36) throw std::out_of_range("vocabulary: id is not a glyph");
  return idx < 26 ? static_cast<char>('A' + idx) : static_cast<char>('0' + idx - 26);
}

const Vocabulary& vocab() {
  static const Vocabulary v;
  return v;
}

uint32_t glyph_bitmap(char c) { return pack_rows(kGlyphRows[glyph_index(c)]); }

uint32_t shape_bitmap(int shape_index) {
  if (shape_index < 0 || shape_index >= 4) {
    throw std::out_of_range("shape_bitmap: index " + std::to_string(shape_index));
  }
  return pack_rows(kShapeRows[shape_index]);
}

double color_intensity(int color_index) {
  constexpr double kLevels[4] = {1.0, 0.75, 0.5, 0.25};
  if (color_index < 0 || color_index >= 4) {
    throw std::out_of_range("color_intensity: index " + std::to_string(color_index));
  }
  return kLevels[color_index];
}

ImageGrid render_image(const Scene& scene) {
  ImageGrid img;
  for (const auto& obj : scene.objects) {
    if (obj.kind == SceneObject::Kind::kShape) {
      stamp(img, shape_bitmap(obj.shape), obj.x, obj.y, color_intensity(obj.color));
    } else {
      stamp(img, glyph_bitmap(obj.glyph), obj.x, obj.y, 1.0);
    }
  }
  return img;
}

std::vector<Sample> gen_text_corpus(uint64_t seed, int n) {
  if (n < 1) throw std::invalid_argument("gen_text_corpus: n must be >= 1");
  const auto& v = vocab();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> family(0, 2);
  // Counts range over the full number-word list; multimodal scenes cap at four
  // objects, so the upper words are exercised by text data only.
  std::uniform_int_distribution<int> count_dist(1, 7);
  std::uniform_int_distribution<int> four(0, 3);
  std::uniform_int_distribution<int> eight(0, 7);
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  SourceTag tag{"text_corpus", SourceCategory::kLanguageHeavy};
  for (int i = 0; i < n; ++i) {
    std::vector<int> t{v.bos};
    switch (family(rng)) {
      case 0: {  // repeated color words, answer counts them
        int k = count_dist(rng);
        int c = four(rng);
        for (int j = 0; j < k; ++j) t.push_back(v.color_ids[static_cast<size_t>(c)]);
        t.insert(t.end(), {v.q_marker, v.id("how"), v.id("many"), v.a_marker,
                           v.number_ids[static_cast<size_t>(k)], v.eos});
        break;
      }
      case 1: {  // stated relation, answer recalls it
        int s1 = four(rng);
        int s2 = (s1 + 1 + std::uniform_int_distribution<int>(0, 2)(rng)) % 4;
        int r = four(rng);
        t.insert(t.end(), {v.shape_ids[static_cast<size_t>(s1)],
                           v.relation_ids[static_cast<size_t>(r)],
                           v.shape_ids[static_cast<size_t>(s2)], v.q_marker,
                           v.id("where"), v.shape_ids[static_cast<size_t>(s1)],
                           v.a_marker, v.relation_ids[static_cast<size_t>(r)], v.eos});
        break;
      }
      default: {  // digit glyph to number word
        int d = eight(rng);
        t.insert(t.end(), {v.glyph_id(static_cast<char>('0' + d)), v.q_marker,
                           v.id("map"), v.a_marker, v.number_ids[static_cast<size_t>(d)],
                           v.eos});
        break;
      }
    }
    out.push_back(finish_sample(std::move(t), tag));
  }
  return out;
}

std::vector<Sample> gen_lang_mm_samples(uint64_t seed, int n) {
  if (n < 1) throw std::invalid_argument("gen_lang_mm_samples: n must be >= 1");
  const auto& v = vocab();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> obj_count(1, 4);
  std::uniform_int_distribution<int> four(0, 3);
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  SourceTag tag{"lang_mm", SourceCategory::kLanguageHeavy};
  for (int i = 0; i < n; ++i) {
    int m = obj_count(rng);
    std::vector<int> cells{0, 1, 2, 3};
    std::shuffle(cells.begin(), cells.end(), rng);
    Scene scene;
    for (int j = 0; j < m; ++j) {
      SceneObject o;
      o.kind = SceneObject::Kind::kShape;
      o.shape = four(rng);
      o.color = four(rng);
      o.y = kCellOrigins[cells[static_cast<size_t>(j)]][0];
      o.x = kCellOrigins[cells[static_cast<size_t>(j)]][1];
      scene.objects.push_back(o);
    }
    bool relation_possible =
        m == 2 && scene.objects[0].shape != scene.objects[1].shape;
    int qt = std::uniform_int_distribution<int>(0, relation_possible ? 2 : 1)(rng);
    std::vector<int> t{v.bos, v.q_marker};
    if (qt == 0) {  // how many objects in total
      t.insert(t.end(), {v.id("how"), v.id("many"), v.a_marker,
                         v.number_ids[static_cast<size_t>(m)], v.eos});
    } else if (qt == 1) {  // how many of one color
      int c = four(rng);
      int k = 0;
      for (const auto& o : scene.objects)
        if (o.color == c) ++k;
      t.insert(t.end(), {v.id("how"), v.id("many"), v.color_ids[static_cast<size_t>(c)],
                         v.a_marker, v.number_ids[static_cast<size_t>(k)], v.eos});
    } else {  // spatial relation of the first shape to the second
      const auto& a = scene.objects[0];
      const auto& b = scene.objects[1];
      int rel;
      if (a.y == b.y) {
        rel = a.x < b.x ? 0 : 1;  // left-of / right-of
      } else {
        rel = a.y < b.y ? 2 : 3;  // above / below
      }
      t.insert(t.end(), {v.id("where"), v.shape_ids[static_cast<size_t>(a.shape)],
                         v.a_marker, v.relation_ids[static_cast<size_t>(rel)], v.eos});
    }
    out.push_back(finish_sample(std::move(t), tag, render_image(scene)));
  }
  return out;
}

std::vector<Sample> gen_ocr_mm_samples(uint64_t seed, int n) {
  if (n < 1) throw std::invalid_argument("gen_ocr_mm_samples: n must be >= 1");
  const auto& v = vocab();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len_dist(3, 6);
  std::uniform_int_distribution<int> glyph_dist(0, 35);
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  SourceTag tag{"ocr_copy", SourceCategory::kOcrHeavy};
  for (int i = 0; i < n; ++i) {
    int len = len_dist(rng);
    Scene scene;
    std::vector<int> t{v.bos, v.q_marker, v.id("copy"), v.a_marker};
    for (int j = 0; j < len; ++j) {
      int g = glyph_dist(rng);
      char c = g < 26 ? static_cast<char>('A' + g) : static_cast<char>('0' + g - 26);
      SceneObject o;
      o.kind = SceneObject::Kind::kGlyph;
      o.glyph = c;
      o.x = (j % 4) * 6;
      o.y = 2 + (j / 4) * 8;
      scene.objects.push_back(o);
      t.push_back(v.glyph_id(c));
    }
    t.push_back(v.eos);
    out.push_back(finish_sample(std::move(t), tag, render_image(scene)));
  }
  return out;
}

Batch collate_batch(const std::vector<Sample>& samples, int max_seq) {
  if (samples.empty()) throw std::invalid_argument("collate_batch: empty batch");
  size_t longest = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    if (static_cast<int>(samples[i].tokens.size()) > max_seq) {
      throw std::invalid_argument("collate_batch: sample " + std::to_string(i) +
                                  " has " + std::to_string(samples[i].tokens.size()) +
                                  " tokens, max_seq is " + std::to_string(max_seq));
    }
    longest = std::max(longest, samples[i].tokens.size());
  }
  Batch b;
  b.seq_len = static_cast<int>(longest);
  const auto& v = vocab();
  for (const auto& s : samples) {
    Sample padded = s;
    padded.tokens.resize(longest, v.pad);
    padded.mask.resize(longest, 0);
    padded.labels.resize(longest, kIgnoreIndex);
    b.examples.push_back(std::move(padded));
  }
  return b;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  for (const auto& e : entries) {
    os << "source=" << e.name << " category=" << category_name(e.category)
       << " count=" << e.count << " seed=" << e.seed << " params=" << e.params << "\n";
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    ManifestEntry e;
    while (ls >> field) {
      auto eq = field.find('=');
      if (eq == std::string::npos) {
        throw std::runtime_error("manifest: malformed field '" + field + "'");
      }
      std::string key = field.substr(0, eq), val = field.substr(eq + 1);
      if (key == "source") e.name = val;
      else if (key == "category") e.category = category_from_name(val);
      else if (key == "count") e.count = std::stoi(val);
      else if (key == "seed") e.seed = std::stoull(val);
      else if (key == "params") e.params = val;
      else throw std::runtime_error("manifest: unknown key '" + key + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_samples(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset: " + path);
  os.write(kRecordMagic, sizeof(kRecordMagic));
  write_pod(os, static_cast<uint32_t>(samples.size()));
  for (const auto& s : samples) {
    write_pod(os, static_cast<uint32_t>(s.tokens.size()));
    for (int t : s.tokens) write_pod(os, static_cast<int32_t>(t));
    for (int l : s.labels) write_pod(os, static_cast<int32_t>(l));
    os.write(reinterpret_cast<const char*>(s.mask.data()),
             static_cast<std::streamsize>(s.mask.size()));
    write_pod(os, static_cast<uint8_t>(s.tag.category == SourceCategory::kOcrHeavy));
    write_pod(os, static_cast<uint32_t>(s.tag.name.size()));
    os.write(s.tag.name.data(), static_cast<std::streamsize>(s.tag.name.size()));
    write_pod(os, static_cast<uint8_t>(s.image.has_value()));
    if (s.image) {
      write_pod(os, static_cast<uint32_t>(s.image->height));
      write_pod(os, static_cast<uint32_t>(s.image->width));
      os.write(reinterpret_cast<const char*>(s.image->pixels.data()),
               static_cast<std::streamsize>(s.image->pixels.size() * sizeof(double)));
    }
  }
}

std::vector<Sample> read_samples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read dataset: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kRecordMagic)) {
    throw std::runtime_error("dataset file: bad magic in " + path);
  }
  auto count = read_pod<uint32_t>(is);
  std::vector<Sample> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Sample s;
    auto n = read_pod<uint32_t>(is);
    s.tokens.resize(n);
    for (auto& t : s.tokens) t = read_pod<int32_t>(is);
    s.labels.resize(n);
    for (auto& l : s.labels) l = read_pod<int32_t>(is);
    s.mask.resize(n);
    is.read(reinterpret_cast<char*>(s.mask.data()), n);
    s.tag.category = read_pod<uint8_t>(is) ? SourceCategory::kOcrHeavy
                                           : SourceCategory::kLanguageHeavy;
    auto name_len = read_pod<uint32_t>(is);
    s.tag.name.resize(name_len);
    is.read(s.tag.name.data(), name_len);
    if (read_pod<uint8_t>(is)) {
      ImageGrid img;
      img.height = static_cast<int>(read_pod<uint32_t>(is));
      img.width = static_cast<int>(read_pod<uint32_t>(is));
      img.pixels.resize(static_cast<size_t>(img.height) * img.width);
      is.read(reinterpret_cast<char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size() * sizeof(double)));
      s.image = std::move(img);
    }
    if (!is) throw std::runtime_error("dataset file: truncated sample " + std::to_string(i));
    out.push_back(std::move(s));
  }
  return out;
}

uint64_t hash_sample(const Sample& s) {
  uint64_t h = fnv1a64(s.tokens.data(), s.tokens.size() * sizeof(int));
  h = fnv1a64(s.labels.data(), s.labels.size() * sizeof(int), h);
  h = fnv1a64(s.mask.data(), s.mask.size(), h);
  h = fnv1a64(s.tag.name.data(), s.tag.name.size(), h);
  if (s.image) {
    h = fnv1a64(s.image->pixels.data(), s.image->pixels.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace kvd
