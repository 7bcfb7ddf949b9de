#pragma once

// File-backed data paths: the Omniglot directory tree, the episode record
// format used by the `gen` subcommand, and PNG dumps of rendered inputs.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "metabias/png.hpp"
#include "metabias/tasks.hpp"

namespace metabias {

// ---------------------------------------------------------------------------
// Omniglot ingestion. Expected layout: <root>/<alphabet>/<character>/*.png,
// or a root containing images_background/ (training alphabets) and
// images_evaluation/ (held-out alphabets). Images are converted to 32x32
// grayscale in [0,1] with ink mapped to 1.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::filesystem::path> sorted_entries(
    const std::filesystem::path& dir, bool dirs_only) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (dirs_only && !e.is_directory()) continue;
    if (!dirs_only && e.is_directory()) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Tensor load_glyph(const std::filesystem::path& path) {
  GrayImage img = read_png_gray(path.string());
  GrayImage small = resize_area(img, kImageSize, kImageSize);
  std::vector<double> data(small.pixels.size());
  for (size_t i = 0; i < data.size(); ++i)
    data[i] = 1.0 - small.pixels[i];  // strokes are dark on white
  return Tensor(Shape{1, kImageSize, kImageSize}, std::move(data));
}

inline void scan_alphabet_tree(const std::filesystem::path& root,
                               OmniglotIndex& index) {
  for (const auto& alphabet_dir : sorted_entries(root, /*dirs_only=*/true)) {
    std::string alphabet = alphabet_dir.filename().string();
    for (const auto& char_dir : sorted_entries(alphabet_dir, true)) {
      OmniglotIndex::Character ch;
      ch.alphabet = alphabet;
      ch.name = char_dir.filename().string();
      for (const auto& png : sorted_entries(char_dir, false)) {
        if (png.extension() != ".png") continue;
        ch.exemplars.push_back(load_glyph(png));
      }
      if (!ch.exemplars.empty()) index.characters.push_back(std::move(ch));
    }
  }
}

}  // namespace detail

struct OmniglotData {
  OmniglotIndex background;  // meta-training alphabets
  OmniglotIndex evaluation;  // held-out alphabets (may be empty)
};

inline OmniglotData load_omniglot(const std::string& root,
                                  const std::string& category_map_text) {
  namespace fs = std::filesystem;
  if (!fs::exists(root))
    throw DataError("omniglot root does not exist: " + root);
  OmniglotData data;
  fs::path base(root);
  if (fs::exists(base / "images_background")) {
    detail::scan_alphabet_tree(base / "images_background", data.background);
    if (fs::exists(base / "images_evaluation"))
      detail::scan_alphabet_tree(base / "images_evaluation", data.evaluation);
  } else {
    detail::scan_alphabet_tree(base, data.background);
  }
  if (data.background.characters.empty())
    throw DataError("no characters found under " + root);
  data.background.categories = parse_category_map(category_map_text);
  data.background.validate();
  if (!data.evaluation.characters.empty()) data.evaluation.validate();
  return data;
}

// ---------------------------------------------------------------------------
// Episode records. Binary layout (little-endian):
//   magic "MBEP", u32 version=1
//   u8 task, u8 representation, u8 label_kind, u8 reserved
//   u32 episode count, then per episode:
//     u32 formula length + bytes, i32 modulus,
//     u32 class-name count, each u32 length + bytes,
//     support tensor (u32 rank, i64 dims..., f64 values...),
//     u32 target count + f64 targets, then the same pair for the query.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("episode file truncated");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_raw<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  uint32_t n = get_raw<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("episode file truncated");
  return s;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  put_raw<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) put_raw<int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline Tensor get_tensor(std::istream& is) {
  uint32_t rank = get_raw<uint32_t>(is);
  if (rank > 8) throw DataError("episode file corrupt: rank " +
                                std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_raw<int64_t>(is);
  int64_t n = shape_numel(shape);
  if (n < 0 || n > (1LL << 32))
    throw DataError("episode file corrupt: shape " + shape_str(shape));
  std::vector<double> data(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw DataError("episode file truncated");
  return Tensor(std::move(shape), std::move(data));
}

inline void put_values(std::ostream& os, const std::vector<double>& v) {
  put_raw<uint32_t>(os, static_cast<uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> get_values(std::istream& is) {
  uint32_t n = get_raw<uint32_t>(is);
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw DataError("episode file truncated");
  return v;
}

}  // namespace detail

inline constexpr uint32_t kEpisodeFormatVersion = 1;

inline void write_episodes(const std::string& path,
                           const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ConfigError("write_episodes: nothing to write");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os.write("MBEP", 4);
  detail::put_raw<uint32_t>(os, kEpisodeFormatVersion);
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(episodes[0].task));
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(episodes[0].repr));
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(episodes[0].label_kind));
  detail::put_raw<uint8_t>(os, 0);
  detail::put_raw<uint32_t>(os, static_cast<uint32_t>(episodes.size()));
  for (const Episode& e : episodes) {
    detail::put_string(os, e.formula);
    detail::put_raw<int32_t>(os, e.modulus);
    detail::put_raw<uint32_t>(os, static_cast<uint32_t>(e.class_names.size()));
    for (const auto& n : e.class_names) detail::put_string(os, n);
    detail::put_tensor(os, e.support_x);
    detail::put_values(os, e.support_y);
    detail::put_tensor(os, e.query_x);
    detail::put_values(os, e.query_y);
  }
}

inline std::vector<Episode> read_episodes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "MBEP")
    throw DataError(path + " is not an episode file");
  uint32_t version = detail::get_raw<uint32_t>(is);
  if (version != kEpisodeFormatVersion)
    throw DataError("unsupported episode format version " +
                    std::to_string(version));
  TaskKind task = static_cast<TaskKind>(detail::get_raw<uint8_t>(is));
  Representation repr =
      static_cast<Representation>(detail::get_raw<uint8_t>(is));
  LabelKind label = static_cast<LabelKind>(detail::get_raw<uint8_t>(is));
  detail::get_raw<uint8_t>(is);
  uint32_t count = detail::get_raw<uint32_t>(is);
  std::vector<Episode> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Episode e;
    e.task = task;
    e.repr = repr;
    e.label_kind = label;
    e.formula = detail::get_string(is);
    e.modulus = detail::get_raw<int32_t>(is);
    uint32_t nc = detail::get_raw<uint32_t>(is);
    for (uint32_t c = 0; c < nc; ++c)
      e.class_names.push_back(detail::get_string(is));
    e.support_x = detail::get_tensor(is);
    e.support_y = detail::get_values(is);
    e.query_x = detail::get_tensor(is);
    e.query_y = detail::get_values(is);
    out.push_back(std::move(e));
  }
  return out;
}

// PNG dumps of episode inputs, one file per example.
inline void dump_episode_images(const Episode& e, const std::string& dir,
                                int episode_idx) {
  if (e.repr != Representation::Image)
    throw ConfigError("dump_episode_images: episode is not image-typed");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto dump_split = [&](const Tensor& x, const std::vector<double>& y,
                        const char* split) {
    int64_t n = x.dim(0), c = x.dim(1);
    int64_t plane = kImageSize * kImageSize;
    for (int64_t i = 0; i < n; ++i) {
      std::string name = dir + "/ep" + std::to_string(episode_idx) + "_" +
                         split + std::to_string(i) + "_y" +
                         std::to_string(y[static_cast<size_t>(i)]) + ".png";
      write_png(name, x.data().data() + i * c * plane, static_cast<int>(c),
                kImageSize, kImageSize);
    }
  };
  dump_split(e.support_x, e.support_y, "support");
  dump_split(e.query_x, e.query_y, "query");
}

}  // namespace metabias
