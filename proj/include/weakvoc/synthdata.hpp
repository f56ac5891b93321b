#ifndef WEAKVOC_SYNTHDATA_HPP
#define WEAKVOC_SYNTHDATA_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "weakvoc/box.hpp"
#include "weakvoc/tensor.hpp"

namespace weakvoc::data {

/// Shape × colour class vocabulary; class id = shape_idx · |colors| + color_idx.
struct Vocabulary {
  std::vector<std::string> shapes;
  std::vector<std::string> colors;
  std::vector<int> base_ids;
  std::vector<int> novel_ids;

  /// Builds the vocabulary and marks `num_novel` index-matched
  /// (shape i mod S, colour i mod K) pairs as novel. Throws ConfigError when the
  /// split leaves a shape or colour without a base class.
  static Vocabulary make(std::vector<std::string> shapes, std::vector<std::string> colors, int num_novel);

  int num_classes() const { return static_cast<int>(shapes.size() * colors.size()); }
  int class_id(int shape, int color) const { return shape * static_cast<int>(colors.size()) + color; }
  int shape_of(int id) const { return id / static_cast<int>(colors.size()); }
  int color_of(int id) const { return id % static_cast<int>(colors.size()); }
  bool is_novel(int id) const;
  /// "<color> <shape>", e.g. "red circle".
  std::string name(int id) const;
  void validate() const;
};

Vocabulary default_vocabulary(int num_novel = 6);

/// One rendered image, float pixels in [0, 1], channel-major.
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<float> pixels;

  Tensor to_tensor() const;
  friend bool operator==(const Image&, const Image&) = default;
};

struct SceneObject {
  int class_id = 0;
  Box box;
  int z_order = 0;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

enum class SampleKind : std::uint8_t { detection = 0, weak = 1, caption = 2, test = 3 };
const char* kind_name(SampleKind kind);

struct Sample {
  SampleKind kind = SampleKind::detection;
  Image image;
  /// Box annotations visible to training (detection/test only).
  std::vector<SceneObject> objects;
  /// Image-level labels (weak) or the caption's class set (caption).
  std::vector<int> labels;
  std::string caption;
  /// Rendered objects that carry no training annotation. Diagnostics only.
  std::vector<SceneObject> hidden;

  /// Every rendered object, annotated or not, in z order.
  std::vector<SceneObject> all_objects() const;
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct SceneConfig {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 4;
  double max_iou = 0.3;
  double noise_sigma = 0.02;
  int min_side = 10;
  int max_side = 24;
  int max_tries = 100;
};

struct BenchmarkConfig {
  SceneConfig scene;
  int num_detection = 2000;
  int num_weak = 2000;
  int num_caption = 2000;
  int num_test = 500;
  int num_novel = 6;
  std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond", "cross"};
  std::vector<std::string> colors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
void to_json(nlohmann::json& j, const BenchmarkConfig& c);
void from_json(const nlohmann::json& j, BenchmarkConfig& c);

struct Scene {
  Image image;
  std::vector<SceneObject> objects;
};

struct Benchmark {
  Vocabulary vocab;
  BenchmarkConfig config;
  std::uint64_t seed = 0;
  std::vector<Sample> det_train;
  std::vector<Sample> weak_train;
  std::vector<Sample> caption_train;
  std::vector<Sample> test;
};

/// Per-sample seed derived from (master seed, split stream, index).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index);

/// Renders 1..max objects of uniformly drawn classes over a noisy grey
/// background. Pure function of `seed`. Objects whose placement fails
/// `max_tries` times are dropped, so pairwise IoU never exceeds `max_iou`.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config, const Vocabulary& vocab);

Benchmark build_benchmark(std::uint64_t seed, const BenchmarkConfig& config);

/// "a photo of a <color> <shape>[ and a <color> <shape>]..." in shuffled order.
std::string caption_of(std::span<const int> labels, const Vocabulary& vocab, std::mt19937_64& rng);
/// Exact text matching of a caption back to its sorted, de-duplicated class set.
/// Returns an empty set when the caption does not follow the template.
std::vector<int> parse_caption(const std::string& caption, const Vocabulary& vocab);

/// Writes the dataset file and a `meta.json` sidecar next to it.
void save_dataset(const std::filesystem::path& path, const Benchmark& bench);
Benchmark load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_dataset(const Benchmark& bench);
/// Decodes samples into the four splits; vocab/config come from the sidecar.
void decode_samples(std::span<const std::uint8_t> bytes, Benchmark& bench);
nlohmann::json dataset_meta(const Benchmark& bench);

/// 64-bit FNV-1a over a byte range.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);
std::uint64_t file_hash(const std::filesystem::path& path);

/// Bilinear resize (half-pixel centres), used to downscale weak images.
Image resize_bilinear(const Image& img, int height, int width);
Image hflip(const Image& img);

}  // namespace weakvoc::data

#endif  // WEAKVOC_SYNTHDATA_HPP
