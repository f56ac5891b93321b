#include "weakvoc/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "weakvoc/parallel.hpp"

namespace weakvoc::data {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::make(std::vector<std::string> shapes, std::vector<std::string> colors, int num_novel) {
  Vocabulary v;
  v.shapes = std::move(shapes);
  v.colors = std::move(colors);
  if (v.shapes.empty() || v.colors.empty()) throw ConfigError("vocabulary needs at least one shape and one colour");
  const int S = static_cast<int>(v.shapes.size());
  const int K = static_cast<int>(v.colors.size());
  if (num_novel < 0 || num_novel > v.num_classes()) {
    throw ConfigError("num_novel " + std::to_string(num_novel) + " outside [0, " + std::to_string(v.num_classes()) + "]");
  }
  std::set<int> novel;
  for (int i = 0; i < num_novel; ++i) {
    const int id = v.class_id(i % S, i % K);
    if (!novel.insert(id).second) {
      throw ConfigError("num_novel " + std::to_string(num_novel) + " repeats the index-matched pair of class " +
                        std::to_string(id));
    }
  }
  v.novel_ids.assign(novel.begin(), novel.end());
  for (int id = 0; id < v.num_classes(); ++id) {
    if (!novel.count(id)) v.base_ids.push_back(id);
  }
  v.validate();
  return v;
}

void Vocabulary::validate() const {
  std::vector<bool> shape_seen(shapes.size(), false), color_seen(colors.size(), false);
  for (int id : base_ids) {
    shape_seen[static_cast<std::size_t>(shape_of(id))] = true;
    color_seen[static_cast<std::size_t>(color_of(id))] = true;
  }
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    if (!shape_seen[s]) throw ConfigError("novel split leaves shape '" + shapes[s] + "' without a base class");
  }
  for (std::size_t c = 0; c < colors.size(); ++c) {
    if (!color_seen[c]) throw ConfigError("novel split leaves colour '" + colors[c] + "' without a base class");
  }
  if (base_ids.size() + novel_ids.size() != static_cast<std::size_t>(num_classes())) {
    throw ConfigError("base and novel ids do not partition the vocabulary");
  }
}

bool Vocabulary::is_novel(int id) const { return std::binary_search(novel_ids.begin(), novel_ids.end(), id); }

std::string Vocabulary::name(int id) const {
  return colors[static_cast<std::size_t>(color_of(id))] + " " + shapes[static_cast<std::size_t>(shape_of(id))];
}

Vocabulary default_vocabulary(int num_novel) {
  BenchmarkConfig c;
  return Vocabulary::make(c.shapes, c.colors, num_novel);
}

// ---------------------------------------------------------------------------
// Images

Tensor Image::to_tensor() const {
  Tensor t(Shape{channels, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) t[static_cast<Index>(i)] = pixels[i];
  return t;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height <= 0 || width <= 0) throw ValidationError("resize to non-positive size");
  if (height == img.height && width == img.width) return img;
  Image out{img.channels, height, width, std::vector<float>(static_cast<std::size_t>(img.channels * height * width))};
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int c = 0; c < img.channels; ++c) {
    const float* src = img.pixels.data() + static_cast<std::ptrdiff_t>(c) * img.height * img.width;
    for (int y = 0; y < height; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double ay = fy - y0;
      for (int x = 0; x < width; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, img.width - 1);
        const double ax = fx - x0;
        const double v = (1 - ay) * ((1 - ax) * src[y0 * img.width + x0] + ax * src[y0 * img.width + x1]) +
                         ay * ((1 - ax) * src[y1 * img.width + x0] + ax * src[y1 * img.width + x1]);
        out.pixels[static_cast<std::size_t>((c * height + y) * width + x)] = static_cast<float>(v);
      }
    }
  }
  return out;
}

Image hflip(const Image& img) {
  Image out = img;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      const std::size_t row = static_cast<std::size_t>((c * img.height + y) * img.width);
      std::reverse(out.pixels.begin() + static_cast<std::ptrdiff_t>(row),
                   out.pixels.begin() + static_cast<std::ptrdiff_t>(row + static_cast<std::size_t>(img.width)));
    }
  }
  return out;
}

const char* kind_name(SampleKind kind) {
  switch (kind) {
    case SampleKind::detection: return "det";
    case SampleKind::weak: return "weak";
    case SampleKind::caption: return "caption";
    case SampleKind::test: return "test";
  }
  return "?";
}

std::vector<SceneObject> Sample::all_objects() const {
  std::vector<SceneObject> all = objects;
  all.insert(all.end(), hidden.begin(), hidden.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.z_order < b.z_order; });
  return all;
}

// ---------------------------------------------------------------------------
// Scene rendering

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::array<double, 3> color_rgb(const std::string& name) {
  if (name == "red") return {0.90, 0.10, 0.10};
  if (name == "green") return {0.10, 0.75, 0.15};
  if (name == "blue") return {0.10, 0.20, 0.90};
  if (name == "yellow") return {0.95, 0.90, 0.10};
  if (name == "magenta") return {0.85, 0.10, 0.85};
  if (name == "cyan") return {0.10, 0.85, 0.90};
  // unknown names get a stable pseudo-random colour
  const std::uint64_t h = splitmix64(std::hash<std::string>{}(name));
  return {0.1 + 0.8 * static_cast<double>(h & 0xff) / 255.0, 0.1 + 0.8 * static_cast<double>((h >> 8) & 0xff) / 255.0,
          0.1 + 0.8 * static_cast<double>((h >> 16) & 0xff) / 255.0};
}

/// Membership test in box-normalised coordinates u, v ∈ [0, 1].
bool inside_shape(const std::string& shape, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  if (shape == "circle") return du * du + dv * dv <= 0.25;
  if (shape == "square") return true;
  if (shape == "triangle") return std::abs(du) <= 0.5 * v;
  if (shape == "diamond") return std::abs(du) + std::abs(dv) <= 0.5;
  if (shape == "cross") return std::abs(du) <= 1.0 / 6.0 || std::abs(dv) <= 1.0 / 6.0;
  if (shape == "ring") {
    const double r2 = du * du + dv * dv;
    return r2 <= 0.25 && r2 >= 0.09;
  }
  return std::abs(du) <= 0.35 && std::abs(dv) <= 0.35;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(master) ^ (stream * 0xD6E8FEB86659FD93ull)) ^ index);
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config, const Vocabulary& vocab) {
  if (config.min_objects < 1 || config.max_objects < config.min_objects) {
    throw ConfigError("object count range must satisfy 1 <= min <= max");
  }
  if (config.min_side < 6 || config.max_side < config.min_side || config.max_side > config.image_size) {
    throw ConfigError("object side range must satisfy 6 <= min <= max <= image_size");
  }
  std::mt19937_64 rng(seed);
  const int S = config.image_size;
  std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
  std::uniform_int_distribution<int> class_dist(0, vocab.num_classes() - 1);
  std::uniform_int_distribution<int> side_dist(config.min_side, config.max_side);

  Scene scene;
  const int target = count_dist(rng);
  for (int k = 0; k < target; ++k) {
    const int cls = class_dist(rng);
    bool placed = false;
    for (int attempt = 0; attempt < config.max_tries && !placed; ++attempt) {
      const int w = side_dist(rng);
      const int h = side_dist(rng);
      const int x = std::uniform_int_distribution<int>(0, S - w)(rng);
      const int y = std::uniform_int_distribution<int>(0, S - h)(rng);
      const Box b{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                  static_cast<double>(y + h)};
      placed = std::all_of(scene.objects.begin(), scene.objects.end(),
                           [&](const SceneObject& o) { return iou(o.box, b) <= config.max_iou; });
      if (placed) scene.objects.push_back({cls, b, static_cast<int>(scene.objects.size())});
    }
    // a failed placement ends the scene with the objects placed so far
    if (!placed) break;
  }

  Image& img = scene.image;
  img.channels = 3;
  img.height = img.width = S;
  std::vector<double> canvas(static_cast<std::size_t>(3 * S * S), 0.5);
  for (const SceneObject& o : scene.objects) {
    const auto rgb = color_rgb(vocab.colors[static_cast<std::size_t>(vocab.color_of(o.class_id))]);
    const std::string& shape = vocab.shapes[static_cast<std::size_t>(vocab.shape_of(o.class_id))];
    for (int y = static_cast<int>(o.box.y1); y < static_cast<int>(o.box.y2); ++y) {
      for (int x = static_cast<int>(o.box.x1); x < static_cast<int>(o.box.x2); ++x) {
        const double u = (x + 0.5 - o.box.x1) / o.box.width();
        const double v = (y + 0.5 - o.box.y1) / o.box.height();
        if (!inside_shape(shape, u, v)) continue;
        for (int c = 0; c < 3; ++c) canvas[static_cast<std::size_t>((c * S + y) * S + x)] = rgb[static_cast<std::size_t>(c)];
      }
    }
  }
  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  img.pixels.resize(canvas.size());
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = config.noise_sigma > 0 ? canvas[i] + noise(rng) : canvas[i];
    img.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Captions

std::string caption_of(std::span<const int> labels, const Vocabulary& vocab, std::mt19937_64& rng) {
  std::vector<int> order(labels.begin(), labels.end());
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  if (order.empty()) throw ValidationError("caption_of needs at least one label");
  std::shuffle(order.begin(), order.end(), rng);
  std::string text = "a photo of";
  for (std::size_t i = 0; i < order.size(); ++i) {
    text += (i == 0 ? " a " : " and a ") + vocab.name(order[i]);
  }
  return text;
}

std::vector<int> parse_caption(const std::string& caption, const Vocabulary& vocab) {
  static const std::string prefix = "a photo of ";
  if (caption.rfind(prefix, 0) != 0) return {};
  std::string rest = caption.substr(prefix.size());
  std::set<int> found;
  const std::string sep = " and ";
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = rest.find(sep, pos);
    std::string phrase = rest.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (phrase.rfind("a ", 0) != 0) return {};
    phrase = phrase.substr(2);
    int match = -1;
    for (int id = 0; id < vocab.num_classes(); ++id) {
      if (vocab.name(id) == phrase) match = id;
    }
    if (match < 0) return {};
    found.insert(match);
    if (next == std::string::npos) break;
    pos = next + sep.size();
  }
  return {found.begin(), found.end()};
}

// ---------------------------------------------------------------------------
// Benchmark assembly

namespace {

std::vector<int> class_set(const std::vector<SceneObject>& objects) {
  std::set<int> s;
  for (const auto& o : objects) s.insert(o.class_id);
  return {s.begin(), s.end()};
}

Sample make_sample(SampleKind kind, std::uint64_t seed, const BenchmarkConfig& config, const Vocabulary& vocab) {
  Scene scene = generate_scene(seed, config.scene, vocab);
  Sample s;
  s.kind = kind;
  s.image = std::move(scene.image);
  switch (kind) {
    case SampleKind::detection:
      for (const auto& o : scene.objects) (vocab.is_novel(o.class_id) ? s.hidden : s.objects).push_back(o);
      break;
    case SampleKind::test:
      s.objects = scene.objects;
      break;
    case SampleKind::weak:
      s.labels = class_set(scene.objects);
      s.hidden = scene.objects;
      break;
    case SampleKind::caption: {
      s.labels = class_set(scene.objects);
      s.hidden = scene.objects;
      std::mt19937_64 rng(derive_seed(seed, 99, 0));
      s.caption = caption_of(s.labels, vocab, rng);
      break;
    }
  }
  return s;
}

std::vector<Sample> make_split(SampleKind kind, int count, std::uint64_t master, const BenchmarkConfig& config,
                               const Vocabulary& vocab) {
  if (count < 0) throw ConfigError(std::string("negative size for split ") + kind_name(kind));
  std::vector<Sample> out(static_cast<std::size_t>(count));
  const auto stream = static_cast<std::uint64_t>(kind) + 1;
  parallel_for(out.size(), [&](std::size_t i) {
    out[i] = make_sample(kind, derive_seed(master, stream, i), config, vocab);
  });
  return out;
}

}  // namespace

Benchmark build_benchmark(std::uint64_t seed, const BenchmarkConfig& config) {
  Benchmark b;
  b.vocab = Vocabulary::make(config.shapes, config.colors, config.num_novel);
  b.config = config;
  b.seed = seed;
  b.det_train = make_split(SampleKind::detection, config.num_detection, seed, config, b.vocab);
  b.weak_train = make_split(SampleKind::weak, config.num_weak, seed, config, b.vocab);
  b.caption_train = make_split(SampleKind::caption, config.num_caption, seed, config, b.vocab);
  b.test = make_split(SampleKind::test, config.num_test, seed, config, b.vocab);
  return b;
}

// ---------------------------------------------------------------------------
// Config serialization

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"image_size", c.image_size}, {"min_objects", c.min_objects}, {"max_objects", c.max_objects},
       {"max_iou", c.max_iou},       {"noise_sigma", c.noise_sigma}, {"min_side", c.min_side},
       {"max_side", c.max_side},     {"max_tries", c.max_tries}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.max_iou = j.value("max_iou", c.max_iou);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.min_side = j.value("min_side", c.min_side);
  c.max_side = j.value("max_side", c.max_side);
  c.max_tries = j.value("max_tries", c.max_tries);
}

void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  j = {{"scene", c.scene},         {"num_detection", c.num_detection}, {"num_weak", c.num_weak},
       {"num_caption", c.num_caption}, {"num_test", c.num_test},       {"num_novel", c.num_novel},
       {"shapes", c.shapes},       {"colors", c.colors}};
}

void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  if (j.contains("scene")) c.scene = j.at("scene").get<SceneConfig>();
  c.num_detection = j.value("num_detection", c.num_detection);
  c.num_weak = j.value("num_weak", c.num_weak);
  c.num_caption = j.value("num_caption", c.num_caption);
  c.num_test = j.value("num_test", c.num_test);
  c.num_novel = j.value("num_novel", c.num_novel);
  c.shapes = j.value("shapes", c.shapes);
  c.colors = j.value("colors", c.colors);
}

}  // namespace weakvoc::data
