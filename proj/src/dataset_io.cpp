#include <fstream>

#include "weakvoc/binary_io.hpp"
#include "weakvoc/synthdata.hpp"

namespace weakvoc {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace io

namespace data {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

nlohmann::json boxes_json(const std::vector<SceneObject>& objects) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& o : objects) boxes.push_back({o.box.x1, o.box.y1, o.box.x2, o.box.y2});
  return boxes;
}

nlohmann::json annotation_json(const Sample& s) {
  nlohmann::json j;
  auto classes = [](const std::vector<SceneObject>& objs) {
    std::vector<int> c;
    for (const auto& o : objs) c.push_back(o.class_id);
    return c;
  };
  auto z = [](const std::vector<SceneObject>& objs) {
    std::vector<int> c;
    for (const auto& o : objs) c.push_back(o.z_order);
    return c;
  };
  j["boxes"] = boxes_json(s.objects);
  j["classes"] = classes(s.objects);
  j["z_orders"] = z(s.objects);
  j["labels"] = s.labels;
  if (s.kind == SampleKind::caption) j["caption"] = s.caption;
  j["hidden_boxes"] = boxes_json(s.hidden);
  j["hidden_classes"] = classes(s.hidden);
  j["hidden_z_orders"] = z(s.hidden);
  return j;
}

std::vector<SceneObject> objects_from(const nlohmann::json& boxes, const nlohmann::json& classes,
                                      const nlohmann::json& z) {
  if (boxes.size() != classes.size() || boxes.size() != z.size()) {
    throw std::invalid_argument("box/class/z array lengths differ");
  }
  std::vector<SceneObject> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes.at(i);
    out.push_back({classes.at(i).get<int>(), Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                                 b.at(3).get<double>()},
                   z.at(i).get<int>()});
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const Benchmark& bench) {
  io::ByteWriter w;
  w.magic("WVD1");
  w.u32(kDatasetVersion);
  const std::size_t count =
      bench.det_train.size() + bench.weak_train.size() + bench.caption_train.size() + bench.test.size();
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto* split : {&bench.det_train, &bench.weak_train, &bench.caption_train, &bench.test}) {
    for (const Sample& s : *split) {
      w.u8(static_cast<std::uint8_t>(s.kind));
      w.u32(static_cast<std::uint32_t>(s.image.channels));
      w.u32(static_cast<std::uint32_t>(s.image.height));
      w.u32(static_cast<std::uint32_t>(s.image.width));
      for (float p : s.image.pixels) w.f32(p);
      const std::string ann = annotation_json(s).dump();
      w.u32(static_cast<std::uint32_t>(ann.size()));
      w.str(ann);
    }
  }
  return w.take();
}

void decode_samples(std::span<const std::uint8_t> bytes, Benchmark& bench) {
  io::ByteReader r(bytes);
  r.expect_magic("WVD1");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32();
  bench.det_train.clear();
  bench.weak_train.clear();
  bench.caption_train.clear();
  bench.test.clear();
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    const std::size_t kind_at = r.offset();
    const std::uint8_t kind = r.u8();
    if (kind > 3) throw FormatError("unknown sample kind " + std::to_string(kind), kind_at);
    s.kind = static_cast<SampleKind>(kind);
    const std::size_t dims_at = r.offset();
    s.image.channels = static_cast<int>(r.u32());
    s.image.height = static_cast<int>(r.u32());
    s.image.width = static_cast<int>(r.u32());
    const std::uint64_t n = static_cast<std::uint64_t>(s.image.channels) * s.image.height * s.image.width;
    if (n * 4 > r.remaining()) throw FormatError("image extends past end of file", dims_at);
    s.image.pixels.resize(n);
    for (auto& p : s.image.pixels) p = r.f32();
    const std::uint32_t len = r.u32();
    const std::size_t ann_at = r.offset();
    const std::string ann = r.str(len);
    try {
      const auto j = nlohmann::json::parse(ann);
      s.objects = objects_from(j.at("boxes"), j.at("classes"), j.at("z_orders"));
      s.labels = j.at("labels").get<std::vector<int>>();
      s.caption = j.value("caption", std::string());
      s.hidden = objects_from(j.at("hidden_boxes"), j.at("hidden_classes"), j.at("hidden_z_orders"));
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad annotation payload: ") + e.what(), ann_at);
    }
    switch (s.kind) {
      case SampleKind::detection: bench.det_train.push_back(std::move(s)); break;
      case SampleKind::weak: bench.weak_train.push_back(std::move(s)); break;
      case SampleKind::caption: bench.caption_train.push_back(std::move(s)); break;
      case SampleKind::test: bench.test.push_back(std::move(s)); break;
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last sample", r.offset());
}

nlohmann::json dataset_meta(const Benchmark& bench) {
  nlohmann::json classes = nlohmann::json::array();
  for (int id = 0; id < bench.vocab.num_classes(); ++id) classes.push_back(bench.vocab.name(id));
  return {
      {"format", "WVD1"},
      {"master_seed", bench.seed},
      {"config", bench.config},
      {"vocabulary",
       {{"shapes", bench.vocab.shapes},
        {"colors", bench.vocab.colors},
        {"classes", classes},
        {"base_ids", bench.vocab.base_ids},
        {"novel_ids", bench.vocab.novel_ids}}},
      {"splits",
       {{"det", bench.det_train.size()},
        {"weak", bench.weak_train.size()},
        {"caption", bench.caption_train.size()},
        {"test", bench.test.size()}}},
  };
}

void save_dataset(const std::filesystem::path& path, const Benchmark& bench) {
  io::write_file(path, encode_dataset(bench));
  io::write_text(path.parent_path() / "meta.json", dataset_meta(bench).dump(2) + "\n");
}

Benchmark load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset file not found: " + path.string());
  Benchmark bench;
  const auto meta_path = path.parent_path() / "meta.json";
  if (!std::filesystem::exists(meta_path)) throw std::runtime_error("missing sidecar " + meta_path.string());
  const auto meta_bytes = io::read_file(meta_path);
  const auto meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  bench.seed = meta.at("master_seed").get<std::uint64_t>();
  bench.config = meta.at("config").get<BenchmarkConfig>();
  const auto& v = meta.at("vocabulary");
  bench.vocab.shapes = v.at("shapes").get<std::vector<std::string>>();
  bench.vocab.colors = v.at("colors").get<std::vector<std::string>>();
  bench.vocab.base_ids = v.at("base_ids").get<std::vector<int>>();
  bench.vocab.novel_ids = v.at("novel_ids").get<std::vector<int>>();
  bench.vocab.validate();
  const auto bytes = io::read_file(path);
  decode_samples(bytes, bench);
  return bench;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a(io::read_file(path)); }

}  // namespace data
}  // namespace weakvoc
