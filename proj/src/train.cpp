#include "weakvoc/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "weakvoc/binary_io.hpp"

namespace weakvoc::train {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|sgd)");
}

const std::vector<data::Sample>& weak_split(const data::Benchmark& bench, loss::WeakVariant v) {
  const bool caption = v == loss::WeakVariant::caption || v == loss::WeakVariant::caption_labels;
  return caption ? bench.caption_train : bench.weak_train;
}

// Box in a transformed training image back to the stored sample's frame.
Box to_sample_frame(const Box& b, const loss::BatchImage& img) {
  const Box unflipped = img.flipped ? hflip(b, static_cast<double>(img.image.dim(2))) : b;
  return scale(unflipped, 1.0 / img.scale);
}

std::vector<loss::AssignmentRecord> map_back(const std::vector<loss::AssignmentRecord>& records,
                                             const std::vector<loss::BatchImage>& images) {
  std::vector<loss::AssignmentRecord> out;
  for (auto r : records) {
    for (const auto& img : images) {
      if (img.image_id != r.image_id) continue;
      r.box = to_sample_frame(r.box, img);
      break;
    }
    out.push_back(r);
  }
  return out;
}

std::vector<int> all_ids(const data::Vocabulary& vocab) {
  std::vector<int> ids(static_cast<std::size_t>(vocab.num_classes()));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  if (end <= begin) return 0.0;
  return std::accumulate(v.begin() + static_cast<long>(begin), v.begin() + static_cast<long>(end), 0.0) /
         static_cast<double>(end - begin);
}

}  // namespace

void TrainConfig::validate() const {
  if (phase1_steps < 0 || phase2_steps < 0) throw ConfigError("step counts must be >= 0");
  if (det_batch < 1 || weak_batch < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(weak_resolution_scale > 0 && weak_resolution_scale <= 1)) {
    throw ConfigError("weak_resolution_scale must lie in (0, 1]");
  }
  if (!(adam_lr > 0) || !(sgd_lr > 0)) throw ConfigError("learning rates must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip_prob must lie in [0, 1]");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (probe_images < 0) throw ConfigError("probe_images must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"phase1_steps", c.phase1_steps},
       {"phase2_steps", c.phase2_steps},
       {"det_batch", c.det_batch},
       {"weak_batch", c.weak_batch},
       {"weak_resolution_scale", c.weak_resolution_scale},
       {"optimizer", optimizer_name(c.optimizer)},
       {"adam_lr", c.adam_lr},
       {"sgd_lr", c.sgd_lr},
       {"momentum", c.momentum},
       {"seed", c.seed},
       {"flip_prob", c.flip_prob},
       {"checkpoint_every", c.checkpoint_every},
       {"max_grad_norm", c.max_grad_norm},
       {"probe_images", c.probe_images},
       {"annotate_novel", c.annotate_novel},
       {"log_assignments", c.log_assignments}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.phase1_steps = j.value("phase1_steps", c.phase1_steps);
  c.phase2_steps = j.value("phase2_steps", c.phase2_steps);
  c.det_batch = j.value("det_batch", c.det_batch);
  c.weak_batch = j.value("weak_batch", c.weak_batch);
  c.weak_resolution_scale = j.value("weak_resolution_scale", c.weak_resolution_scale);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.adam_lr = j.value("adam_lr", c.adam_lr);
  c.sgd_lr = j.value("sgd_lr", c.sgd_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.probe_images = j.value("probe_images", c.probe_images);
  c.annotate_novel = j.value("annotate_novel", c.annotate_novel);
  c.log_assignments = j.value("log_assignments", c.log_assignments);
}

// ---------------------------------------------------------------------------
// Batches

Cycler::Cycler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
  if (n == 0) throw ConfigError("cannot cycle over an empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::size_t Cycler::next() {
  if (pos_ == order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
    ++epoch_;
  }
  return order_[pos_++];
}

loss::BatchImage make_batch_image(const data::Sample& sample, int image_id, double scale_factor, bool flip,
                                  const data::Vocabulary& vocab, bool annotate_novel) {
  data::Image img = sample.image;
  if (scale_factor != 1.0) {
    img = data::resize_bilinear(img, static_cast<int>(std::lround(img.height * scale_factor)),
                                static_cast<int>(std::lround(img.width * scale_factor)));
  }
  if (flip) img = data::hflip(img);

  loss::BatchImage out;
  out.image = img.to_tensor();
  out.image_id = image_id;
  out.kind = sample.kind;
  out.scale = scale_factor;
  out.flipped = flip;
  out.caption = sample.caption;
  auto add_box = [&](const data::SceneObject& o) {
    Box b = scale(o.box, scale_factor);
    if (flip) b = hflip(b, static_cast<double>(img.width));
    out.gt.boxes.push_back(b);
    out.gt.classes.push_back(o.class_id);
  };
  switch (sample.kind) {
    case data::SampleKind::detection:
    case data::SampleKind::test:
      for (const auto& o : sample.objects) add_box(o);
      if (annotate_novel) {
        for (const auto& o : sample.hidden) add_box(o);
      }
      break;
    case data::SampleKind::weak:
      out.labels = sample.labels;
      break;
    case data::SampleKind::caption:
      out.labels = data::parse_caption(sample.caption, vocab);
      break;
  }
  return out;
}

loss::StepBatch build_mixed_step(const std::vector<data::Sample>& det, Cycler& det_iter,
                                 const std::vector<data::Sample>* weak, Cycler* weak_iter, const TrainConfig& config,
                                 const loss::LossConfig& losses, const data::Vocabulary& vocab, std::mt19937_64& rng,
                                 std::mt19937_64* weak_rng) {
  if (det.empty()) throw ConfigError("detection split is empty");
  if (weak != nullptr && (weak->empty() || weak_iter == nullptr)) throw ConfigError("weak split is empty");
  std::bernoulli_distribution flip(config.flip_prob);
  loss::StepBatch batch;
  if (losses.federated) {
    batch.det_fed_sample = loss::sample_from(config.annotate_novel ? all_ids(vocab) : vocab.base_ids,
                                             losses.federated_sample, rng);
    batch.weak_fed_sample = loss::sample_classes(vocab.num_classes(), losses.federated_sample, rng);
  } else if (config.annotate_novel) {
    batch.det_fed_sample = all_ids(vocab);
  }
  for (int i = 0; i < config.det_batch; ++i) {
    const std::size_t k = det_iter.next();
    const bool f = flip(rng);
    batch.det.push_back(make_batch_image(det[k], static_cast<int>(k), 1.0, f, vocab, config.annotate_novel));
  }
  if (weak != nullptr) {
    for (int i = 0; i < config.weak_batch; ++i) {
      const std::size_t k = weak_iter->next();
      const bool f = flip(weak_rng != nullptr ? *weak_rng : rng);
      batch.weak.push_back(make_batch_image((*weak)[k], static_cast<int>(k), config.weak_resolution_scale, f, vocab));
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Optimizers

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParameterSet& params, const std::vector<Tensor>& grads) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw DimensionError("optimizer: gradient count differs from parameters");
  if (m_.empty()) {
    for (const auto& e : entries) {
      m_.push_back(Eigen::VectorXd::Zero(e.value.size()));
      v_.push_back(Eigen::VectorXd::Zero(e.value.size()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!entries[k].trainable) continue;
    const Eigen::VectorXd& g = grads[k].data();
    m_[k] = beta1_ * m_[k] + (1 - beta1_) * g;
    v_[k] = beta2_ * v_[k] + (1 - beta2_) * g.cwiseProduct(g);
    entries[k].value.data().array() -=
        lr_ * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps_);
  }
}

Sgd::Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

void Sgd::step(ParameterSet& params, const std::vector<Tensor>& grads) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw DimensionError("optimizer: gradient count differs from parameters");
  if (velocity_.empty()) {
    for (const auto& e : entries) velocity_.push_back(Eigen::VectorXd::Zero(e.value.size()));
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!entries[k].trainable) continue;
    velocity_[k] = momentum_ * velocity_[k] + grads[k].data();
    entries[k].value.data() -= lr_ * velocity_[k];
  }
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config) {
  if (config.optimizer == OptimizerKind::adam) return std::make_unique<Adam>(config.adam_lr);
  return std::make_unique<Sgd>(config.sgd_lr, config.momentum);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const det::Detector& model, const data::Vocabulary& vocab,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["detector"] = model.config();
  header["vocabulary"] = {{"shapes", vocab.shapes},
                          {"colors", vocab.colors},
                          {"base_ids", vocab.base_ids},
                          {"novel_ids", vocab.novel_ids}};
  header["meta"] = meta;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : model.params().entries()) {
    params.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"trainable", e.trainable}});
  }
  header["parameters"] = params;
  const std::string text = header.dump();

  io::ByteWriter w;
  w.magic("WVP1");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.str(text);
  for (const auto& e : model.params().entries()) {
    for (Index i = 0; i < e.value.size(); ++i) w.f64(e.value[i]);
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  io::write_file(path, w.data());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic("WVP1");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t len = r.u32();
  const std::size_t header_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), header_at);
  }
  Checkpoint ck;
  ck.config = header.at("detector").get<det::DetectorConfig>();
  const auto& v = header.at("vocabulary");
  ck.vocab.shapes = v.at("shapes").get<std::vector<std::string>>();
  ck.vocab.colors = v.at("colors").get<std::vector<std::string>>();
  ck.vocab.base_ids = v.at("base_ids").get<std::vector<int>>();
  ck.vocab.novel_ids = v.at("novel_ids").get<std::vector<int>>();
  ck.vocab.validate();
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& p : header.at("parameters")) {
    Tensor t(p.at("shape").get<Shape>());
    for (Index i = 0; i < t.size(); ++i) t[i] = r.f64();
    ck.params.add(p.at("name").get<std::string>(), std::move(t), p.at("trainable").get<bool>());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint parameters", r.offset());
  return ck;
}

void load_parameters(det::Detector& model, const ParameterSet& params) {
  auto& target = model.params();
  for (const auto& e : target.entries()) {
    if (!params.contains(e.name)) throw DimensionError("checkpoint lacks parameter '" + e.name + "'");
    const Tensor& src = params.at(e.name);
    if (src.shape() != e.value.shape()) {
      throw DimensionError("parameter '" + e.name + "' has shape " + shape_string(src.shape()) +
                           " in the checkpoint but " + shape_string(e.value.shape()) + " in the model");
    }
  }
  if (params.size() != target.size()) throw DimensionError("checkpoint has parameters the model does not");
  for (auto& e : target.entries()) e.value = params.at(e.name);
}

det::Detector load_detector(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  det::Detector model(ck.config, ck.vocab, 0);
  load_parameters(model, ck.params);
  return model;
}

std::string checkpoint_name(int phase, int step) {
  return "phase" + std::to_string(phase) + "_step" + std::to_string(step) + ".wvp1";
}

// ---------------------------------------------------------------------------
// Assignment logs

void write_jsonl(const std::filesystem::path& path, const std::vector<loss::AssignmentRecord>& records) {
  std::string text;
  for (const auto& r : records) text += nlohmann::json(r).dump() + "\n";
  io::write_text(path, text);
}

std::vector<loss::AssignmentRecord> read_assignments(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<loss::AssignmentRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<loss::AssignmentRecord>());
  }
  return out;
}

std::vector<loss::AssignmentRecord> probe_assignments(const det::Detector& model, const data::Benchmark& bench,
                                                      const TrainConfig& config, const loss::LossConfig& losses,
                                                      int count, int step) {
  const auto& split = weak_split(bench, losses.variant);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), split.size());
  loss::LossConfig probe_losses = losses;
  probe_losses.federated = false;
  std::vector<loss::AssignmentRecord> out;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(config.weak_batch)) {
    loss::StepBatch batch;
    for (std::size_t k = begin; k < std::min(n, begin + static_cast<std::size_t>(config.weak_batch)); ++k) {
      batch.weak.push_back(
          make_batch_image(split[k], static_cast<int>(k), config.weak_resolution_scale, false, bench.vocab));
    }
    ad::Tape tape;
    det::Graph g(tape, model, false);
    const auto sl = loss::total_loss(g, batch, probe_losses, bench.vocab, nullptr, step);
    const auto mapped = map_back(sl.assignments, batch.weak);
    out.insert(out.end(), mapped.begin(), mapped.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

PhaseResult train_phase(det::Detector& model, const data::Benchmark& bench, const TrainConfig& config,
                        const PhaseSpec& spec) {
  config.validate();
  spec.losses.validate(bench.vocab.num_classes());
  if (spec.phase != 1 && spec.phase != 2) throw ConfigError("phase must be 1 or 2");
  const int steps = spec.phase == 1 ? config.phase1_steps : config.phase2_steps;
  const loss::WeakVariant variant = spec.phase == 1 ? loss::WeakVariant::none : spec.losses.variant;
  loss::LossConfig losses = spec.losses;
  losses.variant = variant;
  const bool self_training =
      variant == loss::WeakVariant::self_train || variant == loss::WeakVariant::self_train_filtered;
  if (self_training && spec.teacher == nullptr) throw ConfigError("self-training needs the phase-1 model as teacher");

  const auto p = static_cast<std::uint64_t>(spec.phase);
  std::mt19937_64 rng(data::derive_seed(config.seed, 1000 + p, 0));
  std::mt19937_64 weak_rng(data::derive_seed(config.seed, 1000 + p, 1));
  Cycler det_iter(bench.det_train.size(), data::derive_seed(config.seed, 2000 + p, 0));
  const std::vector<data::Sample>* weak = nullptr;
  std::unique_ptr<Cycler> weak_iter;
  if (variant != loss::WeakVariant::none) {
    weak = &weak_split(bench, variant);
    if (weak->empty()) throw ConfigError("the weak split needed by '" + loss::variant_name(variant) + "' is empty");
    weak_iter = std::make_unique<Cycler>(weak->size(), data::derive_seed(config.seed, 3000 + p, 0));
  }
  auto optimizer = make_optimizer(config);

  std::filesystem::create_directories(spec.out_dir / "checkpoints");
  const auto mode = spec.phase == 1 ? std::ios::trunc : std::ios::app;
  std::ofstream history(spec.out_dir / "history.jsonl", std::ios::out | mode);
  std::ofstream assignment_log;
  if (config.log_assignments && loss::logs_assignments(variant)) {
    assignment_log.open(spec.out_dir / "assignments.jsonl", std::ios::out | mode);
  }
  const bool probing = spec.phase == 2 && loss::logs_assignments(variant) && config.probe_images > 0;

  PhaseResult result;
  std::vector<double> totals;
  for (int step = 1; step <= steps; ++step) {
    const auto batch =
        build_mixed_step(bench.det_train, det_iter, weak, weak_iter.get(), config, losses, bench.vocab, rng, &weak_rng);
    ad::Tape tape;
    det::Graph g(tape, model, true);
    const auto sl = loss::total_loss(g, batch, losses, bench.vocab, spec.teacher, step);
    if (!std::isfinite(sl.terms.at("total"))) {
      throw TrainingError("non-finite loss at phase " + std::to_string(spec.phase) + " step " + std::to_string(step) +
                          ": " + nlohmann::json(sl.terms).dump());
    }
    tape.backward(sl.total);
    auto grads = g.params().gradients();
    double sq = 0.0;
    for (const auto& t : grads) sq += t.data().squaredNorm();
    const double norm = std::sqrt(sq);
    if (config.max_grad_norm > 0 && norm > config.max_grad_norm) {
      for (auto& t : grads) t.data() *= config.max_grad_norm / norm;
    }
    optimizer->step(model.params(), grads);

    totals.push_back(sl.terms.at("total"));
    result.skipped_images += sl.skipped_images;
    nlohmann::json rec = {{"phase", spec.phase},
                          {"step", step},
                          {"lr", optimizer->learning_rate()},
                          {"grad_norm", norm},
                          {"skipped_images", sl.skipped_images}};
    if (variant != loss::WeakVariant::none) rec["strategy"] = loss::variant_name(variant);
    for (const auto& [k, v] : sl.terms) rec[k] = v;
    history << rec.dump() << "\n";
    if (assignment_log.is_open()) {
      for (const auto& r : map_back(sl.assignments, batch.weak)) assignment_log << nlohmann::json(r).dump() << "\n";
    }
    if (spec.on_step) spec.on_step(rec);

    if (step % config.checkpoint_every == 0 || step == steps) {
      save_checkpoint(spec.out_dir / "checkpoints" / checkpoint_name(spec.phase, step), model, bench.vocab,
                      {{"phase", spec.phase}, {"step", step}, {"strategy", loss::variant_name(variant)}});
    }
    if (probing && (step == steps / 2 || step == steps)) {
      const auto records = probe_assignments(model, bench, config, losses, config.probe_images, step);
      write_jsonl(spec.out_dir / (step == steps ? "assignments_final.jsonl" : "assignments_half.jsonl"), records);
    }
  }
  history.flush();
  if (!history) throw std::runtime_error("failed writing " + (spec.out_dir / "history.jsonl").string());

  result.steps = steps;
  const std::size_t window = std::min<std::size_t>(100, totals.size());
  result.first_loss_mean = mean_of(totals, 0, window);
  result.last_loss_mean = mean_of(totals, totals.size() - window, totals.size());
  return result;
}

}  // namespace weakvoc::train
