#ifndef WEAKVOC_TRAIN_HPP
#define WEAKVOC_TRAIN_HPP

#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "weakvoc/losses.hpp"

namespace weakvoc::train {

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  int phase1_steps = 2000;
  int phase2_steps = 2000;
  int det_batch = 8;
  int weak_batch = 8;
  double weak_resolution_scale = 0.5;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_lr = 1e-3;
  double sgd_lr = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double flip_prob = 0.5;
  int checkpoint_every = 500;
  /// Rescales the whole gradient when its norm exceeds this; <= 0 disables.
  double max_grad_norm = 10.0;
  /// Weak images re-assigned at the half and final checkpoints of phase 2.
  int probe_images = 100;
  /// Phase 1 also trains on the unannotated novel objects (proposal-recall reference run).
  bool annotate_novel = false;
  /// Streams every training-time assignment to assignments.jsonl.
  bool log_assignments = false;

  double learning_rate() const { return optimizer == OptimizerKind::adam ? adam_lr : sgd_lr; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Endless pass over [0, n): a fresh permutation every epoch.
class Cycler {
 public:
  Cycler(std::size_t n, std::uint64_t seed);
  std::size_t next();
  std::size_t epoch() const { return epoch_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
};

/// Converts a stored sample to a training image. Weak and caption samples
/// keep their label set; caption+labels derives it from the caption text.
loss::BatchImage make_batch_image(const data::Sample& sample, int image_id, double scale, bool flip,
                                  const data::Vocabulary& vocab, bool annotate_novel = false);

/// One step: det_batch full-resolution detection images plus (when `weak` is
/// given) weak_batch weak images downscaled by weak_resolution_scale. The
/// shared federated class sample is drawn here, once per step. Weak flips come
/// from `weak_rng` (falling back to `rng`), so the detection stream does not
/// depend on whether a weak path is present.
loss::StepBatch build_mixed_step(const std::vector<data::Sample>& det, Cycler& det_iter,
                                 const std::vector<data::Sample>* weak, Cycler* weak_iter, const TrainConfig& config,
                                 const loss::LossConfig& losses, const data::Vocabulary& vocab, std::mt19937_64& rng,
                                 std::mt19937_64* weak_rng = nullptr);

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Updates every trainable entry of `params` from `grads` (parameter order).
  virtual void step(ParameterSet& params, const std::vector<Tensor>& grads) = 0;
  virtual double learning_rate() const = 0;
};

class Adam : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParameterSet& params, const std::vector<Tensor>& grads) override;
  double learning_rate() const override { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Eigen::VectorXd> m_, v_;
};

class Sgd : public Optimizer {
 public:
  Sgd(double lr, double momentum);
  void step(ParameterSet& params, const std::vector<Tensor>& grads) override;
  double learning_rate() const override { return lr_; }

 private:
  double lr_, momentum_;
  std::vector<Eigen::VectorXd> velocity_;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: "WVP1", u32 version, u32 header length, JSON header (names,
// shapes, trainable flags, detector config, vocabulary, free-form meta), then
// the parameters as little-endian f64 in header order.

struct Checkpoint {
  det::DetectorConfig config;
  data::Vocabulary vocab;
  nlohmann::json meta;
  ParameterSet params;
};

void save_checkpoint(const std::filesystem::path& path, const det::Detector& model, const data::Vocabulary& vocab,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into `model`; a name or shape mismatch throws
/// DimensionError naming the parameter.
void load_parameters(det::Detector& model, const ParameterSet& params);
/// Rebuilds the detector described by a checkpoint.
det::Detector load_detector(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training

/// Thrown when a step produces a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhaseSpec {
  int phase = 1;
  loss::LossConfig losses;
  /// Run directory; checkpoints, history.jsonl and assignment logs go here.
  std::filesystem::path out_dir;
  /// Frozen model that produces pseudo-labels for the self-training variants.
  const det::Detector* teacher = nullptr;
  /// Called after every step with the history record (progress reporting).
  std::function<void(const nlohmann::json&)> on_step;
};

struct PhaseResult {
  int steps = 0;
  double first_loss_mean = 0.0;  // mean total over the first 100 steps
  double last_loss_mean = 0.0;   // mean total over the last 100 steps
  int skipped_images = 0;
};

/// Phase 1 trains on detection data only. Phase 2 adds weak (or caption)
/// batches. Checkpoints are written every `checkpoint_every` steps; in phase 2
/// the probe assignments are logged at the half and final steps.
PhaseResult train_phase(det::Detector& model, const data::Benchmark& bench, const TrainConfig& config,
                        const PhaseSpec& spec);

/// Assignments the model makes on the first `count` weak (or caption) images,
/// without augmentation, in original image coordinates.
std::vector<loss::AssignmentRecord> probe_assignments(const det::Detector& model, const data::Benchmark& bench,
                                                      const TrainConfig& config, const loss::LossConfig& losses,
                                                      int count, int step);

void write_jsonl(const std::filesystem::path& path, const std::vector<loss::AssignmentRecord>& records);
std::vector<loss::AssignmentRecord> read_assignments(const std::filesystem::path& path);

std::string checkpoint_name(int phase, int step);

}  // namespace weakvoc::train

#endif  // WEAKVOC_TRAIN_HPP
