#ifndef WEAKVOC_EXPERIMENT_HPP
#define WEAKVOC_EXPERIMENT_HPP

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "weakvoc/eval.hpp"
#include "weakvoc/train.hpp"

namespace weakvoc::exp {

/// Everything a run needs. Serialized as one JSON object whose defaults are
/// the schema: unknown keys anywhere are rejected by name.
struct ExperimentConfig {
  std::string run_name = "default";
  std::string out_dir = "runs/default";
  /// Dataset file; empty means "generate from `data` and `data_seed`".
  std::string data_path;
  std::uint64_t data_seed = 0;
  data::BenchmarkConfig data;
  det::DetectorConfig model;
  loss::LossConfig losses;
  train::TrainConfig train;
  eval::EvalConfig eval;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Throws ConfigError naming the first key of `given` absent from `schema`.
void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& prefix = "");

/// Progress sink; defaults to silence.
using Logger = std::function<void(const std::string&)>;

struct GenDataResult {
  std::filesystem::path dataset;
  std::uint64_t hash = 0;
  nlohmann::json meta;
};

/// Writes dataset.wvd1 and meta.json under `out`. A non-empty `out` is
/// refused unless `force`.
GenDataResult gen_data(const ExperimentConfig& config, const std::filesystem::path& out, bool force);

/// The benchmark a config refers to: loaded from data_path, or generated.
data::Benchmark load_benchmark(const ExperimentConfig& config);

struct TrainRunResult {
  std::filesystem::path phase1_checkpoint;
  std::filesystem::path final_checkpoint;
};

/// Phase 1 then phase 2 (phase 1 only for the "none" variant) into `out`.
/// `resume` names a phase-1 checkpoint and skips phase 1.
TrainRunResult run_train(const ExperimentConfig& config, const data::Benchmark& bench,
                         const std::filesystem::path& out, const std::optional<std::filesystem::path>& resume,
                         const Logger& log = {});

/// Generalized evaluation of a checkpoint; adds assignment diagnostics when
/// `run_dir` holds half/final probe logs. Writes report.json and metrics.csv.
eval::MetricsReport run_eval(const det::Detector& model, const data::Benchmark& bench, const eval::EvalConfig& config,
                             const std::filesystem::path& out, const std::optional<std::filesystem::path>& run_dir);

struct AblationCell {
  std::string variant;
  std::uint64_t seed = 0;
  std::uint64_t phase1_hash = 0;
  eval::MetricsReport report;
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::filesystem::path table;
};

/// Every (variant, seed) cell fine-tunes from that seed's single phase-1
/// checkpoint. "none" is the phase-1 model itself. Cells run on up to `jobs`
/// threads; each is deterministic on its own.
AblationResult run_ablation(const ExperimentConfig& config, const data::Benchmark& bench,
                            const std::filesystem::path& out, const std::vector<std::string>& variants,
                            const std::vector<std::uint64_t>& seeds, int jobs, const Logger& log = {});

/// One row per variant with mean/std columns over seeds (CSV text).
std::string ablation_table(const std::vector<AblationCell>& cells, const std::vector<std::string>& variants);

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& values);

}  // namespace weakvoc::exp

#endif  // WEAKVOC_EXPERIMENT_HPP
