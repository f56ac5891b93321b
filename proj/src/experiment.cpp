#include "weakvoc/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include "weakvoc/binary_io.hpp"
#include "weakvoc/parallel.hpp"

namespace weakvoc::exp {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

bool is_caption_variant(const std::string& strategy) { return strategy == "caption" || strategy == "caption+labels"; }

void write_config(const fs::path& dir, const ExperimentConfig& config) {
  fs::create_directories(dir);
  io::write_text(dir / "config.json", to_json(config).dump(2) + "\n");
}

// Step-level progress every `every` steps.
std::function<void(const nlohmann::json&)> progress(const Logger& log, const std::string& tag, int every = 250) {
  if (!log) return {};
  return [log, tag, every](const nlohmann::json& rec) {
    const int step = rec.at("step").get<int>();
    if (step % every != 0) return;
    std::ostringstream os;
    os << tag << " phase " << rec.at("phase").get<int>() << " step " << step << " loss " << rec.at("total").get<double>();
    log(os.str());
  };
}

det::Detector train_phase1(const ExperimentConfig& config, const data::Benchmark& bench, const fs::path& dir,
                           const Logger& log) {
  det::Detector model(config.model, bench.vocab, config.train.seed);
  train::train_phase(model, bench, config.train,
                     {1, config.losses, dir, nullptr, progress(log, config.run_name)});
  train::save_checkpoint(dir / "phase1.wvp1", model, bench.vocab,
                         {{"phase", 1}, {"seed", config.train.seed}, {"steps", config.train.phase1_steps}});
  return model;
}

// Phase 2 from `start`; the phase-1 model doubles as the self-training teacher.
det::Detector train_phase2(const ExperimentConfig& config, const data::Benchmark& bench, const det::Detector& start,
                           const fs::path& dir, const Logger& log) {
  det::Detector model = start;
  train::train_phase(model, bench, config.train,
                     {2, config.losses, dir, &start, progress(log, config.run_name)});
  train::save_checkpoint(dir / "final.wvp1", model, bench.vocab,
                         {{"phase", 2},
                          {"seed", config.train.seed},
                          {"strategy", loss::variant_name(config.losses.variant)},
                          {"steps", config.train.phase2_steps}});
  return model;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"run_name", c.run_name},
          {"out_dir", c.out_dir},
          {"data_path", c.data_path},
          {"data_seed", c.data_seed},
          {"data", c.data},
          {"model", c.model},
          {"losses", c.losses},
          {"train", c.train},
          {"eval", c.eval}};
}

void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& prefix) {
  if (!given.is_object()) {
    throw ConfigError("config section '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  }
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (schema.at(key).is_object()) reject_unknown_keys(value, schema.at(key), path);
  }
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  reject_unknown_keys(j, to_json(c));
  try {
    c.run_name = j.value("run_name", c.run_name);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.data_path = j.value("data_path", c.data_path);
    c.data_seed = j.value("data_seed", c.data_seed);
    if (j.contains("data")) c.data = j.at("data").get<data::BenchmarkConfig>();
    if (j.contains("model")) c.model = j.at("model").get<det::DetectorConfig>();
    if (j.contains("losses")) c.losses = j.at("losses").get<loss::LossConfig>();
    if (j.contains("train")) c.train = j.at("train").get<train::TrainConfig>();
    if (j.contains("eval")) c.eval = j.at("eval").get<eval::EvalConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.train.validate();
  c.losses.validate(static_cast<int>(c.data.shapes.size() * c.data.colors.size()));
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Commands

GenDataResult gen_data(const ExperimentConfig& config, const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw std::runtime_error("refusing to write into non-empty directory " + out.string() + " (pass --force)");
  }
  fs::create_directories(out);
  const auto bench = data::build_benchmark(config.data_seed, config.data);
  GenDataResult r;
  r.dataset = out / "dataset.wvd1";
  data::save_dataset(r.dataset, bench);
  r.hash = data::file_hash(r.dataset);
  r.meta = data::dataset_meta(bench);
  r.meta["file_hash"] = r.hash;
  io::write_text(out / "meta.json", r.meta.dump(2) + "\n");
  return r;
}

data::Benchmark load_benchmark(const ExperimentConfig& config) {
  if (config.data_path.empty()) return data::build_benchmark(config.data_seed, config.data);
  if (!fs::exists(config.data_path)) throw std::runtime_error("dataset not found: " + config.data_path);
  return data::load_dataset(config.data_path);
}

TrainRunResult run_train(const ExperimentConfig& config, const data::Benchmark& bench, const fs::path& out,
                         const std::optional<fs::path>& resume, const Logger& log) {
  write_config(out, config);
  TrainRunResult r;
  std::optional<det::Detector> phase1;
  if (resume) {
    const auto ck = train::read_checkpoint(*resume);
    if (ck.meta.value("phase", 0) != 1) {
      throw ConfigError("--resume expects a phase-1 checkpoint; " + resume->string() + " is not one");
    }
    phase1.emplace(config.model, bench.vocab, config.train.seed);
    train::load_parameters(*phase1, ck.params);
    r.phase1_checkpoint = *resume;
  } else {
    phase1.emplace(train_phase1(config, bench, out, log));
    r.phase1_checkpoint = out / "phase1.wvp1";
  }
  if (config.losses.variant == loss::WeakVariant::none) {
    r.final_checkpoint = r.phase1_checkpoint;
    return r;
  }
  train_phase2(config, bench, *phase1, out, log);
  r.final_checkpoint = out / "final.wvp1";
  return r;
}

eval::MetricsReport run_eval(const det::Detector& model, const data::Benchmark& bench, const eval::EvalConfig& config,
                             const fs::path& out, const std::optional<fs::path>& run_dir) {
  auto report = eval::evaluate(model, bench.test, bench.vocab, config);
  if (run_dir && fs::exists(*run_dir / "assignments_half.jsonl") && fs::exists(*run_dir / "assignments_final.jsonl")) {
    const auto half = train::read_assignments(*run_dir / "assignments_half.jsonl");
    const auto final = train::read_assignments(*run_dir / "assignments_final.jsonl");
    if (!final.empty()) {
      const auto& split = is_caption_variant(final.front().strategy) ? bench.caption_train : bench.weak_train;
      eval::add_assignment_diagnostics(report, half, final, split);
    }
  }
  eval::write_report(out, report, bench.vocab);
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

AblationResult run_ablation(const ExperimentConfig& config, const data::Benchmark& bench, const fs::path& out,
                            const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                            int jobs, const Logger& log) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<loss::WeakVariant> parsed;
  for (const auto& v : variants) parsed.push_back(loss::parse_variant(v));
  if (parsed.empty()) throw ConfigError("ablation needs at least one variant");
  fs::create_directories(out);
  write_config(out, config);

  std::mutex log_mutex;
  Logger safe_log;
  if (log) {
    safe_log = [&](const std::string& line) {
      std::lock_guard lock(log_mutex);
      log(line);
    };
  }
  auto seed_config = [&](std::uint64_t seed, loss::WeakVariant v) {
    ExperimentConfig c = config;
    c.train.seed = seed;
    c.losses.variant = v;
    c.run_name = config.run_name + "/seed" + std::to_string(seed) + "/" + loss::variant_name(v);
    return c;
  };
  auto seed_dir = [&](std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); };

  // One phase-1 model per seed, shared by every variant of that seed.
  std::vector<std::uint64_t> hashes(seeds.size());
  parallel_for(
      seeds.size(),
      [&](std::size_t i) {
        const fs::path dir = seed_dir(seeds[i]) / "phase1";
        ExperimentConfig c = seed_config(seeds[i], loss::WeakVariant::none);
        c.run_name = config.run_name + "/seed" + std::to_string(seeds[i]) + "/phase1";
        write_config(dir, c);
        train_phase1(c, bench, dir, safe_log);
        hashes[i] = data::file_hash(dir / "phase1.wvp1");
      },
      jobs);

  std::vector<AblationCell> cells(seeds.size() * parsed.size());
  parallel_for(
      cells.size(),
      [&](std::size_t k) {
        const std::size_t si = k / parsed.size();
        const loss::WeakVariant v = parsed[k % parsed.size()];
        const ExperimentConfig c = seed_config(seeds[si], v);
        const fs::path phase1_path = seed_dir(seeds[si]) / "phase1" / "phase1.wvp1";
        const fs::path dir = seed_dir(seeds[si]) / loss::variant_name(v);
        write_config(dir, c);

        AblationCell& cell = cells[k];
        cell.variant = loss::variant_name(v);
        cell.seed = seeds[si];
        cell.phase1_hash = data::file_hash(phase1_path);
        if (cell.phase1_hash != hashes[si]) throw train::TrainingError("phase-1 checkpoint changed under " + dir.string());
        const det::Detector start = train::load_detector(phase1_path);
        if (v == loss::WeakVariant::none) {
          cell.report = run_eval(start, bench, c.eval, dir, std::nullopt);
        } else {
          const det::Detector model = train_phase2(c, bench, start, dir, safe_log);
          cell.report = run_eval(model, bench, c.eval, dir, dir);
        }
        if (safe_log) {
          safe_log(c.run_name + " map_all " + fmt(cell.report.maps.map_all) + " map_novel " +
                   fmt(cell.report.maps.map_novel));
        }
      },
      jobs);

  AblationResult r;
  r.cells = cells;
  r.table = out / "table.csv";
  io::write_text(r.table, ablation_table(cells, variants));

  std::string runs = "variant,seed,phase1_hash,map_all,map_base,map_novel,ap50_novel\n";
  for (const auto& c : cells) {
    runs += c.variant + "," + std::to_string(c.seed) + "," + std::to_string(c.phase1_hash) + "," +
            fmt(c.report.maps.map_all) + "," + fmt(c.report.maps.map_base) + "," + fmt(c.report.maps.map_novel) + "," +
            fmt(c.report.maps.ap50_novel) + "\n";
  }
  io::write_text(out / "runs.csv", runs);
  return r;
}

std::string ablation_table(const std::vector<AblationCell>& cells, const std::vector<std::string>& variants) {
  struct Metric {
    std::string name;
    std::function<std::optional<double>(const AblationCell&)> get;
  };
  auto ar_novel = [](const AblationCell& c) -> std::optional<double> {
    const auto it = c.report.ar.find("novel");
    if (it == c.report.ar.end() || it->second.empty()) return std::nullopt;
    return it->second.rbegin()->second;
  };
  const std::vector<Metric> metrics = {
      {"map_all", [](const AblationCell& c) { return std::optional(c.report.maps.map_all); }},
      {"map_base", [](const AblationCell& c) { return std::optional(c.report.maps.map_base); }},
      {"map_novel", [](const AblationCell& c) { return std::optional(c.report.maps.map_novel); }},
      {"ap50_novel", [](const AblationCell& c) { return std::optional(c.report.maps.ap50_novel); }},
      {"ar50_novel", ar_novel},
      {"cover_rate",
       [](const AblationCell& c) -> std::optional<double> {
         const auto it = c.report.cover.find(c.variant);
         if (it == c.report.cover.end()) return std::nullopt;
         return it->second.rate;
       }},
      {"consistency",
       [](const AblationCell& c) -> std::optional<double> {
         const auto it = c.report.consistency.find(c.variant);
         if (it == c.report.consistency.end()) return std::nullopt;
         return it->second.mean_iou;
       }},
  };

  std::vector<std::string> names;
  for (const auto& v : variants) names.push_back(loss::variant_name(loss::parse_variant(v)));
  std::vector<double> novel_means;
  std::vector<std::vector<std::string>> rows;
  for (const auto& name : names) {
    std::vector<std::string> row = {name};
    std::size_t n = 0;
    std::string hashes;
    for (const auto& c : cells) {
      if (c.variant != name) continue;
      ++n;
      hashes += (hashes.empty() ? "" : ";") + std::to_string(c.phase1_hash);
    }
    row.push_back(std::to_string(n));
    for (const auto& m : metrics) {
      std::vector<double> vals;
      for (const auto& c : cells) {
        if (c.variant != name) continue;
        if (const auto v = m.get(c)) vals.push_back(*v);
      }
      if (vals.empty()) {
        row.insert(row.end(), {"", ""});
      } else {
        const auto [mean, sd] = mean_std(vals);
        row.push_back(fmt(mean));
        row.push_back(fmt(sd));
        if (m.name == "map_novel") novel_means.push_back(mean);
      }
    }
    row.push_back(hashes);
    rows.push_back(std::move(row));
  }

  std::string out = "variant,seeds";
  for (const auto& m : metrics) out += "," + m.name + "_mean," + m.name + "_std";
  out += ",map_novel_rank,phase1_hashes\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    // 1 = best mean novel mAP.
    int rank = 1;
    for (std::size_t j = 0; j < rows.size(); ++j) rank += novel_means[j] > novel_means[i];
    auto& row = rows[i];
    const std::string hashes = row.back();
    row.pop_back();
    row.push_back(std::to_string(rank));
    row.push_back(hashes);
    for (std::size_t k = 0; k < row.size(); ++k) out += (k ? "," : "") + row[k];
    out += "\n";
  }
  return out;
}

}  // namespace weakvoc::exp
