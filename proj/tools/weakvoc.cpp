// weakvoc: dataset generation, training, evaluation and ablations.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "weakvoc/experiment.hpp"
#include "weakvoc/parallel.hpp"

using namespace weakvoc;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void log_line(const std::string& line) { std::cerr << line << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary detection with image-level supervision on a synthetic shapes benchmark"};
  app.require_subcommand(0, 1);

  std::string config_path;
  bool print_config = false, deterministic = false;
  app.add_option("--config", config_path, "JSON experiment config (missing keys keep defaults)");
  app.add_flag("--print-config", print_config, "Print the effective config and exit");
  app.add_flag("--deterministic", deterministic, "Run single-threaded for bit-exact reproduction");

  auto* gen = app.add_subcommand("gen-data", "Generate the shapes benchmark");
  std::string gen_out;
  bool force = false;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Dataset seed (overrides data_seed)");
  gen->add_flag("--force", force, "Write into a non-empty directory");

  auto* tr = app.add_subcommand("train", "Phase 1, then phase 2 with the chosen weak loss");
  std::string tr_data, tr_out, tr_variant, tr_resume;
  std::optional<std::uint64_t> tr_seed;
  bool log_assignments = false;
  tr->add_option("--data", tr_data, "Dataset file (dataset.wvd1)")->required();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--weak-variant", tr_variant, "Weak loss; 'none' trains phase 1 only");
  tr->add_option("--resume", tr_resume, "Phase-1 checkpoint to start phase 2 from");
  tr->add_option("--seed", tr_seed, "Training seed");
  tr->add_flag("--log-assignments", log_assignments, "Stream every training assignment to assignments.jsonl");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  std::string ev_ckpt, ev_data, ev_out, ev_run;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint (.wvp1)")->required();
  ev->add_option("--data", ev_data, "Dataset file")->required();
  ev->add_option("--out", ev_out, "Report directory")->required();
  ev->add_option("--run-dir", ev_run, "Run directory with probe assignment logs (default: the checkpoint's)");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate variants over seeds from shared phase-1 models");
  std::string ab_out, ab_variants = "none,max-size", ab_seeds = "0,1,2", ab_data;
  int jobs = 1;
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--variants", ab_variants, "Comma-separated variants")->capture_default_str();
  ab->add_option("--seeds", ab_seeds, "Comma-separated training seeds")->capture_default_str();
  ab->add_option("--data", ab_data, "Dataset file (default: generate from the config)");
  ab->add_option("--jobs", jobs, "Independent cells run in parallel")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    exp::ExperimentConfig config = config_path.empty() ? exp::ExperimentConfig{} : exp::load_config(config_path);
    if (print_config) {
      std::cout << exp::to_json(config).dump(2) << "\n";
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 2;
    }
    if (deterministic) set_thread_limit(1);

    if (gen->parsed()) {
      if (gen_seed) config.data_seed = *gen_seed;
      const auto r = exp::gen_data(config, gen_out, force);
      std::cout << "wrote " << r.dataset.string() << " hash " << r.hash << "\n";
      for (const auto& [k, v] : r.meta.at("splits").items()) std::cout << "  " << k << ": " << v << " images\n";
      const auto& vocab = r.meta.at("vocabulary");
      std::cout << "  classes: " << vocab.at("classes").size() << " (" << vocab.at("novel_ids").size() << " novel)\n";
    } else if (tr->parsed()) {
      if (!tr_variant.empty()) config.losses.variant = loss::parse_variant(tr_variant);
      if (tr_seed) config.train.seed = *tr_seed;
      config.train.log_assignments = config.train.log_assignments || log_assignments;
      config.data_path = fs::absolute(tr_data).string();
      config.out_dir = tr_out;
      const auto bench = exp::load_benchmark(config);
      const auto r = exp::run_train(config, bench, tr_out,
                                    tr_resume.empty() ? std::nullopt : std::optional<fs::path>(tr_resume), log_line);
      std::cout << "final checkpoint " << r.final_checkpoint.string() << "\n";
    } else if (ev->parsed()) {
      config.data_path = fs::absolute(ev_data).string();
      const auto bench = exp::load_benchmark(config);
      const auto model = train::load_detector(ev_ckpt);
      const fs::path run = ev_run.empty() ? fs::path(ev_ckpt).parent_path() : fs::path(ev_run);
      const auto r = exp::run_eval(model, bench, config.eval, ev_out, run);
      std::cout << "map_all " << r.maps.map_all << " map_base " << r.maps.map_base << " map_novel "
                << r.maps.map_novel << "\n";
    } else if (ab->parsed()) {
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(ab_seeds)) seeds.push_back(std::stoull(s));
      if (!ab_data.empty()) config.data_path = fs::absolute(ab_data).string();
      config.out_dir = ab_out;
      const auto bench = exp::load_benchmark(config);
      const auto r = exp::run_ablation(config, bench, ab_out, split_list(ab_variants), seeds, jobs, log_line);
      std::cout << "wrote " << r.table.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
