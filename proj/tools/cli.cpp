#include "osev/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "osev/config.hpp"
#include "osev/data.hpp"
#include "osev/gradcheck_suite.hpp"
#include "osev/metrics.hpp"
#include "osev/pipeline.hpp"
#include "osev/random.hpp"

namespace osev::cli {
namespace fs = std::filesystem;
namespace {

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

// Loads a run config and applies key=value overrides on top.
pipeline::RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& sets) {
  auto kv = config::KeyValues::load(path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw config::ConfigError("--set expects key=value, got '" + s + "'");
    }
    auto trim = [](std::string x) {
      const auto b = x.find_first_not_of(" \t");
      const auto e = x.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
    };
    kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return pipeline::RunConfig::from_config(kv, path.parent_path());
}

int generate_data(const fs::path& spec_path, const fs::path& out_dir, std::ostream& out,
                  std::ostream& err) {
  data::SyntheticSpec spec;
  try {
    spec = data::SyntheticSpec::from_config(config::KeyValues::load(spec_path));
    spec.validate();
  } catch (const std::exception& e) {
    err << "error: invalid spec: " << e.what() << '\n';
    return kInvalidSpec;
  }
  const auto dataset = data::generate(spec);
  data::save_dataset(dataset, out_dir);
  out << "wrote " << (out_dir / "manifest.json").string() << '\n';
  return kOk;
}

int train(const fs::path& config_path, const std::vector<std::string>& sets,
          const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  const auto config = load_run_config(config_path, sets);
  try {
    const auto result = pipeline::train_to_directory(config, out_dir);
    if (!result.epochs.empty()) {
      const auto& last = result.epochs.back();
      out << "trained " << result.epochs.size() << " epochs, final total " << num(last.total)
          << ", train acc " << num(last.train_acc) << '\n';
    }
  } catch (const pipeline::TrainingDiverged& e) {
    err << "error: non-finite loss at " << e.what() << '\n';
    return kNonFiniteLoss;
  }
  return kOk;
}

int eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& report,
         std::ostream& out, std::ostream& err) {
  try {
    const auto r = pipeline::evaluate_to_files(checkpoint, data_dir, report);
    const auto& j = r.report.report;
    out << "open_maf1 " << num(j["open_maf1"]["mean"].get<double>()) << ", open_auc "
        << num(j["open_auc"].get<double>()) << ", ece " << num(j["ece"].get<double>()) << '\n';
  } catch (const pipeline::DataMismatch& e) {
    err << "error: checkpoint does not match data: " << e.what() << '\n';
    return kDataMismatch;
  }
  return kOk;
}

struct GradcheckArgs {
  fs::path config;
  std::size_t instances = 0;  // 0: from config or default
  std::vector<std::string> only;
  fs::path json_out;
  bool inject_bug = false;
};

int gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err) {
  checks::SuiteOptions o;
  if (!args.config.empty()) {
    // Run configs are accepted as-is: unrelated keys are ignored.
    const auto kv = config::KeyValues::load(args.config);
    o.instances = kv.get_size("gradcheck_instances", o.instances);
    o.eps = kv.get_double("gradcheck_eps", o.eps);
    o.tolerance = kv.get_double("gradcheck_tolerance", o.tolerance);
    o.seed = kv.get_u64("seed", o.seed);
    o.evidence = evidential::parse_evidence_function(kv.get_string("evidence", "exp"));
    o.exp_clamp = kv.get_double("evidence_clamp", o.exp_clamp);
    o.weights.w_euc = kv.get_double("w_euc", o.weights.w_euc);
    o.weights.w_ced = kv.get_double("w_ced", o.weights.w_ced);
    o.weights.lambda_hsic = kv.get_double("lambda_hsic", o.weights.lambda_hsic);
    o.euc_reduction = losses::parse_euc_reduction(kv.get_string("euc_reduction", "batch"));
  }
  if (args.instances != 0) o.instances = args.instances;
  o.inject_bug = args.inject_bug;
  const auto result = checks::run_suite(o, args.only);
  for (const auto& c : result.cases) {
    out << (c.passed() ? "ok   " : "FAIL ") << c.name << "  max_rel_error " << num(c.max_rel_error)
        << "  checked " << c.checked << "  skipped " << c.skipped << "  instances " << c.instances
        << '\n';
  }
  if (!args.json_out.empty()) pipeline::write_text(args.json_out, result.to_json().dump(2) + "\n");
  if (!result.passed()) {
    err << "gradcheck failed (tolerance " << num(o.tolerance) << "):\n";
    for (const auto& c : result.cases) {
      if (c.passed()) continue;
      if (c.failing.empty()) err << "  " << c.name << '\n';
      for (const auto& f : c.failing) err << "  " << c.name << ' ' << f << '\n';
    }
    return kGradcheckFailed;
  }
  return kOk;
}

int metrics_command(const fs::path& scores, const fs::path& settings_from, const fs::path& report,
                    std::ostream& out) {
  const auto splits = metrics::parse_score_dump(pipeline::read_text(scores));
  metrics::EvaluationSettings settings;
  nlohmann::json source;
  if (!settings_from.empty()) {
    source = nlohmann::json::parse(pipeline::read_text(settings_from));
    settings = metrics::EvaluationSettings::from_json(source.at("evaluation"));
  }
  auto r = metrics::build_report(splits, settings);
  // Carry the config echo over so the rebuilt report compares whole.
  for (const char* key : {"config", "seed"}) {
    if (source.contains(key)) r.report[key] = source[key];
  }
  const std::string text = r.report.dump(2) + "\n";
  if (report.empty()) {
    out << text;
  } else {
    pipeline::write_text(report, text);
  }
  return kOk;
}

}  // namespace

const std::vector<std::string>& sweep_metrics() {
  static const std::vector<std::string> names = {"closed_acc", "unbiased_acc", "open_maf1",
                                                 "open_auc",   "ece",          "closed_ece",
                                                 "avu"};
  return names;
}

nlohmann::json sweep_metric_values(const nlohmann::json& report) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& name : sweep_metrics()) {
    m[name] = name == "open_maf1" ? report.at(name).at("mean") : report.at(name);
  }
  return m;
}

std::size_t sweep_threads_from_env() {
  const std::size_t hw = std::max(1U, std::thread::hardware_concurrency());
  const char* env = std::getenv("OSEV_THREADS");
  if (env == nullptr) return hw;
  std::size_t n = 0;
  const std::string_view s(env);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || n == 0) return hw;
  return n;
}

nlohmann::json run_sweep(const SweepOptions& options, std::ostream& err) {
  if (options.seeds == 0) throw std::invalid_argument("sweep needs at least one seed");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(options.configs)) {
    if (entry.is_regular_file() && entry.path().extension() == ".conf") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw std::runtime_error("no *.conf files in " + options.configs.string());
  }

  struct Job {
    std::size_t config = 0;
    std::size_t seed_index = 0;
    nlohmann::json record;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < files.size(); ++c) {
    for (std::size_t s = 0; s < options.seeds; ++s) jobs.push_back({c, s, {}});
  }

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      Job& job = jobs[j];
      const fs::path& file = files[job.config];
      nlohmann::json& rec = job.record;
      rec["seed_index"] = job.seed_index;
      try {
        auto cfg = pipeline::RunConfig::load(file);
        if (job.seed_index > 0) cfg.seed = derive_seed(cfg.seed, job.seed_index);
        cfg.eval.seed = cfg.seed;
        rec["seed"] = cfg.seed;
        const fs::path dir =
            options.out / file.stem() / ("seed_" + std::to_string(job.seed_index));
        pipeline::train_to_directory(cfg, dir);
        const auto r = pipeline::evaluate_to_files(dir / "model", cfg.data, dir / "report.json");
        rec["status"] = "ok";
        rec["metrics"] = sweep_metric_values(r.report.report);
      } catch (const std::exception& e) {
        rec["status"] = "failed";
        rec["error"] = e.what();
      }
      const std::lock_guard<std::mutex> lock(log_mutex);
      err << file.stem().string() << " seed " << job.seed_index << ": "
          << rec["status"].get<std::string>() << '\n';
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(options.threads, 1, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  // Aggregation is serial and in job order, so the pool size cannot leak in.
  nlohmann::json summary = {{"seeds", options.seeds},
                            {"configs", nlohmann::json::array()},
                            {"failures", nlohmann::json::array()}};
  std::string csv = "config,metric,mean,std,n\n";
  for (std::size_t c = 0; c < files.size(); ++c) {
    const std::string name = files[c].stem().string();
    nlohmann::json entry = {{"name", name}, {"runs", nlohmann::json::array()}};
    std::map<std::string, std::vector<double>> values;
    for (const auto& job : jobs) {
      if (job.config != c) continue;
      entry["runs"].push_back(job.record);
      if (job.record["status"] == "ok") {
        for (const auto& m : sweep_metrics()) {
          values[m].push_back(job.record["metrics"][m].get<double>());
        }
      } else {
        summary["failures"].push_back({{"config", name},
                                       {"seed_index", job.seed_index},
                                       {"error", job.record["error"]}});
      }
    }
    nlohmann::json agg = nlohmann::json::object();
    for (const auto& m : sweep_metrics()) {
      const auto& v = values[m];
      const auto ms = metrics::mean_std(v);
      agg[m] = {{"mean", ms.mean}, {"std", ms.std}, {"n", v.size()}};
      csv += name + "," + m + "," + num(ms.mean) + "," + num(ms.std) + "," +
             std::to_string(v.size()) + "\n";
    }
    entry["summary"] = agg;
    summary["configs"].push_back(entry);
  }
  fs::create_directories(options.out);
  pipeline::write_text(options.out / "summary.json", summary.dump(2) + "\n");
  pipeline::write_text(options.out / "summary.csv", csv);
  return summary;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evidential open-set classification with static-bias debiasing"};
  app.require_subcommand(1);

  fs::path spec_path, out_dir;
  auto* gen = app.add_subcommand("generate-data", "Generate the synthetic dataset");
  gen->add_option("--spec", spec_path, "Dataset spec (key = value)")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  fs::path config_path;
  std::vector<std::string> sets;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config_path, "Run config (key = value)")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--set", sets, "Override a config entry, key=value (repeatable)");

  fs::path checkpoint, data_dir, report;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint stem, .bin or .json")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--out", report, "Report JSON path")->required();

  GradcheckArgs gc;
  auto* gcc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gcc->add_option("--config", gc.config, "Config with evidence/weight settings");
  gcc->add_option("--instances", gc.instances, "Random instances per case");
  gcc->add_option("--only", gc.only, "Restrict to these cases")
      ->check(CLI::IsMember(checks::case_names()));
  gcc->add_option("--json", gc.json_out, "Write the per-case results as JSON");
  gcc->add_flag("--inject-bug", gc.inject_bug)->group("");

  SweepOptions sw;
  auto* swc = app.add_subcommand("sweep", "Config grid x seeds with aggregated summary");
  swc->add_option("--configs", sw.configs, "Directory of *.conf run configs")->required();
  swc->add_option("--seeds", sw.seeds, "Seeds per config")->required();
  swc->add_option("--out", sw.out, "Output directory")->required();

  fs::path scores, settings_from;
  auto* mc = app.add_subcommand("metrics", "Rebuild a report from a score dump");
  mc->add_option("--scores", scores, "Score dump (JSON lines)")->required();
  mc->add_option("--settings-from", settings_from, "Report whose evaluation settings to reuse");
  mc->add_option("--out", report, "Report JSON path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (gen->parsed()) return generate_data(spec_path, out_dir, out, err);
    if (tr->parsed()) return train(config_path, sets, out_dir, out, err);
    if (ev->parsed()) return eval(checkpoint, data_dir, report, out, err);
    if (gcc->parsed()) return gradcheck(gc, out, err);
    if (mc->parsed()) return metrics_command(scores, settings_from, report, out);
    if (swc->parsed()) {
      sw.threads = sweep_threads_from_env();
      const auto summary = run_sweep(sw, err);
      out << "wrote " << (sw.out / "summary.json").string() << '\n';
      return summary["failures"].empty() ? kOk : kFailure;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace osev::cli
