#include "osev/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include "osev/nn/checkpoint.hpp"

namespace osev::pipeline {
namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

const char* flag(bool b) { return b ? "true" : "false"; }

std::string mode_name(const debias::TrainingMode& m) {
  return m.kind == debias::TrainingMode::Kind::kJoint ? "joint" : "alternating";
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  std::vector<std::string> problems;
  const auto need = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  need(hidden > 0, "hidden: must be > 0");
  need(conv_layers > 0, "conv_layers: must be > 0");
  need(kernel_width >= 2, "kernel_width: must be >= 2");
  need(epochs > 0, "epochs: must be > 0");
  need(batch_size >= 2, "batch_size: must be >= 2 (HSIC needs two samples)");
  need(lr > 0.0, "lr: must be > 0");
  need(momentum >= 0.0 && momentum < 1.0, "momentum: must lie in [0, 1)");
  need(weight_decay >= 0.0, "weight_decay: must be >= 0");
  need(lr_step >= 0, "lr_step: must be >= 0");
  need(lr_gamma > 0.0, "lr_gamma: must be > 0");
  need(evidence_clamp > 0.0, "evidence_clamp: must be > 0");
  need(lambda0 > 0.0 && lambda0 < 1.0, "lambda0: must lie in (0, 1)");
  need(mode.period >= 1, "ced_period: must be >= 1");
  need(eval.coverage > 0.0 && eval.coverage <= 1.0, "coverage: must lie in (0, 1]");
  need(eval.ece_bins >= 1, "ece_bins: must be >= 1");
  need(eval.selections >= 1, "selections: must be >= 1");
  if (head == debias::HeadKind::kSoftmax) {
    need(!use_euc, "use_euc: requires the evidential head");
    need(!use_ced, "use_ced: requires the evidential head");
  }
  try {
    weights.validate();
  } catch (const std::exception& e) {
    problems.push_back(e.what());
  }
  if (problems.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw config::ConfigError(msg);
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "data = " << data.generic_string() << "\n"
    << "hidden = " << hidden << "\n"
    << "conv_layers = " << conv_layers << "\n"
    << "kernel_width = " << kernel_width << "\n"
    << "epochs = " << epochs << "\n"
    << "batch_size = " << batch_size << "\n"
    << "lr = " << num(lr) << "\n"
    << "momentum = " << num(momentum) << "\n"
    << "weight_decay = " << num(weight_decay) << "\n"
    << "nesterov = " << flag(nesterov) << "\n"
    << "lr_step = " << lr_step << "\n"
    << "lr_gamma = " << num(lr_gamma) << "\n"
    << "head = " << debias::to_string(head) << "\n"
    << "evidence = " << evidential::to_string(evidence) << "\n"
    << "evidence_clamp = " << num(evidence_clamp) << "\n"
    << "use_euc = " << flag(use_euc) << "\n"
    << "use_ced = " << flag(use_ced) << "\n"
    << "euc_reduction = " << losses::to_string(euc_reduction) << "\n"
    << "ced_mode = " << mode_name(mode) << "\n"
    << "ced_period = " << mode.period << "\n"
    << "w_euc = " << num(weights.w_euc) << "\n"
    << "w_ced = " << num(weights.w_ced) << "\n"
    << "lambda_hsic = " << num(weights.lambda_hsic) << "\n"
    << "lambda0 = " << num(lambda0) << "\n"
    << "verify_stop_gradients = " << flag(verify_stop_gradients) << "\n"
    << "coverage = " << num(eval.coverage) << "\n"
    << "ece_bins = " << eval.ece_bins << "\n"
    << "selections = " << eval.selections << "\n"
    << "seed = " << seed << "\n";
  return o.str();
}

nlohmann::json RunConfig::to_json() const {
  return {{"data", data.generic_string()},
          {"hidden", hidden},
          {"conv_layers", conv_layers},
          {"kernel_width", kernel_width},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"nesterov", nesterov},
          {"lr_step", lr_step},
          {"lr_gamma", lr_gamma},
          {"head", std::string(debias::to_string(head))},
          {"evidence", std::string(evidential::to_string(evidence))},
          {"evidence_clamp", evidence_clamp},
          {"use_euc", use_euc},
          {"use_ced", use_ced},
          {"euc_reduction", std::string(losses::to_string(euc_reduction))},
          {"ced_mode", mode_name(mode)},
          {"ced_period", mode.period},
          {"w_euc", weights.w_euc},
          {"w_ced", weights.w_ced},
          {"lambda_hsic", weights.lambda_hsic},
          {"lambda0", lambda0},
          {"verify_stop_gradients", verify_stop_gradients},
          {"coverage", eval.coverage},
          {"ece_bins", eval.ece_bins},
          {"selections", eval.selections},
          {"seed", seed}};
}

RunConfig RunConfig::from_config(const config::KeyValues& kv, const fs::path& base_dir) {
  RunConfig c;
  const std::string data = kv.get_string("data", "");
  if (!data.empty()) {
    fs::path p(data);
    c.data = p.is_absolute() || base_dir.empty() ? p : (base_dir / p).lexically_normal();
  }
  c.hidden = kv.get_size("hidden", c.hidden);
  c.conv_layers = kv.get_size("conv_layers", c.conv_layers);
  c.kernel_width = kv.get_size("kernel_width", c.kernel_width);
  c.epochs = kv.get_size("epochs", c.epochs);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.lr = kv.get_double("lr", c.lr);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.nesterov = kv.get_bool("nesterov", c.nesterov);
  c.lr_step = static_cast<int>(kv.get_size("lr_step", 0));
  c.lr_gamma = kv.get_double("lr_gamma", c.lr_gamma);
  try {
    c.head = debias::parse_head_kind(kv.get_string("head", "evidential"));
    c.evidence = evidential::parse_evidence_function(kv.get_string("evidence", "exp"));
    c.euc_reduction = losses::parse_euc_reduction(kv.get_string("euc_reduction", "batch"));
  } catch (const std::invalid_argument& e) {
    throw config::ConfigError(kv.source() + ": " + e.what());
  }
  c.evidence_clamp = kv.get_double("evidence_clamp", c.evidence_clamp);
  c.use_euc = kv.get_bool("use_euc", c.use_euc);
  c.use_ced = kv.get_bool("use_ced", c.use_ced);
  const std::string mode = kv.get_string("ced_mode", "joint");
  const std::size_t period = kv.get_size("ced_period", 1);
  if (mode == "joint") {
    c.mode = debias::TrainingMode::joint();
    c.mode.period = period;
  } else if (mode == "alternating") {
    c.mode = {debias::TrainingMode::Kind::kAlternating, period};
  } else {
    throw config::ConfigError(kv.source() + ": ced_mode must be joint or alternating, got '" +
                              mode + "'");
  }
  c.weights.w_euc = kv.get_double("w_euc", c.weights.w_euc);
  c.weights.w_ced = kv.get_double("w_ced", c.weights.w_ced);
  c.weights.lambda_hsic = kv.get_double("lambda_hsic", c.weights.lambda_hsic);
  c.lambda0 = kv.get_double("lambda0", c.lambda0);
  c.verify_stop_gradients = kv.get_bool("verify_stop_gradients", c.verify_stop_gradients);
  c.eval.coverage = kv.get_double("coverage", c.eval.coverage);
  c.eval.ece_bins = kv.get_size("ece_bins", c.eval.ece_bins);
  c.eval.selections = kv.get_size("selections", c.eval.selections);
  c.seed = kv.get_u64("seed", c.seed);
  c.eval.seed = c.seed;
  kv.require_all_used();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  return from_config(config::KeyValues::load(path), path.parent_path());
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  // Round-trip through the text form so both paths share one parser.
  std::string text;
  for (const auto& [key, value] : j.items()) {
    text += key + " = " + (value.is_string() ? value.get<std::string>() : value.dump()) + "\n";
  }
  return from_config(config::KeyValues::parse(text, "<embedded config>"));
}

debias::Architecture architecture_for(const RunConfig& config, const data::SyntheticSpec& spec) {
  debias::Architecture a;
  a.input_channels = spec.channels;
  a.num_classes = spec.known_classes;
  a.hidden = config.hidden;
  a.conv_layers = config.conv_layers;
  a.kernel_width = config.kernel_width;
  a.head = config.head;
  a.evidence = config.evidence;
  a.exp_clamp = config.evidence_clamp;
  a.validate();
  return a;
}

std::string losses_csv(const std::vector<EpochRecord>& records) {
  std::string out = "epoch,edl,euc,ced,hsic_shuffled,hsic_static,total,lambda_t,lr,train_acc\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch);
    for (double v : {r.edl, r.euc, r.ced, r.hsic_shuffled, r.hsic_static, r.total, r.lambda_t,
                     r.lr, r.train_acc}) {
      out += ',' + num(v);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

TrainResult train_model(const RunConfig& config, const data::Dataset& dataset, const LogFn& log) {
  config.validate();
  const auto arch = architecture_for(config, dataset.spec);
  TrainResult result;
  result.branches = debias::make_branches(arch, derive_seed(config.seed, "init"), config.use_ced);

  const auto& train = dataset.train;
  const std::size_t n = train.samples.size();
  if (n < 2) throw std::invalid_argument("training split needs at least two samples");
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = train.samples[i].label;

  Rng batch_rng(derive_seed(config.seed, "batch"));
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  const losses::AnnealingSchedule schedule(config.lambda0,
                                           static_cast<int>(std::max<std::size_t>(1, config.epochs - 1)));
  debias::StepOptions opts;
  opts.use_euc = config.use_euc;
  opts.use_ced = config.use_ced;
  opts.euc_reduction = config.euc_reduction;
  opts.mode = config.mode;
  opts.weights = config.weights;
  opts.verify_stop_gradients = config.verify_stop_gradients;
  opts.sgd.momentum = config.momentum;
  opts.sgd.weight_decay = config.weight_decay;
  opts.sgd.nesterov = config.nesterov;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lambda_t = schedule.at(static_cast<int>(epoch));
    rec.lr = nn::step_lr(config.lr, static_cast<int>(epoch), config.lr_step, config.lr_gamma);
    opts.sgd.lr = rec.lr;
    const auto order = batch_rng.permutation(n);
    std::size_t batches = 0;
    std::size_t seen = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      if (end - start < 2) break;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      debias::Batch batch;
      batch.x = data::to_tensor(train, idx);
      for (std::size_t i : idx) batch.labels.push_back(labels[i]);
      debias::StepRecord s;
      try {
        s = debias::train_step(result.branches, batch, opts, rec.lambda_t, step, shuffle_rng);
      } catch (const debias::NonFiniteLoss& e) {
        throw TrainingDiverged("epoch " + std::to_string(epoch) + ", " + e.what());
      }
      ++step;
      ++batches;
      seen += idx.size();
      correct += s.correct;
      rec.edl += s.edl;
      rec.euc += s.euc;
      rec.ced += s.ced;
      rec.hsic_shuffled += s.hsic_shuffled;
      rec.hsic_static += s.hsic_static;
      rec.total += s.total;
    }
    const double nb = static_cast<double>(batches);
    rec.edl /= nb;
    rec.euc /= nb;
    rec.ced /= nb;
    rec.hsic_shuffled /= nb;
    rec.hsic_static /= nb;
    rec.total /= nb;
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    result.epochs.push_back(rec);
    if (log) {
      log("epoch " + std::to_string(epoch) + " total=" + num(rec.total) + " edl=" + num(rec.edl) +
          " euc=" + num(rec.euc) + " ced=" + num(rec.ced) + " lambda_t=" + num(rec.lambda_t) +
          " train_acc=" + num(rec.train_acc));
    }
  }
  return result;
}

void save_model(const debias::CedBranches& branches, const RunConfig& config,
                std::size_t num_known, const fs::path& stem) {
  const nlohmann::json meta = {{"architecture", branches.arch.to_json()},
                               {"config", config.to_json()},
                               {"num_known", num_known},
                               {"seed", config.seed}};
  const auto params = branches.all_parameters();
  nn::save_checkpoint(stem, params, !branches.has_biased(), meta);
}

TrainResult train_to_directory(const RunConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream log_file(out_dir / "train.log", std::ios::trunc);
  const auto log = [&](const std::string& line) {
    log_file << timestamp() << ' ' << line << '\n';
    log_file.flush();
  };
  log("config " + config.data.generic_string() + " seed " + std::to_string(config.seed));
  const auto dataset = data::load_dataset(config.data);
  TrainResult result;
  try {
    result = train_model(config, dataset, log);
  } catch (const TrainingDiverged& e) {
    log(std::string("non-finite loss: ") + e.what());
    throw;
  }
  write_text(out_dir / "config.txt", config.to_text());
  write_text(out_dir / "losses.csv", losses_csv(result.epochs));
  save_model(result.branches, config, dataset.spec.known_classes, out_dir / "model");
  save_model(debias::strip_for_inference(result.branches), config, dataset.spec.known_classes,
             out_dir / "model_stripped");
  log("done");
  return result;
}

LoadedModel load_model(const fs::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  LoadedModel m;
  try {
    const auto arch = debias::Architecture::from_json(ckpt.metadata.at("architecture"));
    m.config = RunConfig::from_json(ckpt.metadata.at("config"));
    m.stripped = ckpt.stripped;
    m.branches = debias::make_branches(arch, 0, !ckpt.stripped);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint metadata is incomplete: " + std::string(e.what()));
  }
  const auto params = m.branches.all_parameters();
  nn::restore_parameters(ckpt, params);
  return m;
}

// ---------------------------------------------------------------------------

metrics::ScoredSplits score_dataset(debias::CedBranches& branches, const data::Dataset& dataset) {
  const auto& arch = branches.arch;
  if (arch.num_classes != dataset.spec.known_classes) {
    throw DataMismatch("model has " + std::to_string(arch.num_classes) +
                       " classes, dataset has " + std::to_string(dataset.spec.known_classes) +
                       " known classes");
  }
  if (arch.input_channels != dataset.spec.channels) {
    throw DataMismatch("model expects " + std::to_string(arch.input_channels) +
                       " channels, dataset has " + std::to_string(dataset.spec.channels));
  }
  metrics::ScoredSplits out;
  out.num_known = arch.num_classes;
  const auto score = [&](const data::DatasetSplit& split, std::vector<metrics::OpenSetRecord>& dst) {
    constexpr std::size_t kChunk = 256;
    const std::size_t k = dataset.spec.known_classes;
    for (std::size_t start = 0; start < split.samples.size(); start += kChunk) {
      const std::size_t end = std::min(split.samples.size(), start + kChunk);
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < end; ++i) idx.push_back(i);
      const auto inf = debias::infer(branches, data::to_tensor(split, idx));
      for (std::size_t b = 0; b < idx.size(); ++b) {
        metrics::OpenSetRecord r;
        r.probs.assign(inf.probs.values().begin() + static_cast<std::ptrdiff_t>(b * k),
                       inf.probs.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
        r.score = inf.scores[b];
        const std::size_t label = split.samples[idx[b]].label;
        r.origin = label;
        r.label = label < k ? label : metrics::kUnknown;
        dst.push_back(std::move(r));
      }
    }
  };
  score(dataset.train, out.train);
  score(dataset.test_biased, out.test_biased);
  score(dataset.test_unbiased, out.test_unbiased);
  score(dataset.test_unknown, out.test_unknown);
  return out;
}

EvalResult evaluate(debias::CedBranches& branches, const RunConfig& config,
                    const data::Dataset& dataset) {
  EvalResult r;
  r.scores = score_dataset(branches, dataset);
  r.report = metrics::build_report(r.scores, config.eval);
  r.report.report["config"] = config.to_json();
  r.report.report["seed"] = config.seed;
  return r;
}

EvalResult evaluate_to_files(const fs::path& checkpoint, const fs::path& data_dir,
                             const fs::path& report_path) {
  auto model = load_model(checkpoint);
  const auto dataset = data::load_dataset(data_dir);
  auto r = evaluate(model.branches, model.config, dataset);
  fs::path stem = report_path;
  stem.replace_extension();
  write_text(report_path, r.report.report.dump(2) + "\n");
  write_text(fs::path(stem.string() + "_curve.csv"), metrics::curve_csv(r.report.curve));
  write_text(fs::path(stem.string() + "_scores.jsonl"), metrics::score_dump(r.scores));
  return r;
}

}  // namespace osev::pipeline
