#include "osev/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "osev/evidential.hpp"
#include "osev/losses.hpp"
#include "osev/random.hpp"

namespace osev::metrics {

double openness(std::size_t num_known, std::size_t num_unknown) {
  if (num_known == 0) throw std::invalid_argument("openness needs at least one known class");
  const double k2 = 2.0 * static_cast<double>(num_known);
  return 1.0 - std::sqrt(k2 / (k2 + static_cast<double>(num_unknown)));
}

std::vector<std::size_t> open_predictions(std::span<const OpenSetRecord> records, double tau,
                                          std::size_t num_known) {
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back(r.score > tau ? num_known : evidential::argmax(r.probs));
  }
  return out;
}

std::vector<std::size_t> open_labels(std::span<const OpenSetRecord> records,
                                     std::size_t num_known) {
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.is_unknown() ? num_known : r.label);
  return out;
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                std::size_t num_classes) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("macro_f1: " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> tp(num_classes, 0), pred_count(num_classes, 0),
      label_count(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= num_classes || labels[i] >= num_classes) {
      throw std::invalid_argument("macro_f1: class index out of range at sample " +
                                  std::to_string(i));
    }
    ++pred_count[preds[i]];
    ++label_count[labels[i]];
    if (preds[i] == labels[i]) ++tp[preds[i]];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (pred_count[c] == 0 && label_count[c] == 0) continue;
    ++present;
    // F1 = 2 tp / (2 tp + fp + fn); zero when tp is zero.
    sum += 2.0 * static_cast<double>(tp[c]) /
           static_cast<double>(pred_count[c] + label_count[c]);
  }
  return present == 0 ? 0.0 : sum / static_cast<double>(present);
}

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("accuracy needs equally sized, non-empty inputs");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / n);
  return out;
}

double weighted_mean(std::span<const double> weights, std::span<const double> values) {
  if (weights.size() != values.size()) {
    throw std::invalid_argument("weighted_mean: weights and values differ in length");
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    num += weights[i] * values[i];
    den += weights[i];
  }
  if (!(den > 0.0)) throw std::invalid_argument("weighted_mean: weights sum to zero");
  return num / den;
}

OpenMaf1 open_maf1_curve(std::span<const OpenSetRecord> known,
                         const std::vector<std::vector<OpenSetRecord>>& unknown_pool, double tau,
                         std::size_t num_known, const CurveOptions& options) {
  if (unknown_pool.empty()) throw std::invalid_argument("open_maf1_curve: empty unknown pool");
  if (options.num_selections == 0) {
    throw std::invalid_argument("open_maf1_curve: need at least one selection");
  }
  OpenMaf1 out;
  std::size_t max_i = unknown_pool.size();
  if (options.max_unknown != 0) {
    if (options.max_unknown > max_i) {
      out.note = "requested " + std::to_string(options.max_unknown) +
                 " unknown classes, pool has " + std::to_string(max_i) + "; sweep truncated";
    } else {
      max_i = options.max_unknown;
    }
  }

  const auto known_preds = open_predictions(known, tau, num_known);
  const auto known_labels = open_labels(known, num_known);
  std::vector<std::vector<std::size_t>> pool_preds;
  for (const auto& group : unknown_pool) pool_preds.push_back(open_predictions(group, tau, num_known));

  for (std::size_t i = 1; i <= max_i; ++i) {
    OpennessPoint point;
    point.i = i;
    point.omega = openness(num_known, i);
    const std::uint64_t seed_i = derive_seed(options.seed, static_cast<std::uint64_t>(i));
    for (std::size_t s = 0; s < options.num_selections; ++s) {
      Rng rng(derive_seed(seed_i, static_cast<std::uint64_t>(s)));
      const auto perm = rng.permutation(unknown_pool.size());
      std::vector<std::size_t> preds = known_preds;
      std::vector<std::size_t> labels = known_labels;
      for (std::size_t j = 0; j < i; ++j) {
        const auto& group_preds = pool_preds[perm[j]];
        preds.insert(preds.end(), group_preds.begin(), group_preds.end());
        labels.insert(labels.end(), group_preds.size(), num_known);
      }
      point.f1.push_back(macro_f1(preds, labels, num_known + 1));
    }
    const auto ms = mean_std(point.f1);
    point.f1_mean = ms.mean;
    point.f1_std = ms.std;
    out.points.push_back(std::move(point));
  }

  std::vector<double> omegas, means;
  for (const auto& p : out.points) {
    omegas.push_back(p.omega);
    means.push_back(p.f1_mean);
  }
  out.value = weighted_mean(omegas, means);
  std::vector<double> per_selection;
  for (std::size_t s = 0; s < options.num_selections; ++s) {
    std::vector<double> f1;
    for (const auto& p : out.points) f1.push_back(p.f1[s]);
    per_selection.push_back(weighted_mean(omegas, f1));
  }
  out.selection_std = mean_std(per_selection).std;
  return out;
}

double roc_auc(std::span<const double> scores_known, std::span<const double> scores_unknown) {
  if (scores_known.empty() || scores_unknown.empty()) {
    throw std::invalid_argument("roc_auc needs at least one known and one unknown score");
  }
  std::vector<double> sorted(scores_known.begin(), scores_known.end());
  std::sort(sorted.begin(), sorted.end());
  // Twice the Mann-Whitney U statistic, kept integral so ties stay exact.
  std::uint64_t twice_u = 0;
  for (double s : scores_unknown) {
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), s);
    const auto hi = std::upper_bound(lo, sorted.end(), s);
    twice_u += 2 * static_cast<std::uint64_t>(lo - sorted.begin()) +
               static_cast<std::uint64_t>(hi - lo);
  }
  const double pairs = static_cast<double>(scores_known.size()) *
                       static_cast<double>(scores_unknown.size());
  return static_cast<double>(twice_u) / (2.0 * pairs);
}

double ece(std::span<const double> confidences, std::span<const bool> correct,
           std::size_t num_bins) {
  if (confidences.size() != correct.size()) {
    throw std::invalid_argument("ece: confidences and correctness flags differ in length");
  }
  if (num_bins == 0) throw std::invalid_argument("ece: need at least one bin");
  if (confidences.empty()) return 0.0;
  std::vector<long double> conf_sum(num_bins, 0.0L);
  std::vector<std::size_t> hits(num_bins, 0), count(num_bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw std::invalid_argument("ece: confidence " + std::to_string(c) + " at index " +
                                  std::to_string(i) + " is outside [0, 1]");
    }
    const auto bin = std::min(static_cast<std::size_t>(c * static_cast<double>(num_bins)),
                              num_bins - 1);
    conf_sum[bin] += c;
    hits[bin] += correct[i] ? 1 : 0;
    ++count[bin];
  }
  long double total = 0.0L;
  for (std::size_t m = 0; m < num_bins; ++m) {
    if (count[m] == 0) continue;
    const long double n = static_cast<long double>(count[m]);
    const long double gap = static_cast<long double>(hits[m]) / n - conf_sum[m] / n;
    total += n * (gap < 0 ? -gap : gap);
  }
  return static_cast<double>(total / static_cast<long double>(confidences.size()));
}

Confusion confusion_and_top_confusions(std::span<const std::size_t> preds,
                                       std::span<const std::size_t> labels,
                                       std::span<const std::size_t> origins,
                                       std::size_t num_known, std::size_t top_n) {
  if (preds.size() != labels.size() || origins.size() != labels.size()) {
    throw std::invalid_argument("confusion: inputs differ in length");
  }
  const std::size_t k1 = num_known + 1;
  Confusion out;
  out.counts.assign(k1, std::vector<std::size_t>(k1, 0));
  out.normalized.assign(k1, std::vector<double>(k1, 0.0));
  struct Tally {
    std::size_t count = 0;
    std::vector<std::size_t> known_hits;
  };
  std::vector<std::pair<std::size_t, Tally>> unknown;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= k1 || labels[i] >= k1) {
      throw std::invalid_argument("confusion: class index out of range at sample " +
                                  std::to_string(i));
    }
    ++out.counts[labels[i]][preds[i]];
    if (labels[i] != num_known) continue;
    auto it = std::find_if(unknown.begin(), unknown.end(),
                           [&](const auto& e) { return e.first == origins[i]; });
    if (it == unknown.end()) {
      unknown.push_back({origins[i], Tally{0, std::vector<std::size_t>(num_known, 0)}});
      it = unknown.end() - 1;
    }
    ++it->second.count;
    if (preds[i] < num_known) ++it->second.known_hits[preds[i]];
  }
  for (std::size_t r = 0; r < k1; ++r) {
    const std::size_t total = std::accumulate(out.counts[r].begin(), out.counts[r].end(),
                                              std::size_t{0});
    if (total == 0) continue;
    for (std::size_t c = 0; c < k1; ++c) {
      out.normalized[r][c] = static_cast<double>(out.counts[r][c]) / static_cast<double>(total);
    }
  }
  for (const auto& [origin, tally] : unknown) {
    UnknownConfusion u;
    u.origin = origin;
    u.count = tally.count;
    const std::size_t wrong =
        std::accumulate(tally.known_hits.begin(), tally.known_hits.end(), std::size_t{0});
    u.rate = static_cast<double>(wrong) / static_cast<double>(tally.count);
    u.top_target = static_cast<std::size_t>(
        std::max_element(tally.known_hits.begin(), tally.known_hits.end()) -
        tally.known_hits.begin());
    u.top_target_rate =
        static_cast<double>(tally.known_hits[u.top_target]) / static_cast<double>(tally.count);
    out.top_unknown.push_back(u);
  }
  std::stable_sort(out.top_unknown.begin(), out.top_unknown.end(),
                   [](const UnknownConfusion& a, const UnknownConfusion& b) {
                     if (a.rate != b.rate) return a.rate > b.rate;
                     return a.origin < b.origin;
                   });
  if (out.top_unknown.size() > top_n) out.top_unknown.resize(top_n);
  return out;
}

nlohmann::json EvaluationSettings::to_json() const {
  return {{"coverage", coverage}, {"ece_bins", ece_bins}, {"selections", selections},
          {"seed", seed}};
}

EvaluationSettings EvaluationSettings::from_json(const nlohmann::json& j) {
  EvaluationSettings s;
  s.coverage = j.at("coverage").get<double>();
  s.ece_bins = j.at("ece_bins").get<std::size_t>();
  s.selections = j.at("selections").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

namespace {

std::vector<double> scores_of(std::span<const OpenSetRecord> records) {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.score);
  return out;
}

double closed_accuracy(std::span<const OpenSetRecord> records) {
  std::vector<std::size_t> preds, labels;
  for (const auto& r : records) {
    preds.push_back(evidential::argmax(r.probs));
    labels.push_back(r.label);
  }
  return accuracy(preds, labels);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void require_split(std::span<const OpenSetRecord> records, const char* name, bool unknown) {
  if (records.empty()) throw std::invalid_argument(std::string("split '") + name + "' is empty");
  for (const auto& r : records) {
    if (r.is_unknown() != unknown) {
      throw std::invalid_argument(std::string("split '") + name +
                                  (unknown ? "' contains a known-class record"
                                           : "' contains an unknown-class record"));
    }
  }
}

}  // namespace

ReportResult build_report(const ScoredSplits& splits, const EvaluationSettings& settings) {
  const std::size_t k = splits.num_known;
  require_split(splits.train, "train", false);
  require_split(splits.test_biased, "test_biased", false);
  require_split(splits.test_unbiased, "test_unbiased", false);
  require_split(splits.test_unknown, "test_unknown", true);

  const auto train_scores = scores_of(splits.train);
  const double tau = evidential::threshold_from_train_scores(train_scores, settings.coverage);

  std::vector<std::vector<OpenSetRecord>> pool;
  std::vector<std::size_t> pool_origin;
  for (const auto& r : splits.test_unknown) {
    auto it = std::find(pool_origin.begin(), pool_origin.end(), r.origin);
    if (it == pool_origin.end()) {
      pool_origin.push_back(r.origin);
      pool.emplace_back();
      it = pool_origin.end() - 1;
    }
    pool[static_cast<std::size_t>(it - pool_origin.begin())].push_back(r);
  }
  // Group order follows the class id so the curve does not depend on record order.
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return pool_origin[a] < pool_origin[b]; });
  std::vector<std::vector<OpenSetRecord>> sorted_pool;
  for (std::size_t idx : order) sorted_pool.push_back(std::move(pool[idx]));

  ReportResult result;
  result.curve = open_maf1_curve(splits.test_biased, sorted_pool, tau, k,
                                 {settings.selections, 0, derive_seed(settings.seed, "curve")});

  const double auc = roc_auc(scores_of(splits.test_biased), scores_of(splits.test_unknown));

  // Open-set calibration: every unknown sample counts as a wrong prediction.
  std::vector<OpenSetRecord> open_records(splits.test_biased);
  open_records.insert(open_records.end(), splits.test_unknown.begin(), splits.test_unknown.end());
  std::vector<double> conf, uncertainty;
  const auto correct = std::make_unique<bool[]>(open_records.size());
  std::vector<double> closed_conf;
  const auto closed_correct = std::make_unique<bool[]>(splits.test_biased.size());
  for (std::size_t i = 0; i < open_records.size(); ++i) {
    const auto& r = open_records[i];
    const std::size_t am = evidential::argmax(r.probs);
    conf.push_back(r.probs[am]);
    uncertainty.push_back(r.score);
    correct[i] = !r.is_unknown() && am == r.label;
    if (i < splits.test_biased.size()) {
      closed_conf.push_back(r.probs[am]);
      closed_correct[i] = correct[i];
    }
  }
  const std::span<const bool> correct_span(correct.get(), open_records.size());
  const double open_ece = ece(conf, correct_span, settings.ece_bins);
  const double closed_ece = ece(
      closed_conf, std::span<const bool>(closed_correct.get(), splits.test_biased.size()),
      settings.ece_bins);
  const double avu = losses::avu_utility(correct_span, uncertainty, median(uncertainty));

  const auto preds = open_predictions(open_records, tau, k);
  const auto labels = open_labels(open_records, k);
  std::vector<std::size_t> origins;
  for (const auto& r : open_records) origins.push_back(r.origin);
  const auto confusion = confusion_and_top_confusions(preds, labels, origins, k);

  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : result.curve.points) {
    points.push_back({{"i", p.i}, {"omega", p.omega}, {"f1_mean", p.f1_mean},
                      {"f1_std", p.f1_std}});
  }
  nlohmann::json top = nlohmann::json::array();
  for (const auto& u : confusion.top_unknown) {
    top.push_back({{"class", u.origin}, {"count", u.count}, {"rate", u.rate},
                   {"top_target", u.top_target}, {"top_target_rate", u.top_target_rate}});
  }
  auto& j = result.report;
  j["num_known"] = k;
  j["num_unknown_classes"] = sorted_pool.size();
  j["tau"] = tau;
  j["train_known_fraction"] =
      static_cast<double>(std::count_if(train_scores.begin(), train_scores.end(),
                                        [&](double s) { return s <= tau; })) /
      static_cast<double>(train_scores.size());
  j["closed_acc"] = closed_accuracy(splits.test_biased);
  j["unbiased_acc"] = closed_accuracy(splits.test_unbiased);
  j["open_maf1"] = {{"mean", result.curve.value},
                    {"std", result.curve.selection_std},
                    {"points", points}};
  if (!result.curve.note.empty()) j["open_maf1"]["note"] = result.curve.note;
  j["open_auc"] = auc;
  j["ece"] = open_ece;
  j["closed_ece"] = closed_ece;
  j["avu"] = avu;
  j["confusion"] = {{"counts", confusion.counts},
                    {"normalized", confusion.normalized},
                    {"top_unknown", top}};
  j["evaluation"] = settings.to_json();
  return result;
}

std::string curve_csv(const OpenMaf1& curve) {
  std::ostringstream out;
  out << "i,omega,f1_mean,f1_std\n";
  for (const auto& p : curve.points) {
    out << p.i << ',' << nlohmann::json(p.omega).dump() << ','
        << nlohmann::json(p.f1_mean).dump() << ',' << nlohmann::json(p.f1_std).dump() << '\n';
  }
  return out.str();
}

namespace {

constexpr const char* kSplitNames[] = {"train", "test_biased", "test_unbiased", "test_unknown"};

}  // namespace

std::string score_dump(const ScoredSplits& splits) {
  std::ostringstream out;
  const std::vector<OpenSetRecord>* parts[] = {&splits.train, &splits.test_biased,
                                               &splits.test_unbiased, &splits.test_unknown};
  for (std::size_t s = 0; s < 4; ++s) {
    for (const auto& r : *parts[s]) {
      nlohmann::json j;
      j["split"] = kSplitNames[s];
      j["probs"] = r.probs;
      j["score"] = r.score;
      if (r.is_unknown()) {
        j["label"] = "unknown";
      } else {
        j["label"] = r.label;
      }
      j["class"] = r.origin;
      out << j.dump() << '\n';
    }
  }
  return out.str();
}

ScoredSplits parse_score_dump(const std::string& text) {
  ScoredSplits splits;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fail = [&](const std::string& what) {
      throw std::runtime_error("score dump line " + std::to_string(line_no) + ": " + what);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
    if (!j.is_object() || !j.contains("probs") || !j.contains("score") || !j.contains("label")) {
      fail("record needs probs, score and label");
    }
    OpenSetRecord r;
    try {
      r.probs = j.at("probs").get<std::vector<double>>();
      r.score = j.at("score").get<double>();
      const auto& label = j.at("label");
      if (label.is_string()) {
        if (label.get<std::string>() != "unknown") fail("label must be an integer or \"unknown\"");
        r.label = kUnknown;
      } else {
        r.label = label.get<std::size_t>();
      }
      r.origin = j.value("class", r.is_unknown() ? std::size_t{0} : r.label);
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
    if (!std::isfinite(r.score)) fail("score is not finite");
    if (splits.num_known == 0) splits.num_known = r.probs.size();
    if (r.probs.size() != splits.num_known) fail("inconsistent number of classes");
    if (!r.is_unknown() && r.label >= splits.num_known) fail("label out of range");
    const std::string split =
        j.value("split", r.is_unknown() ? std::string("test_unknown") : std::string("test_biased"));
    if (split == "train") {
      splits.train.push_back(std::move(r));
    } else if (split == "test_biased") {
      splits.test_biased.push_back(std::move(r));
    } else if (split == "test_unbiased") {
      splits.test_unbiased.push_back(std::move(r));
    } else if (split == "test_unknown") {
      splits.test_unknown.push_back(std::move(r));
    } else {
      fail("unknown split '" + split + "'");
    }
  }
  return splits;
}

}  // namespace osev::metrics
