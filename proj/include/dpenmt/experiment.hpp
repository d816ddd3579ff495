#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "dpenmt/bleu.hpp"
#include "dpenmt/config.hpp"
#include "dpenmt/decoding.hpp"
#include "dpenmt/synthetic.hpp"
#include "dpenmt/training.hpp"

namespace dpenmt {

enum class VariantKind { kBaseline, kDpe, kTwoPass, kOracleReorder };

struct Variant {
  VariantKind kind = VariantKind::kBaseline;
  float lambda = 0.5f;  // meaningful for the position-network variant
  std::string name;
};

inline Variant parse_variant(const std::string& text) {
  Variant v;
  v.name = text;
  if (text == "baseline") {
    v.kind = VariantKind::kBaseline;
  } else if (text == "2pt") {
    v.kind = VariantKind::kTwoPass;
  } else if (text == "oracle-reorder") {
    v.kind = VariantKind::kOracleReorder;
  } else if (text == "dpe" || text.rfind("dpe:", 0) == 0) {
    v.kind = VariantKind::kDpe;
    if (text.size() > 4) {
      try {
        std::size_t pos = 0;
        v.lambda = std::stof(text.substr(4), &pos);
        if (pos != text.size() - 4) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw config_error("variant '" + text + "': expected dpe:<lambda>");
      }
    }
  } else {
    throw config_error("unknown variant '" + text +
                       "' (expected baseline|dpe:<lambda>|2pt|oracle-reorder)");
  }
  return v;
}

inline std::vector<Variant> parse_variant_list(const std::string& csv) {
  std::vector<Variant> out;
  std::string item;
  std::istringstream is(csv);
  while (std::getline(is, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const auto b = item.find_last_not_of(" \t");
    out.push_back(parse_variant(item.substr(a, b - a + 1)));
  }
  return out;
}

struct ExperimentSpec {
  SyntheticTask task;
  std::size_t train_pairs = 3000;
  std::size_t dev_pairs = 100;
  std::size_t test_pairs = 500;
  std::vector<std::uint64_t> seeds{1};
  std::vector<Variant> variants;
  ModelConfig model;  // vocab sizes filled from the task
  RunConfig run;

  static ExperimentSpec from_config(const KeyValueConfig& kv) {
    std::set<std::string> allowed{"task",        "vocab",      "min_len",    "max_len",
                                  "rotate_k",    "mapping_offset", "data_seed",
                                  "train_pairs", "dev_pairs",  "test_pairs", "seeds",
                                  "variants"};
    for (const auto& k : model_config_keys()) allowed.insert(k);
    for (const auto& k : run_config_keys()) allowed.insert(k);
    kv.require_known(allowed);

    ExperimentSpec spec;
    spec.task = SyntheticTask::from_config(kv);
    spec.train_pairs = static_cast<std::size_t>(kv.get_uint("train_pairs", spec.train_pairs));
    spec.dev_pairs = static_cast<std::size_t>(kv.get_uint("dev_pairs", spec.dev_pairs));
    spec.test_pairs = static_cast<std::size_t>(kv.get_uint("test_pairs", spec.test_pairs));
    if (spec.train_pairs == 0 || spec.dev_pairs == 0 || spec.test_pairs == 0)
      throw config_error("experiment: train/dev/test pair counts must be positive");

    spec.seeds.clear();
    std::istringstream is(kv.get_string("seeds", "1"));
    std::string item;
    while (std::getline(is, item, ','))
      if (!item.empty()) spec.seeds.push_back(static_cast<std::uint64_t>(std::stoull(item)));
    if (spec.seeds.empty()) throw config_error("experiment: no seeds given");

    spec.variants = parse_variant_list(kv.require_string("variants"));
    if (spec.variants.empty()) throw config_error("experiment: empty variant list");

    spec.model = model_config_from(kv, spec.task.vocab_size, spec.task.vocab_size);
    spec.run = run_config_from(kv);
    return spec;
  }

  // Model geometry for one variant (vocab from the task, position network
  // only where the variant trains it).
  ModelConfig variant_model(const Variant& v) const {
    ModelConfig cfg = model;
    cfg.vocab_src = task.vocab_size;
    cfg.vocab_tgt = task.vocab_size;
    // Position table must cover training lengths and decoding caps.
    cfg.max_len = std::max(cfg.max_len, 2 * task.max_len + 10);
    if (v.kind == VariantKind::kDpe) {
      cfg.dpe_layers = model.dpe_layers > 0 ? model.dpe_layers : 2;
      cfg.lambda = v.lambda;
    } else {
      cfg.dpe_layers = 0;
    }
    cfg.validate();
    return cfg;
  }
};

struct VariantResult {
  std::string variant;
  std::uint64_t seed = 0;
  double bleu = 0.0;
  double exact = -1.0;  // reordering exact match; -1 when not applicable
  double final_translation = 0.0;
  double final_order = 0.0;
  double initial_order = 0.0;
  std::size_t param_count = 0;
  double wall_seconds = 0.0;
  std::string metrics_path;
  std::string model_path;
};

struct ExperimentReport {
  std::vector<VariantResult> rows;
  std::vector<std::string> summary_lines;  // one per variant (means over seeds)

  std::vector<const VariantResult*> rows_for(const std::string& variant) const {
    std::vector<const VariantResult*> out;
    for (const auto& r : rows)
      if (r.variant == variant) out.push_back(&r);
    return out;
  }

  double mean_bleu(const std::string& variant) const {
    auto rs = rows_for(variant);
    if (rs.empty()) throw contract_error("no rows for variant " + variant);
    double s = 0;
    for (auto* r : rs) s += r->bleu;
    return s / static_cast<double>(rs.size());
  }
};

inline std::vector<ValidationEntry> read_metrics(const std::string& path) {
  std::vector<ValidationEntry> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    ValidationEntry e;
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "%llu\t%lf\t%lf\t%lf\t%lf", &step, &e.translation, &e.order,
                    &e.total, &e.bleu) != 5)
      throw parse_error("metrics line is not step<TAB>losses<TAB>bleu: '" + line + "'");
    e.step = step;
    out.push_back(e);
  }
  return out;
}

namespace detail {

struct PreparedData {
  SyntheticData train, dev, test;
  Bitext reorder_train, reorder_dev;       // src -> gold-reordered src
  Bitext reordered_train, reordered_dev;   // gold-reordered src -> tgt
  Bitext oracle_test;                      // gold-reordered test src -> tgt
};

inline Bitext zip_bitext(const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& tgt) {
  Bitext b;
  b.src = src;
  b.tgt = tgt;
  return b;
}

inline PreparedData prepare_data(const ExperimentSpec& spec) {
  PreparedData d;
  SyntheticTask task = spec.task;
  d.train = make_synthetic(task, spec.train_pairs);
  task.seed = spec.task.seed * 7919 + 1;
  d.dev = make_synthetic(task, spec.dev_pairs);
  task.seed = spec.task.seed * 7919 + 2;
  d.test = make_synthetic(task, spec.test_pairs);

  d.reorder_train = zip_bitext(d.train.bitext.src, d.train.reordered_src);
  d.reorder_dev = zip_bitext(d.dev.bitext.src, d.dev.reordered_src);
  d.reordered_train = zip_bitext(d.train.reordered_src, d.train.bitext.tgt);
  d.reordered_dev = zip_bitext(d.dev.reordered_src, d.dev.bitext.tgt);
  d.oracle_test = zip_bitext(d.test.reordered_src, d.test.bitext.tgt);
  return d;
}

inline std::vector<std::string> ids_to_lines(const std::vector<std::vector<int>>& seqs) {
  std::vector<std::string> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(ids_to_line(s));
  return out;
}

inline double test_bleu(const TransformerModel<float>& model, const Bitext& test, int beam) {
  std::vector<std::vector<int>> hyps;
  hyps.reserve(test.size());
  for (const auto& src : test.src)
    hyps.push_back(beam_search(model, src, beam, default_max_out(src.size())));
  return bleu_lines(ids_to_lines(hyps), ids_to_lines(test.tgt));
}

}  // namespace detail

// Trains every (variant, seed) combination on one shared synthetic dataset
// and reports test BLEU, losses, parameter counts and wall time. Trained
// sub-models of the two-pass pipeline are shared with the oracle-reorder
// variant. On a variant failure, rows finished so far are flushed to the
// report files before the error propagates.
class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentSpec spec, std::string out_dir, std::ostream* log = nullptr)
      : spec_(std::move(spec)), out_dir_(std::move(out_dir)), log_(log) {}

  ExperimentReport run() {
    std::filesystem::create_directories(out_dir_);
    data_ = std::make_unique<detail::PreparedData>(detail::prepare_data(spec_));
    ExperimentReport report;
    try {
      for (const auto& variant : spec_.variants)
        for (std::uint64_t seed : spec_.seeds) report.rows.push_back(run_one(variant, seed));
    } catch (...) {
      finalize(report);  // keep partial results on disk
      throw;
    }
    finalize(report);
    return report;
  }

 private:
  VariantResult run_one(const Variant& variant, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    VariantResult row;
    row.variant = variant.name;
    row.seed = seed;

    RunConfig run = spec_.run;
    run.seed = seed;
    const ModelConfig cfg = spec_.variant_model(variant);

    switch (variant.kind) {
      case VariantKind::kBaseline: {
        const std::string dir = run_dir(variant.name, seed);
        TrainResult tr = train(cfg, run, data_->train.bitext, nullptr, data_->dev.bitext, nullptr,
                               dir);
        fill_from(row, tr);
        row.bleu = detail::test_bleu(tr.averaged.build_model(), data_->test.bitext, run.beam);
        row.param_count = tr.averaged.build_model().param_count();
        break;
      }
      case VariantKind::kDpe: {
        const std::string dir = run_dir(variant.name, seed);
        TrainResult tr = train(cfg, run, data_->train.bitext, &data_->train.keys,
                               data_->dev.bitext, &data_->dev.keys, dir);
        fill_from(row, tr);
        row.bleu = detail::test_bleu(tr.averaged.build_model(), data_->test.bitext, run.beam);
        row.param_count = tr.averaged.build_model().param_count();
        break;
      }
      case VariantKind::kTwoPass: {
        const TrainResult& reorder = reorder_run(seed);
        const TrainResult& trans = reordered_translation_run(seed);
        TransformerModel<float> reorder_model = reorder.averaged.build_model();
        TransformerModel<float> trans_model = trans.averaged.build_model();
        row.param_count = reorder_model.param_count() + trans_model.param_count();
        row.metrics_path = trans.metrics_path;
        row.model_path = trans.averaged_path;
        row.final_translation = trans.log.empty() ? 0.0 : trans.log.back().translation;

        std::vector<std::vector<int>> machine_reordered, outputs;
        for (const auto& src : data_->test.bitext.src) {
          TwoPassResult r = run_2pt(reorder_model, trans_model, src, run.beam);
          machine_reordered.push_back(r.reordered);
          outputs.push_back(r.output);
        }
        row.exact = exact_match(detail::ids_to_lines(machine_reordered),
                                detail::ids_to_lines(data_->test.reordered_src));
        row.bleu = bleu_lines(detail::ids_to_lines(outputs),
                              detail::ids_to_lines(data_->test.bitext.tgt));
        break;
      }
      case VariantKind::kOracleReorder: {
        const TrainResult& trans = reordered_translation_run(seed);
        TransformerModel<float> trans_model = trans.averaged.build_model();
        row.param_count = trans_model.param_count();
        row.metrics_path = trans.metrics_path;
        row.model_path = trans.averaged_path;
        row.final_translation = trans.log.empty() ? 0.0 : trans.log.back().translation;
        row.bleu = detail::test_bleu(trans_model, data_->oracle_test, run.beam);
        break;
      }
    }

    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log_)
      (*log_) << "[experiment] " << variant.name << " seed=" << seed << " bleu=" << row.bleu
              << (row.exact >= 0 ? " exact=" + std::to_string(row.exact) : std::string())
              << " wall=" << static_cast<int>(row.wall_seconds) << "s\n";
    return row;
  }

  void fill_from(VariantResult& row, const TrainResult& tr) {
    row.metrics_path = tr.metrics_path;
    row.model_path = tr.averaged_path;
    row.initial_order = tr.initial_order;
    if (!tr.log.empty()) {
      row.final_translation = tr.log.back().translation;
      row.final_order = tr.log.back().order;
    }
  }

  std::string run_dir(const std::string& variant, std::uint64_t seed) {
    std::string name = variant;
    for (char& c : name)
      if (c == ':') c = '_';
    return out_dir_ + "/" + name + "/seed" + std::to_string(seed);
  }

  // The two halves of the pipeline, trained once per seed and shared
  // between the 2pt and oracle-reorder variants.
  const TrainResult& reorder_run(std::uint64_t seed) {
    auto it = reorder_runs_.find(seed);
    if (it != reorder_runs_.end()) return it->second;
    RunConfig run = spec_.run;
    run.seed = seed;
    ModelConfig cfg = spec_.variant_model(Variant{VariantKind::kBaseline, 0.5f, "reorder"});
    TrainResult tr = train(cfg, run, data_->reorder_train, nullptr, data_->reorder_dev, nullptr,
                           run_dir("reorder", seed));
    return reorder_runs_.emplace(seed, std::move(tr)).first->second;
  }

  const TrainResult& reordered_translation_run(std::uint64_t seed) {
    auto it = reordered_translation_runs_.find(seed);
    if (it != reordered_translation_runs_.end()) return it->second;
    RunConfig run = spec_.run;
    run.seed = seed;
    ModelConfig cfg =
        spec_.variant_model(Variant{VariantKind::kBaseline, 0.5f, "trans_reordered"});
    TrainResult tr = train(cfg, run, data_->reordered_train, nullptr, data_->reordered_dev,
                           nullptr, run_dir("trans_reordered", seed));
    return reordered_translation_runs_.emplace(seed, std::move(tr)).first->second;
  }

  void finalize(ExperimentReport& report) {
    std::vector<std::string> tsv;
    tsv.push_back("# seeds: run seeds as listed; data_seed=" + std::to_string(spec_.task.seed));
    tsv.push_back("variant\tseed\tbleu\texact\ttranslation_loss\torder_loss\tparams\tseconds");
    for (const auto& r : report.rows) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s\t%llu\t%.4f\t%.4f\t%.9g\t%.9g\t%zu\t%.1f",
                    r.variant.c_str(), static_cast<unsigned long long>(r.seed), r.bleu, r.exact,
                    r.final_translation, r.final_order, r.param_count, r.wall_seconds);
      tsv.push_back(buf);
    }
    write_lines(out_dir_ + "/report.tsv", tsv);

    report.summary_lines.clear();
    char head[160];
    std::snprintf(head, sizeof(head), "%-16s %8s %8s %10s %12s %10s", "variant", "bleu", "exact",
                  "params", "order_loss", "seconds");
    report.summary_lines.push_back(head);
    for (const auto& variant : spec_.variants) {
      auto rs = report.rows_for(variant.name);
      if (rs.empty()) continue;
      double bleu_sum = 0, exact_sum = 0, order_sum = 0, secs = 0;
      for (auto* r : rs) {
        bleu_sum += r->bleu;
        exact_sum += r->exact;
        order_sum += r->final_order;
        secs += r->wall_seconds;
      }
      const double n = static_cast<double>(rs.size());
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%-16s %8.2f %8.2f %10zu %12.5f %10.1f",
                    variant.name.c_str(), bleu_sum / n, exact_sum / n, rs[0]->param_count,
                    order_sum / n, secs);
      report.summary_lines.push_back(buf);
    }
    std::vector<std::string> txt;
    txt.push_back("# experiment report; data_seed=" + std::to_string(spec_.task.seed));
    txt.insert(txt.end(), report.summary_lines.begin(), report.summary_lines.end());
    write_lines(out_dir_ + "/report.txt", txt);
  }

  ExperimentSpec spec_;
  std::string out_dir_;
  std::ostream* log_;
  std::unique_ptr<detail::PreparedData> data_;
  std::map<std::uint64_t, TrainResult> reorder_runs_;
  std::map<std::uint64_t, TrainResult> reordered_translation_runs_;
};

inline ExperimentReport run_experiment(const ExperimentSpec& spec, const std::string& out_dir,
                                       std::ostream* log = nullptr) {
  return ExperimentRunner(spec, out_dir, log).run();
}

}  // namespace dpenmt
