#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "shbmil/bench_harness.hpp"
#include "shbmil/common.hpp"
#include "shbmil/feature_store.hpp"
#include "shbmil/mil_models.hpp"
#include "shbmil/shift_metrics.hpp"
#include "shbmil/tsne.hpp"

namespace shbmil {

namespace cli_detail {

namespace fs = std::filesystem;

inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string tok = text.substr(pos, comma - pos);
    std::uint64_t v = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size())
      throw std::invalid_argument("bad seed list '" + text + "' (expected e.g. 1,2,3)");
    seeds.push_back(v);
    pos = comma + 1;
    if (comma == text.size()) break;
  }
  if (seeds.empty()) throw std::invalid_argument("empty seed list");
  return seeds;
}

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

inline void dump_json(const ordered_json& j, const fs::path& path) {
  write_file(path, j.dump(2) + "\n");
}

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

/// Options shared by the fmsi/bench t-SNE stage.
struct TsneFlags {
  TsneConfig cfg;
  void attach(CLI::App* cmd) {
    cmd->add_option("--perplexity", cfg.perplexity, "t-SNE perplexity")->check(CLI::PositiveNumber);
    cmd->add_option("--iters", cfg.n_iter, "t-SNE iterations")->check(CLI::PositiveNumber);
    cmd->add_option("--learning-rate", cfg.learning_rate, "t-SNE learning rate")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--early-exaggeration", cfg.early_exaggeration_factor,
                    "early exaggeration factor");
    cmd->add_option("--ee-iters", cfg.early_exaggeration_iters, "early exaggeration iterations")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--momentum-switch", cfg.momentum_switch_iter,
                    "iteration at which momentum switches")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--init-std", cfg.init_std, "std of the Gaussian init")
        ->check(CLI::PositiveNumber);
  }
};

struct TrainFlags {
  TrainConfig cfg;
  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", cfg.epochs, "training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--peak-lr", cfg.peak_lr, "peak learning rate of the cosine schedule")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--weight-decay", cfg.weight_decay, "AdamW decoupled weight decay")
        ->check(CLI::NonNegativeNumber);
  }
};

}  // namespace cli_detail

/// Command-line front end. `args` excludes the program name. Exit codes:
/// 0 success, 1 runtime/data failure, 2 usage error.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  using cli_detail::dump_json;
  using cli_detail::parse_seed_list;
  using cli_detail::percent;

  CLI::App app{"slide-level MIL benchmark with center-shift metrics"};
  app.require_subcommand(1);

  std::uint64_t master_seed = 42;
  int threads = 1;
  app.add_option("--seed", master_seed, "master seed; command-specific seeds default to it");
  app.add_option("--threads", threads, "worker threads for bag loading and CV folds")
      ->check(CLI::PositiveNumber);

  // ---- gen -----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (bags + manifest)");
  gen->fallthrough();
  SynthConfig synth;
  std::string gen_out;
  long gen_dim = 64;
  gen->add_option("--classes", synth.num_classes, "number of classes S")->check(CLI::PositiveNumber);
  gen->add_option("--centers", synth.num_centers, "number of centers C")->check(CLI::PositiveNumber);
  gen->add_option("--per-cell", synth.slides_per_class_center, "slides per (class, center) cell")
      ->check(CLI::PositiveNumber);
  gen->add_option("--dim", gen_dim, "feature dimension d")->check(CLI::PositiveNumber);
  gen->add_option("--min-patches", synth.min_patches, "minimum patches per slide")
      ->check(CLI::PositiveNumber);
  gen->add_option("--max-patches", synth.max_patches, "maximum patches per slide")
      ->check(CLI::PositiveNumber);
  gen->add_option("--class-sep", synth.class_separation, "class mean separation")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--noise", synth.noise_std, "patch noise std")->check(CLI::PositiveNumber);
  gen->add_option("--beta", synth.center_bias, "center bias strength")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--out", gen_out, "output directory")->required();

  // ---- fmsi ----------------------------------------------------------------
  auto* fmsi_cmd = app.add_subcommand("fmsi", "center-shift silhouette score of a dataset");
  fmsi_cmd->fallthrough();
  std::string fmsi_manifest, fmsi_seeds_text, fmsi_json, fmsi_embedding_csv, fmsi_trace;
  std::optional<int> fmsi_classes, fmsi_centers;
  cli_detail::TsneFlags fmsi_tsne;
  fmsi_cmd->add_option("--manifest", fmsi_manifest, "manifest CSV")->required();
  fmsi_cmd->add_option("--seeds", fmsi_seeds_text, "comma-separated t-SNE seeds (default: master seed)");
  fmsi_cmd->add_option("--classes", fmsi_classes, "override S");
  fmsi_cmd->add_option("--centers", fmsi_centers, "override C");
  fmsi_tsne.attach(fmsi_cmd);
  fmsi_cmd->add_option("--json", fmsi_json, "write result JSON here");
  fmsi_cmd->add_option("--embedding-csv", fmsi_embedding_csv, "write 2-D embedding CSV here");
  fmsi_cmd->add_option("--trace", fmsi_trace, "write KL trace CSV here");

  // ---- ri ------------------------------------------------------------------
  auto* ri_cmd = app.add_subcommand("ri", "robustness index of a dataset");
  ri_cmd->fallthrough();
  std::string ri_manifest, ri_json;
  int ri_k = 25;
  ri_cmd->add_option("--manifest", ri_manifest, "manifest CSV")->required();
  ri_cmd->add_option("--k", ri_k, "neighborhood size")->check(CLI::PositiveNumber);
  ri_cmd->add_option("--json", ri_json, "write result JSON here");

  // ---- abmil-train ----------------------------------------------------------
  auto* train_cmd = app.add_subcommand("abmil-train", "train an attention-MIL classifier");
  train_cmd->fallthrough();
  std::string train_manifest, train_out = "abmil.bin", train_json;
  cli_detail::TrainFlags train_flags;
  std::optional<std::uint64_t> train_seed_opt;
  train_cmd->add_option("--manifest", train_manifest, "manifest CSV")->required();
  train_flags.attach(train_cmd);
  train_cmd->add_option("--train-seed", train_seed_opt, "training seed (default: master seed)");
  train_cmd->add_option("--out", train_out, "checkpoint path");
  train_cmd->add_option("--json", train_json, "write stats JSON here");

  // ---- simpleshot -----------------------------------------------------------
  auto* ss_cmd = app.add_subcommand("simpleshot", "prototype classifier evaluation");
  ss_cmd->fallthrough();
  std::string ss_manifest, ss_test, ss_json;
  bool ss_center_l2 = false;
  ss_cmd->add_option("--manifest", ss_manifest, "training manifest CSV")->required();
  ss_cmd->add_option("--test", ss_test, "test manifest CSV (default: training manifest)");
  ss_cmd->add_flag("--center-l2", ss_center_l2, "center by the training mean and L2-normalize");
  ss_cmd->add_option("--json", ss_json, "write predictions JSON here");

  // ---- bench ---------------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "full benchmark: FM-SI, RI and 5-fold CV");
  bench_cmd->fallthrough();
  std::string bench_config, bench_manifest, bench_out = "bench_out", bench_name,
      bench_fmsi_seeds_text;
  bench_cmd->add_option("--config", bench_config,
                        "flat key=value config file; explicit flags override it");
  cli_detail::TsneFlags bench_tsne;
  cli_detail::TrainFlags bench_train;
  std::optional<std::uint64_t> bench_train_seed, bench_cv_seed;
  int bench_folds = 5, bench_k = 25;
  bool bench_center_l2 = false;
  bench_cmd->add_option("--manifest", bench_manifest, "manifest CSV")->required();
  bench_cmd->add_option("--name", bench_name, "model/dataset label (default: manifest stem)");
  bench_cmd->add_option("--out", bench_out, "output directory");
  bench_tsne.attach(bench_cmd);
  bench_train.attach(bench_cmd);
  bench_cmd->add_option("--train-seed", bench_train_seed, "training seed (default: master seed)");
  bench_cmd->add_option("--cv-seed", bench_cv_seed, "fold split seed (default: master seed)");
  bench_cmd->add_option("--folds", bench_folds, "number of CV folds")->check(CLI::Range(2, 100));
  bench_cmd->add_option("--fmsi-seeds", bench_fmsi_seeds_text,
                        "comma-separated FM-SI t-SNE seeds (default: master seed)");
  bench_cmd->add_option("--k", bench_k, "robustness index neighborhood size")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--center-l2", bench_center_l2, "SimpleShot centering + L2 ablation");

  // ---- paperstats -----------------------------------------------------------
  auto* stats_cmd = app.add_subcommand(
      "paperstats", "cross-model statistics of the embedded reference results");
  stats_cmd->fallthrough();
  std::string stats_json, stats_csv;
  stats_cmd->add_option("--json", stats_json, "write stats JSON here");
  stats_cmd->add_option("--csv", stats_csv, "write plot CSV here");

  // ---- report --------------------------------------------------------------
  auto* report_cmd =
      app.add_subcommand("report", "aggregate several bench reports into cross-model statistics");
  report_cmd->fallthrough();
  std::vector<std::string> report_inputs;
  std::string report_out = "combined_report.json", report_csv;
  report_cmd->add_option("inputs", report_inputs, "bench report JSON files")->required();
  report_cmd->add_option("--out", report_out, "combined report path");
  report_cmd->add_option("--csv", report_csv, "write plot CSV here");

  // Config-file keys become argument tokens inserted ahead of the explicit
  // flags; with the take-last policy the command line always wins.
  for (CLI::Option* opt : bench_cmd->get_options())
    opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  {
    const auto bench_pos = std::find(args.begin(), args.end(), "bench");
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (bench_pos != args.end() && !config_path.empty()) {
      std::string text;
      try {
        text = read_file(config_path);
      } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
      }
      std::vector<std::string> tokens;
      std::istringstream lines(text);
      std::string line;
      int line_no = 0;
      while (std::getline(lines, line)) {
        ++line_no;
        line = cli_detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
          err << "config: line " << line_no << " is not key=value\n";
          return 2;
        }
        const std::string key = cli_detail::trim(line.substr(0, eq));
        const std::string value = cli_detail::trim(line.substr(eq + 1));
        if (key == "config") continue;
        CLI::Option* opt = nullptr;
        try {
          opt = bench_cmd->get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
          err << "config: unknown key '" << key << "'\n";
          return 2;
        }
        if (opt->get_expected() == 0) {  // flag
          if (value == "1" || value == "true" || value == "yes" || value == "on") {
            tokens.push_back("--" + key);
          } else if (value != "0" && value != "false" && value != "no" && value != "off") {
            err << "config: flag '" << key << "' needs a boolean value\n";
            return 2;
          }
        } else {
          tokens.push_back("--" + key);
          tokens.push_back(value);
        }
      }
      args.insert(std::next(std::find(args.begin(), args.end(), "bench")), tokens.begin(),
                  tokens.end());
    }
  }

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    // ---- gen ----
    if (app.got_subcommand(gen)) {
      if (synth.min_patches > synth.max_patches) {
        err << "gen: --min-patches must be <= --max-patches\n";
        return 2;
      }
      synth.dim = static_cast<Eigen::Index>(gen_dim);
      const Dataset ds = synth_generate(synth, master_seed);
      const fs::path manifest = write_dataset(ds, gen_out);
      out << "wrote " << ds.bags.size() << " bags (" << ds.num_classes << " classes x "
          << ds.num_centers << " centers x " << synth.slides_per_class_center
          << " per cell, d=" << ds.dim << ") to " << gen_out << "\n";
      out << "manifest: " << manifest.string() << "\n";
      return 0;
    }

    // ---- fmsi ----
    if (app.got_subcommand(fmsi_cmd)) {
      std::vector<std::uint64_t> seeds{master_seed};
      if (!fmsi_seeds_text.empty()) {
        try {
          seeds = parse_seed_list(fmsi_seeds_text);
        } catch (const std::invalid_argument& e) {
          err << "fmsi: " << e.what() << "\n";
          return 2;
        }
      }
      const Dataset ds = load_manifest(fmsi_manifest, fmsi_classes, fmsi_centers, threads);
      const PooledSlides pooled = mean_pool_all(ds);
      const FmsiResult result = fm_si_pooled(pooled, fmsi_tsne.cfg, seeds);
      out << "FM-SI sigma = " << format_double(result.score) << " (" << seeds.size()
          << " seed" << (seeds.size() == 1 ? "" : "s") << ", " << ds.bags.size() << " slides)\n";
      if (!fmsi_json.empty()) {
        ordered_json j;
        j["score"] = result.score;
        j["per_seed_scores"] = result.per_seed_scores;
        j["config_hash"] = result.config_hash;
        dump_json(j, fmsi_json);
      }
      if (!fmsi_embedding_csv.empty()) write_embedding_csv(pooled, result.embedding, fmsi_embedding_csv);
      if (!fmsi_trace.empty()) write_kl_trace_csv(result.embedding, fmsi_trace);
      return 0;
    }

    // ---- ri ----
    if (app.got_subcommand(ri_cmd)) {
      const Dataset ds = load_manifest(ri_manifest, std::nullopt, std::nullopt, threads);
      const PooledSlides pooled = mean_pool_all(ds);
      const RiResult result = robustness_index(pooled.z, pooled.labels, pooled.centers, ri_k);
      out << "RI(k=" << result.k << ") = " << format_double(result.ri) << " ("
          << result.numerator << "/" << result.denominator << ")\n";
      if (!ri_json.empty()) {
        ordered_json j;
        j["score"] = result.ri;
        j["k"] = result.k;
        j["numerator"] = result.numerator;
        j["denominator"] = result.denominator;
        j["config_hash"] = config_hash_of({{"ri.k", std::to_string(result.k)},
                                           {"input.manifest", ri_manifest}});
        dump_json(j, ri_json);
      }
      return 0;
    }

    // ---- abmil-train ----
    if (app.got_subcommand(train_cmd)) {
      const Dataset ds = load_manifest(train_manifest, std::nullopt, std::nullopt, threads);
      TrainConfig cfg = train_flags.cfg;
      cfg.seed = train_seed_opt.value_or(master_seed);
      const AbmilParams params = train_abmil(ds.bags, ds.num_classes, cfg);
      save_abmil(params, train_out);
      std::vector<int> y_true, y_pred;
      for (const auto& bag : ds.bags) {
        y_true.push_back(bag.class_label);
        y_pred.push_back(predict_abmil(params, bag.features).first);
      }
      const double bacc = balanced_accuracy(y_true, y_pred, ds.num_classes);
      out << "trained on " << ds.bags.size() << " bags for " << cfg.epochs
          << " epochs; training BACC = " << percent(bacc) << "%\n";
      out << "checkpoint: " << train_out << "\n";
      if (!train_json.empty()) {
        ordered_json j;
        j["train_bacc"] = bacc;
        j["epochs"] = cfg.epochs;
        j["peak_lr"] = cfg.peak_lr;
        j["seed"] = cfg.seed;
        dump_json(j, train_json);
      }
      return 0;
    }

    // ---- simpleshot ----
    if (app.got_subcommand(ss_cmd)) {
      const Dataset train_ds = load_manifest(ss_manifest, std::nullopt, std::nullopt, threads);
      const PooledSlides train_pooled = mean_pool_all(train_ds);
      std::vector<SlideEmbedding> train_embs;
      for (std::size_t i = 0; i < train_ds.bags.size(); ++i) {
        SlideEmbedding e;
        e.slide_id = train_pooled.slide_ids[i];
        e.class_label = train_pooled.labels[i];
        e.center_label = train_pooled.centers[i];
        e.z = train_pooled.z.row(static_cast<Eigen::Index>(i)).transpose();
        train_embs.push_back(std::move(e));
      }
      Eigen::VectorXd mean;
      if (ss_center_l2) {
        mean = embedding_mean(train_embs);
        for (auto& e : train_embs) e.z = center_l2(e.z, mean);
      }
      const Prototypes protos = build_prototypes(train_embs, train_ds.num_classes);

      const Dataset test_ds = ss_test.empty()
                                  ? train_ds
                                  : load_manifest(ss_test, train_ds.num_classes,
                                                  train_ds.num_centers, threads);
      std::vector<int> y_true, y_pred;
      ordered_json preds = ordered_json::array();
      for (const auto& bag : test_ds.bags) {
        Eigen::VectorXd q = mean_pool(bag).z;
        if (ss_center_l2) q = center_l2(q, mean);
        const auto [cls, sims] = simpleshot_predict(protos, q);
        y_true.push_back(bag.class_label);
        y_pred.push_back(cls);
        preds.push_back(ordered_json{{"slide_id", bag.slide_id},
                                     {"label", bag.class_label},
                                     {"predicted", cls}});
      }
      const double bacc = balanced_accuracy(y_true, y_pred, test_ds.num_classes);
      out << "simpleshot BACC = " << percent(bacc) << "% on " << test_ds.bags.size()
          << " slides" << (ss_test.empty() ? " (resubstitution)" : "") << "\n";
      if (!ss_json.empty()) {
        ordered_json j;
        j["bacc"] = bacc;
        j["center_l2"] = ss_center_l2;
        j["predictions"] = preds;
        dump_json(j, ss_json);
      }
      return 0;
    }

    // ---- bench ----
    if (app.got_subcommand(bench_cmd)) {
      BenchConfig cfg;
      cfg.tsne = bench_tsne.cfg;
      cfg.train = bench_train.cfg;
      cfg.train.seed = bench_train_seed.value_or(master_seed);
      cfg.cv_seed = bench_cv_seed.value_or(master_seed);
      cfg.fmsi_seeds = {master_seed};
      if (!bench_fmsi_seeds_text.empty()) {
        try {
          cfg.fmsi_seeds = parse_seed_list(bench_fmsi_seeds_text);
        } catch (const std::invalid_argument& e) {
          err << "bench: " << e.what() << "\n";
          return 2;
        }
      }
      cfg.ri_k = bench_k;
      cfg.folds = bench_folds;
      cfg.threads = threads;
      cfg.simpleshot_center_l2 = bench_center_l2;
      const std::string name =
          bench_name.empty() ? fs::path(bench_manifest).stem().string() : bench_name;

      const Dataset ds = load_manifest(bench_manifest, std::nullopt, std::nullopt, threads);
      const BenchReport report = run_benchmark(ds, cfg, name);

      fs::create_directories(bench_out);
      const fs::path dir(bench_out);
      dump_json(report_to_json(report), dir / "report.json");
      write_embedding_csv(report.pooled, report.embedding, dir / "embedding.csv");
      const ModelStatsRow row{name, report.abmil.mean * 100.0, report.simpleshot.mean * 100.0,
                              report.fm_si, report.ri};
      write_plot_csv({row}, dir / "plot.csv");
      for (std::size_t f = 0; f < report.fold_params.size(); ++f)
        save_abmil(report.fold_params[f], dir / ("abmil_fold" + std::to_string(f) + ".bin"));

      out << "dataset      " << name << " (" << ds.bags.size() << " slides, S=" << ds.num_classes
          << ", C=" << ds.num_centers << ", d=" << ds.dim << ")\n";
      out << "config_hash  " << report.config_hash << "\n";
      out << "FM-SI        " << format_double(report.fm_si) << "\n";
      out << "RI (k=" << report.ri_k << ")   " << format_double(report.ri) << "\n";
      const auto line = [&](const char* label, const ClassifierCv& cv) {
        out << label << percent(cv.mean) << " +/- " << percent(cv.stddev) << " %  folds:";
        for (double v : cv.fold_bacc) out << ' ' << percent(v);
        out << "\n";
      };
      line("abmil        ", report.abmil);
      line("simpleshot   ", report.simpleshot);
      out << "report: " << (dir / "report.json").string() << "\n";
      return 0;
    }

    // ---- paperstats ----
    if (app.got_subcommand(stats_cmd)) {
      const auto& rows = reference_model_rows();
      const PaperStatsSummary s = paper_stats_check(rows);
      out << "model        ABMIL    SimpleShot  FM-SI    RI\n";
      for (const auto& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-12s %6.2f   %6.2f      %6.4f   %6.4f\n",
                      r.name.c_str(), r.bacc_abmil, r.bacc_simpleshot, r.fm_si, r.ri);
        out << buf;
      }
      bool all_ok = true;
      const auto check = [&](const std::string& label, bool ok, const std::string& detail) {
        all_ok = all_ok && ok;
        out << (ok ? "[PASS] " : "[FAIL] ") << label << ": " << detail << "\n";
      };
      {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.4f pp (expected 11.88 +/- 0.01)", s.mean_gap_pp);
        check("mean ABMIL - SimpleShot gap", std::abs(s.mean_gap_pp - 11.88) <= 0.01, buf);
        std::snprintf(buf, sizeof(buf), "%.4f (expected |rho| = 0.890 +/- 0.005)", s.pearson_fmsi_ri);
        check("Pearson(FM-SI, RI)", std::abs(std::abs(s.pearson_fmsi_ri) - 0.890) <= 0.005, buf);
        std::snprintf(buf, sizeof(buf), "%.4f (expected 0.428 +/- 0.02)", s.r2_simpleshot);
        check("R2 SimpleShot ~ FM-SI", std::abs(s.r2_simpleshot - 0.428) <= 0.02, buf);
        std::snprintf(buf, sizeof(buf), "%.4f (expected 0.346 +/- 0.02)", s.r2_abmil);
        check("R2 ABMIL ~ FM-SI", std::abs(s.r2_abmil - 0.346) <= 0.02, buf);
        std::snprintf(buf, sizeof(buf), "%s +%.2f pp (expected VIRCHOW-2 +4.92)",
                      s.top_model_simpleshot.c_str(), s.top_margin_simpleshot);
        check("top SimpleShot margin",
              s.top_model_simpleshot == "VIRCHOW-2" &&
                  std::abs(s.top_margin_simpleshot - 4.92) <= 1e-9,
              buf);
        std::snprintf(buf, sizeof(buf), "%s +%.2f pp (expected VIRCHOW-2 +3.81)",
                      s.top_model_abmil.c_str(), s.top_margin_abmil);
        check("top ABMIL margin",
              s.top_model_abmil == "VIRCHOW-2" && std::abs(s.top_margin_abmil - 3.81) <= 1e-9, buf);
        std::snprintf(buf, sizeof(buf), "lowest %s, highest %s (expected KEEP / PLIP)",
                      s.best_fmsi_model.c_str(), s.worst_fmsi_model.c_str());
        check("FM-SI extremes", s.best_fmsi_model == "KEEP" && s.worst_fmsi_model == "PLIP", buf);
      }
      if (!stats_json.empty()) {
        ordered_json j;
        ordered_json jrows = ordered_json::array();
        for (const auto& r : rows)
          jrows.push_back(ordered_json{{"name", r.name},
                                       {"bacc_abmil", r.bacc_abmil},
                                       {"bacc_simpleshot", r.bacc_simpleshot},
                                       {"fm_si", r.fm_si},
                                       {"ri", r.ri}});
        j["rows"] = jrows;
        j["stats"] = ordered_json{{"mean_gap_pp", s.mean_gap_pp},
                                  {"pearson_fmsi_ri", s.pearson_fmsi_ri},
                                  {"spearman_fmsi_ri", s.spearman_fmsi_ri},
                                  {"r2_abmil", s.r2_abmil},
                                  {"r2_simpleshot", s.r2_simpleshot},
                                  {"top_margin_abmil", s.top_margin_abmil},
                                  {"top_margin_simpleshot", s.top_margin_simpleshot}};
        j["all_within_tolerance"] = all_ok;
        dump_json(j, stats_json);
      }
      if (!stats_csv.empty()) write_plot_csv(rows, stats_csv);
      return all_ok ? 0 : 1;
    }

    // ---- report ----
    if (app.got_subcommand(report_cmd)) {
      std::vector<ModelStatsRow> rows;
      for (const auto& path : report_inputs) {
        const auto j = nlohmann::json::parse(read_file(path));
        ModelStatsRow row;
        row.name = j.at("dataset").get<std::string>();
        row.fm_si = j.at("fm_si").get<double>();
        row.ri = j.at("ri").get<double>();
        row.bacc_abmil = j.at("classifiers").at("abmil").at("mean").get<double>() * 100.0;
        row.bacc_simpleshot =
            j.at("classifiers").at("simpleshot").at("mean").get<double>() * 100.0;
        rows.push_back(std::move(row));
      }
      if (rows.size() < 3)
        throw std::runtime_error("report: need at least 3 bench reports for cross-model stats");
      const PaperStatsSummary s = paper_stats_check(rows);
      ordered_json j;
      ordered_json jrows = ordered_json::array();
      for (const auto& r : rows)
        jrows.push_back(ordered_json{{"name", r.name},
                                     {"bacc_abmil", r.bacc_abmil},
                                     {"bacc_simpleshot", r.bacc_simpleshot},
                                     {"fm_si", r.fm_si},
                                     {"ri", r.ri}});
      j["models"] = jrows;
      j["stats"] = ordered_json{{"mean_gap_pp", s.mean_gap_pp},
                                {"pearson_fmsi_ri", s.pearson_fmsi_ri},
                                {"spearman_fmsi_ri", s.spearman_fmsi_ri},
                                {"r2_abmil", s.r2_abmil},
                                {"r2_simpleshot", s.r2_simpleshot}};
      dump_json(j, report_out);
      if (!report_csv.empty()) write_plot_csv(rows, report_csv);
      out << "aggregated " << rows.size() << " reports\n";
      out << "pearson(FM-SI, RI) = " << format_double(s.pearson_fmsi_ri)
          << ", R2 abmil = " << format_double(s.r2_abmil)
          << ", R2 simpleshot = " << format_double(s.r2_simpleshot) << "\n";
      out << "combined report: " << report_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    log_error(e.what());
    return 1;
  }
  err << "no subcommand\n";
  return 2;
}

}  // namespace shbmil
