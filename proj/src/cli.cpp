#include "dfpf/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfpf/accounting.hpp"
#include "dfpf/heatmap.hpp"
#include "dfpf/image_io.hpp"
#include "dfpf/run_config.hpp"
#include "dfpf/train.hpp"

namespace fs = std::filesystem;

namespace dfpf {

namespace {

struct Splits {
  std::vector<BitemporalPair> train, val, test;

  const std::vector<BitemporalPair>& named(const std::string& which) const {
    if (which == "train") return train;
    if (which == "val") return val;
    if (which == "test") return test;
    throw ConfigError("unknown split '" + which + "' (train | val | test)");
  }
  // Held-out pairs for reporting: test, else val, else train.
  const std::vector<BitemporalPair>& held_out() const { return !test.empty() ? test : !val.empty() ? val : train; }
};

Splits load_splits(const RunConfig& cfg) {
  Splits s;
  if (cfg.data.synthetic) {
    std::vector<BitemporalPair> pairs =
        synthesize_dataset(cfg.data.synthetic_pairs, cfg.data.synthetic_size, cfg.data.synthetic_seed, cfg.data.change_rate);
    std::map<std::string, BitemporalPair*> by_id;
    std::vector<std::string> ids;
    for (BitemporalPair& p : pairs) {
      ids.push_back(p.id);
      by_id[p.id] = &p;
    }
    const DatasetSplit split = split_dataset(ids, {7, 2, 1}, cfg.data.split_seed);
    for (const auto& id : split.train) s.train.push_back(*by_id[id]);
    for (const auto& id : split.val) s.val.push_back(*by_id[id]);
    for (const auto& id : split.test) s.test.push_back(*by_id[id]);
    return s;
  }
  if (cfg.data.root.empty()) throw ConfigError("no data: set --data-root (data.root) or data.synthetic=true");
  PairDataset ds(cfg.data.root);
  fs::path manifest = cfg.data.split;
  if (manifest.empty() && fs::exists(fs::path(cfg.data.root) / "split.json")) manifest = fs::path(cfg.data.root) / "split.json";
  DatasetSplit split;
  if (!manifest.empty()) {
    split = read_split_manifest(manifest);
  } else {
    std::vector<std::string> ids;
    for (const std::string& name : ds.names()) ids.push_back(fs::path(name).stem());
    split = split_dataset(ids, {7, 2, 1}, cfg.data.split_seed);
  }
  s.train = ds.load_ids(split.train);
  s.val = ds.load_ids(split.val);
  s.test = ds.load_ids(split.test);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

fs::path prepare_run_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.effective_run_dir();
  fs::create_directories(dir);
  write_text(dir / "config.echo", echo_config(cfg));
  return dir;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string metrics_line(const Metrics& m) {
  return "F1 " + fmt("%.2f", 100 * m.f1) + "  IoU " + fmt("%.2f", 100 * m.iou) + "  P " + fmt("%.2f", 100 * m.precision) +
         "  R " + fmt("%.2f", 100 * m.recall) + (m.degenerate ? "  (degenerate)" : "");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Error overlay: hits white, misses green, false alarms red.
Image8 error_overlay(const Tensor& pred, const Tensor& truth) {
  Image8 img;
  img.channels = 3;
  img.height = static_cast<int>(pred.dim(-2));
  img.width = static_cast<int>(pred.dim(-1));
  img.pixels.assign(static_cast<size_t>(img.height) * img.width * 3, 0);
  for (size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] == 1.0, g = truth[i] == 1.0;
    uint8_t* px = &img.pixels[3 * i];
    if (p && g) {
      px[0] = px[1] = px[2] = 255;
    } else if (p) {
      px[0] = 255;
    } else if (g) {
      px[1] = 255;
    }
  }
  return img;
}

TrainResult train_into(const RunConfig& cfg, const Splits& splits, const fs::path& dir, std::ostream& out) {
  fs::create_directories(dir);
  TrainHooks hooks;
  hooks.log_csv = dir / "log.csv";
  const int epochs = cfg.train.epochs;
  hooks.on_epoch = [&out, epochs](const EpochLog& e) {
    out << "epoch " << e.epoch << "/" << epochs << "  loss " << fmt("%.5f", e.loss) << "  val_f1 "
        << fmt("%.4f", e.val_f1) << "  lr " << fmt("%.3g", e.lr) << "\n"
        << std::flush;
  };
  TrainOutcome outcome = train_capturing(cfg.model, cfg.train, {splits.train, splits.val}, hooks);
  if (outcome.has_checkpoint) save_checkpoint(outcome.result.best, dir / "checkpoint.bin");
  if (outcome.divergence) {
    throw DivergenceError(outcome.divergence->epoch(), outcome.divergence->lr(),
                          std::string("training diverged: ") + outcome.divergence->what() + " (lr " +
                              fmt("%.3g", outcome.divergence->lr()) + ")");
  }
  return std::move(outcome.result);
}

MetricsReport report_to(const Checkpoint& ckpt, const std::vector<BitemporalPair>& pairs, const fs::path& path) {
  const MetricsReport r = evaluate(ckpt, pairs);
  write_text(path, report_to_json(r).dump(2) + "\n");
  return r;
}

struct Variant {
  std::string name;
  void (*apply)(ModelConfig&);
};

const std::vector<Variant>& variants() {
  static const std::vector<Variant> v = {
      {"full", [](ModelConfig&) {}},
      {"no-pefm", [](ModelConfig& m) { m.use_pefm = false; }},
      {"no-dcfm", [](ModelConfig& m) { m.use_dcfm = false; }},
      {"alpha", [](ModelConfig& m) { m.dcfm_variant = DcfmVariant::Alpha; }},
      {"beta", [](ModelConfig& m) { m.dcfm_variant = DcfmVariant::Beta; }},
  };
  return v;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bi-temporal change detection: data preparation, training, evaluation and analysis", "dfpf"};
  app.require_subcommand(1);

  std::string config_path, data_root, run_dir;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Training seed (train.seed)");
  app.add_option("--config", config_path, "Config file: key=value lines or JSON");
  app.add_option("--set", sets, "Override one key, e.g. --set train.lr0=1e-4 (repeatable)");
  app.add_option("--data-root", data_root, "Prepared dataset root (data.root)");
  app.add_option("--run-dir", run_dir, "Run directory (run.dir)");
  app.fallthrough();

  auto* prepare = app.add_subcommand("prepare", "Tile a raw dataset (or synthesize one) and write a 7:2:1 split");
  std::string prepare_out;
  bool prepare_synthetic = false;
  prepare->add_option("--out", prepare_out, "Output dataset root")->required();
  prepare->add_flag("--synthetic", prepare_synthetic, "Generate synthetic pairs instead of reading --data-root");

  auto* train_cmd = app.add_subcommand("train", "Train and keep the best checkpoint");

  std::string checkpoint_path, split_name = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  auto* predict_cmd = app.add_subcommand("predict", "Write change masks and error overlays");
  auto* heatmap_cmd = app.add_subcommand("heatmap", "Write per-stage activation heatmaps for one pair");
  for (auto* sub : {eval_cmd, predict_cmd, heatmap_cmd}) {
    sub->add_option("--checkpoint", checkpoint_path, "Checkpoint file (default <run-dir>/checkpoint.bin)");
    sub->add_option("--split", split_name, "train | val | test (default test)");
  }
  std::string out_dir, pair_id;
  predict_cmd->add_option("--out", out_dir, "Output directory (default <run-dir>/predictions)");
  heatmap_cmd->add_option("--out", out_dir, "Output directory (default <run-dir>/heatmaps/<pair>)");
  heatmap_cmd->add_option("--pair", pair_id, "Pair id (default: first of the split)");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train the ablation variants and compare them");
  std::string variant_list = "full,no-pefm,no-dcfm,alpha,beta";
  ablate_cmd->add_option("--variants", variant_list, "Comma list of full, no-pefm, no-dcfm, alpha, beta");

  auto* sweep_cmd = app.add_subcommand("sweep-lr", "Train once per learning rate");
  std::string lr_list = "1e-4,5e-4,5e-3";
  sweep_cmd->add_option("--lrs", lr_list, "Comma list of learning rates");

  auto* count_cmd = app.add_subcommand("count", "Print parameter and multiply-accumulate counts");
  int64_t height = 256, width = 256;
  count_cmd->add_option("--height", height, "Input height");
  count_cmd->add_option("--width", width, "Input width");

  std::vector<std::string> storage(args);
  std::vector<char*> argv;
  for (std::string& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    std::vector<std::string> overrides = sets;
    if (!data_root.empty()) overrides.push_back("data.root=" + data_root);
    if (!run_dir.empty()) overrides.push_back("run.dir=" + run_dir);
    if (*seed_opt) overrides.push_back("train.seed=" + std::to_string(seed));
    const RunConfig cfg = parse_config(config_path, overrides);
    const fs::path ckpt_path = checkpoint_path.empty() ? cfg.effective_run_dir() / "checkpoint.bin" : fs::path(checkpoint_path);

    if (*prepare) {
      std::vector<BitemporalPair> pairs;
      if (prepare_synthetic || cfg.data.synthetic) {
        pairs = synthesize_dataset(cfg.data.synthetic_pairs, cfg.data.synthetic_size, cfg.data.synthetic_seed,
                                   cfg.data.change_rate);
      } else {
        if (cfg.data.root.empty()) throw ConfigError("prepare needs --data-root or --synthetic");
        pairs = tile_pairs(load_pair_dataset(cfg.data.root), cfg.data.tile, cfg.data.random_crops, cfg.data.split_seed);
      }
      std::vector<std::string> ids;
      for (const BitemporalPair& p : pairs) ids.push_back(p.id);
      const DatasetSplit split = split_dataset(ids, {7, 2, 1}, cfg.data.split_seed);
      write_pair_dataset(prepare_out, pairs);
      write_split_manifest(fs::path(prepare_out) / "split.json", split);
      out << "wrote " << pairs.size() << " pairs to " << prepare_out << " (train " << split.train.size() << ", val "
          << split.val.size() << ", test " << split.test.size() << ")\n";
      return 0;
    }

    if (*count_cmd) {
      const ParamsFlops pf = count_params_flops(cfg.model, height, width);
      out << "params: " << pf.params << " (" << fmt("%.2f", pf.params / 1e6) << " M)\n";
      out << "flops:  " << pf.flops << " (" << fmt("%.2f", pf.flops / 1e9) << " G multiply-accumulates at " << height
          << "x" << width << ")\n";
      return 0;
    }

    const fs::path dir = prepare_run_dir(cfg);
    const Splits splits = load_splits(cfg);

    if (*train_cmd) {
      const TrainResult result = train_into(cfg, splits, dir, out);
      const MetricsReport r = report_to(result.best, splits.held_out(), dir / "metrics.json");
      out << "best epoch " << result.best.epoch << ": " << metrics_line(r.metrics) << "\n";
      return 0;
    }

    if (*eval_cmd) {
      const MetricsReport r = report_to(load_checkpoint(ckpt_path), splits.named(split_name), dir / "metrics.json");
      out << report_to_json(r).dump(2) << "\n";
      return 0;
    }

    if (*predict_cmd) {
      const auto model = instantiate(load_checkpoint(ckpt_path));
      const fs::path target = out_dir.empty() ? dir / "predictions" : fs::path(out_dir);
      fs::create_directories(target);
      size_t n = 0;
      for (const BitemporalPair& p : splits.named(split_name)) {
        const Tensor mask = predict_mask(*model, p);
        write_png(target / (p.id + "_mask.png"), mask_to_image(mask));
        if (p.label) write_png(target / (p.id + "_overlay.png"), error_overlay(mask, *p.label));
        ++n;
      }
      out << "wrote " << n << " predictions to " << target.string() << "\n";
      return 0;
    }

    if (*heatmap_cmd) {
      const auto& pairs = splits.named(split_name);
      if (pairs.empty()) throw ConfigError("split '" + split_name + "' is empty");
      const BitemporalPair* pair = &pairs.front();
      if (!pair_id.empty()) {
        pair = nullptr;
        for (const BitemporalPair& p : pairs) {
          if (p.id == pair_id) pair = &p;
        }
        if (!pair) throw ConfigError("no pair '" + pair_id + "' in split '" + split_name + "'");
      }
      const fs::path target = out_dir.empty() ? dir / "heatmaps" / pair->id : fs::path(out_dir);
      const auto paths = emit_stage_heatmaps(load_checkpoint(ckpt_path), *pair, target);
      out << "wrote " << paths.size() << " heatmaps to " << target.string() << "\n";
      return 0;
    }

    if (*ablate_cmd) {
      std::string table = "variant,f1,iou,precision,recall,params\n";
      std::vector<std::string> lines;
      for (const std::string& name : split_list(variant_list)) {
        const Variant* v = nullptr;
        for (const Variant& candidate : variants()) {
          if (candidate.name == name) v = &candidate;
        }
        if (!v) throw ConfigError("unknown variant '" + name + "' (full | no-pefm | no-dcfm | alpha | beta)");
        RunConfig vc = cfg;
        v->apply(vc.model);
        vc.model.validate();
        out << "== " << name << "\n";
        const fs::path vdir = dir / "ablate" / name;
        const TrainResult result = train_into(vc, splits, vdir, out);
        const MetricsReport r = report_to(result.best, splits.held_out(), vdir / "metrics.json");
        const int64_t params = count_params_flops(vc.model, 256, 256).params;
        table += name + "," + fmt("%.6f", r.metrics.f1) + "," + fmt("%.6f", r.metrics.iou) + "," +
                 fmt("%.6f", r.metrics.precision) + "," + fmt("%.6f", r.metrics.recall) + "," + std::to_string(params) + "\n";
        char line[160];
        std::snprintf(line, sizeof(line), "%-9s %-7.2f %-7.2f %-7.2f %-7.2f %lld", name.c_str(), 100 * r.metrics.f1,
                      100 * r.metrics.iou, 100 * r.metrics.precision, 100 * r.metrics.recall,
                      static_cast<long long>(params));
        lines.push_back(line);
      }
      write_text(dir / "ablation.csv", table);
      out << "variant   F1(%)   IoU(%)  P(%)    R(%)    params\n";
      for (const std::string& l : lines) out << l << "\n";
      return 0;
    }

    if (*sweep_cmd) {
      std::vector<double> lrs;
      for (const std::string& s : split_list(lr_list)) {
        try {
          lrs.push_back(std::stod(s));
        } catch (const std::exception&) {
          throw ConfigError("bad learning rate '" + s + "'");
        }
      }
      const auto rows = lr_sweep(lrs, cfg.model, cfg.train, {splits.train, splits.val}, splits.held_out(),
                                 [&out](const SweepRow& r) {
                                   out << "lr " << fmt("%.3g", r.lr) << ": " << metrics_line(r.report.metrics)
                                       << (r.divergent ? "  divergent" : "") << "\n"
                                       << std::flush;
                                 });
      std::string csv = "lr,f1,iou,precision,recall,divergent,failed,final_loss\n";
      for (const SweepRow& r : rows) {
        csv += fmt("%.6g", r.lr) + "," + fmt("%.6f", r.report.metrics.f1) + "," + fmt("%.6f", r.report.metrics.iou) + "," +
               fmt("%.6f", r.report.metrics.precision) + "," + fmt("%.6f", r.report.metrics.recall) + "," +
               (r.divergent ? "true" : "false") + "," + (r.failed ? "true" : "false") + "," + fmt("%.6g", r.final_loss) +
               "\n";
      }
      write_text(dir / "sweep.csv", csv);
      out << format_sweep_table(rows);
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dfpf
