#pragma once

// `mris <generate|train|embed|index|synthesize|evaluate> --config <path>
//  [--key value ...]`
//
// Run directory layout (under `workdir`):
//   data/                      generated dataset
//   models/{query,target}.gN.mrse, models/train_log.gN.csv
//   embeddings/target.gN.mrem  target embeddings of the train_db split
//   index/db.gN.mrdb           embedding database
//   synth/                     synthesized targets (dataset format) + report.txt
//   reports/evaluation.{txt,csv}
//   <command>.resolved.conf    resolved configuration of the last run

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mris/binary_io.hpp"
#include "mris/config.hpp"
#include "mris/datakit.hpp"
#include "mris/embedding_db.hpp"
#include "mris/errors.hpp"
#include "mris/evaluation.hpp"
#include "mris/numerics.hpp"
#include "mris/pipeline.hpp"
#include "mris/synthesis.hpp"
#include "mris/training.hpp"

namespace mris::cli {

namespace fs = std::filesystem;

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

/// MRIS_LOG_LEVEL = quiet | info | debug (default info).
inline LogLevel log_level_from_env() {
  const char* v = std::getenv("MRIS_LOG_LEVEL");
  if (!v) return LogLevel::info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::quiet;
  if (s == "debug" || s == "2") return LogLevel::debug;
  return LogLevel::info;
}

class Logger {
public:
  Logger(std::ostream& out, LogLevel level) : out_(out), level_(level) {}
  void info(const std::string& msg) const {
    if (level_ >= LogLevel::info) out_ << "[mris] " << msg << "\n";
  }
  void debug(const std::string& msg) const {
    if (level_ >= LogLevel::debug) out_ << "[mris:debug] " << msg << "\n";
  }

private:
  std::ostream& out_;
  LogLevel level_;
};

// Embedding file: "MREM" | u32 version | u32 D | u64 count
//   | per record: u32 len, subject bytes, i32 timepoint, D x f32 | u64 FNV-1a
struct EmbeddingFile {
  std::size_t dim = 0;
  std::vector<RecordId> ids;
  std::vector<std::vector<float>> embeddings;
};

inline void save_embeddings(const EmbeddingFile& f, const fs::path& path) {
  io::ByteWriter w;
  w.bytes("MREM");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(f.dim));
  w.u64(f.ids.size());
  for (std::size_t i = 0; i < f.ids.size(); ++i) {
    w.string(f.ids[i].subject);
    w.i32(f.ids[i].timepoint);
    for (float v : f.embeddings[i]) w.f32(v);
  }
  w.seal();
  io::write_file(path, w.buffer());
}

inline EmbeddingFile load_embeddings(const fs::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  r.expect_magic("MREM");
  if (r.u32() != 1) throw DataError(path.string() + ": unsupported version");
  r.verify_checksum_first();
  EmbeddingFile f;
  f.dim = r.u32();
  const auto count = r.u64();
  if (count > r.remaining()) throw DataError(path.string() + ": record count exceeds file size");
  for (std::uint64_t i = 0; i < count; ++i) {
    RecordId id;
    id.subject = r.string();
    id.timepoint = r.i32();
    std::vector<float> e(f.dim);
    for (auto& v : e) v = r.f32();
    f.ids.push_back(std::move(id));
    f.embeddings.push_back(std::move(e));
  }
  r.verify_seal();
  return f;
}

struct Paths {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path query_model(std::size_t g) const { return root / "models" / ("query.g" + std::to_string(g) + ".mrse"); }
  fs::path target_model(std::size_t g) const { return root / "models" / ("target.g" + std::to_string(g) + ".mrse"); }
  fs::path train_log(std::size_t g) const { return root / "models" / ("train_log.g" + std::to_string(g) + ".csv"); }
  fs::path embeddings(std::size_t g) const { return root / "embeddings" / ("target.g" + std::to_string(g) + ".mrem"); }
  fs::path database(std::size_t g) const { return root / "index" / ("db.g" + std::to_string(g) + ".mrdb"); }
  fs::path synth() const { return root / "synth"; }
  fs::path reports() const { return root / "reports"; }
};

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

inline void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw DataError("missing " + path.string() + " (run `mris " + producer + "` first)");
}

inline Dataset load_run_dataset(const Paths& p) {
  require(p.data() / "manifest", "generate");
  return load_dataset(p.data());
}

inline std::vector<GroupModel> load_group_models(const RunConfig& cfg, const Dataset& ds,
                                                 const Paths& p) {
  std::vector<GroupModel> models;
  const auto groups = split_rows(ds.shape, cfg.groups());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(p.query_model(g), "train");
    require(p.database(g), "index");
    GroupModel m;
    m.group = groups[g];
    m.query_encoder = load_encoder(p.query_model(g));
    m.target_encoder = load_encoder(p.target_model(g));
    m.db = EmbeddingDatabase::load(p.database(g));
    if (m.query_encoder.input_dim() != ds.query_dim)
      throw DimensionError("query encoder input dim does not match the dataset");
    if (m.query_encoder.output_dim() != m.db.dim())
      throw DimensionError("query encoder output dim " + std::to_string(m.query_encoder.output_dim()) +
                           " does not match database dim " + std::to_string(m.db.dim()));
    if (m.db.shape() != m.group.shape(ds.shape.width))
      throw DimensionError("database target shape does not match channel group " + std::to_string(g));
    models.push_back(std::move(m));
  }
  return models;
}

inline void cmd_generate(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto data = generate_synthetic(cfg.generator());
  save_dataset(data.dataset, p.data());
  log.info("generated " + std::to_string(data.dataset.samples.size()) + " samples of " +
           std::to_string(data.dataset.subjects.size()) + " subjects into " + p.data().string());
}

inline void cmd_train(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto tc = cfg.training();
  const auto ds = load_run_dataset(p);
  const auto groups = split_rows(ds.shape, cfg.groups());
  const auto index = ds.subject_index(Split::train_db);
  fs::create_directories(p.root / "models");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::ostringstream csv;
    csv << "epoch,loss,batches,samples,lr_query,lr_target\n";
    auto enc = train_encoders(ds, index, tc, groups[g], [&](const EpochLog& e) {
      csv << e.epoch << "," << MetricTable::fmt(e.loss) << "," << e.batches << "," << e.samples
          << "," << MetricTable::fmt(e.lr_query) << "," << MetricTable::fmt(e.lr_target) << "\n";
      log.debug("group " + std::to_string(g) + " epoch " + std::to_string(e.epoch) + " loss " +
                MetricTable::fmt(e.loss));
    });
    save_encoder(enc.query, p.query_model(g));
    save_encoder(enc.target, p.target_model(g));
    write_text(p.train_log(g), csv.str());
    log.info("group " + std::to_string(g) + ": trained " + std::to_string(tc.epochs) +
             " epochs, loss " + MetricTable::fmt(enc.history.front().loss) + " -> " +
             MetricTable::fmt(enc.history.back().loss));
  }
}

inline void cmd_embed(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto ds = load_run_dataset(p);
  const auto groups = split_rows(ds.shape, cfg.groups());
  const auto ids = ds.samples_in(Split::train_db);
  fs::create_directories(p.root / "embeddings");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(p.target_model(g), "train");
    const auto enc = load_encoder(p.target_model(g));
    if (enc.input_dim() != groups[g].shape(ds.shape.width).pixels())
      throw DimensionError("target encoder input dim does not match channel group " + std::to_string(g));
    EmbeddingFile f;
    f.dim = enc.output_dim();
    for (auto i : ids) {
      const auto& s = ds.samples[i];
      const auto e = embed(enc, target_input(s, ds.shape.width, groups[g]));
      f.ids.push_back(s.id());
      f.embeddings.emplace_back(e.begin(), e.end());
    }
    save_embeddings(f, p.embeddings(g));
    log.info("group " + std::to_string(g) + ": embedded " + std::to_string(ids.size()) + " targets");
  }
}

inline void cmd_index(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto ds = load_run_dataset(p);
  const auto groups = split_rows(ds.shape, cfg.groups());
  std::map<RecordId, std::size_t> by_id;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_id[ds.samples[i].id()] = i;
  fs::create_directories(p.root / "index");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(p.embeddings(g), "embed");
    const auto f = load_embeddings(p.embeddings(g));
    EmbeddingDatabase db;
    for (std::size_t r = 0; r < f.ids.size(); ++r) {
      auto it = by_id.find(f.ids[r]);
      if (it == by_id.end())
        throw DataError("embedding for unknown sample " + to_string(f.ids[r]));
      const auto y = target_input(ds.samples[it->second], ds.shape.width, groups[g]);
      const std::vector<double> e(f.embeddings[r].begin(), f.embeddings[r].end());
      db.insert(f.ids[r], e, y, groups[g].shape(ds.shape.width));
    }
    db.save(p.database(g));
    log.info("group " + std::to_string(g) + ": indexed " + std::to_string(db.size()) + " records");
  }
}

inline void cmd_synthesize(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto ds = load_run_dataset(p);
  const auto models = load_group_models(cfg, ds, p);
  const auto sc = cfg.synthesis();
  const bool normq = cfg.flag("normalize_query");
  const auto split = cfg.synthesize_split();

  Dataset out;
  out.query_dim = ds.query_dim;
  out.shape = ds.shape;
  out.seed = ds.seed;
  std::ostringstream report;
  report << "# sample group rank record distance weight\n";
  for (auto i : ds.samples_in(split)) {
    const auto& s = ds.samples[i];
    const auto syn = synthesize_sample(s, ds.shape, models, sc, normq);
    PairedSample o = s;
    const auto img = denormalize_target(syn.image);
    o.target.assign(img.begin(), img.end());
    out.subjects[s.subject_id] = split;
    out.samples.push_back(std::move(o));
    for (std::size_t g = 0; g < syn.groups.size(); ++g) {
      const auto& r = syn.groups[g];
      report << "sample " << to_string(s.id()) << " group " << g << " policy " << to_string(r.policy)
             << "\n";
      for (const auto& w : r.warnings) report << "warning " << w << "\n";
      for (std::size_t n = 0; n < r.neighbors.size(); ++n)
        report << to_string(s.id()) << " " << g << " " << n << " " << to_string(r.neighbors[n].id)
               << " " << MetricTable::fmt(r.neighbors[n].distance) << " "
               << MetricTable::fmt(r.weights[n]) << "\n";
    }
  }
  if (out.samples.empty()) throw DataError("no samples in split " + to_string(split));
  save_dataset(out, p.synth());
  write_text(p.synth() / "report.txt", report.str());
  log.info("synthesized " + std::to_string(out.samples.size()) + " targets into " + p.synth().string());
}

/// Recall, synthesis error (with random-neighbor baseline), and probe, as a
/// human-readable table and a `metric,stratum,value` file.
inline MetricTable evaluate_run(const RunConfig& cfg, const Dataset& ds,
                                std::span<const GroupModel> models) {
  const auto sc = cfg.synthesis();
  const bool normq = cfg.flag("normalize_query");
  MetricTable t;
  for (std::size_t g = 0; g < models.size(); ++g)
    append_recall(t, evaluate_recall(ds, models[g], normq), "group" + std::to_string(g));

  const auto test = ds.samples_in(Split::test);
  append_errors(t, synthesis_error_report(ds, test, models, sc, normq));
  const auto baseline = random_neighbor_error_report(ds, ds.samples_in(Split::train_db), test, sc.k,
                                                     derive_seed(cfg.count("seed"), 3));
  t.add("random_baseline_abs_error_pixel_median", "all", baseline.overall.median);
  t.add("random_baseline_abs_error_pixel_mad", "all", baseline.overall.mad);

  const auto down = ds.samples_in(Split::downstream);
  if (!down.empty()) {
    const auto train = probe_split(ds, down, models, sc, normq);
    const auto eval = probe_split(ds, test, models, sc, normq);
    append_probe(t, downstream_probe(train, eval, cfg.probe()));
  }
  return t;
}

inline void cmd_evaluate(const RunConfig& cfg, const Paths& p, const Logger& log) {
  const auto ds = load_run_dataset(p);
  const auto models = load_group_models(cfg, ds, p);
  const auto t = evaluate_run(cfg, ds, models);
  write_text(p.reports() / "evaluation.csv", t.csv());
  write_text(p.reports() / "evaluation.txt", t.table());
  log.info("wrote " + (p.reports() / "evaluation.csv").string());
}

/// Parses arguments, runs one command, and returns the process exit status:
/// 0 success, 2 config error, 3 data error, 4 numeric failure.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  const Logger log(err, log_level_from_env());

  using Command = void (*)(const RunConfig&, const Paths&, const Logger&);
  struct Entry {
    const char* name;
    const char* help;
    Command fn;
  };
  const std::vector<Entry> commands{
      {"generate", "write the synthetic paired dataset to <workdir>/data", cmd_generate},
      {"train", "train query/target encoders per row group", cmd_train},
      {"embed", "embed train_db targets with the target encoder", cmd_embed},
      {"index", "build the embedding database from stored embeddings", cmd_index},
      {"synthesize", "synthesize targets for a split by k-NN retrieval", cmd_synthesize},
      {"evaluate", "recall@k, synthesis error, random baseline, probe", cmd_evaluate}};

  CLI::App app{"Cross-modal retrieval and k-NN synthesis"};
  app.name("mris");
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key = value config file");
    sub->allow_extras();
    sub->footer("Any config key may be overridden with --<key> <value>.");
    subs.emplace_back(sub, fn);
  }

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return ConfigError("").exit_code();
  }

  try {
    CLI::App* sub = nullptr;
    Command fn = nullptr;
    for (auto& [s, f] : subs)
      if (s->parsed()) sub = s, fn = f;

    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    const auto extras = sub->remaining();
    for (std::size_t i = 0; i < extras.size(); ++i) {
      const auto& a = extras[i];
      if (a.rfind("--", 0) != 0 || a.size() == 2)
        throw ConfigError("unexpected argument '" + a + "'");
      if (i + 1 >= extras.size()) throw ConfigError("missing value for " + a);
      cfg.set(a.substr(2), extras[++i]);
    }

    // Validate every typed section before touching any file.
    cfg.generator();
    cfg.training();
    cfg.synthesis();
    cfg.probe();
    cfg.groups();
    cfg.synthesize_split();

    const Paths p{cfg.workdir()};
    fs::create_directories(p.root);
    write_text(p.root / (sub->get_name() + ".resolved.conf"), cfg.resolved());
    fn(cfg, p, log);
    return 0;
  } catch (const Error& e) {
    err << "mris: error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "mris: error: " << e.what() << "\n";
    return DataError("").exit_code();
  } catch (const std::exception& e) {
    err << "mris: internal error: " << e.what() << "\n";
    return 1;
  }
}

} // namespace mris::cli
