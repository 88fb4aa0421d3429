// Command-line front end: data generation, training, evaluation and reports.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "cmdgoal/audit.hpp"
#include "cmdgoal/baselines.hpp"
#include "cmdgoal/checkpoint.hpp"
#include "cmdgoal/dataset_io.hpp"
#include "cmdgoal/error.hpp"
#include "cmdgoal/grounding.hpp"
#include "cmdgoal/layout.hpp"
#include "cmdgoal/log.hpp"
#include "cmdgoal/metrics.hpp"
#include "cmdgoal/pdpc.hpp"
#include "cmdgoal/results_io.hpp"
#include "cmdgoal/runtime.hpp"
#include "cmdgoal/synthetic.hpp"
#include "cmdgoal/version.hpp"

namespace fs = std::filesystem;
using namespace cmdgoal;
using nlohmann::json;

namespace {

constexpr const char* kDataDirEnv = "CMDGOAL_DATA_DIR";

struct Globals {
  int threads = 1;
  std::string log_level = "warn";
};

std::string resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kDataDirEnv); env && *env) return env;
  throw InvalidArgument(std::string("no dataset directory: pass --data or set ") + kDataDirEnv);
}

void write_json(const std::string& path, const json& j) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

/// Everything needed to rerun a command: resolved options, seeds and versions.
void write_manifest(const std::string& path, const std::string& subcommand, const CLI::App& app, const Globals& g,
                    json extra = json::object()) {
  json m;
  m["tool"] = "cmdgoal";
  m["version"] = kVersion;
  m["subcommand"] = subcommand;
  m["options"] = app.get_parent()->config_to_str(true, false);
  m["threads"] = g.threads;
  m["compiler"] = __VERSION__;
  m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  m["details"] = std::move(extra);
  write_json(path, m);
}

bool is_naive(const std::string& model) {
  try {
    parse_naive_kind(model);
    return true;
  } catch (const InvalidArgument&) {
    return false;
  }
}

std::vector<double> parse_k_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw InvalidArgument("bad --k-list entry '" + tok + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("--k-list is empty");
  return out;
}

const SceneRecord& pick_record(const DatasetSplit& split, const std::string& id, std::size_t index) {
  if (!id.empty()) {
    for (const auto& r : split.records) {
      if (r.id == id) return r;
    }
    throw InvalidArgument("no record with id '" + id + "'");
  }
  if (index >= split.records.size()) {
    throw InvalidArgument("record index " + std::to_string(index) + " out of range (" +
                          std::to_string(split.records.size()) + " records)");
  }
  return split.records[index];
}

// ---------------------------------------------------------------------------
// gen-data

struct GenOptions {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t num_train = 800;
  std::size_t num_val = 100;
  std::size_t num_test = 100;
  std::string synth_config;
  std::size_t feature_dim = kDefaultObjectFeatureDim;
};

json truth_to_json(const DatasetSplit& split, const GeneratorTruth& truth) {
  json recs = json::array();
  for (std::size_t i = 0; i < split.records.size(); ++i) {
    json comps = json::array();
    for (const auto& c : truth.mixtures[i].components()) {
      const auto& d = std::get<DiagScale>(c.scale);
      comps.push_back({{"x", c.mean.x}, {"y", c.mean.y}, {"sx", d.sx}, {"sy", d.sy}, {"log_weight", c.log_weight}});
    }
    recs.push_back({{"id", split.records[i].id}, {"components", comps}});
  }
  return {{"records", recs}};
}

std::map<std::string, Mixture2D> truth_from_json(const json& j) {
  std::map<std::string, Mixture2D> out;
  for (const auto& r : j.at("records")) {
    std::vector<GaussComponent> comps;
    for (const auto& c : r.at("components")) {
      comps.push_back({{c.at("x").get<double>(), c.at("y").get<double>()},
                       DiagScale{c.at("sx").get<double>(), c.at("sy").get<double>()},
                       c.at("log_weight").get<double>()});
    }
    out.emplace(r.at("id").get<std::string>(), Mixture2D(std::move(comps)));
  }
  return out;
}

int run_gen_data(const GenOptions& o, const CLI::App& app, const Globals& g) {
  SynthConfig cfg;
  if (!o.synth_config.empty()) cfg = synth_config_from_json(read_json(o.synth_config));
  if (app.count("--feature-dim") || o.synth_config.empty()) cfg.feature_dim = o.feature_dim;
  fs::create_directories(o.out);
  const std::pair<SplitName, std::size_t> splits[] = {
      {SplitName::kTrain, o.num_train}, {SplitName::kVal, o.num_val}, {SplitName::kTest, o.num_test}};
  json seeds;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto [name, n] = splits[k];
    cfg.num_records = n;
    const std::uint64_t split_seed = Rng(o.seed).fork(k).next_u64();
    seeds[std::string(to_string(name))] = std::to_string(split_seed);
    const SyntheticData data = gen_synthetic_dataset(cfg, split_seed, name);
    write_dataset(data.split, o.out);
    write_json((fs::path(o.out) / (std::string(to_string(name)) + "_truth.json")).string(),
               truth_to_json(data.split, data.truth));
    std::cout << to_string(name) << ": " << n << " records\n";
  }
  write_manifest((fs::path(o.out) / "manifest.json").string(), "gen-data", app, g,
                 {{"synth_config", to_json(cfg)}, {"split_seeds", seeds}});
  return 0;
}

// ---------------------------------------------------------------------------
// rasterize

struct RasterCliOptions {
  std::string data;
  std::string split = "test";
  std::string id;
  std::size_t index = 0;
  std::string out;
  int height = 192;
  int width = 288;
  bool no_ref = false;
};

constexpr const char* kChannelNames[kLayoutChannels] = {
    "road_r", "road_g", "road_b", "ego", "referred", "car", "truck", "trailer", "bus", "construction_vehicle",
    "bicycle", "motorcycle", "pedestrian", "traffic_cone", "barrier"};

int run_rasterize(const RasterCliOptions& o) {
  const std::string dir = resolve_data_dir(o.data);
  LoadOptions lo;
  lo.load_features = false;
  const DatasetSplit split = load_dataset(dir, parse_split(o.split), lo);
  const SceneRecord& rec = pick_record(split, o.id, o.index);
  RasterOptions ro;
  ro.no_referred_channel = o.no_ref;
  ro.base_dir = dir;
  const LayoutTensor t = rasterize_scene(rec, o.height, o.width, ro);
  fs::create_directories(o.out);
  for (int c = 0; c < kLayoutChannels; ++c) {
    std::ostringstream name;
    name << rec.id << "_ch" << std::setw(2) << std::setfill('0') << c << '_' << kChannelNames[c] << ".png";
    write_channel_png(t, c, (fs::path(o.out) / name.str()).string());
  }
  std::cout << "wrote " << kLayoutChannels << " channel images for " << rec.id << " to " << o.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOptions {
  std::string model;
  std::string data;
  std::string out;
  std::string preset = "desk";
  std::uint64_t seed = 0;
  int epochs = -1;
  double lr = -1.0;
  int batch_size = -1;
  int patience = -1;
  std::size_t max_steps = 0;
  int channels = -1;
  bool no_ref = false;
  bool verbose = false;
};

int run_train(const TrainCliOptions& o, const CLI::App& app, const Globals& g) {
  const ModelKind kind = parse_model_kind(o.model);
  if (o.preset != "desk" && o.preset != "full") throw InvalidArgument("--preset must be desk or full");
  const bool desk = o.preset == "desk";
  const std::string dir = resolve_data_dir(o.data);
  LoadOptions lo;
  lo.load_features = kind == ModelKind::kGrounding;
  const DatasetSplit train_split = load_dataset(dir, SplitName::kTrain, lo);
  DatasetSplit val_split;
  if (fs::exists(fs::path(dir) / "val.jsonl")) val_split = load_dataset(dir, SplitName::kVal, lo);

  TrainConfig tcfg;
  json model_cfg;
  if (kind == ModelKind::kPdpc) {
    tcfg = default_pdpc_train_config(desk);
  } else if (kind == ModelKind::kGrounding) {
    tcfg = default_grounding_train_config();
  } else {
    tcfg = desk ? desk_baseline_train_config(kind) : default_baseline_train_config(kind);
  }
  tcfg.seed = o.seed;
  tcfg.threads = g.threads;
  tcfg.verbose = o.verbose;
  if (o.epochs > 0) tcfg.max_epochs = o.epochs;
  if (o.lr > 0) tcfg.adam.lr = o.lr;
  if (o.batch_size > 0) tcfg.batch_size = static_cast<std::size_t>(o.batch_size);
  if (o.patience >= 0) tcfg.early_stop_patience = o.patience;
  tcfg.max_steps = o.max_steps;

  Checkpoint ckpt;
  TrainResult tr;
  if (kind == ModelKind::kPdpc) {
    PdpcConfig cfg = desk ? PdpcConfig::desk() : PdpcConfig::full();
    cfg.no_referred_channel = o.no_ref;
    if (o.channels > 0) {
      cfg.channels = o.channels;
      cfg.norm_groups = std::gcd(cfg.norm_groups, o.channels);
    }
    auto r = train_pdpc(train_split, val_split, cfg, tcfg, dir);
    ckpt = std::move(r.checkpoint);
    tr = std::move(r.train);
  } else if (kind == ModelKind::kGrounding) {
    GroundingConfig cfg;
    if (!train_split.records.empty() && !train_split.records.front().objects.empty()) {
      cfg.feature_dim = train_split.records.front().objects.front().features.size();
    }
    auto r = train_grounding(train_split, val_split, cfg, tcfg);
    if (r.skipped > 0) std::cout << "skipped " << r.skipped << " records without an overlapping proposal\n";
    ckpt = std::move(r.checkpoint);
    tr = std::move(r.train);
  } else {
    BaselineConfig cfg = desk ? BaselineConfig::desk(kind) : BaselineConfig::full(kind);
    cfg.no_referred_channel = o.no_ref;
    if (o.channels > 0) {
      cfg.channels = o.channels;
      cfg.norm_groups = std::gcd(cfg.norm_groups, o.channels);
    }
    auto r = train_baseline(train_split, val_split, cfg, tcfg, dir);
    ckpt = std::move(r.checkpoint);
    tr = std::move(r.train);
  }
  if (const auto parent = fs::path(o.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_checkpoint(ckpt, o.out);
  write_curve_csv(tr.curve, o.out + ".curve.csv");
  write_manifest(o.out + ".manifest.json", "train", app, g,
                 {{"model_config", ckpt.config}, {"train_records", train_split.records.size()},
                  {"val_records", val_split.records.size()}});
  std::cout << "trained " << to_string(kind) << ": best epoch " << tr.best_epoch << ", score " << tr.best_score
            << ", " << tr.steps << " steps -> " << o.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCliOptions {
  std::string model;
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  int top_k = 0;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  std::size_t bootstrap = 1000;
  std::string k_list = "2,4";
  std::string out;
  std::string referred = "gt";
  std::string grounding;
  bool no_intents = false;
};

void print_row(const MethodRow& r, const std::vector<double>& k_list) {
  std::cout << std::fixed << std::setprecision(2) << r.method << "  n=" << r.n_records << "  ADE " << r.ade << " ["
            << r.ade_ci.lo << ", " << r.ade_ci.hi << "]  MDE " << r.mde;
  for (std::size_t i = 0; i < k_list.size(); ++i) {
    std::cout << "  PA_" << k_list[i] << " " << r.pa[i] << "% [" << r.pa_ci[i].lo << ", " << r.pa_ci[i].hi << "]";
  }
  std::cout << '\n' << std::defaultfloat;
}

int run_eval(const EvalCliOptions& o, const CLI::App& app, const Globals& g) {
  const std::string dir = resolve_data_dir(o.data);
  const SplitName split_name = parse_split(o.split);
  const bool grounding_model = !is_naive(o.model) && o.model != "generator-truth" &&
                               parse_model_kind(o.model) == ModelKind::kGrounding;
  LoadOptions lo;
  lo.load_features = grounding_model || o.referred == "predicted";
  DatasetSplit split = load_dataset(dir, split_name, lo);

  if (grounding_model) {
    if (o.checkpoint.empty()) throw InvalidArgument("--checkpoint is required for grounding");
    const LoadedGrounding gm = load_grounding(load_checkpoint(o.checkpoint));
    const double rate = eval_iou50(gm, split.records);
    std::cout << "grounding IoU@0.5 " << std::fixed << std::setprecision(4) << rate << '\n' << std::defaultfloat;
    if (!o.out.empty()) {
      write_json(o.out + ".json", {{"method", "grounding"}, {"iou50", rate}, {"records", split.records.size()}});
      write_manifest(o.out + ".manifest.json", "eval", app, g);
    }
    return 0;
  }

  std::string note;
  if (o.referred == "predicted") {
    if (o.grounding.empty()) throw InvalidArgument("--referred predicted needs --grounding <checkpoint>");
    const LoadedGrounding gm = load_grounding(load_checkpoint(o.grounding));
    split.records = apply_grounding(gm, split.records);
    note = "referred=predicted";
  } else if (o.referred == "gt") {
    note = "referred=gt";
  } else {
    throw InvalidArgument("--referred must be gt or predicted");
  }

  EvalOptions eo;
  eo.k_list = parse_k_list(o.k_list);
  eo.n_samples = o.samples;
  eo.seed = o.seed;
  eo.bootstrap_resamples = o.bootstrap;
  eo.per_intent = !o.no_intents;
  eo.threads = g.threads;

  std::string method = o.model;
  DestinationSampler sampler;
  std::optional<LoadedPdpc> pdpc;
  std::optional<LoadedBaseline> baseline;
  std::map<std::string, Mixture2D> truth;
  if (is_naive(o.model)) {
    NaiveOptions no;
    no.base_dir = dir;
    const NaiveKind nk = parse_naive_kind(o.model);
    method = std::string(to_string(nk));
    sampler = naive_sampler(nk, no);
    if (nk != NaiveKind::kPickReferred) note.clear();
  } else if (o.model == "generator-truth") {
    truth = truth_from_json(read_json((fs::path(dir) / (o.split + "_truth.json")).string()));
    sampler = [&truth](const SceneRecord& rec, std::size_t n, Rng& rng) {
      const auto it = truth.find(rec.id);
      if (it == truth.end()) throw InvalidArgument("no generator truth for record " + rec.id);
      return sample(it->second, n, rng);
    };
    note.clear();
  } else {
    if (o.checkpoint.empty()) throw InvalidArgument("--checkpoint is required for trained models");
    const Checkpoint c = load_checkpoint(o.checkpoint);
    if (c.model_kind != parse_model_kind(o.model)) {
      throw InvalidArgument("checkpoint holds " + std::string(to_string(c.model_kind)) + ", not " + o.model);
    }
    if (c.model_kind == ModelKind::kPdpc) {
      pdpc = load_pdpc(c);
      std::optional<std::size_t> k;
      if (o.top_k > 0) {
        k = static_cast<std::size_t>(o.top_k);
        method += "-top" + std::to_string(o.top_k);
      }
      sampler = mixture_sampler([&pdpc, k, dir](const SceneRecord& rec) { return predict(*pdpc, rec, k, dir); });
    } else {
      baseline = load_baseline(c);
      sampler = baseline_sampler(*baseline, dir);
    }
    note.clear();
  }

  MethodRow row = evaluate_method(method, split.records, sampler, eo);
  row.note = note;
  print_row(row, eo.k_list);
  if (!o.out.empty()) {
    MetricsReport report;
    report.k_list = eo.k_list;
    report.n_samples = eo.n_samples;
    report.seed = eo.seed;
    report.bootstrap_resamples = eo.bootstrap_resamples;
    report.rows.push_back(row);
    const ResultFiles files = write_results(report, o.out);
    write_manifest(o.out + ".manifest.json", "eval", app, g, {{"records", split.records.size()}});
    std::cout << "wrote " << files.csv << " and " << files.json << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictCliOptions {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string id;
  std::size_t index = 0;
  int top_k = 0;
  std::string out;
  int height = 0;
  int width = 0;
};

void write_components_csv(const Mixture2D& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "index,weight,mean_x,mean_y,scale_kind,s0,s1,s2\n" << std::setprecision(10);
  const auto w = m.weights();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& c = m[i];
    f << i << ',' << w[i] << ',' << c.mean.x << ',' << c.mean.y << ',';
    if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
      f << "diag," << d->sx << ',' << d->sy << ",0\n";
    } else {
      const auto& l = std::get<CholScale>(c.scale);
      f << "cholesky," << l.l11 << ',' << l.l21 << ',' << l.l22 << '\n';
    }
  }
}

int run_predict(const PredictCliOptions& o) {
  const std::string dir = resolve_data_dir(o.data);
  LoadOptions lo;
  lo.load_features = false;
  const DatasetSplit split = load_dataset(dir, parse_split(o.split), lo);
  const SceneRecord& rec = pick_record(split, o.id, o.index);
  const Checkpoint c = load_checkpoint(o.checkpoint);
  fs::create_directories(o.out);
  const std::string stem = (fs::path(o.out) / rec.id).string();

  std::optional<Mixture2D> mixture;
  int h = o.height;
  int w = o.width;
  if (c.model_kind == ModelKind::kPdpc) {
    const LoadedPdpc m = load_pdpc(c);
    std::optional<std::size_t> k;
    if (o.top_k > 0) k = static_cast<std::size_t>(o.top_k);
    mixture = predict(m, rec, k, dir);
    if (h <= 0) h = m.model.config().height;
    if (w <= 0) w = m.model.config().width;
  } else if (c.model_kind == ModelKind::kGrounding) {
    throw InvalidArgument("predict needs a destination model, not grounding");
  } else {
    const LoadedBaseline m = load_baseline(c);
    if (h <= 0) h = m.model.config().height;
    if (w <= 0) w = m.model.config().width;
    const BaselinePrediction pred = predict_baseline(m, rec, dir);
    if (const auto* p = std::get_if<EgoPoint>(&pred)) {
      std::ofstream f(stem + "_point.csv");
      f << "x,y\n" << std::setprecision(10) << p->x << ',' << p->y << '\n';
      std::cout << "point " << p->x << ", " << p->y << '\n';
      return 0;
    }
    if (const auto* d = std::get_if<NonParamDistribution>(&pred)) {
      Heatmap hm;
      hm.width = d->grid_w;
      hm.height = d->grid_h;
      hm.values.resize(static_cast<std::size_t>(hm.width) * hm.height);
      double mx = 0.0;
      for (int v = 0; v < hm.height; ++v) {
        for (int u = 0; u < hm.width; ++u) mx = std::max(mx, hm.values[v * hm.width + u] = d->py[v] * d->px[u]);
      }
      for (auto& x : hm.values) x /= mx;
      write_heatmap_png(hm, stem + "_heatmap.png");
      std::cout << "wrote " << stem << "_heatmap.png\n";
      return 0;
    }
    mixture = std::get<Mixture2D>(pred);
  }
  const Heatmap hm = render_heatmap(*mixture, h, w);
  write_heatmap_png(hm, stem + "_heatmap.png");
  write_components_csv(*mixture, stem + "_components.csv");
  const std::size_t am = hm.argmax();
  std::cout << "components " << mixture->size() << ", heatmap argmax pixel (" << am % hm.width << ", "
            << am / hm.width << ") -> " << stem << "_heatmap.png\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

int run_report(const std::vector<std::string>& inputs, const std::string& out) {
  MetricsReport merged;
  bool first = true;
  for (const auto& path : inputs) {
    MetricsReport r = read_results_json(path);
    if (first) {
      merged.k_list = r.k_list;
      merged.n_samples = r.n_samples;
      merged.seed = r.seed;
      merged.bootstrap_resamples = r.bootstrap_resamples;
      first = false;
    } else if (r.k_list != merged.k_list) {
      throw InvalidArgument(path + ": PA radii differ from the first results file");
    }
    for (auto& row : r.rows) merged.rows.push_back(std::move(row));
  }
  const ResultFiles files = write_results(merged, out);
  for (const auto& row : merged.rows) print_row(row, merged.k_list);
  std::cout << "wrote " << files.csv;
  if (!files.per_intent_csv.empty()) std::cout << ", " << files.per_intent_csv;
  std::cout << " and " << files.json << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// audit-grad

struct AuditCliOptions {
  std::string target = "all";
  std::size_t mixture_instances = 100;
  std::size_t model_instances = 5;
  std::uint64_t seed = 0;
};

int run_audit(const AuditCliOptions& o) {
  constexpr double kMixtureTol = 1e-4;
  constexpr double kModelTol = 1e-3;
  bool ok = true;
  if (o.target == "mixture" || o.target == "all") {
    double worst = 0.0;
    for (std::size_t i = 0; i < o.mixture_instances; ++i) {
      worst = std::max(worst, audit_mixture_gradient(Rng(o.seed).fork(i).next_u64()).rel_error);
    }
    ok &= worst < kMixtureTol;
    std::cout << "mixture nll: " << o.mixture_instances << " instances, max rel error " << worst
              << (worst < kMixtureTol ? "  ok" : "  FAIL") << '\n';
  }
  if (o.target == "pdpc" || o.target == "all") {
    double worst = 0.0;
    for (std::size_t i = 0; i < o.model_instances; ++i) {
      worst = std::max(worst, audit_pdpc_gradient(PdpcConfig::audit(), Rng(o.seed).fork(100 + i).next_u64()).rel_error);
    }
    ok &= worst < kModelTol;
    std::cout << "pdpc end-to-end: " << o.model_instances << " instances, max rel error " << worst
              << (worst < kModelTol ? "  ok" : "  FAIL") << '\n';
  }
  if (o.target == "baselines" || o.target == "all") {
    for (ModelKind k : {ModelKind::kSinglePoint, ModelKind::kUnimodal, ModelKind::kMdn, ModelKind::kNonParam}) {
      BaselineConfig cfg = BaselineConfig::desk(k);
      cfg.height = 24;
      cfg.width = 36;
      cfg.channels = 8;
      cfg.norm_groups = 4;
      cfg.stages = 2;
      cfg.embed_dim = 16;
      cfg.hidden = 16;
      double worst = 0.0;
      for (std::size_t i = 0; i < o.model_instances; ++i) {
        worst = std::max(worst, audit_baseline_gradient(cfg, Rng(o.seed).fork(200 + i).next_u64()).rel_error);
      }
      ok &= worst < kModelTol;
      std::cout << to_string(k) << " end-to-end: " << o.model_instances << " instances, max rel error " << worst
                << (worst < kModelTol ? "  ok" : "  FAIL") << '\n';
    }
  }
  if (o.target != "all" && o.target != "mixture" && o.target != "pdpc" && o.target != "baselines") {
    throw InvalidArgument("--target must be mixture, pdpc, baselines or all");
  }
  if (!ok) throw Error("audit-failed", "gradient audit exceeded its tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Destination prediction from commands: data, training, evaluation."};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "TOML file of option values; flags given on the command line win");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--log-level", g.log_level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}))
      ->capture_default_str();

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic train/val/test splits");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  gen_cmd->add_option("--num-train", gen.num_train)->capture_default_str();
  gen_cmd->add_option("--num-val", gen.num_val)->capture_default_str();
  gen_cmd->add_option("--num-test", gen.num_test)->capture_default_str();
  gen_cmd->add_option("--synth-config", gen.synth_config, "JSON file with generator parameters");
  gen_cmd->add_option("--feature-dim", gen.feature_dim, "Object feature size (0 disables)")->capture_default_str();

  RasterCliOptions ras;
  auto* ras_cmd = app.add_subcommand("rasterize", "Write the layout channels of one record as PNGs");
  ras_cmd->add_option("--data", ras.data, "Dataset directory (default $CMDGOAL_DATA_DIR)");
  ras_cmd->add_option("--split", ras.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  ras_cmd->add_option("--id", ras.id, "Record id");
  ras_cmd->add_option("--index", ras.index, "Record index when no id is given")->capture_default_str();
  ras_cmd->add_option("--out", ras.out, "Output directory")->required();
  ras_cmd->add_option("--height", ras.height)->capture_default_str();
  ras_cmd->add_option("--width", ras.width)->capture_default_str();
  ras_cmd->add_flag("--no-ref", ras.no_ref, "Leave the referred object in its class channel");

  TrainCliOptions tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr_cmd->add_option("--model", tr.model, "pdpc, single-point, unimodal, mdn, nonparam or grounding")->required();
  tr_cmd->add_option("--data", tr.data, "Dataset directory (default $CMDGOAL_DATA_DIR)");
  tr_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  tr_cmd->add_option("--preset", tr.preset, "desk or full")->capture_default_str();
  tr_cmd->add_option("--seed", tr.seed)->capture_default_str();
  tr_cmd->add_option("--epochs", tr.epochs, "Override the epoch budget");
  tr_cmd->add_option("--lr", tr.lr, "Override the learning rate");
  tr_cmd->add_option("--batch-size", tr.batch_size);
  tr_cmd->add_option("--patience", tr.patience, "Early-stopping patience in epochs (0 = off)");
  tr_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  tr_cmd->add_option("--channels", tr.channels, "Override the network width (group count shrinks to divide it)");
  tr_cmd->add_flag("--no-ref", tr.no_ref, "Train without the referred-object channel");
  tr_cmd->add_flag("--verbose", tr.verbose, "Log every epoch");

  EvalCliOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a method on a split");
  ev_cmd->add_option("--model", ev.model,
                     "Trained kind (with --checkpoint), a naive baseline (random-point, random-road-point, pick-ego, "
                     "random-object, pick-referred) or generator-truth")
      ->required();
  ev_cmd->add_option("--checkpoint", ev.checkpoint);
  ev_cmd->add_option("--data", ev.data, "Dataset directory (default $CMDGOAL_DATA_DIR)");
  ev_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  ev_cmd->add_option("--top-k", ev.top_k, "Keep the K heaviest mixture components (0 = all)");
  ev_cmd->add_option("--samples", ev.samples, "Samples per record")->capture_default_str();
  ev_cmd->add_option("--seed", ev.seed)->capture_default_str();
  ev_cmd->add_option("--bootstrap", ev.bootstrap, "Bootstrap resamples")->capture_default_str();
  ev_cmd->add_option("--k-list", ev.k_list, "PA radii in meters, comma separated")->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Results prefix (writes .csv, _per_intent.csv, .json)");
  ev_cmd->add_option("--referred", ev.referred, "gt or predicted")->capture_default_str();
  ev_cmd->add_option("--grounding", ev.grounding, "Grounding checkpoint for --referred predicted");
  ev_cmd->add_flag("--no-intents", ev.no_intents, "Skip the per-intent breakdown");

  PredictCliOptions pr;
  auto* pr_cmd = app.add_subcommand("predict", "Heatmap and component dump for one record");
  pr_cmd->add_option("--checkpoint", pr.checkpoint)->required();
  pr_cmd->add_option("--data", pr.data, "Dataset directory (default $CMDGOAL_DATA_DIR)");
  pr_cmd->add_option("--split", pr.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  pr_cmd->add_option("--id", pr.id);
  pr_cmd->add_option("--index", pr.index)->capture_default_str();
  pr_cmd->add_option("--top-k", pr.top_k, "Keep the K heaviest components (0 = all)");
  pr_cmd->add_option("--out", pr.out, "Output directory")->required();
  pr_cmd->add_option("--height", pr.height, "Heatmap height (default: model input)");
  pr_cmd->add_option("--width", pr.width, "Heatmap width (default: model input)");

  std::vector<std::string> report_inputs;
  std::string report_out;
  auto* rep_cmd = app.add_subcommand("report", "Merge evaluation results into one table");
  rep_cmd->add_option("--results", report_inputs, "Results JSON files from eval")->required();
  rep_cmd->add_option("--out", report_out, "Output prefix")->required();

  AuditCliOptions au;
  auto* au_cmd = app.add_subcommand("audit-grad", "Compare analytic gradients with finite differences");
  au_cmd->add_option("--target", au.target, "mixture, pdpc, baselines or all")->capture_default_str();
  au_cmd->add_option("--mixture-instances", au.mixture_instances)->capture_default_str();
  au_cmd->add_option("--model-instances", au.model_instances)->capture_default_str();
  au_cmd->add_option("--seed", au.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  log_threshold() = g.log_level == "debug"  ? LogLevel::kDebug
                    : g.log_level == "info" ? LogLevel::kInfo
                    : g.log_level == "warn" ? LogLevel::kWarn
                                            : LogLevel::kError;
  try {
    if (*gen_cmd) return run_gen_data(gen, *gen_cmd, g);
    if (*ras_cmd) return run_rasterize(ras);
    if (*tr_cmd) return run_train(tr, *tr_cmd, g);
    if (*ev_cmd) return run_eval(ev, *ev_cmd, g);
    if (*pr_cmd) return run_predict(pr);
    if (*rep_cmd) return run_report(report_inputs, report_out);
    if (*au_cmd) return run_audit(au);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
