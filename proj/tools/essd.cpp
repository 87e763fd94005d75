// essd: command-line front end over the detector library.
//
// Exit codes: 0 ok, 1 check failed (gradcheck), 2 config/parse error,
// 3 missing artifact, 4 validation failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "essd/depth.hpp"
#include "essd/eval.hpp"
#include "essd/gradcheck.hpp"
#include "essd/graph.hpp"
#include "essd/model.hpp"
#include "essd/train.hpp"

namespace {

using namespace essd;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kConfigError = 2;
constexpr int kMissingArtifact = 3;
constexpr int kValidationError = 4;

struct ExitError {
  int code;
  std::string message;
};

struct ModelChoice {
  std::string model = "essd";
  std::string profile = "toy";
  std::string fusion = "sum";
  bool extra_pred_conv = false;
  std::string descriptor;
};

struct Options {
  ModelChoice m;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  // train
  std::size_t phase = 0;
  bool all_phases = false;
  std::size_t scale = 1000;
  std::size_t batch_size = 8;
  std::size_t dataset_size = 16;
  std::string init_weights;
  std::string log;
  // eval / detect / bench
  std::string weights;
  std::string split = "train";
  std::size_t n = 0;
  std::size_t warmup = 10;
  double score_thresh = -1;
  std::string ap_mode = "11point";
  // gradcheck
  std::size_t seeds = 5;
  double tol = 1e-4;
};

// Applies a JSON run config; flags given on the command line win.
void apply_config(Options& o, const CLI::App& cmd) {
  if (o.config.empty()) return;
  std::ifstream in(o.config);
  if (!in) throw ExitError{kMissingArtifact, "config file not found: " + o.config};
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ExitError{kConfigError, "config " + o.config + ": " + e.what()};
  }
  auto given = [&](const char* flag) { return cmd.count(flag) > 0; };
  try {
    if (j.contains("model")) {
      const auto& m = j["model"];
      if (m.contains("profile") && !given("--profile")) o.m.profile = m["profile"].get<std::string>();
      if (m.contains("variant") && !given("--model")) o.m.model = m["variant"].get<std::string>();
      if (m.contains("fusion") && !given("--fusion")) o.m.fusion = m["fusion"].get<std::string>();
      if (m.contains("extra_pred_conv") && !given("--extra-pred-conv"))
        o.m.extra_pred_conv = m["extra_pred_conv"].get<bool>();
    }
    if (j.contains("seed") && !given("--seed")) o.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (t.contains("scale") && !given("--scale")) o.scale = t["scale"].get<std::size_t>();
      if (t.contains("batch_size") && !given("--batch-size")) o.batch_size = t["batch_size"].get<std::size_t>();
      if (t.contains("dataset_size") && !given("--dataset-size")) o.dataset_size = t["dataset_size"].get<std::size_t>();
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      if (e.contains("split") && !given("--split")) o.split = e["split"].get<std::string>();
      if (e.contains("n") && !given("--n")) o.n = e["n"].get<std::size_t>();
      if (e.contains("score_thresh") && !given("--score-thresh")) o.score_thresh = e["score_thresh"].get<double>();
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      if (p.contains("weights") && !given("--weights")) o.weights = p["weights"].get<std::string>();
      if (p.contains("init_weights") && !given("--init-weights")) o.init_weights = p["init_weights"].get<std::string>();
      if (p.contains("out") && !given("--out")) o.out = p["out"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ExitError{kConfigError, "config " + o.config + ": " + e.what()};
  }
}

Profile profile_of(const ModelChoice& m) {
  if (m.profile == "toy") return Profile::make_toy();
  if (m.profile == "canonical300") return Profile::canonical300();
  throw ExitError{kConfigError, "unknown profile '" + m.profile + "' (expected toy or canonical300)"};
}

struct Variant {
  bool essd = true;
  Fusion fusion = Fusion::sum;
  bool extra = false;
};

// Accepts ssd/essd with --fusion and --extra-pred-conv, or the variant names
// SSD, ESSD-less, ESSD-sum, ESSD-prod, ESSD-concat.
Variant variant_of(const ModelChoice& m) {
  if (m.model == "ssd" || m.model == "SSD") return {false, Fusion::sum, false};
  if (m.model == "ESSD-less") return {true, Fusion::sum, false};
  for (const char* f : {"sum", "prod", "concat"})
    if (m.model == std::string("ESSD-") + f) return {true, *parse_fusion(f), true};
  if (m.model != "essd") throw ExitError{kConfigError, "unknown model '" + m.model + "'"};
  auto fusion = parse_fusion(m.fusion);
  if (!fusion) throw ExitError{kConfigError, "unknown fusion '" + m.fusion + "' (expected sum, prod or concat)"};
  return {true, *fusion, m.extra_pred_conv};
}

NetGraph graph_of(const ModelChoice& m, bool allow_canonical) {
  if (!m.descriptor.empty()) {
    if (!std::filesystem::exists(m.descriptor)) throw ExitError{kMissingArtifact, "descriptor not found: " + m.descriptor};
    GraphDescriptor d;
    try {
      d = load_descriptor(m.descriptor);
    } catch (const std::exception& e) {
      throw ExitError{kConfigError, "descriptor " + m.descriptor + ": " + e.what()};
    }
    return NetGraph::seal(std::move(d));
  }
  const Profile p = profile_of(m);
  if (p.kind == Profile::Kind::canonical300 && !allow_canonical) {
    throw ExitError{kConfigError, "the canonical300 profile is topology-only; use --profile toy"};
  }
  const Variant v = variant_of(m);
  return v.essd ? build_essd(p, v.fusion, v.extra) : build_ssd(p);
}

std::optional<NetGraph> ssd_base_of(const ModelChoice& m) {
  const Variant v = variant_of(m);
  if (!v.essd) return std::nullopt;
  return build_ssd(profile_of(m));
}

// Writes to --out when given, otherwise stdout.
void emit(const Options& o, const std::string& text) {
  if (o.out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream f(o.out);
  if (!f) throw ExitError{kMissingArtifact, "cannot write " + o.out};
  f << text;
}

WeightStore load_checked(const std::string& path, const NetGraph& graph) {
  if (path.empty()) throw ExitError{kConfigError, "--weights is required"};
  if (!std::filesystem::exists(path)) throw ExitError{kMissingArtifact, "weight file not found: " + path};
  WeightStore w;
  try {
    w = load_weights(path);
  } catch (const std::exception& e) {
    throw ExitError{kConfigError, "weight file " + path + ": " + e.what()};
  }
  try {
    check_weights(graph, w);
  } catch (const MissingWeightError& e) {
    throw ExitError{kMissingArtifact, path + ": " + e.what()};
  }
  return w;
}

std::vector<SynthSample> split_of(const Options& o, std::size_t default_n) {
  const std::size_t n = o.n ? o.n : default_n;
  if (o.split == "train") return synth_dataset(o.seed, n);
  if (o.split == "heldout") return heldout_dataset(o.seed, n);
  throw ExitError{kConfigError, "unknown split '" + o.split + "' (expected train or heldout)"};
}

int cmd_analyze(const Options& o) {
  const NetGraph g = graph_of(o.m, true);
  emit(o, to_json(analyze(g)).dump(2) + "\n");
  return kOk;
}

int cmd_build(const Options& o) {
  const NetGraph g = graph_of(o.m, true);
  emit(o, to_json(g.descriptor()).dump(2) + "\n");
  return kOk;
}

int cmd_train(const Options& o) {
  if (o.out.empty()) throw ExitError{kConfigError, "--out <weights file> is required"};
  if ((o.phase == 0) == !o.all_phases) throw ExitError{kConfigError, "give exactly one of --phase N or --all-phases"};
  if (o.phase > 3) throw ExitError{kConfigError, "--phase must be 1, 2 or 3"};
  const NetGraph graph = graph_of(o.m, false);
  const auto base = ssd_base_of(o.m);
  const NetGraph* ssd_base = base ? &*base : &graph;

  TrainConfig cfg;
  cfg.seed = o.seed;
  cfg.batch_size = o.batch_size;
  cfg.dataset_size = o.dataset_size;
  cfg.plan = canonical_phase_plan().scaled(o.scale);

  std::optional<WeightStore> init;
  std::string init_path = o.init_weights;
  if (o.phase > 1 && init_path.empty()) {
    init_path = (std::filesystem::path(o.out).parent_path() / ("phase" + std::to_string(o.phase - 1) + ".weights")).string();
  }
  if (!init_path.empty()) {
    if (!std::filesystem::exists(init_path)) {
      throw ExitError{kMissingArtifact, "phase " + std::to_string(o.phase) + " needs the weights of phase " +
                                            std::to_string(o.phase - 1) + "; expected file: " + init_path};
    }
    init = load_weights(init_path);
  }

  std::ofstream log_file;
  if (!o.log.empty()) {
    log_file.open(o.log);
    if (!log_file) throw ExitError{kMissingArtifact, "cannot write " + o.log};
  }
  std::ostream& log = o.log.empty() ? std::cout : log_file;
  std::vector<std::size_t> phases;
  if (o.phase) phases.push_back(o.phase);
  const auto result = train(graph, cfg, ssd_base, phases, init ? &*init : nullptr,
                            [&](const LogRecord& r) { log << to_json(r).dump() << "\n"; });
  save_weights(result.weights, o.out);
  return kOk;
}

EvalConfig eval_config(const Options& o, double default_score) {
  EvalConfig cfg;
  cfg.score_thresh = o.score_thresh >= 0 ? o.score_thresh : default_score;
  cfg.threads = threads_from_env();
  if (o.ap_mode == "11point") {
    cfg.mode = ApMode::voc2007_11point;
  } else if (o.ap_mode == "area") {
    cfg.mode = ApMode::area;
  } else {
    throw ExitError{kConfigError, "unknown --ap-mode '" + o.ap_mode + "' (expected 11point or area)"};
  }
  return cfg;
}

int cmd_eval(const Options& o) {
  const NetGraph graph = graph_of(o.m, false);
  const WeightStore w = load_checked(o.weights, graph);
  const auto data = split_of(o, o.split == "train" ? o.dataset_size : 200);
  emit(o, to_json(evaluate(graph, w, data, eval_config(o, 0.01))).dump(2) + "\n");
  return kOk;
}

int cmd_detect(const Options& o) {
  const NetGraph graph = graph_of(o.m, false);
  const WeightStore w = load_checked(o.weights, graph);
  const auto data = split_of(o, o.split == "train" ? o.dataset_size : 200);
  const EvalConfig cfg = eval_config(o, 0.6);
  const AnchorSet anchors = anchors_for(graph, cfg.anchors);
  std::string text;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (const auto& d : detect(graph, w, anchors, data[i].image, cfg, i)) text += to_json(d).dump() + "\n";
  emit(o, text);
  return kOk;
}

int cmd_bench(const Options& o) {
  const NetGraph graph = graph_of(o.m, false);
  const WeightStore w = o.weights.empty() ? init_weights(graph, o.seed) : load_checked(o.weights, graph);
  const std::size_t n = o.n ? o.n : 100;
  emit(o, to_json(bench(graph, w, o.warmup, n, o.seed, eval_config(o, 0.01))).dump(2) + "\n");
  return kOk;
}

int cmd_gradcheck(const Options& o) {
  const auto results = run_gradcheck_suite(o.seeds, o.tol);
  std::string text;
  bool ok = true;
  char line[160];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-28s seed %llu  rel_err %.3e  %s\n", r.name.c_str(),
                  static_cast<unsigned long long>(r.seed), r.rel_error, r.passed ? "PASS" : "FAIL");
    text += line;
    ok = ok && r.passed;
  }
  emit(o, text);
  return ok ? kOk : kCheckFailed;
}

void add_model_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--model", o.m.model, "ssd, essd, or SSD / ESSD-less / ESSD-sum / ESSD-prod / ESSD-concat");
  cmd->add_option("--profile", o.m.profile, "toy or canonical300");
  cmd->add_option("--fusion", o.m.fusion, "sum, prod or concat (with --model essd)");
  cmd->add_flag("--extra-pred-conv", o.m.extra_pred_conv, "extra conv before the heads on fused sources");
  cmd->add_option("--config", o.config, "JSON run config; flags override it");
  cmd->add_option("--seed", o.seed, "seed for every random choice (default 0)");
  cmd->add_option("--out", o.out, "output file (default stdout)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extension-module SSD: graph analysis, training, evaluation and benchmarking"};
  app.require_subcommand(1);
  Options o;

  auto* analyze_cmd = app.add_subcommand("analyze", "weighted average depth of the prediction sources");
  add_model_options(analyze_cmd, o);
  analyze_cmd->add_option("--descriptor", o.m.descriptor, "graph descriptor JSON instead of a built-in model");

  auto* build_cmd = app.add_subcommand("build", "write a model's graph descriptor JSON");
  add_model_options(build_cmd, o);

  auto* train_cmd = app.add_subcommand("train", "train on the synthetic dataset (JSONL log on stdout or --log)");
  add_model_options(train_cmd, o);
  train_cmd->add_option("--phase", o.phase, "run one phase (1, 2 or 3)");
  train_cmd->add_flag("--all-phases", o.all_phases, "run the full three-phase plan");
  train_cmd->add_option("--scale", o.scale, "divide every iteration count by this factor");
  train_cmd->add_option("--init-weights", o.init_weights, "weights to resume from");
  train_cmd->add_option("--batch-size", o.batch_size);
  train_cmd->add_option("--dataset-size", o.dataset_size);
  train_cmd->add_option("--log", o.log, "JSONL training log file");

  auto* eval_cmd = app.add_subcommand("eval", "per-class AP and mAP");
  auto* detect_cmd = app.add_subcommand("detect", "detections as JSON lines");
  for (auto* cmd : {eval_cmd, detect_cmd}) {
    add_model_options(cmd, o);
    cmd->add_option("--weights", o.weights, "weight file")->required();
    cmd->add_option("--split", o.split, "train or heldout");
    cmd->add_option("--n", o.n, "number of images");
    cmd->add_option("--dataset-size", o.dataset_size, "train split size");
    cmd->add_option("--score-thresh", o.score_thresh);
    cmd->add_option("--ap-mode", o.ap_mode, "11point or area");
  }

  auto* bench_cmd = app.add_subcommand("bench", "batch-1 latency and FPS");
  add_model_options(bench_cmd, o);
  bench_cmd->add_option("--weights", o.weights, "weight file (default: freshly initialized)");
  bench_cmd->add_option("--n", o.n, "timed runs (default 100)");
  bench_cmd->add_option("--warmup", o.warmup, "untimed runs");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks of every op and the loss");
  grad_cmd->add_option("--seeds", o.seeds);
  grad_cmd->add_option("--tol", o.tol);
  grad_cmd->add_option("--out", o.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    for (auto* cmd : app.get_subcommands()) apply_config(o, *cmd);
    if (*analyze_cmd) return cmd_analyze(o);
    if (*build_cmd) return cmd_build(o);
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*detect_cmd) return cmd_detect(o);
    if (*bench_cmd) return cmd_bench(o);
    if (*grad_cmd) return cmd_gradcheck(o);
  } catch (const ExitError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const ValidationError& e) {
    std::cerr << "error: graph failed validation\n";
    for (const auto& v : e.violations()) std::cerr << "  " << v.layer << ": " << v.message << "\n";
    return kValidationError;
  } catch (const MissingWeightError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
