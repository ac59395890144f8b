// casreg: synthesize data, train, register and evaluate recursive cascaded
// registration models. Every command writes a manifest beside its outputs.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "casreg/cascade.hpp"
#include "casreg/checkpoint.hpp"
#include "casreg/dataset.hpp"
#include "casreg/eval.hpp"
#include "casreg/synth.hpp"
#include "casreg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace casreg;

namespace {

std::string iso_timestamp() {
  std::time_t now = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("failed to write " + path);
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return j;
}

std::string zero_pad(std::int64_t v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*lld", width, static_cast<long long>(v));
  return buf;
}

// ---------------------------------------------------------------- synth ----

struct SynthOpts {
  std::uint64_t seed = 1;
  int count = 20;
  int dims = 32;
  double max_disp = 4.0;
  double affine_jitter = 0.05;
  std::string out;
};

constexpr std::uint64_t kSynthSampleTag = 600;

int cmd_synth(const SynthOpts& o) {
  fs::create_directories(o.out);
  json seeds = json::array();
  for (int i = 0; i < o.count; ++i) {
    std::uint64_t s =
        derive_seed(o.seed, kSynthSampleTag, std::uint64_t(i));
    SyntheticSample sample =
        generate_pair(s, cube(o.dims), o.max_disp, o.affine_jitter);
    save_sample(o.out + "/pair_" + zero_pad(i, 4), sample);
    seeds.push_back(s);
  }
  // Deliberately timestamp-free: rerunning the same flags must reproduce
  // this directory byte for byte.
  json man{{"command", "synth"},
           {"seed", o.seed},
           {"count", o.count},
           {"dims", o.dims},
           {"max_disp", o.max_disp},
           {"affine_jitter", o.affine_jitter},
           {"out", o.out},
           {"sample_seeds", seeds}};
  write_json(o.out + "/manifest.json", man);
  std::cout << "wrote " << o.count << " pairs to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- train ----

TrainConfig config_from_json(const json& j, const std::string& origin) {
  if (!j.is_object())
    throw ConfigError(origin + ": config must be a JSON object");
  TrainConfig cfg;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "total_steps") cfg.total_steps = val.get<std::int64_t>();
      else if (key == "base_lr") cfg.base_lr = val.get<double>();
      else if (key == "half_at_frac1") cfg.half_at_frac1 = val.get<double>();
      else if (key == "half_at_frac2") cfg.half_at_frac2 = val.get<double>();
      else if (key == "batch_size") cfg.batch_size = val.get<int>();
      else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
      else if (key == "cascades") cfg.cascades = val.get<int>();
      else if (key == "lambda_tv") cfg.lambda_tv = val.get<double>();
      else if (key == "lambda_ortho") cfg.lambda_ortho = val.get<double>();
      else if (key == "lambda_det") cfg.lambda_det = val.get<double>();
      else if (key == "dim") cfg.dim = val.get<int>();
      else if (key == "max_disp") cfg.max_disp = val.get<double>();
      else if (key == "affine_jitter") cfg.affine_jitter = val.get<double>();
      else if (key == "data_dir") cfg.data_dir = val.get<std::string>();
      else if (key == "checkpoint_every")
        cfg.checkpoint_every = val.get<std::int64_t>();
      else if (key == "levels") cfg.levels = val.get<int>();
      else if (key == "base_channels") cfg.base_channels = val.get<int>();
      else if (key == "channel_mult") cfg.channel_mult = val.get<int>();
      else throw ConfigError(origin + ": unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError(origin + ": key '" + key + "': " + e.what());
    }
  }
  return cfg;
}

json config_to_json(const TrainConfig& c) {
  return json{{"total_steps", c.total_steps},
              {"base_lr", c.base_lr},
              {"half_at_frac1", c.half_at_frac1},
              {"half_at_frac2", c.half_at_frac2},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"cascades", c.cascades},
              {"lambda_tv", c.lambda_tv},
              {"lambda_ortho", c.lambda_ortho},
              {"lambda_det", c.lambda_det},
              {"dim", c.dim},
              {"max_disp", c.max_disp},
              {"affine_jitter", c.affine_jitter},
              {"data_dir", c.data_dir},
              {"checkpoint_every", c.checkpoint_every},
              {"levels", c.levels},
              {"base_channels", c.base_channels},
              {"channel_mult", c.channel_mult}};
}

json model_sidecar(const TrainConfig& c) {
  return json{{"cascades", c.cascades},
              {"levels", c.levels},
              {"base_channels", c.base_channels},
              {"channel_mult", c.channel_mult},
              {"seed", c.seed}};
}

int cmd_train(const TrainConfig& cfg, const std::string& config_path,
              const std::string& out, const std::string& resume) {
  cfg.validate();
  fs::create_directories(out);

  CascadeModel model =
      init_model(cfg.seed, cfg.cascades, cfg.affine_cfg(), cfg.deformable_cfg());
  AdamState state;
  state.init_for(model);
  std::int64_t start_step = 0;
  if (!resume.empty()) {
    CheckpointInfo info = load_checkpoint(resume, model, &state);
    if (!info.has_optimizer)
      throw ConfigError("resume checkpoint lacks optimizer state: " + resume);
    start_step = info.step;
    if (start_step >= cfg.total_steps)
      throw ConfigError("resume step " + std::to_string(start_step) +
                        " is past total_steps");
  }

  std::ofstream log(out + "/train_log.tsv",
                    start_step > 0 ? std::ios::app : std::ios::out);
  if (!log) throw IoError("cannot open " + out + "/train_log.tsv");
  char buf[256];
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) {
    std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n",
                  static_cast<long long>(s.step), s.lr, s.loss, s.sim, s.tv2,
                  s.ortho, s.det);
    log << buf;
    if ((s.step + 1) % 200 == 0 || s.step + 1 == cfg.total_steps) {
      std::cout << "step " << (s.step + 1) << "/" << cfg.total_steps
                << " loss " << s.loss << (s.skipped ? " (skipped)" : "")
                << std::endl;
    }
  };
  hooks.on_checkpoint = [&](std::int64_t completed) {
    save_checkpoint(model, state, completed,
                    out + "/checkpoint_" + zero_pad(completed, 6) + ".rck1");
  };

  train(model, state, cfg, hooks, start_step);
  log.close();
  if (!log) throw IoError("failed to write " + out + "/train_log.tsv");

  std::string final_ckpt = out + "/checkpoint_final.rck1";
  save_checkpoint(model, state, cfg.total_steps, final_ckpt);
  write_json(out + "/model.json", model_sidecar(cfg));
  json man{{"command", "train"},
           {"config_path", config_path},
           {"config", config_to_json(cfg)},
           {"seed", cfg.seed},
           {"resume", resume},
           {"out", out},
           {"checkpoint", final_ckpt},
           {"log", out + "/train_log.tsv"},
           {"timestamp", iso_timestamp()}};
  write_json(out + "/manifest.json", man);
  std::cout << "wrote " << final_ckpt << "\n";
  return 0;
}

// ------------------------------------------------------------- register ----

struct ModelOnDisk {
  CascadeModel model;
  json arch;
};

ModelOnDisk load_model(const std::string& checkpoint) {
  std::string arch_path =
      (fs::path(checkpoint).parent_path() / "model.json").string();
  if (!fs::exists(arch_path))
    throw IoError("missing architecture sidecar " + arch_path);
  json arch = read_json(arch_path);
  ModelOnDisk m;
  m.arch = arch;
  int n = 0, levels = 4, base = 16, mult = 1;
  try {
    n = arch.at("cascades").get<int>();
    levels = arch.at("levels").get<int>();
    base = arch.at("base_channels").get<int>();
    mult = arch.at("channel_mult").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(arch_path + ": " + e.what());
  }
  m.model = init_model(1, n, AffineNetConfig{levels, base, mult},
                       DeformableNetConfig{levels, base, mult});
  load_checkpoint(checkpoint, m.model);
  return m;
}

struct RegisterOpts {
  std::string checkpoint, moving, fixed, out;
  int r = 1;
  std::string mode = "per_cascade";
  bool dump_intermediate = false;
};

int cmd_register(const RegisterOpts& o) {
  ModelOnDisk m = load_model(o.checkpoint);
  int levels = m.arch.at("levels").get<int>();
  Volume moving = load_volume(o.moving);
  Volume fixed = load_volume(o.fixed);
  require_same_dims(moving.dims, fixed.dims, "register");
  int div = 1 << levels;
  if (moving.dims.d % div || moving.dims.h % div || moving.dims.w % div)
    throw ConfigError("register: dims " + to_string(moving.dims) +
                      " not divisible by 2^levels = " + std::to_string(div));

  CascadeSchedule schedule =
      expand_shared(m.model, o.r, expand_mode_from_string(o.mode));
  RegistrationResult res = register_pair(m.model, schedule, moving, fixed,
                                         o.dump_intermediate);

  fs::create_directories(o.out);
  save_flow(res.final_flow, o.out + "/flow.rcv1");
  save_volume(res.final_warped, o.out + "/warped.rcv1");
  if (o.dump_intermediate) {
    for (std::size_t k = 0; k < res.flows.size(); ++k)
      save_flow(res.flows[k],
                o.out + "/flow_" + zero_pad(std::int64_t(k), 2) + ".rcv1");
    for (std::size_t k = 0; k < res.warped.size(); ++k)
      save_volume(res.warped[k],
                  o.out + "/warped_" + zero_pad(std::int64_t(k), 2) + ".rcv1");
  }
  json man{{"command", "register"},
           {"checkpoint", o.checkpoint},
           {"moving", o.moving},
           {"fixed", o.fixed},
           {"out", o.out},
           {"schedule", {{"r", o.r}, {"mode", to_string(schedule.mode)}}},
           {"similarity", res.similarity},
           {"folding", res.folding},
           {"flow", o.out + "/flow.rcv1"},
           {"warped", o.out + "/warped.rcv1"},
           {"timestamp", iso_timestamp()}};
  write_json(o.out + "/manifest.json", man);
  std::printf("similarity %.6f folding %.6g\n", res.similarity, res.folding);
  return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalOpts {
  std::string checkpoint, data, out;
  int r = 1;
  std::string mode = "per_cascade";
};

int cmd_eval(const EvalOpts& o) {
  ModelOnDisk m = load_model(o.checkpoint);
  CascadeSchedule schedule =
      expand_shared(m.model, o.r, expand_mode_from_string(o.mode));

  EvalReport rep;
  rep.model_id = o.checkpoint;
  rep.schedule_id = "n=" + std::to_string(m.model.n()) +
                    " r=" + std::to_string(o.r) + " " +
                    to_string(schedule.mode);
  for (const auto& dir : list_sample_dirs(o.data)) {
    std::string name = fs::path(dir).filename().string();
    PairEval pe;
    pe.name = name;
    try {
      LoadedSample ls = load_sample(dir);
      pe = evaluate_pair(m.model, schedule, ls.sample, ls.has_gt, name);
    } catch (const std::exception& e) {
      pe.ok = false;
      pe.error = e.what();
    }
    rep.pairs.push_back(std::move(pe));
  }
  aggregate_report(rep);

  fs::create_directories(o.out);
  write_report_tsv(o.out + "/report.tsv", rep);
  write_report_summary(o.out + "/summary.txt", rep);
  json man{{"command", "eval"},
           {"checkpoint", o.checkpoint},
           {"data", o.data},
           {"out", o.out},
           {"schedule", {{"r", o.r}, {"mode", to_string(schedule.mode)}}},
           {"pairs", rep.pairs.size()},
           {"failed", rep.failed()},
           {"timestamp", iso_timestamp()}};
  write_json(o.out + "/manifest.json", man);
  std::printf("pairs %zu failed %lld dice %.6f landmark %.6f similarity %.6f\n",
              rep.pairs.size(), static_cast<long long>(rep.failed()),
              rep.mean_dice.mean, rep.landmark.mean, rep.similarity.mean);
  return rep.failed() == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recursive cascaded deformable registration"};
  app.require_subcommand(1);

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "generate synthetic pairs");
  synth->add_option("--seed", so.seed, "base seed");
  synth->add_option("--count", so.count, "number of pairs");
  synth->add_option("--dims", so.dims, "cube edge (multiple of 16)");
  synth->add_option("--max-disp", so.max_disp, "max displacement magnitude");
  synth->add_option("--affine-jitter", so.affine_jitter, "affine jitter");
  synth->add_option("--out", so.out, "output directory")->required();

  TrainConfig flag_cfg;
  std::string config_path, train_out, resume;
  CLI::App* tr = app.add_subcommand("train", "train a cascade model");
  tr->add_option("--config", config_path, "JSON config file");
  tr->add_option("--out", train_out, "output directory")->required();
  tr->add_option("--resume", resume, "checkpoint to resume from");
  std::vector<std::pair<std::string, CLI::Option*>> overrides;
  auto mirror = [&](const std::string& key, auto& field, const char* help) {
    overrides.emplace_back(key, tr->add_option("--" + key, field, help));
  };
  mirror("total_steps", flag_cfg.total_steps, "training steps");
  mirror("base_lr", flag_cfg.base_lr, "initial learning rate");
  mirror("half_at_frac1", flag_cfg.half_at_frac1, "first halving fraction");
  mirror("half_at_frac2", flag_cfg.half_at_frac2, "second halving fraction");
  mirror("batch_size", flag_cfg.batch_size, "pairs per step");
  mirror("seed", flag_cfg.seed, "seed for init and data");
  mirror("cascades", flag_cfg.cascades, "deformable cascade count");
  mirror("lambda_tv", flag_cfg.lambda_tv, "smoothness weight");
  mirror("lambda_ortho", flag_cfg.lambda_ortho, "orthogonality weight");
  mirror("lambda_det", flag_cfg.lambda_det, "determinant weight");
  mirror("dim", flag_cfg.dim, "cube edge of training pairs");
  mirror("max_disp", flag_cfg.max_disp, "max displacement of pairs");
  mirror("affine_jitter", flag_cfg.affine_jitter, "affine jitter of pairs");
  mirror("data_dir", flag_cfg.data_dir, "fixed dataset dir (else on the fly)");
  mirror("checkpoint_every", flag_cfg.checkpoint_every, "periodic cadence");
  mirror("levels", flag_cfg.levels, "network pyramid levels");
  mirror("base_channels", flag_cfg.base_channels, "first-level channels");
  mirror("channel_mult", flag_cfg.channel_mult, "width multiplier");

  RegisterOpts ro;
  CLI::App* reg = app.add_subcommand("register", "register one pair");
  reg->add_option("--checkpoint", ro.checkpoint)->required();
  reg->add_option("--moving", ro.moving)->required();
  reg->add_option("--fixed", ro.fixed)->required();
  reg->add_option("--r", ro.r, "shared-weight repetitions");
  reg->add_option("--mode", ro.mode, "per_cascade | whole_block | plain");
  reg->add_option("--out", ro.out)->required();
  reg->add_flag("--dump-intermediate", ro.dump_intermediate,
                "write every cascade's flow and warped image");

  EvalOpts eo;
  CLI::App* ev = app.add_subcommand("eval", "evaluate on a dataset");
  ev->add_option("--checkpoint", eo.checkpoint)->required();
  ev->add_option("--data", eo.data)->required();
  ev->add_option("--r", eo.r, "shared-weight repetitions");
  ev->add_option("--mode", eo.mode, "per_cascade | whole_block | plain");
  ev->add_option("--out", eo.out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(so);
    if (tr->parsed()) {
      TrainConfig cfg;
      if (!config_path.empty())
        cfg = config_from_json(read_json(config_path), config_path);
      json flags = config_to_json(flag_cfg);
      json merged = config_to_json(cfg);
      for (const auto& [key, opt] : overrides)
        if (opt->count()) merged[key] = flags[key];
      cfg = config_from_json(merged, "flags");
      return cmd_train(cfg, config_path, train_out, resume);
    }
    if (reg->parsed()) return cmd_register(ro);
    if (ev->parsed()) return cmd_eval(eo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
