// Command-line driver: pretrain, distill, evaluate, transfer, report.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or flags.

#include "pckd/config.hpp"
#include "pckd/report.hpp"
#include "pckd/train.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace pckd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr const char* kDataRootEnv = "PCKD_DATA_ROOT";

/// Flags shared by the training commands.
struct CommonFlags {
  std::string config;
  std::string data_root;
  std::string output_dir;
  std::string label;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> workers;
  std::vector<std::string> set;
};

/// A numeric flag given as one value, "lo..hi:step" or "lo..hi step s".
struct NumericFlag {
  std::string path;  // config path it overrides
  std::vector<std::string> tokens;
};

struct DistillFlags {
  std::string teacher;
  std::string policy;
  std::vector<std::string> preview_on;
  std::vector<NumericFlag> numeric;
  int jobs = 1;
};

struct Sweep {
  std::string path;
  std::string name;  // flag name without dashes
  std::vector<double> values;
};

std::vector<double> expand_range(const std::string& flag, const std::vector<std::string>& tokens) {
  std::string spec = tokens[0];
  if (tokens.size() == 3) {
    if (tokens[1] != "step") throw ConfigError("--" + flag, 0, flag, "expected 'LO..HI step S'");
    spec += ":" + tokens[2];
  } else if (tokens.size() != 1) {
    throw ConfigError("--" + flag, 0, flag, "expected a value, LO..HI:S or LO..HI step S");
  }
  const auto dots = spec.find("..");
  auto number = [&](const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || !std::isfinite(v))
      throw ConfigError("--" + flag, 0, flag, "'" + s + "' is not a number");
    return v;
  };
  if (dots == std::string::npos) return {number(spec)};
  const auto colon = spec.find(':', dots);
  if (colon == std::string::npos) throw ConfigError("--" + flag, 0, flag, "range needs a step (LO..HI:S)");
  const double lo = number(spec.substr(0, dots)), hi = number(spec.substr(dots + 2, colon - dots - 2));
  const double step = number(spec.substr(colon + 1));
  if (step <= 0 || hi < lo) throw ConfigError("--" + flag, 0, flag, "range needs LO <= HI and a positive step");
  std::vector<double> out;
  const long n = std::lround(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= n; ++i) out.push_back(lo + double(i) * step);
  return out;
}

std::string yaml_number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

std::vector<ConfigOverride> common_overrides(const CommonFlags& f) {
  std::vector<ConfigOverride> o;
  for (const auto& kv : f.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set", 0, kv, "expected PATH=VALUE");
    o.push_back({kv.substr(0, eq), kv.substr(eq + 1)});
  }
  if (f.seed) o.push_back({"train.seed", std::to_string(*f.seed)});
  if (f.epochs) o.push_back({"train.epochs", std::to_string(*f.epochs)});
  if (f.workers) o.push_back({"train.workers", std::to_string(*f.workers)});
  if (!f.output_dir.empty()) o.push_back({"output_dir", f.output_dir});
  // --data-root beats the environment, which beats the file.
  std::string root = f.data_root;
  if (root.empty())
    if (const char* env = std::getenv(kDataRootEnv)) root = env;
  if (!root.empty()) o.push_back({"data.root", root});
  return o;
}

ExperimentConfig resolve(const CommonFlags& f, std::vector<ConfigOverride> extra = {}) {
  auto o = common_overrides(f);
  o.insert(o.end(), extra.begin(), extra.end());
  return load_config(f.config, o);
}

void print_resolved(const ExperimentConfig& c) {
  std::cout << "# resolved configuration\n" << to_yaml(c) << std::flush;
}

struct Splits {
  Dataset train, val, test;
};

Splits load_splits(const DatasetSpec& spec) {
  Splits s;
  DatasetSpec d = spec;
  d.split = Split::train;
  s.train = load_dataset(d);
  d.split = Split::val;
  s.val = load_dataset(d);
  d.split = Split::test;
  s.test = load_dataset(d);
  spdlog::info("data {}: train {} val {} test {}", spec.name, s.train.size(), s.val.size(), s.test.size());
  return s;
}

struct RunFiles {
  fs::path dir;
  std::ofstream log_stream;
  RunLog log;

  explicit RunFiles(const fs::path& d) : dir(d) {
    fs::create_directories(dir);
    log_stream.open(dir / kRunLogFile);
    if (!log_stream) throw IngestionError("cannot write " + (dir / kRunLogFile).string());
    log = RunLog(&log_stream);
  }
};

nlohmann::json header_for(const std::string& command, const std::string& label, const ExperimentConfig& c) {
  return {{"command", command},
          {"label", label},
          {"policy", std::string(policy_name(c.train.scheduler.policy))},
          {"seed", c.train.seed},
          {"precision", std::string(precision_name(c.precision))},
          {"config", to_yaml(c)}};
}

void save_config(const fs::path& dir, const ExperimentConfig& c) { std::ofstream(dir / "config.yaml") << to_yaml(c); }

template <typename S>
RunSummary finish(const TrainResult& r, const Dataset& test, RunLog& log) {
  Backbone<S> best(r.best_checkpoint.backbone);
  load_weights(best, r.best_checkpoint);
  auto acc = evaluate(best, test);
  RunSummary s = r.summary;
  s.test_top1 = acc.top1;
  s.test_top5 = acc.top5;
  log.summary(s);
  return s;
}

void print_summary(const std::string& what, const RunSummary& s) {
  std::cout << nlohmann::json{{"run", what},       {"test_top1", s.test_top1},       {"test_top5", s.test_top5},
                              {"best_val_top1", s.best_val_top1}, {"best_epoch", s.best_epoch},
                              {"steps", s.steps},  {"wall_seconds", s.wall_seconds}}
                   .dump()
            << "\n";
}

template <typename S>
int run_pretrain(const ExperimentConfig& c, const std::string& role, const std::string& label) {
  const auto& spec = role == "student" ? c.student.spec : c.teacher.spec;
  auto data = load_splits(c.data);
  RunFiles files(c.output_dir);
  save_config(files.dir, c);
  files.log.header(header_for("pretrain", label.empty() ? role + "-" + spec.name : label, c));
  Backbone<S> model(spec, c.train.seed);
  spdlog::info("pretrain {} {} ({} parameters)", role, spec.name, model.parameter_count());
  auto r = pretrain(model, data.train, data.val.size() ? &data.val : nullptr, c.train, files.log);
  write_checkpoint(files.dir / (role + ".ckpt"), r.final_checkpoint);
  write_checkpoint(files.dir / (role + "_best.ckpt"), r.best_checkpoint);
  print_summary(role, finish<S>(r, data.test, files.log));
  return kExitOk;
}

template <typename S>
int run_distill(const ExperimentConfig& c, const fs::path& teacher_path, const std::string& label,
                const nlohmann::json& extra) {
  auto tck = read_checkpoint(teacher_path);
  if (tck.backbone.num_classes != c.data.num_classes)
    throw ConfigError(teacher_path.string(), 0, "teacher.checkpoint",
                      "teacher has " + std::to_string(tck.backbone.num_classes) + " classes, data has " +
                          std::to_string(c.data.num_classes));
  if (c.train.loss.beta_ca != 0 && tck.backbone.feature_dim() != c.student.spec.feature_dim())
    throw ConfigError("<config>", 0, "train.loss.beta_ca",
                      "teacher and student feature dims differ (" + std::to_string(tck.backbone.feature_dim()) +
                          " vs " + std::to_string(c.student.spec.feature_dim()) + "); set beta_ca = 0");
  if (!(tck.backbone == c.teacher.spec))
    spdlog::warn("teacher checkpoint is a {} but the config names {}; using the checkpoint", tck.backbone.name,
                 c.teacher.spec.name);
  auto data = load_splits(c.data);
  Backbone<S> teacher(tck.backbone);
  load_weights(teacher, tck);
  Backbone<S> student(c.student.spec, c.train.seed);
  auto head = make_projection_head(student, teacher, c.train);
  spdlog::info("distill {} ({} parameters) -> {} ({} + head {} parameters)", tck.backbone.name,
               teacher.parameter_count(), c.student.spec.name, student.parameter_count(), head.parameter_count());

  RunFiles files(c.output_dir);
  save_config(files.dir, c);
  auto header = header_for("distill", label.empty() ? "distill-" + std::string(policy_name(c.train.scheduler.policy)) : label, c);
  header["teacher_checkpoint"] = fs::absolute(teacher_path).string();
  if (extra.is_object()) header.update(extra);
  files.log.header(header);
  auto r = distill(teacher, student, head, data.train, data.val.size() ? &data.val : nullptr, c.train, files.log);
  write_checkpoint(files.dir / "student.ckpt", r.final_checkpoint);
  write_checkpoint(files.dir / "student_best.ckpt", r.best_checkpoint);
  print_summary("student", finish<S>(r, data.test, files.log));
  return kExitOk;
}

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IngestionError& e) {
    std::cerr << "ingestion error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int dispatch_distill(const CommonFlags& common, const DistillFlags& flags) {
  std::vector<ConfigOverride> fixed;
  if (!flags.policy.empty()) fixed.push_back({"train.preview.policy", flags.policy});
  if (!flags.preview_on.empty()) {
    std::string list;
    for (const auto& t : flags.preview_on) list += (list.empty() ? "" : ", ") + t;
    fixed.push_back({"train.preview.applies_to", "[" + list + "]"});
  }
  std::optional<Sweep> sweep;
  for (const auto& n : flags.numeric) {
    if (n.tokens.empty()) continue;
    const auto flag = n.path.substr(n.path.rfind('.') + 1);
    auto values = expand_range(flag, n.tokens);
    if (values.size() == 1 && n.tokens[0].find("..") == std::string::npos) {
      fixed.push_back({n.path, yaml_number(values[0])});
      continue;
    }
    if (sweep) throw ConfigError("--" + flag, 0, flag, "only one swept flag per invocation");
    sweep = Sweep{n.path, flag, values};
  }

  auto single = [&](const std::vector<ConfigOverride>& extra, const nlohmann::json& sweep_info) {
    auto overrides = fixed;
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    auto c = resolve(common, overrides);
    const fs::path teacher = !flags.teacher.empty() ? fs::path(flags.teacher) : c.teacher.checkpoint;
    if (teacher.empty()) throw ConfigError(common.config, 0, "teacher.checkpoint", "required for distill (or pass --teacher)");
    print_resolved(c);
    std::string label = common.label;
    if (!sweep_info.is_null()) label = (label.empty() ? "" : label + "-") + sweep_info["sweep_param"].get<std::string>() +
                                       "=" + yaml_number(sweep_info["sweep_value"].get<double>());
    return c.precision == Precision::f64 ? run_distill<double>(c, teacher, label, sweep_info)
                                         : run_distill<float>(c, teacher, label, sweep_info);
  };

  if (!sweep) return single({}, nullptr);

  // Validate every point before any compute.
  const auto base = resolve(common, fixed);
  std::vector<std::vector<ConfigOverride>> points;
  for (double v : sweep->values) {
    const auto dir = base.output_dir / (sweep->name + "_" + yaml_number(v));
    points.push_back({{sweep->path, yaml_number(v)}, {"output_dir", dir.string()}});
    auto o = fixed;
    o.insert(o.end(), points.back().begin(), points.back().end());
    resolve(common, o);
  }
  std::cout << "sweep " << sweep->name << ": " << points.size() << " runs\n";

  auto info = [&](std::size_t i) {
    return nlohmann::json{{"sweep_param", sweep->name}, {"sweep_value", sweep->values[i]}};
  };
  int worst = kExitOk;
  if (flags.jobs <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i)
      worst = std::max(worst, guarded([&] { return single(points[i], info(i)); }));
    return worst;
  }
  // Parallel mode: one child process per point, at most `jobs` at a time.
  std::size_t next = 0, running = 0;
  while (next < points.size() || running > 0) {
    while (running < std::size_t(flags.jobs) && next < points.size()) {
      std::cout.flush();
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        const std::size_t i = next;
        std::_Exit(guarded([&] { return single(points[i], info(i)); }));
      }
      ++next, ++running;
    }
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      worst = std::max(worst, WIFEXITED(status) ? WEXITSTATUS(status) : kExitRuntime);
    }
  }
  return worst;
}

template <typename S>
int run_evaluate(const ExperimentConfig& c, const fs::path& ckpt_path, const std::string& split) {
  auto ck = read_checkpoint(ckpt_path);
  DatasetSpec d = c.data;
  auto parsed = parse_split(split);
  if (!parsed) throw ConfigError("--split", 0, "split", "expected train, val or test");
  d.split = *parsed;
  auto data = load_dataset(d);
  Backbone<S> model(ck.backbone);
  load_weights(model, ck);
  auto acc = evaluate(model, data);
  std::cout << nlohmann::json{{"checkpoint", ckpt_path.string()}, {"split", split}, {"top1", acc.top1},
                              {"top5", acc.top5}, {"count", acc.count}}
                   .dump()
            << "\n";
  return kExitOk;
}

int run_transfer(const ExperimentConfig& c, const fs::path& ckpt_path) {
  auto ck = read_checkpoint(ckpt_path);
  auto r = transfer_protocol(ck, c.data, c.transfer);
  nlohmann::json out{{"checkpoint", ckpt_path.string()},     {"target", c.data.name},
                     {"initial_test_top1", r.initial_test_top1}, {"train_top1", r.train_top1},
                     {"test_top1", r.test_top1}};
  fs::create_directories(c.output_dir);
  std::ofstream(c.output_dir / "transfer.json") << out.dump(2) << "\n";
  std::cout << out.dump() << "\n";
  return kExitOk;
}

struct ReportFlags {
  std::vector<std::string> runs;
  std::string out = ".";
  std::size_t baseline = 0;
  std::string features_run;
  std::vector<int> classes;
  std::string split = "test";
};

int run_report(const ReportFlags& f) {
  std::vector<fs::path> dirs(f.runs.begin(), f.runs.end());
  auto runs = load_runs(dirs);
  fs::create_directories(f.out);
  const fs::path out(f.out);

  std::vector<AccuracyRow> rows;
  for (const auto& r : runs) rows.push_back(accuracy_row(r));
  if (f.baseline >= rows.size()) throw ConfigError("--baseline", 0, "baseline", "index out of range");
  const auto md = accuracy_table_markdown(rows, f.baseline);
  std::ofstream(out / "accuracy.md") << md;
  {
    std::ofstream csv(out / "accuracy.csv");
    write_accuracy_csv(csv, rows, f.baseline);
  }
  std::cout << md;

  for (const auto& r : runs) {
    std::string name = r.label;
    for (char& ch : name)
      if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
    std::ofstream csv(out / (name + "_weight_trace.csv"));
    write_weight_trace_csv(csv, mean_weight_trace(r.log.weight_stats()));
  }
  if (auto points = sweep_points(runs); !points.empty()) {
    std::ofstream csv(out / "sweep.csv");
    write_sweep_csv(csv, points);
  }

  if (!f.features_run.empty()) {
    const fs::path dir(f.features_run);
    auto c = load_config(dir / "config.yaml");
    fs::path ckpt = dir / "student_best.ckpt";
    for (const char* alt : {"teacher_best.ckpt", "student.ckpt", "teacher.ckpt"})
      if (!fs::exists(ckpt)) ckpt = dir / alt;
    auto ck = read_checkpoint(ckpt);
    DatasetSpec d = c.data;
    auto parsed = parse_split(f.split);
    if (!parsed) throw ConfigError("--split", 0, "split", "expected train, val or test");
    d.split = *parsed;
    auto data = load_dataset(d);
    Backbone<float> model(ck.backbone);
    load_weights(model, ck);
    std::ofstream csv(out / "features.csv");
    write_feature_csv(csv, export_features(model, data, f.classes));
  }
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config, "Experiment configuration (YAML)")->required();
  cmd->add_option("--data-root", f.data_root, std::string("Dataset directory; overrides $") + kDataRootEnv);
  cmd->add_option("-o,--output-dir", f.output_dir, "Run directory");
  cmd->add_option("--label", f.label, "Run label used in reports");
  cmd->add_option("--seed", f.seed, "Training seed");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--workers", f.workers, "Background batch workers (0 = deterministic single thread)");
  cmd->add_option("--set", f.set, "Any config value as PATH=VALUE, e.g. train.loss.tau_kd=3");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preview-based category contrastive distillation toolkit"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings and errors");

  CommonFlags pre_flags;
  std::string role = "teacher";
  auto* pre = app.add_subcommand("pretrain", "Train a network with cross-entropy (teacher or scratch student)");
  add_common(pre, pre_flags);
  pre->add_option("--model", role, "Which configured network to train")->check(CLI::IsMember({"teacher", "student"}));

  CommonFlags dis_flags;
  DistillFlags dis;
  auto* dist = app.add_subcommand("distill", "Distill the teacher checkpoint into the student");
  add_common(dist, dis_flags);
  dist->add_option("--teacher", dis.teacher, "Teacher checkpoint; overrides teacher.checkpoint");
  dist->add_option("--policy", dis.policy, "Sample weighting policy")
      ->check(CLI::IsMember({"preview", "curriculum", "focal", "none"}));
  dist->add_option("--preview-on", dis.preview_on, "Loss terms the sample weights multiply")
      ->check(CLI::IsMember({"ce", "kd", "fa", "ca", "cc"}))
      ->delimiter(',');
  dist->add_option("-j,--jobs", dis.jobs, "Parallel processes for sweeps")->check(CLI::PositiveNumber);
  dis.numeric.reserve(8);
  for (auto [flag, path] : std::initializer_list<std::pair<const char*, const char*>>{
           {"alpha", "train.loss.alpha"},
           {"beta-cc", "train.loss.beta_cc"},
           {"beta-fa", "train.loss.beta_fa"},
           {"beta-ca", "train.loss.beta_ca"},
           {"tau-kd", "train.loss.tau_kd"},
           {"tau-cc", "train.loss.tau_cc"},
           {"epsilon", "train.preview.epsilon"},
           {"lr", "train.lr"}}) {
    dis.numeric.push_back({path, {}});
    dist->add_option(std::string("--") + flag, dis.numeric.back().tokens,
                     "Value, or a sweep as LO..HI:STEP or 'LO..HI step STEP'")
        ->expected(1, 3)
        ->allow_extra_args(false);
  }

  CommonFlags eval_flags;
  std::string eval_ckpt, eval_split = "test";
  auto* ev = app.add_subcommand("evaluate", "Top-1/top-5 of a checkpoint on a split");
  add_common(ev, eval_flags);
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--split", eval_split, "train, val or test");

  CommonFlags tr_flags;
  std::string tr_ckpt;
  auto* tr = app.add_subcommand("transfer", "Linear probe of a frozen backbone on the configured dataset");
  add_common(tr, tr_flags);
  tr->add_option("--checkpoint", tr_ckpt, "Backbone checkpoint")->required();

  ReportFlags rep;
  std::string classes;
  auto* report = app.add_subcommand("report", "Tables and CSV exports from run directories");
  report->add_option("runs", rep.runs, "Run directories")->required();
  report->add_option("--out", rep.out, "Output directory");
  report->add_option("--baseline", rep.baseline, "Index of the baseline run for the delta column");
  report->add_option("--features", rep.features_run, "Export penultimate features of this run's best checkpoint");
  report->add_option("--classes", rep.classes, "Classes to export (default: all)")->delimiter(',');
  report->add_option("--split", rep.split, "Split used for the feature export");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  if (*pre) {
    return guarded([&] {
      auto c = resolve(pre_flags);
      print_resolved(c);
      return c.precision == Precision::f64 ? run_pretrain<double>(c, role, pre_flags.label)
                                           : run_pretrain<float>(c, role, pre_flags.label);
    });
  }
  if (*dist) return guarded([&] { return dispatch_distill(dis_flags, dis); });
  if (*ev) {
    return guarded([&] {
      auto c = resolve(eval_flags);
      return c.precision == Precision::f64 ? run_evaluate<double>(c, eval_ckpt, eval_split)
                                           : run_evaluate<float>(c, eval_ckpt, eval_split);
    });
  }
  if (*tr) {
    return guarded([&] {
      auto c = resolve(tr_flags);
      print_resolved(c);
      return run_transfer(c, tr_ckpt);
    });
  }
  if (*report) return guarded([&] { return run_report(rep); });
  return kExitConfig;
}
