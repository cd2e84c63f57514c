#include "kdlab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdlab/checkpoint.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/models.hpp"

namespace kdlab {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean (true/false), got '" + v + "'");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list of numbers");
  return out;
}

std::string list_str(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = {
      {"model", [](RunConfig& c, const std::string& v) { c.model = v; },
       [](const RunConfig& c) { return c.model; }},
      {"activation",
       [](RunConfig& c, const std::string& v) {
         try {
           parse_activation(v);
         } catch (const Error&) {
           throw ConfigError("activation: expected gelu or relu, got '" + v + "'");
         }
         c.activation = v;
       },
       [](const RunConfig& c) { return c.activation; }},
      {"data", [](RunConfig& c, const std::string& v) { c.data = v; },
       [](const RunConfig& c) { return c.data; }},
      {"out", [](RunConfig& c, const std::string& v) { c.out = v; },
       [](const RunConfig& c) { return c.out; }},
      {"teacher_ckpt", [](RunConfig& c, const std::string& v) { c.teacher_ckpt = v; },
       [](const RunConfig& c) { return c.teacher_ckpt; }},
      {"ckpt", [](RunConfig& c, const std::string& v) { c.ckpt = v; },
       [](const RunConfig& c) { return c.ckpt; }},
      {"baseline_ckpt", [](RunConfig& c, const std::string& v) { c.baseline_ckpt = v; },
       [](const RunConfig& c) { return c.baseline_ckpt; }},
      {"layer", [](RunConfig& c, const std::string& v) { c.layer = v; },
       [](const RunConfig& c) { return c.layer; }},
      {"seed", [](RunConfig& c, const std::string& v) { c.distill.seed = to_uint("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.distill.seed); }},
      {"epochs",
       [](RunConfig& c, const std::string& v) {
         c.distill.epochs = static_cast<int>(to_uint("epochs", v));
       },
       [](const RunConfig& c) { return std::to_string(c.distill.epochs); }},
      {"batch_size",
       [](RunConfig& c, const std::string& v) { c.distill.batch_size = to_uint("batch_size", v); },
       [](const RunConfig& c) { return std::to_string(c.distill.batch_size); }},
      {"eval_batch_size",
       [](RunConfig& c, const std::string& v) { c.eval_batch_size = to_uint("eval_batch_size", v); },
       [](const RunConfig& c) { return std::to_string(c.eval_batch_size); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.distill.lr = to_double("lr", v); },
       [](const RunConfig& c) { return fmt(c.distill.lr); }},
      {"momentum",
       [](RunConfig& c, const std::string& v) { c.distill.momentum = to_double("momentum", v); },
       [](const RunConfig& c) { return fmt(c.distill.momentum); }},
      {"weight_decay",
       [](RunConfig& c, const std::string& v) {
         c.distill.weight_decay = to_double("weight_decay", v);
       },
       [](const RunConfig& c) { return fmt(c.distill.weight_decay); }},
      {"sched_step",
       [](RunConfig& c, const std::string& v) {
         c.distill.sched_step = static_cast<int>(to_uint("sched_step", v));
       },
       [](const RunConfig& c) { return std::to_string(c.distill.sched_step); }},
      {"sched_gamma",
       [](RunConfig& c, const std::string& v) {
         c.distill.sched_gamma = to_double("sched_gamma", v);
       },
       [](const RunConfig& c) { return fmt(c.distill.sched_gamma); }},
      {"alpha", [](RunConfig& c, const std::string& v) { c.distill.alpha = to_double("alpha", v); },
       [](const RunConfig& c) { return fmt(c.distill.alpha); }},
      {"temperature",
       [](RunConfig& c, const std::string& v) {
         c.distill.temperature = to_double("temperature", v);
       },
       [](const RunConfig& c) { return fmt(c.distill.temperature); }},
      {"image_size",
       [](RunConfig& c, const std::string& v) {
         c.augment.target_h = c.augment.target_w = to_uint("image_size", v);
       },
       [](const RunConfig& c) { return std::to_string(c.augment.target_h); }},
      {"augment",
       [](RunConfig& c, const std::string& v) { c.augment.enabled = to_bool("augment", v); },
       [](const RunConfig& c) { return std::string(c.augment.enabled ? "true" : "false"); }},
      {"crop_low",
       [](RunConfig& c, const std::string& v) { c.augment.crop_low = to_double("crop_low", v); },
       [](const RunConfig& c) { return fmt(c.augment.crop_low); }},
      {"crop_high",
       [](RunConfig& c, const std::string& v) { c.augment.crop_high = to_double("crop_high", v); },
       [](const RunConfig& c) { return fmt(c.augment.crop_high); }},
      {"hflip",
       [](RunConfig& c, const std::string& v) { c.augment.hflip_prob = to_double("hflip", v); },
       [](const RunConfig& c) { return fmt(c.augment.hflip_prob); }},
      {"mean", [](RunConfig& c, const std::string& v) { c.augment.mean = to_list("mean", v); },
       [](const RunConfig& c) { return list_str(c.augment.mean); }},
      {"std", [](RunConfig& c, const std::string& v) { c.augment.std = to_list("std", v); },
       [](const RunConfig& c) { return list_str(c.augment.std); }},
  };
  return table;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : key_table()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// run directories

class RunDir {
 public:
  RunDir(const fs::path& dir, bool force) : dir_(dir) {
    if (dir.empty()) throw ConfigError("--out is required");
    const fs::path lock = dir / "run.lock";
    if (fs::exists(dir)) {
      if (!force) {
        throw ConfigError(fs::exists(lock)
                              ? dir.string() + " is locked by another run; pass --force to overwrite"
                              : dir.string() + " already exists; pass --force to overwrite");
      }
      fs::remove_all(dir);
    }
    if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
    if (!fs::create_directory(dir)) throw ConfigError("could not create " + dir.string());
    std::FILE* f = std::fopen(lock.c_str(), "wx");
    if (!f) throw ConfigError("could not lock " + dir.string());
    std::fclose(f);
  }
  ~RunDir() {
    if (committed_) {
      std::error_code ec;
      fs::remove(dir_ / "run.lock", ec);
    }
  }
  void commit() { committed_ = true; }
  fs::path operator/(const char* name) const { return dir_ / name; }

 private:
  fs::path dir_;
  bool committed_ = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

class MetricsCsv {
 public:
  explicit MetricsCsv(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot write " + path.string());
    out_ << "epoch,split,loss_total,loss_kd,loss_task,acc,map\n";
  }
  void row(const MetricsReport& r) {
    out_ << r.epoch << ',' << r.split << ',' << fmt(r.loss_total) << ',' << fmt(r.loss_kd) << ','
         << fmt(r.loss_task) << ',' << fmt(r.acc) << ',' << fmt(r.map) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

SplitDataset load_data(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("--data is required");
  if (!fs::exists(cfg.data)) throw ConfigError("data path " + cfg.data + " does not exist");
  return load_dataset_dir(cfg.data);
}

ModelShape shape_for(const RunConfig& cfg, const Dataset& train) {
  ModelShape s;
  s.in_channels = train.channels();
  s.image_size = cfg.augment.target_h;
  s.num_classes = train.num_classes();
  return s;
}

void check_compatible(const Model& model, const Dataset& data, const std::string& what) {
  if (model.shape().num_classes != data.num_classes()) {
    throw ConfigError(what + " predicts " + std::to_string(model.shape().num_classes) +
                      " classes but the dataset has " + std::to_string(data.num_classes()));
  }
  if (model.shape().in_channels != data.channels()) {
    throw ConfigError(what + " expects " + std::to_string(model.shape().in_channels) +
                      " channels but the dataset has " + std::to_string(data.channels()));
  }
}

AugmentConfig preprocessing_for(const RunConfig& cfg, const Model& model) {
  AugmentConfig pre = cfg.augment;
  pre.target_h = pre.target_w = model.shape().image_size;
  return pre;
}

EpochCallback epoch_logger(MetricsCsv& csv, std::ostream& log) {
  return [&csv, &log](const MetricsReport& r) {
    csv.row(r);
    char line[160];
    std::snprintf(line, sizeof line, "epoch %d %-5s loss %.4f acc %.4f map %.4f\n", r.epoch,
                  r.split.c_str(), r.loss_total, r.acc, r.map);
    log << line << std::flush;
  };
}

const Dataset& eval_split(const SplitDataset& data) {
  if (data.test.size() == 0) throw ConfigError("dataset has no test split");
  return data.test;
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

std::string RunConfig::resolved() const {
  std::string s = "command = " + command + "\n";
  for (const auto& k : key_table()) s += k.name + " = " + k.get(*this) + "\n";
  return s;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{"command"};
    for (const auto& k : key_table()) n.push_back(k.name);
    return n;
  }();
  return names;
}

RunConfig default_run_config(const std::string& command, const std::string& model) {
  RunConfig cfg;
  cfg.command = command;
  cfg.model = model;
  cfg.distill = is_teacher_preset(model) && command == "train" ? DistillConfig::teacher_defaults()
                                                               : DistillConfig::student_defaults();
  return cfg;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "command") {
    cfg.command = value;
    return;
  }
  const Key* k = find_key(key);
  if (!k) throw ConfigError("unknown key '" + key + "'");
  k->set(cfg, value);
}

std::vector<ConfigEntry> read_config_entries(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::vector<ConfigEntry> entries;
  std::string raw;
  std::size_t line = 0;
  RunConfig scratch;
  while (std::getline(in, raw)) {
    ++line;
    const std::string text = trim(raw.substr(0, raw.find('#')));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError(line, "expected 'key = value'");
    ConfigEntry e{trim(text.substr(0, eq)), trim(text.substr(eq + 1)), line};
    if (e.key.empty()) throw ParseError(line, "missing key before '='");
    try {
      apply_setting(scratch, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ParseError(line, err.what());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

namespace {

RunConfig merge(const std::string& command, const std::vector<ConfigEntry>& file,
                const std::map<std::string, std::string>& flags) {
  std::string model;
  for (const auto& e : file) {
    if (e.key == "model") model = e.value;
  }
  if (auto it = flags.find("model"); it != flags.end()) model = it->second;
  if (model.empty()) model = command == "train" ? "teacher" : "vit";

  RunConfig cfg = default_run_config(command, model);
  for (const auto& e : file) {
    if (e.key == "command") continue;
    try {
      apply_setting(cfg, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ParseError(e.line, err.what());
    }
  }
  for (const auto& [key, value] : flags) apply_setting(cfg, key, value);
  cfg.command = command;
  return cfg;
}

}  // namespace

RunConfig parse_config(const fs::path& path, const std::string& command) {
  return merge(command, read_config_entries(path), {});
}

RunConfig resolve_config(const std::string& command, const std::optional<fs::path>& file,
                         const std::map<std::string, std::string>& flags) {
  std::vector<ConfigEntry> entries;
  if (file) entries = read_config_entries(*file);
  return merge(command, entries, flags);
}

// ---------------------------------------------------------------------------
// commands

int cmd_train(const RunConfig& cfg, bool force, std::ostream& log) {
  cfg.distill.validate();
  cfg.augment.validate();
  const SplitDataset data = load_data(cfg);
  auto model = make_model(cfg.model, shape_for(cfg, data.train), cfg.distill.seed,
                          parse_activation(cfg.activation));
  RunDir dir(cfg.out, force);
  write_text(dir / "config.resolved", cfg.resolved());
  MetricsCsv csv(dir / "metrics.csv");
  log << "train " << cfg.model << ": " << model->count_params() << " parameters, "
      << data.train.size() << " train / " << data.test.size() << " test samples\n";
  train_regular(*model, data.train, data.test, cfg.distill, cfg.augment, epoch_logger(csv, log));
  save_checkpoint(dir / "final.kdck", *model);
  dir.commit();
  return 0;
}

int cmd_distill(const RunConfig& cfg, bool force, std::ostream& log) {
  cfg.distill.validate();
  cfg.augment.validate();
  if (cfg.teacher_ckpt.empty()) throw ConfigError("--teacher-ckpt is required");
  if (!fs::exists(cfg.teacher_ckpt)) {
    throw ConfigError("teacher checkpoint " + cfg.teacher_ckpt + " does not exist");
  }
  auto teacher = load_model(cfg.teacher_ckpt);
  const SplitDataset data = load_data(cfg);
  check_compatible(*teacher, data.train, "teacher checkpoint");
  if (teacher->shape().image_size != cfg.augment.target_h) {
    throw ConfigError("teacher checkpoint was trained at " +
                      std::to_string(teacher->shape().image_size) + " pixels but image_size is " +
                      std::to_string(cfg.augment.target_h));
  }
  auto student = make_model(cfg.model, shape_for(cfg, data.train), cfg.distill.seed,
                            parse_activation(cfg.activation));
  RunDir dir(cfg.out, force);
  write_text(dir / "config.resolved", cfg.resolved());
  MetricsCsv csv(dir / "metrics.csv");
  log << "distill " << teacher->preset() << " -> " << cfg.model << ": alpha "
      << fmt(cfg.distill.alpha) << ", t " << fmt(cfg.distill.temperature) << "\n";
  distill_train(*teacher, *student, data.train, data.test, cfg.distill, cfg.augment,
                epoch_logger(csv, log));
  save_checkpoint(dir / "final.kdck", *student);
  dir.commit();
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, bool force, std::ostream& log) {
  if (cfg.ckpt.empty()) throw ConfigError("--ckpt is required");
  auto model = load_model(cfg.ckpt);
  const SplitDataset data = load_data(cfg);
  const Dataset& test = eval_split(data);
  check_compatible(*model, test, "checkpoint");
  RunDir dir(cfg.out, force);
  write_text(dir / "config.resolved", cfg.resolved());
  const Evaluation ev = evaluate(*model, test, preprocessing_for(cfg, *model), cfg.eval_batch_size);
  json per_class = json::array();
  for (const auto& ap : ev.ap.per_class) per_class.push_back(ap ? json(*ap) : json(nullptr));
  json record = {{"preset", model->preset()}, {"samples", test.size()},
                 {"acc", ev.accuracy},        {"map", ev.ap.map},
                 {"params", model->count_params()}, {"per_class_ap", per_class},
                 {"loss_task", ev.loss_task}};
  write_text(dir / "eval.jsonl", record.dump() + "\n");
  log << record.dump() << "\n";
  dir.commit();
  return 0;
}

int cmd_compare(const RunConfig& cfg, bool force, std::ostream& log) {
  if (cfg.teacher_ckpt.empty() || cfg.ckpt.empty()) {
    throw ConfigError("compare needs --teacher-ckpt and --ckpt");
  }
  auto teacher = load_model(cfg.teacher_ckpt);
  auto student = load_model(cfg.ckpt);
  std::unique_ptr<Model> baseline;
  if (!cfg.baseline_ckpt.empty()) baseline = load_model(cfg.baseline_ckpt);
  const SplitDataset data = load_data(cfg);
  const Dataset& test = eval_split(data);
  for (const Model* m : {teacher.get(), student.get(), baseline.get()}) {
    if (!m) continue;
    check_compatible(*m, test, "checkpoint " + m->preset());
    if (m->shape().image_size != teacher->shape().image_size) {
      throw ConfigError("checkpoints were trained at different image sizes");
    }
  }
  const AugmentConfig pre = preprocessing_for(cfg, *teacher);
  RunDir dir(cfg.out, force);
  write_text(dir / "config.resolved", cfg.resolved());
  const SimilarityReport rep =
      compare_representations(*teacher, *student, test, pre, cfg.layer, cfg.distill.seed);
  std::string csv = "sample_index,cosine,euclidean\n";
  for (std::size_t i = 0; i < rep.per_pair.size(); ++i) {
    csv += std::to_string(i) + "," + fmt(rep.per_pair[i].cosine) + "," +
           fmt(rep.per_pair[i].euclidean) + "\n";
  }
  write_text(dir / "similarity.csv", csv);
  json summary = {{"layer", cfg.layer},
                  {"samples", rep.per_pair.size()},
                  {"projected_dim", rep.projected_dim},
                  {"cosine_mean", rep.cosine_mean},
                  {"euclidean_mean", rep.euclidean_mean}};
  if (baseline) {
    const SimilarityReport base =
        compare_representations(*teacher, *baseline, test, pre, cfg.layer, cfg.distill.seed);
    summary["baseline_cosine_mean"] = base.cosine_mean;
    summary["baseline_euclidean_mean"] = base.euclidean_mean;
    summary["closer_than_baseline"] = rep.cosine_mean > base.cosine_mean;
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  log << summary.dump() << "\n";
  dir.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// command line

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Teacher-student distillation experiments", "kdlab"};
  app.require_subcommand(1);

  struct Flags {
    std::map<std::string, std::string> values;
    std::string config;
    bool force = false;
  };
  std::map<std::string, Flags> per_command;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    Flags& f = per_command[name];
    sub->add_option("--config", f.config, "key = value configuration file");
    sub->add_flag("--force", f.force, "overwrite an existing output directory");
    const std::vector<std::pair<std::string, std::string>> opts = {
        {"--data", "dataset directory (IDX files or image folders)"},
        {"--out", "output directory, created exclusively"},
        {"--seed", "seed for initialization, shuffling, augmentation"},
        {"--model", "model preset: teacher, vit, pvt, hybrid"},
        {"--epochs", "training epochs"},
        {"--batch-size", "minibatch size"},
        {"--lr", "base learning rate"},
        {"--alpha", "task-loss weight"},
        {"--temperature", "softmax temperature"},
        {"--teacher-ckpt", "teacher checkpoint"},
        {"--ckpt", "model checkpoint"},
        {"--baseline-ckpt", "second student checkpoint for compare"},
        {"--layer", "layer compared by compare"},
        {"--activation", "feed-forward activation: gelu or relu"},
        {"--image-size", "square input size after resizing"},
    };
    for (const auto& [flag, desc] : opts) {
      std::string key = flag.substr(2);
      std::replace(key.begin(), key.end(), '-', '_');
      std::string names = flag;
      if (flag == "--model") names += ",--student";
      sub->add_option_function<std::string>(
          names, [&f, key](const std::string& v) { f.values[key] = v; }, desc);
    }
    return sub;
  };
  add("train", "train one model on labels only");
  add("distill", "train a student against a frozen teacher checkpoint");
  add("evaluate", "accuracy, mAP and per-class AP of a checkpoint on the test split");
  add("compare", "teacher-student feature similarity on the test split");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  const Flags& f = per_command[command];
  try {
    std::optional<fs::path> file;
    if (!f.config.empty()) file = f.config;
    const RunConfig cfg = resolve_config(command, file, f.values);
    if (command == "train") return cmd_train(cfg, f.force, out);
    if (command == "distill") return cmd_distill(cfg, f.force, out);
    if (command == "evaluate") return cmd_evaluate(cfg, f.force, out);
    return cmd_compare(cfg, f.force, out);
  } catch (const ParseError& e) {
    err << "kdlab: " << (f.config.empty() ? "" : f.config + ": ") << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "kdlab: " << e.what() << "\n";
    return 2;
  } catch (const ParameterError& e) {
    err << "kdlab: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "kdlab: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace kdlab
