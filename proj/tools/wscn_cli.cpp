#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "wscn/checkpoint.hpp"
#include "wscn/data.hpp"
#include "wscn/npz.hpp"
#include "wscn/quant.hpp"
#include "wscn/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace wscn;

namespace {

constexpr const char* kToolVersion = "wscn 1.0.0";
constexpr double kReferenceFps = 25.11;

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory '" + p.string() + "'");
}

struct Manifest {
  json doc;
  Clock::time_point start = Clock::now();

  Manifest(const std::string& command, std::uint64_t seed) {
    doc["command"] = command;
    doc["tool_version"] = kToolVersion;
    doc["seed"] = seed;
    doc["config"] = json::object();
    doc["inputs"] = json::object();
    doc["outputs"] = json::object();
    doc["timings"] = json::object();
  }
  void write(const fs::path& p) {
    doc["timings"]["total_seconds"] = elapsed(start);
    write_text(p, doc.dump(2) + "\n");
  }
};

// Datasets on disk: a .npz archive, or a directory of per-class
// subdirectories named "<index>_<name>" holding 52 x 52 .npy maps.

std::string class_dir_name(std::size_t c) {
  std::ostringstream os;
  os << std::setw(2) << std::setfill('0') << c << '_';
  for (char ch : class_name(c)) os << (ch == '+' ? '-' : ch);
  return os.str();
}

Dataset load_dataset(const fs::path& p) {
  if (fs::is_regular_file(p)) return load_dataset_archive(p.string());
  if (!fs::is_directory(p)) throw IoError("dataset '" + p.string() + "' not found");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  Dataset d;
  for (const auto& dir : dirs) {
    const std::string name = dir.filename().string();
    std::size_t c = 0;
    try {
      std::size_t used = 0;
      c = std::stoul(name, &used);
      if (used == 0 || c >= kNumClasses) throw std::out_of_range(name);
    } catch (const std::exception&) {
      throw DataError("'" + dir.string() + "' is not a '<class index>_<name>' directory");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".npy") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) d.push_back(load_wafer_npy(f.string()), c);
  }
  if (d.size() == 0) throw DataError("dataset '" + p.string() + "' holds no samples");
  return d;
}

// Models: float checkpoints and int8 exports share one loader.

struct LoadedModel {
  std::optional<WscnModel<float>> fp32;
  std::optional<QuantModel> int8;

  const WscnConfig& config() const { return fp32 ? fp32->config() : int8->config; }
  std::string format() const { return fp32 ? "fp32" : "int8"; }
  ForwardOutput<float> forward(const Tensor<float>& x) {
    return fp32 ? fp32->forward(x, Mode::Eval) : quantized_forward(*int8, x);
  }
};

LoadedModel load_model(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw IoError("model '" + p.string() + "' not found");
  const Checkpoint c = load_checkpoint(p.string());
  LoadedModel m;
  const auto meta = parse_kv(c.meta);
  if (meta.count("format") && meta.at("format") == "int8") m.int8 = quant_model_from_checkpoint(c);
  else m.fp32 = model_from_checkpoint(c);
  return m;
}

EvalResult evaluate_loaded(LoadedModel& m, const Dataset& d) {
  return evaluate_with([&](const Tensor<float>& x) { return m.forward(x); }, m.config(), d);
}

json eval_json(const EvalResult& r) {
  const auto& e = r.metrics;
  return {{"samples", e.truth.size()},     {"accuracy", e.classes.overall_accuracy},
          {"mcc", e.classes.macro_mcc},     {"macro_auc", e.auc.macro},
          {"dice", e.dice},                 {"iou", e.iou},
          {"loss", r.loss}};
}

Tensor<float> images_of(const Dataset& d, std::size_t size) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(d, idx, size).images;
}

std::string hardware_string() {
  std::ifstream f("/proc/cpuinfo");
  std::string line, model = "unknown cpu";
  while (std::getline(f, line))
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

void write_pgm(const fs::path& p, const float* mask, std::size_t size) {
  std::string out = "P5\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
  for (std::size_t i = 0; i < size * size; ++i) out.push_back(mask[i] >= 0.5f ? char(255) : char(0));
  write_text(p, out);
}

// Commands.

struct GenerateArgs {
  std::string out;
  std::size_t per_class = 10;
  std::uint64_t seed = 0;
  bool archive = false;
};

void cmd_generate(const GenerateArgs& a) {
  if (a.per_class == 0) throw CliError("--per-class must be at least 1");
  Manifest man("generate", a.seed);
  man.doc["config"] = {{"per_class", a.per_class}, {"export_archive", a.archive}};
  const fs::path out(a.out);
  ensure_dir(out);
  const auto t0 = Clock::now();
  const Dataset d = generate_dataset(a.per_class, a.seed);
  man.doc["timings"]["generate_seconds"] = elapsed(t0);
  if (a.archive) {
    save_dataset_archive(d, (out / "dataset.npz").string());
    man.doc["outputs"]["archive"] = (out / "dataset.npz").string();
  } else {
    for (std::size_t c = 0; c < kNumClasses; ++c) ensure_dir(out / class_dir_name(c));
    std::vector<std::size_t> seen(kNumClasses, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::ostringstream name;
      name << std::setw(5) << std::setfill('0') << seen[d.labels[i]]++ << ".npy";
      save_wafer_npy(d.maps[i], (out / class_dir_name(d.labels[i]) / name.str()).string());
    }
    man.doc["outputs"]["directory"] = out.string();
  }
  man.doc["outputs"]["samples"] = d.size();
  man.write(out / "manifest.json");
  std::cout << json{{"samples", d.size()}, {"out", out.string()}}.dump() << '\n';
}

struct TrainArgs {
  std::string data, out;
  TrainConfig cfg;
  std::size_t input_size = kNetworkSize;
  double val_fraction = 0.2;
};

void cmd_train(const TrainArgs& a) {
  const fs::path out(a.out);
  a.cfg.validate();
  if (!(a.val_fraction > 0 && a.val_fraction < 1)) throw CliError("--val-fraction must lie in (0,1)");
  const Dataset all = load_dataset(a.data);
  WscnConfig mc;
  mc.input_size = a.input_size;
  auto model = WscnModel<float>::build(mc, derive_seed(a.cfg.seed, 0x30de1));
  auto [train, val] = split(all, 1.0 - a.val_fraction, a.cfg.seed);
  ensure_dir(out);

  Manifest man("train", a.cfg.seed);
  man.doc["config"] = {{"phase1_epochs", a.cfg.phase1_epochs}, {"phase2_epochs", a.cfg.phase2_epochs},
                       {"batch", a.cfg.batch_size},            {"lr", a.cfg.lr},
                       {"phase2_lr", a.cfg.effective_phase2_lr()},
                       {"decay_factor", a.cfg.decay_factor},    {"patience", a.cfg.patience},
                       {"temperature", a.cfg.temperature},      {"val_fraction", a.val_fraction},
                       {"model", config_text(mc)}};
  man.doc["inputs"]["data"] = a.data;
  man.doc["inputs"]["train_samples"] = train.size();
  man.doc["inputs"]["val_samples"] = val.size();

  History history;
  auto log = [](const EpochRecord& r) {
    json j{{"phase", r.phase}, {"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss},
           {"val_loss", r.val_loss}, {"seconds", r.seconds}};
    if (r.val_acc) j["val_acc"] = *r.val_acc;
    if (r.val_dice) j["val_dice"] = *r.val_dice;
    std::cerr << j.dump() << '\n';
  };
  auto t0 = Clock::now();
  if (a.cfg.phase1_epochs > 0) {
    pretrain_encoder(model, train, val, a.cfg, &history, log);
    model.freeze_encoder();
  }
  man.doc["timings"]["phase1_seconds"] = elapsed(t0);
  t0 = Clock::now();
  JointResult jr = train_joint(model, train, val, a.cfg, &history, log);
  man.doc["timings"]["phase2_seconds"] = elapsed(t0);

  const KeyValues meta{{"epochs", std::to_string(history.epochs.size())}};
  save_checkpoint(make_checkpoint(model, nullptr, meta), (out / "final.wscn").string());
  if (jr.best) {
    KeyValues bm = meta;
    bm["best_epoch"] = std::to_string(jr.best_epoch);
    save_checkpoint(make_checkpoint(*jr.best, nullptr, bm), (out / "best.wscn").string());
  }
  std::ostringstream csv;
  history.write_csv(csv);
  write_text(out / "history.csv", csv.str());
  man.doc["outputs"] = {{"final", (out / "final.wscn").string()},
                        {"best", (out / "best.wscn").string()},
                        {"history", (out / "history.csv").string()},
                        {"best_epoch", jr.best_epoch},
                        {"best_val_loss", jr.best_val_loss}};
  man.write(out / "manifest.json");
  std::cout << json{{"best_epoch", jr.best_epoch}, {"best_val_loss", jr.best_val_loss},
                    {"epochs", history.epochs.size()}}.dump()
            << '\n';
}

void cmd_eval(const std::string& model_path, const std::string& data, const std::string& report) {
  LoadedModel m = load_model(model_path);
  const Dataset d = load_dataset(data);
  const auto t0 = Clock::now();
  const EvalResult r = evaluate_loaded(m, d);
  const fs::path out(report);
  ensure_dir(out);
  std::ostringstream csv, summary;
  write_class_csv(csv, r.metrics.classes);
  write_summary(summary, r.metrics);
  write_text(out / "classes.csv", csv.str());
  write_text(out / "summary.txt", summary.str());
  Manifest man("eval", 0);
  man.doc["config"] = {{"format", m.format()}};
  man.doc["inputs"] = {{"model", model_path}, {"data", data}};
  man.doc["outputs"] = eval_json(r);
  man.doc["timings"]["eval_seconds"] = elapsed(t0);
  man.write(out / "manifest.json");
  std::cout << eval_json(r).dump() << '\n';
}

void cmd_quantize(const std::string& model_path, const std::string& calib, const std::string& out_path) {
  LoadedModel m = load_model(model_path);
  if (!m.fp32) throw CliError("'" + model_path + "' is already an int8 export");
  const Dataset d = load_dataset(calib);
  const auto t0 = Clock::now();
  const QuantModel q = calibrate(*m.fp32, images_of(d, m.config().input_size));
  const Bytes fp32_bytes = serialize_checkpoint(make_checkpoint(*m.fp32));
  const Bytes int8_bytes = serialize_checkpoint(int8_checkpoint(q));
  const fs::path out(out_path);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_file(out.string(), int8_bytes);
  LoadedModel qm;
  qm.int8 = q;
  const EvalResult before = evaluate_loaded(m, d), after = evaluate_loaded(qm, d);
  json report{{"fp32_bytes", fp32_bytes.size()},
              {"int8_bytes", int8_bytes.size()},
              {"size_ratio", double(fp32_bytes.size()) / double(int8_bytes.size())},
              {"fp32_dice", before.metrics.dice},
              {"int8_dice", after.metrics.dice},
              {"fp32_accuracy", before.metrics.classes.overall_accuracy},
              {"int8_accuracy", after.metrics.classes.overall_accuracy},
              {"float_fallback_sites", q.float_fallback}};
  write_text(out.string() + ".report.json", report.dump(2) + "\n");
  Manifest man("quantize", 0);
  man.doc["inputs"] = {{"model", model_path}, {"calib", calib}, {"calib_samples", d.size()}};
  man.doc["outputs"] = {{"export", out.string()}, {"report", out.string() + ".report.json"}};
  man.doc["timings"]["quantize_seconds"] = elapsed(t0);
  man.write(out.string() + ".manifest.json");
  std::cout << report.dump() << '\n';
}

void cmd_infer(const std::string& model_path, const std::string& image, const std::string& out_dir) {
  LoadedModel m = load_model(model_path);
  const WaferMap map = load_wafer_npy(image);
  const std::size_t s = m.config().input_size;
  const auto t0 = Clock::now();
  Tensor<float> x({1, 1, s, s});
  rasterize<float>(map, s, x.ptr(), nullptr);
  const auto out = m.forward(x);
  const std::size_t classes = m.config().num_classes;
  const float* p = out.class_probs.ptr();
  const auto best = static_cast<std::size_t>(std::max_element(p, p + classes) - p);
  const fs::path dir(out_dir);
  ensure_dir(dir);
  write_pgm(dir / "mask.pgm", out.mask.ptr(), s);
  json probs = json::object();
  for (std::size_t c = 0; c < classes; ++c)
    probs[classes == kNumClasses ? class_name(c) : std::to_string(c)] = p[c];
  json pred{{"class_index", best},
            {"class", classes == kNumClasses ? class_display_name(best) : std::to_string(best)},
            {"probability", p[best]},
            {"probabilities", probs}};
  write_text(dir / "prediction.json", pred.dump(2) + "\n");
  Manifest man("infer", 0);
  man.doc["config"] = {{"format", m.format()}, {"input_size", s}};
  man.doc["inputs"] = {{"model", model_path}, {"image", image}};
  man.doc["outputs"] = {{"mask", (dir / "mask.pgm").string()},
                        {"prediction", (dir / "prediction.json").string()}};
  man.doc["timings"]["infer_seconds"] = elapsed(t0);
  man.write(dir / "manifest.json");
  std::cout << json{{"class_index", best}, {"class", pred["class"]}, {"probability", p[best]}}.dump()
            << '\n';
}

struct BenchArgs {
  std::string model, out;
  std::size_t n = 1000, repeats = 10;
  std::uint64_t seed = 0;
};

// Each pass resizes one raw 52 x 52 map and runs a batch-of-one forward.
void cmd_bench(const BenchArgs& a) {
  if (a.n == 0 || a.repeats == 0) throw CliError("--n and --repeats must be at least 1");
  LoadedModel m = load_model(a.model);
  const std::size_t s = m.config().input_size;
  std::vector<WaferMap> maps;
  for (std::size_t i = 0; i < std::min<std::size_t>(a.n, 64); ++i)
    maps.push_back(generate_wafer_map(class_spec(i % kNumClasses), sample_seed(a.seed, i % kNumClasses, i)));
  std::vector<double> fps;
  Tensor<float> x({1, 1, s, s});
  float sink = 0;
  for (std::size_t r = 0; r < a.repeats; ++r) {
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < a.n; ++i) {
      rasterize<float>(maps[i % maps.size()], s, x.ptr(), nullptr);
      sink += m.forward(x).class_probs[0];
    }
    fps.push_back(double(a.n) / elapsed(t0));
  }
  double mean = 0;
  for (double f : fps) mean += f;
  mean /= double(fps.size());
  json report{{"format", m.format()},
              {"images_per_repeat", a.n},
              {"repeats", a.repeats},
              {"batch_size", 1},
              {"fps_per_repeat", fps},
              {"mean_fps", mean},
              {"hardware", hardware_string()},
              {"reference_fps", kReferenceFps},
              {"reference_hardware", "Tesla P100 GPU"},
              {"checksum", sink}};
  if (!a.out.empty()) {
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    write_text(out, report.dump(2) + "\n");
    Manifest man("bench", a.seed);
    man.doc["config"] = {{"n", a.n}, {"repeats", a.repeats}};
    man.doc["inputs"] = {{"model", a.model}};
    man.doc["outputs"] = {{"report", out.string()}};
    man.write(out.string() + ".manifest.json");
  }
  std::cout << report.dump() << '\n';
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") + 1 - a);
}

// Expands "--config FILE" into "--key value" arguments for every key the
// command line does not already set. Unknown keys then fail parsing.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file '" + path + "'");
  auto given = [&](const std::string& key) {
    for (const auto& a : args)
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    return false;
  };
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config line " + std::to_string(n) + " is not key=value", 0);
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(n) + " has an empty key", 0);
    if (!given(key)) args.push_back("--" + key + "=" + value);
  }
  return args;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const TrainError*>(&e)) return "train";
  if (dynamic_cast<const QuantError*>(&e)) return "quant";
  if (dynamic_cast<const CliError*>(&e)) return "usage";
  return "internal";
}

int fail(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"command", command}, {"message", message}}.dump() << '\n';
  return kind == "usage" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Wafer map defect segmentation and classification"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  auto with_config = [](CLI::App* sub) {
    sub->add_option("--config", "key=value file; command-line flags take precedence");
  };

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Synthesize a labelled wafer-map dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--per-class", gen.per_class, "Samples per class")->capture_default_str();
  g->add_option("--seed", gen.seed, "Root seed")->capture_default_str();
  g->add_flag("--export-archive", gen.archive, "Write one .npz archive instead of per-class .npy files");
  with_config(g);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Contrastive pretraining followed by joint training");
  t->add_option("--data", tr.data, "Dataset archive or directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--phase1-epochs", tr.cfg.phase1_epochs)->capture_default_str();
  t->add_option("--phase2-epochs", tr.cfg.phase2_epochs)->capture_default_str();
  t->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
  t->add_option("--lr", tr.cfg.lr)->capture_default_str();
  t->add_option("--phase2-lr", tr.cfg.phase2_lr, "Phase-2 learning rate (defaults to --lr)");
  t->add_option("--patience", tr.cfg.patience)->capture_default_str();
  t->add_option("--decay", tr.cfg.decay_factor)->capture_default_str();
  t->add_option("--temperature", tr.cfg.temperature)->capture_default_str();
  t->add_option("--val-fraction", tr.val_fraction)->capture_default_str();
  t->add_option("--input-size", tr.input_size)->capture_default_str();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  with_config(t);

  std::string model, data, report, out, image;
  auto* e = app.add_subcommand("eval", "Per-class and segmentation metrics");
  e->add_option("--model", model)->required();
  e->add_option("--data", data)->required();
  e->add_option("--report", report, "Report directory")->required();
  with_config(e);

  auto* q = app.add_subcommand("quantize", "Full-integer INT8 export");
  q->add_option("--model", model)->required();
  q->add_option("--calib", data, "Representative dataset")->required();
  q->add_option("--out", out, "Export file")->required();
  with_config(q);

  auto* inf = app.add_subcommand("infer", "Classify and segment one wafer map");
  inf->add_option("--model", model)->required();
  inf->add_option("--image", image, "52 x 52 .npy wafer map")->required();
  inf->add_option("--out", out, "Output directory")->required();
  with_config(inf);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Single-image throughput");
  b->add_option("--model", bench.model)->required();
  b->add_option("--n", bench.n, "Images per repeat")->capture_default_str();
  b->add_option("--repeats", bench.repeats)->capture_default_str();
  b->add_option("--seed", bench.seed)->capture_default_str();
  b->add_option("--out", bench.out, "Report file");
  with_config(b);

  std::string command = "wscn";
  std::vector<std::string> args;
  try {
    args = merge_config(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& ex) {
    return fail(command, error_kind(ex), ex.what());
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return fail(command, "usage", ex.what());
  }

  try {
    if (*g) command = "generate", cmd_generate(gen);
    else if (*t) command = "train", cmd_train(tr);
    else if (*e) command = "eval", cmd_eval(model, data, report);
    else if (*q) command = "quantize", cmd_quantize(model, data, out);
    else if (*inf) command = "infer", cmd_infer(model, image, out);
    else if (*b) command = "bench", cmd_bench(bench);
  } catch (const std::exception& ex) {
    return fail(command, error_kind(ex), ex.what());
  }
  return 0;
}
