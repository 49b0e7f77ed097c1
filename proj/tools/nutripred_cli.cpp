// nutripred: train, evaluate, predict, synth and inspect from the command line.
//
// Exit codes: 0 ok, 1 configuration/usage error, 2 data error, 3 training diverged.
// Every failure prints exactly one line to stderr: "nutripred: error[<kind>]: <message>".

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nutripred/nutripred.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace nutripred;

namespace {

constexpr const char* kDataDirEnv = "NUTRIPRED_DATA_DIR";

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::argument:
    case ErrorKind::config:
    case ErrorKind::shape:
      return 1;
    case ErrorKind::divergence:
      return 3;
    default:
      return 2;
  }
}

int fail(std::string_view kind, std::string message, int code) {
  for (char& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "nutripred: error[" << kind << "]: " << message << std::endl;
  return code;
}

fs::path data_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative() && !fs::exists(path)) {
    if (const char* dir = std::getenv(kDataDirEnv); dir && *dir) return fs::path(dir) / path;
  }
  return path;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write " + tmp.string());
    out << text;
    if (!out) throw FileError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

BackboneKind parse_backbone(const std::string& s) {
  if (s == "vit") return BackboneKind::vit;
  if (s == "mae" || s == "mae_encoder") return BackboneKind::mae_encoder;
  if (s == "conv-residual" || s == "conv_residual") return BackboneKind::conv_residual;
  if (s == "tiny" || s == "tiny_test") return BackboneKind::tiny_test;
  throw ConfigError("unknown backbone '" + s + "' (expected vit, mae, conv-residual or tiny)");
}

HeadKind parse_head(const std::string& s) {
  if (s == "full") return HeadKind::full;
  if (s == "compressed") return HeadKind::compressed;
  throw ConfigError("unknown head '" + s + "' (expected full or compressed)");
}

std::string model_label(const ModelConfig& c) {
  return json(c.backbone.kind).get<std::string>() + " " + json(c.head.kind).get<std::string>();
}

std::string join_reals(std::span<const double> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_real(v[i]);
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

/// Applies the stored split rule when the manifest carries no assignment of its own.
DatasetManifest with_split(DatasetManifest m, const TrainConfig& tc) {
  if (!m.split_assignment) m = split_dataset(std::move(m), tc.split_fractions, tc.seed);
  return m;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config_file, manifest, out, resume, backbone, head, pretrained;
  std::optional<int> image_size, feature_dim, task_width, max_epochs, patience, batch_size;
  std::optional<std::vector<int>> shared_widths;
  std::optional<double> lr, epsilon, rms_discount, momentum, weight_decay;
  std::optional<std::vector<double>> split;
  std::optional<std::uint64_t> seed;
  bool freeze_backbone = false;
  bool no_timing = false;
  bool quiet = false;
  std::size_t workers = 1;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* cmd = app.add_subcommand("train", "Train a model on a manifest");
  cmd->add_option("--config", a.config_file, "JSON file with {\"model\": ..., \"train\": ...}; flags override it");
  cmd->add_option("--manifest", a.manifest, "Manifest CSV (relative paths also searched under $" + std::string(kDataDirEnv) + ")");
  cmd->add_option("--out", a.out, "Output directory (default: run)");
  cmd->add_option("--resume", a.resume, "Continue from a last.ckpt");
  cmd->add_option("--backbone", a.backbone, "vit | mae | conv-residual | tiny");
  cmd->add_option("--head", a.head, "full | compressed");
  cmd->add_option("--pretrained", a.pretrained, "Backbone weights file");
  cmd->add_option("--image-size", a.image_size, "Input resolution");
  cmd->add_option("--feature-dim", a.feature_dim, "Backbone feature width");
  cmd->add_option("--shared-widths", a.shared_widths, "Shared layer widths (2 for full, 1 for compressed)")->delimiter(',');
  cmd->add_option("--task-width", a.task_width, "Per-task hidden width (full head)");
  cmd->add_option("--lr", a.lr, "Learning rate");
  cmd->add_option("--epsilon", a.epsilon, "RMSProp epsilon");
  cmd->add_option("--rms-discount", a.rms_discount, "RMSProp squared-gradient discount");
  cmd->add_option("--momentum", a.momentum, "Momentum");
  cmd->add_option("--weight-decay", a.weight_decay, "L2 coefficient added to gradients");
  cmd->add_option("--batch-size", a.batch_size, "Batch size");
  cmd->add_option("--max-epochs", a.max_epochs, "Epoch budget");
  cmd->add_option("--patience", a.patience, "Early-stopping patience in epochs");
  cmd->add_option("--seed", a.seed, "Seed for initialisation, split and shuffling");
  cmd->add_option("--split", a.split, "Train,val,test fractions")->delimiter(',');
  cmd->add_flag("--freeze-backbone", a.freeze_backbone, "Train the head only");
  cmd->add_flag("--no-timing", a.no_timing, "Write null instead of wall-clock seconds in the history");
  cmd->add_option("--workers", a.workers, "Image decoding threads");
  cmd->add_flag("--quiet", a.quiet, "Do not echo per-epoch log lines");
}

int run_train(const TrainArgs& a) {
  json file = json::object();
  if (a.config_file) {
    try {
      file = json::parse(read_text(*a.config_file));
    } catch (const json::exception& e) {
      throw ConfigError(*a.config_file + ": " + e.what());
    }
  }
  ModelConfig mc;
  TrainConfig tc;
  try {
    if (file.contains("model")) mc = file.at("model").get<ModelConfig>();
    if (file.contains("train")) tc = file.at("train").get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(*a.config_file + ": " + e.what());
  }
  std::optional<std::string> manifest_arg = a.manifest;
  if (!manifest_arg && file.contains("manifest")) manifest_arg = file.at("manifest").get<std::string>();
  std::string out_dir = a.out.value_or(file.value("out", std::string("run")));
  if (!manifest_arg) throw ConfigError("--manifest is required");

  if (a.backbone) {
    const BackboneKind kind = parse_backbone(*a.backbone);
    if (kind != mc.backbone.kind || !file.contains("model")) mc.backbone = BackboneConfig::defaults(kind);
  }
  if (a.head) {
    const HeadKind kind = parse_head(*a.head);
    if (kind != mc.head.kind || !file.contains("model")) mc.head = HeadTopology::defaults(kind);
  }
  if (a.pretrained) mc.backbone.pretrained_weights = *a.pretrained;
  if (a.image_size) mc.backbone.image_size = *a.image_size;
  if (a.feature_dim) mc.backbone.feature_dim = *a.feature_dim;
  if (a.shared_widths) mc.head.shared_widths = *a.shared_widths;
  if (a.task_width) mc.head.task_width = *a.task_width;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.epsilon) tc.epsilon = *a.epsilon;
  if (a.rms_discount) tc.rms_discount = *a.rms_discount;
  if (a.momentum) tc.momentum = *a.momentum;
  if (a.weight_decay) tc.weight_decay = *a.weight_decay;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.max_epochs) tc.max_epochs = *a.max_epochs;
  if (a.patience) tc.early_stop_patience = *a.patience;
  if (a.seed) {
    tc.seed = *a.seed;
    mc.seed = *a.seed;
  }
  if (a.freeze_backbone) tc.freeze_backbone = true;
  if (a.split) {
    if (a.split->size() != 3) throw ConfigError("--split needs three comma-separated fractions");
    std::copy(a.split->begin(), a.split->end(), tc.split_fractions.begin());
  }
  mc.validate();
  tc.validate();

  const fs::path manifest_path = data_path(*manifest_arg);
  const DatasetManifest manifest = with_split(load_manifest(manifest_path), tc);
  const auto sizes = std::array{manifest.indices(Split::train).size(), manifest.indices(Split::val).size(),
                                manifest.indices(Split::test).size()};

  std::cout << "config: backbone=" << json(mc.backbone.kind).get<std::string>()
            << " head=" << json(mc.head.kind).get<std::string>() << " image_size=" << mc.backbone.image_size
            << " feature_dim=" << mc.backbone.feature_dim << " shared_widths=" << join_ints(mc.head.shared_widths)
            << " task_width=" << mc.head.task_width << " lr=" << format_real(tc.learning_rate)
            << " rms_discount=" << format_real(tc.rms_discount) << " epsilon=" << format_real(tc.epsilon)
            << " momentum=" << format_real(tc.momentum) << " weight_decay=" << format_real(tc.weight_decay)
            << " batch=" << tc.batch_size << " max_epochs=" << tc.max_epochs
            << " patience=" << tc.early_stop_patience << " seed=" << tc.seed
            << " split=" << join_reals(tc.split_fractions) << " freeze_backbone=" << (tc.freeze_backbone ? 1 : 0)
            << "\n";
  std::cout << "data: manifest=" << manifest_path.string() << " samples=" << manifest.size()
            << " train=" << sizes[0] << " val=" << sizes[1] << " test=" << sizes[2] << "\n";

  std::optional<Checkpoint> resume;
  if (a.resume) resume = load_checkpoint(*a.resume);

  const fs::path out(out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw FileError("cannot create " + out.string() + ": " + ec.message());
  write_text(out / "config.json",
             json{{"model", mc}, {"train", tc}, {"manifest", manifest_path.string()}, {"out", out_dir}}.dump(2) + "\n");

  auto model = build_model<float>(mc);
  FitOptions options;
  options.output_dir = out;
  options.log = a.quiet ? nullptr : &std::cout;
  options.record_timing = !a.no_timing;
  options.workers = a.workers;
  options.resume = resume ? &*resume : nullptr;
  options.provenance = {{"manifest", manifest_path.string()},
                        {"samples", manifest.size()},
                        {"split_sizes", sizes}};
  const FitResult result = fit(*model, manifest, tc, options);

  const Split final_split = sizes[2] > 0 ? Split::test : Split::val;
  const EvalReport report = evaluate(*model, manifest, final_split, static_cast<std::size_t>(tc.batch_size),
                                     model_label(mc) + " " + std::string(to_string(final_split)), a.workers);
  write_text(out / "report.json", json(report).dump(2) + "\n");
  std::cout << "done: epochs=" << result.history.size() << " best_epoch=" << result.best.best_epoch
            << " best_val_combined_mae=" << format_real(result.best.best_val_combined_mae) << " "
            << to_string(final_split) << "_combined_mae=" << format_real(report.combined_mae)
            << (result.stopped_early ? " (stopped early)" : "") << "\n";
  return 0;
}

// --- evaluate ----------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::optional<std::string> manifest;
  std::string split = "test";
  std::string format = "text";
  std::vector<std::string> labels;
  std::size_t batch_size = 32;
  std::size_t workers = 1;
};

void add_evaluate(CLI::App& app, EvalArgs& a) {
  auto* cmd = app.add_subcommand("evaluate", "Per-task MAE of one or more checkpoints on a split");
  cmd->add_option("--checkpoint", a.checkpoints, "Checkpoint file (repeat to compare models)")->required();
  cmd->add_option("--manifest", a.manifest, "Manifest CSV")->required();
  cmd->add_option("--split", a.split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  cmd->add_option("--format", a.format, "text | csv | markdown | json")
      ->check(CLI::IsMember({"text", "csv", "markdown", "json"}));
  cmd->add_option("--label", a.labels, "Row label per checkpoint");
  cmd->add_option("--batch-size", a.batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--workers", a.workers, "Image decoding threads");
}

int run_evaluate(const EvalArgs& a) {
  if (!a.labels.empty() && a.labels.size() != a.checkpoints.size()) {
    throw ConfigError("--label must be given once per --checkpoint");
  }
  const fs::path manifest_path = data_path(*a.manifest);
  const DatasetManifest raw = load_manifest(manifest_path);
  std::vector<EvalReport> reports;
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoints[i]);
    const auto model = restore_model<float>(ckpt);
    const std::string label = a.labels.empty() ? model_label(ckpt.model_config) : a.labels[i];
    if (a.split == "all") {
      ImageLoader<float> loader(raw, static_cast<int>(model->image_size()), a.workers, false);
      reports.push_back(evaluate(*model, loader, raw.all_indices(), a.batch_size, label));
    } else {
      const DatasetManifest m = with_split(raw, ckpt.train_config);
      reports.push_back(evaluate(*model, m, parse_split(a.split), a.batch_size, label, a.workers));
    }
  }
  if (a.format == "json") {
    std::cout << (reports.size() == 1 ? json(reports[0]) : json(reports)).dump(2) << "\n";
  } else {
    const TableFormat f =
        a.format == "csv" ? TableFormat::csv : a.format == "markdown" ? TableFormat::markdown : TableFormat::text;
    std::cout << render_table(reports, f);
  }
  return 0;
}

// --- predict -----------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::string format = "text";
};

void add_predict(CLI::App& app, PredictArgs& a) {
  auto* cmd = app.add_subcommand("predict", "Nutrient estimate for one image");
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--image", a.image, "PNG or JPEG image")->required();
  cmd->add_option("--format", a.format, "text | json")->check(CLI::IsMember({"text", "json"}));
}

int run_predict(const PredictArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const auto model = restore_model<float>(ckpt);
  const int r = static_cast<int>(model->image_size());
  Tensor<float> pixels = load_image<float>(a.image, r).pixels;
  pixels.reshape({1, 3, static_cast<std::size_t>(r), static_cast<std::size_t>(r)});
  const Tensor<float> pred = model->predict(pixels);
  if (a.format == "json") {
    json out = json::object();
    for (std::size_t k = 0; k < kTaskCount; ++k) out[std::string(kTaskNames[k])] = static_cast<double>(pred[k]);
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-14s %10.2f %s\n", (std::string(kTaskNames[k]) + ":").c_str(),
                  static_cast<double>(pred[k]), std::string(kTaskUnits[k]).c_str());
    std::cout << line;
  }
  return 0;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthSpec spec;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* cmd = app.add_subcommand("synth", "Write a synthetic dataset with known labels");
  cmd->add_option("--out", a.out, "Output directory")->required();
  cmd->add_option("--count", a.spec.count, "Number of images");
  cmd->add_option("--resolution", a.spec.resolution, "Image side length");
  cmd->add_option("--seed", a.spec.seed, "Generator seed");
}

int run_synth(const SynthArgs& a) {
  const DatasetManifest m = generate(a.spec, a.out);
  std::cout << "wrote " << m.size() << " images and " << (fs::path(a.out) / "manifest.csv").string() << "\n";
  return 0;
}

// --- inspect -----------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::string format = "text";
};

void add_inspect(CLI::App& app, InspectArgs& a) {
  auto* cmd = app.add_subcommand("inspect", "Show a checkpoint's configuration and parameter counts");
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--format", a.format, "text | json")->check(CLI::IsMember({"text", "json"}));
}

int run_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const auto model = restore_model<float>(ckpt);
  const json counts{{"all", model->parameter_count(ParamScope::all)},
                    {"head", model->parameter_count(ParamScope::head_only)},
                    {"backbone", model->parameter_count(ParamScope::backbone_only)}};
  const json training{{"epoch", ckpt.epoch},
                      {"best_epoch", ckpt.best_epoch},
                      {"best_val_combined_mae", std::isfinite(ckpt.best_val_combined_mae)
                                                    ? json(ckpt.best_val_combined_mae)
                                                    : json(nullptr)},
                      {"epochs_recorded", ckpt.history.size()},
                      {"train_config", ckpt.train_config},
                      {"provenance", ckpt.provenance}};
  if (a.format == "json") {
    std::cout << json{{"model_config", ckpt.model_config}, {"parameters", counts}, {"training", training}}.dump(2)
              << "\n";
    return 0;
  }
  std::cout << "model_config: " << json(ckpt.model_config).dump() << "\n";
  std::cout << "parameters.all: " << counts["all"] << "\n";
  std::cout << "parameters.head: " << counts["head"] << "\n";
  std::cout << "parameters.backbone: " << counts["backbone"] << "\n";
  std::cout << "training: " << training.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nutrient estimation from food images"};
  app.name("nutripred");
  app.require_subcommand(1);
  TrainArgs train;
  EvalArgs eval;
  PredictArgs predict;
  SynthArgs synth;
  InspectArgs inspect;
  add_train(app, train);
  add_evaluate(app, eval);
  add_predict(app, predict);
  add_synth(app, synth);
  add_inspect(app, inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    return fail("usage", e.what(), 1);
  }

  try {
    if (app.got_subcommand("train")) return run_train(train);
    if (app.got_subcommand("evaluate")) return run_evaluate(eval);
    if (app.got_subcommand("predict")) return run_predict(predict);
    if (app.got_subcommand("synth")) return run_synth(synth);
    if (app.got_subcommand("inspect")) return run_inspect(inspect);
  } catch (const Error& e) {
    return fail(to_string(e.kind()), e.what(), exit_code(e.kind()));
  } catch (const fs::filesystem_error& e) {
    return fail("file", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 1;
}
