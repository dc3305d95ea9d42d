#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "vitc/config.hpp"
#include "vitc/data.hpp"
#include "vitc/gradcheck.hpp"
#include "vitc/serialize.hpp"
#include "vitc/train.hpp"

namespace fs = std::filesystem;
using namespace vitc;

namespace {

enum ExitCode { kOk = 0, kPrecondition = 1, kDiverged = 2, kCheckFailed = 3 };

// Config-file path plus one string slot per RunConfig key; flags given on the
// command line override the file.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "key = value configuration file");
    for (const auto& key : config_keys()) {
      app->add_option("--" + key.name, values[key.name], key.help)->group("Run settings");
    }
  }

  RunConfig resolve(const CLI::App* app, RunConfig cfg) const {
    if (!file.empty()) load_config_file(file, cfg);
    for (const auto& key : config_keys()) {
      if (app->count("--" + key.name) > 0) set_config_value(cfg, key.name, values.at(key.name));
    }
    return cfg;
  }
};

// Settings for a stored checkpoint: --config if given, else the model.cfg
// written next to it.
RunConfig checkpoint_config(const CLI::App* app, const ConfigFlags& flags, const fs::path& ckpt) {
  RunConfig cfg = make_run_config();
  const fs::path sidecar = ckpt.parent_path() / "model.cfg";
  if (flags.file.empty() && fs::exists(sidecar)) load_config_file(sidecar, cfg);
  return flags.resolve(app, cfg);
}

void print_iou(std::ostream& os, const char* label, const EvalResult& r) {
  os << label << " mIoU " << std::fixed << std::setprecision(4) << r.miou() << std::defaultfloat << "\n";
  write_iou_csv(os, r.iou);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer segmentation with class-token layer fusion"};
  app.require_subcommand(1);

  ConfigFlags train_flags, eval_flags, ablate_flags, inspect_flags;

  auto* train_cmd = app.add_subcommand("train", "Train one model and write its outputs");
  train_flags.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  std::string eval_ckpt;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model.ckpt written by train")->required();
  eval_flags.attach(eval_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every neck x head combination and print the table");
  ablate_flags.attach(ablate_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare backward() with central differences on a tiny model");
  GradCheckConfig gc;
  std::string gc_neck = "controller_cls", gc_head = "mla", gc_pyramid = "parameter_free";
  double gc_tolerance = 1e-4;
  grad_cmd->add_option("--samples", gc.samples, "parameter entries to check")->capture_default_str();
  grad_cmd->add_option("--seed", gc.seed)->capture_default_str();
  grad_cmd->add_option("--step", gc.step, "finite-difference half width")->capture_default_str();
  grad_cmd->add_option("--neck", gc_neck)->capture_default_str();
  grad_cmd->add_option("--head", gc_head)->capture_default_str();
  grad_cmd->add_option("--pyramid", gc_pyramid)->capture_default_str();
  grad_cmd->add_option("--tolerance", gc_tolerance, "maximum relative error")->capture_default_str();

  auto* inspect_cmd = app.add_subcommand("inspect-weights", "Print the layer-weight matrix for a held-out sample");
  std::string inspect_ckpt, inspect_out;
  std::size_t inspect_index = 0;
  inspect_cmd->add_option("--checkpoint", inspect_ckpt)->required();
  inspect_cmd->add_option("--sample", inspect_index, "held-out sample index")->capture_default_str();
  inspect_cmd->add_option("-o,--out", inspect_out, "CSV path (default: stdout)");
  inspect_flags.attach(inspect_cmd);

  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic samples as PPM images and PGM masks");
  std::uint64_t gen_seed = 0, gen_first = 0;
  std::size_t gen_count = 8, gen_classes = 5, gen_h = 64, gen_w = 64;
  std::string gen_out = "shapes";
  gen_cmd->add_option("--seed", gen_seed)->capture_default_str();
  gen_cmd->add_option("--count", gen_count)->capture_default_str();
  gen_cmd->add_option("--classes", gen_classes)->capture_default_str();
  gen_cmd->add_option("--image_h", gen_h)->capture_default_str();
  gen_cmd->add_option("--image_w", gen_w)->capture_default_str();
  gen_cmd->add_option("--first-index", gen_first)->capture_default_str();
  gen_cmd->add_option("-o,--out", gen_out)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      RunConfig cfg = train_flags.resolve(train_cmd, make_run_config());
      if (cfg.out_dir.empty()) cfg.out_dir = "run";
      TrainResult r = train(cfg, &std::cout);
      std::cout << "wrote " << cfg.out_dir << "\n";
    } else if (*eval_cmd) {
      RunConfig cfg = checkpoint_config(eval_cmd, eval_flags, eval_ckpt);
      cfg.validate();
      print_iou(std::cout, "SS", evaluate_checkpoint(cfg, eval_ckpt, {1.0}));
      print_iou(std::cout, "MS", evaluate_checkpoint(cfg, eval_ckpt, cfg.eval_scales));
    } else if (*ablate_cmd) {
      RunConfig cfg = ablate_flags.resolve(ablate_cmd, make_run_config());
      const std::string table = format_ablation(ablate(cfg, &std::cout));
      std::cout << "\n" << table;
      if (!cfg.out_dir.empty()) {
        std::ofstream(fs::path(cfg.out_dir) / "ablation.txt") << table;
      }
    } else if (*grad_cmd) {
      gc.neck = NeckPolicy::parse(gc_neck);
      gc.head = parse_head_kind(gc_head);
      gc.pyramid = parse_pyramid_mode(gc_pyramid);
      const GradCheckResult r = run_gradcheck(gc);
      const auto& worst = r.entries.at(r.worst);
      std::cout << "checked " << r.entries.size() << " entries in " << r.seconds << " s\n"
                << "max relative error " << std::scientific << r.max_rel_error << " at " << worst.param
                << "[" << worst.index << "] (analytic " << worst.analytic << ", numeric " << worst.numeric
                << ")\n";
      return r.max_rel_error < gc_tolerance ? kOk : kCheckFailed;
    } else if (*inspect_cmd) {
      RunConfig cfg = checkpoint_config(inspect_cmd, inspect_flags, inspect_ckpt);
      cfg.validate();
      SegModel model(cfg.model);
      model.load(load_checkpoint(inspect_ckpt));
      cfg.eval_size = std::max(cfg.eval_size, inspect_index + 1);
      const auto held = held_out_set(cfg);
      NoGradGuard guard;
      const Tensor image = held[inspect_index].image.to(cfg.model.dtype);
      const ForwardOutput out = model.forward(image);
      if (!out.m_hat) {
        std::cerr << "neck '" << cfg.model.neck.name() << "' has no layer-weight matrix\n";
        return kPrecondition;
      }
      if (inspect_out.empty()) {
        write_weight_csv(std::cout, *out.m_hat);
      } else {
        std::ofstream os(inspect_out);
        write_weight_csv(os, *out.m_hat);
      }
    } else if (*gen_cmd) {
      fs::create_directories(gen_out);
      const auto data = gen_shapes_dataset(gen_seed, gen_count, gen_classes, gen_h, gen_w, gen_first);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string stem = "shape" + std::to_string(gen_first + i);
        write_ppm(fs::path(gen_out) / (stem + ".ppm"), data[i].image);
        write_pgm(fs::path(gen_out) / (stem + ".pgm"), data[i].mask);
      }
      std::cout << "wrote " << data.size() << " samples to " << gen_out << "\n";
    }
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrecondition;
  }
  return kOk;
}
