#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitc/config.hpp"
#include "vitc/data.hpp"
#include "vitc/heads.hpp"
#include "vitc/model.hpp"

namespace vitc {

// Held-out samples start at this index of the data_seed stream.
inline constexpr std::uint64_t kHeldOutFirstIndex = std::uint64_t{1} << 40;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricsReport {
  std::vector<double> losses;  // mean batch loss per iteration
  double ss_miou = 0.0;
  double ms_miou = 0.0;
  IouReport ss;
  IouReport ms;
  ParamCounts params;
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::optional<Tensor> m_hat;  // on the first held-out sample, controller necks only
};

struct TrainResult {
  MetricsReport report;
  SegModel model;
};

// Held-out split of cfg's dataset.
std::vector<SegSample> held_out_set(const RunConfig& cfg);

// Writes progress lines to log when non-null and cfg.log_every > 0. When
// cfg.out_dir is set, writes model.ckpt, model.cfg, metrics.csv, iou_ss.csv,
// iou_ms.csv, m_hat.csv and a few held-out images with their masks.
TrainResult train(const RunConfig& cfg, std::ostream* log = nullptr);

// ceil(extent * scale / patch) * patch, at least one patch.
std::size_t scaled_extent(std::size_t extent, double scale, std::size_t patch);

// Softmax probabilities [H x W x K] at the image's own extents, averaged over
// the scales. Each scale resizes the image to patch-multiple extents, runs the
// model and resizes the logits back before the softmax.
Tensor predict_probs(const SegModel& model, const Tensor& image, const std::vector<double>& scales);

struct EvalResult {
  ConfusionMatrix confusion;
  IouReport iou;
  double miou() const { return iou.mean.value_or(0.0); }
};

EvalResult evaluate(const SegModel& model, const std::vector<SegSample>& data,
                    const std::vector<double>& scales);

// Builds the model described by cfg, loads the checkpoint and evaluates on the
// held-out split.
EvalResult evaluate_checkpoint(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                               const std::vector<double>& scales);

// Multiply-accumulate counts for an h x w input.
struct FlopCounts {
  std::uint64_t encoder = 0;
  std::uint64_t encoder_attention = 0;  // token-quadratic part of encoder
  std::uint64_t neck = 0;
  std::uint64_t pyramid = 0;
  std::uint64_t head = 0;
  std::uint64_t total = 0;
};

FlopCounts count_flops(const ModelConfig& cfg, std::size_t h, std::size_t w);

void write_metrics_csv(std::ostream& os, const MetricsReport& report);

struct AblationRow {
  NeckPolicy neck;
  HeadKind head;
  double ss = 0.0;
  double ms = 0.0;
  MetricsReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

// {last_layer, controller_avgpool, controller_cls} x {mla, fpn}, all other
// settings from base.
AblationTable ablate(const RunConfig& base, std::ostream* log = nullptr);

// Fixed-width table followed by reference figures.
std::string format_ablation(const AblationTable& table);

}  // namespace vitc
