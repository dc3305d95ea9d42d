#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vitc/mask.hpp"
#include "vitc/pyramid.hpp"
#include "vitc/serialize.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

enum class HeadKind { mla, fpn };

std::string head_kind_name(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

struct HeadConfig {
  std::size_t in_channels = 64;
  std::size_t channels = 256;
  std::size_t classes = 5;
};

// Multi-level aggregation: 1x1 reduction per level, bilinear upsampling to
// the p4 grid, channel concatenation, 1x1 fusion + GELU, K-way 1x1
// classifier, bilinear upsampling to the requested output size.
class MlaHead {
 public:
  MlaHead(const HeadConfig& cfg, DType dtype, std::uint64_t seed);

  // Returns [out_h x out_w x K] logits.
  Tensor forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const;
  NamedTensors params() const;

 private:
  HeadConfig cfg_;
  std::array<Tensor, 4> reduce_w_, reduce_b_;  // p4, p8, p16, p32
  Tensor fuse_w_, fuse_b_;
  Tensor cls_w_, cls_b_;
};

// Semantic-FPN style: lateral 1x1 convolutions, top-down upsample-and-add,
// 3x3 refinement + GELU per level, sum at the p4 grid, K-way classifier,
// bilinear upsampling to the requested output size.
class FpnHead {
 public:
  FpnHead(const HeadConfig& cfg, DType dtype, std::uint64_t seed);

  Tensor forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const;
  NamedTensors params() const;

  // Lateral 1x1 kernels, index 0 = p4 ... 3 = p32.
  std::array<Tensor, 4>& lateral_weights() { return lateral_w_; }

 private:
  HeadConfig cfg_;
  std::array<Tensor, 4> lateral_w_, lateral_b_;
  std::array<Tensor, 4> refine_w_, refine_b_;
  Tensor cls_w_, cls_b_;
};

class DecoderHead {
 public:
  DecoderHead(HeadKind kind, const HeadConfig& cfg, DType dtype, std::uint64_t seed);

  HeadKind kind() const;
  Tensor forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const;
  NamedTensors params() const;

  std::variant<MlaHead, FpnHead>& impl() { return impl_; }

 private:
  std::variant<MlaHead, FpnHead> impl_;
};

// Mean over non-ignored pixels of -log softmax(logits)[target].
// logits: [H x W x K]. Throws if a label is >= K and not ignore_index, or if
// every pixel is ignored.
Tensor cross_entropy(const Tensor& logits, const Mask& target,
                     std::uint8_t ignore_index = kIgnoreIndex);

// Per-pixel argmax over the last axis of an [H x W x K] score map.
Mask argmax_mask(const Tensor& scores);

// Rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  std::uint64_t total() const;

  void accumulate(const Mask& pred, const Mask& target, std::uint8_t ignore_index = kIgnoreIndex);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix accumulate_confusion(ConfusionMatrix cm, const Mask& pred, const Mask& target,
                                     std::uint8_t ignore_index = kIgnoreIndex);

struct IouReport {
  // Empty when no class occurs in either prediction or ground truth.
  std::optional<double> mean;
  // Empty for classes absent from both; such classes are left out of the mean.
  std::vector<std::optional<double>> per_class;
};

IouReport miou(const ConfusionMatrix& cm);

// "class,iou" rows then a final "mean" row; absent classes print "nan".
void write_iou_csv(std::ostream& os, const IouReport& report);

}  // namespace vitc
