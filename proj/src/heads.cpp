#include "vitc/heads.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "vitc/ops.hpp"
#include "vitc/params.hpp"

namespace vitc {

namespace {

constexpr std::array<const char*, 4> kLevels{"p4", "p8", "p16", "p32"};

Tensor conv_weight(std::size_t fan_in, std::size_t out, std::mt19937_64& rng, DType dtype) {
  return trunc_normal({fan_in, out}, std::sqrt(2.0 / static_cast<double>(fan_in)), rng, dtype);
}

Tensor zero_bias(std::size_t n, DType dtype) {
  return Tensor::zeros({n}, dtype).set_requires_grad(true);
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t h = x.dim(0), wd = x.dim(1);
  return reshape(linear(reshape(x, {h * wd, x.dim(2)}), w, b), {h, wd, w.dim(1)});
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  return reshape(linear(im2col3x3(x), w, b), {x.dim(0), x.dim(1), w.dim(1)});
}

Tensor resize_to(const Tensor& x, const Tensor& like) {
  return resample_bilinear(x, like.dim(0), like.dim(1));
}

std::array<Tensor, 4> levels(const FeaturePyramid& p) { return {p.p4, p.p8, p.p16, p.p32}; }

void check_head_config(const HeadConfig& cfg) {
  if (cfg.classes < 1) throw std::invalid_argument("head: need at least one class");
  if (cfg.channels < 1 || cfg.in_channels < 1) throw std::invalid_argument("head: zero channels");
}

void check_pyramid(const FeaturePyramid& p, std::size_t channels) {
  for (const auto& l : levels(p)) {
    if (!l.defined() || l.rank() != 3 || l.dim(2) != channels) {
      throw ShapeError("head: pyramid level does not carry " + std::to_string(channels) +
                       " channels");
    }
  }
}

}  // namespace

std::string head_kind_name(HeadKind kind) { return kind == HeadKind::mla ? "mla" : "fpn"; }

HeadKind parse_head_kind(const std::string& text) {
  if (text == "mla") return HeadKind::mla;
  if (text == "fpn") return HeadKind::fpn;
  throw std::invalid_argument("unknown head '" + text + "'");
}

// ---------------------------------------------------------------------------

MlaHead::MlaHead(const HeadConfig& cfg, DType dtype, std::uint64_t seed) : cfg_(cfg) {
  check_head_config(cfg_);
  auto rng = component_rng(seed, "head.mla");
  const std::size_t c = cfg_.in_channels, d = cfg_.channels;
  for (std::size_t l = 0; l < 4; ++l) {
    reduce_w_[l] = conv_weight(c, d, rng, dtype);
    reduce_b_[l] = zero_bias(d, dtype);
  }
  fuse_w_ = conv_weight(4 * d, d, rng, dtype);
  fuse_b_ = zero_bias(d, dtype);
  cls_w_ = trunc_normal({d, cfg_.classes}, 0.01, rng, dtype);
  cls_b_ = zero_bias(cfg_.classes, dtype);
}

Tensor MlaHead::forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const {
  check_pyramid(pyr, cfg_.in_channels);
  const auto lv = levels(pyr);
  std::vector<Tensor> branches;
  for (std::size_t l = 0; l < 4; ++l) {
    branches.push_back(resize_to(conv1x1(lv[l], reduce_w_[l], reduce_b_[l]), pyr.p4));
  }
  Tensor x = gelu(conv1x1(concat_last(branches), fuse_w_, fuse_b_));
  Tensor logits = resample_bilinear(conv1x1(x, cls_w_, cls_b_), out_h, out_w);
  ensure_finite(logits, "mla head logits");
  return logits;
}

NamedTensors MlaHead::params() const {
  NamedTensors out;
  for (std::size_t l = 0; l < 4; ++l) {
    out.emplace_back(std::string("head.mla.reduce.") + kLevels[l] + ".weight", reduce_w_[l]);
    out.emplace_back(std::string("head.mla.reduce.") + kLevels[l] + ".bias", reduce_b_[l]);
  }
  out.emplace_back("head.mla.fuse.weight", fuse_w_);
  out.emplace_back("head.mla.fuse.bias", fuse_b_);
  out.emplace_back("head.mla.classifier.weight", cls_w_);
  out.emplace_back("head.mla.classifier.bias", cls_b_);
  return out;
}

// ---------------------------------------------------------------------------

FpnHead::FpnHead(const HeadConfig& cfg, DType dtype, std::uint64_t seed) : cfg_(cfg) {
  check_head_config(cfg_);
  auto rng = component_rng(seed, "head.fpn");
  const std::size_t c = cfg_.in_channels, d = cfg_.channels;
  for (std::size_t l = 0; l < 4; ++l) {
    lateral_w_[l] = conv_weight(c, d, rng, dtype);
    lateral_b_[l] = zero_bias(d, dtype);
  }
  for (std::size_t l = 0; l < 4; ++l) {
    refine_w_[l] = conv_weight(9 * d, d, rng, dtype);
    refine_b_[l] = zero_bias(d, dtype);
  }
  cls_w_ = trunc_normal({d, cfg_.classes}, 0.01, rng, dtype);
  cls_b_ = zero_bias(cfg_.classes, dtype);
}

Tensor FpnHead::forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const {
  check_pyramid(pyr, cfg_.in_channels);
  const auto lv = levels(pyr);
  std::array<Tensor, 4> td;
  td[3] = conv1x1(lv[3], lateral_w_[3], lateral_b_[3]);
  for (std::size_t l = 3; l-- > 0;) {
    td[l] = add(conv1x1(lv[l], lateral_w_[l], lateral_b_[l]), resize_to(td[l + 1], lv[l]));
  }
  Tensor acc = gelu(conv3x3(td[0], refine_w_[0], refine_b_[0]));
  for (std::size_t l = 1; l < 4; ++l) {
    acc = add(acc, resize_to(gelu(conv3x3(td[l], refine_w_[l], refine_b_[l])), pyr.p4));
  }
  Tensor logits = resample_bilinear(conv1x1(acc, cls_w_, cls_b_), out_h, out_w);
  ensure_finite(logits, "fpn head logits");
  return logits;
}

NamedTensors FpnHead::params() const {
  NamedTensors out;
  for (std::size_t l = 0; l < 4; ++l) {
    out.emplace_back(std::string("head.fpn.lateral.") + kLevels[l] + ".weight", lateral_w_[l]);
    out.emplace_back(std::string("head.fpn.lateral.") + kLevels[l] + ".bias", lateral_b_[l]);
  }
  for (std::size_t l = 0; l < 4; ++l) {
    out.emplace_back(std::string("head.fpn.refine.") + kLevels[l] + ".weight", refine_w_[l]);
    out.emplace_back(std::string("head.fpn.refine.") + kLevels[l] + ".bias", refine_b_[l]);
  }
  out.emplace_back("head.fpn.classifier.weight", cls_w_);
  out.emplace_back("head.fpn.classifier.bias", cls_b_);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::variant<MlaHead, FpnHead> make_head(HeadKind kind, const HeadConfig& cfg, DType dtype,
                                         std::uint64_t seed) {
  if (kind == HeadKind::mla) return MlaHead(cfg, dtype, seed);
  return FpnHead(cfg, dtype, seed);
}

}  // namespace

DecoderHead::DecoderHead(HeadKind kind, const HeadConfig& cfg, DType dtype, std::uint64_t seed)
    : impl_(make_head(kind, cfg, dtype, seed)) {}

HeadKind DecoderHead::kind() const {
  return std::holds_alternative<MlaHead>(impl_) ? HeadKind::mla : HeadKind::fpn;
}

Tensor DecoderHead::forward(const FeaturePyramid& pyr, std::size_t out_h, std::size_t out_w) const {
  return std::visit([&](const auto& h) { return h.forward(pyr, out_h, out_w); }, impl_);
}

NamedTensors DecoderHead::params() const {
  return std::visit([](const auto& h) { return h.params(); }, impl_);
}

// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const Mask& target, std::uint8_t ignore_index) {
  if (logits.rank() != 3) throw ShapeError("cross_entropy: expected H x W x K logits");
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  if (target.height != h || target.width != w) {
    throw ShapeError("cross_entropy: mask extents differ from logits");
  }
  std::size_t valid = 0;
  for (auto t : target.labels) {
    if (t == ignore_index) continue;
    if (t >= k) {
      throw std::out_of_range("cross_entropy: class index " + std::to_string(t) + " >= " +
                              std::to_string(k));
    }
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("cross_entropy: every pixel is ignored");

  return dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.values<T>();
    auto probs = std::make_shared<std::vector<T>>(x.size());
    double total = 0.0;
    for (std::size_t p = 0; p < h * w; ++p) {
      const T* row = x.data() + p * k;
      T* pr = probs->data() + p * k;
      T mx = row[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T z = 0;
      for (std::size_t j = 0; j < k; ++j) {
        pr[j] = std::exp(row[j] - mx);
        z += pr[j];
      }
      for (std::size_t j = 0; j < k; ++j) pr[j] /= z;
      const auto t = target.labels[p];
      if (t == ignore_index) continue;
      total += static_cast<double>(mx - row[t]) + std::log(static_cast<double>(z));
    }
    const double loss = total / static_cast<double>(valid);
    return make_result(
        {}, std::vector<T>{static_cast<T>(loss)}, {logits}, "cross_entropy",
        [probs, labels = target.labels, ignore_index, valid, k,
         shape = logits.shape()](const Tensor&, const Tensor& g) {
          const T scale_factor = static_cast<T>(g.item() / static_cast<double>(valid));
          std::vector<T> gx(probs->size(), T(0));
          for (std::size_t p = 0; p < labels.size(); ++p) {
            const auto t = labels[p];
            if (t == ignore_index) continue;
            for (std::size_t j = 0; j < k; ++j) gx[p * k + j] = (*probs)[p * k + j] * scale_factor;
            gx[p * k + t] -= scale_factor;
          }
          return std::vector<Tensor>{Tensor::from_vector(shape, std::move(gx))};
        });
  });
}

Mask argmax_mask(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("argmax_mask: expected H x W x K scores");
  const std::size_t h = scores.dim(0), w = scores.dim(1), k = scores.dim(2);
  if (k > kIgnoreIndex) throw std::invalid_argument("argmax_mask: too many classes");
  Mask m(h, w);
  dispatch(scores.dtype(), [&]<class T>() {
    auto v = scores.values<T>();
    for (std::size_t p = 0; p < h * w; ++p) {
      const T* row = v.data() + p * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
      }
      m.labels[p] = static_cast<std::uint8_t>(best);
    }
  });
  return m;
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("ConfusionMatrix: zero classes");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

void ConfusionMatrix::accumulate(const Mask& pred, const Mask& target, std::uint8_t ignore_index) {
  if (pred.height != target.height || pred.width != target.width || pred.size() != target.size()) {
    throw ShapeError("accumulate_confusion: mask shapes differ");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto t = target.labels[i];
    if (t == ignore_index) continue;
    const auto p = pred.labels[i];
    if (t >= classes_ || p >= classes_) {
      throw std::out_of_range("accumulate_confusion: class index out of range");
    }
    ++counts_[t * classes_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count differs");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix accumulate_confusion(ConfusionMatrix cm, const Mask& pred, const Mask& target,
                                     std::uint8_t ignore_index) {
  cm.accumulate(pred, target, ignore_index);
  return cm;
}

IouReport miou(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  IouReport r;
  r.per_class.resize(k);
  long double acc = 0.0L;  // extended sum keeps the mean correctly rounded for small K
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t inter = cm.at(c, c);
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) continue;
    const long double iou = static_cast<long double>(inter) / static_cast<long double>(uni);
    r.per_class[c] = static_cast<double>(iou);
    acc += iou;
    ++present;
  }
  if (present > 0) r.mean = static_cast<double>(acc / static_cast<long double>(present));
  return r;
}

void write_iou_csv(std::ostream& os, const IouReport& report) {
  os << "class,iou\n";
  auto cell = [&](const std::optional<double>& v) {
    if (v) {
      os << *v;
    } else {
      os << "nan";
    }
  };
  const auto old = os.precision(9);
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    os << c << ',';
    cell(report.per_class[c]);
    os << '\n';
  }
  os << "mean,";
  cell(report.mean);
  os << '\n';
  os.precision(old);
}

}  // namespace vitc
