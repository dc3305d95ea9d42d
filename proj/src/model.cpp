#include "vitc/model.hpp"

#include "vitc/params.hpp"

namespace vitc {

SegModel::SegModel(const ModelConfig& cfg)
    : cfg_(cfg),
      encoder_(cfg.vit, cfg.dtype),
      pyramid_(cfg.pyramid, cfg.vit.embed_dim, cfg.dtype, cfg.vit.seed),
      head_(cfg.head, HeadConfig{cfg.vit.embed_dim, cfg.head_channels, cfg.classes}, cfg.dtype,
            cfg.vit.seed) {
  cfg_.neck.validate(cfg_.vit.num_layers);
  for (const auto& part : {encoder_.params(), pyramid_.params(), head_.params()}) {
    params_.insert(params_.end(), part.begin(), part.end());
  }
}

ForwardOutput SegModel::forward(const Tensor& image) const {
  LayerStack stack = encoder_.encode(image);
  FusedFeature fused = controller_forward(stack, cfg_.neck);
  FeaturePyramid pyr = pyramid_(fused.y);
  ForwardOutput out;
  out.logits = head_.forward(pyr, image.dim(0), image.dim(1));
  if (fused.controller) out.m_hat = fused.controller->m_hat;
  return out;
}

ParamCounts SegModel::count_params() const {
  ParamCounts c;
  c.encoder = count_elements(params_, "encoder.");
  c.neck = neck_param_count(cfg_.neck) + count_elements(params_, "neck.");
  c.pyramid = count_elements(params_, "pyramid.");
  c.head = count_elements(params_, "head.");
  c.total = count_elements(params_);
  return c;
}

}  // namespace vitc
