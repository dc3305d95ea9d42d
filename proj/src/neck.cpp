#include "vitc/neck.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vitc/ops.hpp"

namespace vitc {

void NeckPolicy::validate(std::size_t num_layers) const {
  if (num_layers == 0) throw std::invalid_argument("neck: empty layer stack");
  if (kind != Kind::fixed_layers) return;
  if (layers.empty()) throw std::invalid_argument("neck: fixed_layers needs at least one index");
  std::set<std::size_t> seen;
  for (auto i : layers) {
    if (i >= num_layers) {
      throw std::invalid_argument("neck: layer index " + std::to_string(i) + " out of range");
    }
    if (!seen.insert(i).second) {
      throw std::invalid_argument("neck: duplicate layer index " + std::to_string(i));
    }
  }
}

std::string NeckPolicy::name() const {
  switch (kind) {
    case Kind::controller_cls:
      return "controller_cls";
    case Kind::controller_avgpool:
      return "controller_avgpool";
    case Kind::last_layer:
      return "last_layer";
    case Kind::fixed_layers: {
      std::string s = "fixed:";
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(layers[i]);
      }
      return s;
    }
  }
  return "";
}

NeckPolicy NeckPolicy::parse(const std::string& text) {
  if (text == "controller_cls") return controller_cls();
  if (text == "controller_avgpool") return controller_avgpool();
  if (text == "last_layer") return last_layer();
  if (text.starts_with("fixed:")) {
    std::vector<std::size_t> idx;
    std::stringstream ss(text.substr(6));
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t pos = 0;
      const auto v = std::stoul(item, &pos);
      if (pos != item.size()) throw std::invalid_argument("neck: bad layer index '" + item + "'");
      idx.push_back(v);
    }
    return fixed_layers(std::move(idx));
  }
  throw std::invalid_argument("unknown neck policy '" + text + "'");
}

Tensor build_controller_matrix(const LayerStack& stack) {
  if (stack.empty()) throw std::invalid_argument("build_controller_matrix: empty stack");
  std::vector<Tensor> rows;
  rows.reserve(stack.size());
  for (const auto& e : stack.entries) rows.push_back(e.class_token);
  return vitc::stack(rows);
}

Tensor avgpool_controller_matrix(const LayerStack& stack) {
  if (stack.empty()) throw std::invalid_argument("avgpool_controller_matrix: empty stack");
  std::vector<Tensor> rows;
  rows.reserve(stack.size());
  for (const auto& e : stack.entries) {
    const auto& s = e.patch_tokens.shape();
    rows.push_back(mean_axis0(reshape(e.patch_tokens, {s[0] * s[1], s[2]})));
  }
  return vitc::stack(rows);
}

Tensor layer_softmax(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("layer_softmax: expected N x C matrix");
  return softmax_axis(m, 0);
}

std::vector<Tensor> apply_layer_weights(const LayerStack& stack, const Tensor& m_hat) {
  if (m_hat.rank() != 2 || m_hat.dim(0) != stack.size()) {
    throw ShapeError("apply_layer_weights: weight rows " + shape_str(m_hat.shape()) +
                     " do not match " + std::to_string(stack.size()) + " layers");
  }
  std::vector<Tensor> out;
  out.reserve(stack.size());
  const std::size_t c = m_hat.dim(1);
  for (std::size_t i = 0; i < stack.size(); ++i) {
    out.push_back(mul(stack[i].patch_tokens, reshape(slice_rows(m_hat, i, 1), {c})));
  }
  return out;
}

FusedFeature fuse_layers(const std::vector<Tensor>& weighted) {
  if (weighted.empty()) throw std::invalid_argument("fuse_layers: nothing to fuse");
  Tensor y = weighted.front();
  for (std::size_t i = 1; i < weighted.size(); ++i) {
    if (weighted[i].shape() != y.shape()) throw ShapeError("fuse_layers: heterogeneous shapes");
    y = add(y, weighted[i]);
  }
  return {y, std::nullopt};
}

FusedFeature controller_forward(const LayerStack& stack, const NeckPolicy& policy) {
  policy.validate(stack.size());
  using Kind = NeckPolicy::Kind;
  FusedFeature out;
  switch (policy.kind) {
    case Kind::controller_cls:
    case Kind::controller_avgpool: {
      const bool cls = policy.kind == Kind::controller_cls;
      ControllerMatrix cm;
      cm.source = cls ? ControllerSource::class_token : ControllerSource::average_pooling;
      cm.m = cls ? build_controller_matrix(stack) : avgpool_controller_matrix(stack);
      cm.m_hat = layer_softmax(cm.m);
      out = fuse_layers(apply_layer_weights(stack, cm.m_hat));
      out.controller = std::move(cm);
      break;
    }
    case Kind::last_layer:
      out.y = stack.entries.back().patch_tokens;
      break;
    case Kind::fixed_layers: {
      Tensor y = stack[policy.layers.front()].patch_tokens;
      for (std::size_t i = 1; i < policy.layers.size(); ++i) {
        y = add(y, stack[policy.layers[i]].patch_tokens);
      }
      out.y = scale(y, 1.0 / static_cast<double>(policy.layers.size()));
      break;
    }
  }
  ensure_finite(out.y, "neck output");
  return out;
}

std::size_t neck_param_count(const NeckPolicy&) {
  // Every policy only reads encoder outputs: no weights of its own.
  return 0;
}

void write_weight_csv(std::ostream& os, const Tensor& m_hat) {
  if (m_hat.rank() != 2) throw ShapeError("write_weight_csv: expected N x C matrix");
  const std::size_t n = m_hat.dim(0), c = m_hat.dim(1);
  os << "layer";
  for (std::size_t j = 0; j < c; ++j) os << ",c" << j;
  os << '\n';
  std::ostringstream cell;
  cell << std::setprecision(9);
  for (std::size_t i = 0; i < n; ++i) {
    os << i;
    for (std::size_t j = 0; j < c; ++j) {
      cell.str("");
      cell << m_hat.at(i * c + j);
      os << ',' << cell.str();
    }
    os << '\n';
  }
}

}  // namespace vitc
