#pragma once

// Small image classifiers for the desk-scale experiments. Two architectures:
//   mlp:      flatten -> fc(hidden) -> relu -> fc(classes)
//   smallcnn: conv3x3(8) -> relu -> pool2 -> conv3x3(16) -> relu -> pool2
//             -> flatten -> fc(hidden) -> relu -> fc(classes)
// No normalization layers; the loss surface stays twice differentiable in
// the weights (ReLU kinks aside), which the curvature products rely on.
//
// Checkpoints are a flat little-endian float32 buffer plus a JSON sidecar
// naming each tensor's shape and offset, in parameter order.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperaug/model_params.hpp"
#include "hyperaug/ops.hpp"
#include "hyperaug/rng.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

enum class ModelKind { Mlp, SmallCnn };

inline const char* model_kind_name(ModelKind k) {
  return k == ModelKind::Mlp ? "mlp" : "smallcnn";
}

inline ModelKind model_kind_from_name(const std::string& s) {
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "smallcnn") return ModelKind::SmallCnn;
  throw ValueError("unknown model kind '" + s + "'");
}

struct ModelSpec {
  ModelKind kind = ModelKind::SmallCnn;
  int64_t in_channels = 1;
  int64_t height = 28;
  int64_t width = 28;
  int64_t hidden = 64;
  int64_t classes = 10;

  int64_t input_dim() const { return in_channels * height * width; }

  void validate() const {
    if (in_channels <= 0 || height <= 0 || width <= 0 || hidden <= 0 ||
        classes <= 0)
      throw ValueError("ModelSpec: all dimensions must be positive");
    if (kind == ModelKind::SmallCnn && (height % 4 || width % 4))
      throw ValueError(
          "ModelSpec: smallcnn pools twice, needs height/width divisible by "
          "4, got " +
          std::to_string(height) + "x" + std::to_string(width));
  }
};

namespace detail {

template <typename Real>
Tensor<Real> he_normal(Rng& rng, Shape shape, int64_t fan_in) {
  double stddev = std::sqrt(2.0 / double(fan_in));
  std::vector<Real> vals(size_t(shape_numel(shape)));
  for (auto& v : vals) v = Real(rng.normal() * stddev);
  return Tensor<Real>::constant(std::move(shape), std::move(vals));
}

// y = x W^T + b for W (N,D), b (N).
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  Tensor<Real> y = matmul(x, transpose2(w));
  return add(y, broadcast_to(reshape(b, {1, b.numel()}), y.shape()));
}

}  // namespace detail

// Fresh parameters for the architecture; He-normal weights, zero biases.
template <typename Real>
ModelParams<Real> init_model(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(Rng::mix(seed, 0x6d6f64656cull));
  ModelParams<Real> p;
  if (spec.kind == ModelKind::Mlp) {
    int64_t d = spec.input_dim();
    p.add("fc1.w", detail::he_normal<Real>(rng, {spec.hidden, d}, d));
    p.add("fc1.b", Tensor<Real>::zeros({spec.hidden}));
    p.add("fc2.w",
          detail::he_normal<Real>(rng, {spec.classes, spec.hidden}, spec.hidden));
    p.add("fc2.b", Tensor<Real>::zeros({spec.classes}));
    return p;
  }
  int64_t c = spec.in_channels;
  int64_t flat = 16 * (spec.height / 4) * (spec.width / 4);
  p.add("conv1.w", detail::he_normal<Real>(rng, {8, c, 3, 3}, c * 9));
  p.add("conv1.b", Tensor<Real>::zeros({8}));
  p.add("conv2.w", detail::he_normal<Real>(rng, {16, 8, 3, 3}, 8 * 9));
  p.add("conv2.b", Tensor<Real>::zeros({16}));
  p.add("fc1.w", detail::he_normal<Real>(rng, {spec.hidden, flat}, flat));
  p.add("fc1.b", Tensor<Real>::zeros({spec.hidden}));
  p.add("fc2.w",
        detail::he_normal<Real>(rng, {spec.classes, spec.hidden}, spec.hidden));
  p.add("fc2.b", Tensor<Real>::zeros({spec.classes}));
  return p;
}

// Logits for a batch. Parameters must arrive in init_model's entry order
// (watched leaves or constants both work).
template <typename Real>
Tensor<Real> model_forward(const ModelSpec& spec,
                           std::span<const Tensor<Real>> params,
                           const Tensor<Real>& x) {
  if (x.shape().size() != 4)
    throw ShapeError("model_forward: expected (B,C,H,W) input, got " +
                     shape_str(x.shape()));
  int64_t B = x.shape()[0];
  if (spec.kind == ModelKind::Mlp) {
    if (params.size() != 4)
      throw ShapeError("model_forward: mlp wants 4 parameter tensors, got " +
                       std::to_string(params.size()));
    Tensor<Real> h = reshape(x, {B, spec.input_dim()});
    h = relu(detail::linear(h, params[0], params[1]));
    return detail::linear(h, params[2], params[3]);
  }
  if (params.size() != 8)
    throw ShapeError("model_forward: smallcnn wants 8 parameter tensors, got " +
                     std::to_string(params.size()));
  Tensor<Real> h = conv2d(x, params[0], params[1], 1, 1);
  h = maxpool2(relu(h));
  h = conv2d(h, params[2], params[3], 1, 1);
  h = maxpool2(relu(h));
  h = reshape(h, {B, h.numel() / B});
  h = relu(detail::linear(h, params[4], params[5]));
  return detail::linear(h, params[6], params[7]);
}

template <typename Real>
Tensor<Real> model_loss(const ModelSpec& spec,
                        std::span<const Tensor<Real>> params,
                        const Tensor<Real>& x,
                        const std::vector<int64_t>& labels) {
  return cross_entropy(model_forward(spec, params, x), labels);
}

// Fraction of rows whose argmax (ties to the lowest index) differs from the
// label.
template <typename Real>
double error_rate(const Tensor<Real>& logits,
                  const std::vector<int64_t>& labels) {
  if (logits.shape().size() != 2 ||
      logits.shape()[0] != int64_t(labels.size()))
    throw ShapeError("error_rate: logits " + shape_str(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  int64_t B = logits.shape()[0], C = logits.shape()[1];
  auto lv = logits.values();
  int64_t wrong = 0;
  for (int64_t b = 0; b < B; ++b) {
    int64_t best = 0;
    for (int64_t j = 1; j < C; ++j)
      if (lv[size_t(b * C + j)] > lv[size_t(b * C + best)]) best = j;
    if (best != labels[size_t(b)]) ++wrong;
  }
  return double(wrong) / double(B);
}

// ---- checkpointing ----

template <typename Real>
void save_checkpoint(const std::string& bin_path, const std::string& json_path,
                     const ModelSpec& spec, const ModelParams<Real>& params) {
  nlohmann::json meta;
  meta["model"] = {{"kind", model_kind_name(spec.kind)},
                   {"in_channels", spec.in_channels},
                   {"height", spec.height},
                   {"width", spec.width},
                   {"hidden", spec.hidden},
                   {"classes", spec.classes}};
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("save_checkpoint: cannot open " + bin_path);
  int64_t offset = 0;
  for (const auto& e : params.entries()) {
    nlohmann::json t;
    t["name"] = e.name;
    t["shape"] = e.value.shape();
    t["offset"] = offset;
    t["numel"] = e.value.numel();
    tensors.push_back(t);
    for (Real v : e.value.values()) {
      float f = float(v);
      bin.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
    offset += e.value.numel();
  }
  meta["tensors"] = tensors;
  meta["dtype"] = "float32";
  std::ofstream js(json_path);
  if (!js) throw DataError("save_checkpoint: cannot open " + json_path);
  js << meta.dump(2) << "\n";
}

template <typename Real>
ModelParams<Real> load_checkpoint(const std::string& bin_path,
                                  const std::string& json_path,
                                  ModelSpec* spec_out = nullptr) {
  std::ifstream js(json_path);
  if (!js) throw DataError("load_checkpoint: cannot open " + json_path);
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_checkpoint: bad sidecar " + json_path + ": " +
                    e.what());
  }
  if (spec_out) {
    const auto& m = meta.at("model");
    spec_out->kind = model_kind_from_name(m.at("kind").get<std::string>());
    spec_out->in_channels = m.at("in_channels").get<int64_t>();
    spec_out->height = m.at("height").get<int64_t>();
    spec_out->width = m.at("width").get<int64_t>();
    spec_out->hidden = m.at("hidden").get<int64_t>();
    spec_out->classes = m.at("classes").get<int64_t>();
  }
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("load_checkpoint: cannot open " + bin_path);
  ModelParams<Real> params;
  for (const auto& t : meta.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    int64_t numel = t.at("numel").get<int64_t>();
    if (numel != shape_numel(shape))
      throw DataError("load_checkpoint: tensor '" +
                      t.at("name").get<std::string>() +
                      "' numel/shape mismatch in sidecar");
    bin.seekg(t.at("offset").get<int64_t>() * int64_t(sizeof(float)));
    std::vector<Real> vals(size_t(numel), Real(0));
    for (auto& v : vals) {
      float f;
      bin.read(reinterpret_cast<char*>(&f), sizeof(float));
      if (!bin)
        throw DataError("load_checkpoint: " + bin_path +
                        " truncated while reading '" +
                        t.at("name").get<std::string>() + "'");
      v = Real(f);
    }
    params.add(t.at("name").get<std::string>(),
               Tensor<Real>::constant(std::move(shape), std::move(vals)));
  }
  return params;
}

}  // namespace hyperaug
