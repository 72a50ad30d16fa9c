#pragma once

// FCN-8 segmentation network: VGG-16 backbone, two skip-fusion stages and a
// final score layer reducing to `num_classes` outputs.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/ops.hpp"
#include "cmeseg/tensor.hpp"

namespace cmeseg {

/// Positive rational multiplier applied to backbone filter counts.
struct WidthScale {
  std::int64_t num = 1;
  std::int64_t den = 1;

  /// Scaled channel count, or BadWidthScale if not a positive integer.
  std::size_t apply(std::size_t filters) const {
    if (num <= 0 || den <= 0) throw BadWidthScale("width scale must be positive");
    const auto scaled = static_cast<std::int64_t>(filters) * num;
    if (scaled % den != 0 || scaled / den < 1)
      throw BadWidthScale(std::to_string(filters) + " * " + std::to_string(num) + "/" + std::to_string(den) +
                          " is not a positive integer");
    return static_cast<std::size_t>(scaled / den);
  }
  bool operator==(const WidthScale&) const = default;
};

enum class LayerKind { Convolution, ReLU, MaxPool, Deconvolution, Crop, ElementwiseFuse, Dice, SoftmaxWithLoss };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Convolution: return "Convolution";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "Max Pool";
    case LayerKind::Deconvolution: return "Deconvolution";
    case LayerKind::Crop: return "Crop";
    case LayerKind::ElementwiseFuse: return "Element-wise Fuse";
    case LayerKind::Dice: return "Dice";
    case LayerKind::SoftmaxWithLoss: return "SoftmaxWithLoss";
  }
  return "?";
}

/// One row of the architecture table. -1 marks a "-" cell.
struct BlockSpec {
  int block;
  LayerKind kind;
  int filter_size = -1;
  int stride = -1;
  int filters = -1;
  int padding = -1;
  int repeat = 1;
  std::string fusion;
};

/// The architecture table at unit width, row for row.
inline std::vector<BlockSpec> fcn8_table() {
  using K = LayerKind;
  return {
      {1, K::Convolution, 3, 1, 64, 100, 2, ""},  {1, K::ReLU, -1, -1, -1, -1, 2, ""},
      {2, K::MaxPool, 2, 2, -1, 0, 1, ""},
      {3, K::Convolution, 3, 1, 128, 1, 2, ""},   {3, K::ReLU, -1, -1, -1, -1, 2, ""},
      {4, K::MaxPool, 2, 2, -1, 0, 1, ""},
      {5, K::Convolution, 3, 1, 256, 1, 3, ""},   {5, K::ReLU, -1, -1, -1, -1, 3, ""},
      {6, K::MaxPool, 2, 2, -1, 0, 1, ""},
      {7, K::Convolution, 3, 1, 512, 1, 3, ""},   {7, K::ReLU, -1, -1, -1, -1, 3, ""},
      {8, K::MaxPool, 2, 2, -1, 0, 1, ""},
      {9, K::Convolution, 3, 1, 512, 1, 3, ""},   {9, K::ReLU, -1, -1, -1, -1, 3, ""},
      {10, K::MaxPool, 2, 2, -1, 0, 1, ""},
      {11, K::Convolution, 7, 1, 4096, 0, 2, ""}, {11, K::ReLU, -1, -1, -1, -1, 2, ""},
      {12, K::Convolution, 1, 1, 21, 0, 1, ""},
      {13, K::Deconvolution, 4, 2, 21, -1, 1, ""},
      {14, K::Convolution, 1, 1, 21, 0, 1, "x2 fusion"},
      {14, K::Crop, -1, -1, -1, -1, 1, "x2 fusion"},
      {14, K::ElementwiseFuse, -1, -1, -1, -1, 1, "x2 fusion"},
      {14, K::Deconvolution, 4, 2, 21, -1, 1, "x2 fusion"},
      {15, K::Convolution, 1, 1, 21, 0, 1, "x4 fusion"},
      {15, K::Crop, -1, -1, -1, -1, 1, "x4 fusion"},
      {15, K::ElementwiseFuse, -1, -1, -1, -1, 1, "x4 fusion"},
      {15, K::Deconvolution, 16, 8, 21, -1, 1, "x4 fusion"},
      {16, K::Crop, -1, -1, -1, -1, 1, ""},
      {17, K::Convolution, 1, 1, 2, 0, 1, ""},
      {17, K::Dice, -1, -1, -1, -1, 1, ""},
      {19, K::SoftmaxWithLoss, -1, -1, -1, -1, 1, ""},
  };
}

/// A concrete learnable layer of the instantiated graph.
struct LayerSpec {
  std::string name;
  int block;
  LayerKind kind;  // Convolution or Deconvolution
  std::size_t in_channels, out_channels, kernel, stride, padding;
  bool bias;
  bool relu;
};

/// Skip link: 1x1 score layer on a pooling output, cropped and summed into the
/// upsampled deep-path prediction.
struct FusionEdge {
  std::string name;          // "x2 fusion" / "x4 fusion"
  std::string source;        // pooling stage feeding the edge
  std::string score_layer;   // 1x1 score convolution on the source
  std::string upsample_in;   // deconvolution whose output is fused
  std::size_t crop_offset;   // derived from the receptive-field geometry
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  std::vector<std::uint32_t> shape;  // logical shape as stored in checkpoints
};

template <typename T>
struct ForwardResult {
  Tensor<T> scores;
  Tensor<T> heatmap;
};

enum class PassMode { Train, Inference };

namespace detail {

/// Affine map from a feature-map index to input-image pixel coordinates.
struct CoordMap {
  double scale = 1.0, shift = 0.0;

  CoordMap conv(std::size_t k, std::size_t s, std::size_t p) const {
    return {scale * static_cast<double>(s),
            shift + scale * ((static_cast<double>(k) - 1.0) / 2.0 - static_cast<double>(p))};
  }
  CoordMap deconv(std::size_t k, std::size_t s, std::size_t p) const {
    return {scale / static_cast<double>(s),
            shift + scale * (static_cast<double>(p) - (static_cast<double>(k) - 1.0) / 2.0) / static_cast<double>(s)};
  }
};

inline std::size_t crop_offset_between(const CoordMap& larger, const CoordMap& target) {
  if (std::abs(larger.scale - target.scale) > 1e-12)
    throw UnsupportedGeometry("fusion maps have different strides");
  const double off = (target.shift - larger.shift) / larger.scale;
  if (off < 0 || std::abs(off - std::round(off)) > 1e-9)
    throw UnsupportedGeometry("fusion crop offset " + std::to_string(off) + " is not a non-negative integer");
  return static_cast<std::size_t>(std::llround(off));
}

}  // namespace detail

/// The FCN-8 graph with its parameters and the activations of the last pass.
///
/// A single instance is not re-entrant: forward() caches what backward()
/// needs. Separate instances are independent.
template <typename T>
class Fcn8 {
 public:
  static constexpr std::size_t kScoreChannels = 21;
  static constexpr std::size_t kMinExtent = 32;

  static Fcn8 build(WidthScale width = {}, std::size_t num_classes = 2, std::uint64_t seed = 0) {
    if (num_classes < 2) throw BadWidthScale("num_classes must be >= 2");
    Fcn8 net;
    net.width_ = width;
    net.num_classes_ = num_classes;
    net.make_layers();
    net.init_params(seed);
    net.derive_offsets();
    return net;
  }

  WidthScale width() const { return width_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<FusionEdge>& fusion_edges() const { return edges_; }
  std::size_t final_crop_offset() const { return final_offset_; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  Param<T>& param(const std::string& name) {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw DimsMismatch("no parameter named " + name);
    return params_[it->second];
  }
  const Param<T>& param(const std::string& name) const { return const_cast<Fcn8*>(this)->param(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.value.grad();
      p.value.zero_grad();
    }
  }

  ForwardResult<T> forward(const Tensor<T>& image, PassMode mode = PassMode::Train) {
    const Dims& d = image.dims();
    if (d.c != 3) throw ShapeMismatch("expected a 3-channel image, got " + d.str());
    if (d.h < kMinExtent || d.w < kMinExtent)
      throw InputTooSmall("image " + d.str() + " below minimum extent " + std::to_string(kMinExtent));
    state_.reset();
    State s;
    s.image_dims = d;
    s.acts.reserve(backbone_steps_.size() + 1);
    s.acts.push_back(image);
    for (std::size_t k = 0; k < backbone_steps_.size(); ++k) {
      const Step& st = backbone_steps_[k];
      if (st.pool) {
        auto r = maxpool2d_forward(s.acts.back());
        s.acts.push_back(r.output);
        s.pools.emplace(k + 1, std::move(r));
      } else {
        s.acts.push_back(relu_forward(conv2d_forward(s.acts.back(), conv_params(layers_[st.layer]))));
      }
      if (mode == PassMode::Inference && k != pool3_act_ && k != pool4_act_) s.acts[k] = Tensor<T>();
    }

    s.score_fr_in = s.acts.back();
    const Tensor<T> fr = conv2d_forward(s.score_fr_in, conv_params(layer("score_fr")));
    s.up2_in = fr;
    const Tensor<T> up2 = transposed_conv2d_forward(fr, conv_params(layer("upscore2")));
    const Tensor<T> sp4 = conv2d_forward(s.acts[pool4_act_], conv_params(layer("score_pool4")));
    s.sp4_dims = sp4.dims();
    s.fuse4 = add_forward(up2, crop_forward(sp4, up2.dims().h, up2.dims().w, edges_[0].crop_offset, edges_[0].crop_offset));
    const Tensor<T> up4 = transposed_conv2d_forward(s.fuse4, conv_params(layer("upscore_pool4")));
    const Tensor<T> sp3 = conv2d_forward(s.acts[pool3_act_], conv_params(layer("score_pool3")));
    s.sp3_dims = sp3.dims();
    s.fuse3 = add_forward(up4, crop_forward(sp3, up4.dims().h, up4.dims().w, edges_[1].crop_offset, edges_[1].crop_offset));
    const Tensor<T> up8 = transposed_conv2d_forward(s.fuse3, conv_params(layer("upscore8")));
    s.up8_dims = up8.dims();
    s.cropped = crop_forward(up8, d.h, d.w, final_offset_, final_offset_);
    ForwardResult<T> out;
    out.scores = conv2d_forward(s.cropped, conv_params(layer("score")));
    out.heatmap = softmax_channels(out.scores);
    if (mode == PassMode::Train) state_ = std::move(s);
    return out;
  }

  /// Accumulates parameter gradients for d(loss)/d(scores) = grad_scores.
  void backward(const Tensor<T>& grad_scores) {
    if (!state_) throw NoForwardState("backward() requires a preceding training-mode forward()");
    State& s = *state_;
    if (grad_scores.dims() != Dims{s.image_dims.n, num_classes_, s.image_dims.h, s.image_dims.w})
      throw ShapeMismatch("grad_scores dims " + grad_scores.dims().str());

    auto g = conv_back("score", s.cropped, grad_scores);
    g = crop_backward(s.up8_dims, g, final_offset_, final_offset_);
    const Tensor<T> g_fuse3 = conv_back("upscore8", s.fuse3, g);
    {
      auto g_sp3 = crop_backward(s.sp3_dims, g_fuse3, edges_[1].crop_offset, edges_[1].crop_offset);
      s.extra.emplace(pool3_act_, conv_back("score_pool3", s.acts[pool3_act_], g_sp3));
    }
    const Tensor<T> g_fuse4 = conv_back("upscore_pool4", s.fuse4, g_fuse3);
    {
      auto g_sp4 = crop_backward(s.sp4_dims, g_fuse4, edges_[0].crop_offset, edges_[0].crop_offset);
      s.extra.emplace(pool4_act_, conv_back("score_pool4", s.acts[pool4_act_], g_sp4));
    }
    g = conv_back("upscore2", s.up2_in, g_fuse4);
    g = conv_back("score_fr", s.score_fr_in, g);

    for (std::size_t k = backbone_steps_.size(); k-- > 0;) {
      if (auto it = s.extra.find(k + 1); it != s.extra.end()) g = add_forward(g, it->second);
      const Step& st = backbone_steps_[k];
      if (st.pool) {
        g = maxpool2d_backward(s.pools.at(k + 1), g);
      } else {
        g = relu_backward(s.acts[k + 1], g);
        g = conv_back(layers_[st.layer].name, s.acts[k], g);
      }
    }
    s.extra.clear();
  }

  bool has_forward_state() const { return state_.has_value(); }
  void clear_state() { state_.reset(); }

 private:
  struct Step {
    bool pool;
    std::size_t layer;  // index into layers_ when !pool
  };

  struct State {
    Dims image_dims;
    std::vector<Tensor<T>> acts;  // acts[0] = image, acts[k+1] = output of backbone step k
    std::map<std::size_t, MaxPoolResult<T>> pools;
    Tensor<T> score_fr_in, up2_in, fuse4, fuse3, cropped;
    Dims sp4_dims, sp3_dims, up8_dims;
    std::map<std::size_t, Tensor<T>> extra;
  };

  struct LayerSlots {
    std::size_t weight;
    std::optional<std::size_t> bias;
  };

  Fcn8() = default;

  const LayerSpec& layer(const std::string& name) const { return layers_[layer_index_.at(name)]; }

  ConvParams<T> conv_params(const LayerSpec& l) const {
    const LayerSlots& slots = slots_.at(l.name);
    ConvParams<T> p;
    // Parameters are copied into the op descriptor; the copy is small next to
    // the convolution itself.
    p.kernel = Tensor<T>(params_[slots.weight].value.dims(), params_[slots.weight].value.storage());
    if (slots.bias) p.bias = params_[*slots.bias].value.storage();
    p.stride = l.stride;
    p.padding = l.padding;
    return p;
  }

  /// Runs the backward of one learnable layer, accumulates its parameter
  /// gradients and returns the gradient with respect to its input.
  Tensor<T> conv_back(const std::string& name, const Tensor<T>& input, const Tensor<T>& grad_out) {
    const LayerSpec& l = layer(name);
    const ConvParams<T> p = conv_params(l);
    ConvGrads<T> g = l.kind == LayerKind::Deconvolution ? transposed_conv2d_backward(input, p, grad_out)
                                                        : conv2d_backward(input, p, grad_out);
    const LayerSlots& slots = slots_.at(name);
    accumulate(params_[slots.weight].value, g.kernel.storage());
    if (slots.bias) accumulate(params_[*slots.bias].value, g.bias);
    return std::move(g.input);
  }

  static void accumulate(Tensor<T>& target, const std::vector<T>& delta) {
    auto g = target.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = static_cast<T>(static_cast<double>(g[i]) + static_cast<double>(delta[i]));
  }

  void add_layer(LayerSpec l) {
    layer_index_[l.name] = layers_.size();
    layers_.push_back(std::move(l));
  }

  void make_layers() {
    const auto table = fcn8_table();
    std::size_t in = 3;
    int stage = 0;
    for (const BlockSpec& b : table) {
      if (b.block > 11) break;
      if (b.kind == LayerKind::MaxPool) {
        backbone_steps_.push_back({true, 0});
        if (stage == 3) pool3_act_ = backbone_steps_.size();
        if (stage == 4) pool4_act_ = backbone_steps_.size();
        continue;
      }
      if (b.kind != LayerKind::Convolution) continue;
      ++stage;
      const std::size_t out = width_.apply(static_cast<std::size_t>(b.filters));
      for (int r = 0; r < b.repeat; ++r) {
        LayerSpec l;
        l.block = b.block;
        l.kind = LayerKind::Convolution;
        l.in_channels = in;
        l.out_channels = out;
        l.stride = static_cast<std::size_t>(b.stride);
        l.bias = true;
        l.relu = true;
        if (b.block == 11) {
          // fc6 is the 7x7 row; fc7 acts on a single window position per
          // output and is 1x1 so the deep path keeps the 32-stride geometry.
          l.name = r == 0 ? "fc6" : "fc7";
          l.kernel = r == 0 ? 7 : 1;
          l.padding = 0;
        } else {
          l.name = "conv" + std::to_string(stage) + "_" + std::to_string(r + 1);
          l.kernel = static_cast<std::size_t>(b.filter_size);
          // Only the entry convolution carries the large zero border.
          l.padding = (b.block == 1 && r > 0) ? 1 : static_cast<std::size_t>(b.padding);
        }
        backbone_steps_.push_back({false, layers_.size()});
        add_layer(l);
        in = out;
      }
    }
    const std::size_t fc7_out = in;
    const std::size_t pool3_ch = width_.apply(256), pool4_ch = width_.apply(512);
    const std::size_t S = kScoreChannels;
    add_layer({"score_fr", 12, LayerKind::Convolution, fc7_out, S, 1, 1, 0, true, false});
    add_layer({"upscore2", 13, LayerKind::Deconvolution, S, S, 4, 2, 0, false, false});
    add_layer({"score_pool4", 14, LayerKind::Convolution, pool4_ch, S, 1, 1, 0, true, false});
    add_layer({"upscore_pool4", 14, LayerKind::Deconvolution, S, S, 4, 2, 0, false, false});
    add_layer({"score_pool3", 15, LayerKind::Convolution, pool3_ch, S, 1, 1, 0, true, false});
    add_layer({"upscore8", 15, LayerKind::Deconvolution, S, S, 16, 8, 0, false, false});
    add_layer({"score", 17, LayerKind::Convolution, S, num_classes_, 1, 1, 0, true, false});
  }

  void init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const LayerSpec& l : layers_) {
      LayerSlots slots{};
      Param<T> w;
      w.name = l.name + ".weight";
      if (l.kind == LayerKind::Deconvolution) {
        w.value = bilinear_init<T>(l.kernel, l.stride, l.out_channels);
      } else {
        w.value = Tensor<T>(Dims{l.out_channels, l.in_channels, l.kernel, l.kernel});
        const double std_dev = std::sqrt(2.0 / static_cast<double>(l.in_channels * l.kernel * l.kernel));
        std::normal_distribution<double> normal(0.0, std_dev);
        for (auto& v : w.value.storage()) v = static_cast<T>(normal(rng));
      }
      const Dims wd = w.value.dims();
      w.shape = {static_cast<std::uint32_t>(wd.n), static_cast<std::uint32_t>(wd.c),
                 static_cast<std::uint32_t>(wd.h), static_cast<std::uint32_t>(wd.w)};
      slots.weight = params_.size();
      param_index_[w.name] = params_.size();
      params_.push_back(std::move(w));
      if (l.bias) {
        Param<T> b{l.name + ".bias", Tensor<T>(Dims{l.out_channels, 1, 1, 1}),
                   {static_cast<std::uint32_t>(l.out_channels)}};
        slots.bias = params_.size();
        param_index_[b.name] = params_.size();
        params_.push_back(std::move(b));
      }
      slots_[l.name] = slots;
    }
  }

  void derive_offsets() {
    detail::CoordMap m;
    std::map<std::size_t, detail::CoordMap> at_act;
    for (std::size_t k = 0; k < backbone_steps_.size(); ++k) {
      const Step& st = backbone_steps_[k];
      m = st.pool ? m.conv(2, 2, 0) : m.conv(layers_[st.layer].kernel, layers_[st.layer].stride, layers_[st.layer].padding);
      at_act[k + 1] = m;
    }
    auto through = [](detail::CoordMap c, const LayerSpec& l) {
      return l.kind == LayerKind::Deconvolution ? c.deconv(l.kernel, l.stride, l.padding)
                                                : c.conv(l.kernel, l.stride, l.padding);
    };
    detail::CoordMap deep = through(through(m, layer("score_fr")), layer("upscore2"));
    const detail::CoordMap p4 = through(at_act.at(pool4_act_), layer("score_pool4"));
    const std::size_t off4 = detail::crop_offset_between(p4, deep);
    deep = through(deep, layer("upscore_pool4"));
    const detail::CoordMap p3 = through(at_act.at(pool3_act_), layer("score_pool3"));
    const std::size_t off3 = detail::crop_offset_between(p3, deep);
    deep = through(deep, layer("upscore8"));
    final_offset_ = detail::crop_offset_between(deep, detail::CoordMap{});
    edges_ = {{"x2 fusion", "pool4", "score_pool4", "upscore2", off4},
              {"x4 fusion", "pool3", "score_pool3", "upscore_pool4", off3}};
  }

  WidthScale width_{};
  std::size_t num_classes_ = 2;
  std::vector<LayerSpec> layers_;
  std::map<std::string, std::size_t> layer_index_;
  std::map<std::string, LayerSlots> slots_;
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> param_index_;
  std::vector<Step> backbone_steps_;
  std::size_t pool3_act_ = 0, pool4_act_ = 0;
  std::vector<FusionEdge> edges_;
  std::size_t final_offset_ = 0;
  std::optional<State> state_;
};

}  // namespace cmeseg
