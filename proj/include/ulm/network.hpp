#pragma once

#include "ulm/adam.hpp"
#include "ulm/conv.hpp"
#include "ulm/io_util.hpp"
#include "ulm/loss.hpp"
#include "ulm/rng.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ulm {

enum class LayerKind { kConv, kUpsample, kClassifier, kPrune };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  AxisVec kernel;    // conv kernel size / upsample factor, data axes
  AxisVec stride;    // conv stride, data axes
  AxisVec dilation;  // data axes
  int out_channels = 0;
  bool relu = false;
  double keep_threshold = 0.5;  // prune
  int level = -1;               // classifier resolution level tag
};

/// Data-driven network description. The main chain is a flat layer list;
/// classifiers are side heads that pass their input through unchanged, and a
/// prune layer masks the chain with the most recent classifier's logits.
struct NetworkConfig {
  std::string name;
  int spatial_dims = 2;
  int upscale = 1;        // spatial lattice stride of the input placement
  int input_channels = 2;
  int input_frames = 1;   // temporal conv strides must multiply to this
  double intermediate_loss_weight = 1.0;
  std::vector<LayerSpec> layers;

  Eigen::Index data_axes() const { return spatial_dims + 1; }

  /// Channels entering each layer; entry L is the chain's final width.
  std::vector<int> channel_flow() const {
    std::vector<int> c;
    c.push_back(input_channels);
    for (const auto& l : layers) {
      int next = c.back();
      if (l.kind == LayerKind::kConv || l.kind == LayerKind::kUpsample)
        next = l.out_channels;
      c.push_back(next);
    }
    return c;
  }

  void validate() const {
    const Eigen::Index axes = data_axes();
    if (layers.empty() || layers.back().kind != LayerKind::kClassifier)
      throw std::invalid_argument("network must end with a classifier layer");
    if (upscale < 1 || input_channels < 1 || input_frames < 1)
      throw std::invalid_argument("invalid network header fields");
    // Simulate the lattice stride from the input placement through the stack.
    AxisVec stride(axes);
    for (Eigen::Index a = 0; a + 1 < axes; ++a) stride[a] = upscale;
    stride[axes - 1] = 1;
    bool saw_classifier = false;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::kConv: {
          if (l.kernel.size() != axes || l.stride.size() != axes ||
              l.dilation.size() != axes)
            throw std::invalid_argument("conv layer axis count mismatch");
          if (l.out_channels < 1)
            throw std::invalid_argument("conv layer needs out_channels");
          const bool lattice = (l.stride.array() == 1).all();
          for (Eigen::Index a = 0; a < axes; ++a) {
            if (lattice && l.kernel[a] % 2 != 1)
              throw std::invalid_argument("lattice-preserving kernel must be odd");
            stride[a] *= l.stride[a];
          }
          break;
        }
        case LayerKind::kUpsample: {
          if (l.kernel.size() != axes)
            throw std::invalid_argument("upsample layer axis count mismatch");
          if (l.out_channels < 1)
            throw std::invalid_argument("upsample layer needs out_channels");
          for (Eigen::Index a = 0; a < axes; ++a) {
            if (l.kernel[a] < 1 || stride[a] % l.kernel[a] != 0)
              throw std::invalid_argument("invalid upsample factor");
            stride[a] /= l.kernel[a];
          }
          break;
        }
        case LayerKind::kClassifier:
          saw_classifier = true;
          break;
        case LayerKind::kPrune:
          if (!saw_classifier)
            throw std::invalid_argument("prune layer needs a preceding classifier");
          break;
      }
    }
    for (Eigen::Index a = 0; a + 1 < axes; ++a)
      if (stride[a] != 1)
        throw std::invalid_argument(
            "spatial strides and upsample factors must compose to the upscale factor");
    if (stride[axes - 1] != input_frames)
      throw std::invalid_argument(
          "temporal strides must compose to input_frames (time collapses to one step)");
  }
};

NetworkConfig parse_network_config(const std::string& json_text);
NetworkConfig load_network_config(const std::string& path);
std::string network_config_to_json(const NetworkConfig& cfg);

/// Trainable sparse network: parameters plus the forward/backward engine.
template <typename Scalar>
class Network {
 public:
  explicit Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_param_storage();
  }

  const NetworkConfig& config() const { return cfg_; }

  /// He-style uniform init scaled by fan-in; biases zero. Deterministic in
  /// the seed and in block enumeration order.
  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t l = 0; l < cfg_.layers.size(); ++l) {
      const auto& spec = cfg_.layers[l];
      if (spec.kind == LayerKind::kConv || spec.kind == LayerKind::kUpsample) {
        auto& p = convs_[static_cast<std::size_t>(layer_slot_[l])];
        const double bound =
            std::sqrt(6.0 / static_cast<double>(p.weights.rows()));
        for (Eigen::Index i = 0; i < p.weights.size(); ++i)
          p.weights.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        p.bias.setZero();
      } else if (spec.kind == LayerKind::kClassifier) {
        auto& w = head_w_[static_cast<std::size_t>(layer_slot_[l])];
        const double bound = std::sqrt(6.0 / static_cast<double>(w.size()));
        for (Eigen::Index i = 0; i < w.size(); ++i)
          w[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        head_b_[static_cast<std::size_t>(layer_slot_[l])].setZero();
      }
    }
  }

  /// Parameter blocks in layer order (conv: weights, bias; classifier: w, b).
  /// The same enumeration defines the checkpoint layout.
  std::vector<Eigen::Map<VectorX<Scalar>>> param_blocks() {
    std::vector<Eigen::Map<VectorX<Scalar>>> blocks;
    for (std::size_t l = 0; l < cfg_.layers.size(); ++l) {
      const auto& spec = cfg_.layers[l];
      if (spec.kind == LayerKind::kConv || spec.kind == LayerKind::kUpsample) {
        auto& p = convs_[static_cast<std::size_t>(layer_slot_[l])];
        blocks.emplace_back(p.weights.data(), p.weights.size());
        blocks.emplace_back(p.bias.data(), p.bias.size());
      } else if (spec.kind == LayerKind::kClassifier) {
        auto& w = head_w_[static_cast<std::size_t>(layer_slot_[l])];
        auto& b = head_b_[static_cast<std::size_t>(layer_slot_[l])];
        blocks.emplace_back(w.data(), w.size());
        blocks.emplace_back(b.data(), b.size());
      }
    }
    return blocks;
  }

  const ConvParams<Scalar>& conv_at(Eigen::Index layer) const {
    return convs_[static_cast<std::size_t>(layer_slot_[static_cast<std::size_t>(layer)])];
  }

  AxisVec expected_input_stride() const {
    AxisVec s(cfg_.data_axes() + 1);
    s[0] = 1;
    for (Eigen::Index a = 1; a <= cfg_.spatial_dims; ++a) s[a] = cfg_.upscale;
    s[cfg_.data_axes()] = 1;
    return s;
  }

  std::vector<Eigen::Index> classifier_layers() const {
    std::vector<Eigen::Index> out;
    for (std::size_t l = 0; l < cfg_.layers.size(); ++l)
      if (cfg_.layers[l].kind == LayerKind::kClassifier)
        out.push_back(static_cast<Eigen::Index>(l));
    return out;
  }

  struct Tape {
    std::vector<std::shared_ptr<const SparseTensor<Scalar>>> acts;    // L+1
    std::vector<std::shared_ptr<const SparseTensor<Scalar>>> logits;  // per layer
    std::vector<std::shared_ptr<const ConvGeometry>> geoms;           // per layer
    std::vector<std::vector<Eigen::Index>> kept;                      // per layer

    const SparseTensor<Scalar>& final_logits() const { return *logits.back(); }
  };

  /// Reusable per-sample geometry; valid only while the input coordinates and
  /// chain topology are unchanged (i.e. never across an active prune layer).
  struct Plan {
    std::vector<std::shared_ptr<const ConvGeometry>> geoms;
  };

  Tape forward(std::shared_ptr<const SparseTensor<Scalar>> x,
               bool prune_enabled = true, Plan* plan = nullptr) const {
    if (x->channels() != cfg_.input_channels)
      throw std::invalid_argument("channel count mismatch");
    const AxisVec want = expected_input_stride();
    if (x->stride().size() != want.size() ||
        !(x->stride().array() == want.array()).all())
      throw std::invalid_argument("input tensor stride does not match network placement");

    Tape tape;
    const std::size_t L = cfg_.layers.size();
    tape.acts.reserve(L + 1);
    tape.logits.resize(L);
    tape.geoms.resize(L);
    tape.kept.resize(L);
    tape.acts.push_back(std::move(x));

    std::shared_ptr<const SparseTensor<Scalar>> last_logits;
    const bool fill_plan = plan && plan->geoms.empty();
    for (std::size_t l = 0; l < L; ++l) {
      const auto& spec = cfg_.layers[l];
      const auto& cur = tape.acts.back();
      switch (spec.kind) {
        case LayerKind::kConv:
        case LayerKind::kUpsample: {
          const auto& p = convs_[static_cast<std::size_t>(layer_slot_[l])];
          std::shared_ptr<const ConvGeometry> geom;
          if (plan && !fill_plan) {
            geom = plan->geoms[l];
          } else {
            geom = std::make_shared<ConvGeometry>(conv_geometry(*cur, p));
            if (fill_plan) plan->geoms.push_back(geom);
          }
          SparseTensor<Scalar> out =
              spec.kind == LayerKind::kConv
                  ? sparse_conv_forward(*cur, p, *geom)
                  : generative_upsample_forward(*cur, p, *geom);
          if (spec.relu) out = relu(out);
          tape.geoms[l] = std::move(geom);
          tape.acts.push_back(
              std::make_shared<SparseTensor<Scalar>>(std::move(out)));
          break;
        }
        case LayerKind::kClassifier: {
          const auto slot = static_cast<std::size_t>(layer_slot_[l]);
          auto logits = std::make_shared<SparseTensor<Scalar>>(
              pointwise_classifier(*cur, head_w_[slot], head_b_[slot][0]));
          tape.logits[l] = logits;
          last_logits = logits;
          tape.acts.push_back(cur);  // pass-through
          if (fill_plan) plan->geoms.push_back(nullptr);
          break;
        }
        case LayerKind::kPrune: {
          if (prune_enabled) {
            if (!last_logits)
              throw std::logic_error("prune layer without classifier logits");
            tape.kept[l] = prune_keep_indices(*last_logits, spec.keep_threshold);
            tape.acts.push_back(std::make_shared<SparseTensor<Scalar>>(
                select_sites(*cur, tape.kept[l])));
          } else {
            tape.kept[l].resize(static_cast<std::size_t>(cur->site_count()));
            for (Eigen::Index i = 0; i < cur->site_count(); ++i)
              tape.kept[l][static_cast<std::size_t>(i)] = i;
            tape.acts.push_back(cur);
          }
          if (fill_plan) plan->geoms.push_back(nullptr);
          break;
        }
      }
    }
    return tape;
  }

  /// Gradient w.r.t. a classifier's logits, one entry per supervised head.
  using HeadGrad = std::pair<Eigen::Index, FeatureMatrix<Scalar>>;

  /// Reverse pass; returns gradient blocks aligned with param_blocks().
  std::vector<VectorX<Scalar>> backward(const Tape& tape,
                                        const std::vector<HeadGrad>& head_grads) {
    std::vector<VectorX<Scalar>> grads;
    {
      auto blocks = param_blocks();
      grads.reserve(blocks.size());
      for (auto& b : blocks) grads.emplace_back(VectorX<Scalar>::Zero(b.size()));
    }
    const std::size_t L = cfg_.layers.size();
    FeatureMatrix<Scalar> grad_main = FeatureMatrix<Scalar>::Zero(
        tape.acts[L]->site_count(), tape.acts[L]->channels());

    for (std::size_t l = L; l-- > 0;) {
      const auto& spec = cfg_.layers[l];
      const auto& input = tape.acts[l];
      switch (spec.kind) {
        case LayerKind::kClassifier: {
          FeatureMatrix<Scalar> gl =
              FeatureMatrix<Scalar>::Zero(input->site_count(), 1);
          for (const auto& hg : head_grads)
            if (hg.first == static_cast<Eigen::Index>(l)) gl += hg.second;
          const auto slot = static_cast<std::size_t>(layer_slot_[l]);
          const Eigen::Index bi = block_offset_[l];
          grads[static_cast<std::size_t>(bi)] +=
              input->features().transpose() * gl;
          grads[static_cast<std::size_t>(bi) + 1][0] += gl.sum();
          grad_main.noalias() += gl * head_w_[slot].transpose();
          break;
        }
        case LayerKind::kPrune: {
          FeatureMatrix<Scalar> back = FeatureMatrix<Scalar>::Zero(
              input->site_count(), input->channels());
          const auto& kept = tape.kept[l];
          for (std::size_t k = 0; k < kept.size(); ++k)
            back.row(kept[k]) = grad_main.row(static_cast<Eigen::Index>(k));
          grad_main = std::move(back);
          break;
        }
        case LayerKind::kConv:
        case LayerKind::kUpsample: {
          const auto& out = tape.acts[l + 1];
          if (spec.relu) {
            grad_main =
                (out->features().array() > Scalar(0))
                    .select(grad_main.array(), Scalar(0))
                    .matrix();
          }
          const auto& p = convs_[static_cast<std::size_t>(layer_slot_[l])];
          const SparseTensor<Scalar> grad_out =
              out->with_features(std::move(grad_main));
          const ConvGrads<Scalar> cg =
              spec.kind == LayerKind::kConv
                  ? sparse_conv_backward(*input, p, grad_out, *tape.geoms[l])
                  : generative_upsample_backward(*input, p, grad_out,
                                                 *tape.geoms[l]);
          const Eigen::Index bi = block_offset_[l];
          grads[static_cast<std::size_t>(bi)] +=
              Eigen::Map<const VectorX<Scalar>>(cg.weights.data(),
                                                cg.weights.size());
          grads[static_cast<std::size_t>(bi) + 1] +=
              Eigen::Map<const VectorX<Scalar>>(cg.bias.data(), cg.bias.size());
          grad_main = cg.input;
          break;
        }
      }
    }
    return grads;
  }

  void save_checkpoint(const std::string& path) const {
    BinaryWriter w;
    w.write_magic("SNN1");
    const std::string json = network_config_to_json(cfg_);
    w.write<std::uint32_t>(static_cast<std::uint32_t>(json.size()));
    w.write_bytes(json.data(), json.size());
    for (const auto& b : const_cast<Network*>(this)->param_blocks())
      for (Eigen::Index i = 0; i < b.size(); ++i)
        w.write<float>(static_cast<float>(b[i]));
    w.save(path);
  }

  static Network load_checkpoint(const std::string& path) {
    BinaryReader r(read_file(path), "corrupt checkpoint file: " + path);
    r.expect_magic("SNN1");
    const auto len = r.read<std::uint32_t>();
    std::string json(len, '\0');
    r.read_bytes(json.data(), len);
    Network net(parse_network_config(json));
    for (auto& b : net.param_blocks())
      for (Eigen::Index i = 0; i < b.size(); ++i)
        b[i] = static_cast<Scalar>(r.read<float>());
    if (!r.at_end()) throw std::runtime_error("corrupt checkpoint file: " + path);
    return net;
  }

 private:
  void build_param_storage() {
    const auto flow = cfg_.channel_flow();
    const Eigen::Index axes = cfg_.data_axes();
    layer_slot_.assign(cfg_.layers.size(), -1);
    block_offset_.assign(cfg_.layers.size(), -1);
    Eigen::Index blocks = 0;
    for (std::size_t l = 0; l < cfg_.layers.size(); ++l) {
      auto& spec = cfg_.layers[l];
      const int c_in = flow[l];
      if (spec.kind == LayerKind::kConv || spec.kind == LayerKind::kUpsample) {
        ConvParams<Scalar> p;
        p.kernel_size = spec.kernel;
        if (spec.kind == LayerKind::kConv) {
          p.stride = spec.stride;
          p.dilation = spec.dilation.size() ? spec.dilation : AxisVec::Ones(axes);
          p.mode = (p.stride.array() == 1).all() ? ConvMode::kLatticePreserving
                                                 : ConvMode::kDownsample;
        } else {
          p.stride = spec.kernel;
          p.dilation = AxisVec::Ones(axes);
          p.mode = ConvMode::kGenerativeUpsample;
        }
        p.weights = FeatureMatrix<Scalar>::Zero(
            static_cast<Eigen::Index>(product(spec.kernel)) * c_in,
            spec.out_channels);
        p.bias.setZero(spec.out_channels);
        layer_slot_[l] = static_cast<Eigen::Index>(convs_.size());
        convs_.push_back(std::move(p));
        block_offset_[l] = blocks;
        blocks += 2;
      } else if (spec.kind == LayerKind::kClassifier) {
        layer_slot_[l] = static_cast<Eigen::Index>(head_w_.size());
        head_w_.push_back(VectorX<Scalar>::Zero(c_in));
        head_b_.push_back(VectorX<Scalar>::Zero(1));
        block_offset_[l] = blocks;
        blocks += 2;
      }
    }
  }

  NetworkConfig cfg_;
  std::vector<ConvParams<Scalar>> convs_;
  std::vector<VectorX<Scalar>> head_w_;
  std::vector<VectorX<Scalar>> head_b_;
  std::vector<Eigen::Index> layer_slot_;
  std::vector<Eigen::Index> block_offset_;
};

/// Places a unit-lattice tensor on the network's input lattice by scaling the
/// spatial axes by `upscale` (coordinates, stride and shape alike).
template <typename Scalar>
SparseTensor<Scalar> place_on_lattice(const SparseTensor<Scalar>& x, int upscale,
                                      int spatial_dims) {
  CoordMatrix coords = x.coords();
  AxisVec stride = x.stride(), shape = x.shape();
  for (Eigen::Index a = 1; a <= spatial_dims; ++a) {
    stride[a] *= upscale;
    shape[a] *= upscale;
    for (Eigen::Index i = 0; i < coords.rows(); ++i) coords(i, a) *= upscale;
  }
  return SparseTensor<Scalar>(std::move(coords), x.features(), std::move(stride),
                              std::move(shape));
}

}  // namespace ulm
