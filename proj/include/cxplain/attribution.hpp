#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "cxplain/model.hpp"
#include "cxplain/tensor.hpp"

namespace cxplain {

enum class AttributionKind { grad_x_act, deeplift };

/// Attribution method selection. Textual forms: "grad_x_act", "deeplift",
/// "smoothgrad:<inner>:<n>:<sigma>".
struct AttributionMethod {
  AttributionKind inner = AttributionKind::grad_x_act;
  bool smoothgrad = false;
  int n_samples = 20;
  double sigma = 0.25;

  static AttributionMethod parse(std::string_view text);
  std::string str() const;
};

/// Per-cell signed scores: values has shape (batch, 1, h, w).
struct AttributionMap {
  Tensor values;
  int target_class = 0;
  LayerId layer;
  AttributionMethod method;

  double at(int b, int y, int x) const { return values.at(b, 0, y, x); }
};

/// d logit[target] / d act  *  act, elementwise, at `layer`.
Tensor grad_times_activation(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch,
                             int target);

/// All-ones (white) image of the given size, normalized by the model.
Tensor white_baseline(const ModelHandle& model, int height, int width);

/// DeepLift-Rescale attribution of logit[target](x) - logit[target](baseline)
/// onto the activations at `layer`. `baseline` is one normalized image
/// (1, 3, H, W); empty selects the white baseline.
Tensor deeplift_rescale(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                        const Tensor& baseline = {});

/// Batch with Gaussian noise (std `sigma`, normalized units) added. The
/// noise for each image depends only on (seed, source id, sample index).
ImageBatch perturb(const ImageBatch& batch, double sigma, std::uint64_t seed, int sample_index);

/// Mean of the inner method over `n_samples` noisy copies of the batch.
Tensor smoothgrad(AttributionKind inner, const ModelHandle& model, const LayerId& layer,
                  const ImageBatch& batch, int target, int n_samples, double sigma, std::uint64_t seed);

/// Dispatches on the method; raw tensor has the activation shape.
Tensor raw_attribution(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                       const AttributionMethod& method, std::uint64_t seed);

/// Mean over the channel axis. No clamping.
AttributionMap channel_mean_score(const Tensor& raw);

/// raw_attribution followed by channel_mean_score with metadata filled in.
AttributionMap attribute(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                         const AttributionMethod& method, std::uint64_t seed);

}  // namespace cxplain
