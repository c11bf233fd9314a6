#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cxplain/dataset.hpp"
#include "cxplain/image.hpp"
#include "cxplain/nn.hpp"
#include "cxplain/tensor.hpp"

namespace cxplain {

/// A split point in the model: activations are read right after the named
/// layer. `receptive_crop` is the side (input pixels) of one grid crop.
struct LayerId {
  std::string name;
  bool post_relu = false;
  int receptive_crop = 0;

  friend bool operator==(const LayerId&, const LayerId&) = default;
};

struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// Fixed models only accept `height` x `width`; inputs of any other size are
/// resized bilinearly during preprocessing. Flexible models accept any size
/// and use `height` x `width` as the reference size.
struct InputSize {
  bool flexible = true;
  int height = 0;
  int width = 0;
};

/// Normalized images plus the dataset ids they came from.
struct ImageBatch {
  Tensor images;
  std::vector<SourceId> source_ids;

  int size() const noexcept { return images.batch(); }
  ImageBatch slice(int begin, int count) const;
};

struct LayerGradient {
  Matrix logits;
  Tensor grad;  // d logit[target] / d activation
};

/// Uniform read-only view of a layered classifier.
class ModelHandle {
 public:
  ModelHandle(std::string model_id, nn::Network network, InputSize input_size,
              Normalization normalization, std::vector<LayerId> catalog);

  /// Reads the adapter config (JSON) and the weights it references.
  static ModelHandle load(const std::filesystem::path& config_path);
  /// Writes the adapter config and a weights file next to it.
  void save(const std::filesystem::path& config_path) const;

  const std::string& id() const noexcept { return model_id_; }
  const InputSize& input_size() const noexcept { return input_size_; }
  int num_classes() const noexcept { return num_classes_; }
  const Normalization& normalization() const noexcept { return normalization_; }
  std::span<const LayerId> layer_catalog() const noexcept { return catalog_; }
  const LayerId& layer(std::string_view name) const;
  const LayerId& deepest_layer() const { return catalog_.back(); }
  int layer_channels(const LayerId& layer) const;
  const nn::Network& network() const noexcept { return network_; }

  /// Raw pixels -> normalized pixels, one channel at a time.
  Tensor normalize(const Image& image) const;
  /// Applies the resize policy and normalization. All images must share a
  /// size after resizing.
  ImageBatch preprocess(std::span<const Image> images, std::vector<SourceId> ids) const;

  Matrix forward_full(const ImageBatch& batch) const;
  Tensor forward_to_layer(const LayerId& layer, const ImageBatch& batch) const;
  Matrix forward_from_layer(const LayerId& layer, const Tensor& acts) const;

  /// Gradient of the pre-softmax logit `target` w.r.t. the activations.
  LayerGradient gradient_at_layer(const LayerId& layer, const Tensor& acts, int target) const;
  /// DeepLift-Rescale multipliers of logit `target` w.r.t. the activations,
  /// against reference activations of the same shape.
  Tensor deeplift_multipliers(const LayerId& layer, const Tensor& acts, const Tensor& ref_acts,
                              int target) const;

  /// Majority class per row (lowest index wins ties).
  std::vector<int> predict(const ImageBatch& batch) const;
  std::vector<int> predict_dataset(const Dataset& dataset, int chunk = 64) const;

 private:
  std::size_t split_index(const LayerId& layer) const;
  void check_input(const Tensor& images) const;
  void check_target(int target) const;

  std::string model_id_;
  nn::Network network_;
  InputSize input_size_;
  Normalization normalization_;
  std::vector<LayerId> catalog_;
  std::vector<int> catalog_channels_;
  int num_classes_ = 0;
};

/// Loads a batch of dataset images through the model's preprocessing.
ImageBatch load_batch(const ModelHandle& model, const Dataset& dataset, std::span<const SourceId> ids);

}  // namespace cxplain
