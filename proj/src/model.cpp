#include "cxplain/model.hpp"

#include <algorithm>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"
#include "cxplain/parallel.hpp"

namespace cxplain {

ImageBatch ImageBatch::slice(int begin, int count) const {
  ImageBatch out;
  out.images = images.slice_batch(begin, count);
  out.source_ids.assign(source_ids.begin() + begin, source_ids.begin() + begin + count);
  return out;
}

ModelHandle::ModelHandle(std::string model_id, nn::Network network, InputSize input_size,
                         Normalization normalization, std::vector<LayerId> catalog)
    : model_id_(std::move(model_id)),
      network_(std::move(network)),
      input_size_(input_size),
      normalization_(normalization),
      catalog_(std::move(catalog)) {
  if (input_size_.height <= 0 || input_size_.width <= 0) {
    fail(ErrorKind::config, "model '" + model_id_ + "' needs a positive (reference) input size");
  }
  for (double s : normalization_.std) {
    if (!(s > 0.0)) fail(ErrorKind::config, "normalization std must be positive");
  }
  if (catalog_.empty()) fail(ErrorKind::config, "layer catalog is empty");
  const Shape reference{1, 3, input_size_.height, input_size_.width};
  num_classes_ = network_.output_shape(reference, 0, network_.size()).sample_size();
  std::size_t previous = 0;
  for (std::size_t i = 0; i < catalog_.size(); ++i) {
    const LayerId& entry = catalog_[i];
    for (std::size_t j = 0; j < i; ++j) {
      if (catalog_[j].name == entry.name) fail(ErrorKind::config, "duplicate catalog layer '" + entry.name + "'");
    }
    if (entry.receptive_crop <= 0) fail(ErrorKind::config, "receptive_crop must be positive for '" + entry.name + "'");
    const auto idx = network_.find(entry.name);
    if (!idx) fail(ErrorKind::catalog, "catalog layer '" + entry.name + "' is not in the network");
    if (i > 0 && *idx <= previous) fail(ErrorKind::config, "layer catalog must be ordered by depth");
    previous = *idx;
    if (entry.post_relu && network_.layer(*idx).kind() != "relu") {
      fail(ErrorKind::config, "catalog layer '" + entry.name + "' is marked post_relu but is a " +
                                  std::string(network_.layer(*idx).kind()));
    }
    catalog_channels_.push_back(network_.output_shape(reference, 0, *idx + 1).c);
  }
}

const LayerId& ModelHandle::layer(std::string_view name) const {
  for (const auto& l : catalog_) {
    if (l.name == name) return l;
  }
  fail(ErrorKind::catalog, "unknown layer '" + std::string(name) + "'");
}

std::size_t ModelHandle::split_index(const LayerId& layer) const {
  for (std::size_t i = 0; i < catalog_.size(); ++i) {
    if (catalog_[i].name == layer.name) return *network_.find(layer.name) + 1;
  }
  fail(ErrorKind::catalog, "unknown layer '" + layer.name + "'");
}

int ModelHandle::layer_channels(const LayerId& layer) const {
  for (std::size_t i = 0; i < catalog_.size(); ++i) {
    if (catalog_[i].name == layer.name) return catalog_channels_[i];
  }
  fail(ErrorKind::catalog, "unknown layer '" + layer.name + "'");
}

void ModelHandle::check_input(const Tensor& images) const {
  if (images.channels() != 3) fail(ErrorKind::input, "expected 3-channel images, got " + images.shape().str());
  if (!input_size_.flexible &&
      (images.height() != input_size_.height || images.width() != input_size_.width)) {
    fail(ErrorKind::input, "model '" + model_id_ + "' requires " + std::to_string(input_size_.height) +
                               "x" + std::to_string(input_size_.width) + " input, got " +
                               images.shape().str());
  }
}

void ModelHandle::check_target(int target) const {
  if (target < 0 || target >= num_classes_) {
    fail(ErrorKind::input, "class " + std::to_string(target) + " outside [0, " +
                               std::to_string(num_classes_) + ")");
  }
}

Tensor ModelHandle::normalize(const Image& image) const {
  Tensor out({1, 3, image.height(), image.width()});
  for (int c = 0; c < 3; ++c) {
    const double mean = normalization_.mean[static_cast<std::size_t>(c)];
    const double sd = normalization_.std[static_cast<std::size_t>(c)];
    for (int y = 0; y < image.height(); ++y) {
      for (int x = 0; x < image.width(); ++x) out.at(0, c, y, x) = (image.at(c, y, x) - mean) / sd;
    }
  }
  return out;
}

ImageBatch ModelHandle::preprocess(std::span<const Image> images, std::vector<SourceId> ids) const {
  if (images.size() != ids.size()) fail(ErrorKind::input, "image and id counts differ");
  std::vector<Tensor> parts;
  parts.reserve(images.size());
  for (const Image& img : images) {
    if (!input_size_.flexible &&
        (img.height() != input_size_.height || img.width() != input_size_.width)) {
      parts.push_back(normalize(img.resize_bilinear(input_size_.height, input_size_.width)));
    } else {
      parts.push_back(normalize(img));
    }
  }
  ImageBatch batch;
  batch.images = Tensor::concat_batch(parts);
  batch.source_ids = std::move(ids);
  return batch;
}

Matrix ModelHandle::forward_full(const ImageBatch& batch) const {
  check_input(batch.images);
  const Tensor out = network_.forward(batch.images);
  return Eigen::Map<const Matrix>(out.data().data(), out.batch(), num_classes_);
}

Tensor ModelHandle::forward_to_layer(const LayerId& layer, const ImageBatch& batch) const {
  check_input(batch.images);
  return network_.forward(batch.images, 0, split_index(layer));
}

Matrix ModelHandle::forward_from_layer(const LayerId& layer, const Tensor& acts) const {
  const std::size_t begin = split_index(layer);
  if (acts.channels() != layer_channels(layer)) {
    fail(ErrorKind::shape, "layer '" + layer.name + "' has " + std::to_string(layer_channels(layer)) +
                               " channels, activations have " + std::to_string(acts.channels()));
  }
  const Tensor out = network_.forward(acts, begin, network_.size());
  return Eigen::Map<const Matrix>(out.data().data(), out.batch(), num_classes_);
}

LayerGradient ModelHandle::gradient_at_layer(const LayerId& layer, const Tensor& acts, int target) const {
  check_target(target);
  const std::size_t begin = split_index(layer);
  if (acts.channels() != layer_channels(layer)) fail(ErrorKind::shape, "activation channel mismatch");
  const auto trace = network_.trace(acts, begin, network_.size());
  const Tensor& out = trace.back();
  Tensor seed(out.shape());
  for (int n = 0; n < out.batch(); ++n) seed.at(n, target, 0, 0) = 1.0;
  LayerGradient result;
  result.logits = Eigen::Map<const Matrix>(out.data().data(), out.batch(), num_classes_);
  result.grad = network_.backward(trace, seed, begin);
  return result;
}

Tensor ModelHandle::deeplift_multipliers(const LayerId& layer, const Tensor& acts, const Tensor& ref_acts,
                                         int target) const {
  check_target(target);
  if (acts.shape() != ref_acts.shape()) fail(ErrorKind::shape, "reference activations differ in shape");
  const std::size_t begin = split_index(layer);
  const auto trace = network_.trace(acts, begin, network_.size());
  const auto ref_trace = network_.trace(ref_acts, begin, network_.size());
  Tensor seed(trace.back().shape());
  for (int n = 0; n < seed.batch(); ++n) seed.at(n, target, 0, 0) = 1.0;
  return network_.deeplift_backward(trace, ref_trace, seed, begin);
}

std::vector<int> ModelHandle::predict(const ImageBatch& batch) const {
  const Matrix logits = forward_full(batch);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_row(logits, r);
  return out;
}

std::vector<int> ModelHandle::predict_dataset(const Dataset& dataset, int chunk) const {
  std::vector<int> out(dataset.size());
  const std::size_t chunks = (dataset.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * chunk;
    const std::size_t end = std::min(dataset.size(), begin + chunk);
    std::vector<SourceId> ids;
    for (std::size_t i = begin; i < end; ++i) ids.push_back(static_cast<SourceId>(i));
    const auto preds = predict(load_batch(*this, dataset, ids));
    std::copy(preds.begin(), preds.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
  });
  return out;
}

namespace {

Json size_json(int h, int w) { return Json::array({h, w}); }

}  // namespace

ModelHandle ModelHandle::load(const std::filesystem::path& config_path) {
  const Json cfg = read_json(config_path);
  try {
    nn::Network net = nn::Network::from_description(cfg.at("architecture"));
    InputSize input;
    const Json& size = cfg.at("input_size");
    if (size.is_string()) {
      if (size.get<std::string>() != "flexible") fail(ErrorKind::config, "input_size must be [h, w] or \"flexible\"");
      const Json& ref = cfg.at("reference_input");
      input = {true, ref.at(0).get<int>(), ref.at(1).get<int>()};
    } else {
      input = {false, size.at(0).get<int>(), size.at(1).get<int>()};
    }
    Normalization norm;
    norm.mean = cfg.at("normalization").at("mean").get<std::array<double, 3>>();
    norm.std = cfg.at("normalization").at("std").get<std::array<double, 3>>();
    std::vector<LayerId> catalog;
    const int default_crop = std::min(input.height, input.width) / 3;
    for (const Json& e : cfg.at("layers")) {
      catalog.push_back({e.at("name").get<std::string>(), e.value("post_relu", false),
                         e.value("receptive_crop", default_crop)});
    }
    std::filesystem::path weights = cfg.at("weights").get<std::string>();
    if (weights.is_relative()) weights = config_path.parent_path() / weights;
    const Matrix w = read_matrix(weights);
    net.set_flat_params(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())));
    ModelHandle model(cfg.value("model_id", std::string("model")), std::move(net), input, norm,
                      std::move(catalog));
    if (cfg.contains("num_classes") && cfg.at("num_classes").get<int>() != model.num_classes()) {
      fail(ErrorKind::config, "num_classes does not match the architecture output");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, config_path.string() + ": " + e.what());
  }
}

void ModelHandle::save(const std::filesystem::path& config_path) const {
  const std::filesystem::path weights_name = config_path.stem().string() + ".weights";
  Json cfg;
  cfg["model_id"] = model_id_;
  cfg["weights"] = weights_name.string();
  if (input_size_.flexible) {
    cfg["input_size"] = "flexible";
    cfg["reference_input"] = size_json(input_size_.height, input_size_.width);
  } else {
    cfg["input_size"] = size_json(input_size_.height, input_size_.width);
  }
  cfg["num_classes"] = num_classes_;
  cfg["normalization"] = {{"mean", normalization_.mean}, {"std", normalization_.std}};
  cfg["architecture"] = network_.describe();
  Json layers = Json::array();
  for (const auto& l : catalog_) {
    layers.push_back({{"name", l.name}, {"post_relu", l.post_relu}, {"receptive_crop", l.receptive_crop}});
  }
  cfg["layers"] = layers;
  const auto params = network_.flat_params();
  write_matrix(config_path.parent_path() / weights_name,
               Eigen::Map<const Matrix>(params.data(), 1, static_cast<Eigen::Index>(params.size())));
  write_json(config_path, cfg);
}

ImageBatch load_batch(const ModelHandle& model, const Dataset& dataset, std::span<const SourceId> ids) {
  std::vector<Image> images;
  images.reserve(ids.size());
  for (SourceId id : ids) images.push_back(dataset.image(id));
  return model.preprocess(images, std::vector<SourceId>(ids.begin(), ids.end()));
}

}  // namespace cxplain
