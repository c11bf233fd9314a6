#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cxplain/io.hpp"
#include "cxplain/tensor.hpp"

namespace cxplain::nn {

/// One stage of a sequential network. Layers are immutable during inference;
/// parameters are exposed as one flat span so an optimizer can treat the
/// whole network as a single vector.
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const noexcept { return name_; }
  virtual std::string_view kind() const noexcept = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor forward(const Tensor& x) const = 0;
  // Gradient w.r.t. x. Parameter gradients accumulate into `param_grad`
  // (sized like params()) when it is non-empty.
  virtual Tensor backward(const Tensor& x, const Tensor& grad_out,
                          std::span<double> param_grad) const = 0;
  // Affine layers have an input gradient independent of x, so DeepLift's
  // linear rule is their ordinary backward pass.
  virtual bool affine() const noexcept = 0;

  virtual std::span<double> params() noexcept { return {}; }
  virtual std::span<const double> params() const noexcept { return {}; }
  virtual void init(std::mt19937_64& /*rng*/) {}
  virtual Json describe() const;
  virtual std::unique_ptr<Layer> clone() const = 0;

 private:
  std::string name_;
};

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int padding);

  std::string_view kind() const noexcept override { return "conv2d"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return true; }
  std::span<double> params() noexcept override { return params_; }
  std::span<const double> params() const noexcept override { return params_; }
  void init(std::mt19937_64& rng) override;
  Json describe() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  int in_;
  int out_;
  int kernel_;
  int padding_;
  std::vector<double> params_;  // weights (out, in*k*k) then bias (out)
};

class ReLU final : public Layer {
 public:
  using Layer::Layer;
  std::string_view kind() const noexcept override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return false; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
};

class AvgPool2d final : public Layer {
 public:
  AvgPool2d(std::string name, int kernel);
  std::string_view kind() const noexcept override { return "avgpool2d"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return true; }
  Json describe() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2d>(*this); }

 private:
  int kernel_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::string name, int kernel);
  std::string_view kind() const noexcept override { return "maxpool2d"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return false; }
  Json describe() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }

 private:
  int kernel_;
};

class GlobalAvgPool final : public Layer {
 public:
  using Layer::Layer;
  std::string_view kind() const noexcept override { return "global_avgpool"; }
  Shape output_shape(const Shape& in) const override { return {in.n, in.c, 1, 1}; }
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return true; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

/// Fully connected layer over the flattened (c, h, w) sample.
class Linear final : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features);
  std::string_view kind() const noexcept override { return "linear"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& grad_out,
                  std::span<double> param_grad) const override;
  bool affine() const noexcept override { return true; }
  std::span<double> params() noexcept override { return params_; }
  std::span<const double> params() const noexcept override { return params_; }
  void init(std::mt19937_64& rng) override;
  Json describe() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

 private:
  int in_;
  int out_;
  std::vector<double> params_;  // weights (out, in) then bias (out)
};

std::unique_ptr<Layer> make_layer(const Json& description);

/// Sequential network; split points are layer indices.
class Network {
 public:
  Network() = default;
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer);
  std::size_t size() const noexcept { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;

  Shape output_shape(Shape in, std::size_t begin, std::size_t end) const;
  Tensor forward(const Tensor& x, std::size_t begin, std::size_t end) const;
  Tensor forward(const Tensor& x) const { return forward(x, 0, size()); }

  /// Runs layers [begin, end) and keeps every intermediate: element i is the
  /// input of layer begin+i, the last element is the output.
  std::vector<Tensor> trace(const Tensor& x, std::size_t begin, std::size_t end) const;

  /// Backpropagates `grad_out` through the traced layers, returning the
  /// gradient w.r.t. trace.front(). `param_grad` spans the whole network's
  /// flat parameter vector, or is empty to skip parameter gradients.
  Tensor backward(const std::vector<Tensor>& trace, const Tensor& grad_out, std::size_t begin,
                  std::span<double> param_grad = {}) const;

  /// DeepLift-Rescale multipliers w.r.t. trace.front(): affine layers use the
  /// linear rule, ReLU uses delta-out over delta-in (gradient where the input
  /// difference vanishes). Any other nonlinearity is rejected.
  Tensor deeplift_backward(const std::vector<Tensor>& trace, const std::vector<Tensor>& ref_trace,
                           const Tensor& grad_out, std::size_t begin) const;

  std::size_t param_count() const;
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> values);
  void init_weights(std::uint64_t seed);

  Json describe() const;
  static Network from_description(const Json& layers);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace cxplain::nn
