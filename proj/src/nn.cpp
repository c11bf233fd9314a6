#include "cxplain/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cxplain/error.hpp"

namespace cxplain::nn {

namespace {

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

// Below this input difference the Rescale multiplier falls back to the
// local gradient; the output difference is bounded by the input difference.
constexpr double kRescaleEpsilon = 1e-10;

void require_channels(const Shape& in, int expected, const std::string& layer) {
  if (in.c != expected) {
    fail(ErrorKind::shape, "layer '" + layer + "' expects " + std::to_string(expected) +
                               " channels, got " + in.str());
  }
}

}  // namespace

Json Layer::describe() const { return Json{{"name", name_}, {"type", std::string(kind())}}; }

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int padding)
    : Layer(std::move(name)),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      padding_(padding),
      params_(static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel + out_channels,
              0.0) {
  if (in_ <= 0 || out_ <= 0 || kernel_ <= 0 || padding_ < 0) {
    fail(ErrorKind::config, "invalid conv2d geometry for '" + this->name() + "'");
  }
}

Shape Conv2d::output_shape(const Shape& in) const {
  require_channels(in, in_, name());
  const int h = in.h + 2 * padding_ - kernel_ + 1;
  const int w = in.w + 2 * padding_ - kernel_ + 1;
  if (h <= 0 || w <= 0) fail(ErrorKind::shape, "input " + in.str() + " too small for '" + name() + "'");
  return {in.n, out_, h, w};
}

namespace {

// Unfolds one (C, H, W) sample into (C*k*k, Ho*Wo) patch columns.
void im2col(std::span<const double> x, int c, int h, int w, int k, int pad, int ho, int wo,
            Matrix& cols) {
  cols.resize(static_cast<Eigen::Index>(c) * k * k, static_cast<Eigen::Index>(ho) * wo);
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.data() + ((static_cast<Eigen::Index>(ch) * k + ky) * k + kx) * cols.cols();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox + kx - pad;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[(static_cast<std::size_t>(ch) * h + iy) * w + ix]
                                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const Matrix& cols, int c, int h, int w, int k, int pad, int ho, int wo,
            std::span<double> x) {
  std::fill(x.begin(), x.end(), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row =
            cols.data() + ((static_cast<Eigen::Index>(ch) * k + ky) * k + kx) * cols.cols();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<std::size_t>(ch) * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) const {
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  const Eigen::Index patch = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  ConstMatrixMap weights(params_.data(), out_, patch);
  Eigen::Map<const Eigen::VectorXd> bias(params_.data() + out_ * patch, out_);
  Matrix cols;
  for (int n = 0; n < x.batch(); ++n) {
    im2col(x.sample(n), in_, x.height(), x.width(), kernel_, padding_, os.h, os.w, cols);
    MatrixMap out(y.sample(n).data(), out_, static_cast<Eigen::Index>(os.plane()));
    out.noalias() = weights * cols;
    out.colwise() += bias;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out,
                        std::span<double> param_grad) const {
  const Shape os = output_shape(x.shape());
  if (grad_out.shape() != os) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx(x.shape());
  const Eigen::Index patch = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  const auto plane = static_cast<Eigen::Index>(os.plane());
  ConstMatrixMap weights(params_.data(), out_, patch);
  Matrix cols;
  Matrix dcols;
  for (int n = 0; n < x.batch(); ++n) {
    ConstMatrixMap go(grad_out.sample(n).data(), out_, plane);
    if (!param_grad.empty()) {
      im2col(x.sample(n), in_, x.height(), x.width(), kernel_, padding_, os.h, os.w, cols);
      MatrixMap dw(param_grad.data(), out_, patch);
      Eigen::Map<Eigen::VectorXd> db(param_grad.data() + out_ * patch, out_);
      dw.noalias() += go * cols.transpose();
      db += go.rowwise().sum();
    }
    dcols.noalias() = weights.transpose() * go;
    col2im(dcols, in_, x.height(), x.width(), kernel_, padding_, os.h, os.w, gx.sample(n));
  }
  return gx;
}

void Conv2d::init(std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in_ * kernel_ * kernel_)));
  const std::size_t nw = static_cast<std::size_t>(out_) * in_ * kernel_ * kernel_;
  for (std::size_t i = 0; i < nw; ++i) params_[i] = dist(rng);
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(nw), params_.end(), 0.0);
}

Json Conv2d::describe() const {
  Json j = Layer::describe();
  j["in"] = in_;
  j["out"] = out_;
  j["kernel"] = kernel_;
  j["padding"] = padding_;
  return j;
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x) const {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor ReLU::backward(const Tensor& x, const Tensor& grad_out, std::span<double>) const {
  if (grad_out.shape() != x.shape()) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx = grad_out;
  auto g = gx.data();
  auto in = x.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(in[i] > 0.0)) g[i] = 0.0;
  }
  return gx;
}

// ---------------------------------------------------------------- pooling

AvgPool2d::AvgPool2d(std::string name, int kernel) : Layer(std::move(name)), kernel_(kernel) {
  if (kernel_ <= 0) fail(ErrorKind::config, "invalid pool kernel for '" + this->name() + "'");
}

Shape AvgPool2d::output_shape(const Shape& in) const {
  const Shape out{in.n, in.c, in.h / kernel_, in.w / kernel_};
  if (out.h == 0 || out.w == 0) fail(ErrorKind::shape, "input " + in.str() + " too small for '" + name() + "'");
  return out;
}

Tensor AvgPool2d::forward(const Tensor& x) const {
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  const double scale = 1.0 / (kernel_ * kernel_);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          double s = 0.0;
          for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx) s += x.at(n, c, oy * kernel_ + ky, ox * kernel_ + kx);
          }
          y.at(n, c, oy, ox) = s * scale;
        }
      }
    }
  }
  return y;
}

Tensor AvgPool2d::backward(const Tensor& x, const Tensor& grad_out, std::span<double>) const {
  const Shape os = output_shape(x.shape());
  if (grad_out.shape() != os) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx(x.shape());
  const double scale = 1.0 / (kernel_ * kernel_);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          const double g = grad_out.at(n, c, oy, ox) * scale;
          for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx) gx.at(n, c, oy * kernel_ + ky, ox * kernel_ + kx) = g;
          }
        }
      }
    }
  }
  return gx;
}

Json AvgPool2d::describe() const {
  Json j = Layer::describe();
  j["kernel"] = kernel_;
  return j;
}

MaxPool2d::MaxPool2d(std::string name, int kernel) : Layer(std::move(name)), kernel_(kernel) {
  if (kernel_ <= 0) fail(ErrorKind::config, "invalid pool kernel for '" + this->name() + "'");
}

Shape MaxPool2d::output_shape(const Shape& in) const {
  const Shape out{in.n, in.c, in.h / kernel_, in.w / kernel_};
  if (out.h == 0 || out.w == 0) fail(ErrorKind::shape, "input " + in.str() + " too small for '" + name() + "'");
  return out;
}

Tensor MaxPool2d::forward(const Tensor& x) const {
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          double best = x.at(n, c, oy * kernel_, ox * kernel_);
          for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx) best = std::max(best, x.at(n, c, oy * kernel_ + ky, ox * kernel_ + kx));
          }
          y.at(n, c, oy, ox) = best;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& x, const Tensor& grad_out, std::span<double>) const {
  const Shape os = output_shape(x.shape());
  if (grad_out.shape() != os) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx(x.shape());
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          int by = oy * kernel_;
          int bx = ox * kernel_;
          for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx) {
              const int iy = oy * kernel_ + ky;
              const int ix = ox * kernel_ + kx;
              if (x.at(n, c, iy, ix) > x.at(n, c, by, bx)) {
                by = iy;
                bx = ix;
              }
            }
          }
          gx.at(n, c, by, bx) += grad_out.at(n, c, oy, ox);
        }
      }
    }
  }
  return gx;
}

Json MaxPool2d::describe() const {
  Json j = Layer::describe();
  j["kernel"] = kernel_;
  return j;
}

Tensor GlobalAvgPool::forward(const Tensor& x) const {
  Tensor y(output_shape(x.shape()));
  const double scale = 1.0 / static_cast<double>(x.shape().plane());
  const std::size_t plane = x.shape().plane();
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += in[i * plane + p];
    out[i] = s * scale;
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& x, const Tensor& grad_out, std::span<double>) const {
  if (grad_out.shape() != output_shape(x.shape())) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx(x.shape());
  const std::size_t plane = x.shape().plane();
  const double scale = 1.0 / static_cast<double>(plane);
  auto g = grad_out.data();
  auto out = gx.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * plane), plane, g[i] * scale);
  }
  return gx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features)
    : Layer(std::move(name)),
      in_(in_features),
      out_(out_features),
      params_(static_cast<std::size_t>(in_features) * out_features + out_features, 0.0) {
  if (in_ <= 0 || out_ <= 0) fail(ErrorKind::config, "invalid linear geometry for '" + this->name() + "'");
}

Shape Linear::output_shape(const Shape& in) const {
  if (static_cast<int>(in.sample_size()) != in_) {
    fail(ErrorKind::shape, "layer '" + name() + "' expects " + std::to_string(in_) +
                               " input features, got " + in.str());
  }
  return {in.n, out_, 1, 1};
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y(output_shape(x.shape()));
  ConstMatrixMap weights(params_.data(), out_, in_);
  Eigen::Map<const Eigen::VectorXd> bias(params_.data() + static_cast<std::size_t>(out_) * in_, out_);
  // per-sample GEMV: a row's result must not depend on what else is in the batch
  for (int n = 0; n < x.batch(); ++n) {
    Eigen::Map<const Eigen::VectorXd> in(x.sample(n).data(), in_);
    Eigen::Map<Eigen::VectorXd> out(y.sample(n).data(), out_);
    out.noalias() = weights * in;
    out += bias;
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_out, std::span<double> param_grad) const {
  if (grad_out.shape() != output_shape(x.shape())) fail(ErrorKind::shape, "gradient shape mismatch in '" + name() + "'");
  Tensor gx(x.shape());
  ConstMatrixMap weights(params_.data(), out_, in_);
  ConstMatrixMap go(grad_out.data().data(), x.batch(), out_);
  MatrixMap gin(gx.data().data(), x.batch(), in_);
  gin.noalias() = go * weights;
  if (!param_grad.empty()) {
    ConstMatrixMap in(x.data().data(), x.batch(), in_);
    MatrixMap dw(param_grad.data(), out_, in_);
    Eigen::Map<Eigen::RowVectorXd> db(param_grad.data() + static_cast<std::size_t>(out_) * in_, out_);
    dw.noalias() += go.transpose() * in;
    db += go.colwise().sum();
  }
  return gx;
}

void Linear::init(std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in_));
  const std::size_t nw = static_cast<std::size_t>(out_) * in_;
  for (std::size_t i = 0; i < nw; ++i) params_[i] = dist(rng);
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(nw), params_.end(), 0.0);
}

Json Linear::describe() const {
  Json j = Layer::describe();
  j["in"] = in_;
  j["out"] = out_;
  return j;
}

std::unique_ptr<Layer> make_layer(const Json& d) {
  try {
    const std::string type = d.at("type").get<std::string>();
    std::string name = d.at("name").get<std::string>();
    if (type == "conv2d") {
      return std::make_unique<Conv2d>(std::move(name), d.at("in").get<int>(), d.at("out").get<int>(),
                                      d.at("kernel").get<int>(), d.value("padding", 0));
    }
    if (type == "relu") return std::make_unique<ReLU>(std::move(name));
    if (type == "avgpool2d") return std::make_unique<AvgPool2d>(std::move(name), d.at("kernel").get<int>());
    if (type == "maxpool2d") return std::make_unique<MaxPool2d>(std::move(name), d.at("kernel").get<int>());
    if (type == "global_avgpool") return std::make_unique<GlobalAvgPool>(std::move(name));
    if (type == "linear") {
      return std::make_unique<Linear>(std::move(name), d.at("in").get<int>(), d.at("out").get<int>());
    }
    fail(ErrorKind::config, "unknown layer type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad layer description: ") + e.what());
  }
}

// ---------------------------------------------------------------- Network

Network::Network(const Network& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Network::add(std::unique_ptr<Layer> layer) {
  if (find(layer->name())) fail(ErrorKind::config, "duplicate layer name '" + layer->name() + "'");
  layers_.push_back(std::move(layer));
}

std::optional<std::size_t> Network::find(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i]->name() == name) return i;
  }
  return std::nullopt;
}

Shape Network::output_shape(Shape in, std::size_t begin, std::size_t end) const {
  for (std::size_t i = begin; i < end; ++i) in = layers_.at(i)->output_shape(in);
  return in;
}

Tensor Network::forward(const Tensor& x, std::size_t begin, std::size_t end) const {
  if (begin == end) return x;
  Tensor h = layers_.at(begin)->forward(x);
  for (std::size_t i = begin + 1; i < end; ++i) h = layers_.at(i)->forward(h);
  return h;
}

std::vector<Tensor> Network::trace(const Tensor& x, std::size_t begin, std::size_t end) const {
  std::vector<Tensor> out;
  out.reserve(end - begin + 1);
  out.push_back(x);
  for (std::size_t i = begin; i < end; ++i) out.push_back(layers_.at(i)->forward(out.back()));
  return out;
}

Tensor Network::backward(const std::vector<Tensor>& trace, const Tensor& grad_out, std::size_t begin,
                         std::span<double> param_grad) const {
  Tensor g = grad_out;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets(layers_.size() + 1, 0);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    offsets[i] = offset;
    offset += layers_[i]->params().size();
  }
  for (std::size_t k = trace.size() - 1; k-- > 0;) {
    const Layer& layer = *layers_.at(begin + k);
    std::span<double> pg;
    if (!param_grad.empty() && !layer.params().empty()) {
      pg = param_grad.subspan(offsets[begin + k], layer.params().size());
    }
    g = layer.backward(trace[k], g, pg);
  }
  return g;
}

Tensor Network::deeplift_backward(const std::vector<Tensor>& trace, const std::vector<Tensor>& ref_trace,
                                  const Tensor& grad_out, std::size_t begin) const {
  if (trace.size() != ref_trace.size()) fail(ErrorKind::shape, "reference trace length mismatch");
  Tensor m = grad_out;
  for (std::size_t k = trace.size() - 1; k-- > 0;) {
    const Layer& layer = *layers_.at(begin + k);
    if (layer.affine()) {
      m = layer.backward(trace[k], m, {});
    } else if (layer.kind() == "relu") {
      auto x = trace[k].data();
      auto xr = ref_trace[k].data();
      auto y = trace[k + 1].data();
      auto yr = ref_trace[k + 1].data();
      auto mult = m.data();
      for (std::size_t i = 0; i < mult.size(); ++i) {
        const double dx = x[i] - xr[i];
        const double slope = std::abs(dx) > kRescaleEpsilon ? (y[i] - yr[i]) / dx : (x[i] > 0.0 ? 1.0 : 0.0);
        mult[i] *= slope;
      }
    } else {
      fail(ErrorKind::unsupported_op, "DeepLift-Rescale has no rule for layer '" + layer.name() +
                                          "' of type " + std::string(layer.kind()));
    }
  }
  return m;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l->params().size();
  return n;
}

std::vector<double> Network::flat_params() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (const auto& l : layers_) {
    const Layer& cl = *l;
    auto p = cl.params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void Network::set_flat_params(std::span<const double> values) {
  if (values.size() != param_count()) {
    fail(ErrorKind::shape, "expected " + std::to_string(param_count()) + " parameters, got " +
                               std::to_string(values.size()));
  }
  std::size_t offset = 0;
  for (auto& l : layers_) {
    auto p = l->params();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), p.size(), p.begin());
    offset += p.size();
  }
}

void Network::init_weights(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : layers_) l->init(rng);
}

Json Network::describe() const {
  Json out = Json::array();
  for (const auto& l : layers_) out.push_back(l->describe());
  return out;
}

Network Network::from_description(const Json& layers) {
  if (!layers.is_array() || layers.empty()) fail(ErrorKind::config, "architecture must be a non-empty array");
  Network net;
  for (const auto& d : layers) net.add(make_layer(d));
  return net;
}

}  // namespace cxplain::nn
