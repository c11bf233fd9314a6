#include "cxplain/attribution.hpp"

#include <charconv>
#include <random>
#include <sstream>
#include <vector>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"

namespace cxplain {

namespace {

AttributionKind parse_kind(std::string_view s) {
  if (s == "grad_x_act") return AttributionKind::grad_x_act;
  if (s == "deeplift") return AttributionKind::deeplift;
  fail(ErrorKind::config, "unknown attribution method '" + std::string(s) + "'");
}

const char* kind_name(AttributionKind k) {
  return k == AttributionKind::deeplift ? "deeplift" : "grad_x_act";
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

Tensor broadcast_batch(const Tensor& one, int n) {
  std::vector<Tensor> parts(static_cast<std::size_t>(n), one);
  return Tensor::concat_batch(parts);
}

}  // namespace

AttributionMethod AttributionMethod::parse(std::string_view text) {
  AttributionMethod m;
  const auto parts = split(text, ':');
  if (parts.front() != "smoothgrad") {
    if (parts.size() != 1) fail(ErrorKind::config, "unexpected ':' in attribution method");
    m.inner = parse_kind(parts.front());
    return m;
  }
  if (parts.size() != 4) fail(ErrorKind::config, "expected smoothgrad:<inner>:<n>:<sigma>");
  m.smoothgrad = true;
  m.inner = parse_kind(parts[1]);
  try {
    m.n_samples = std::stoi(std::string(parts[2]));
    m.sigma = std::stod(std::string(parts[3]));
  } catch (const std::exception&) {
    fail(ErrorKind::config, "malformed smoothgrad parameters in '" + std::string(text) + "'");
  }
  if (m.n_samples < 1 || !(m.sigma >= 0.0)) fail(ErrorKind::config, "smoothgrad needs n >= 1 and sigma >= 0");
  return m;
}

std::string AttributionMethod::str() const {
  if (!smoothgrad) return kind_name(inner);
  std::ostringstream os;
  os << "smoothgrad:" << kind_name(inner) << ':' << n_samples << ':' << sigma;
  return os.str();
}

Tensor grad_times_activation(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch,
                             int target) {
  const Tensor acts = model.forward_to_layer(layer, batch);
  Tensor out = model.gradient_at_layer(layer, acts, target).grad;
  auto o = out.data();
  auto a = acts.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= a[i];
  return out;
}

Tensor white_baseline(const ModelHandle& model, int height, int width) {
  return model.normalize(Image(height, width, 1.0));
}

Tensor deeplift_rescale(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                        const Tensor& baseline) {
  const Tensor base = baseline.empty() ? white_baseline(model, batch.images.height(), batch.images.width())
                                       : baseline;
  if (base.batch() != 1 || base.channels() != 3 || base.height() != batch.images.height() ||
      base.width() != batch.images.width()) {
    fail(ErrorKind::shape, "baseline must be one image shaped like the inputs, got " + base.shape().str());
  }
  const Tensor acts = model.forward_to_layer(layer, batch);
  ImageBatch ref_batch{base, {0}};
  const Tensor ref_one = model.forward_to_layer(layer, ref_batch);
  const Tensor ref_acts = broadcast_batch(ref_one, batch.size());
  Tensor out = model.deeplift_multipliers(layer, acts, ref_acts, target);
  auto o = out.data();
  auto a = acts.data();
  auto r = ref_acts.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= a[i] - r[i];
  return out;
}

ImageBatch perturb(const ImageBatch& batch, double sigma, std::uint64_t seed, int sample_index) {
  ImageBatch out = batch;
  for (int b = 0; b < batch.size(); ++b) {
    std::mt19937_64 rng(derive_seed(derive_seed(seed, batch.source_ids[static_cast<std::size_t>(b)]),
                                    static_cast<std::uint64_t>(sample_index)));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& v : out.images.sample(b)) v += sigma * noise(rng);
  }
  return out;
}

namespace {

Tensor inner_attribution(AttributionKind kind, const ModelHandle& model, const LayerId& layer,
                         const ImageBatch& batch, int target) {
  return kind == AttributionKind::deeplift ? deeplift_rescale(model, layer, batch, target)
                                           : grad_times_activation(model, layer, batch, target);
}

}  // namespace

Tensor smoothgrad(AttributionKind inner, const ModelHandle& model, const LayerId& layer,
                  const ImageBatch& batch, int target, int n_samples, double sigma, std::uint64_t seed) {
  if (n_samples < 1) fail(ErrorKind::input, "smoothgrad needs at least one sample");
  if (!(sigma >= 0.0)) fail(ErrorKind::input, "smoothgrad sigma must be non-negative");
  Tensor mean;
  for (int s = 0; s < n_samples; ++s) {
    const Tensor sample = inner_attribution(inner, model, layer, perturb(batch, sigma, seed, s), target);
    if (s == 0) {
      mean = sample;
      continue;
    }
    // running mean keeps identical samples bit-exact
    auto m = mean.data();
    auto v = sample.data();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += (v[i] - m[i]) / (s + 1);
  }
  return mean;
}

Tensor raw_attribution(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                       const AttributionMethod& method, std::uint64_t seed) {
  if (method.smoothgrad) {
    return smoothgrad(method.inner, model, layer, batch, target, method.n_samples, method.sigma, seed);
  }
  return inner_attribution(method.inner, model, layer, batch, target);
}

AttributionMap channel_mean_score(const Tensor& raw) {
  AttributionMap map;
  map.values = Tensor({raw.batch(), 1, raw.height(), raw.width()});
  const double scale = 1.0 / raw.channels();
  for (int b = 0; b < raw.batch(); ++b) {
    for (int y = 0; y < raw.height(); ++y) {
      for (int x = 0; x < raw.width(); ++x) {
        double s = 0.0;
        for (int c = 0; c < raw.channels(); ++c) s += raw.at(b, c, y, x);
        map.values.at(b, 0, y, x) = s * scale;
      }
    }
  }
  return map;
}

AttributionMap attribute(const ModelHandle& model, const LayerId& layer, const ImageBatch& batch, int target,
                         const AttributionMethod& method, std::uint64_t seed) {
  AttributionMap map = channel_mean_score(raw_attribution(model, layer, batch, target, method, seed));
  map.target_class = target;
  map.layer = layer;
  map.method = method;
  return map;
}

}  // namespace cxplain
