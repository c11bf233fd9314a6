#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "cxplain/crop_index.hpp"
#include "cxplain/dataset.hpp"
#include "cxplain/model.hpp"
#include "cxplain/nn.hpp"

namespace cxtest {

using namespace cxplain;

inline Normalization test_norm() {
  Normalization n;
  n.mean = {0.5, 0.45, 0.4};
  n.std = {0.25, 0.2, 0.3};
  return n;
}

/// conv(3->4) relu1 avgpool conv(4->6) relu2 gap fc; flexible, reference 12x12.
inline ModelHandle tiny_model(std::uint64_t seed = 3, int classes = 4) {
  nn::Network net;
  net.add(std::make_unique<nn::Conv2d>("conv1", 3, 4, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu1"));
  net.add(std::make_unique<nn::AvgPool2d>("pool1", 2));
  net.add(std::make_unique<nn::Conv2d>("conv2", 4, 6, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu2"));
  net.add(std::make_unique<nn::GlobalAvgPool>("gap"));
  net.add(std::make_unique<nn::Linear>("fc", 6, classes));
  net.init_weights(seed);
  // Small positive biases keep most units alive so gradients are informative.
  std::vector<double> p = net.flat_params();
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < net.size(); ++i) {
    const std::size_t count = net.layer(i).params().size();
    if (net.layer(i).kind() == "conv2d") {
      const std::size_t out = i == 0 ? 4 : 6;
      for (std::size_t k = offset + count - out; k < offset + count; ++k) p[k] = u(rng);
    }
    offset += count;
  }
  net.set_flat_params(p);
  return ModelHandle("tiny", std::move(net), InputSize{true, 12, 12}, test_norm(),
                     {{"relu1", true, 4}, {"relu2", true, 4}});
}

/// relu0 (identity on the normalized input, cataloged) -> gap -> fc, for
/// closed-form attribution checks. `weights` is (classes x 3) row-major.
inline ModelHandle linear_head_model(const std::vector<double>& weights, const std::vector<double>& bias) {
  const int classes = static_cast<int>(bias.size());
  nn::Network net;
  net.add(std::make_unique<nn::ReLU>("relu0"));
  net.add(std::make_unique<nn::GlobalAvgPool>("gap"));
  net.add(std::make_unique<nn::Linear>("fc", 3, classes));
  std::vector<double> p = weights;
  p.insert(p.end(), bias.begin(), bias.end());
  net.set_flat_params(p);
  return ModelHandle("linear-head", std::move(net), InputSize{true, 6, 6}, test_norm(), {{"relu0", true, 2}});
}

inline Image random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (double& v : img.pixels()) v = std::round(u(rng) * 255.0) / 255.0;
  return img;
}

inline Dataset random_dataset(int count, int h, int w, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset ds(h, w);
  for (int i = 0; i < count; ++i) ds.add(random_image(h, w, rng), i % classes);
  return ds;
}

inline ImageBatch random_batch(const ModelHandle& model, int count, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> images;
  std::vector<SourceId> ids;
  for (int i = 0; i < count; ++i) {
    images.push_back(random_image(h, w, rng));
    ids.push_back(static_cast<SourceId>(i));
  }
  return model.preprocess(images, ids);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

/// Full scan over raw embeddings in long double; sorted by cosine
/// descending, then record index.
inline std::vector<CropHit> brute_topk(const CropIndex& index, const std::vector<double>& q, int k, Exclusion ex,
                                       int target) {
  long double qn = 0.0L;
  for (double v : q) qn += static_cast<long double>(v) * v;
  qn = std::sqrt(qn);
  std::vector<std::pair<long double, std::size_t>> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const CropRecord& r = index.records[i];
    const bool keep = ex == Exclusion::none || (ex == Exclusion::crop && r.crop_pred != target) ||
                      (ex == Exclusion::strict && r.crop_pred != target && r.image_pred != target);
    if (!keep) continue;
    long double dot = 0.0L, en = 0.0L;
    for (std::size_t c = 0; c < q.size(); ++c) {
      const long double e = index.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      dot += e * q[c];
      en += e * e;
    }
    all.emplace_back(en == 0.0L ? 0.0L : dot / (std::sqrt(en) * qn), i);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<CropHit> out;
  for (std::size_t i = 0; i < all.size() && i < static_cast<std::size_t>(k); ++i) {
    out.push_back({all[i].second, static_cast<double>(all[i].first)});
  }
  return out;
}

/// Same records in the same order, cosines within `tol`.
inline bool same_hits(const std::vector<CropHit>& a, const std::vector<CropHit>& b, double tol = 1e-12) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].record != b[i].record || std::abs(a[i].cosine - b[i].cosine) > tol) return false;
  }
  return true;
}

}  // namespace cxtest
