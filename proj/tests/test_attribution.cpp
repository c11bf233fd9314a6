#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cxplain/attribution.hpp"
#include "cxplain/error.hpp"
#include "support.hpp"

using namespace cxtest;

TEST_CASE("grad x act on a linear head equals the closed form") {
  const std::vector<double> w{0.5, -1.25, 2.0, 1.5, 0.25, -0.75};
  const ModelHandle model = linear_head_model(w, {0.1, -0.2});
  const LayerId& layer = model.layer("relu0");
  const ImageBatch batch = random_batch(model, 3, 6, 6, 17);
  const Tensor acts = model.forward_to_layer(layer, batch);
  for (int target : {0, 1}) {
    const Tensor attr = grad_times_activation(model, layer, batch, target);
    const AttributionMap map = channel_mean_score(attr);
    for (int b = 0; b < 3; ++b) {
      for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
          double mean = 0.0;
          for (int c = 0; c < 3; ++c) {
            const double expected = w[static_cast<std::size_t>(target * 3 + c)] * acts.at(b, c, y, x) / 36.0;
            CHECK(std::abs(attr.at(b, c, y, x) - expected) <= 1e-5 * std::max(1.0, std::abs(expected)));
            mean += expected / 3.0;
          }
          CHECK(map.at(b, y, x) == doctest::Approx(mean).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("grad x act agrees with finite differences") {
  const ModelHandle model = tiny_model();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const LayerId& layer = model.layer_catalog()[static_cast<std::size_t>(trial % 2)];
    const ImageBatch batch = random_batch(model, 1, 12, 12, 100 + static_cast<std::uint64_t>(trial));
    const int target = static_cast<int>(rng() % 4);
    const Tensor acts = model.forward_to_layer(layer, batch);
    const Tensor attr = grad_times_activation(model, layer, batch, target);
    const Shape s = acts.shape();
    const int c = static_cast<int>(rng() % static_cast<std::uint64_t>(s.c));
    const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(s.h));
    const int x = static_cast<int>(rng() % static_cast<std::uint64_t>(s.w));
    const double eps = 1e-3;
    Tensor plus = acts, minus = acts;
    plus.at(0, c, y, x) += eps;
    minus.at(0, c, y, x) -= eps;
    const double fd = (model.forward_from_layer(layer, plus)(0, target) -
                       model.forward_from_layer(layer, minus)(0, target)) / (2 * eps);
    const double expected = fd * acts.at(0, c, y, x);
    CHECK(std::abs(attr.at(0, c, y, x) - expected) <= 1e-2 * std::max(std::abs(expected), 1e-8));
  }
}

TEST_CASE("deeplift completeness against the white baseline") {
  const ModelHandle model = tiny_model();
  for (const LayerId& layer : model.layer_catalog()) {
    const ImageBatch batch = random_batch(model, 6, 12, 12, 31);
    const Tensor base = white_baseline(model, 12, 12);
    const Matrix logits = model.forward_full(batch);
    const Matrix ref = model.forward_full(ImageBatch{base, {0}});
    for (int target = 0; target < 4; ++target) {
      const Tensor attr = deeplift_rescale(model, layer, batch, target);
      for (int b = 0; b < 6; ++b) {
        double total = 0.0;
        for (double v : attr.sample(b)) total += v;
        const double delta = logits(b, target) - ref(0, target);
        CHECK(std::abs(total - delta) <= 1e-4 * std::abs(delta) + 1e-12);
      }
    }
  }
}

TEST_CASE("deeplift with the input as its own baseline is zero") {
  const ModelHandle model = tiny_model();
  const ImageBatch batch = random_batch(model, 1, 12, 12, 5);
  const Tensor attr = deeplift_rescale(model, model.layer("relu1"), batch, 1, batch.images);
  CHECK(attr.min() == 0.0);
  CHECK(attr.max() == 0.0);
}

TEST_CASE("deeplift rejects max pooling") {
  nn::Network net;
  net.add(std::make_unique<nn::Conv2d>("conv1", 3, 2, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu1"));
  net.add(std::make_unique<nn::MaxPool2d>("mp", 2));
  net.add(std::make_unique<nn::GlobalAvgPool>("gap"));
  net.add(std::make_unique<nn::Linear>("fc", 2, 2));
  net.init_weights(1);
  const ModelHandle model("mp", std::move(net), InputSize{true, 6, 6}, test_norm(), {{"relu1", true, 2}});
  const ImageBatch batch = random_batch(model, 1, 6, 6, 2);
  try {
    deeplift_rescale(model, model.layer("relu1"), batch, 0);
    FAIL("expected unsupported_op");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unsupported_op);
  }
  // Gradient-based attribution still works through max pooling.
  CHECK(grad_times_activation(model, model.layer("relu1"), batch, 0).all_finite());
}

TEST_CASE("smoothgrad with sigma 0 is the inner method") {
  const ModelHandle model = tiny_model();
  const LayerId& layer = model.deepest_layer();
  const ImageBatch batch = random_batch(model, 3, 12, 12, 8);
  CHECK(bitwise_equal(smoothgrad(AttributionKind::grad_x_act, model, layer, batch, 2, 7, 0.0, 99),
                      grad_times_activation(model, layer, batch, 2)));
  CHECK(bitwise_equal(smoothgrad(AttributionKind::deeplift, model, layer, batch, 1, 3, 0.0, 5),
                      deeplift_rescale(model, layer, batch, 1)));
}

TEST_CASE("smoothgrad variance shrinks like 1/n") {
  const ModelHandle model = tiny_model();
  const LayerId& layer = model.deepest_layer();
  const ImageBatch batch = random_batch(model, 1, 12, 12, 12);
  auto variance = [&](int n) {
    std::vector<double> v;
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const Tensor t = smoothgrad(AttributionKind::grad_x_act, model, layer, batch, 0, n, 0.5, seed);
      double s = 0.0;
      for (double x : t.data()) s += x;
      v.push_back(s);
    }
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(v.size() - 1);
    return var;
  };
  const double ratio = variance(2) / variance(8);
  CHECK(ratio > 2.0);
  CHECK(ratio < 8.0);
}

TEST_CASE("perturbation noise depends only on seed, source id and sample") {
  const ModelHandle model = tiny_model();
  ImageBatch batch = random_batch(model, 3, 12, 12, 6);
  batch.source_ids = {40, 41, 42};
  const ImageBatch noisy = perturb(batch, 0.3, 7, 2);
  const ImageBatch alone = perturb(batch.slice(2, 1), 0.3, 7, 2);
  CHECK(bitwise_equal(noisy.images.slice_batch(2, 1), alone.images));
  CHECK(!bitwise_equal(noisy.images, perturb(batch, 0.3, 7, 3).images));
  CHECK(!bitwise_equal(noisy.images, perturb(batch, 0.3, 8, 2).images));
  CHECK(bitwise_equal(perturb(batch, 0.0, 7, 2).images, batch.images));
}

TEST_CASE("channel mean score matches a brute-force mean") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor raw(Shape{2, 5, 3, 4});
  for (double& v : raw.data()) v = n(rng);
  const AttributionMap map = channel_mean_score(raw);
  CHECK(map.values.shape() == Shape{2, 1, 3, 4});
  for (int b = 0; b < 2; ++b) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 4; ++x) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += raw.at(b, c, y, x);
        CHECK(map.at(b, y, x) == doctest::Approx(s / 5.0).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("attribute fills metadata and is reproducible") {
  const ModelHandle model = tiny_model();
  const LayerId& layer = model.deepest_layer();
  const ImageBatch batch = random_batch(model, 2, 12, 12, 3);
  const AttributionMethod m = AttributionMethod::parse("smoothgrad:deeplift:4:0.2");
  const AttributionMap a = attribute(model, layer, batch, 3, m, 11);
  const AttributionMap b = attribute(model, layer, batch, 3, m, 11);
  CHECK(a.target_class == 3);
  CHECK(a.layer == layer);
  CHECK(a.method.smoothgrad);
  CHECK(bitwise_equal(a.values, b.values));
  CHECK(a.values.shape() == Shape{2, 1, 6, 6});
}

TEST_CASE("attribution method names round trip") {
  for (const char* text : {"grad_x_act", "deeplift", "smoothgrad:grad_x_act:20:0.25", "smoothgrad:deeplift:5:0.5"}) {
    CHECK(AttributionMethod::parse(text).str() == text);
  }
  CHECK(AttributionMethod{}.str() == "grad_x_act");
  CHECK_THROWS_AS(AttributionMethod::parse("integrated"), Error);
  CHECK_THROWS_AS(AttributionMethod::parse("smoothgrad:deeplift:0:0.5"), Error);
  CHECK_THROWS_AS(AttributionMethod::parse("smoothgrad:deeplift:3"), Error);
}
