#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"
#include "support.hpp"

using namespace cxtest;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::input;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cxplain_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("forward_from_layer after forward_to_layer reproduces forward_full") {
  const ModelHandle model = tiny_model();
  const ImageBatch batch = random_batch(model, 16, 12, 12, 11);
  const Matrix full = model.forward_full(batch);
  for (const LayerId& layer : model.layer_catalog()) {
    const Matrix split = model.forward_from_layer(layer, model.forward_to_layer(layer, batch));
    REQUIRE(split.rows() == full.rows());
    for (Eigen::Index i = 0; i < full.size(); ++i) CHECK(split.data()[i] == full.data()[i]);
  }
}

TEST_CASE("activation shapes follow the catalog") {
  const ModelHandle model = tiny_model();
  const ImageBatch batch = random_batch(model, 2, 12, 12, 1);
  const Tensor a1 = model.forward_to_layer(model.layer("relu1"), batch);
  const Tensor a2 = model.forward_to_layer(model.layer("relu2"), batch);
  CHECK(a1.shape() == Shape{2, 4, 12, 12});
  CHECK(a2.shape() == Shape{2, 6, 6, 6});
  CHECK(model.layer_channels(model.layer("relu2")) == 6);
  CHECK(model.deepest_layer().name == "relu2");
  CHECK(a1.min() >= 0.0);
  CHECK(a2.min() >= 0.0);
}

TEST_CASE("flexible models accept other input sizes") {
  const ModelHandle model = tiny_model();
  const ImageBatch batch = random_batch(model, 1, 24, 8, 2);
  CHECK(model.forward_full(batch).cols() == 4);
  CHECK(model.forward_to_layer(model.deepest_layer(), batch).shape() == Shape{1, 6, 12, 4});
}

TEST_CASE("batch composition does not change a sample's logits") {
  const ModelHandle model = tiny_model();
  const ImageBatch batch = random_batch(model, 5, 12, 12, 4);
  const Matrix all = model.forward_full(batch);
  for (int i = 0; i < 5; ++i) {
    const Matrix one = model.forward_full(batch.slice(i, 1));
    for (int c = 0; c < all.cols(); ++c) CHECK(one(0, c) == all(i, c));
  }
}

TEST_CASE("catalog and input errors") {
  const ModelHandle model = tiny_model();
  CHECK(kind_of([&] { model.layer("conv9"); }) == ErrorKind::catalog);
  const ImageBatch batch = random_batch(model, 1, 12, 12, 3);
  const Tensor a1 = model.forward_to_layer(model.layer("relu1"), batch);
  CHECK(kind_of([&] { model.forward_from_layer(model.layer("relu2"), a1); }) == ErrorKind::shape);
  CHECK(kind_of([&] { model.gradient_at_layer(model.layer("relu1"), a1, 7); }) == ErrorKind::input);

  nn::Network net;
  net.add(std::make_unique<nn::Conv2d>("conv1", 3, 2, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu1"));
  net.add(std::make_unique<nn::GlobalAvgPool>("gap"));
  net.add(std::make_unique<nn::Linear>("fc", 2, 2));
  CHECK(kind_of([&] {
          ModelHandle("bad", net, InputSize{true, 9, 9}, test_norm(), {{"conv1", true, 3}});
        }) == ErrorKind::config);
  CHECK(kind_of([&] {
          ModelHandle("bad", net, InputSize{true, 9, 9}, test_norm(), {{"nope", true, 3}});
        }) == ErrorKind::catalog);
  CHECK(kind_of([&] {
          ModelHandle("bad", net, InputSize{true, 9, 9}, test_norm(), {{"relu1", true, 3}, {"conv1", false, 3}});
        }) == ErrorKind::config);
}

TEST_CASE("fixed input models resize during preprocessing") {
  nn::Network net = tiny_model().network();
  const ModelHandle fixed("fixed", net, InputSize{false, 12, 12}, test_norm(), {{"relu2", true, 4}});
  std::mt19937_64 rng(5);
  const Image big = random_image(24, 24, rng);
  const Image images[] = {big};
  const ImageBatch batch = fixed.preprocess(images, {0});
  CHECK(batch.images.shape() == Shape{1, 3, 12, 12});
  const Image resized[] = {big.resize_bilinear(12, 12)};
  CHECK(bitwise_equal(batch.images, fixed.preprocess(resized, {0}).images));
  CHECK(kind_of([&] { fixed.forward_full(ImageBatch{Tensor(Shape{1, 3, 10, 10}), {0}}); }) == ErrorKind::input);
}

TEST_CASE("normalization is per channel") {
  const ModelHandle model = tiny_model();
  Image img(2, 2, 0.5);
  const Tensor t = model.normalize(img);
  CHECK(t.at(0, 0, 0, 0) == doctest::Approx(0.0));
  CHECK(t.at(0, 1, 1, 1) == doctest::Approx((0.5 - 0.45) / 0.2));
  CHECK(t.at(0, 2, 0, 1) == doctest::Approx((0.5 - 0.4) / 0.3));
}

TEST_CASE("gradient_at_layer matches central differences") {
  const ModelHandle model = tiny_model();
  const LayerId& layer = model.layer("relu1");
  const ImageBatch batch = random_batch(model, 1, 12, 12, 8);
  const Tensor acts = model.forward_to_layer(layer, batch);
  const LayerGradient g = model.gradient_at_layer(layer, acts, 2);
  const double eps = 1e-3;
  for (int c = 0; c < 4; ++c) {
    for (int y : {0, 5, 11}) {
      Tensor plus = acts, minus = acts;
      plus.at(0, c, y, 3) += eps;
      minus.at(0, c, y, 3) -= eps;
      const double fd = (model.forward_from_layer(layer, plus)(0, 2) - model.forward_from_layer(layer, minus)(0, 2)) /
                        (2 * eps);
      CHECK(fd == doctest::Approx(g.grad.at(0, c, y, 3)).epsilon(1e-6));
    }
  }
}

TEST_CASE("parameter gradients match central differences") {
  const ModelHandle model = tiny_model();
  const nn::Network& net = model.network();
  const ImageBatch batch = random_batch(model, 2, 8, 8, 9);
  const std::vector<Tensor> tr = net.trace(batch.images, 0, net.size());
  Tensor grad_out(tr.back().shape());
  grad_out.at(0, 1, 0, 0) = 1.0;
  grad_out.at(1, 3, 0, 0) = -0.5;
  std::vector<double> pg(net.param_count(), 0.0);
  net.backward(tr, grad_out, 0, pg);

  auto objective = [&](const nn::Network& n) {
    const Tensor out = n.forward(batch.images);
    return out.at(0, 1, 0, 0) - 0.5 * out.at(1, 3, 0, 0);
  };
  std::vector<double> p = net.flat_params();
  const double eps = 1e-5;
  for (std::size_t k = 0; k < p.size(); k += 7) {
    nn::Network a = net, b = net;
    std::vector<double> pp = p, pm = p;
    pp[k] += eps;
    pm[k] -= eps;
    a.set_flat_params(pp);
    b.set_flat_params(pm);
    const double fd = (objective(a) - objective(b)) / (2 * eps);
    CHECK(fd == doctest::Approx(pg[k]).epsilon(1e-5).scale(1e-6));
  }
}

TEST_CASE("predict breaks ties toward the lowest class") {
  Matrix logits(2, 3);
  logits << 1.0, 3.0, 3.0, 2.0, 2.0, 2.0;
  CHECK(argmax_row(logits, 0) == 1);
  CHECK(argmax_row(logits, 1) == 0);
  const Matrix p = softmax(logits);
  CHECK(p.row(1).sum() == doctest::Approx(1.0));
  CHECK(p(1, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("max pooling is supported for inference") {
  nn::MaxPool2d pool("mp", 2);
  Tensor x(Shape{1, 1, 2, 2});
  x.at(0, 0, 0, 1) = 3.0;
  x.at(0, 0, 1, 0) = -1.0;
  CHECK(pool.forward(x).at(0, 0, 0, 0) == 3.0);
}

TEST_CASE("model config round trip keeps weights bit-exact") {
  const fs::path dir = temp_dir("model_roundtrip");
  const ModelHandle model = tiny_model();
  model.save(dir / "model.json");
  const ModelHandle loaded = ModelHandle::load(dir / "model.json");
  CHECK(loaded.network().flat_params() == model.network().flat_params());
  CHECK(loaded.id() == model.id());
  CHECK(loaded.layer_catalog().size() == 2);
  CHECK(loaded.layer("relu1").receptive_crop == 4);
  CHECK(loaded.normalization().std == model.normalization().std);
  const ImageBatch batch = random_batch(model, 3, 12, 12, 21);
  CHECK(loaded.forward_full(batch) == model.forward_full(batch));

  Json cfg = read_json(dir / "model.json");
  cfg["num_classes"] = 9;
  write_json(dir / "bad.json", cfg);
  CHECK(kind_of([&] { ModelHandle::load(dir / "bad.json"); }) == ErrorKind::config);
}

TEST_CASE("dataset and png round trips") {
  const fs::path dir = temp_dir("dataset_roundtrip");
  const Dataset ds = random_dataset(7, 9, 6, 3, 4);
  ds.save(dir / "ds.cxds");
  const Dataset back = Dataset::load(dir / "ds.cxds");
  CHECK(back.size() == 7);
  CHECK(back.fingerprint() == ds.fingerprint());
  CHECK(back.image(5) == ds.image(5));
  CHECK(back.label(4) == 1);
  CHECK(back.num_classes() == 3);
  CHECK(ds.id_string(12) == "img_000012");

  ds.image(2).write_png(dir / "img.png");
  CHECK(Image::read_png(dir / "img.png") == ds.image(2));
}

TEST_CASE("CIFAR-10 binary records load") {
  const fs::path dir = temp_dir("cifar");
  std::string bytes;
  for (int r = 0; r < 2; ++r) {
    bytes.push_back(static_cast<char>(r == 0 ? 3 : 7));
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<char>((i + r) % 256));
  }
  write_text(dir / "data_batch_1.bin", bytes);
  const Dataset ds = Dataset::load(dir / "data_batch_1.bin");
  CHECK(ds.size() == 2);
  CHECK(ds.height() == 32);
  CHECK(ds.label(1) == 7);
  CHECK(ds.image(0).at(0, 0, 5) == doctest::Approx(5.0 / 255.0));
  CHECK(ds.image(1).at(2, 31, 31) == doctest::Approx(((2 * 1024 + 1023 + 1) % 256) / 255.0));
}
