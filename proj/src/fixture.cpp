#include "cxplain/fixture.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "cxplain/error.hpp"
#include "cxplain/parallel.hpp"

namespace cxplain {

namespace {

using Rgb = std::array<double, 3>;

enum class ShapeKind { disk, square, ring, cross, bars };

// Coverage of the pixel at offset (dx, dy) from an object's center.
bool inside(ShapeKind kind, double dx, double dy, double r) {
  const double d = std::hypot(dx, dy);
  switch (kind) {
    case ShapeKind::disk:
      return d <= r;
    case ShapeKind::square:
      return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    case ShapeKind::ring:
      return d <= r && d >= r * 0.55;
    case ShapeKind::cross:
      return (std::abs(dx) <= r * 0.3 && std::abs(dy) <= r) || (std::abs(dy) <= r * 0.3 && std::abs(dx) <= r);
    case ShapeKind::bars:
      return std::abs(dx) <= r && std::abs(dy) <= r &&
             static_cast<int>(std::floor((dy + r) / std::max(1.0, r * 0.5))) % 2 == 0;
  }
  return false;
}

struct Placed {
  double x, y, r;
};

void draw(Image& img, ShapeKind kind, const Placed& p, const Rgb& color) {
  const int x0 = std::max(0, static_cast<int>(std::floor(p.x - p.r - 1)));
  const int x1 = std::min(img.width() - 1, static_cast<int>(std::ceil(p.x + p.r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(p.y - p.r - 1)));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(p.y + p.r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (!inside(kind, x + 0.5 - p.x, y + 0.5 - p.y, p.r)) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[static_cast<std::size_t>(c)];
    }
  }
}

Rgb jitter(Rgb base, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.08, 0.08);
  for (double& v : base) v = std::clamp(v + u(rng), 0.0, 1.0);
  return base;
}

Image synth_image(int cls, int side, std::mt19937_64& rng) {
  static constexpr std::array<Rgb, 2> kColors{Rgb{0.85, 0.15, 0.15}, Rgb{0.15, 0.3, 0.85}};
  static constexpr std::array<Rgb, 2> kDistractors{Rgb{0.2, 0.75, 0.2}, Rgb{0.85, 0.8, 0.15}};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);

  Image img(side, side);
  const double gray = 0.4 + 0.2 * unit(rng);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double g = gray + noise(rng);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(g + noise(rng) * 0.5, 0.0, 1.0);
    }
  }

  const int objects = 2 + static_cast<int>(unit(rng) * 2.0);
  std::vector<Placed> placed;
  auto place = [&](double r) {
    Placed best{0, 0, r};
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Placed p{r + unit(rng) * (side - 2 * r), r + unit(rng) * (side - 2 * r), r};
      best = p;
      const bool clear = std::all_of(placed.begin(), placed.end(), [&](const Placed& q) {
        return std::hypot(p.x - q.x, p.y - q.y) > p.r + q.r + 1.0;
      });
      if (clear) break;
    }
    placed.push_back(best);
    return best;
  };
  auto radius = [&] { return 4.0 + 2.0 * unit(rng); };

  const auto kind = static_cast<ShapeKind>(cls % 5);
  const Rgb& color = kColors[static_cast<std::size_t>(cls / 5)];
  for (int i = 0; i < objects; ++i) draw(img, kind, place(radius()), jitter(color, rng));

  auto other = static_cast<ShapeKind>(static_cast<int>(unit(rng) * 5.0) % 5);
  draw(img, other, place(radius()), jitter(kDistractors[unit(rng) < 0.5 ? 0 : 1], rng));
  return img;
}

Tensor normalized_batch(const Dataset& ds, const Normalization& norm, std::span<const SourceId> ids) {
  Tensor t(Shape{static_cast<int>(ids.size()), 3, ds.height(), ds.width()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Image img = ds.image(ids[i]);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < ds.height(); ++y) {
        for (int x = 0; x < ds.width(); ++x) {
          t.at(static_cast<int>(i), c, y, x) = (img.at(c, y, x) - norm.mean[static_cast<std::size_t>(c)]) /
                                               norm.std[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  return t;
}

}  // namespace

Dataset make_synthetic_shapes(const SyntheticOptions& options) {
  if (options.per_class < 1) fail(ErrorKind::input, "per_class must be positive");
  if (options.side < 16) fail(ErrorKind::input, "synthetic images need a side of at least 16");
  Dataset ds(options.side, options.side);
  std::mt19937_64 rng(options.seed);
  // Interleave classes so any prefix of the dataset is balanced.
  for (int i = 0; i < options.per_class; ++i) {
    for (int cls = 0; cls < kSyntheticClasses; ++cls) ds.add(synth_image(cls, options.side, rng), cls);
  }
  return ds;
}

nn::Network fixture_network(int num_classes) {
  nn::Network net;
  net.add(std::make_unique<nn::Conv2d>("conv1", 3, 16, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu1"));
  net.add(std::make_unique<nn::AvgPool2d>("pool1", 2));
  net.add(std::make_unique<nn::Conv2d>("conv2", 16, 32, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu2"));
  net.add(std::make_unique<nn::AvgPool2d>("pool2", 2));
  net.add(std::make_unique<nn::Conv2d>("conv3", 32, 32, 3, 1));
  net.add(std::make_unique<nn::ReLU>("relu3"));
  net.add(std::make_unique<nn::GlobalAvgPool>("gap"));
  net.add(std::make_unique<nn::Linear>("fc", 32, num_classes));
  return net;
}

Normalization dataset_normalization(const Dataset& dataset) {
  if (dataset.empty()) fail(ErrorKind::input, "empty dataset");
  std::array<double, 3> sum{}, sq{};
  double count = 0.0;
  for (SourceId id = 0; id < dataset.size(); ++id) {
    const Image img = dataset.image(id);
    const auto plane = static_cast<std::size_t>(img.height()) * static_cast<std::size_t>(img.width());
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = img.pixels()[c * plane + k];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  Normalization n;
  for (std::size_t c = 0; c < 3; ++c) {
    n.mean[c] = sum[c] / count;
    n.std[c] = std::max(1e-6, std::sqrt(std::max(0.0, sq[c] / count - n.mean[c] * n.mean[c])));
  }
  return n;
}

double train_accuracy(const ModelHandle& model, const Dataset& dataset) {
  const std::vector<int> preds = model.predict_dataset(dataset);
  std::size_t hits = 0;
  for (SourceId id = 0; id < dataset.size(); ++id) hits += preds[id] == dataset.label(id) ? 1 : 0;
  return dataset.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(dataset.size());
}

FixtureResult train_fixture_model(const Dataset& dataset, const FixtureOptions& options,
                                  const std::function<void(const FixtureEpoch&)>& progress) {
  if (dataset.empty()) fail(ErrorKind::fixture, "cannot train on an empty dataset");
  if (options.batch_size < 1 || options.epochs < 1) fail(ErrorKind::fixture, "bad training options");
  const int classes = dataset.num_classes();
  const Normalization norm = dataset_normalization(dataset);
  nn::Network net = fixture_network(classes);
  net.init_weights(options.seed);

  const std::size_t np = net.param_count();
  std::vector<double> params = net.flat_params();
  std::vector<double> velocity(np, 0.0);
  std::vector<SourceId> order(dataset.size());
  std::iota(order.begin(), order.end(), SourceId{0});
  std::mt19937_64 rng(derive_seed(options.seed, 0x5eed));

  const auto bs = static_cast<std::size_t>(options.batch_size);
  const unsigned workers = default_workers();
  std::vector<FixtureEpoch> history;
  double accuracy = 0.0;

  auto make_handle = [&] {
    std::vector<LayerId> catalog;
    for (const char* name : {"relu1", "relu2", "relu3"}) catalog.push_back({name, true, dataset.height() / 3});
    return ModelHandle(options.model_id, net, InputSize{true, dataset.height(), dataset.width()}, norm, catalog);
  };

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t count = std::min(bs, order.size() - begin);
      // Split the batch into per-worker shards; shard gradients are summed in
      // shard order so the result does not depend on scheduling.
      const std::size_t shards = std::min<std::size_t>(workers, count);
      std::vector<std::vector<double>> grads(shards, std::vector<double>(np, 0.0));
      std::vector<double> shard_loss(shards, 0.0);
      std::vector<std::size_t> shard_correct(shards, 0);
      parallel_for(
          shards,
          [&](std::size_t s) {
            const std::size_t lo = begin + s * count / shards;
            const std::size_t hi = begin + (s + 1) * count / shards;
            std::span<const SourceId> ids(order.data() + lo, hi - lo);
            const Tensor x = normalized_batch(dataset, norm, ids);
            const std::vector<Tensor> tr = net.trace(x, 0, net.size());
            const Tensor& logits = tr.back();
            Tensor g(logits.shape());
            for (int i = 0; i < logits.batch(); ++i) {
              const auto row = logits.sample(i);
              const double mx = *std::max_element(row.begin(), row.end());
              double z = 0.0;
              for (double v : row) z += std::exp(v - mx);
              const int label = dataset.label(ids[static_cast<std::size_t>(i)]);
              const auto best = std::max_element(row.begin(), row.end()) - row.begin();
              if (best == label) ++shard_correct[s];
              shard_loss[s] += std::log(z) + mx - row[static_cast<std::size_t>(label)];
              auto gr = g.sample(i);
              for (std::size_t k = 0; k < row.size(); ++k) {
                gr[k] = (std::exp(row[k] - mx) / z - (static_cast<int>(k) == label ? 1.0 : 0.0)) /
                        static_cast<double>(count);
              }
            }
            net.backward(tr, g, 0, grads[s]);
          },
          workers);
      for (std::size_t s = 0; s < shards; ++s) {
        loss_sum += shard_loss[s];
        correct += shard_correct[s];
      }
      for (std::size_t k = 0; k < np; ++k) {
        double grad = options.weight_decay * params[k];
        for (std::size_t s = 0; s < shards; ++s) grad += grads[s][k];
        velocity[k] = options.momentum * velocity[k] - options.lr * grad;
        params[k] += velocity[k];
      }
      net.set_flat_params(params);
    }
    FixtureEpoch e{epoch, loss_sum / static_cast<double>(order.size()),
                   static_cast<double>(correct) / static_cast<double>(order.size())};
    if (!std::isfinite(e.loss)) fail(ErrorKind::fixture, "training diverged at epoch " + std::to_string(epoch));
    history.push_back(e);
    if (progress) progress(e);
    if (e.train_accuracy >= options.target_accuracy) {
      accuracy = train_accuracy(make_handle(), dataset);
      if (accuracy >= options.target_accuracy) break;
    }
  }

  ModelHandle model = make_handle();
  accuracy = train_accuracy(model, dataset);
  if (accuracy < options.min_accuracy) {
    fail(ErrorKind::fixture, "fixture reached only " + std::to_string(accuracy) + " train accuracy");
  }
  return FixtureResult{std::move(model), std::move(history), accuracy};
}

}  // namespace cxplain
