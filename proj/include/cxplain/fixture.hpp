#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cxplain/dataset.hpp"
#include "cxplain/model.hpp"

namespace cxplain {

/// Ten-class synthetic "shapes" dataset: class k draws 2-3 objects of shape
/// k % 5 (disk, square, ring, cross, bars) in color k / 5 (red, blue) over a
/// noisy tinted background, plus one distractor object in a neutral color.
/// Classes therefore share shapes and colors pairwise, which gives the
/// contrast tools something to separate.
struct SyntheticOptions {
  int per_class = 200;
  int side = 36;
  std::uint64_t seed = 7;
};

inline constexpr int kSyntheticClasses = 10;

Dataset make_synthetic_shapes(const SyntheticOptions& options);

struct FixtureOptions {
  int epochs = 30;  ///< cap
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double target_accuracy = 0.95;  ///< stop early once reached
  double min_accuracy = 0.80;     ///< below this after the cap -> fixture error
  std::uint64_t seed = 1;
  std::string model_id = "fixture-cnn";
};

struct FixtureEpoch {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

struct FixtureResult {
  ModelHandle model;
  std::vector<FixtureEpoch> history;
  double train_accuracy = 0.0;
};

/// Small flexible-input CNN: three conv/ReLU stages (the ReLUs are the
/// cataloged layers), average pooling between them, global average pooling
/// and a linear head.
nn::Network fixture_network(int num_classes);

/// Per-channel mean/std of the dataset pixels.
Normalization dataset_normalization(const Dataset& dataset);

/// Trains the fixture classifier with momentum SGD on cross-entropy.
/// Seed-deterministic. `progress` is called after every epoch.
FixtureResult train_fixture_model(const Dataset& dataset, const FixtureOptions& options,
                                  const std::function<void(const FixtureEpoch&)>& progress = {});

/// Fraction of images whose majority prediction equals the label.
double train_accuracy(const ModelHandle& model, const Dataset& dataset);

}  // namespace cxplain
