#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxplain/concepts.hpp"
#include "cxplain/contrast.hpp"
#include "cxplain/crop_index.hpp"
#include "cxplain/explain.hpp"

namespace cxplain {

/// Everything an experiment run needs. Relative paths in a config file are
/// resolved against the file's directory.
struct ExperimentConfig {
  std::filesystem::path model_config;
  std::filesystem::path dataset;
  std::filesystem::path output_dir = "cxplain_out";
  std::vector<std::string> layers;  ///< empty: the deepest cataloged layer
  std::vector<int> n_values{4};
  AttributionMethod attribution;
  int max_images = 500;
  int min_images = 50;
  Exclusion exclusion = Exclusion::strict;
  int m = 8;
  std::uint64_t seed = 0;
  int class_stride = 1;
  std::vector<int> classes;  ///< empty: every class, subsampled by class_stride
  NmfOptions nmf;
  std::vector<int> sample_counts{50, 100, 200, 300, 400, 500, 600, 700, 800, 900};
  int quiz_items = 50;
  int quiz_n = 4;
  ProbeOptions probe;
  int probe_max_images = 200;
  int shift_targets = 10;  ///< random contrast targets per class
  int shift_images = 100;
  int workers = 0;  ///< 0: hardware concurrency

  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig from_json(const Json& j, const std::filesystem::path& base = {});
  Json to_json() const;
  /// Checks value ranges and that the referenced files exist.
  void validate() const;

  ConceptConfig concept_config(int n) const;
  CollectOptions collect_options() const;
  std::vector<int> class_list(int num_classes) const;
};

/// Lazily loaded model, dataset, prediction cache and per-layer crop
/// indices (persisted under <output_dir>/index/<layer>).
class Workspace {
 public:
  explicit Workspace(ExperimentConfig config);

  const ExperimentConfig& config() const noexcept { return config_; }
  const ModelHandle& model();
  const Dataset& dataset();
  const std::vector<int>& predictions();
  /// Catalog entry by name; an empty name selects the deepest layer.
  const LayerId& layer(const std::string& name);
  std::vector<LayerId> layers();
  const CropIndex& index(const LayerId& layer);
  /// Builds (or rebuilds) the index and stores it on disk.
  const CropIndex& rebuild_index(const LayerId& layer);
  std::filesystem::path index_dir(const LayerId& layer) const;
  HyperplaneCache probe_cache(const LayerId& layer) const;

 private:
  ExperimentConfig config_;
  std::unique_ptr<ModelHandle> model_;
  std::unique_ptr<Dataset> dataset_;
  std::optional<std::vector<int>> predictions_;
  std::map<std::string, CropIndex> indices_;
};

struct ClassResult {
  int class_id = 0;
  bool ok = false;
  std::string error;  ///< failure message when !ok
  double softmax_pred_target = 0.0;
  int majority_class = -1;
  bool passed = false;

  Json to_json() const;
  static ClassResult from_json(const Json& j);
};

/// One point of a sweep: aggregates over the evaluated classes. Failed
/// classes count with prediction 0 and as not passed.
struct SweepCell {
  std::map<std::string, Json> axes;
  std::vector<ClassResult> classes;
  double average_pred = 0.0;
  double match_rate = 0.0;
  int failures = 0;
  double runtime_seconds = 0.0;

  void aggregate();
  Json to_json() const;
};

struct SweepReport {
  std::string name;
  std::vector<std::string> axis_names;
  std::vector<SweepCell> cells;

  Json to_json() const;
  std::string to_csv() const;
  /// Writes <name>.json, <name>.csv and <name>.png into `dir`.
  void write(const std::filesystem::path& dir) const;
};

/// Line plot of match_rate (green) and average_pred (blue) over the cells.
Image plot_sweep(const SweepReport& report, int width = 480, int height = 240);

struct SuiteOptions {
  LayerId layer;
  int n = 4;
  int max_images = 500;
  Exclusion exclusion = Exclusion::strict;
};

/// Explains and stitch-tests every configured class. Per-class artifacts go
/// to <cell_dir>/class_<k>/, the aggregate to <cell_dir>/cell.json.
SweepCell run_class_suite(Workspace& ws, const SuiteOptions& options, const std::filesystem::path& cell_dir);

/// Re-aggregates a cell from its per-class result.json files.
SweepCell recompute_cell(const std::filesystem::path& cell_dir);

/// Cartesian sweep over the configured layers and n values. Scored
/// activations are computed once per (layer, class) and shared across n.
SweepReport grid_search(Workspace& ws, Exclusion exclusion);

/// Sweep over the configured sample counts at one layer and n.
SweepReport sample_count_sweep(Workspace& ws, const LayerId& layer, int n, Exclusion exclusion);

struct QuizItem {
  int class_id = 0;
  int concept_main = 0;
  int concept_intruder = 0;
  std::vector<CropRecord> crops;  ///< five, shuffled
  int answer_index = 0;
};

struct IntruderQuiz {
  std::uint64_t seed = 0;
  std::vector<QuizItem> items;
  std::vector<std::string> warnings;

  Json questions_json() const;  ///< without answers
  Json answers_json() const;
};

/// Explanations must carry at least four crops per concept. Classes that
/// cannot supply an item are skipped with a warning.
IntruderQuiz make_intruder_quiz(std::span<const Explanation> explanations, const CropIndex& index, int items,
                                std::uint64_t seed);

/// quiz.json, answers.json and items/item_<k>.png (five crops side by side).
void write_quiz(const std::filesystem::path& dir, const IntruderQuiz& quiz, const CropIndex& index,
                const Dataset& dataset);

/// Trains (or loads) the probe for (a, b) at `layer`.
Hyperplane pair_hyperplane(Workspace& ws, const LayerId& layer, int class_a, int class_b);

/// Shifting test of one pair on up to shift_images images predicted as b.
ShiftResult run_shift(Workspace& ws, const LayerId& layer, int class_a, int class_b);

struct ShiftSuite {
  std::vector<std::pair<int, int>> pairs;
  std::vector<ShiftResult> results;
  std::vector<std::string> failures;

  double improved_fraction() const;
  Json to_json() const;
  std::string to_csv() const;
};

/// For each configured class A, `shift_targets` distinct random B != A drawn
/// from a seeded generator.
std::vector<std::pair<int, int>> sample_shift_pairs(const std::vector<int>& classes, int num_classes, int per_class,
                                                    std::uint64_t seed);

ShiftSuite run_shift_suite(Workspace& ws, const LayerId& layer, const std::vector<std::pair<int, int>>& pairs);

}  // namespace cxplain
