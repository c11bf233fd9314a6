#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cxplain/concepts.hpp"
#include "cxplain/io.hpp"

namespace cxplain {

/// Unscaled activation vectors of the cells that survived the relative
/// attribution threshold.
struct ActivationBank {
  int class_id = 0;
  LayerId layer;
  Matrix vectors;  ///< (P, C)
  std::vector<CellProvenance> provenance;
  int image_count = 0;
  std::size_t cells_seen = 0;

  double retained_fraction() const noexcept {
    return cells_seen == 0 ? 0.0 : static_cast<double>(vectors.rows()) / static_cast<double>(cells_seen);
  }
};

inline constexpr double kBankThreshold = 0.25;

/// Per image, keeps cells whose attribution is at least `threshold` times
/// the image's largest cell attribution (images without a positive cell
/// contribute nothing). Rows are raw activation vectors.
ActivationBank filter_bank_cells(const Tensor& acts, const AttributionMap& attrib,
                                 std::span<const SourceId> source_ids, double threshold = kBankThreshold);

ActivationBank collect_hyperplane_pixels(const ModelHandle& model, const Dataset& dataset, int class_id,
                                         const LayerId& layer, const AttributionMethod& method,
                                         const CollectOptions& collect, std::uint64_t seed,
                                         const std::vector<int>* predictions = nullptr);

struct ProbeOptions {
  int epochs = 100;
  double lr = 0.01;
};

struct ProbeStats {
  int epochs = 0;
  double lr = 0.0;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  int count_a = 0;
  int count_b = 0;
  double retained_a = 0.0;  ///< fraction of cells kept in bank_a
  double retained_b = 0.0;
};

/// sigma(w . x + b) targets 1 for class_a rows and 0 for class_b rows.
struct Hyperplane {
  int class_a = 0;
  int class_b = 0;
  Vector w;
  double b = 0.0;
  ProbeStats stats;
  std::uint64_t seed = 0;
  std::string fingerprint;

  double decision(std::span<const double> x) const;
  double probability(std::span<const double> x) const;

  Json sidecar() const;
  /// `<stem>.bin` holds [w..., b] as one row; `<stem>.json` the sidecar.
  void save(const std::filesystem::path& stem) const;
  static Hyperplane load(const std::filesystem::path& stem);
};

/// Full-batch gradient descent on mean binary cross-entropy from w = 0,
/// b = 0. Deterministic; `seed` is recorded only.
Hyperplane train_hyperplane(const ActivationBank& bank_a, const ActivationBank& bank_b, std::uint64_t seed,
                            const ProbeOptions& options = {});

/// Mean of sigma(w . x + b) over the rows of `vectors`.
double mean_probability(const Hyperplane& h, const Matrix& vectors);
double probe_accuracy(const Hyperplane& h, const Matrix& a, const Matrix& b);

/// Retains cells with z = w . x + b > 0, scaled by z.
ScoredActivations score_by_hyperplane(const Tensor& acts, const Hyperplane& h, std::span<const SourceId> source_ids);

/// NMF over class_a activations filtered and scaled by the probe: the
/// concepts pro class_a versus class_b.
ConceptBasis contrast_concepts(const ModelHandle& model, const Dataset& dataset, const Hyperplane& h,
                               const LayerId& layer, const ConceptConfig& config,
                               const std::vector<int>* predictions = nullptr);

struct ShiftResult {
  int class_a = 0;
  int class_b = 0;
  std::vector<double> offsets;
  std::vector<double> pred_curve;  ///< mean softmax of class_a per offset
  double default_pred = 0.0;       ///< offset 0
  double shifted_pred = 0.0;       ///< max of pred_curve
  double best_offset = 0.0;
  double scale = 0.0;              ///< T of the default schedule, 0 if offsets were given
  int image_count = 0;

  Json to_json() const;
};

/// Ten offsets k/10 * T, k = 1..10, with T three times the mean L2 norm of
/// the images' cell activations at `layer`.
std::vector<double> default_offsets(const ModelHandle& model, const LayerId& layer, const ImageBatch& images,
                                    double* scale = nullptr);

/// Translates every cell by t * w/|w| and resumes the forward pass.
ShiftResult shifting_test(const ModelHandle& model, const LayerId& layer, const Hyperplane& h,
                          const ImageBatch& images_of_b, std::span<const double> offsets);

struct InsertionCondition {
  std::string name;
  std::vector<double> mean_softmax;  ///< aligned with InsertionReport::classes
  std::vector<int> majority;         ///< per image
};

struct InsertionReport {
  std::vector<int> classes;
  int image_count = 0;
  Box box;
  InsertionCondition original;
  InsertionCondition patched;
  InsertionCondition black;

  Json to_json() const;
};

/// Square side for the insertion patch: one 3x3 grid cell.
inline int default_patch_side(int height, int width) { return std::min(height, width) / 3; }

/// Inserts `patch` (raw pixels) at the bottom-right corner of every image,
/// and separately a black box (zeros after normalization) of the same size,
/// and reports the mean softmax of `classes` for each condition. When
/// `examples_dir` is non-empty, the first image is written before/after.
InsertionReport patch_insertion_test(const ModelHandle& model, std::span<const Image> images, const Image& patch,
                                     std::span<const int> classes,
                                     const std::filesystem::path& examples_dir = {});

/// Checks the shape of an insertion report; returns an empty string when
/// valid, otherwise the first problem found.
std::string validate_insertion_report(const Json& report);

/// Normalized (1, 3, H, W) tensor back to raw pixels.
Image denormalize(const ModelHandle& model, const Tensor& normalized, int sample = 0);

/// Probe store keyed by (class_a, class_b) and config fingerprint.
class HyperplaneCache {
 public:
  explicit HyperplaneCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::filesystem::path stem(int class_a, int class_b) const;
  Hyperplane get_or_train(int class_a, int class_b, const std::string& fingerprint,
                          const std::function<Hyperplane()>& train) const;

 private:
  std::filesystem::path dir_;
};

}  // namespace cxplain
