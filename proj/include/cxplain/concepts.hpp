#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cxplain/attribution.hpp"
#include "cxplain/dataset.hpp"
#include "cxplain/io.hpp"
#include "cxplain/model.hpp"
#include "cxplain/nmf.hpp"

namespace cxplain {

struct CellProvenance {
  SourceId source_id = 0;
  int cell_row = 0;
  int cell_col = 0;
  double score = 0.0;
};

/// One non-negative row per retained spatial cell.
struct ScoredActivations {
  Matrix matrix;
  std::vector<CellProvenance> provenance;

  Eigen::Index rows() const noexcept { return matrix.rows(); }
};

struct CollectOptions {
  int max_images = 500;
  int min_images = 50;
  int chunk = 64;
};

/// First `max_images` dataset images (in dataset order) whose majority
/// prediction is `class_id`. Ground-truth labels are not consulted.
/// `predictions`, when given, must hold the majority class of every image.
ImageBatch collect_class_images(const ModelHandle& model, const Dataset& dataset, int class_id,
                                const CollectOptions& options,
                                const std::vector<int>* predictions = nullptr);

/// Keeps cells with positive attribution and scales their activation
/// vectors by it. `acts` rows (batch index) correspond to `source_ids`.
ScoredActivations score_and_filter_activations(const Tensor& acts, const AttributionMap& attrib,
                                               std::span<const SourceId> source_ids);

/// Appends `more` to `into`.
void append_rows(ScoredActivations& into, ScoredActivations&& more);

struct SolverDiagnostics {
  int iterations = 0;
  double final_rel_error = 0.0;
  std::uint64_t seed = 0;
  int max_iter = 0;
  double tol = 0.0;
};

/// n non-negative concept directions in a layer's channel space.
struct ConceptBasis {
  int class_id = 0;
  std::optional<int> contrast_class;  ///< set for "pro class_id vs contrast_class" bases
  LayerId layer;
  int n = 0;
  Matrix basis;  ///< (n, C)
  SolverDiagnostics solver;
  std::string attribution;
  int image_count = 0;
  int row_count = 0;
  std::string fingerprint;

  Eigen::Index channels() const noexcept { return basis.cols(); }
  Json sidecar() const;
  /// Writes `<stem>.bin` and `<stem>.json`.
  void save(const std::filesystem::path& stem) const;
  static ConceptBasis load(const std::filesystem::path& stem);
};

/// Throws unless every basis row is non-negative and non-zero.
void validate_basis(const ConceptBasis& basis);

struct ConceptConfig {
  int n = 4;
  AttributionMethod attribution;
  CollectOptions collect;
  NmfOptions nmf;
  std::uint64_t seed = 0;  ///< drives NMF init and SmoothGrad noise

  Json to_json() const;
};

struct ClassActivations {
  ScoredActivations scored;
  int image_count = 0;
};

/// Collects predicted-as-class images and scores their cells at `layer`.
ClassActivations score_class_activations(const ModelHandle& model, const Dataset& dataset, int class_id,
                                         const LayerId& layer, const ConceptConfig& config,
                                         const std::vector<int>* predictions = nullptr);

/// NMF of already scored activations into `config.n` concepts.
ConceptBasis fit_class_concepts(const ClassActivations& acts, int class_id, const LayerId& layer,
                                const ConceptConfig& config, const std::string& fingerprint);

/// Fingerprint of everything that determines a class basis.
std::string concept_fingerprint(const ModelHandle& model, const Dataset& dataset, int class_id,
                                const LayerId& layer, const ConceptConfig& config);

/// Collect predicted-as-class images, score and filter their activations
/// at `layer` by attribution, and factorize with NMF into `n` concepts.
ConceptBasis extract_class_concepts(const ModelHandle& model, const Dataset& dataset, int class_id,
                                    const LayerId& layer, const ConceptConfig& config,
                                    const std::vector<int>* predictions = nullptr);

}  // namespace cxplain
