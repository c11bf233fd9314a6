#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cxplain/concepts.hpp"
#include "cxplain/crop_index.hpp"
#include "cxplain/io.hpp"

namespace cxplain {

struct ConceptVisualization {
  int concept_index = 0;
  std::vector<CropHit> crops;  ///< descending cosine
  bool truncated = false;
};

struct StitchResult {
  double softmax_pred_target = 0.0;
  int majority_class = -1;
  bool passed = false;  ///< majority_class == target
  std::vector<std::pair<int, double>> top5;
  bool resized = false;  ///< the model's fixed-size policy resized the stack
  int height = 0;
  int width = 0;

  Json to_json() const;
};

struct Explanation {
  int class_id = 0;
  LayerId layer;
  int n = 0;
  int m = 0;
  Exclusion exclusion = Exclusion::strict;
  std::vector<ConceptVisualization> visualizations;
  StitchResult stitch_result;
  std::string config_fingerprint;
  std::string note;  ///< why the stitch could not be built, if it could not
};

std::vector<ConceptVisualization> visualize_concepts(const ConceptBasis& basis, const CropIndex& index, int m,
                                                     Exclusion exclusion, int target);

/// n rows by m columns of crops; empty slots stay black.
Image render_grid(std::span<const ConceptVisualization> vis, const CropIndex& index, const Dataset& dataset, int m);

/// Top-1 crop of every concept stacked vertically, in concept order.
Image stitch_image(std::span<const ConceptVisualization> vis, const CropIndex& index, const Dataset& dataset);

StitchResult stitching_test(const ModelHandle& model, const Image& stitched, int target);

/// Visualizes a basis and runs the stitching test on it.
Explanation explain_basis(const ModelHandle& model, const Dataset& dataset, const CropIndex& index,
                          const ConceptBasis& basis, int m, Exclusion exclusion);

Json explanation_json(const Explanation& e, const CropIndex& index);
/// Writes explanation.json, grid.png and stitched.png into `dir`.
void write_explanation(const std::filesystem::path& dir, const Explanation& e, const CropIndex& index,
                       const Dataset& dataset);

}  // namespace cxplain
