#include "cxplain/explain.hpp"

#include <algorithm>
#include <numeric>

#include "cxplain/error.hpp"

namespace cxplain {

Json StitchResult::to_json() const {
  Json top = Json::array();
  for (const auto& [cls, p] : top5) top.push_back({{"class", cls}, {"softmax", p}});
  return Json{{"softmax_pred_target", softmax_pred_target},
              {"majority_class", majority_class},
              {"passed", passed},
              {"top5", top},
              {"resized", resized},
              {"height", height},
              {"width", width}};
}

std::vector<ConceptVisualization> visualize_concepts(const ConceptBasis& basis, const CropIndex& index, int m,
                                                     Exclusion exclusion, int target) {
  if (basis.layer.name != index.layer.name) {
    fail(ErrorKind::input, "basis layer '" + basis.layer.name + "' differs from index layer '" +
                               index.layer.name + "'");
  }
  if (m < 1) fail(ErrorKind::input, "m must be at least 1");
  std::vector<ConceptVisualization> out;
  for (Eigen::Index r = 0; r < basis.basis.rows(); ++r) {
    const Eigen::VectorXd v = basis.basis.row(r).transpose();
    TopK top = topk_crops(index, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), m,
                          exclusion, target);
    out.push_back({static_cast<int>(r), std::move(top.hits), top.truncated});
  }
  return out;
}

Image render_grid(std::span<const ConceptVisualization> vis, const CropIndex& index, const Dataset& dataset, int m) {
  const int side = index.crop_side;
  Image grid(static_cast<int>(vis.size()) * side, m * side);
  for (std::size_t row = 0; row < vis.size(); ++row) {
    const auto& crops = vis[row].crops;
    for (std::size_t col = 0; col < crops.size() && col < static_cast<std::size_t>(m); ++col) {
      grid.paste(crop_pixels(dataset, index.records[crops[col].record]), static_cast<int>(col) * side,
                 static_cast<int>(row) * side);
    }
  }
  return grid;
}

Image stitch_image(std::span<const ConceptVisualization> vis, const CropIndex& index, const Dataset& dataset) {
  if (vis.empty()) fail(ErrorKind::input, "nothing to stitch");
  std::vector<Image> parts;
  for (const auto& v : vis) {
    if (v.crops.empty()) {
      fail(ErrorKind::input, "concept " + std::to_string(v.concept_index) + " has no visualization crop");
    }
    parts.push_back(crop_pixels(dataset, index.records[v.crops.front().record]));
  }
  return Image::vstack(parts);
}

StitchResult stitching_test(const ModelHandle& model, const Image& stitched, int target) {
  const Image images[] = {stitched};
  const ImageBatch batch = model.preprocess(images, {0});
  const Matrix probs = softmax(model.forward_full(batch));
  StitchResult r;
  r.softmax_pred_target = probs(0, target);
  r.majority_class = argmax_row(probs, 0);
  r.passed = r.majority_class == target;
  r.resized = !model.input_size().flexible &&
              (stitched.height() != model.input_size().height || stitched.width() != model.input_size().width);
  r.height = stitched.height();
  r.width = stitched.width();
  std::vector<int> order(static_cast<std::size_t>(probs.cols()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(0, a) > probs(0, b); });
  for (std::size_t i = 0; i < order.size() && i < 5; ++i) r.top5.emplace_back(order[i], probs(0, order[i]));
  return r;
}

Explanation explain_basis(const ModelHandle& model, const Dataset& dataset, const CropIndex& index,
                          const ConceptBasis& basis, int m, Exclusion exclusion) {
  Explanation e;
  e.class_id = basis.class_id;
  e.layer = basis.layer;
  e.n = basis.n;
  e.m = m;
  e.exclusion = exclusion;
  e.config_fingerprint = basis.fingerprint;
  e.visualizations = visualize_concepts(basis, index, m, exclusion, basis.class_id);
  const bool complete = std::all_of(e.visualizations.begin(), e.visualizations.end(),
                                    [](const ConceptVisualization& v) { return !v.crops.empty(); });
  if (complete) {
    e.stitch_result = stitching_test(model, stitch_image(e.visualizations, index, dataset), basis.class_id);
  } else {
    e.note = "no crop passes the exclusion filter for at least one concept";
  }
  return e;
}

Json explanation_json(const Explanation& e, const CropIndex& index) {
  Json concepts = Json::array();
  for (const auto& v : e.visualizations) {
    Json crops = Json::array();
    for (const auto& hit : v.crops) {
      const CropRecord& r = index.records[hit.record];
      crops.push_back({{"record", hit.record},
                       {"source_id", r.source_id},
                       {"grid", {r.grid_row, r.grid_col}},
                       {"bbox", {r.bbox.x, r.bbox.y, r.bbox.width, r.bbox.height}},
                       {"crop_pred", r.crop_pred},
                       {"image_pred", r.image_pred},
                       {"cosine", hit.cosine}});
    }
    concepts.push_back({{"concept", v.concept_index}, {"truncated", v.truncated}, {"crops", crops}});
  }
  Json j{{"class", e.class_id},
         {"layer", e.layer.name},
         {"n", e.n},
         {"m", e.m},
         {"exclusion", to_string(e.exclusion)},
         {"config_fingerprint", e.config_fingerprint},
         {"concepts", concepts},
         {"stitch", e.stitch_result.to_json()}};
  if (!e.note.empty()) j["note"] = e.note;
  return j;
}

void write_explanation(const std::filesystem::path& dir, const Explanation& e, const CropIndex& index,
                       const Dataset& dataset) {
  write_json(dir / "explanation.json", explanation_json(e, index));
  render_grid(e.visualizations, index, dataset, e.m).write_png(dir / "grid.png");
  if (e.note.empty()) stitch_image(e.visualizations, index, dataset).write_png(dir / "stitched.png");
}

}  // namespace cxplain
