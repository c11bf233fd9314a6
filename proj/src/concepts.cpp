#include "cxplain/concepts.hpp"

#include <algorithm>

#include "cxplain/error.hpp"

namespace cxplain {

ImageBatch collect_class_images(const ModelHandle& model, const Dataset& dataset, int class_id,
                                const CollectOptions& options, const std::vector<int>* predictions) {
  if (options.max_images < 1) fail(ErrorKind::input, "max_images must be at least 1");
  if (class_id < 0 || class_id >= model.num_classes()) {
    fail(ErrorKind::input, "class " + std::to_string(class_id) + " outside the model's classes");
  }
  if (predictions && predictions->size() != dataset.size()) {
    fail(ErrorKind::input, "prediction cache does not match the dataset");
  }
  std::vector<SourceId> selected;
  const auto want = static_cast<std::size_t>(options.max_images);
  for (std::size_t begin = 0; begin < dataset.size() && selected.size() < want;
       begin += static_cast<std::size_t>(options.chunk)) {
    const std::size_t end = std::min(dataset.size(), begin + static_cast<std::size_t>(options.chunk));
    std::vector<int> preds;
    if (predictions) {
      preds.assign(predictions->begin() + static_cast<std::ptrdiff_t>(begin),
                   predictions->begin() + static_cast<std::ptrdiff_t>(end));
    } else {
      std::vector<SourceId> ids;
      for (std::size_t i = begin; i < end; ++i) ids.push_back(static_cast<SourceId>(i));
      preds = model.predict(load_batch(model, dataset, ids));
    }
    for (std::size_t i = begin; i < end && selected.size() < want; ++i) {
      if (preds[i - begin] == class_id) selected.push_back(static_cast<SourceId>(i));
    }
  }
  const auto minimum = static_cast<std::size_t>(std::min(options.min_images, options.max_images));
  if (selected.size() < minimum) {
    fail(ErrorKind::insufficient_samples,
         "class " + std::to_string(class_id) + ": only " + std::to_string(selected.size()) +
             " images predicted as this class, need " + std::to_string(minimum));
  }
  return load_batch(model, dataset, selected);
}

ScoredActivations score_and_filter_activations(const Tensor& acts, const AttributionMap& attrib,
                                               std::span<const SourceId> source_ids) {
  const Shape& s = acts.shape();
  const Shape& a = attrib.values.shape();
  if (a.n != s.n || a.c != 1 || a.h != s.h || a.w != s.w) {
    fail(ErrorKind::shape, "attribution " + a.str() + " does not match activations " + s.str());
  }
  if (source_ids.size() != static_cast<std::size_t>(s.n)) fail(ErrorKind::shape, "source id count mismatch");
  if (acts.min() < 0.0) fail(ErrorKind::domain, "activations must be non-negative (use a post-ReLU layer)");

  ScoredActivations out;
  std::vector<double> rows;
  for (int b = 0; b < s.n; ++b) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const double score = attrib.at(b, y, x);
        if (!(score > 0.0)) continue;
        for (int c = 0; c < s.c; ++c) rows.push_back(acts.at(b, c, y, x) * score);
        out.provenance.push_back({source_ids[static_cast<std::size_t>(b)], y, x, score});
      }
    }
  }
  if (out.provenance.empty()) fail(ErrorKind::empty_activations, "no cell has positive attribution");
  out.matrix = Eigen::Map<const Matrix>(rows.data(), static_cast<Eigen::Index>(out.provenance.size()), s.c);
  return out;
}

void append_rows(ScoredActivations& into, ScoredActivations&& more) {
  if (into.matrix.size() == 0) {
    into = std::move(more);
    return;
  }
  if (more.matrix.cols() != into.matrix.cols()) fail(ErrorKind::shape, "cannot append rows of different width");
  Matrix joined(into.matrix.rows() + more.matrix.rows(), into.matrix.cols());
  joined << into.matrix, more.matrix;
  into.matrix = std::move(joined);
  into.provenance.insert(into.provenance.end(), more.provenance.begin(), more.provenance.end());
}

Json ConceptBasis::sidecar() const {
  Json j;
  j["class_id"] = class_id;
  if (contrast_class) j["contrast_class"] = *contrast_class;
  j["layer"] = layer.name;
  j["n"] = n;
  j["channels"] = basis.cols();
  j["seed"] = solver.seed;
  j["attribution"] = attribution;
  j["image_count"] = image_count;
  j["row_count"] = row_count;
  j["solver"] = {{"algorithm", "multiplicative_updates"},
                 {"iterations", solver.iterations},
                 {"final_rel_error", solver.final_rel_error},
                 {"max_iter", solver.max_iter},
                 {"tol", solver.tol}};
  j["fingerprint"] = fingerprint;
  return j;
}

void ConceptBasis::save(const std::filesystem::path& stem) const {
  write_matrix(stem.string() + ".bin", basis);
  write_json(stem.string() + ".json", sidecar());
}

ConceptBasis ConceptBasis::load(const std::filesystem::path& stem) {
  const Json j = read_json(stem.string() + ".json");
  ConceptBasis b;
  try {
    b.class_id = j.at("class_id").get<int>();
    if (j.contains("contrast_class")) b.contrast_class = j.at("contrast_class").get<int>();
    b.layer.name = j.at("layer").get<std::string>();
    b.n = j.at("n").get<int>();
    b.solver.seed = j.at("seed").get<std::uint64_t>();
    b.attribution = j.at("attribution").get<std::string>();
    b.image_count = j.at("image_count").get<int>();
    b.row_count = j.at("row_count").get<int>();
    const Json& s = j.at("solver");
    b.solver.iterations = s.at("iterations").get<int>();
    b.solver.final_rel_error = s.at("final_rel_error").get<double>();
    b.solver.max_iter = s.at("max_iter").get<int>();
    b.solver.tol = s.at("tol").get<double>();
    b.fingerprint = j.at("fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, stem.string() + ".json: " + e.what());
  }
  b.basis = read_matrix(stem.string() + ".bin");
  if (b.basis.rows() != b.n) fail(ErrorKind::io, "basis file row count disagrees with its sidecar");
  return b;
}

void validate_basis(const ConceptBasis& basis) {
  if (basis.n < 1 || basis.basis.rows() != basis.n) fail(ErrorKind::domain, "basis must hold n >= 1 rows");
  if (basis.basis.minCoeff() < 0.0) fail(ErrorKind::domain, "basis has a negative entry");
  for (Eigen::Index r = 0; r < basis.basis.rows(); ++r) {
    if (basis.basis.row(r).norm() == 0.0) {
      fail(ErrorKind::domain, "concept " + std::to_string(r) + " of class " + std::to_string(basis.class_id) +
                                  " collapsed to zero");
    }
  }
}

Json ConceptConfig::to_json() const {
  return Json{{"n", n},
              {"attribution", attribution.str()},
              {"max_images", collect.max_images},
              {"min_images", collect.min_images},
              {"nmf_max_iter", nmf.max_iter},
              {"nmf_tol", nmf.tol},
              {"seed", seed}};
}

ClassActivations score_class_activations(const ModelHandle& model, const Dataset& dataset, int class_id,
                                         const LayerId& layer, const ConceptConfig& config,
                                         const std::vector<int>* predictions) {
  const ImageBatch images = collect_class_images(model, dataset, class_id, config.collect, predictions);
  ClassActivations out;
  out.image_count = images.size();
  for (int begin = 0; begin < images.size(); begin += config.collect.chunk) {
    const ImageBatch chunk = images.slice(begin, std::min(config.collect.chunk, images.size() - begin));
    const Tensor acts = model.forward_to_layer(layer, chunk);
    const AttributionMap attrib = attribute(model, layer, chunk, class_id, config.attribution, config.seed);
    try {
      append_rows(out.scored, score_and_filter_activations(acts, attrib, chunk.source_ids));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::empty_activations) throw;
    }
  }
  if (out.scored.rows() == 0) {
    fail(ErrorKind::empty_activations, "class " + std::to_string(class_id) + ": no cell with positive attribution");
  }
  return out;
}

ConceptBasis fit_class_concepts(const ClassActivations& acts, int class_id, const LayerId& layer,
                                const ConceptConfig& config, const std::string& fingerprint) {
  NmfOptions nmf = config.nmf;
  nmf.seed = config.seed;
  const NmfResult fit = nmf_fit(acts.scored.matrix, config.n, nmf);
  ConceptBasis basis;
  basis.class_id = class_id;
  basis.layer = layer;
  basis.n = config.n;
  basis.basis = fit.H;
  basis.solver = {fit.iterations, fit.final_rel_error, nmf.seed, nmf.max_iter, nmf.tol};
  basis.attribution = config.attribution.str();
  basis.image_count = acts.image_count;
  basis.row_count = static_cast<int>(acts.scored.rows());
  basis.fingerprint = fingerprint;
  validate_basis(basis);
  return basis;
}

std::string concept_fingerprint(const ModelHandle& model, const Dataset& dataset, int class_id,
                                const LayerId& layer, const ConceptConfig& config) {
  Json fp = config.to_json();
  fp["model"] = model.id();
  fp["class_id"] = class_id;
  fp["layer"] = layer.name;
  fp["dataset"] = hex64(dataset.fingerprint());
  return fingerprint(fp);
}

ConceptBasis extract_class_concepts(const ModelHandle& model, const Dataset& dataset, int class_id,
                                    const LayerId& layer, const ConceptConfig& config,
                                    const std::vector<int>* predictions) {
  const ClassActivations acts = score_class_activations(model, dataset, class_id, layer, config, predictions);
  return fit_class_concepts(acts, class_id, layer, config,
                            concept_fingerprint(model, dataset, class_id, layer, config));
}

}  // namespace cxplain
