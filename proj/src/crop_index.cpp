#include "cxplain/crop_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"
#include "cxplain/parallel.hpp"

namespace cxplain {

Exclusion parse_exclusion(std::string_view text) {
  if (text == "none") return Exclusion::none;
  if (text == "crop") return Exclusion::crop;
  if (text == "strict") return Exclusion::strict;
  fail(ErrorKind::config, "exclusion must be none, crop or strict, got '" + std::string(text) + "'");
}

const char* to_string(Exclusion e) noexcept {
  switch (e) {
    case Exclusion::none: return "none";
    case Exclusion::crop: return "crop";
    case Exclusion::strict: return "strict";
  }
  return "none";
}

bool passes(const CropRecord& r, Exclusion exclusion, int target) noexcept {
  switch (exclusion) {
    case Exclusion::none: return true;
    case Exclusion::crop: return r.crop_pred != target;
    case Exclusion::strict: return r.crop_pred != target && r.image_pred != target;
  }
  return true;
}

void CropIndex::normalize_rows() {
  unit_embeddings = embeddings;
  for (Eigen::Index r = 0; r < unit_embeddings.rows(); ++r) {
    const double norm = unit_embeddings.row(r).norm();
    if (norm > 0.0) unit_embeddings.row(r) /= norm;
  }
}

void CropIndex::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_matrix(dir / "embeddings.bin", embeddings);
  std::ostringstream lines;
  for (const auto& r : records) {
    Json j{{"source_id", r.source_id},
           {"grid_row", r.grid_row},
           {"grid_col", r.grid_col},
           {"bbox", {r.bbox.x, r.bbox.y, r.bbox.width, r.bbox.height}},
           {"crop_pred", r.crop_pred},
           {"image_pred", r.image_pred}};
    lines << j.dump() << '\n';
  }
  write_text(dir / "records.jsonl", lines.str());
  write_json(dir / "manifest.json", Json{{"layer", layer.name},
                                         {"post_relu", layer.post_relu},
                                         {"receptive_crop", layer.receptive_crop},
                                         {"model", model_id},
                                         {"crop_side", crop_side},
                                         {"dataset_fingerprint", dataset_fingerprint},
                                         {"N", records.size()},
                                         {"channels", embeddings.cols()}});
}

CropIndex CropIndex::load(const std::filesystem::path& dir) {
  const Json m = read_json(dir / "manifest.json");
  CropIndex index;
  try {
    index.layer = {m.at("layer").get<std::string>(), m.at("post_relu").get<bool>(),
                   m.at("receptive_crop").get<int>()};
    index.model_id = m.at("model").get<std::string>();
    index.crop_side = m.at("crop_side").get<int>();
    index.dataset_fingerprint = m.at("dataset_fingerprint").get<std::string>();
    std::ifstream in(dir / "records.jsonl");
    if (!in) fail(ErrorKind::io, "missing records.jsonl in " + dir.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const Json j = Json::parse(line);
      CropRecord r;
      r.source_id = j.at("source_id").get<SourceId>();
      r.grid_row = j.at("grid_row").get<int>();
      r.grid_col = j.at("grid_col").get<int>();
      const Json& b = j.at("bbox");
      r.bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
      r.crop_pred = j.at("crop_pred").get<int>();
      r.image_pred = j.at("image_pred").get<int>();
      index.records.push_back(r);
    }
    if (index.records.size() != m.at("N").get<std::size_t>()) fail(ErrorKind::io, "crop index record count mismatch");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, dir.string() + ": " + e.what());
  }
  index.embeddings = read_matrix(dir / "embeddings.bin");
  if (static_cast<std::size_t>(index.embeddings.rows()) != index.records.size()) {
    fail(ErrorKind::io, "crop index embedding rows disagree with records");
  }
  index.normalize_rows();
  return index;
}

CropIndex build_crop_index(const ModelHandle& model, const Dataset& dataset, const LayerId& layer) {
  if (dataset.empty()) fail(ErrorKind::build, "cannot build a crop index from an empty dataset");
  const int side = layer.receptive_crop;
  const int h = dataset.height();
  const int w = dataset.width();
  if (side <= 0 || side > h / 3 || side > w / 3) {
    fail(ErrorKind::build, "crop side " + std::to_string(side) + " does not fit a 3x3 grid on " +
                               std::to_string(h) + "x" + std::to_string(w) + " images");
  }
  const int channels = model.layer_channels(layer);
  CropIndex index;
  index.layer = layer;
  index.model_id = model.id();
  index.crop_side = side;
  index.dataset_fingerprint = hex64(dataset.fingerprint());
  index.records.resize(dataset.size() * 9);
  index.embeddings.resize(static_cast<Eigen::Index>(dataset.size() * 9), channels);

  constexpr std::size_t kChunk = 16;
  const std::size_t chunks = (dataset.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * kChunk;
    const std::size_t end = std::min(dataset.size(), begin + kChunk);
    std::vector<Image> crops;
    std::vector<SourceId> ids;
    std::vector<SourceId> crop_ids;
    for (std::size_t i = begin; i < end; ++i) {
      const auto id = static_cast<SourceId>(i);
      ids.push_back(id);
      const Image img = dataset.image(id);
      for (int gr = 0; gr < 3; ++gr) {
        for (int gc = 0; gc < 3; ++gc) {
          const Box box{grid_anchor(gc, w), grid_anchor(gr, h), side, side};
          crops.push_back(img.crop(box));
          crop_ids.push_back(id);
          CropRecord& r = index.records[i * 9 + static_cast<std::size_t>(gr * 3 + gc)];
          r.source_id = id;
          r.grid_row = gr;
          r.grid_col = gc;
          r.bbox = box;
        }
      }
    }
    const auto image_preds = model.predict(load_batch(model, dataset, ids));
    const ImageBatch crop_batch = model.preprocess(crops, crop_ids);
    const Tensor acts = model.forward_to_layer(layer, crop_batch);
    const Matrix logits = model.forward_from_layer(layer, acts);
    const double cells = static_cast<double>(acts.shape().plane());
    for (int b = 0; b < acts.batch(); ++b) {
      const std::size_t row = begin * 9 + static_cast<std::size_t>(b);
      CropRecord& r = index.records[row];
      r.crop_pred = argmax_row(logits, b);
      r.image_pred = image_preds[static_cast<std::size_t>(b / 9)];
      for (int c = 0; c < channels; ++c) {
        double s = 0.0;
        for (int y = 0; y < acts.height(); ++y) {
          for (int x = 0; x < acts.width(); ++x) s += acts.at(b, c, y, x);
        }
        index.embeddings(static_cast<Eigen::Index>(row), c) = s / cells;
      }
    }
  });
  index.normalize_rows();
  return index;
}

TopK topk_crops(const CropIndex& index, std::span<const double> query, int k, Exclusion exclusion, int target) {
  if (k < 1) fail(ErrorKind::input, "k must be at least 1");
  if (static_cast<Eigen::Index>(query.size()) != index.unit_embeddings.cols()) {
    fail(ErrorKind::shape, "query has " + std::to_string(query.size()) + " channels, index has " +
                               std::to_string(index.unit_embeddings.cols()));
  }
  Eigen::Map<const Eigen::VectorXd> v(query.data(), static_cast<Eigen::Index>(query.size()));
  const double norm = v.norm();
  if (!(norm > 0.0)) fail(ErrorKind::input, "query vector must be non-zero");
  const Eigen::VectorXd q = v / norm;

  std::vector<CropHit> candidates;
  candidates.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!passes(index.records[i], exclusion, target)) continue;
    candidates.push_back({i, index.unit_embeddings.row(static_cast<Eigen::Index>(i)).dot(q)});
  }
  const auto better = [](const CropHit& a, const CropHit& b) {
    return a.cosine != b.cosine ? a.cosine > b.cosine : a.record < b.record;
  };
  TopK out;
  const auto take = std::min(candidates.size(), static_cast<std::size_t>(k));
  out.truncated = take < static_cast<std::size_t>(k);
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                    better);
  candidates.resize(take);
  out.hits = std::move(candidates);
  return out;
}

Image crop_pixels(const Dataset& dataset, const CropRecord& record) {
  return dataset.image(record.source_id).crop(record.bbox);
}

}  // namespace cxplain
