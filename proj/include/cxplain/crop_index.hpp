#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cxplain/dataset.hpp"
#include "cxplain/image.hpp"
#include "cxplain/model.hpp"
#include "cxplain/tensor.hpp"

namespace cxplain {

/// Which crops may be returned for a target class.
enum class Exclusion {
  none,
  crop,    ///< crop_pred != target
  strict,  ///< crop_pred != target and image_pred != target
};

Exclusion parse_exclusion(std::string_view text);
const char* to_string(Exclusion e) noexcept;

struct CropRecord {
  SourceId source_id = 0;
  int grid_row = 0;
  int grid_col = 0;
  Box bbox;
  int crop_pred = 0;   ///< majority class of the crop alone
  int image_pred = 0;  ///< majority class of the whole source image

  friend bool operator==(const CropRecord&, const CropRecord&) = default;
};

bool passes(const CropRecord& record, Exclusion exclusion, int target) noexcept;

/// All 3x3-grid crops of a dataset with their spatial-mean embeddings at one
/// layer. Row i of `embeddings` belongs to records[i]; `unit_embeddings` is
/// the L2-normalized copy (all-zero rows stay zero).
struct CropIndex {
  LayerId layer;
  std::string model_id;
  int crop_side = 0;
  std::string dataset_fingerprint;
  std::vector<CropRecord> records;
  Matrix embeddings;
  Matrix unit_embeddings;

  std::size_t size() const noexcept { return records.size(); }
  void normalize_rows();

  /// Directory layout: manifest.json, embeddings.bin, records.jsonl.
  void save(const std::filesystem::path& dir) const;
  static CropIndex load(const std::filesystem::path& dir);
};

/// Origin of grid cell `k` along an axis of length `extent`.
inline int grid_anchor(int k, int extent) noexcept { return k * extent / 3; }

/// Forwards each of the nine crops of every image on its own.
CropIndex build_crop_index(const ModelHandle& model, const Dataset& dataset, const LayerId& layer);

struct CropHit {
  std::size_t record = 0;
  double cosine = 0.0;

  friend bool operator==(const CropHit&, const CropHit&) = default;
};

struct TopK {
  std::vector<CropHit> hits;
  bool truncated = false;  ///< fewer than k records passed the filter
};

/// Exact top-k by cosine similarity among records passing the filter,
/// descending, ties broken by lower record index.
TopK topk_crops(const CropIndex& index, std::span<const double> query, int k, Exclusion exclusion,
                int target);

/// Pixels of a record, cut from its source image.
Image crop_pixels(const Dataset& dataset, const CropRecord& record);

}  // namespace cxplain
