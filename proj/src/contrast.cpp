#include "cxplain/contrast.hpp"

#include <algorithm>
#include <cmath>

#include "cxplain/error.hpp"

namespace cxplain {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

void append_bank(ActivationBank& into, ActivationBank&& more) {
  into.cells_seen += more.cells_seen;
  if (more.vectors.rows() == 0) return;
  if (into.vectors.rows() == 0) {
    into.vectors = std::move(more.vectors);
  } else {
    Matrix joined(into.vectors.rows() + more.vectors.rows(), into.vectors.cols());
    joined << into.vectors, more.vectors;
    into.vectors = std::move(joined);
  }
  into.provenance.insert(into.provenance.end(), more.provenance.begin(), more.provenance.end());
}

}  // namespace

ActivationBank filter_bank_cells(const Tensor& acts, const AttributionMap& attrib,
                                 std::span<const SourceId> source_ids, double threshold) {
  const Shape& s = acts.shape();
  const Shape& a = attrib.values.shape();
  if (a.n != s.n || a.c != 1 || a.h != s.h || a.w != s.w) {
    fail(ErrorKind::shape, "attribution " + a.str() + " does not match activations " + s.str());
  }
  if (source_ids.size() != static_cast<std::size_t>(s.n)) fail(ErrorKind::shape, "source id count mismatch");
  ActivationBank bank;
  bank.cells_seen = static_cast<std::size_t>(s.n) * s.plane();
  std::vector<double> rows;
  for (int b = 0; b < s.n; ++b) {
    double peak = attrib.at(b, 0, 0);
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) peak = std::max(peak, attrib.at(b, y, x));
    }
    if (!(peak > 0.0)) continue;
    const double cutoff = threshold * peak;
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const double score = attrib.at(b, y, x);
        if (score < cutoff) continue;
        for (int c = 0; c < s.c; ++c) rows.push_back(acts.at(b, c, y, x));
        bank.provenance.push_back({source_ids[static_cast<std::size_t>(b)], y, x, score});
      }
    }
  }
  bank.vectors = Eigen::Map<const Matrix>(rows.data(), static_cast<Eigen::Index>(bank.provenance.size()), s.c);
  return bank;
}

ActivationBank collect_hyperplane_pixels(const ModelHandle& model, const Dataset& dataset, int class_id,
                                         const LayerId& layer, const AttributionMethod& method,
                                         const CollectOptions& collect, std::uint64_t seed,
                                         const std::vector<int>* predictions) {
  const ImageBatch images = collect_class_images(model, dataset, class_id, collect, predictions);
  ActivationBank bank;
  bank.class_id = class_id;
  bank.layer = layer;
  bank.image_count = images.size();
  bank.vectors.resize(0, model.layer_channels(layer));
  for (int begin = 0; begin < images.size(); begin += collect.chunk) {
    const ImageBatch chunk = images.slice(begin, std::min(collect.chunk, images.size() - begin));
    const Tensor acts = model.forward_to_layer(layer, chunk);
    const AttributionMap attrib = attribute(model, layer, chunk, class_id, method, seed);
    append_bank(bank, filter_bank_cells(acts, attrib, chunk.source_ids));
  }
  if (bank.vectors.rows() == 0) {
    fail(ErrorKind::insufficient_samples, "class " + std::to_string(class_id) + ": no cell passed the attribution threshold");
  }
  return bank;
}

double Hyperplane::decision(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) != w.size()) fail(ErrorKind::shape, "probe input dimension mismatch");
  return Eigen::Map<const Eigen::VectorXd>(x.data(), w.size()).dot(w) + b;
}

double Hyperplane::probability(std::span<const double> x) const { return sigmoid(decision(x)); }

Json Hyperplane::sidecar() const {
  return Json{{"class_a", class_a},
              {"class_b", class_b},
              {"channels", w.size()},
              {"seed", seed},
              {"stats",
               {{"epochs", stats.epochs},
                {"lr", stats.lr},
                {"final_accuracy", stats.final_accuracy},
                {"final_loss", stats.final_loss},
                {"count_a", stats.count_a},
                {"count_b", stats.count_b},
                {"retained_a", stats.retained_a},
                {"retained_b", stats.retained_b}}},
              {"fingerprint", fingerprint}};
}

void Hyperplane::save(const std::filesystem::path& stem) const {
  Matrix row(1, w.size() + 1);
  row.leftCols(w.size()) = w.transpose();
  row(0, w.size()) = b;
  write_matrix(stem.string() + ".bin", row);
  write_json(stem.string() + ".json", sidecar());
}

Hyperplane Hyperplane::load(const std::filesystem::path& stem) {
  const Json j = read_json(stem.string() + ".json");
  const Matrix row = read_matrix(stem.string() + ".bin");
  Hyperplane h;
  try {
    h.class_a = j.at("class_a").get<int>();
    h.class_b = j.at("class_b").get<int>();
    h.seed = j.at("seed").get<std::uint64_t>();
    const Json& s = j.at("stats");
    h.stats = {s.at("epochs").get<int>(),         s.at("lr").get<double>(),
               s.at("final_accuracy").get<double>(), s.at("final_loss").get<double>(),
               s.at("count_a").get<int>(),        s.at("count_b").get<int>(),
               s.at("retained_a").get<double>(),  s.at("retained_b").get<double>()};
    h.fingerprint = j.at("fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, stem.string() + ".json: " + e.what());
  }
  if (row.rows() != 1 || row.cols() < 2) fail(ErrorKind::io, "malformed probe file " + stem.string() + ".bin");
  h.w = row.leftCols(row.cols() - 1).transpose();
  h.b = row(0, row.cols() - 1);
  return h;
}

Hyperplane train_hyperplane(const ActivationBank& bank_a, const ActivationBank& bank_b, std::uint64_t seed,
                            const ProbeOptions& options) {
  if (bank_a.vectors.rows() == 0 || bank_b.vectors.rows() == 0) {
    fail(ErrorKind::insufficient_samples, "both activation banks must be non-empty");
  }
  if (bank_a.vectors.cols() != bank_b.vectors.cols()) {
    fail(ErrorKind::shape, "activation banks differ in channel count");
  }
  const Eigen::Index na = bank_a.vectors.rows();
  const Eigen::Index total = na + bank_b.vectors.rows();
  Matrix X(total, bank_a.vectors.cols());
  X << bank_a.vectors, bank_b.vectors;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(total);
  y.head(na).setOnes();

  Hyperplane h;
  h.class_a = bank_a.class_id;
  h.class_b = bank_b.class_id;
  h.seed = seed;
  h.w = Eigen::VectorXd::Zero(X.cols());
  h.b = 0.0;
  Eigen::VectorXd residual(total);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const Eigen::VectorXd z = (X * h.w).array() + h.b;
    for (Eigen::Index i = 0; i < total; ++i) residual(i) = sigmoid(z(i)) - y(i);
    const Eigen::VectorXd grad_w = X.transpose() * residual / static_cast<double>(total);
    const double grad_b = residual.mean();
    h.w -= options.lr * grad_w;
    h.b -= options.lr * grad_b;
  }
  const Eigen::VectorXd z = (X * h.w).array() + h.b;
  double loss = 0.0;
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < total; ++i) {
    loss += softplus(z(i)) - y(i) * z(i);
    if ((z(i) >= 0.0) == (y(i) > 0.5)) ++correct;
  }
  h.stats = {options.epochs,
             options.lr,
             static_cast<double>(correct) / static_cast<double>(total),
             loss / static_cast<double>(total),
             static_cast<int>(na),
             static_cast<int>(bank_b.vectors.rows()),
             bank_a.retained_fraction(),
             bank_b.retained_fraction()};
  if (!h.w.allFinite() || !std::isfinite(h.b)) fail(ErrorKind::domain, "probe weights diverged");
  return h;
}

double mean_probability(const Hyperplane& h, const Matrix& vectors) {
  if (vectors.rows() == 0) return 0.0;
  const Eigen::VectorXd z = (vectors * h.w).array() + h.b;
  double s = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) s += sigmoid(z(i));
  return s / static_cast<double>(z.size());
}

double probe_accuracy(const Hyperplane& h, const Matrix& a, const Matrix& b) {
  const Eigen::VectorXd za = (a * h.w).array() + h.b;
  const Eigen::VectorXd zb = (b * h.w).array() + h.b;
  const auto correct = (za.array() >= 0.0).count() + (zb.array() < 0.0).count();
  return static_cast<double>(correct) / static_cast<double>(a.rows() + b.rows());
}

ScoredActivations score_by_hyperplane(const Tensor& acts, const Hyperplane& h, std::span<const SourceId> source_ids) {
  const Shape& s = acts.shape();
  if (s.c != h.w.size()) fail(ErrorKind::shape, "probe dimension differs from activation channels");
  if (source_ids.size() != static_cast<std::size_t>(s.n)) fail(ErrorKind::shape, "source id count mismatch");
  ScoredActivations out;
  std::vector<double> rows;
  std::vector<double> cell(static_cast<std::size_t>(s.c));
  for (int b = 0; b < s.n; ++b) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        for (int c = 0; c < s.c; ++c) cell[static_cast<std::size_t>(c)] = acts.at(b, c, y, x);
        const double z = h.decision(cell);
        if (!(z > 0.0)) continue;
        for (double v : cell) rows.push_back(v * z);
        out.provenance.push_back({source_ids[static_cast<std::size_t>(b)], y, x, z});
      }
    }
  }
  out.matrix = Eigen::Map<const Matrix>(rows.data(), static_cast<Eigen::Index>(out.provenance.size()), s.c);
  return out;
}

ConceptBasis contrast_concepts(const ModelHandle& model, const Dataset& dataset, const Hyperplane& h,
                               const LayerId& layer, const ConceptConfig& config,
                               const std::vector<int>* predictions) {
  const ImageBatch images = collect_class_images(model, dataset, h.class_a, config.collect, predictions);
  ScoredActivations scored;
  for (int begin = 0; begin < images.size(); begin += config.collect.chunk) {
    const ImageBatch chunk = images.slice(begin, std::min(config.collect.chunk, images.size() - begin));
    ScoredActivations part = score_by_hyperplane(model.forward_to_layer(layer, chunk), h, chunk.source_ids);
    if (part.rows() > 0) append_rows(scored, std::move(part));
  }
  if (scored.rows() == 0) {
    fail(ErrorKind::degenerate_contrast, "no activation of class " + std::to_string(h.class_a) +
                                             " lies on its side of the probe against class " +
                                             std::to_string(h.class_b));
  }
  NmfOptions nmf = config.nmf;
  nmf.seed = config.seed;
  const NmfResult fit = nmf_fit(scored.matrix, config.n, nmf);
  ConceptBasis basis;
  basis.class_id = h.class_a;
  basis.contrast_class = h.class_b;
  basis.layer = layer;
  basis.n = config.n;
  basis.basis = fit.H;
  basis.solver = {fit.iterations, fit.final_rel_error, nmf.seed, nmf.max_iter, nmf.tol};
  basis.attribution = "hyperplane";
  basis.image_count = images.size();
  basis.row_count = static_cast<int>(scored.rows());
  Json fp = config.to_json();
  fp["model"] = model.id();
  fp["class_a"] = h.class_a;
  fp["class_b"] = h.class_b;
  fp["probe"] = h.fingerprint;
  fp["layer"] = layer.name;
  fp["dataset"] = hex64(dataset.fingerprint());
  basis.fingerprint = fingerprint(fp);
  validate_basis(basis);
  return basis;
}

Json ShiftResult::to_json() const {
  return Json{{"class_a", class_a},         {"class_b", class_b},         {"offsets", offsets},
              {"pred_curve", pred_curve},   {"default_pred", default_pred}, {"shifted_pred", shifted_pred},
              {"best_offset", best_offset}, {"scale", scale},             {"image_count", image_count}};
}

std::vector<double> default_offsets(const ModelHandle& model, const LayerId& layer, const ImageBatch& images,
                                    double* scale) {
  double norm_sum = 0.0;
  std::size_t cells = 0;
  for (int begin = 0; begin < images.size(); begin += 64) {
    const Tensor acts = model.forward_to_layer(layer, images.slice(begin, std::min(64, images.size() - begin)));
    for (int b = 0; b < acts.batch(); ++b) {
      for (int y = 0; y < acts.height(); ++y) {
        for (int x = 0; x < acts.width(); ++x) {
          double sq = 0.0;
          for (int c = 0; c < acts.channels(); ++c) sq += acts.at(b, c, y, x) * acts.at(b, c, y, x);
          norm_sum += std::sqrt(sq);
          ++cells;
        }
      }
    }
  }
  if (cells == 0) fail(ErrorKind::insufficient_samples, "no images to derive shift offsets from");
  const double top = 3.0 * norm_sum / static_cast<double>(cells);
  if (scale) *scale = top;
  std::vector<double> offsets;
  for (int k = 1; k <= 10; ++k) offsets.push_back(k / 10.0 * top);
  return offsets;
}

ShiftResult shifting_test(const ModelHandle& model, const LayerId& layer, const Hyperplane& h,
                          const ImageBatch& images_of_b, std::span<const double> offsets) {
  const double norm = h.w.norm();
  if (!(norm > 0.0)) fail(ErrorKind::degenerate_hyperplane, "probe normal has zero length");
  if (images_of_b.size() == 0) fail(ErrorKind::insufficient_samples, "shifting test needs images");
  if (offsets.empty()) fail(ErrorKind::input, "shifting test needs offsets");
  const Eigen::VectorXd dir = h.w / norm;

  ShiftResult r;
  r.class_a = h.class_a;
  r.class_b = h.class_b;
  r.offsets.assign(offsets.begin(), offsets.end());
  r.image_count = images_of_b.size();
  std::vector<double> sums(offsets.size(), 0.0);
  double default_sum = 0.0;
  const auto mean_a = [&](const Matrix& logits) { return softmax(logits).col(h.class_a).sum(); };
  for (int begin = 0; begin < images_of_b.size(); begin += 64) {
    const Tensor acts =
        model.forward_to_layer(layer, images_of_b.slice(begin, std::min(64, images_of_b.size() - begin)));
    if (acts.channels() != dir.size()) fail(ErrorKind::shape, "probe dimension differs from activation channels");
    default_sum += mean_a(model.forward_from_layer(layer, acts));
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      Tensor shifted = acts;
      for (int b = 0; b < shifted.batch(); ++b) {
        for (int c = 0; c < shifted.channels(); ++c) {
          const double delta = offsets[k] * dir(c);
          for (int y = 0; y < shifted.height(); ++y) {
            for (int x = 0; x < shifted.width(); ++x) shifted.at(b, c, y, x) += delta;
          }
        }
      }
      sums[k] += mean_a(model.forward_from_layer(layer, shifted));
    }
  }
  const double count = images_of_b.size();
  r.default_pred = default_sum / count;
  for (double s : sums) r.pred_curve.push_back(s / count);
  const auto best = std::max_element(r.pred_curve.begin(), r.pred_curve.end());
  r.shifted_pred = *best;
  r.best_offset = r.offsets[static_cast<std::size_t>(best - r.pred_curve.begin())];
  return r;
}

Image denormalize(const ModelHandle& model, const Tensor& normalized, int sample) {
  Image out(normalized.height(), normalized.width());
  const auto& n = model.normalization();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) {
        out.at(c, y, x) = normalized.at(sample, c, y, x) * n.std[static_cast<std::size_t>(c)] +
                          n.mean[static_cast<std::size_t>(c)];
      }
    }
  }
  return out;
}

Json InsertionReport::to_json() const {
  const auto condition = [&](const InsertionCondition& c) {
    Json means = Json::array();
    for (std::size_t i = 0; i < classes.size(); ++i) {
      means.push_back({{"class", classes[i]}, {"mean_softmax", c.mean_softmax[i]}});
    }
    return Json{{"name", c.name}, {"mean_softmax", means}, {"majority", c.majority}};
  };
  return Json{{"classes", classes},
              {"image_count", image_count},
              {"patch_box", {{"x", box.x}, {"y", box.y}, {"width", box.width}, {"height", box.height}}},
              {"conditions", {condition(original), condition(patched), condition(black)}}};
}

InsertionReport patch_insertion_test(const ModelHandle& model, std::span<const Image> images, const Image& patch,
                                     std::span<const int> classes, const std::filesystem::path& examples_dir) {
  if (images.empty()) fail(ErrorKind::input, "insertion test needs images");
  for (int c : classes) {
    if (c < 0 || c >= model.num_classes()) fail(ErrorKind::input, "class " + std::to_string(c) + " out of range");
  }
  InsertionReport report;
  report.classes.assign(classes.begin(), classes.end());
  report.image_count = static_cast<int>(images.size());
  report.original.name = "original";
  report.patched.name = "patch";
  report.black.name = "black";
  for (auto* cond : {&report.original, &report.patched, &report.black}) {
    cond->mean_softmax.assign(classes.size(), 0.0);
  }

  const Tensor patch_norm = model.normalize(patch);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = images[i];
    if (patch.height() > img.height() || patch.width() > img.width()) {
      fail(ErrorKind::size, "patch " + std::to_string(patch.height()) + "x" + std::to_string(patch.width()) +
                                " is larger than image " + std::to_string(img.height()) + "x" +
                                std::to_string(img.width()));
    }
    const Box box{img.width() - patch.width(), img.height() - patch.height(), patch.width(), patch.height()};
    if (i == 0) report.box = box;
    const Tensor base = model.normalize(img);
    Tensor with_patch = base;
    Tensor with_black = base;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < box.height; ++y) {
        for (int x = 0; x < box.width; ++x) {
          with_patch.at(0, c, box.y + y, box.x + x) = patch_norm.at(0, c, y, x);
          with_black.at(0, c, box.y + y, box.x + x) = 0.0;
        }
      }
    }
    const std::pair<const Tensor*, InsertionCondition*> runs[] = {
        {&base, &report.original}, {&with_patch, &report.patched}, {&with_black, &report.black}};
    for (const auto& [tensor, cond] : runs) {
      const ImageBatch batch{*tensor, {static_cast<SourceId>(i)}};
      const Matrix logits = model.forward_full(batch);
      const Matrix probs = softmax(logits);
      for (std::size_t k = 0; k < classes.size(); ++k) cond->mean_softmax[k] += probs(0, classes[k]);
      cond->majority.push_back(argmax_row(logits, 0));
    }
    if (i == 0 && !examples_dir.empty()) {
      img.write_png(examples_dir / "original.png");
      denormalize(model, with_patch).write_png(examples_dir / "patch_inserted.png");
      denormalize(model, with_black).write_png(examples_dir / "black_inserted.png");
    }
  }
  for (auto* cond : {&report.original, &report.patched, &report.black}) {
    for (double& v : cond->mean_softmax) v /= static_cast<double>(images.size());
  }
  return report;
}

std::string validate_insertion_report(const Json& r) {
  if (!r.is_object()) return "report is not an object";
  for (const char* key : {"classes", "image_count", "patch_box", "conditions"}) {
    if (!r.contains(key)) return std::string("missing key '") + key + "'";
  }
  if (!r["classes"].is_array()) return "classes must be an array";
  for (const auto& c : r["classes"]) {
    if (!c.is_number_integer()) return "classes must be integers";
  }
  if (!r["image_count"].is_number_integer() || r["image_count"].get<int>() < 1) return "image_count must be >= 1";
  for (const char* key : {"x", "y", "width", "height"}) {
    if (!r["patch_box"].contains(key) || !r["patch_box"][key].is_number_integer()) {
      return std::string("patch_box.") + key + " must be an integer";
    }
  }
  const Json& conds = r["conditions"];
  if (!conds.is_array() || conds.size() != 3) return "conditions must hold original, patch and black";
  const char* names[] = {"original", "patch", "black"};
  for (std::size_t i = 0; i < 3; ++i) {
    const Json& c = conds[i];
    if (!c.contains("name") || c["name"] != names[i]) return std::string("condition ") + std::to_string(i) + " must be '" + names[i] + "'";
    if (!c.contains("mean_softmax") || !c["mean_softmax"].is_array() ||
        c["mean_softmax"].size() != r["classes"].size()) {
      return "mean_softmax must have one entry per class";
    }
    for (const auto& m : c["mean_softmax"]) {
      if (!m.contains("class") || !m.contains("mean_softmax") || !m["mean_softmax"].is_number()) {
        return "mean_softmax entries need class and mean_softmax";
      }
      const double p = m["mean_softmax"].get<double>();
      if (p < 0.0 || p > 1.0) return "mean_softmax outside [0, 1]";
    }
    if (!c.contains("majority") || !c["majority"].is_array() ||
        c["majority"].size() != r["image_count"].get<std::size_t>()) {
      return "majority must have one entry per image";
    }
  }
  return {};
}

std::filesystem::path HyperplaneCache::stem(int class_a, int class_b) const {
  return dir_ / ("probe_" + std::to_string(class_a) + "_vs_" + std::to_string(class_b));
}

Hyperplane HyperplaneCache::get_or_train(int class_a, int class_b, const std::string& fingerprint,
                                         const std::function<Hyperplane()>& train) const {
  const auto path = stem(class_a, class_b);
  if (std::filesystem::exists(path.string() + ".json") && std::filesystem::exists(path.string() + ".bin")) {
    try {
      Hyperplane cached = Hyperplane::load(path);
      if (cached.fingerprint == fingerprint) return cached;
    } catch (const Error&) {
      // unreadable entry: retrain below
    }
  }
  Hyperplane fresh = train();
  fresh.fingerprint = fingerprint;
  fresh.save(path);
  return fresh;
}

}  // namespace cxplain
