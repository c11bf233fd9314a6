#include "cxplain/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cxplain/error.hpp"
#include "cxplain/parallel.hpp"

namespace cxplain {

namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Unbiased draw from [0, n) that does not depend on the standard library's
// distribution implementation.
std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do v = rng();
  while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick(rng, i)]);
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::string params_fingerprint(const ModelHandle& model) {
  const std::vector<double> p = model.network().flat_params();
  const std::string_view bytes(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double));
  return hex64(fnv1a(bytes, fnv1a(model.id())));
}

std::string class_dir_name(int class_id) {
  std::ostringstream s;
  s << "class_" << std::setw(4) << std::setfill('0') << class_id;
  return s.str();
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string csv_cell(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_json(path), path.parent_path());
}

ExperimentConfig ExperimentConfig::from_json(const Json& j, const fs::path& base) {
  static const std::set<std::string> known{
      "model_config", "dataset",       "output_dir", "layers",          "n_values",      "attribution",
      "max_images",   "min_images",    "exclusion",  "m",               "seed",          "class_stride",
      "classes",      "nmf",           "sample_counts", "quiz_items",   "quiz_n",        "probe",
      "probe_max_images", "shift_targets", "shift_images", "workers"};
  if (!j.is_object()) fail(ErrorKind::config, "experiment config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) fail(ErrorKind::config, "unknown experiment config key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    if (j.contains("model_config")) c.model_config = resolve(base, j["model_config"].get<std::string>());
    if (j.contains("dataset")) c.dataset = resolve(base, j["dataset"].get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve(base, j["output_dir"].get<std::string>());
    if (j.contains("layers")) c.layers = j["layers"].get<std::vector<std::string>>();
    if (j.contains("n_values")) c.n_values = j["n_values"].get<std::vector<int>>();
    if (j.contains("attribution")) c.attribution = AttributionMethod::parse(j["attribution"].get<std::string>());
    if (j.contains("max_images")) c.max_images = j["max_images"].get<int>();
    if (j.contains("min_images")) c.min_images = j["min_images"].get<int>();
    if (j.contains("exclusion")) c.exclusion = parse_exclusion(j["exclusion"].get<std::string>());
    if (j.contains("m")) c.m = j["m"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("class_stride")) c.class_stride = j["class_stride"].get<int>();
    if (j.contains("classes")) c.classes = j["classes"].get<std::vector<int>>();
    if (j.contains("nmf")) {
      c.nmf.max_iter = j["nmf"].value("max_iter", c.nmf.max_iter);
      c.nmf.tol = j["nmf"].value("tol", c.nmf.tol);
    }
    if (j.contains("sample_counts")) c.sample_counts = j["sample_counts"].get<std::vector<int>>();
    if (j.contains("quiz_items")) c.quiz_items = j["quiz_items"].get<int>();
    if (j.contains("quiz_n")) c.quiz_n = j["quiz_n"].get<int>();
    if (j.contains("probe")) {
      c.probe.epochs = j["probe"].value("epochs", c.probe.epochs);
      c.probe.lr = j["probe"].value("lr", c.probe.lr);
    }
    if (j.contains("probe_max_images")) c.probe_max_images = j["probe_max_images"].get<int>();
    if (j.contains("shift_targets")) c.shift_targets = j["shift_targets"].get<int>();
    if (j.contains("shift_images")) c.shift_images = j["shift_images"].get<int>();
    if (j.contains("workers")) c.workers = j["workers"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("experiment config: ") + e.what());
  }
  return c;
}

Json ExperimentConfig::to_json() const {
  return Json{{"model_config", model_config.string()},
              {"dataset", dataset.string()},
              {"output_dir", output_dir.string()},
              {"layers", layers},
              {"n_values", n_values},
              {"attribution", attribution.str()},
              {"max_images", max_images},
              {"min_images", min_images},
              {"exclusion", to_string(exclusion)},
              {"m", m},
              {"seed", seed},
              {"class_stride", class_stride},
              {"classes", classes},
              {"nmf", {{"max_iter", nmf.max_iter}, {"tol", nmf.tol}}},
              {"sample_counts", sample_counts},
              {"quiz_items", quiz_items},
              {"quiz_n", quiz_n},
              {"probe", {{"epochs", probe.epochs}, {"lr", probe.lr}}},
              {"probe_max_images", probe_max_images},
              {"shift_targets", shift_targets},
              {"shift_images", shift_images},
              {"workers", workers}};
}

void ExperimentConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) fail(ErrorKind::config, std::string(what) + " must be at least 1");
  };
  if (n_values.empty()) fail(ErrorKind::config, "n_values must not be empty");
  for (int n : n_values) positive(n, "every n");
  for (int c : sample_counts) positive(c, "every sample count");
  positive(max_images, "max_images");
  positive(min_images, "min_images");
  positive(m, "m");
  positive(class_stride, "class_stride");
  positive(quiz_n, "quiz_n");
  positive(probe_max_images, "probe_max_images");
  positive(shift_images, "shift_images");
  if (quiz_items < 0 || shift_targets < 0 || workers < 0) fail(ErrorKind::config, "negative count in config");
  if (probe.epochs < 1 || !(probe.lr > 0.0)) fail(ErrorKind::config, "probe needs epochs >= 1 and lr > 0");
  if (nmf.max_iter < 1 || !(nmf.tol >= 0.0)) fail(ErrorKind::config, "nmf needs max_iter >= 1 and tol >= 0");
  if (model_config.empty() || !fs::exists(model_config)) {
    fail(ErrorKind::config, "model config not found: '" + model_config.string() + "'");
  }
  if (dataset.empty() || !fs::exists(dataset)) fail(ErrorKind::config, "dataset not found: '" + dataset.string() + "'");
}

ConceptConfig ExperimentConfig::concept_config(int n) const {
  ConceptConfig c;
  c.n = n;
  c.attribution = attribution;
  c.collect = collect_options();
  c.nmf = nmf;
  c.seed = seed;
  return c;
}

CollectOptions ExperimentConfig::collect_options() const {
  CollectOptions o;
  o.max_images = max_images;
  o.min_images = min_images;
  return o;
}

std::vector<int> ExperimentConfig::class_list(int num_classes) const {
  std::vector<int> out;
  if (!classes.empty()) {
    for (int c : classes) {
      if (c < 0 || c >= num_classes) fail(ErrorKind::config, "class " + std::to_string(c) + " out of range");
      out.push_back(c);
    }
    return out;
  }
  for (int c = 0; c < num_classes; c += class_stride) out.push_back(c);
  return out;
}

// ---------------------------------------------------------------------------
// Workspace

Workspace::Workspace(ExperimentConfig config) : config_(std::move(config)) { config_.validate(); }

const ModelHandle& Workspace::model() {
  if (!model_) model_ = std::make_unique<ModelHandle>(ModelHandle::load(config_.model_config));
  return *model_;
}

const Dataset& Workspace::dataset() {
  if (!dataset_) dataset_ = std::make_unique<Dataset>(Dataset::load(config_.dataset));
  return *dataset_;
}

const std::vector<int>& Workspace::predictions() {
  if (!predictions_) predictions_ = model().predict_dataset(dataset());
  return *predictions_;
}

const LayerId& Workspace::layer(const std::string& name) {
  return name.empty() ? model().deepest_layer() : model().layer(name);
}

std::vector<LayerId> Workspace::layers() {
  std::vector<LayerId> out;
  if (config_.layers.empty()) {
    out.push_back(model().deepest_layer());
  } else {
    for (const auto& name : config_.layers) out.push_back(layer(name));
  }
  return out;
}

fs::path Workspace::index_dir(const LayerId& layer) const { return config_.output_dir / "index" / layer.name; }

const CropIndex& Workspace::index(const LayerId& layer) {
  if (auto it = indices_.find(layer.name); it != indices_.end()) return it->second;
  const fs::path dir = index_dir(layer);
  if (fs::exists(dir / "manifest.json") && fs::exists(dir / "workspace.json")) {
    const Json stamp = read_json(dir / "workspace.json");
    if (stamp.value("model", "") == params_fingerprint(model()) &&
        stamp.value("dataset", "") == hex64(dataset().fingerprint())) {
      CropIndex idx = CropIndex::load(dir);
      if (idx.layer.name == layer.name && idx.crop_side == layer.receptive_crop) {
        idx.layer = layer;
        return indices_.emplace(layer.name, std::move(idx)).first->second;
      }
    }
  }
  return rebuild_index(layer);
}

const CropIndex& Workspace::rebuild_index(const LayerId& layer) {
  CropIndex idx = build_crop_index(model(), dataset(), layer);
  const fs::path dir = index_dir(layer);
  fs::create_directories(dir);
  idx.save(dir);
  write_json(dir / "workspace.json",
             Json{{"model", params_fingerprint(model())}, {"dataset", hex64(dataset().fingerprint())}});
  indices_.erase(layer.name);
  return indices_.emplace(layer.name, std::move(idx)).first->second;
}

HyperplaneCache Workspace::probe_cache(const LayerId& layer) const {
  return HyperplaneCache(config_.output_dir / "probes" / layer.name);
}

// ---------------------------------------------------------------------------
// Results and reports

Json ClassResult::to_json() const {
  Json j{{"class", class_id},
         {"ok", ok},
         {"softmax_pred_target", softmax_pred_target},
         {"majority_class", majority_class},
         {"passed", passed}};
  if (!ok) j["error"] = error;
  return j;
}

ClassResult ClassResult::from_json(const Json& j) {
  ClassResult r;
  try {
    r.class_id = j.at("class").get<int>();
    r.ok = j.at("ok").get<bool>();
    r.softmax_pred_target = j.at("softmax_pred_target").get<double>();
    r.majority_class = j.at("majority_class").get<int>();
    r.passed = j.at("passed").get<bool>();
    r.error = j.value("error", "");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("class result: ") + e.what());
  }
  return r;
}

void SweepCell::aggregate() {
  std::sort(classes.begin(), classes.end(),
            [](const ClassResult& a, const ClassResult& b) { return a.class_id < b.class_id; });
  double pred_sum = 0.0;
  int passed = 0;
  failures = 0;
  for (const auto& r : classes) {
    if (r.ok) {
      pred_sum += r.softmax_pred_target;
      passed += r.passed ? 1 : 0;
    } else {
      ++failures;
    }
  }
  const double k = static_cast<double>(classes.size());
  average_pred = classes.empty() ? 0.0 : pred_sum / k;
  match_rate = classes.empty() ? 0.0 : static_cast<double>(passed) / k;
}

Json SweepCell::to_json() const {
  Json axes_json = Json::object();
  for (const auto& [k, v] : axes) axes_json[k] = v;
  Json per_class = Json::array();
  for (const auto& r : classes) per_class.push_back(r.to_json());
  return Json{{"axes", axes_json},
              {"average_pred", average_pred},
              {"match_rate", match_rate},
              {"class_count", classes.size()},
              {"failures", failures},
              {"runtime_seconds", runtime_seconds},
              {"classes", per_class}};
}

Json SweepReport::to_json() const {
  Json cells_json = Json::array();
  for (const auto& c : cells) cells_json.push_back(c.to_json());
  return Json{{"name", name}, {"axes", axis_names}, {"cells", cells_json}};
}

std::string SweepReport::to_csv() const {
  std::ostringstream out;
  for (const auto& a : axis_names) out << a << ',';
  out << "average_pred,match_rate,classes,failures,runtime_seconds\n";
  for (const auto& c : cells) {
    for (const auto& a : axis_names) {
      auto it = c.axes.find(a);
      out << (it == c.axes.end() ? "" : csv_cell(it->second)) << ',';
    }
    out << fmt(c.average_pred) << ',' << fmt(c.match_rate) << ',' << c.classes.size() << ',' << c.failures << ','
        << fmt(c.runtime_seconds) << '\n';
  }
  return out.str();
}

void SweepReport::write(const fs::path& dir) const {
  fs::create_directories(dir);
  write_json(dir / (name + ".json"), to_json());
  write_text(dir / (name + ".csv"), to_csv());
  plot_sweep(*this).write_png(dir / (name + ".png"));
}

Image plot_sweep(const SweepReport& report, int width, int height) {
  Image img(height, width, 1.0);
  const int margin = 20;
  auto set = [&](int x, int y, double r, double g, double b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    img.at(0, y, x) = r;
    img.at(1, y, x) = g;
    img.at(2, y, x) = b;
  };
  for (int x = margin; x < width - margin; ++x) set(x, height - margin, 0.3, 0.3, 0.3);
  for (int y = margin; y <= height - margin; ++y) set(margin, y, 0.3, 0.3, 0.3);
  for (int x = margin; x < width - margin; x += 4) set(x, margin, 0.8, 0.8, 0.8);  // y = 1

  const std::size_t n = report.cells.size();
  if (n == 0) return img;
  auto px = [&](std::size_t i) {
    return n == 1 ? width / 2 : margin + static_cast<int>(std::lround(static_cast<double>(i) * (width - 2 * margin) /
                                                                       static_cast<double>(n - 1)));
  };
  auto py = [&](double v) {
    return height - margin - static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * (height - 2 * margin)));
  };
  auto series = [&](auto value, double r, double g, double b) {
    for (std::size_t i = 0; i < n; ++i) {
      const int x0 = px(i), y0 = py(value(report.cells[i]));
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) set(x0 + dx, y0 + dy, r, g, b);
      }
      if (i + 1 == n) break;
      const int x1 = px(i + 1), y1 = py(value(report.cells[i + 1]));
      const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
      for (int s = 0; s <= steps; ++s) {
        set(x0 + (x1 - x0) * s / steps, y0 + (y1 - y0) * s / steps, r, g, b);
      }
    }
  };
  series([](const SweepCell& c) { return c.match_rate; }, 0.1, 0.6, 0.1);
  series([](const SweepCell& c) { return c.average_pred; }, 0.1, 0.2, 0.8);
  return img;
}

// ---------------------------------------------------------------------------
// Class suite and sweeps

namespace {

ClassResult evaluate_class(Workspace& ws, const ClassActivations& acts, int class_id, const LayerId& layer, int n,
                           Exclusion exclusion, int max_images, const fs::path& class_dir) {
  const ExperimentConfig& cfg = ws.config();
  ConceptConfig cc = cfg.concept_config(n);
  cc.collect.max_images = max_images;
  ClassResult r;
  r.class_id = class_id;
  const ConceptBasis basis = fit_class_concepts(
      acts, class_id, layer, cc, concept_fingerprint(ws.model(), ws.dataset(), class_id, layer, cc));
  const Explanation e = explain_basis(ws.model(), ws.dataset(), ws.index(layer), basis, cfg.m, exclusion);
  fs::create_directories(class_dir);
  basis.save(class_dir / "basis");
  write_explanation(class_dir, e, ws.index(layer), ws.dataset());
  r.ok = e.note.empty();
  if (!r.ok) r.error = e.note;
  r.softmax_pred_target = e.stitch_result.softmax_pred_target;
  r.majority_class = e.stitch_result.majority_class;
  r.passed = e.stitch_result.passed;
  return r;
}

ClassResult failed(int class_id, const std::string& what) {
  ClassResult r;
  r.class_id = class_id;
  r.error = what;
  return r;
}

void write_result(const fs::path& class_dir, const ClassResult& r) {
  fs::create_directories(class_dir);
  write_json(class_dir / "result.json", r.to_json());
}

struct Cell {
  int n;
  fs::path dir;
  SweepCell sweep;
};

// Fills every cell for one layer; scored activations are shared by all n.
void run_cells(Workspace& ws, const LayerId& layer, int max_images, Exclusion exclusion, std::vector<Cell>& cells) {
  const ExperimentConfig& cfg = ws.config();
  ws.index(layer);
  const std::vector<int>& preds = ws.predictions();
  const std::vector<int> classes = cfg.class_list(ws.model().num_classes());
  std::vector<std::vector<ClassResult>> results(classes.size(), std::vector<ClassResult>(cells.size()));
  std::vector<std::vector<double>> timings(classes.size(), std::vector<double>(cells.size(), 0.0));

  parallel_for(
      classes.size(),
      [&](std::size_t i) {
        const int k = classes[i];
        auto t0 = std::chrono::steady_clock::now();
        ConceptConfig cc = cfg.concept_config(cells.front().n);
        cc.collect.max_images = max_images;
        std::optional<ClassActivations> acts;
        std::string error;
        try {
          acts = score_class_activations(ws.model(), ws.dataset(), k, layer, cc, &preds);
        } catch (const std::exception& e) {
          error = e.what();
        }
        const double shared = seconds_since(t0) / static_cast<double>(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
          auto t1 = std::chrono::steady_clock::now();
          const fs::path class_dir = cells[c].dir / class_dir_name(k);
          ClassResult r;
          if (!acts) {
            r = failed(k, error);
          } else {
            try {
              r = evaluate_class(ws, *acts, k, layer, cells[c].n, exclusion, max_images, class_dir);
            } catch (const std::exception& e) {
              r = failed(k, e.what());
            }
          }
          write_result(class_dir, r);
          results[i][c] = r;
          timings[i][c] = shared + seconds_since(t1);
        }
      },
      static_cast<unsigned>(cfg.workers));

  for (std::size_t c = 0; c < cells.size(); ++c) {
    SweepCell& cell = cells[c].sweep;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      cell.classes.push_back(results[i][c]);
      cell.runtime_seconds += timings[i][c];
    }
    cell.aggregate();
    write_json(cells[c].dir / "cell.json", cell.to_json());
  }
}

}  // namespace

SweepCell run_class_suite(Workspace& ws, const SuiteOptions& options, const fs::path& cell_dir) {
  std::vector<Cell> cells{{options.n, cell_dir, {}}};
  cells[0].sweep.axes = {{"layer", options.layer.name},
                         {"n", options.n},
                         {"max_images", options.max_images},
                         {"exclusion", to_string(options.exclusion)}};
  fs::create_directories(cell_dir);
  run_cells(ws, options.layer, options.max_images, options.exclusion, cells);
  return cells[0].sweep;
}

SweepCell recompute_cell(const fs::path& cell_dir) {
  SweepCell cell;
  const Json stored = read_json(cell_dir / "cell.json");
  for (const auto& [k, v] : stored.at("axes").items()) cell.axes[k] = v;
  cell.runtime_seconds = stored.value("runtime_seconds", 0.0);
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(cell_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "result.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) cell.classes.push_back(ClassResult::from_json(read_json(d / "result.json")));
  cell.aggregate();
  return cell;
}

SweepReport grid_search(Workspace& ws, Exclusion exclusion) {
  const ExperimentConfig& cfg = ws.config();
  SweepReport report;
  report.name = "grid_search";
  report.axis_names = {"layer", "n"};
  for (const LayerId& layer : ws.layers()) {
    std::vector<Cell> cells;
    for (int n : cfg.n_values) {
      Cell c{n, cfg.output_dir / "grid" / (layer.name + "_n" + std::to_string(n)), {}};
      c.sweep.axes = {{"layer", layer.name},
                      {"n", n},
                      {"max_images", cfg.max_images},
                      {"exclusion", to_string(exclusion)}};
      fs::create_directories(c.dir);
      cells.push_back(std::move(c));
    }
    run_cells(ws, layer, cfg.max_images, exclusion, cells);
    for (auto& c : cells) report.cells.push_back(std::move(c.sweep));
  }
  report.write(cfg.output_dir / "grid");
  return report;
}

SweepReport sample_count_sweep(Workspace& ws, const LayerId& layer, int n, Exclusion exclusion) {
  const ExperimentConfig& cfg = ws.config();
  if (cfg.sample_counts.empty()) fail(ErrorKind::config, "sample_counts must not be empty");
  SweepReport report;
  report.name = "sample_sweep";
  report.axis_names = {"max_images"};
  for (int count : cfg.sample_counts) {
    SuiteOptions o{layer, n, count, exclusion};
    report.cells.push_back(run_class_suite(ws, o, cfg.output_dir / "sweep_samples" / ("count_" + std::to_string(count))));
  }
  report.write(cfg.output_dir / "sweep_samples");
  return report;
}

// ---------------------------------------------------------------------------
// Intruder quiz

Json IntruderQuiz::questions_json() const {
  Json items_json = Json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::ostringstream name;
    name << "items/item_" << std::setw(3) << std::setfill('0') << i << ".png";
    items_json.push_back({{"item", i}, {"class", items[i].class_id}, {"image", name.str()}, {"choices", 5}});
  }
  return Json{{"seed", seed}, {"instructions", "Pick the crop that does not belong with the other four."},
              {"items", items_json}, {"warnings", warnings}};
}

Json IntruderQuiz::answers_json() const {
  Json items_json = Json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const QuizItem& q = items[i];
    Json crops = Json::array();
    for (const auto& r : q.crops) {
      crops.push_back({{"source_id", r.source_id}, {"grid", {r.grid_row, r.grid_col}}});
    }
    items_json.push_back({{"item", i},
                          {"class", q.class_id},
                          {"concept_main", q.concept_main},
                          {"concept_intruder", q.concept_intruder},
                          {"answer_index", q.answer_index},
                          {"crops", crops}});
  }
  return Json{{"seed", seed}, {"items", items_json}};
}

IntruderQuiz make_intruder_quiz(std::span<const Explanation> explanations, const CropIndex& index, int items,
                                std::uint64_t seed) {
  if (items < 0) fail(ErrorKind::input, "item count must be non-negative");
  IntruderQuiz quiz;
  quiz.seed = seed;

  // Every usable (class, main, intruder) triple with the intruder's crop.
  struct Choice {
    std::size_t explanation;
    int main;
    int intruder;
    std::size_t intruder_record;
  };
  std::vector<std::vector<Choice>> per_class;
  for (std::size_t e = 0; e < explanations.size(); ++e) {
    const auto& vis = explanations[e].visualizations;
    std::vector<Choice> choices;
    for (std::size_t a = 0; a < vis.size(); ++a) {
      if (vis[a].crops.size() < 4) continue;
      std::set<std::size_t> main_records;
      for (std::size_t i = 0; i < 4; ++i) main_records.insert(vis[a].crops[i].record);
      for (std::size_t b = 0; b < vis.size(); ++b) {
        if (b == a) continue;
        for (const auto& hit : vis[b].crops) {
          if (main_records.contains(hit.record)) continue;
          choices.push_back({e, static_cast<int>(a), static_cast<int>(b), hit.record});
          break;
        }
      }
    }
    if (choices.empty()) {
      quiz.warnings.push_back("class " + std::to_string(explanations[e].class_id) +
                              " skipped: needs two concepts with 4 and 1 distinct crops");
    } else {
      per_class.push_back(std::move(choices));
    }
  }
  if (items > 0 && per_class.empty()) fail(ErrorKind::insufficient_samples, "no class can supply a quiz item");

  std::mt19937_64 rng(seed);
  for (int i = 0; i < items; ++i) {
    const auto& choices = per_class[pick(rng, per_class.size())];
    const Choice& c = choices[pick(rng, choices.size())];
    const Explanation& e = explanations[c.explanation];
    std::vector<std::pair<std::size_t, bool>> crops;
    for (std::size_t k = 0; k < 4; ++k) crops.emplace_back(e.visualizations[static_cast<std::size_t>(c.main)].crops[k].record, false);
    crops.emplace_back(c.intruder_record, true);
    shuffle_in_place(crops, rng);
    QuizItem q;
    q.class_id = e.class_id;
    q.concept_main = c.main;
    q.concept_intruder = c.intruder;
    for (std::size_t k = 0; k < crops.size(); ++k) {
      q.crops.push_back(index.records.at(crops[k].first));
      if (crops[k].second) q.answer_index = static_cast<int>(k);
    }
    quiz.items.push_back(std::move(q));
  }
  return quiz;
}

void write_quiz(const fs::path& dir, const IntruderQuiz& quiz, const CropIndex& index, const Dataset& dataset) {
  fs::create_directories(dir / "items");
  write_json(dir / "quiz.json", quiz.questions_json());
  write_json(dir / "answers.json", quiz.answers_json());
  const int side = index.crop_side;
  const int gap = 2;
  for (std::size_t i = 0; i < quiz.items.size(); ++i) {
    Image strip(side, 5 * side + 4 * gap, 1.0);
    for (std::size_t k = 0; k < quiz.items[i].crops.size(); ++k) {
      strip.paste(crop_pixels(dataset, quiz.items[i].crops[k]), static_cast<int>(k) * (side + gap), 0);
    }
    std::ostringstream name;
    name << "item_" << std::setw(3) << std::setfill('0') << i << ".png";
    strip.write_png(dir / "items" / name.str());
  }
}

// ---------------------------------------------------------------------------
// Contrast helpers

Hyperplane pair_hyperplane(Workspace& ws, const LayerId& layer, int class_a, int class_b) {
  const ExperimentConfig& cfg = ws.config();
  if (class_a == class_b) fail(ErrorKind::input, "contrast needs two different classes");
  const Json fp{{"model", params_fingerprint(ws.model())},
                {"dataset", hex64(ws.dataset().fingerprint())},
                {"layer", layer.name},
                {"classes", {class_a, class_b}},
                {"attribution", cfg.attribution.str()},
                {"max_images", cfg.probe_max_images},
                {"min_images", cfg.min_images},
                {"epochs", cfg.probe.epochs},
                {"lr", cfg.probe.lr},
                {"seed", cfg.seed}};
  const std::vector<int>& preds = ws.predictions();
  return ws.probe_cache(layer).get_or_train(class_a, class_b, fingerprint(fp), [&] {
    CollectOptions co = cfg.collect_options();
    co.max_images = cfg.probe_max_images;
    const ActivationBank a =
        collect_hyperplane_pixels(ws.model(), ws.dataset(), class_a, layer, cfg.attribution, co, cfg.seed, &preds);
    const ActivationBank b =
        collect_hyperplane_pixels(ws.model(), ws.dataset(), class_b, layer, cfg.attribution, co, cfg.seed, &preds);
    return train_hyperplane(a, b, cfg.seed, cfg.probe);
  });
}

ShiftResult run_shift(Workspace& ws, const LayerId& layer, int class_a, int class_b) {
  const ExperimentConfig& cfg = ws.config();
  const Hyperplane h = pair_hyperplane(ws, layer, class_a, class_b);
  CollectOptions co;
  co.max_images = cfg.shift_images;
  co.min_images = std::min(cfg.min_images, cfg.shift_images);
  const ImageBatch images = collect_class_images(ws.model(), ws.dataset(), class_b, co, &ws.predictions());
  double scale = 0.0;
  const std::vector<double> offsets = default_offsets(ws.model(), layer, images, &scale);
  ShiftResult r = shifting_test(ws.model(), layer, h, images, offsets);
  r.scale = scale;
  return r;
}

double ShiftSuite::improved_fraction() const {
  if (pairs.empty()) return 0.0;
  const auto up = std::count_if(results.begin(), results.end(),
                                [](const ShiftResult& r) { return r.shifted_pred > r.default_pred; });
  return static_cast<double>(up) / static_cast<double>(pairs.size());
}

Json ShiftSuite::to_json() const {
  Json pairs_json = Json::array();
  for (const auto& [a, b] : pairs) pairs_json.push_back({a, b});
  Json res = Json::array();
  for (const auto& r : results) res.push_back(r.to_json());
  return Json{{"pairs", pairs_json},
              {"improved_fraction", improved_fraction()},
              {"results", res},
              {"failures", failures}};
}

std::string ShiftSuite::to_csv() const {
  std::ostringstream out;
  out << "class_a,class_b,default_pred,shifted_pred,best_offset,scale,image_count\n";
  for (const auto& r : results) {
    out << r.class_a << ',' << r.class_b << ',' << fmt(r.default_pred) << ',' << fmt(r.shifted_pred) << ','
        << fmt(r.best_offset) << ',' << fmt(r.scale) << ',' << r.image_count << '\n';
  }
  return out.str();
}

std::vector<std::pair<int, int>> sample_shift_pairs(const std::vector<int>& classes, int num_classes, int per_class,
                                                    std::uint64_t seed) {
  std::vector<std::pair<int, int>> pairs;
  for (int a : classes) {
    std::vector<int> others;
    for (int b = 0; b < num_classes; ++b) {
      if (b != a) others.push_back(b);
    }
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(a)));
    const std::size_t take = std::min(others.size(), static_cast<std::size_t>(std::max(per_class, 0)));
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(others[i], others[i + pick(rng, others.size() - i)]);
      pairs.emplace_back(a, others[i]);
    }
  }
  return pairs;
}

ShiftSuite run_shift_suite(Workspace& ws, const LayerId& layer, const std::vector<std::pair<int, int>>& pairs) {
  ShiftSuite suite;
  suite.pairs = pairs;
  ws.predictions();
  std::vector<std::optional<ShiftResult>> results(pairs.size());
  std::vector<std::string> errors(pairs.size());
  parallel_for(
      pairs.size(),
      [&](std::size_t i) {
        try {
          results[i] = run_shift(ws, layer, pairs[i].first, pairs[i].second);
        } catch (const std::exception& e) {
          errors[i] = std::to_string(pairs[i].first) + " vs " + std::to_string(pairs[i].second) + ": " + e.what();
        }
      },
      static_cast<unsigned>(ws.config().workers));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (results[i]) suite.results.push_back(*results[i]);
    else suite.failures.push_back(errors[i]);
  }
  return suite;
}

}  // namespace cxplain
