#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cxplain/error.hpp"
#include "cxplain/fixture.hpp"
#include "cxplain/harness.hpp"

namespace fs = std::filesystem;
using namespace cxplain;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string layer;
  std::optional<int> n;
  std::string attrib;
  std::string out;
  std::optional<int> workers;
};

ExperimentConfig load_config(const Globals& g) {
  if (g.config.empty()) fail(ErrorKind::config, "--config is required for this command");
  ExperimentConfig c = ExperimentConfig::load(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.layer.empty()) c.layers = {g.layer};
  if (g.n) c.n_values = {*g.n};
  if (!g.attrib.empty()) c.attribution = AttributionMethod::parse(g.attrib);
  if (!g.out.empty()) c.output_dir = g.out;
  if (g.workers) c.workers = *g.workers;
  return c;
}

int single_n(const ExperimentConfig& c) { return c.n_values.front(); }

const LayerId& single_layer(Workspace& ws) {
  return ws.layer(ws.config().layers.empty() ? std::string() : ws.config().layers.front());
}

std::string explanation_csv(const Explanation& e, const CropIndex& index) {
  std::ostringstream out;
  out << "concept,rank,record,source_id,grid_row,grid_col,cosine,crop_pred,image_pred\n";
  out << std::setprecision(17);
  for (const auto& v : e.visualizations) {
    for (std::size_t r = 0; r < v.crops.size(); ++r) {
      const CropRecord& rec = index.records[v.crops[r].record];
      out << v.concept_index << ',' << r << ',' << v.crops[r].record << ',' << rec.source_id << ',' << rec.grid_row
          << ',' << rec.grid_col << ',' << v.crops[r].cosine << ',' << rec.crop_pred << ',' << rec.image_pred << '\n';
    }
  }
  return out.str();
}

void emit_explanation(const fs::path& dir, const Explanation& e, Workspace& ws) {
  fs::create_directories(dir);
  const CropIndex& index = ws.index(e.layer);
  write_explanation(dir, e, index, ws.dataset());
  write_text(dir / "explanation.csv", explanation_csv(e, index));
}

void print_stitch(const char* label, const Explanation& e) {
  if (!e.note.empty()) {
    std::printf("%s class %d: %s\n", label, e.class_id, e.note.c_str());
    return;
  }
  std::printf("%s class %d: pred %.4f majority %d %s\n", label, e.class_id, e.stitch_result.softmax_pred_target,
              e.stitch_result.majority_class, e.stitch_result.passed ? "PASS" : "fail");
}

Explanation explain_class(Workspace& ws, int class_id, const LayerId& layer, int n, int m, Exclusion exclusion,
                          ConceptBasis* basis_out = nullptr) {
  const ConceptConfig cc = ws.config().concept_config(n);
  ConceptBasis basis = extract_class_concepts(ws.model(), ws.dataset(), class_id, layer, cc, &ws.predictions());
  Explanation e = explain_basis(ws.model(), ws.dataset(), ws.index(layer), basis, m, exclusion);
  if (basis_out) *basis_out = std::move(basis);
  return e;
}

void print_cell(const SweepCell& c) {
  std::string axes;
  for (const auto& [k, v] : c.axes) axes += k + "=" + (v.is_string() ? v.get<std::string>() : v.dump()) + " ";
  std::printf("%saverage_pred %.4f match_rate %.4f failures %d (%.1fs)\n", axes.c_str(), c.average_pred,
              c.match_rate, c.failures, c.runtime_seconds);
}

std::string pair_name(int a, int b) { return std::to_string(a) + "_vs_" + std::to_string(b); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-based explanations for image classifiers"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--layer", g.layer, "Cataloged layer name");
  app.add_option("--n", g.n, "Number of concepts");
  app.add_option("--attrib", g.attrib, "Attribution: grad_x_act, deeplift or smoothgrad:<inner>:<samples>:<sigma>");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--workers", g.workers, "Worker threads (0: all cores)");

  // index build
  auto* index_cmd = app.add_subcommand("index", "Crop index commands");
  index_cmd->require_subcommand(1);
  auto* index_build = index_cmd->add_subcommand("build", "Build the crop index of the dataset");
  bool force = false;
  index_build->add_flag("--force", force, "Rebuild even if a matching index exists");

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Extract and visualize the concepts of one class");
  int explain_class_id = 0;
  std::string explain_exclusion;
  std::optional<int> explain_m;
  explain_cmd->add_option("class", explain_class_id, "Class id")->required();
  explain_cmd->add_option("--exclusion", explain_exclusion, "none, crop or strict");
  explain_cmd->add_option("--m", explain_m, "Crops per concept");

  // validate
  auto* validate_cmd = app.add_subcommand("validate", "Stitching test for one class or all classes");
  std::optional<int> validate_class;
  bool validate_all = false;
  bool exclude_target = false;
  validate_cmd->add_option("class", validate_class, "Class id");
  validate_cmd->add_flag("--all", validate_all, "Every configured class");
  validate_cmd->add_flag("--exclude-target", exclude_target, "Exclude target crops (config exclusion, or strict)");

  // contrast
  auto* contrast_cmd = app.add_subcommand("contrast", "Concepts separating class A from class B");
  int ca = 0, cb = 0;
  contrast_cmd->add_option("A", ca, "Class A")->required();
  contrast_cmd->add_option("B", cb, "Class B")->required();

  // shift
  auto* shift_cmd = app.add_subcommand("shift", "Shift B activations along the A-vs-B normal");
  std::optional<int> sa, sb;
  bool shift_sampled = false;
  shift_cmd->add_option("A", sa, "Class A");
  shift_cmd->add_option("B", sb, "Class B");
  shift_cmd->add_flag("--sampled", shift_sampled, "Seeded random pairs per configured class");

  // insert-test
  auto* insert_cmd = app.add_subcommand("insert-test", "Insert a patch into images predicted as one class");
  int insert_images_class = 0;
  std::string insert_patch;
  std::optional<int> insert_patch_class;
  std::vector<int> insert_classes;
  int insert_count = 128;
  std::optional<int> insert_side;
  insert_cmd->add_option("--images-class", insert_images_class, "Class whose predicted images get the patch")
      ->required();
  insert_cmd->add_option("--patch", insert_patch, "Patch PNG");
  insert_cmd->add_option("--patch-class", insert_patch_class,
                         "Take the patch from the top crop of this class's first concept");
  insert_cmd->add_option("--classes", insert_classes, "Classes to report")->delimiter(',');
  insert_cmd->add_option("--count", insert_count, "Number of images");
  insert_cmd->add_option("--side", insert_side, "Patch side (default: a third of the image)");

  // sweeps
  auto* grid_cmd = app.add_subcommand("grid-search", "Stitching test over layers x n");
  std::string grid_exclusion;
  grid_cmd->add_option("--exclusion", grid_exclusion, "none, crop or strict (default from config)");
  auto* sweep_cmd = app.add_subcommand("sweep-samples", "Stitching test over sample counts");
  std::string sweep_exclusion;
  sweep_cmd->add_option("--exclusion", sweep_exclusion, "none, crop or strict (default from config)");

  auto* quiz_cmd = app.add_subcommand("quiz", "Build an intruder-detection quiz");
  std::optional<int> quiz_items;
  quiz_cmd->add_option("--items", quiz_items, "Number of items");

  // fixture
  auto* fixture_cmd = app.add_subcommand("fixture", "Synthetic dataset and desk-scale model");
  fixture_cmd->require_subcommand(1);
  auto* fixture_gen = fixture_cmd->add_subcommand("generate", "Write the synthetic shapes dataset");
  SyntheticOptions synth;
  std::string gen_out = "shapes.cxds";
  fixture_gen->add_option("--per-class", synth.per_class, "Images per class");
  fixture_gen->add_option("--side", synth.side, "Image side");
  fixture_gen->add_option("--data-seed", synth.seed, "Generator seed");
  fixture_gen->add_option("--file", gen_out, "Output dataset file");
  auto* fixture_train = fixture_cmd->add_subcommand("train", "Train the fixture classifier");
  FixtureOptions fopt;
  std::string train_dataset;
  std::string train_dir = "fixture";
  fixture_train->add_option("--dataset", train_dataset, "Dataset file (.cxds or CIFAR-10 .bin)")->required();
  fixture_train->add_option("--dir", train_dir, "Output directory for model and experiment config");
  fixture_train->add_option("--epochs", fopt.epochs, "Epoch cap");
  fixture_train->add_option("--lr", fopt.lr, "Learning rate");
  fixture_train->add_option("--batch", fopt.batch_size, "Batch size");
  fixture_train->add_option("--target-accuracy", fopt.target_accuracy, "Stop once train accuracy reaches this");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fixture_gen->parsed()) {
      const Dataset ds = make_synthetic_shapes(synth);
      const fs::path file = gen_out;
      if (file.has_parent_path()) fs::create_directories(file.parent_path());
      ds.save(file);
      std::printf("wrote %zu images (%dx%d, %d classes) to %s\n", ds.size(), ds.height(), ds.width(),
                  ds.num_classes(), file.c_str());
      return 0;
    }
    if (fixture_train->parsed()) {
      if (g.seed) fopt.seed = *g.seed;
      const Dataset ds = Dataset::load(train_dataset);
      const FixtureResult r = train_fixture_model(ds, fopt, [](const FixtureEpoch& e) {
        std::printf("epoch %d loss %.4f accuracy %.4f\n", e.epoch, e.loss, e.train_accuracy);
        std::fflush(stdout);
      });
      const fs::path dir = train_dir;
      fs::create_directories(dir);
      r.model.save(dir / "model.json");
      ExperimentConfig cfg;
      cfg.model_config = "model.json";
      cfg.dataset = fs::absolute(train_dataset);
      cfg.output_dir = "out";
      write_json(dir / "experiment.json", cfg.to_json());
      Json hist = Json::array();
      for (const auto& e : r.history) {
        hist.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}});
      }
      write_json(dir / "training.json", Json{{"train_accuracy", r.train_accuracy}, {"history", hist}});
      std::printf("train accuracy %.4f; wrote %s\n", r.train_accuracy, (dir / "experiment.json").c_str());
      return 0;
    }

    Workspace ws(load_config(g));
    const ExperimentConfig& cfg = ws.config();
    const fs::path out = cfg.output_dir;

    if (index_build->parsed()) {
      for (const LayerId& layer : ws.layers()) {
        const CropIndex& idx = force ? ws.rebuild_index(layer) : ws.index(layer);
        std::printf("layer %s: %zu crops of side %d in %s\n", layer.name.c_str(), idx.size(), idx.crop_side,
                    ws.index_dir(layer).c_str());
      }
      return 0;
    }

    if (explain_cmd->parsed()) {
      const LayerId& layer = single_layer(ws);
      const Exclusion ex = explain_exclusion.empty() ? cfg.exclusion : parse_exclusion(explain_exclusion);
      ConceptBasis basis;
      const Explanation e =
          explain_class(ws, explain_class_id, layer, single_n(cfg), explain_m.value_or(cfg.m), ex, &basis);
      const fs::path dir = out / "explain" / (layer.name + "_n" + std::to_string(e.n)) /
                           ("class_" + std::to_string(explain_class_id));
      emit_explanation(dir, e, ws);
      basis.save(dir / "basis");
      print_stitch("explain", e);
      std::printf("wrote %s\n", dir.c_str());
      return 0;
    }

    if (validate_cmd->parsed()) {
      if (validate_all == validate_class.has_value()) fail(ErrorKind::input, "give either a class or --all");
      const LayerId& layer = single_layer(ws);
      const Exclusion ex =
          exclude_target ? (cfg.exclusion == Exclusion::none ? Exclusion::strict : cfg.exclusion) : Exclusion::none;
      ExperimentConfig scoped = cfg;
      if (validate_class) scoped.classes = {*validate_class};
      Workspace vws(scoped);
      SuiteOptions o{layer, single_n(cfg), cfg.max_images, ex};
      const fs::path dir = out / "validate" / (layer.name + "_n" + std::to_string(o.n) + "_" + to_string(ex));
      SweepReport report;
      report.name = "validate";
      report.axis_names = {"layer", "n", "exclusion"};
      report.cells.push_back(run_class_suite(vws, o, dir));
      report.write(dir);
      for (const auto& r : report.cells[0].classes) {
        if (r.ok) {
          std::printf("class %d: pred %.4f majority %d %s\n", r.class_id, r.softmax_pred_target, r.majority_class,
                      r.passed ? "PASS" : "fail");
        } else {
          std::printf("class %d: failed: %s\n", r.class_id, r.error.c_str());
        }
      }
      print_cell(report.cells[0]);
      return 0;
    }

    if (contrast_cmd->parsed()) {
      const LayerId& layer = single_layer(ws);
      const int n = single_n(cfg);
      const Hyperplane h = pair_hyperplane(ws, layer, ca, cb);
      const ConceptBasis basis = contrast_concepts(ws.model(), ws.dataset(), h, layer, cfg.concept_config(n),
                                                   &ws.predictions());
      const Explanation contrasted = explain_basis(ws.model(), ws.dataset(), ws.index(layer), basis, cfg.m,
                                                   cfg.exclusion);
      const Explanation isolated = explain_class(ws, ca, layer, n, cfg.m, cfg.exclusion);
      const fs::path dir = out / "contrast" / layer.name / pair_name(ca, cb);
      emit_explanation(dir / "contrast", contrasted, ws);
      basis.save(dir / "contrast" / "basis");
      emit_explanation(dir / "isolated", isolated, ws);
      const Json summary{{"class_a", ca},
                         {"class_b", cb},
                         {"layer", layer.name},
                         {"n", n},
                         {"probe", h.sidecar()},
                         {"contrast_pred", contrasted.stitch_result.softmax_pred_target},
                         {"contrast_majority", contrasted.stitch_result.majority_class},
                         {"isolated_pred", isolated.stitch_result.softmax_pred_target},
                         {"isolated_majority", isolated.stitch_result.majority_class}};
      write_json(dir / "contrast.json", summary);
      std::ostringstream csv;
      csv << std::setprecision(17) << "variant,pred_a,majority\n"
          << "contrast," << contrasted.stitch_result.softmax_pred_target << ','
          << contrasted.stitch_result.majority_class << "\nisolated," << isolated.stitch_result.softmax_pred_target
          << ',' << isolated.stitch_result.majority_class << '\n';
      write_text(dir / "contrast.csv", csv.str());
      std::printf("probe accuracy %.4f\n", h.stats.final_accuracy);
      print_stitch("contrast", contrasted);
      print_stitch("isolated", isolated);
      std::printf("wrote %s\n", dir.c_str());
      return 0;
    }

    if (shift_cmd->parsed()) {
      const LayerId& layer = single_layer(ws);
      std::vector<std::pair<int, int>> pairs;
      if (shift_sampled) {
        pairs = sample_shift_pairs(cfg.class_list(ws.model().num_classes()), ws.model().num_classes(),
                                   cfg.shift_targets, cfg.seed);
      } else {
        if (!sa || !sb) fail(ErrorKind::input, "give classes A and B, or --sampled");
        pairs = {{*sa, *sb}};
      }
      const ShiftSuite suite = run_shift_suite(ws, layer, pairs);
      const fs::path dir = out / "shift" / layer.name / (shift_sampled ? std::string("sampled") : pair_name(*sa, *sb));
      fs::create_directories(dir);
      write_json(dir / "shift.json", suite.to_json());
      write_text(dir / "shift.csv", suite.to_csv());
      for (const auto& r : suite.results) {
        std::printf("%d vs %d: default %.4f shifted %.4f at t=%.4g\n", r.class_a, r.class_b, r.default_pred,
                    r.shifted_pred, r.best_offset);
      }
      for (const auto& f : suite.failures) std::printf("failed: %s\n", f.c_str());
      std::printf("improved %.3f of %zu pairs; wrote %s\n", suite.improved_fraction(), suite.pairs.size(),
                  dir.c_str());
      return suite.failures.size() == suite.pairs.size() ? 1 : 0;
    }

    if (insert_cmd->parsed()) {
      const Dataset& ds = ws.dataset();
      CollectOptions co;
      co.max_images = insert_count;
      co.min_images = 1;
      std::vector<Image> images;
      for (SourceId id : collect_class_images(ws.model(), ds, insert_images_class, co, &ws.predictions()).source_ids) {
        images.push_back(ds.image(id));
      }
      const int side = insert_side.value_or(default_patch_side(images.front().height(), images.front().width()));
      Image patch;
      std::string patch_origin;
      if (!insert_patch.empty()) {
        patch = Image::read_png(insert_patch);
        patch_origin = insert_patch;
      } else if (insert_patch_class) {
        const Explanation e =
            explain_class(ws, *insert_patch_class, single_layer(ws), single_n(cfg), 1, cfg.exclusion);
        if (e.visualizations.empty() || e.visualizations.front().crops.empty()) {
          fail(ErrorKind::input, "no crop available for the patch class");
        }
        const CropIndex& idx = ws.index(single_layer(ws));
        const CropRecord& rec = idx.records[e.visualizations.front().crops.front().record];
        patch = crop_pixels(ds, rec);
        patch_origin = ds.id_string(rec.source_id) + " cell " + std::to_string(rec.grid_row) + "," +
                       std::to_string(rec.grid_col);
      } else {
        fail(ErrorKind::input, "give --patch or --patch-class");
      }
      if (patch.height() != side || patch.width() != side) patch = patch.resize_bilinear(side, side);
      std::vector<int> classes = insert_classes;
      if (classes.empty()) {
        classes.push_back(insert_images_class);
        if (insert_patch_class && *insert_patch_class != insert_images_class) classes.push_back(*insert_patch_class);
      }
      const fs::path dir = out / "insert" / ("images_" + std::to_string(insert_images_class));
      fs::create_directories(dir);
      const InsertionReport report = patch_insertion_test(ws.model(), images, patch, classes, dir);
      Json j = report.to_json();
      j["patch_source"] = patch_origin;
      write_json(dir / "insertion.json", j);
      std::ostringstream csv;
      csv << std::setprecision(17) << "condition";
      for (int c : classes) csv << ",class_" << c;
      csv << '\n';
      for (const auto* cond : {&report.original, &report.patched, &report.black}) {
        csv << cond->name;
        for (double v : cond->mean_softmax) csv << ',' << v;
        csv << '\n';
      }
      write_text(dir / "insertion.csv", csv.str());
      std::printf("%s", csv.str().c_str());
      std::printf("wrote %s\n", dir.c_str());
      return 0;
    }

    if (grid_cmd->parsed()) {
      const Exclusion ex = grid_exclusion.empty() ? cfg.exclusion : parse_exclusion(grid_exclusion);
      const SweepReport report = grid_search(ws, ex);
      for (const auto& c : report.cells) print_cell(c);
      std::printf("wrote %s\n", (out / "grid").c_str());
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const Exclusion ex = sweep_exclusion.empty() ? cfg.exclusion : parse_exclusion(sweep_exclusion);
      const SweepReport report = sample_count_sweep(ws, single_layer(ws), single_n(cfg), ex);
      for (const auto& c : report.cells) print_cell(c);
      std::printf("wrote %s\n", (out / "sweep_samples").c_str());
      return 0;
    }

    if (quiz_cmd->parsed()) {
      const LayerId& layer = single_layer(ws);
      const int n = g.n.value_or(cfg.quiz_n);
      std::vector<Explanation> explanations;
      std::vector<std::string> warnings;
      for (int k : cfg.class_list(ws.model().num_classes())) {
        try {
          explanations.push_back(explain_class(ws, k, layer, n, std::max(cfg.m, 4), cfg.exclusion));
        } catch (const Error& e) {
          warnings.push_back("class " + std::to_string(k) + " skipped: " + e.what());
        }
      }
      IntruderQuiz quiz = make_intruder_quiz(explanations, ws.index(layer), quiz_items.value_or(cfg.quiz_items), cfg.seed);
      quiz.warnings.insert(quiz.warnings.begin(), warnings.begin(), warnings.end());
      const fs::path dir = out / "quiz";
      write_quiz(dir, quiz, ws.index(layer), ws.dataset());
      std::ostringstream csv;
      csv << "item,class,concept_main,concept_intruder,answer_index\n";
      for (std::size_t i = 0; i < quiz.items.size(); ++i) {
        const QuizItem& q = quiz.items[i];
        csv << i << ',' << q.class_id << ',' << q.concept_main << ',' << q.concept_intruder << ',' << q.answer_index
            << '\n';
      }
      write_text(dir / "answers.csv", csv.str());
      for (const auto& w : quiz.warnings) std::printf("warning: %s\n", w.c_str());
      std::printf("%zu items; wrote %s\n", quiz.items.size(), dir.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
