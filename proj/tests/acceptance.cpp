// Acceptance suite: one PASS/FAIL line per criterion against the trained
// fixture. Usage: acceptance <fixture experiment.json> <cxplain binary>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "cxplain/attribution.hpp"
#include "cxplain/error.hpp"
#include "cxplain/fixture.hpp"
#include "cxplain/harness.hpp"
#include "cxplain/nmf.hpp"
#include "support.hpp"

using namespace cxtest;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix random_nonneg(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

double sum_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

ActivationBank cloud(int class_id, const std::vector<double>& center, int rows, double spread, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-spread, spread);
  ActivationBank bank;
  bank.class_id = class_id;
  bank.vectors.resize(rows, static_cast<Eigen::Index>(center.size()));
  for (int i = 0; i < rows; ++i) {
    for (std::size_t c = 0; c < center.size(); ++c) bank.vectors(i, static_cast<Eigen::Index>(c)) = center[c] + u(rng);
  }
  bank.cells_seen = static_cast<std::size_t>(rows);
  return bank;
}

// 1. forward_from_layer(forward_to_layer(x)) == forward_full(x)
Outcome composition(Workspace& ws) {
  const ModelHandle& model = ws.model();
  const Dataset& ds = ws.dataset();
  const ImageBatch batch = random_batch(model, 100, ds.height(), ds.width(), 101);
  const Matrix full = model.forward_full(batch);
  double worst = 0.0;
  for (const LayerId& layer : model.layer_catalog()) {
    const Matrix split = model.forward_from_layer(layer, model.forward_to_layer(layer, batch));
    for (Eigen::Index r = 0; r < full.rows(); ++r) {
      const double scale = std::max(full.row(r).cwiseAbs().maxCoeff(), 1e-300);
      worst = std::max(worst, (split.row(r) - full.row(r)).cwiseAbs().maxCoeff() / scale);
    }
  }
  return {worst <= 1e-5, fmt("%zu layers x 100 images, max rel diff %.2e", model.layer_catalog().size(), worst)};
}

// 2. analytic head, finite differences, DeepLift completeness, smoothgrad(0)
Outcome attribution(Workspace& ws) {
  const std::vector<double> w{0.5, -1.25, 2.0, 1.5, 0.25, -0.75};
  const ModelHandle head = linear_head_model(w, {0.1, -0.2});
  const LayerId& relu0 = head.layer("relu0");
  const ImageBatch hb = random_batch(head, 4, 6, 6, 17);
  const Tensor hacts = head.forward_to_layer(relu0, hb);
  double analytic = 0.0;
  for (int target : {0, 1}) {
    const Tensor attr = grad_times_activation(head, relu0, hb, target);
    for (int b = 0; b < 4; ++b) {
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 6; ++y) {
          for (int x = 0; x < 6; ++x) {
            const double expected = w[static_cast<std::size_t>(target * 3 + c)] * hacts.at(b, c, y, x) / 36.0;
            analytic = std::max(analytic, std::abs(attr.at(b, c, y, x) - expected) / std::max(1.0, std::abs(expected)));
          }
        }
      }
    }
  }

  const ModelHandle& model = ws.model();
  const Dataset& ds = ws.dataset();
  const auto& catalog = model.layer_catalog();
  std::mt19937_64 rng(23);
  double fd_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const LayerId& layer = catalog[static_cast<std::size_t>(trial) % catalog.size()];
    const SourceId id = static_cast<SourceId>(rng() % ds.size());
    const ImageBatch batch = load_batch(model, ds, std::vector<SourceId>{id});
    const int target = static_cast<int>(rng() % static_cast<std::uint64_t>(model.num_classes()));
    const Tensor acts = model.forward_to_layer(layer, batch);
    const Tensor attr = grad_times_activation(model, layer, batch, target);
    const Shape s = acts.shape();
    // Pick a cell, then its strongest channel so the check is not on a dead unit.
    const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(s.h));
    const int x = static_cast<int>(rng() % static_cast<std::uint64_t>(s.w));
    int c = 0;
    for (int k = 1; k < s.c; ++k) {
      if (acts.at(0, k, y, x) > acts.at(0, c, y, x)) c = k;
    }
    const double eps = 1e-5;
    Tensor plus = acts, minus = acts;
    plus.at(0, c, y, x) += eps;
    minus.at(0, c, y, x) -= eps;
    const double fd =
        (model.forward_from_layer(layer, plus)(0, target) - model.forward_from_layer(layer, minus)(0, target)) /
        (2 * eps);
    const double expected = fd * acts.at(0, c, y, x);
    fd_worst = std::max(fd_worst, std::abs(attr.at(0, c, y, x) - expected) / std::max(std::abs(expected), 1e-8));
  }

  const LayerId& mid = model.layer("relu2");
  const Tensor base = white_baseline(model, ds.height(), ds.width());
  const Matrix ref = model.forward_full(ImageBatch{base, {0}});
  double completeness = 0.0;
  for (int p = 0; p < 50; ++p) {
    const SourceId id = static_cast<SourceId>(p * 37 % static_cast<int>(ds.size()));
    const int target = p % model.num_classes();
    const ImageBatch batch = load_batch(model, ds, std::vector<SourceId>{id});
    const Tensor attr = deeplift_rescale(model, mid, batch, target);
    const double delta = model.forward_full(batch)(0, target) - ref(0, target);
    completeness = std::max(completeness, std::abs(sum_of(attr.sample(0)) - delta) / std::max(std::abs(delta), 1e-12));
  }

  const ImageBatch sg = load_batch(model, ds, std::vector<SourceId>{3, 14, 15});
  const bool smooth = bitwise_equal(smoothgrad(AttributionKind::grad_x_act, model, mid, sg, 2, 5, 0.0, 9),
                                    grad_times_activation(model, mid, sg, 2)) &&
                      bitwise_equal(smoothgrad(AttributionKind::deeplift, model, mid, sg, 1, 3, 0.0, 9),
                                    deeplift_rescale(model, mid, sg, 1));
  return {analytic <= 1e-5 && fd_worst <= 1e-2 && completeness <= 1e-4 && smooth,
          fmt("analytic %.1e, finite-diff rel %.1e, completeness %.1e, smoothgrad(0) %s", analytic, fd_worst,
              completeness, smooth ? "identical" : "differs")};
}

// 3. monotone objective, rank-1 recovery, noisy fit
Outcome nmf() {
  bool monotone = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const int rows = 10 + static_cast<int>(s * 7 % 60);
    const int cols = 3 + static_cast<int>(s % 9);
    const int n = 1 + static_cast<int>(s % static_cast<std::uint64_t>(std::min(rows, cols)));
    const NmfResult r = nmf_fit(random_nonneg(rows, cols, s), n, {100, 0.0, s});
    for (std::size_t i = 1; i < r.objective.size(); ++i) monotone &= r.objective[i] <= r.objective[i - 1] * (1.0 + 1e-12);
  }
  const Matrix u = random_nonneg(80, 1, 1).array() + 0.1;
  const Matrix w = random_nonneg(1, 12, 2).array() + 0.1;
  const double rank1 = nmf_fit(u * w, 1).final_rel_error;

  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  const Matrix clean = random_nonneg(300, 4, 3) * random_nonneg(4, 20, 4);
  Matrix v = clean;
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::max(0.0, v.data()[i] + noise(rng));
  const double floor = (v - clean).norm() / v.norm();
  const double noisy = nmf_fit(v, 4, {1000, 1e-6, 0}).final_rel_error;
  return {monotone && rank1 <= 1e-3 && noisy <= 2.0 * floor,
          fmt("monotone on 20 matrices: %s, rank-1 error %.1e, noisy %.4f vs floor %.4f", monotone ? "yes" : "no",
              rank1, noisy, floor)};
}

// 4. top-k equals a brute-force scan
Outcome retrieval(Workspace& ws) {
  const CropIndex& index = ws.index(ws.layer(""));
  if (index.size() < 10000) return {false, fmt("index has only %zu crops", index.size())};
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0;
  for (int q = 0; q < 100; ++q) {
    std::vector<double> query(static_cast<std::size_t>(index.embeddings.cols()));
    for (double& v : query) v = u(rng) < 0.3 ? 0.0 : u(rng);
    query[static_cast<std::size_t>(q) % query.size()] += 0.1;
    const int target = q % ws.model().num_classes();
    for (Exclusion ex : {Exclusion::none, Exclusion::crop, Exclusion::strict}) {
      if (!same_hits(topk_crops(index, query, 16, ex, target).hits, brute_topk(index, query, 16, ex, target))) {
        ++mismatches;
      }
    }
  }
  return {mismatches == 0, fmt("100 queries x 3 exclusions on %zu crops, %d mismatches", index.size(), mismatches)};
}

SweepCell suite(Workspace& ws, int n, Exclusion ex, const std::string& name) {
  const SuiteOptions o{ws.layer(""), n, ws.config().max_images, ex};
  return run_class_suite(ws, o, ws.config().output_dir / "acceptance" / name);
}

// 5. n = 1 with strict exclusion never matches
Outcome strict_single(Workspace& ws) {
  const SweepCell c = suite(ws, 1, Exclusion::strict, "strict_n1");
  return {c.match_rate == 0.0 && c.failures == 0,
          fmt("%zu classes, match_rate %.3f, failures %d", c.classes.size(), c.match_rate, c.failures)};
}

// 6. desk-scale stitching analog
Outcome stitching(Workspace& ws) {
  const double acc = train_accuracy(ws.model(), ws.dataset());
  const SweepCell c = suite(ws, 4, Exclusion::none, "none_n4");
  const double chance = 1.0 / ws.model().num_classes();
  return {acc >= 0.8 && c.classes.size() == 10 && c.match_rate >= 0.5 && c.match_rate >= 3.0 * chance,
          fmt("train accuracy %.3f, %zu classes, layer %s, n=4: match_rate %.2f, average_pred %.3f, failures %d", acc,
              c.classes.size(), ws.layer("").name.c_str(), c.match_rate, c.average_pred, c.failures)};
}

// 7. probe on synthetic banks
Outcome probes() {
  const ActivationBank a = cloud(0, {2.0, 0.2, 1.0}, 60, 0.3, 1);
  const ActivationBank b = cloud(1, {0.2, 2.0, 1.0}, 40, 0.3, 2);
  const double separable = train_hyperplane(a, b, 0).stats.final_accuracy;

  const ActivationBank same = cloud(0, {1.0, 1.0, 1.0, 1.0}, 30, 0.5, 3);
  ActivationBank twin = same;
  twin.class_id = 1;
  const Hyperplane flat = train_hyperplane(same, twin, 0);

  const ActivationBank p = cloud(0, {1.5, 0.5, 0.2}, 25, 0.6, 4);
  const ActivationBank q = cloud(1, {0.5, 1.0, 0.8}, 35, 0.6, 5);
  const Hyperplane pq = train_hyperplane(p, q, 0);
  const Hyperplane qp = train_hyperplane(q, p, 0);
  double swap = 0.0;
  for (const Matrix* m : {&p.vectors, &q.vectors}) {
    for (Eigen::Index i = 0; i < m->rows(); ++i) {
      const Eigen::RowVectorXd r = m->row(i);
      const std::vector<double> x(r.data(), r.data() + r.size());
      swap = std::max(swap, std::abs(qp.probability(x) - (1.0 - pq.probability(x))));
    }
  }
  const double chance = flat.stats.final_accuracy;
  return {separable == 1.0 && std::abs(chance - 0.5) <= 0.05 && flat.w.norm() <= 1e-3 && swap <= 1e-9,
          fmt("separable accuracy %.3f, identical accuracy %.3f with |w| %.1e, swap deviation %.1e", separable, chance,
              flat.w.norm(), swap)};
}

// 8. shift at t = 0 and sampled pairs
Outcome shifting(Workspace& ws) {
  const LayerId& layer = ws.layer("");
  const ModelHandle& model = ws.model();
  const std::vector<int> classes = ws.config().class_list(model.num_classes());
  const auto pairs = sample_shift_pairs(classes, model.num_classes(), 3, ws.config().seed);
  double zero_dev = 0.0;
  const std::vector<double> zero{0.0};
  for (std::size_t i = 0; i < pairs.size(); i += 5) {
    const auto [a, b] = pairs[i];
    CollectOptions co;
    co.max_images = ws.config().shift_images;
    co.min_images = 1;
    const ImageBatch images = collect_class_images(model, ws.dataset(), b, co, &ws.predictions());
    const ShiftResult r = shifting_test(model, layer, pair_hyperplane(ws, layer, a, b), images, zero);
    const double direct = softmax(model.forward_full(images)).col(a).mean();
    zero_dev = std::max({zero_dev, std::abs(r.pred_curve[0] - r.default_pred), std::abs(r.default_pred - direct)});
  }
  const ShiftSuite s = run_shift_suite(ws, layer, pairs);
  const fs::path dir = ws.config().output_dir / "acceptance" / "shift";
  fs::create_directories(dir);
  write_json(dir / "shift.json", s.to_json());
  write_text(dir / "shift.csv", s.to_csv());
  const double improved = s.improved_fraction();
  return {zero_dev <= 1e-6 && improved >= 0.7 && s.failures.empty(),
          fmt("t=0 deviation %.1e, improved %.3f of %zu pairs, failures %zu", zero_dev, improved, s.pairs.size(),
              s.failures.size())};
}

// 9. CLI artifacts are bit-identical across reruns
void strip_volatile(Json& j) {
  if (j.is_object()) {
    for (const char* key : {"runtime_seconds", "timestamp", "created_at"}) j.erase(key);
    for (auto& [_, v] : j.items()) strip_volatile(v);
  } else if (j.is_array()) {
    for (auto& v : j) strip_volatile(v);
  }
}

std::map<std::string, std::string> json_artifacts(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    Json j = read_json(e.path());
    strip_volatile(j);
    std::string text = j.dump();
    for (std::size_t p; (p = text.find(root.string())) != std::string::npos;) text.replace(p, root.string().size(), "<out>");
    out[fs::relative(e.path(), root).string()] = text;
  }
  return out;
}

Outcome determinism(Workspace& ws, const fs::path& config, const fs::path& cli) {
  const fs::path base = fs::absolute(ws.config().output_dir) / "acceptance" / "determinism";
  const std::vector<std::string> commands{"explain 3", "contrast 3 8", "quiz --items 20"};
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* run : {"a", "b"}) {
    const fs::path out = base / run;
    fs::remove_all(out);
    for (const auto& cmd : commands) {
      const std::string line = "\"" + cli.string() + "\" --config \"" + config.string() + "\" --out \"" + out.string() +
                               "\" --seed 7 " + cmd + " > \"" + (base / (std::string(run) + ".log")).string() +
                               "\" 2>&1";
      fs::create_directories(base);
      if (std::system(line.c_str()) != 0) return {false, "command failed: " + cmd};
    }
    runs.push_back(json_artifacts(out));
  }
  std::size_t differing = 0;
  for (const auto& [name, text] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != text) ++differing;
  }
  const bool same_set = runs[0].size() == runs[1].size();
  return {same_set && differing == 0 && !runs[0].empty(),
          fmt("%zu JSON artifacts from explain, contrast and quiz; %zu differ", runs[0].size(), differing)};
}

// 10. insertion mechanics
Outcome insertion(Workspace& ws) {
  const ModelHandle& model = ws.model();
  std::vector<Image> images;
  for (SourceId i = 0; i < 40; ++i) images.push_back(ws.dataset().image(i));
  const std::vector<int> classes{0, 1, 5};
  const InsertionReport none = patch_insertion_test(model, images, Image(0, 0), classes);
  const bool noop = none.patched.mean_softmax == none.original.mean_softmax && none.patched.majority == none.original.majority;

  const int side = default_patch_side(images[0].height(), images[0].width());
  Image black_pixels(side, side);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) black_pixels.at(c, y, x) = model.normalization().mean[static_cast<std::size_t>(c)];
    }
  }
  const InsertionReport r = patch_insertion_test(model, images, black_pixels, classes);
  const bool black = r.patched.mean_softmax == r.black.mean_softmax && r.patched.majority == r.black.majority;
  const std::string problem = validate_insertion_report(r.to_json());
  Json broken = r.to_json();
  broken.erase("conditions");
  const bool rejects = !validate_insertion_report(broken).empty();
  return {noop && black && problem.empty() && rejects,
          fmt("zero-size no-op %s, black equals black-pixel patch %s, schema %s", noop ? "yes" : "no",
              black ? "yes" : "no", problem.empty() && rejects ? "valid" : problem.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: acceptance <experiment.json> <cxplain binary>\n");
    return 2;
  }
  const fs::path config = fs::absolute(argv[1]);
  const fs::path cli = fs::absolute(argv[2]);
  Workspace ws(ExperimentConfig::load(config));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"composition identity", [&] { return composition(ws); }},
      {"attribution correctness", [&] { return attribution(ws); }},
      {"NMF solver", [] { return nmf(); }},
      {"retrieval exactness", [&] { return retrieval(ws); }},
      {"strict n=1 stitching", [&] { return strict_single(ws); }},
      {"desk-scale stitching", [&] { return stitching(ws); }},
      {"probe suite", [] { return probes(); }},
      {"shifting suite", [&] { return shifting(ws); }},
      {"determinism", [&] { return determinism(ws, config, cli); }},
      {"patch insertion", [&] { return insertion(ws); }},
  };
  int failed = 0;
  Json report = Json::array();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu %s: %s (%s; %.1fs)\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    report.push_back({{"criterion", i + 1},
                      {"name", criteria[i].first},
                      {"pass", o.pass},
                      {"detail", o.detail},
                      {"seconds", secs}});
    failed += o.pass ? 0 : 1;
  }
  const fs::path dir = ws.config().output_dir / "acceptance";
  fs::create_directories(dir);
  write_json(dir / "acceptance.json", report);
  std::printf("%zu of %zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
