#include "iap/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>

#include "iap/baselines.hpp"
#include "iap/digest.hpp"
#include "iap/error.hpp"
#include "iap/eval.hpp"
#include "iap/patchgan.hpp"
#include "iap/rng.hpp"
#include "iap/training.hpp"
#include "iap/vulnmap.hpp"

namespace iap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "run_manifest.json";

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError(fmt::format("cannot read '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw IntegrityError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

std::string rate_str(double v) { return fmt::format("{:.4f}", v); }

// Rethrows library errors with the stage and image prefixed.
template <typename F>
auto with_context(const std::string& ctx, F&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + ": " + e.what());
  } catch (const IntegrityError& e) {
    throw IntegrityError(ctx + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(ctx + ": " + e.what());
  } catch (const StateError& e) {
    throw StateError(ctx + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(ctx + ": " + e.what());
  } catch (const BoundsError& e) {
    throw BoundsError(ctx + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ctx + ": " + e.what());
  }
}

bool attack_success(int prediction, int label, bool targeted, int target) {
  return targeted ? prediction == target : prediction != label;
}

std::string seed_name(int k) { return fmt::format("seed_{:03d}.png", k); }

std::vector<Fixture> select(const std::vector<Fixture>& all, const std::optional<std::string>& id) {
  if (!id) return all;
  for (const auto& f : all) {
    if (f.image_id == *id || f.key == *id) return {f};
  }
  throw ConfigError(fmt::format("image '{}' is not a fixture of this run (see victims/fixtures.csv)", *id));
}

std::string git_commit() {
#ifdef IAP_SOURCE_DIR
  const std::string cmd = fmt::format("git -C \"{}\" rev-parse --short=12 HEAD 2>/dev/null", IAP_SOURCE_DIR);
  if (FILE* p = popen(cmd.c_str(), "r")) {
    char buf[64] = {};
    const bool ok = std::fgets(buf, sizeof buf, p) != nullptr;
    pclose(p);
    std::string s = ok ? buf : "";
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    if (!s.empty()) return s;
  }
#endif
  return "unknown";
}

json seed_streams(std::uint64_t seed) {
  const SeedSplitter root(seed);
  json j = json::object();
  for (const char* label : {"victims", "robust_eval", "attack", "generate", "baseline", "control", "physical"}) {
    j[label] = root.child(label).seed();
  }
  return j;
}

}  // namespace

int Zoo::index(const std::string& name) const {
  for (std::size_t i = 0; i < victims.size(); ++i) {
    if (victims[i].spec.name == name) return static_cast<int>(i);
  }
  throw ConfigError(fmt::format("model '{}' is not part of the zoo", name));
}

std::string fixture_key(const std::string& image_id) {
  std::string k = image_id;
  if (k.ends_with(".png")) k.resize(k.size() - 4);
  std::replace(k.begin(), k.end(), '/', '_');
  return k;
}

Pipeline::Pipeline(ExperimentConfig cfg, bool resume) : cfg_(std::move(cfg)), resume_(resume) {}

void Pipeline::begin_stage(const char* name) {
  fs::create_directories(out());
  write_text(out() / "config.resolved.toml", to_toml(cfg_.resolved));
  spdlog::info("{}: run directory {}", name, out().string());
}

void Pipeline::end_stage() { write_run_manifest(cfg_); }

const Dataset& Pipeline::dataset() {
  if (!data_) {
    const fs::path& dir = cfg_.dataset_path;
    if (!fs::exists(dir / "labels.txt") && cfg_.dataset_generate) {
      spdlog::info("generating dataset at {}", dir.string());
      write_desk_dataset(dir, cfg_.dataset_spec);
    }
    data_ = load_dataset(dir);
  }
  return *data_;
}

const LabeledImage& Pipeline::test_image(const std::string& id) {
  for (const auto& item : dataset().test) {
    if (item.id == id) return item;
  }
  throw StateError(fmt::format("image '{}' is not in the test manifest of {}", id, cfg_.dataset_path.string()));
}

int Pipeline::resolve_target() {
  if (!cfg_.iap.targeted) return -1;
  const auto& labels = dataset().labels;
  const auto it = std::find(labels.begin(), labels.end(), cfg_.target_name);
  if (it == labels.end()) {
    std::string all;
    for (const auto& l : labels) all += (all.empty() ? "" : ", ") + l;
    throw ConfigError(fmt::format("attack.target '{}' is not a class name (labels: {})", cfg_.target_name, all));
  }
  return static_cast<int>(it - labels.begin());
}

void Pipeline::make_dataset() {
  begin_stage("make-dataset");
  if (fs::exists(cfg_.dataset_path / "labels.txt")) {
    spdlog::info("dataset already present at {}", cfg_.dataset_path.string());
  } else {
    write_desk_dataset(cfg_.dataset_path, cfg_.dataset_spec);
  }
  const Dataset& d = dataset();
  spdlog::info("dataset: {} train, {} test, {} classes", d.train.size(), d.test.size(), d.num_classes());
  end_stage();
}

void Pipeline::train_victims() {
  begin_stage("train-victims");
  const Dataset& d = dataset();
  const fs::path dir = out() / "victims";
  fs::create_directories(dir);
  const SeedSplitter root(cfg_.seed);

  std::vector<LabeledImage> eval_subset;
  const int n_eval = std::min<int>(cfg_.robust_eval_images, static_cast<int>(d.test.size()));
  for (int i = 0; i < n_eval; ++i) eval_subset.push_back(d.test[static_cast<std::size_t>(i) * d.test.size() / n_eval]);

  // Standard models first: each robust model fine-tunes its standard
  // counterpart, training a private one when the zoo lacks it.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < cfg_.models.size(); ++i) {
    if (!cfg_.models[i].robust) order.push_back(i);
  }
  for (std::size_t i = 0; i < cfg_.models.size(); ++i) {
    if (cfg_.models[i].robust) order.push_back(i);
  }
  std::vector<std::optional<Classifier>> trained(cfg_.models.size());
  auto standard_for = [&](const std::string& arch) -> Classifier {
    for (std::size_t i = 0; i < cfg_.models.size(); ++i) {
      if (cfg_.models[i].name == arch && trained[i]) return *trained[i];
    }
    TrainSchedule s = cfg_.train;
    s.seed = root.child("victims").stream(arch + "-base");
    return train_classifier(d, arch, s);
  };
  for (std::size_t i : order) {
    const ModelSpec& m = cfg_.models[i];
    Classifier f;
    if (resume_ && fs::exists(dir / (m.name + ".json"))) {
      f = load_classifier(dir, m.name);
      spdlog::info("{}: resumed from checkpoint", m.name);
    } else {
      f = with_context("train-victims " + m.name, [&] {
        if (m.robust) {
          const Classifier base = standard_for(m.architecture);
          TrainSchedule s = cfg_.robust;
          s.seed = root.child("victims").stream(m.name);
          return adversarial_train(d, m.architecture, s, cfg_.adversarial_pgd, &base);
        }
        TrainSchedule s = cfg_.train;
        s.seed = root.child("victims").stream(m.name);
        return train_classifier(d, m.architecture, s);
      });
      f.metrics["robust_accuracy"] =
          n_eval > 0 ? robust_accuracy(f, eval_subset, cfg_.adversarial_pgd, root.child("robust_eval").stream(m.name))
                     : 0.0;
      f.metrics["robust_eval_images"] = n_eval;
      f.metrics["robust_eval_attack"] = cfg_.adversarial_pgd;
      save_classifier(dir, m.name, f);
      spdlog::info("{}: test accuracy {:.4f}, robust accuracy {:.4f}", m.name,
                   f.metrics.at("test_accuracy").get<double>(), f.metrics.at("robust_accuracy").get<double>());
    }
    trained[i] = std::move(f);
  }
  Zoo zoo;
  json models = json::array();
  for (std::size_t i = 0; i < cfg_.models.size(); ++i) {
    const ModelSpec& m = cfg_.models[i];
    const Classifier& f = *trained[i];
    models.push_back({{"name", m.name},
                      {"architecture", m.architecture},
                      {"robust", m.robust},
                      {"provenance", f.provenance},
                      {"metrics", f.metrics},
                      {"seed", f.seed},
                      {"digest", f.digest()}});
    zoo.victims.push_back({m, *trained[i]});
  }

  // Fixture j: the (j / C)-th test image of class j % C that every model
  // classifies correctly, in manifest order.
  std::vector<std::vector<int>> preds;
  std::vector<std::size_t> all(d.test.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Tensor batch = stack_images(d.test, all);
  for (const auto& v : zoo.victims) preds.push_back(v.model.predict_batch(batch));
  std::vector<Fixture> fixtures;
  std::string csv = "image_id,label\n";
  for (int j = 0; j < cfg_.images; ++j) {
    const int cls = j % d.num_classes();
    int skip = j / d.num_classes();
    bool found = false;
    for (std::size_t i = 0; i < d.test.size() && !found; ++i) {
      if (d.test[i].label != cls) continue;
      const bool agreed = std::all_of(preds.begin(), preds.end(), [&](const auto& p) { return p[i] == cls; });
      if (!agreed) continue;
      if (skip-- > 0) continue;
      fixtures.push_back({d.test[i].id, fixture_key(d.test[i].id), cls});
      csv += fmt::format("{},{}\n", d.test[i].id, cls);
      found = true;
    }
    if (!found) {
      throw StateError(fmt::format("no further test image of class '{}' is classified correctly by every model",
                                   d.labels[static_cast<std::size_t>(cls)]));
    }
  }
  write_text(dir / "fixtures.csv", csv);

  json fx = json::array();
  for (const auto& f : fixtures) fx.push_back({{"image_id", f.image_id}, {"label", f.label}});
  write_json(dir / "manifest.json", {{"schema_version", kReportSchemaVersion},
                                     {"dataset", cfg_.dataset_path.string()},
                                     {"train_manifest_sha256", sha256_file(cfg_.dataset_path / "train.csv")},
                                     {"test_manifest_sha256", sha256_file(cfg_.dataset_path / "test.csv")},
                                     {"labels", d.labels},
                                     {"models", models},
                                     {"source", cfg_.source_model},
                                     {"fixtures", fx}});
  end_stage();
}

Zoo Pipeline::load_zoo() const {
  const fs::path dir = out() / "victims";
  Zoo zoo;
  for (const auto& m : cfg_.models) {
    if (!fs::exists(dir / (m.name + ".json"))) {
      throw StateError(fmt::format("checkpoint {} missing; run `iap train-victims` first",
                                   (dir / (m.name + ".json")).string()));
    }
    zoo.victims.push_back({m, load_classifier(dir, m.name)});
  }
  return zoo;
}

std::vector<Fixture> Pipeline::fixtures() const {
  const fs::path path = out() / "victims" / "fixtures.csv";
  if (!fs::exists(path)) throw StateError(fmt::format("{} missing; run `iap train-victims` first", path.string()));
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  std::vector<Fixture> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw IntegrityError(fmt::format("{}: malformed row '{}'", path.string(), line));
    const std::string id = line.substr(0, comma);
    out.push_back({id, fixture_key(id), std::stoi(line.substr(comma + 1))});
  }
  return out;
}

PatchPlacement Pipeline::place(const Classifier& f, const ImageTensor& x, const Fixture& fx, bool write) {
  const fs::path dir = out() / "attacks" / fx.key;
  PatchPlacement loc = cfg_.placement;
  json rec = {{"mode", cfg_.placement_mode}, {"source", cfg_.placement_source}};
  if (cfg_.placement_mode == "fixed") {
    loc.require_fits(x.height(), x.width());
  } else {
    const std::string point = cfg_.placement_point == "auto" ? default_gradcam_point(f) : cfg_.placement_point;
    const int cls = f.predict(x);
    const VulnerabilityMap m = gradcam(f, x, cls, point);
    loc = select_placement(m, cfg_.placement.height, cfg_.placement.width);
    rec["point"] = point;
    rec["class"] = cls;
    rec["heatmap_max"] = m.raw_max;
    if (write) {
      write_heatmap_overlay(dir / "heatmap.png", x, m);
      write_heatmap_raw(dir / "heatmap", m);
    }
  }
  rec["placement"] = loc;
  if (write) write_json(dir / "placement.json", rec);
  return loc;
}

void Pipeline::vulnmap(const std::optional<std::string>& image_id) {
  begin_stage("vulnmap");
  const Zoo zoo = load_zoo();
  const Classifier& f = zoo.get(cfg_.source_model);
  for (const auto& fx : select(fixtures(), image_id)) {
    const auto& item = test_image(fx.image_id);
    const PatchPlacement loc =
        with_context("vulnmap " + fx.image_id, [&] { return place(f, item.image, fx, true); });
    spdlog::info("{}: placement {}", fx.image_id, loc.str());
  }
  end_stage();
}

void Pipeline::attack(const std::optional<std::string>& image_id) {
  begin_stage("attack");
  const Zoo zoo = load_zoo();
  const Classifier& f = zoo.get(cfg_.source_model);
  const int target = resolve_target();
  const SeedSplitter root(cfg_.seed);
  const auto& labels = dataset().labels;

  for (const auto& fx : select(fixtures(), image_id)) {
    const std::string ctx = "attack " + fx.image_id;
    if (cfg_.iap.targeted && target == fx.label) {
      spdlog::warn("{}: image already belongs to target class '{}', skipped", fx.image_id, cfg_.target_name);
      continue;
    }
    const auto& item = test_image(fx.image_id);
    const ImageTensor& x = item.image;
    const fs::path dir = out() / "attacks" / fx.key;
    const PatchPlacement loc = with_context(ctx, [&] { return place(f, x, fx, true); });

    IapConfig a = cfg_.iap;
    a.target = target;
    a.seed = root.child("attack").stream(fx.key);
    const fs::path stack_dir = dir / "stack";
    GeneratorStack stack;
    if (resume_ && fs::exists(stack_dir / "manifest.json")) {
      stack = load_stack(stack_dir);
      if (stack.victim_digest != f.digest() || stack.placement != loc) {
        throw IntegrityError(fmt::format("{}: {} was trained for a different victim or placement",
                                         ctx, stack_dir.string()));
      }
      spdlog::info("{}: resumed generator stack", fx.image_id);
    } else {
      stack = with_context(ctx, [&] { return train_iap(item, f, loc, a); });
      save_stack(stack_dir, stack);
    }

    fs::create_directories(dir / "patches");
    fs::create_directories(dir / "composites");
    std::string csv = "index,seed,prediction,success\n";
    int successes = 0;
    for (int k = 0; k < cfg_.seeds; ++k) {
      const std::uint64_t s = root.child("generate").stream(fx.key, static_cast<std::uint64_t>(k));
      const ImageTensor patch = generate(stack, s);
      const ImageTensor composite = apply_patch(x, patch, loc);
      const int pred = f.predict(composite);
      const bool ok = attack_success(pred, fx.label, a.targeted, target);
      successes += ok ? 1 : 0;
      const ImageTensor q = quantize_8bit(patch);
      write_png(dir / "patches" / seed_name(k), q);
      write_png(dir / "composites" / seed_name(k), apply_patch(x, q, loc));
      csv += fmt::format("{},{},{},{}\n", k, s, pred, ok ? 1 : 0);
    }
    write_text(dir / "attack_seeds.csv", csv);
    const double rate = static_cast<double>(successes) / cfg_.seeds;
    write_json(dir / "attack.json",
               {{"image_id", fx.image_id},
                {"label", fx.label},
                {"label_name", labels.at(static_cast<std::size_t>(fx.label))},
                {"targeted", a.targeted},
                {"target", target},
                {"target_name", a.targeted ? cfg_.target_name : ""},
                {"placement", loc},
                {"source", cfg_.source_model},
                {"iap_seed", a.seed},
                {"seeds", cfg_.seeds},
                {"in_memory_successes", successes},
                {"in_memory_rate", rate_str(rate)},
                {"generator_digests", stack.generator_digests()}});
    spdlog::info("{}: in-memory white-box rate {}/{}", fx.image_id, successes, cfg_.seeds);
  }
  end_stage();
}

void Pipeline::baseline(const std::optional<std::string>& image_id) {
  begin_stage("baseline");
  const Zoo zoo = load_zoo();
  const Classifier& f = zoo.get(cfg_.source_model);
  const int target = resolve_target();
  const SeedSplitter root(cfg_.seed);

  for (const auto& fx : select(fixtures(), image_id)) {
    const std::string ctx = "baseline " + fx.image_id;
    const auto& item = test_image(fx.image_id);
    const ImageTensor& x = item.image;
    const fs::path placement_file = out() / "attacks" / fx.key / "placement.json";
    const PatchPlacement loc = fs::exists(placement_file)
                                   ? read_json(placement_file).at("placement").get<PatchPlacement>()
                                   : with_context(ctx, [&] { return place(f, x, fx, true); });
    const fs::path dir = out() / "baselines" / fx.key;

    DirectPatchConfig dc = cfg_.direct;
    dc.target = target;
    const DirectPatchResult direct = with_context(ctx, [&] { return direct_patch_attack(f, x, fx.label, loc, dc); });
    const ImageTensor dq = quantize_8bit(direct.patch);
    const ImageTensor dcomp = apply_patch(x, dq, loc);
    write_png(dir / "direct_patch.png", dq);
    write_png(dir / "direct_composite.png", dcomp);

    const std::uint64_t pgd_seed = root.child("baseline").stream(fx.key);
    const ImageTensor adv = quantize_8bit(
        with_context(ctx, [&] { return pgd_attack(f, x, fx.label, cfg_.pgd, pgd_seed); }));
    write_png(dir / "pgd.png", adv);

    const int dpred = f.predict(dcomp);
    const int ppred = f.predict(adv);
    write_json(dir / "baseline.json",
               {{"image_id", fx.image_id},
                {"placement", loc},
                {"direct", {{"final_loss", direct.final_loss},
                            {"prediction", dpred},
                            {"success", attack_success(dpred, fx.label, dc.targeted, target)}}},
                {"pgd", {{"config", cfg_.pgd},
                         {"seed", pgd_seed},
                         {"prediction", ppred},
                         {"success", ppred != fx.label},
                         {"linf_8bit", std::lround(127.5 * perturbation_norm(x, adv, "linf"))}}}});
    spdlog::info("{}: direct patch pred {}, pgd pred {}", fx.image_id, dpred, ppred);
  }
  end_stage();
}

namespace {

struct ImageEval {
  Fixture fx;
  PatchPlacement loc;
  std::vector<std::vector<int>> iap_pred;    // [model][seed]
  std::vector<std::vector<int>> noise_pred;  // [model][control seed]
  std::vector<int> direct_pred;              // [model]
  std::vector<int> pgd_pred;                 // [model]
  std::vector<AdvSample> composites;
  DetectionRisk iap_risk;  // mean over seeds
  DetectionRisk direct_risk;
  DeltaHistogram iap_mask, iap_full, direct_mask, pgd_full;
  std::vector<PhysicalRecord> phys_clean, phys_patched;
  int digital_prediction = 0;  // source model on composite seed 0
  int in_memory_successes = 0;
  int png_successes = 0;
  int mismatches = 0;
};

std::vector<std::string> missing_artifacts(const fs::path& out, const std::vector<Fixture>& fixtures, int seeds) {
  std::vector<std::string> missing;
  for (const auto& fx : fixtures) {
    const fs::path a = out / "attacks" / fx.key;
    const fs::path b = out / "baselines" / fx.key;
    std::vector<fs::path> need = {a / "attack.json", a / "attack_seeds.csv", a / "placement.json",
                                  b / "direct_composite.png", b / "pgd.png"};
    for (int k = 0; k < seeds; ++k) need.push_back(a / "composites" / seed_name(k));
    for (const auto& p : need) {
      if (!fs::exists(p)) missing.push_back(fs::relative(p, out).string());
    }
  }
  return missing;
}

double mean_rate(const std::vector<int>& preds, int label, bool targeted, int target) {
  int s = 0;
  for (int p : preds) s += attack_success(p, label, targeted, target) ? 1 : 0;
  return preds.empty() ? 0.0 : static_cast<double>(s) / static_cast<double>(preds.size());
}

void add_into(DeltaHistogram& into, const DeltaHistogram& h) {
  if (into.empty()) into.assign(kDeltaBins, 0);
  for (std::size_t i = 0; i < h.size(); ++i) into[i] += h[i];
}

double accuracy_of(const std::vector<PhysicalRecord>& recs, int label) {
  int ok = 0;
  for (const auto& r : recs) ok += r.prediction == label ? 1 : 0;
  return recs.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(recs.size());
}

}  // namespace

void Pipeline::evaluate() {
  begin_stage("evaluate");
  const Zoo zoo = load_zoo();
  const std::vector<Fixture> fx_all = fixtures();
  const int target = resolve_target();
  const bool targeted = cfg_.iap.targeted;
  std::vector<Fixture> fxs;
  for (const auto& fx : fx_all) {
    if (!(targeted && fx.label == target)) fxs.push_back(fx);
  }
  if (fxs.empty()) throw StateError("no fixtures to evaluate");
  const auto missing = missing_artifacts(out(), fxs, cfg_.seeds);
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) list += "\n  " + missing[i];
    if (missing.size() > 20) list += fmt::format("\n  ... and {} more", missing.size() - 20);
    throw StateError(fmt::format("evaluate: {} artifact(s) missing; run attack and baseline first:{}",
                                 missing.size(), list));
  }
  const int src = zoo.index(cfg_.source_model);
  const Classifier& source = zoo.victims[static_cast<std::size_t>(src)].model;
  const SeedSplitter root(cfg_.seed);
  const std::size_t n_models = zoo.victims.size();
  for (const auto& fx : fxs) (void)test_image(fx.image_id);  // loads the dataset before the parallel region

  std::vector<ImageEval> results(fxs.size());
  std::vector<std::exception_ptr> errors(fxs.size());
  const int n = static_cast<int>(fxs.size());
#pragma omp parallel for num_threads(cfg_.workers) schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      ImageEval& r = results[static_cast<std::size_t>(i)];
      r.fx = fxs[static_cast<std::size_t>(i)];
      const fs::path a = out() / "attacks" / r.fx.key;
      const fs::path b = out() / "baselines" / r.fx.key;
      const ImageTensor& x = test_image(r.fx.image_id).image;
      r.loc = read_json(a / "placement.json").at("placement").get<PatchPlacement>();

      std::vector<ImageTensor> comps;
      for (int k = 0; k < cfg_.seeds; ++k) comps.push_back(read_png(a / "composites" / seed_name(k)));
      std::vector<ImageTensor> noise;
      Rng rng = root.child("control").rng(r.fx.key);
      for (int k = 0; k < cfg_.control_seeds; ++k) {
        ImageTensor p(x.channels(), r.loc.height, r.loc.width);
        for (int c = 0; c < p.channels(); ++c) {
          for (int y = 0; y < p.height(); ++y) {
            for (int xx = 0; xx < p.width(); ++xx) {
              p.set(c, y, xx, from_8bit(static_cast<std::uint8_t>(uniform_int(rng, 0, 255))));
            }
          }
        }
        noise.push_back(apply_patch(x, p, r.loc));
      }
      const ImageTensor direct = read_png(b / "direct_composite.png");
      const ImageTensor pgd = read_png(b / "pgd.png");
      const Tensor comp_batch = stack_batch(comps);
      const Tensor noise_batch = stack_batch(noise);
      for (const auto& v : zoo.victims) {
        r.iap_pred.push_back(v.model.predict_batch(comp_batch));
        r.noise_pred.push_back(v.model.predict_batch(noise_batch));
        r.direct_pred.push_back(v.model.predict(direct));
        r.pgd_pred.push_back(v.model.predict(pgd));
      }
      for (const auto& c : comps) r.composites.push_back({c, r.fx.label});

      for (const auto& c : comps) {
        const DetectionRisk d = detection_risk(x, c, r.loc);
        r.iap_risk.ratio_patched += d.ratio_patched / cfg_.seeds;
        r.iap_risk.ratio_clean += d.ratio_clean / cfg_.seeds;
        r.iap_risk.delta += d.delta / cfg_.seeds;
        add_into(r.iap_mask, pixel_delta_histogram(x, c, r.loc));
        add_into(r.iap_full, pixel_delta_histogram(x, c));
      }
      r.direct_risk = detection_risk(x, direct, r.loc);
      r.direct_mask = pixel_delta_histogram(x, direct, r.loc);
      r.pgd_full = pixel_delta_histogram(x, pgd);

      const std::uint64_t ps = root.child("physical").stream(r.fx.key);
      r.phys_clean = simulate_physical(source, x, r.fx.label, cfg_.grid, ps, targeted, target);
      r.phys_patched = simulate_physical(source, comps.front(), r.fx.label, cfg_.grid, ps, targeted, target);
      r.digital_prediction = r.iap_pred[static_cast<std::size_t>(src)].front();

      std::istringstream in(read_text(a / "attack_seeds.csv"));
      std::string line;
      std::getline(in, line);
      int k = 0;
      while (std::getline(in, line) && k < cfg_.seeds) {
        const bool mem = line.back() == '1';
        const bool png = attack_success(r.iap_pred[static_cast<std::size_t>(src)][static_cast<std::size_t>(k)],
                                        r.fx.label, targeted, target);
        r.in_memory_successes += mem ? 1 : 0;
        r.png_successes += png ? 1 : 0;
        r.mismatches += mem != png ? 1 : 0;
        ++k;
      }
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (errors[i]) {
      with_context("evaluate " + fxs[i].image_id, [&] {
        std::rethrow_exception(errors[i]);
        return 0;
      });
    }
  }

  // Single writer from here on.
  const fs::path ev = out() / "eval";
  fs::create_directories(ev);
  const auto& labels = dataset().labels;
  auto label_of = [&](int c) { return labels.at(static_cast<std::size_t>(c)); };

  std::string success = "image_id,label,model,role,iap_rate,noise_rate,direct_success,pgd_success\n";
  std::string table = "image,class";
  for (const auto& v : zoo.victims) table += "," + v.spec.name;
  table += "\n";
  std::vector<double> iap_mean(n_models, 0.0), noise_mean(n_models, 0.0), direct_mean(n_models, 0.0),
      pgd_mean(n_models, 0.0);
  for (const auto& r : results) {
    table += fmt::format("{},{}", r.fx.image_id, label_of(r.fx.label));
    for (std::size_t m = 0; m < n_models; ++m) {
      const double ir = mean_rate(r.iap_pred[m], r.fx.label, targeted, target);
      const double nr = mean_rate(r.noise_pred[m], r.fx.label, targeted, target);
      const bool ds = attack_success(r.direct_pred[m], r.fx.label, targeted, target);
      const bool gs = r.pgd_pred[m] != r.fx.label;
      success += fmt::format("{},{},{},{},{},{},{},{}\n", r.fx.image_id, r.fx.label, zoo.victims[m].spec.name,
                             static_cast<int>(m) == src ? "white-box" : "black-box", rate_str(ir), rate_str(nr),
                             ds ? 1 : 0, gs ? 1 : 0);
      table += "," + rate_str(ir);
      iap_mean[m] += ir / n;
      noise_mean[m] += nr / n;
      direct_mean[m] += (ds ? 1.0 : 0.0) / n;
      pgd_mean[m] += (gs ? 1.0 : 0.0) / n;
    }
    table += "\n";
  }
  table += "mean,";
  for (std::size_t m = 0; m < n_models; ++m) table += "," + rate_str(iap_mean[m]);
  table += "\n";
  write_text(ev / "success.csv", success);
  write_text(ev / "table.csv", table);

  // Transfer matrix: one row per source; only the configured source is attacked.
  std::vector<const Classifier*> targets = {&source};
  std::vector<std::string> target_names = {cfg_.source_model};
  for (std::size_t m = 0; m < n_models; ++m) {
    if (static_cast<int>(m) == src) continue;
    targets.push_back(&zoo.victims[m].model);
    target_names.push_back(zoo.victims[m].spec.name);
  }
  std::vector<std::vector<AdvSample>> sets(1);
  for (const auto& r : results) sets[0].insert(sets[0].end(), r.composites.begin(), r.composites.end());
  const auto tm = transfer_matrix(targets, sets, targeted, target);
  std::string transfer = "source";
  for (const auto& t : target_names) transfer += "," + t;
  transfer += "\n" + cfg_.source_model;
  for (double v : tm[0]) transfer += "," + rate_str(v);
  write_text(ev / "transfer.csv", transfer + "\n");

  std::string det = "image_id,iap_ratio_patched,iap_ratio_clean,iap_delta,direct_ratio_patched,direct_delta\n";
  double iap_delta = 0.0;
  double direct_delta = 0.0;
  for (const auto& r : results) {
    det += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.fx.image_id, r.iap_risk.ratio_patched,
                       r.iap_risk.ratio_clean, r.iap_risk.delta, r.direct_risk.ratio_patched, r.direct_risk.delta);
    iap_delta += r.iap_risk.delta / n;
    direct_delta += r.direct_risk.delta / n;
  }
  write_text(ev / "detection.csv", det);

  DeltaHistogram iap_mask, iap_full, direct_mask, pgd_full;
  for (const auto& r : results) {
    add_into(iap_mask, r.iap_mask);
    add_into(iap_full, r.iap_full);
    add_into(direct_mask, r.direct_mask);
    add_into(pgd_full, r.pgd_full);
  }
  std::string hist = "delta,iap_in_mask,iap_full,direct_in_mask,pgd_full\n";
  for (int b = 0; b < kDeltaBins; ++b) {
    const auto u = static_cast<std::size_t>(b);
    hist += fmt::format("{},{},{},{},{}\n", b - 255, iap_mask[u], iap_full[u], direct_mask[u], pgd_full[u]);
  }
  write_text(ev / "histograms.csv", hist);
  write_histogram_plot(ev / "hist_iap_in_mask.png", iap_mask);
  write_histogram_plot(ev / "hist_pgd.png", pgd_full);
  write_histogram_plot(ev / "hist_direct_in_mask.png", direct_mask);

  std::string phys = "image_id,arm,angle,distance,brightness,contrast,prediction,correct,success\n";
  const int rows = static_cast<int>(cfg_.grid.angles.size());
  const int cols = static_cast<int>(cfg_.grid.distances.size());
  std::vector<double> cell_patched(static_cast<std::size_t>(rows * cols), 0.0);
  double clean_acc = 0.0;
  double patched_acc = 0.0;
  bool identity_ok = true;
  std::size_t records_per_image = 0;
  for (const auto& r : results) {
    for (const auto* arm : {&r.phys_clean, &r.phys_patched}) {
      const char* name = arm == &r.phys_clean ? "clean" : "patched";
      for (std::size_t c = 0; c < arm->size(); ++c) {
        const auto& rec = (*arm)[c];
        phys += fmt::format("{},{},{},{},{:.6f},{:.6f},{},{},{}\n", r.fx.image_id, name, rec.angle, rec.distance,
                            rec.brightness, rec.contrast, rec.prediction, rec.prediction == r.fx.label ? 1 : 0,
                            rec.success ? 1 : 0);
        if (arm == &r.phys_patched) {
          cell_patched[c] += (rec.success ? 1.0 : 0.0) / n;
          if (rec.angle == 0.0 && rec.distance == 1.0 && rec.prediction != r.digital_prediction) identity_ok = false;
        }
      }
    }
    records_per_image = r.phys_patched.size();
    clean_acc += accuracy_of(r.phys_clean, r.fx.label) / n;
    patched_acc += accuracy_of(r.phys_patched, r.fx.label) / n;
  }
  write_text(ev / "physical.csv", phys);
  write_grid_plot(ev / "physical_grid.png", cell_patched, rows, cols);

  const auto& r0 = results.front();
  const ImageTensor& x0 = test_image(r0.fx.image_id).image;
  write_saliency_png(ev / "saliency_clean.png", saliency_map(x0), x0.height(), x0.width());
  write_saliency_png(ev / "saliency_iap.png", saliency_map(r0.composites.front().image), x0.height(), x0.width());
  write_saliency_png(ev / "saliency_direct.png",
                     saliency_map(read_png(out() / "baselines" / r0.fx.key / "direct_composite.png")), x0.height(),
                     x0.width());

  std::string rt = "image_id,in_memory_rate,png_rate,mismatches\n";
  int mismatches = 0;
  json white = json::array();
  double white_min = 1.0;
  int images_hit = 0;  // images with at least one successful seed
  for (const auto& r : results) {
    rt += fmt::format("{},{},{},{}\n", r.fx.image_id, rate_str(static_cast<double>(r.in_memory_successes) / cfg_.seeds),
                      rate_str(static_cast<double>(r.png_successes) / cfg_.seeds), r.mismatches);
    mismatches += r.mismatches;
    const double w = static_cast<double>(r.png_successes) / cfg_.seeds;
    white.push_back({{"image_id", r.fx.image_id}, {"rate", w}});
    white_min = std::min(white_min, w);
    images_hit += r.png_successes > 0 ? 1 : 0;
  }
  write_text(ev / "roundtrip.csv", rt);

  json models = json::object();
  for (std::size_t m = 0; m < n_models; ++m) {
    const auto& v = zoo.victims[m];
    models[v.spec.name] = {{"architecture", v.spec.architecture},
                           {"robust", v.spec.robust},
                           {"test_accuracy", v.model.metrics.value("test_accuracy", 0.0)},
                           {"robust_accuracy", v.model.metrics.value("robust_accuracy", 0.0)},
                           {"iap_rate", iap_mean[m]},
                           {"noise_rate", noise_mean[m]},
                           {"direct_rate", direct_mean[m]},
                           {"pgd_rate", pgd_mean[m]}};
  }
  const long long pgd_out = histogram_mass_outside(pgd_full, 8);
  const long long iap_out = histogram_mass_outside(iap_mask, 8);
  const long long iap_tot = histogram_total(iap_mask);
  json transfer_row = json::object();
  for (std::size_t t = 0; t < target_names.size(); ++t) transfer_row[target_names[t]] = tm[0][t];
  json images = json::array();
  for (const auto& r : results) images.push_back({{"image_id", r.fx.image_id}, {"placement", r.loc}});
  write_json(ev / "summary.json",
             {{"schema_version", kReportSchemaVersion},
              {"config_digest", config_digest(cfg_)},
              {"seed", cfg_.seed},
              {"source", cfg_.source_model},
              {"targeted", targeted},
              {"target", target},
              {"seeds", cfg_.seeds},
              {"control_seeds", cfg_.control_seeds},
              {"images", images},
              {"models", models},
              {"white_box",
               {{"per_image", white},
                {"min", white_min},
                {"mean", iap_mean[static_cast<std::size_t>(src)]},
                {"image_rate", n ? static_cast<double>(images_hit) / static_cast<double>(n) : 0.0}}},
              {"transfer", transfer_row},
              {"detection", {{"iap_mean_delta", iap_delta}, {"direct_mean_delta", direct_delta}}},
              {"histogram",
               {{"pgd_outside_8", pgd_out},
                {"pgd_total", histogram_total(pgd_full)},
                {"iap_in_mask_outside_8", iap_out},
                {"iap_in_mask_total", iap_tot},
                {"iap_in_mask_outside_fraction", iap_tot ? static_cast<double>(iap_out) / static_cast<double>(iap_tot) : 0.0}}},
              {"physical",
               {{"records_per_image", records_per_image},
                {"clean_accuracy", clean_acc},
                {"patched_accuracy", patched_acc},
                {"identity_cell_matches_digital", identity_ok}}},
              {"roundtrip", {{"mismatches", mismatches}, {"comparisons", n * cfg_.seeds}}}});
  spdlog::info("evaluate: white-box mean {:.4f}, min {:.4f}; detection delta iap {:.4f} vs direct {:.4f}",
               iap_mean[static_cast<std::size_t>(src)], white_min, iap_delta, direct_delta);
  end_stage();
}

void Pipeline::run_all() {
  train_victims();
  attack();
  baseline();
  evaluate();
}

void write_run_manifest(const ExperimentConfig& cfg) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(cfg.out)) {
    if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json list = json::array();
  for (const auto& p : files) {
    list.push_back({{"path", fs::relative(p, cfg.out).generic_string()},
                    {"sha256", sha256_file(p)},
                    {"bytes", fs::file_size(p)}});
  }
  write_json(cfg.out / kManifestName, {{"schema_version", kReportSchemaVersion},
                                       {"config_digest", config_digest(cfg)},
                                       {"seed", cfg.seed},
                                       {"seed_streams", seed_streams(cfg.seed)},
                                       {"files", list}});
}

namespace {

struct RunSummary {
  fs::path dir;
  json summary;
  std::string table;
  std::string detection;
};

std::string md_table_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::string md;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::string row = "|";
    std::size_t cols = 0;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      row += " " + cell + " |";
      ++cols;
    }
    md += row + "\n";
    if (header) {
      md += "|";
      for (std::size_t i = 0; i < cols; ++i) md += " --- |";
      md += "\n";
      header = false;
    }
  }
  return md;
}

std::string fmt_value(const json& v) {
  if (v.is_number_float()) return fmt::format("{:.4f}", v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

void write_report(std::span<const fs::path> runs, const fs::path& out) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<RunSummary> rs;
  for (const auto& dir : runs) {
    const fs::path sp = dir / "eval" / "summary.json";
    if (!fs::exists(sp)) throw StateError(fmt::format("{} missing; run `iap evaluate` first", sp.string()));
    RunSummary r{dir, read_json(sp), read_text(dir / "eval" / "table.csv"), read_text(dir / "eval" / "detection.csv")};
    const int v = r.summary.value("schema_version", 0);
    if (v != kReportSchemaVersion) {
      throw ConfigError(fmt::format("{}: report schema {} is incompatible with {}", sp.string(), v, kReportSchemaVersion));
    }
    if (!rs.empty() && r.summary.at("models").size() != rs.front().summary.at("models").size()) {
      throw ConfigError(fmt::format("{}: model zoo differs from {}", dir.string(), rs.front().dir.string()));
    }
    rs.push_back(std::move(r));
  }

  std::string md = "# Attack report\n\n## Runs\n\n| run | config digest | seed |\n| --- | --- | --- |\n";
  for (const auto& r : rs) {
    md += fmt::format("| {} | {} | {} |\n", r.dir.string(), r.summary.at("config_digest").get<std::string>().substr(0, 16),
                      r.summary.at("seed").dump());
  }

  // Metric rows; a row is flagged when runs disagree.
  std::vector<std::pair<std::string, json::json_pointer>> metrics = {
      {"white-box mean", json::json_pointer("/white_box/mean")},
      {"white-box min", json::json_pointer("/white_box/min")},
      {"white-box per-image rate", json::json_pointer("/white_box/image_rate")},
      {"IAP detection delta", json::json_pointer("/detection/iap_mean_delta")},
      {"direct detection delta", json::json_pointer("/detection/direct_mean_delta")},
      {"IAP in-mask mass outside +-8", json::json_pointer("/histogram/iap_in_mask_outside_fraction")},
      {"PGD mass outside +-8", json::json_pointer("/histogram/pgd_outside_8")},
      {"physical clean accuracy", json::json_pointer("/physical/clean_accuracy")},
      {"physical patched accuracy", json::json_pointer("/physical/patched_accuracy")},
      {"round-trip mismatches", json::json_pointer("/roundtrip/mismatches")}};
  for (const auto& [name, _] : rs.front().summary.at("models").items()) {
    for (const char* k : {"iap_rate", "noise_rate", "direct_rate", "test_accuracy", "robust_accuracy"}) {
      metrics.push_back({name + " " + k, json::json_pointer("/models/" + name + "/" + k)});
    }
  }
  md += "\n## Metrics\n\n| metric |";
  for (std::size_t i = 0; i < rs.size(); ++i) md += fmt::format(" run {} |", i + 1);
  md += " flag |\n| --- |";
  for (std::size_t i = 0; i <= rs.size(); ++i) md += " --- |";
  md += "\n";
  for (const auto& [name, ptr] : metrics) {
    md += "| " + name + " |";
    std::vector<std::string> vals;
    for (const auto& r : rs) {
      vals.push_back(r.summary.contains(ptr) ? fmt_value(r.summary.at(ptr)) : "n/a");
      md += " " + vals.back() + " |";
    }
    const bool differs = std::any_of(vals.begin(), vals.end(), [&](const auto& v) { return v != vals.front(); });
    md += differs ? " differs |\n" : " |\n";
  }

  for (std::size_t i = 0; i < rs.size(); ++i) {
    md += fmt::format("\n## Run {}: IAP success (rows = image, columns = models)\n\n", i + 1);
    md += md_table_from_csv(rs[i].table);
  }

  // Detection risk joined on image id.
  md += "\n## Detection risk (saliency ratio delta)\n\n| image |";
  for (std::size_t i = 0; i < rs.size(); ++i) md += fmt::format(" run {} IAP | run {} direct |", i + 1, i + 1);
  md += "\n| --- |";
  for (std::size_t i = 0; i < rs.size(); ++i) md += " --- | --- |";
  md += "\n";
  std::vector<std::map<std::string, std::pair<std::string, std::string>>> det(rs.size());
  std::vector<std::string> order;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    std::istringstream in(rs[i].detection);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (cells.size() < 6) continue;
      if (std::find(order.begin(), order.end(), cells[0]) == order.end()) order.push_back(cells[0]);
      det[i][cells[0]] = {cells[3], cells[5]};
    }
  }
  for (const auto& id : order) {
    md += "| " + id + " |";
    for (std::size_t i = 0; i < rs.size(); ++i) {
      const auto it = det[i].find(id);
      md += it == det[i].end() ? " n/a | n/a |" : " " + it->second.first + " | " + it->second.second + " |";
    }
    md += "\n";
  }

  md += "\n---\n\nProvenance:";
  for (std::size_t i = 0; i < rs.size(); ++i) {
    md += fmt::format(" run {} config {} seed {};", i + 1, rs[i].summary.at("config_digest").get<std::string>(),
                      rs[i].summary.at("seed").dump());
  }
  md += fmt::format(" commit {}.\n", git_commit());
  write_text(out, md);
}

}  // namespace iap
