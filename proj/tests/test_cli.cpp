#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "iap/config.hpp"
#include "iap/digest.hpp"
#include "iap/error.hpp"
#include "iap/pipeline.hpp"
#include "test_util.hpp"

using namespace iap;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << s;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(IAP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// A tiny but complete experiment; `dir` holds the dataset and the run.
ExperimentConfig tiny_config(const fs::path& dir, std::uint64_t seed) {
  const std::string text = "seed = " + std::to_string(seed) + "\nout = \"" + (dir / "run").string() +
                           "\"\n"
                           "[dataset]\npath = \"" +
                           (dir / "data").string() +
                           "\"\ntrain_per_class = 100\ntest_per_class = 10\n"
                           "[victims]\nmodels = [\"cnn-s\"]\nsource = \"cnn-s\"\nepochs = 6\nlr = 0.004\n"
                           "[placement]\nmode = \"fixed\"\ntop = 3\nleft = 4\n"
                           "[schedule]\niterations = 2\nchannels = 4\nblocks = 1\n"
                           "[attack]\nimages = 1\nseeds = 2\n";
  return resolve_config(parse_toml(text, "tiny"));
}

struct FakeRun {
  fs::path dir;
  nlohmann::json summary;
};

FakeRun fake_run(const fs::path& dir, std::uint64_t seed, double rate) {
  FakeRun r{dir, {}};
  r.summary = {{"schema_version", kReportSchemaVersion},
               {"config_digest", std::string(64, 'a')},
               {"seed", seed},
               {"models", {{"cnn-s", {{"iap_rate", rate}, {"noise_rate", 0.1}, {"direct_rate", 1.0}}}}},
               {"white_box", {{"mean", rate}, {"min", rate}}},
               {"detection", {{"iap_mean_delta", 0.2}, {"direct_mean_delta", 0.9}}}};
  spit(dir / "eval" / "summary.json", r.summary.dump());
  spit(dir / "eval" / "table.csv", "image_id,cnn-s\ntest/disc/00000.png," + std::to_string(rate) + "\n");
  spit(dir / "eval" / "detection.csv",
       "image_id,ratio_clean,ratio_iap,iap_delta,ratio_direct,direct_delta\ntest/disc/00000.png,1,1.2,0.2,1.9,0.9\n");
  return r;
}

}  // namespace

TEST_CASE("TOML subset parsing") {
  const auto doc = parse_toml(
      "# comment\nseed = 4\nname = \"a # b\"\n[t]\nx = 1.5\nflag = true\nlist = [1,\n  2, 3]\n[t.sub]\nneg = -2\n");
  CHECK(doc.at("seed") == 4);
  CHECK(doc.at("name") == "a # b");
  CHECK(doc.at("t").at("x") == 1.5);
  CHECK(doc.at("t").at("flag") == true);
  CHECK(doc.at("t").at("list").size() == 3);
  CHECK(doc.at("t").at("sub").at("neg") == -2);
  CHECK(parse_toml(to_toml(doc)) == doc);
  CHECK(parse_toml(to_toml(default_config_document())) == default_config_document());

  CHECK_THROWS_WITH_AS(parse_toml("a = 1\na = 2\n", "f.toml"), doctest::Contains("f.toml:2"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[t]\n[t]\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("a = \"open\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("= 3\n"), ConfigError);
}

TEST_CASE("config schema validation") {
  const ExperimentConfig d = resolve_config(nlohmann::json::object());
  CHECK(d.seed == 0);
  CHECK(d.models.size() == 5);
  CHECK(d.iap.weights.beta == 10.0);
  CHECK(d.iap.weights.delta == 0.0);
  CHECK(d.pgd.eps == doctest::Approx(8.0 / 127.5));
  CHECK_THROWS_WITH_AS(resolve_config(parse_toml("[loss]\nbogus = 1\n")), doctest::Contains("loss.bogus"), ConfigError);
  CHECK_THROWS_AS(resolve_config(parse_toml("seed = \"x\"\n")), ConfigError);
  CHECK_THROWS_AS(resolve_config(parse_toml("schema_version = 2\n")), ConfigError);
  CHECK_THROWS_AS(resolve_config(parse_toml("[victims]\nmodels = [\"resnet\"]\n")), ConfigError);
  CHECK(resolve_config(parse_toml("[loss]\nalpha = 1\n")).iap.weights.alpha == 1.0);
  CHECK_THROWS_AS(load_config("/nonexistent/config.toml"), ConfigError);
}

TEST_CASE("overrides are reflected in the resolved document; digest ignores seed and out") {
  ExperimentConfig c = resolve_config(nlohmann::json::object());
  const std::string digest = config_digest(c);
  override_seed(c, 99);
  override_out(c, "/tmp/elsewhere");
  CHECK(c.resolved.at("seed") == 99);
  CHECK(config_digest(c) == digest);

  override_placement(c, "fixed:0,0");
  CHECK(c.placement_mode == "fixed");
  CHECK(c.placement_source == "cli");
  CHECK(c.placement.top == 0);
  CHECK(c.resolved.at("placement").at("mode") == "fixed");
  CHECK(config_digest(c) != digest);
  CHECK_THROWS_AS(override_placement(c, "fixed:1"), ConfigError);
  CHECK_THROWS_AS(override_placement(c, "gradcam"), ConfigError);

  override_targeted(c, "square");
  CHECK(c.target_name == "square");
  CHECK(c.iap.targeted);
  override_print_mode(c);
  CHECK(c.print_mode);
  CHECK(c.iap.weights.delta == doctest::Approx(0.01));
}

TEST_CASE("fixture keys are directory-safe") {
  CHECK(fixture_key("test/disc/00004.png") == "test_disc_00004");
}

TEST_CASE("report over synthetic runs") {
  const fs::path root = iap::testing::temp_dir("report");
  const auto a = fake_run(root / "a", 1, 0.95);
  const auto b = fake_run(root / "b", 2, 0.90);
  std::vector<fs::path> one{a.dir};
  write_report(one, root / "one.md");
  const std::string solo = slurp(root / "one.md");
  CHECK(solo.find("| test/disc/00000.png | 0.950000 |") != std::string::npos);
  CHECK(solo.find("differs") == std::string::npos);

  std::vector<fs::path> two{a.dir, b.dir};
  write_report(two, root / "two.md");
  const std::string md = slurp(root / "two.md");
  CHECK(md.find("| white-box mean | 0.9500 | 0.9000 | differs |") != std::string::npos);
  CHECK(md.find("| IAP detection delta | 0.2000 | 0.2000 | |") != std::string::npos);
  CHECK(md.find("run 1 IAP | run 1 direct") != std::string::npos);
  CHECK(md.find("Provenance:") != std::string::npos);

  auto bad = fake_run(root / "c", 3, 0.5);
  bad.summary["schema_version"] = 99;
  spit(bad.dir / "eval" / "summary.json", bad.summary.dump());
  std::vector<fs::path> mixed{a.dir, bad.dir};
  CHECK_THROWS_AS(write_report(mixed, root / "x.md"), ConfigError);
  std::vector<fs::path> missing{root / "nope"};
  CHECK_THROWS_AS(write_report(missing, root / "x.md"), StateError);
}

TEST_CASE("pipeline stages on a tiny experiment") {
  const fs::path root = iap::testing::temp_dir("pipeline");
  ExperimentConfig cfg = tiny_config(root, 5);
  {
    ExperimentConfig absent = cfg;
    absent.dataset_generate = false;
    CHECK_THROWS_WITH(Pipeline(absent, false).train_victims(), doctest::Contains("make-dataset"));
    Pipeline p(cfg, false);
    p.make_dataset();
    p.train_victims();
  }
  const fs::path run = cfg.out;
  const nlohmann::json manifest = nlohmann::json::parse(slurp(run / "victims" / "manifest.json"));
  REQUIRE(manifest.at("models").size() == 1);
  CHECK(manifest.at("models")[0].at("metrics").contains("test_accuracy"));
  CHECK(fs::exists(run / "config.resolved.toml"));
  CHECK(fs::exists(run / "run_manifest.json"));

  SUBCASE("resume does not retrain") {
    const std::string before = slurp(run / "victims" / "manifest.json");
    const std::string blob = sha256_file(run / "victims" / "cnn-s.bin");
    Pipeline(cfg, true).train_victims();
    CHECK(slurp(run / "victims" / "manifest.json") == before);
    CHECK(sha256_file(run / "victims" / "cnn-s.bin") == blob);
  }

  SUBCASE("corrupt checkpoint is named") {
    {
      std::fstream f(run / "victims" / "cnn-s.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(40);
      f.put('\x11');
    }
    CHECK_THROWS_WITH(Pipeline(cfg, true).load_zoo(), doctest::Contains("cnn-s.bin"));
  }

  SUBCASE("attack is reproducible and records the placement override") {
    ExperimentConfig c1 = cfg;
    override_placement(c1, "fixed:0,0");
    Pipeline p1(c1, false);
    p1.attack();
    ExperimentConfig c2 = c1;
    override_out(c2, root / "run2");
    fs::create_directories(root / "run2");
    fs::copy(run / "victims", root / "run2" / "victims", fs::copy_options::recursive);
    Pipeline(c2, false).attack();

    const auto fx = p1.fixtures();
    REQUIRE(fx.size() == 1);
    const fs::path a1 = run / "attacks" / fx[0].key;
    const fs::path a2 = root / "run2" / "attacks" / fx[0].key;
    const auto placement = nlohmann::json::parse(slurp(a1 / "placement.json"));
    CHECK(placement.at("source") == "cli");
    CHECK(placement.at("placement").at("top") == 0);
    for (const char* f : {"patches/seed_000.png", "patches/seed_001.png", "composites/seed_001.png", "attack_seeds.csv"}) {
      CAPTURE(f);
      CHECK(sha256_file(a1 / f) == sha256_file(a2 / f));
    }
  }

  SUBCASE("targeted attack resolves the class name") {
    ExperimentConfig c = cfg;
    override_targeted(c, "triangle");
    Pipeline p(c, false);
    CHECK(p.resolve_target() == 2);
    p.attack();
    const auto fx = p.fixtures();
    const auto rec = nlohmann::json::parse(slurp(run / "attacks" / fx[0].key / "attack.json"));
    CHECK(rec.at("target") == 2);
    CHECK(rec.at("target_name") == "triangle");
    ExperimentConfig bad = cfg;
    override_targeted(bad, "hexagon");
    CHECK_THROWS_AS(Pipeline(bad, false).resolve_target(), ConfigError);
  }

  SUBCASE("evaluate enumerates missing artifacts") {
    CHECK_THROWS_WITH_AS(Pipeline(cfg, false).evaluate(), doctest::Contains("attack"), StateError);
  }
}

TEST_CASE("command-line exit codes") {
  const fs::path root = iap::testing::temp_dir("exit");
  spit(root / "bad.toml", "[loss]\nbogus = 1\n");
  spit(root / "ok.toml", "out = \"" + (root / "run").string() + "\"\n[dataset]\npath = \"" + (root / "none").string() +
                             "\"\n");
  CHECK(run_cli("print-config") == 0);
  CHECK(run_cli("print-config --config " + (root / "bad.toml").string()) == 2);
  CHECK(run_cli("print-config --config " + (root / "missing.toml").string()) == 2);
  CHECK(run_cli("attack --no-such-flag") == 2);
  CHECK(run_cli("evaluate --config " + (root / "ok.toml").string()) == 3);
}
