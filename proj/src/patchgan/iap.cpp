#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "iap/digest.hpp"
#include "iap/error.hpp"
#include "iap/kernels.hpp"
#include "iap/patchgan.hpp"

namespace iap {

void IapConfig::validate() const {
  weights.validate();
  if (!(r > 0.0 && r < 1.0)) throw ConfigError(fmt::format("pyramid factor r={} outside (0, 1)", r));
  if (scales < 1) throw ConfigError("need at least 2 pyramid levels (K >= 1)");
  if (min_size < 1) throw ConfigError("min_size must be >= 1");
  if (iterations < 0 || critic_steps < 0 || generator_steps < 0) {
    throw ConfigError("iteration and step counts must be >= 0");
  }
  if (batch < 1 || channels < 1 || blocks < 1) throw ConfigError("batch, channels, blocks must be >= 1");
  if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("invalid optimizer settings");
  }
  if (!(noise_amp >= 0.0)) throw ConfigError("noise_amp must be >= 0");
  if (weights.delta > 0.0 && palette.empty()) throw ConfigError("print mode needs a palette");
  if (coupling_check_every < 0) throw ConfigError("coupling_check_every must be >= 0");
}

nlohmann::json to_json(const IapConfig& c) {
  nlohmann::json pal = nlohmann::json::array();
  for (const auto& p : c.palette) pal.push_back({p[0], p[1], p[2]});
  return {{"r", c.r},
          {"scales", c.scales},
          {"min_size", c.min_size},
          {"weights",
           {{"alpha", c.weights.alpha},
            {"beta", c.weights.beta},
            {"gamma", c.weights.gamma},
            {"delta", c.weights.delta},
            {"kappa", c.weights.kappa},
            {"lambda_gp", c.weights.lambda_gp}}},
          {"iterations", c.iterations},
          {"critic_steps", c.critic_steps},
          {"generator_steps", c.generator_steps},
          {"batch", c.batch},
          {"channels", c.channels},
          {"blocks", c.blocks},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"noise_amp", c.noise_amp},
          {"targeted", c.targeted},
          {"target", c.target},
          {"nps_mode", c.nps_mode == NpsDistance::kEuclidean ? "euclidean" : "per_channel"},
          {"palette", pal},
          {"seed", c.seed},
          {"coupling_check_every", c.coupling_check_every}};
}

namespace {

IapConfig config_from_json(const nlohmann::json& j) {
  IapConfig c;
  c.r = j.at("r");
  c.scales = j.at("scales");
  c.min_size = j.at("min_size");
  const auto& w = j.at("weights");
  c.weights = {w.at("alpha"), w.at("beta"), w.at("gamma"), w.at("delta"), w.at("kappa"),
               w.at("lambda_gp")};
  c.iterations = j.at("iterations");
  c.critic_steps = j.at("critic_steps");
  c.generator_steps = j.at("generator_steps");
  c.batch = j.at("batch");
  c.channels = j.at("channels");
  c.blocks = j.at("blocks");
  c.lr = j.at("lr");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.noise_amp = j.at("noise_amp");
  c.targeted = j.at("targeted");
  c.target = j.at("target");
  c.nps_mode = j.at("nps_mode") == "euclidean" ? NpsDistance::kEuclidean : NpsDistance::kPerChannel;
  c.palette.clear();
  for (const auto& p : j.at("palette")) c.palette.push_back({p.at(0), p.at(1), p.at(2)});
  c.seed = j.at("seed");
  c.coupling_check_every = j.at("coupling_check_every");
  return c;
}

Tensor repeat(const Tensor& one, int n) {
  Tensor out(Shape{n, one.c(), one.h(), one.w()});
  for (int i = 0; i < n; ++i) std::copy(one.values().begin(), one.values().end(), out.sample(i).begin());
  return out;
}

Tensor gaussian(Shape s, double sigma, Rng& rng) {
  Tensor t(s);
  for (double& v : t.values()) v = sigma * normal(rng);
  return t;
}

int scale_channels(const IapConfig& cfg, int i) { return cfg.channels << (i / 4); }

// True when `adv` equals `x` bit-for-bit outside the placement window.
bool outside_unchanged(const Tensor& x, const Tensor& adv, const PatchPlacement& loc) {
  for (int n = 0; n < adv.n(); ++n) {
    for (int c = 0; c < adv.c(); ++c) {
      for (int y = 0; y < adv.h(); ++y) {
        for (int xx = 0; xx < adv.w(); ++xx) {
          if (!loc.contains(y, xx) && adv.at(n, c, y, xx) != x.at(0, c, y, xx)) return false;
        }
      }
    }
  }
  return true;
}

}  // namespace

ScaleGAN train_scale(int i, const ScalePyramid& pyramid, const GeneratorStack& prior,
                     const Classifier& f, const ImageTensor& x, int y, const IapConfig& cfg,
                     std::vector<LossRow>* curve, long* coupling_checks) {
  cfg.validate();
  if (i < 0 || i >= pyramid.num_levels()) throw BoundsError("train_scale: scale index out of range");
  if (static_cast<int>(prior.scales.size()) != i) {
    throw StateError(fmt::format("prior stack missing a scale: scale {} needs {} frozen scales, got {}",
                                 i, i, prior.scales.size()));
  }
  for (std::size_t j = 0; j < prior.scales.size(); ++j) {
    if (!prior.scales[j].frozen) throw StateError(fmt::format("prior scale {} is not frozen", j));
  }
  const int cls = cfg.targeted ? cfg.target : y;
  if (cls < 0 || cls >= f.num_classes()) throw BoundsError("train_scale: class out of range");
  const PatchPlacement& loc = prior.placement;
  loc.require_fits(x.height(), x.width());

  const PyramidLevel& level = pyramid.level(i);
  const PatchPlacement& loc_i = level.placement;
  const Shape patch_shape{1, 3, loc_i.height, loc_i.width};
  const int B = cfg.batch;
  const SeedSplitter seeds = SeedSplitter(cfg.seed).child("scale", static_cast<std::uint64_t>(i));

  ScaleGAN g;
  g.patch_shape = patch_shape;
  g.generator = ScaleGenerator(scale_channels(cfg, i), cfg.blocks);
  g.critic = make_critic(3, scale_channels(cfg, i), cfg.blocks);
  Rng init_rng = seeds.rng("init");
  g.generator.network().initialize(init_rng, nn::Init::kNormal002);
  g.critic.initialize(init_rng, nn::Init::kNormal002);
  Rng zstar_rng = seeds.rng("z_star");
  g.z_star = i == 0 ? gaussian(patch_shape, 1.0, zstar_rng) : Tensor(patch_shape);

  const Tensor target = level.patch_target.as_batch();
  Tensor prior_rec;
  if (i > 0) {
    prior_rec = upsample_batch(reconstruct(prior).back(), loc_i.height, loc_i.width);
    g.sigma = cfg.noise_amp * std::sqrt(rec_loss(prior_rec, target) / static_cast<double>(target.size()));
  }
  const Tensor real = repeat(level.background.as_batch(), B);
  const Tensor x_one = x.as_batch();
  const Tensor x_full = repeat(x_one, B);

  Rng noise_rng = seeds.rng("noise");
  Rng gp_rng = seeds.rng("gp");
  nn::Adam opt_g(g.generator.network().parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  nn::Adam opt_d(g.critic.parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  nn::Gradients grads_g = g.generator.network().zero_gradients();
  nn::Gradients grads_d = g.critic.zero_gradients();
  const LossWeights& w = cfg.weights;

  for (int it = 0; it < cfg.iterations; ++it) {
    LossRow row;
    row.scale = i;
    row.iteration = it;
    const Tensor z = gaussian(Shape{B, 3, loc_i.height, loc_i.width}, g.sigma, noise_rng);
    Tensor prior_rand;
    if (i > 0) {
      std::vector<Tensor> noises;
      for (const auto& s : prior.scales) {
        noises.push_back(gaussian(Shape{B, s.patch_shape.c, s.patch_shape.h, s.patch_shape.w}, s.sigma, noise_rng));
      }
      prior_rand = upsample_batch(run_chain(prior, noises).back(), loc_i.height, loc_i.width);
    }
    const Tensor* prior_ptr = i > 0 ? &prior_rand : nullptr;

    for (int s = 0; s < cfg.critic_steps; ++s) {
      Tensor fake_img = real;
      paste_patch(fake_img, g.generator.forward(z, prior_ptr), loc_i);
      grads_d.zero();
      const GanLossResult r = gan_loss(g.critic, real, fake_img, w.lambda_gp, gp_rng, &grads_d);
      if (!std::isfinite(r.critic_loss) || !grads_d.all_finite()) {
        throw NumericError(fmt::format("scale {} iteration {}: non-finite critic loss", i, it));
      }
      opt_d.step(grads_d.tensors);
      row.critic = r.critic_loss;
      row.penalty = r.penalty;
    }

    for (int s = 0; s < cfg.generator_steps; ++s) {
      ScaleGenerator::Pass pass;
      const Tensor fake = g.generator.forward(z, prior_ptr, &pass);
      LossComponents lc;
      Tensor g_fake(fake.shape());

      if (w.alpha > 0.0 || cfg.critic_steps > 0) {
        Tensor fake_img = real;
        paste_patch(fake_img, fake, loc_i);
        Tensor g_img;
        lc.gan = critic_generator_loss(g.critic, fake_img, &g_img);
        g_fake.add_scaled(crop_tensor(g_img, loc_i), w.alpha);
      }

      Tensor x_adv = x_full;
      const Tensor up = upsample_batch(fake, loc.height, loc.width);
      paste_patch(x_adv, up, loc);
      if (cfg.coupling_check_every > 0 && s == 0 && it % cfg.coupling_check_every == 0) {
        if (!outside_unchanged(x_one, x_adv, loc)) {
          throw StateError(fmt::format("scale {} iteration {}: adversarial image differs from x "
                                       "outside the placement", i, it));
        }
        if (coupling_checks != nullptr) ++*coupling_checks;
      }
      Tensor gz;
      lc.adv = cw_loss_batch(f.logits_batch(x_adv), cls, w.kappa, cfg.targeted, &gz) / B;
      gz *= 1.0 / B;
      const Tensor g_up = crop_tensor(f.input_gradient(x_adv, gz), loc);
      Tensor g_adv(fake.shape());
      for (int n = 0; n < B; ++n) {
        kernels::bilinear_resize_adjoint(g_up.sample(n), 3, loc_i.height, loc_i.width,
                                         g_adv.sample(n), loc.height, loc.width);
      }
      g_fake += g_adv;

      Tensor g_tv;
      lc.tv = tv_loss(fake, &g_tv) / B;
      g_fake.add_scaled(g_tv, w.gamma / B);
      if (w.delta > 0.0) {
        Tensor g_nps;
        lc.nps = nps_loss(fake, cfg.palette, cfg.nps_mode, &g_nps) / B;
        g_fake.add_scaled(g_nps, w.delta / B);
      }

      ScaleGenerator::Pass rec_pass;
      const Tensor rec = g.generator.forward(g.z_star, i > 0 ? &prior_rec : nullptr, &rec_pass);
      Tensor g_rec;
      lc.rec = rec_loss(rec, target, &g_rec);
      g_rec *= w.beta;

      try {
        row.total = total_loss(lc, w);
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("scale {} iteration {}: {}", i, it, e.what()));
      }
      grads_g.zero();
      g.generator.backward(pass, g_fake, grads_g);
      g.generator.backward(rec_pass, g_rec, grads_g);
      if (!grads_g.all_finite()) {
        throw NumericError(fmt::format("scale {} iteration {}: non-finite generator gradient", i, it));
      }
      opt_g.step(grads_g.tensors);
      row.gan = lc.gan;
      row.adv = lc.adv;
      row.rec = lc.rec;
      row.tv = lc.tv;
      row.nps = lc.nps;
    }
    if (curve != nullptr) curve->push_back(row);
    if ((it + 1) % 100 == 0 || it + 1 == cfg.iterations) {
      spdlog::debug("scale {} iter {}: critic {:.4f} adv {:.4f} rec {:.4f} total {:.4f}", i, it + 1,
                    row.critic, row.adv, row.rec, row.total);
    }
  }
  g.frozen = true;
  return g;
}

GeneratorStack train_iap(const LabeledImage& x, const Classifier& f, const PatchPlacement& loc,
                         const IapConfig& cfg) {
  cfg.validate();
  if (loc.height < 1 || loc.width < 1) throw ConfigError("patch area must be positive, got " + loc.str());
  loc.require_fits(x.image.height(), x.image.width());
  if (x.label < 0 || x.label >= f.num_classes()) throw BoundsError("train_iap: label out of range");
  if (cfg.targeted) {
    if (cfg.target < 0 || cfg.target >= f.num_classes()) throw BoundsError("train_iap: target out of range");
    if (cfg.target == x.label) throw ConfigError("targeted attack with target equal to the true label");
  }
  const ScalePyramid pyramid = build_pyramid(x.image, loc, cfg.r, cfg.scales, cfg.min_size);

  GeneratorStack stack;
  stack.r = cfg.r;
  stack.finest = cfg.scales;
  stack.placement = loc;
  stack.label = x.label;
  stack.targeted = cfg.targeted;
  stack.target = cfg.target;
  stack.victim_digest = f.digest();
  stack.image_digest = sha256_hex(x.image.data());
  stack.config = cfg;
  for (const auto& l : pyramid.levels) stack.level_placements.push_back(l.placement);

  for (int i = 0; i <= cfg.scales; ++i) {
    const auto before = stack.generator_digests();
    const auto critics_before = stack.critic_digests();
    ScaleGAN s = train_scale(i, pyramid, stack, f, x.image, x.label, cfg, &stack.curve,
                             &stack.coupling_checks);
    if (stack.generator_digests() != before || stack.critic_digests() != critics_before) {
      throw StateError(fmt::format("frozen scales changed while training scale {}", i));
    }
    stack.scales.push_back(std::move(s));
    spdlog::info("scale {}/{} trained ({}x{} patch, sigma {:.4f})", i, cfg.scales,
                 stack.scales.back().patch_shape.h, stack.scales.back().patch_shape.w,
                 stack.scales.back().sigma);
  }
  return stack;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  out << "scale,iteration,critic,penalty,gan,adv,rec,tv,nps,total\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.scale,
                       r.iteration, r.critic, r.penalty, r.gan, r.adv, r.rec, r.tv, r.nps, r.total);
  }
}

namespace {

void write_doubles(const std::filesystem::path& path, std::span<const double> v) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<LossRow> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("missing loss curve " + path.string());
  std::vector<LossRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    LossRow r;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &r.scale, &r.iteration,
                    &r.critic, &r.penalty, &r.gan, &r.adv, &r.rec, &r.tv, &r.nps, &r.total) != 10) {
      throw IntegrityError("malformed loss curve row in " + path.string());
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

void save_stack(const std::filesystem::path& dir, const GeneratorStack& stack) {
  if (!stack.complete()) throw StateError("save_stack: stack is not fully trained");
  std::filesystem::create_directories(dir);
  nlohmann::json scales = nlohmann::json::array();
  for (std::size_t i = 0; i < stack.scales.size(); ++i) {
    const auto& s = stack.scales[i];
    const std::string gname = fmt::format("scale_{}_generator.bin", i);
    const std::string dname = fmt::format("scale_{}_critic.bin", i);
    const std::string zname = fmt::format("scale_{}_zstar.bin", i);
    nn::write_parameter_blob(dir / gname, s.generator.network());
    nn::write_parameter_blob(dir / dname, s.critic);
    write_doubles(dir / zname, s.z_star.data());
    scales.push_back({{"index", i},
                      {"patch", {s.patch_shape.c, s.patch_shape.h, s.patch_shape.w}},
                      {"sigma", s.sigma},
                      {"generator", gname},
                      {"generator_sha256", sha256_file(dir / gname)},
                      {"critic", dname},
                      {"critic_sha256", sha256_file(dir / dname)},
                      {"z_star", zname},
                      {"z_star_sha256", sha256_file(dir / zname)}});
  }
  write_loss_csv(dir / "losses.csv", stack.curve);
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& p : stack.level_placements) levels.push_back(p);
  const nlohmann::json j = {{"r", stack.r},
                            {"K", stack.finest},
                            {"placement", stack.placement},
                            {"level_placements", levels},
                            {"label", stack.label},
                            {"targeted", stack.targeted},
                            {"target", stack.target},
                            {"victim_digest", stack.victim_digest},
                            {"image_digest", stack.image_digest},
                            {"coupling_checks", stack.coupling_checks},
                            {"config", to_json(stack.config)},
                            {"scales", scales},
                            {"losses", "losses.csv"},
                            {"losses_sha256", sha256_file(dir / "losses.csv")}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

GeneratorStack load_stack(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IntegrityError("missing stack manifest " + (dir / "manifest.json").string());
  const auto j = nlohmann::json::parse(in);
  auto verify = [&](const std::string& file, const std::string& digest) {
    const auto p = dir / file;
    if (!std::filesystem::exists(p)) throw IntegrityError("missing stack file " + p.string());
    if (sha256_file(p) != digest) throw IntegrityError("stack file " + p.string() + " does not match its digest");
    return p;
  };
  GeneratorStack stack;
  stack.r = j.at("r");
  stack.finest = j.at("K");
  stack.placement = j.at("placement").get<PatchPlacement>();
  for (const auto& p : j.at("level_placements")) stack.level_placements.push_back(p.get<PatchPlacement>());
  stack.label = j.at("label");
  stack.targeted = j.at("targeted");
  stack.target = j.at("target");
  stack.victim_digest = j.at("victim_digest");
  stack.image_digest = j.at("image_digest");
  stack.coupling_checks = j.at("coupling_checks");
  stack.config = config_from_json(j.at("config"));
  for (const auto& s : j.at("scales")) {
    const int i = s.at("index");
    ScaleGAN g;
    const auto dims = s.at("patch").get<std::vector<int>>();
    g.patch_shape = Shape{1, dims.at(0), dims.at(1), dims.at(2)};
    g.sigma = s.at("sigma");
    g.generator = ScaleGenerator(scale_channels(stack.config, i), stack.config.blocks);
    g.critic = make_critic(3, scale_channels(stack.config, i), stack.config.blocks);
    nn::read_parameter_blob(verify(s.at("generator"), s.at("generator_sha256")), g.generator.network());
    nn::read_parameter_blob(verify(s.at("critic"), s.at("critic_sha256")), g.critic);
    const auto zp = verify(s.at("z_star"), s.at("z_star_sha256"));
    g.z_star = Tensor(g.patch_shape);
    std::ifstream zin(zp, std::ios::binary);
    zin.read(reinterpret_cast<char*>(g.z_star.values().data()),
             static_cast<std::streamsize>(g.z_star.size() * sizeof(double)));
    if (!zin) throw IntegrityError("truncated reconstruction noise " + zp.string());
    g.frozen = true;
    stack.scales.push_back(std::move(g));
  }
  stack.curve = read_loss_csv(verify(j.at("losses"), j.at("losses_sha256")));
  if (!stack.complete()) throw IntegrityError("stack manifest in " + dir.string() + " lists too few scales");
  return stack;
}

}  // namespace iap
