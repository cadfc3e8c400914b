#include "iap/victims.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "iap/digest.hpp"
#include "iap/error.hpp"

namespace iap {

void to_json(nlohmann::json& j, const Provenance& p) {
  j = {{"mode", p.mode},
       {"norm", p.norm},
       {"eps", p.eps},
       {"pgd_steps", p.pgd_steps},
       {"pgd_step_size", p.pgd_step_size}};
}

void from_json(const nlohmann::json& j, Provenance& p) {
  p.mode = j.at("mode").get<std::string>();
  p.norm = j.at("norm").get<std::string>();
  p.eps = j.at("eps").get<double>();
  p.pgd_steps = j.at("pgd_steps").get<int>();
  p.pgd_step_size = j.at("pgd_step_size").get<double>();
}

Classifier::Classifier(std::string architecture, nn::Network net, int num_classes, Shape input)
    : arch_(std::move(architecture)), net_(std::move(net)), num_classes_(num_classes),
      input_(input) {
  if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
  input_.n = 1;
}

void Classifier::check_input(const Tensor& x) const {
  if (x.c() != input_.c || x.h() != input_.h || x.w() != input_.w || x.n() < 1) {
    throw ShapeError("classifier " + arch_ + " expects input " + input_.str() + ", got " +
                     x.shape().str());
  }
}

void Classifier::check_class(int c) const {
  if (c < 0 || c >= num_classes_) {
    throw BoundsError("class index " + std::to_string(c) + " outside [0, " +
                      std::to_string(num_classes_) + ")");
  }
}

Tensor Classifier::logits_batch(const Tensor& x) const {
  check_input(x);
  return net_.forward(x);
}

std::vector<double> Classifier::logits(const ImageTensor& x) const {
  const Tensor z = logits_batch(x.as_batch());
  return z.values();
}

int Classifier::predict(const ImageTensor& x) const { return argmax(logits(x)); }

std::vector<int> Classifier::predict_batch(const Tensor& x) const {
  const Tensor z = logits_batch(x);
  std::vector<int> out(z.n());
  for (int i = 0; i < z.n(); ++i) out[i] = argmax(z.sample(i));
  return out;
}

std::vector<std::string> Classifier::points() const {
  auto names = net_.point_names();
  names.emplace_back(kSoftmaxPoint);
  return names;
}

int Classifier::point_channels(std::string_view point) const {
  if (point == kSoftmaxPoint) return num_classes_;
  const int idx = net_.point_index(point);
  if (idx == 0) return input_.c;
  const Tensor probe = net_.forward_range(Tensor(input_), 0, idx);
  return probe.c();
}

Tensor Classifier::feature_maps(const ImageTensor& x, std::string_view point) const {
  const Tensor in = x.as_batch();
  check_input(in);
  if (point == kSoftmaxPoint) {
    const auto z = logits(x);
    const auto p = softmax(z);
    return Tensor(Shape{1, num_classes_, 1, 1}, p);
  }
  return net_.forward_range(in, 0, net_.point_index(point));
}

void Classifier::point_and_gradient(const ImageTensor& x, int c, std::string_view point,
                                    Tensor& maps, Tensor& grad) const {
  check_class(c);
  if (point == kSoftmaxPoint) {
    throw ConfigError("score gradient wrt 'softmax' is undefined: the point lies downstream of "
                      "the score head");
  }
  const Tensor in = x.as_batch();
  check_input(in);
  const int stop = net_.point_index(point);
  nn::Trace trace;
  const Tensor z = net_.forward(in, &trace);
  Tensor gz(z.shape());
  gz[static_cast<std::size_t>(c)] = 1.0;
  maps = trace.activations[stop];
  grad = net_.backward(trace, gz, nullptr, stop);
}

Tensor Classifier::score_gradient(const ImageTensor& x, int c, std::string_view wrt) const {
  Tensor maps;
  Tensor grad;
  point_and_gradient(x, c, wrt, maps, grad);
  return grad;
}

Tensor Classifier::input_gradient(const Tensor& x, const Tensor& grad_logits) const {
  check_input(x);
  nn::Trace trace;
  const Tensor z = net_.forward(x, &trace);
  require_same_shape(z, grad_logits, "input_gradient");
  return net_.backward(trace, grad_logits, nullptr, 0);
}

int argmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("argmax of empty vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::vector<double> softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

std::vector<std::string> architecture_ids() {
  return {"cnn-s", "cnn-w", "cnn-d", "gap-cnn", "linear"};
}

namespace {

void conv_block(nn::Network& net, int in, int out, bool pool, const std::string& point) {
  net.emplace<nn::Conv2d>(in, out);
  net.emplace<nn::ReLU>();
  net.mark_point(point);
  if (pool) net.emplace<nn::MaxPool2d>();
}

nn::Network conv_zoo(Shape in, int c1, int depth, int classes) {
  nn::Network net;
  int ch = in.c;
  int width = c1;
  for (int b = 1; b <= 3; ++b) {
    for (int d = 0; d + 1 < depth; ++d) {
      net.emplace<nn::Conv2d>(ch, width);
      net.emplace<nn::ReLU>();
      ch = width;
    }
    conv_block(net, ch, width, b < 3, "block" + std::to_string(b));
    ch = width;
    width *= 2;
  }
  net.emplace<nn::GlobalAvgPool>();
  net.emplace<nn::Linear>(ch, classes);
  net.mark_point("logits");
  return net;
}

}  // namespace

Classifier make_classifier(std::string_view architecture, int num_classes, Shape input) {
  if (input.c <= 0 || input.h <= 0 || input.w <= 0) throw ConfigError("invalid input shape");
  nn::Network net;
  if (architecture == "cnn-s") {
    net = conv_zoo(input, 16, 1, num_classes);
  } else if (architecture == "cnn-w") {
    net = conv_zoo(input, 24, 1, num_classes);
  } else if (architecture == "cnn-d") {
    net = conv_zoo(input, 16, 2, num_classes);
  } else if (architecture == "gap-cnn") {
    net.emplace<nn::Conv2d>(input.c, 8);
    net.emplace<nn::ReLU>();
    net.mark_point("block1");
    net.emplace<nn::GlobalAvgPool>();
    net.emplace<nn::Linear>(8, num_classes);
    net.mark_point("logits");
  } else if (architecture == "linear") {
    net.emplace<nn::Linear>(input.c * input.h * input.w, num_classes);
    net.mark_point("logits");
  } else {
    throw ConfigError("unknown architecture '" + std::string(architecture) + "'");
  }
  return Classifier(std::string(architecture), std::move(net), num_classes, input);
}

void save_classifier(const std::filesystem::path& dir, const std::string& name,
                     const Classifier& f) {
  std::filesystem::create_directories(dir);
  const auto blob = dir / (name + ".bin");
  nn::write_parameter_blob(blob, f.network());
  const Shape s = f.input_shape();
  nlohmann::json j = {{"name", name},
                      {"architecture", f.architecture()},
                      {"num_classes", f.num_classes()},
                      {"input", {s.c, s.h, s.w}},
                      {"points", f.points()},
                      {"provenance", f.provenance},
                      {"metrics", f.metrics},
                      {"seed", f.seed},
                      {"parameters", f.network().parameter_count()},
                      {"blob", blob.filename().string()},
                      {"blob_sha256", sha256_file(blob)}};
  std::ofstream out(dir / (name + ".json"), std::ios::trunc);
  out << j.dump(2) << "\n";
}

Classifier load_classifier(const std::filesystem::path& dir, const std::string& name) {
  const auto manifest = dir / (name + ".json");
  std::ifstream in(manifest);
  if (!in) throw IntegrityError("missing checkpoint manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("corrupt checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  const auto blob = dir / j.at("blob").get<std::string>();
  if (!std::filesystem::exists(blob)) throw IntegrityError("missing checkpoint file " + blob.string());
  if (sha256_file(blob) != j.at("blob_sha256").get<std::string>()) {
    throw IntegrityError("checkpoint file " + blob.string() + " does not match its recorded digest");
  }
  const auto dims = j.at("input").get<std::vector<int>>();
  Classifier f = make_classifier(j.at("architecture").get<std::string>(),
                                 j.at("num_classes").get<int>(), Shape{1, dims.at(0), dims.at(1), dims.at(2)});
  nn::read_parameter_blob(blob, f.network());
  f.provenance = j.at("provenance").get<Provenance>();
  f.metrics = j.at("metrics");
  f.seed = j.at("seed").get<std::uint64_t>();
  return f;
}

}  // namespace iap
