#include "iap/nn/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <utility>

#include "iap/digest.hpp"
#include "iap/error.hpp"

namespace iap::nn {

void Gradients::zero() {
  for (auto& t : tensors) t.fill(0.0);
}

void Gradients::add_scaled(const Gradients& other, double s) {
  if (other.tensors.size() != tensors.size()) throw ShapeError("gradients: size mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].add_scaled(other.tensors[i], s);
}

void Gradients::scale(double s) {
  for (auto& t : tensors) t *= s;
}

double Gradients::squared_norm() const {
  double acc = 0.0;
  for (const auto& t : tensors) acc += t.squared_norm();
  return acc;
}

bool Gradients::all_finite() const {
  for (const auto& t : tensors) {
    if (!t.all_finite()) return false;
  }
  return true;
}

Network::Network(const Network& other)
    : param_offset_(other.param_offset_), points_(other.points_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Network& Network::add(std::unique_ptr<Layer> layer) {
  int offset = 0;
  if (!layers_.empty()) {
    offset = param_offset_.back() + static_cast<int>(std::as_const(*layers_.back()).params().size());
  }
  param_offset_.push_back(offset);
  layers_.push_back(std::move(layer));
  return *this;
}

Network& Network::mark_point(std::string name) {
  if (layers_.empty()) throw ConfigError("mark_point before any layer");
  if (name == "input") throw ConfigError("'input' is reserved");
  points_[std::move(name)] = num_layers();
  return *this;
}

int Network::point_index(std::string_view name) const {
  if (name == "input") return 0;
  auto it = points_.find(name);
  if (it == points_.end()) {
    throw ConfigError("unknown extraction point '" + std::string(name) + "'");
  }
  return it->second;
}

bool Network::has_point(std::string_view name) const {
  return name == "input" || points_.find(name) != points_.end();
}

std::vector<std::string> Network::point_names() const {
  std::vector<std::pair<int, std::string>> ordered;
  for (const auto& [k, v] : points_) ordered.emplace_back(v, k);
  std::sort(ordered.begin(), ordered.end());
  std::vector<std::string> out;
  for (auto& [i, name] : ordered) out.push_back(std::move(name));
  return out;
}

Tensor Network::forward(const Tensor& x, Trace* trace) const {
  return forward_range(x, 0, num_layers(), trace);
}

Tensor Network::forward_range(const Tensor& x, int begin, int end, Trace* trace) const {
  if (begin < 0 || end > num_layers() || begin > end) throw ConfigError("forward_range: bad range");
  if (trace != nullptr) {
    trace->begin = begin;
    trace->end = end;
    trace->activations.clear();
    trace->caches.assign(end - begin, LayerCache{});
    trace->activations.reserve(end - begin + 1);
    trace->activations.push_back(x);
  }
  Tensor cur = x;
  for (int i = begin; i < end; ++i) {
    cur = layers_[i]->forward(cur, trace != nullptr ? &trace->caches[i - begin] : nullptr);
    if (trace != nullptr) trace->activations.push_back(cur);
  }
  return cur;
}

Tensor Network::backward(const Trace& trace, const Tensor& grad_out, Gradients* grads,
                         int stop) const {
  if (stop < 0) stop = trace.begin;
  if (stop < trace.begin || stop > trace.end) throw ConfigError("backward: stop outside trace");
  if (trace.activations.size() != static_cast<std::size_t>(trace.end - trace.begin + 1)) {
    throw StateError("backward: trace does not match range");
  }
  Tensor g = grad_out;
  require_same_shape(g, trace.activations.back(), "backward grad_out");
  for (int i = trace.end - 1; i >= stop; --i) {
    const int k = i - trace.begin;
    std::span<Tensor> pg;
    const auto np = std::as_const(*layers_[i]).params().size();
    if (grads != nullptr && np > 0) {
      pg = std::span<Tensor>(grads->tensors).subspan(param_offset_[i], np);
    }
    g = layers_[i]->backward(trace.activations[k], trace.activations[k + 1], g, trace.caches[k], pg);
  }
  return g;
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_) {
    for (auto& p : l->params()) out.push_back(&p);
  }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_) {
    for (const auto& p : std::as_const(*l).params()) out.push_back(&p);
  }
  return out;
}

Gradients Network::zero_gradients() const {
  Gradients g;
  for (const Tensor* p : parameters()) g.tensors.emplace_back(p->shape());
  return g;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

void Network::initialize(Rng& rng, Init scheme) {
  for (auto& l : layers_) l->initialize(rng, scheme);
}

std::vector<double> Network::flat_parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const Tensor* p : parameters()) out.insert(out.end(), p->values().begin(), p->values().end());
  return out;
}

void Network::load_flat_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw IntegrityError("parameter blob has " + std::to_string(values.size()) +
                         " values, network expects " + std::to_string(parameter_count()));
  }
  std::size_t off = 0;
  for (Tensor* p : parameters()) {
    std::copy(values.begin() + off, values.begin() + off + p->size(), p->values().begin());
    off += p->size();
  }
}

std::string Network::digest() const {
  const auto flat = flat_parameters();
  return sha256_hex(std::span<const double>(flat));
}

nlohmann::json Network::describe() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) layers.push_back(l->describe());
  nlohmann::json points = nlohmann::json::object();
  for (const auto& [k, v] : points_) points[k] = v;
  return {{"layers", layers}, {"points", points}, {"parameters", parameter_count()}};
}

Adam::Adam(std::vector<Tensor*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("adam: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    const Tensor& g = grads[k];
    require_same_shape(p, g, "adam step");
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void write_parameter_blob(const std::filesystem::path& path, const Network& net) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const auto flat = net.flat_parameters();
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
}

void read_parameter_blob(const std::filesystem::path& path, Network& net) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IntegrityError("cannot open parameter blob " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(double) != 0) {
    throw IntegrityError("parameter blob " + path.string() + " has a truncated tail");
  }
  std::vector<double> flat(bytes / sizeof(double));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
  try {
    net.load_flat_parameters(flat);
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
}

}  // namespace iap::nn
