#include "iap/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "iap/digest.hpp"
#include "iap/error.hpp"

namespace iap {

namespace {

using nlohmann::json;

constexpr const char* kDefaults = R"(schema_version = 1
seed = 0
out = "runs/default"

[dataset]
path = "data/desk10"
generate = true
train_per_class = 500
test_per_class = 100
size = 32
seed = 7

[victims]
models = ["cnn-s", "cnn-w", "cnn-d", "cnn-s-robust", "cnn-w-robust"]
source = "cnn-s"
epochs = 10
batch = 32
lr = 0.002
robust_epochs = 4
robust_lr = 0.001
robust_warmup_epochs = 1
robust_eval_images = 200

[victims.pgd]
norm = "linf"
eps_8bit = 8.0
step_8bit = 3.0
steps = 3
random_start = true

[placement]
mode = "gradcam"
point = "auto"
top = 0
left = 0
height = 6
width = 6

[pyramid]
r = 0.75
scales = 2
min_size = 8

[loss]
alpha = 0.1
beta = 10.0
gamma = 0.0001
kappa = 0.0
lambda_gp = 10.0
print_delta = 0.01
print_mode = false
nps = "euclidean"

[schedule]
iterations = 2000
critic_steps = 3
generator_steps = 3
batch = 1
channels = 32
blocks = 5
lr = 0.0005
beta1 = 0.5
beta2 = 0.999
noise_amp = 0.1
coupling_check_every = 25

[attack]
mode = "untargeted"
target = ""
images = 10
seeds = 100

[baseline]
direct_steps = 300
direct_lr = 0.05
pgd_norm = "linf"
pgd_eps_8bit = 8.0
pgd_step_8bit = 0.8
pgd_steps = 40
pgd_random_start = true

[eval]
angles = [-30.0, -15.0, 0.0, 15.0, 30.0]
distances = [1.0, 2.0, 3.0]
jitter = 0.1
workers = 1
control_seeds = 100
)";

class TomlParser {
 public:
  TomlParser(std::string_view text, std::string origin) : text_(text), origin_(std::move(origin)) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (pos_ < text_.size()) {
      skip_blank();
      if (pos_ >= text_.size()) break;
      const char c = text_[pos_];
      if (c == '\n') {
        advance_line();
        continue;
      }
      if (c == '#') {
        skip_comment();
        continue;
      }
      if (c == '[') {
        table = &open_table(root);
      } else {
        parse_pair(*table);
      }
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(fmt::format("{}:{}: {}", origin_, line_, what));
  }

  void skip_blank() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }
  void skip_comment() {
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
  }
  void advance_line() {
    ++pos_;
    ++line_;
  }
  // Skips whitespace, comments and newlines (inside arrays).
  void skip_space_multiline() {
    for (;;) {
      skip_blank();
      if (pos_ >= text_.size()) return;
      if (text_[pos_] == '#') {
        skip_comment();
      } else if (text_[pos_] == '\n') {
        advance_line();
      } else {
        return;
      }
    }
  }
  void end_of_line() {
    skip_blank();
    if (pos_ < text_.size() && text_[pos_] == '#') skip_comment();
    if (pos_ < text_.size() && text_[pos_] != '\n') fail(fmt::format("unexpected '{}'", text_[pos_]));
    if (pos_ < text_.size()) advance_line();
  }

  std::string bare_key() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' || text_[pos_] == '-')) {
      ++pos_;
    }
    if (pos_ == start) fail("expected a key");
    return std::string(text_.substr(start, pos_ - start));
  }

  json& open_table(json& root) {
    ++pos_;
    json* t = &root;
    std::string path;
    for (;;) {
      skip_blank();
      const std::string k = bare_key();
      path += path.empty() ? k : "." + k;
      if (!t->contains(k)) {
        (*t)[k] = json::object();
      } else if (!(*t)[k].is_object()) {
        fail(fmt::format("'{}' is not a table", path));
      }
      t = &(*t)[k];
      skip_blank();
      if (pos_ < text_.size() && text_[pos_] == '.') {
        ++pos_;
        continue;
      }
      break;
    }
    if (pos_ >= text_.size() || text_[pos_] != ']') fail("unterminated table header");
    ++pos_;
    if (!seen_tables_.insert(path).second) fail(fmt::format("duplicate table [{}]", path));
    return *t;
  }

  void parse_pair(json& table) {
    const std::string key = bare_key();
    skip_blank();
    if (pos_ >= text_.size() || text_[pos_] != '=') fail(fmt::format("expected '=' after '{}'", key));
    ++pos_;
    skip_blank();
    if (table.contains(key)) fail(fmt::format("duplicate key '{}'", key));
    table[key] = value();
  }

  json value() {
    if (pos_ >= text_.size()) fail("missing value");
    const char c = text_[pos_];
    if (c == '"') return string_value();
    if (c == '[') return array_value();
    if (text_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return true;
    }
    if (text_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return false;
    }
    return number_value();
  }

  json string_value() {
    ++pos_;
    std::string out;
    while (pos_ < text_.size() && text_[pos_] != '"') {
      char c = text_[pos_++];
      if (c == '\n') fail("newline in string");
      if (c == '\\') {
        if (pos_ >= text_.size()) fail("bad escape");
        const char e = text_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(fmt::format("unsupported escape '\\{}'", e));
        }
      }
      out.push_back(c);
    }
    if (pos_ >= text_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  json array_value() {
    ++pos_;
    json arr = json::array();
    for (;;) {
      skip_space_multiline();
      if (pos_ >= text_.size()) fail("unterminated array");
      if (text_[pos_] == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(value());
      skip_space_multiline();
      if (pos_ < text_.size() && text_[pos_] == ',') {
        ++pos_;
      } else if (pos_ < text_.size() && text_[pos_] != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  json number_value() {
    const std::size_t start = pos_;
    bool is_float = false;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '+' || c == '-' || c == '_') {
        ++pos_;
      } else if (c == '.' || c == 'e' || c == 'E') {
        is_float = true;
        ++pos_;
      } else {
        break;
      }
    }
    std::string tok(text_.substr(start, pos_ - start));
    std::erase(tok, '_');
    if (tok.empty()) fail("expected a value");
    const char* b = tok.data();
    const char* e = tok.data() + tok.size();
    if (*b == '+') ++b;
    if (is_float) {
      double v = 0.0;
      const auto r = std::from_chars(b, e, v);
      if (r.ec != std::errc() || r.ptr != e) fail(fmt::format("bad number '{}'", tok));
      return v;
    }
    std::int64_t v = 0;
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e) fail(fmt::format("bad number '{}'", tok));
    return v;
  }

  std::string_view text_;
  std::string origin_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::set<std::string> seen_tables_;
};

std::string scalar_toml(const json& v) {
  if (v.is_string()) return json(v.get<std::string>()).dump();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) {
    std::string s = fmt::format("{}", v.get<double>());
    if (s.find_first_of(".e") == std::string::npos && s.find("inf") == std::string::npos &&
        s.find("nan") == std::string::npos) {
      s += ".0";
    }
    return s;
  }
  if (v.is_array()) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + scalar_toml(v[i]);
    return s + "]";
  }
  throw ConfigError("cannot serialize value");
}

void emit_table(std::ostringstream& os, const json& t, const std::string& path) {
  for (const auto& [k, v] : t.items()) {
    if (!v.is_object()) os << k << " = " << scalar_toml(v) << "\n";
  }
  for (const auto& [k, v] : t.items()) {
    if (!v.is_object()) continue;
    const std::string sub = path.empty() ? k : path + "." + k;
    os << "\n[" << sub << "]\n";
    emit_table(os, v, sub);
  }
}

bool same_kind(const json& def, const json& v) {
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_string()) return v.is_string();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_array()) {
    if (!v.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& e : v) {
      if (!same_kind(def.front(), e)) return false;
    }
    return true;
  }
  return false;
}

const char* kind_name(const json& def) {
  if (def.is_number_float()) return "a number";
  if (def.is_number_integer()) return "an integer";
  if (def.is_string()) return "a string";
  if (def.is_boolean()) return "a boolean";
  if (def.is_array()) return "an array";
  return "a table";
}

void merge_checked(json& into, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(fmt::format("'{}' must be a table", path));
  for (const auto& [k, v] : user.items()) {
    const std::string key = path.empty() ? k : path + "." + k;
    if (!into.contains(k)) throw ConfigError(fmt::format("unknown config key '{}'", key));
    json& def = into[k];
    if (def.is_object()) {
      merge_checked(def, v, key);
      continue;
    }
    if (!same_kind(def, v)) throw ConfigError(fmt::format("config key '{}' must be {}", key, kind_name(def)));
    if (def.is_number_float()) {
      def = v.get<double>();
    } else if (def.is_array() && !def.empty() && def.front().is_number_float()) {
      json arr = json::array();
      for (const auto& e : v) arr.push_back(e.get<double>());
      def = arr;
    } else {
      def = v;
    }
  }
}

template <typename T>
T positive(const json& j, const char* key, const char* where) {
  const T v = j.at(key).get<T>();
  if (!(v > T{0})) throw ConfigError(fmt::format("{}.{} must be > 0", where, key));
  return v;
}

ModelSpec parse_model(const std::string& name) {
  static const std::string kSuffix = "-robust";
  ModelSpec m{name, name, false};
  if (name.size() > kSuffix.size() && name.ends_with(kSuffix)) {
    m.architecture = name.substr(0, name.size() - kSuffix.size());
    m.robust = true;
  }
  static const std::vector<std::string> kArch = {"cnn-s", "cnn-w", "cnn-d", "gap-cnn", "linear"};
  if (std::find(kArch.begin(), kArch.end(), m.architecture) == kArch.end()) {
    throw ConfigError(fmt::format("victims.models: unknown architecture in '{}'", name));
  }
  return m;
}

PgdConfig pgd_from(double eps8, double step8, int steps, const std::string& norm, bool random_start) {
  PgdConfig p;
  p.norm = norm;
  p.eps = eps8 / 127.5;
  p.step_size = step8 / 127.5;
  p.steps = steps;
  p.random_start = random_start;
  p.validate();
  return p;
}

void apply(ExperimentConfig& c) {
  const json& r = c.resolved;
  if (r.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError(fmt::format("unsupported schema_version {} (expected {})",
                                  r.at("schema_version").get<int>(), kSchemaVersion));
  }
  const auto seed = r.at("seed").get<std::int64_t>();
  if (seed < 0) throw ConfigError("seed must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.out = r.at("out").get<std::string>();
  if (c.out.empty()) throw ConfigError("out must not be empty");

  const json& d = r.at("dataset");
  c.dataset_path = d.at("path").get<std::string>();
  c.dataset_generate = d.at("generate");
  c.dataset_spec.train_per_class = positive<int>(d, "train_per_class", "dataset");
  c.dataset_spec.test_per_class = positive<int>(d, "test_per_class", "dataset");
  c.dataset_spec.size = positive<int>(d, "size", "dataset");
  c.dataset_spec.seed = d.at("seed").get<std::uint64_t>();

  const json& v = r.at("victims");
  c.models.clear();
  for (const auto& n : v.at("models")) {
    const ModelSpec m = parse_model(n.get<std::string>());
    for (const auto& prev : c.models) {
      if (prev.name == m.name) throw ConfigError(fmt::format("victims.models: duplicate '{}'", m.name));
    }
    c.models.push_back(m);
  }
  if (c.models.empty()) throw ConfigError("victims.models must list at least one model");
  c.source_model = v.at("source");
  if (std::none_of(c.models.begin(), c.models.end(), [&](const ModelSpec& m) { return m.name == c.source_model; })) {
    throw ConfigError(fmt::format("victims.source '{}' is not in victims.models", c.source_model));
  }
  c.train.epochs = positive<int>(v, "epochs", "victims");
  c.train.batch = positive<int>(v, "batch", "victims");
  c.train.lr = positive<double>(v, "lr", "victims");
  c.robust.epochs = positive<int>(v, "robust_epochs", "victims");
  c.robust.lr = positive<double>(v, "robust_lr", "victims");
  c.robust.batch = c.train.batch;
  c.robust.eps_warmup_epochs = v.at("robust_warmup_epochs");
  if (c.robust.eps_warmup_epochs < 0) throw ConfigError("victims.robust_warmup_epochs must be >= 0");
  c.robust_eval_images = v.at("robust_eval_images");
  if (c.robust_eval_images < 0) throw ConfigError("victims.robust_eval_images must be >= 0");
  const json& vp = v.at("pgd");
  c.adversarial_pgd = pgd_from(vp.at("eps_8bit"), vp.at("step_8bit"), vp.at("steps"), vp.at("norm"),
                               vp.at("random_start"));

  const json& p = r.at("placement");
  c.placement_mode = p.at("mode");
  if (c.placement_mode != "gradcam" && c.placement_mode != "fixed") {
    throw ConfigError("placement.mode must be \"gradcam\" or \"fixed\"");
  }
  c.placement_point = p.at("point");
  c.placement = {p.at("top"), p.at("left"), positive<int>(p, "height", "placement"),
                 positive<int>(p, "width", "placement")};
  if (c.placement.top < 0 || c.placement.left < 0) throw ConfigError("placement.top/left must be >= 0");
  if (c.placement_source.empty()) c.placement_source = "config";

  IapConfig& a = c.iap;
  const json& py = r.at("pyramid");
  a.r = py.at("r");
  a.scales = py.at("scales");
  a.min_size = py.at("min_size");
  const json& l = r.at("loss");
  a.weights.alpha = l.at("alpha");
  a.weights.beta = l.at("beta");
  a.weights.gamma = l.at("gamma");
  a.weights.kappa = l.at("kappa");
  a.weights.lambda_gp = l.at("lambda_gp");
  c.print_delta = l.at("print_delta");
  c.print_mode = l.at("print_mode");
  a.weights.delta = c.print_mode ? c.print_delta : 0.0;
  const std::string nps = l.at("nps");
  if (nps == "euclidean") {
    a.nps_mode = NpsDistance::kEuclidean;
  } else if (nps == "per_channel") {
    a.nps_mode = NpsDistance::kPerChannel;
  } else {
    throw ConfigError("loss.nps must be \"euclidean\" or \"per_channel\"");
  }
  const json& s = r.at("schedule");
  a.iterations = s.at("iterations");
  a.critic_steps = s.at("critic_steps");
  a.generator_steps = s.at("generator_steps");
  a.batch = s.at("batch");
  a.channels = s.at("channels");
  a.blocks = s.at("blocks");
  a.lr = s.at("lr");
  a.beta1 = s.at("beta1");
  a.beta2 = s.at("beta2");
  a.noise_amp = s.at("noise_amp");
  a.coupling_check_every = s.at("coupling_check_every");

  const json& at = r.at("attack");
  const std::string mode = at.at("mode");
  if (mode != "untargeted" && mode != "targeted") {
    throw ConfigError("attack.mode must be \"untargeted\" or \"targeted\"");
  }
  a.targeted = mode == "targeted";
  c.target_name = a.targeted ? at.at("target").get<std::string>() : "";
  if (a.targeted && c.target_name.empty()) throw ConfigError("attack.target must name a class in targeted mode");
  c.images = positive<int>(at, "images", "attack");
  c.seeds = positive<int>(at, "seeds", "attack");
  a.seed = c.seed;
  a.validate();

  const json& b = r.at("baseline");
  c.direct.steps = b.at("direct_steps");
  if (c.direct.steps < 0) throw ConfigError("baseline.direct_steps must be >= 0");
  c.direct.lr = positive<double>(b, "direct_lr", "baseline");
  c.direct.kappa = a.weights.kappa;
  c.direct.targeted = a.targeted;
  c.pgd = pgd_from(b.at("pgd_eps_8bit"), b.at("pgd_step_8bit"), b.at("pgd_steps"), b.at("pgd_norm"),
                   b.at("pgd_random_start"));

  const json& e = r.at("eval");
  c.grid.angles = e.at("angles").get<std::vector<double>>();
  c.grid.distances = e.at("distances").get<std::vector<double>>();
  c.grid.jitter = e.at("jitter");
  c.grid.validate();
  c.workers = positive<int>(e, "workers", "eval");
  c.control_seeds = positive<int>(e, "control_seeds", "eval");
}

}  // namespace

json parse_toml(std::string_view text, const std::string& origin) {
  return TomlParser(text, origin).parse();
}

std::string to_toml(const json& doc) {
  std::ostringstream os;
  emit_table(os, doc, "");
  return os.str();
}

const json& default_config_document() {
  static const json doc = parse_toml(kDefaults, "<defaults>");
  return doc;
}

ExperimentConfig resolve_config(const json& user) {
  ExperimentConfig c;
  c.resolved = default_config_document();
  merge_checked(c.resolved, user, "");
  apply(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return resolve_config(parse_toml(ss.str(), path.string()));
}

void override_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.resolved["seed"] = static_cast<std::int64_t>(seed);
  apply(c);
}

void override_out(ExperimentConfig& c, const std::filesystem::path& out) {
  c.resolved["out"] = out.string();
  apply(c);
}

void override_placement(ExperimentConfig& c, const std::string& spec) {
  int top = 0;
  int left = 0;
  const auto comma = spec.find(',');
  const bool ok = spec.starts_with("fixed:") && comma != std::string::npos &&
                  std::sscanf(spec.c_str() + 6, "%d", &top) == 1 &&
                  std::sscanf(spec.c_str() + comma + 1, "%d", &left) == 1;
  if (!ok) throw ConfigError(fmt::format("--placement expects fixed:TOP,LEFT, got '{}'", spec));
  c.resolved["placement"]["mode"] = "fixed";
  c.resolved["placement"]["top"] = top;
  c.resolved["placement"]["left"] = left;
  c.placement_source = "cli";
  apply(c);
}

void override_targeted(ExperimentConfig& c, const std::string& class_name) {
  c.resolved["attack"]["mode"] = "targeted";
  c.resolved["attack"]["target"] = class_name;
  apply(c);
}

void override_print_mode(ExperimentConfig& c) {
  c.resolved["loss"]["print_mode"] = true;
  apply(c);
}

std::string config_digest(const ExperimentConfig& c) {
  json j = c.resolved;
  j.erase("seed");
  j.erase("out");
  return sha256_hex(to_toml(j));
}

}  // namespace iap
