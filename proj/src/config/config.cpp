#include "saga/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "saga/format.hpp"

namespace saga {

std::string to_string(AnchorMode m) { return m == AnchorMode::structured ? "structured" : "free"; }

std::string to_string(RefineInit i) {
  switch (i) {
    case RefineInit::zero_out: return "zero_out";
    case RefineInit::random: return "random";
    case RefineInit::loaded: return "loaded";
  }
  return "unknown";
}

std::string to_string(EncoderMode m) { return m == EncoderMode::toy ? "toy" : "loaded"; }

ModelConfig RunConfig::reference_model() {
  ModelConfig m;
  m.text.text_dim = 128;
  return m;
}

TrainConfig RunConfig::reference_train() {
  TrainConfig t;
  t.epochs = 6;
  t.lr = 1e-3;
  return t;
}

SweepConfig RunConfig::sweep() const {
  SweepConfig s;
  s.kinds = occlusion.kinds;
  s.coverages = occlusion.coverages;
  s.seeds = occlusion.seeds;
  s.fill = occlusion.fill;
  s.noise_scale = occlusion.noise_scale.value_or(synth.noise_scale);
  s.w_r = eval.w_r;
  s.w_i = eval.w_i;
  s.max_rank = eval.max_rank;
  return s;
}

void RunConfig::check() const {
  synth.check();
  loss.check();
  train.check();
  sweep().check();
  if (!(eval.w_r >= 0.0 && eval.w_i >= 0.0)) throw ConfigError("eval: fusion weights must be >= 0");
  if (eval.w_r == 0.0 && eval.w_i == 0.0) throw ConfigError("eval: both fusion weights zero");
  if (eval.ratios.empty()) throw ConfigError("eval: ratios must be non-empty");
  for (double r : eval.ratios)
    if (!(r >= 0.0)) throw ConfigError("eval: ratios must be >= 0");
  const auto& a = model.anchors;
  if (a.k == 0) throw ConfigError("model: anchors_k must be > 0");
  if (a.mode == AnchorMode::structured && a.context_len + 2 > model.text.max_len &&
      model.text.mode == EncoderMode::toy) {
    throw ConfigError("model: context_len + 2 exceeds text_max_len");
  }
  if (model.text.heads == 0 || model.text.text_dim % model.text.heads != 0) {
    throw ConfigError("model: text_heads must divide text_dim");
  }
  if (model.refine.blocks == 0) throw ConfigError("model: refine_blocks must be > 0");
  if (model.refine.heads == 0 || synth.dim % model.refine.heads != 0) {
    throw ConfigError("model: refine_heads must divide synth.dim");
  }
  const bool loaded =
      model.text.mode == EncoderMode::loaded || model.refine.init == RefineInit::loaded;
  if (loaded && weights.empty()) throw ConfigError("model: loaded modes need a weights path");
}

bool RunConfig::operator==(const RunConfig& o) const { return to_text(*this) == to_text(o); }

namespace {

struct Value {
  enum Kind { number, boolean, string, array } kind = number;
  std::string text;  // number literal, or string contents
  bool flag = false;
  std::vector<Value> items;
};

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

class LineParser {
 public:
  LineParser(std::string_view s, std::size_t line) : s_(s), line_(line) {}

  Value value() {
    skip_ws();
    if (done()) fail(line_, "missing value");
    const char c = s_[i_];
    if (c == '"') return string();
    if (c == '[') return array();
    std::size_t j = i_;
    while (j < s_.size() && s_[j] != ',' && s_[j] != ']' && s_[j] != '#' && s_[j] != ' ' &&
           s_[j] != '\t')
      ++j;
    std::string word(s_.substr(i_, j - i_));
    i_ = j;
    Value v;
    if (word == "true" || word == "false") {
      v.kind = Value::boolean;
      v.flag = word == "true";
    } else {
      v.kind = Value::number;
      v.text = word;
    }
    return v;
  }

  void end() {
    skip_ws();
    if (!done() && s_[i_] != '#') fail(line_, "unexpected text after value");
  }

 private:
  bool done() const { return i_ >= s_.size(); }
  void skip_ws() {
    while (!done() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
  }
  Value string() {
    Value v;
    v.kind = Value::string;
    ++i_;
    while (true) {
      if (done()) fail(line_, "unterminated string");
      char c = s_[i_++];
      if (c == '"') break;
      if (c == '\\') {
        if (done()) fail(line_, "unterminated string");
        c = s_[i_++];
        if (c != '"' && c != '\\') fail(line_, "unsupported escape \\" + std::string(1, c));
      }
      v.text += c;
    }
    return v;
  }
  Value array() {
    Value v;
    v.kind = Value::array;
    ++i_;
    skip_ws();
    if (!done() && s_[i_] == ']') {
      ++i_;
      return v;
    }
    while (true) {
      Value item = value();
      if (item.kind == Value::array) fail(line_, "nested arrays are not supported");
      v.items.push_back(std::move(item));
      skip_ws();
      if (done()) fail(line_, "unterminated array");
      if (s_[i_] == ',') {
        ++i_;
        continue;
      }
      if (s_[i_] == ']') {
        ++i_;
        return v;
      }
      fail(line_, "expected ',' or ']' in array");
    }
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t i_ = 0;
};

double to_double(const Value& v, std::size_t line) {
  if (v.kind != Value::number) fail(line, "expected a number");
  if (v.text == "inf" || v.text == "+inf") return std::numeric_limits<double>::infinity();
  if (v.text == "-inf") return -std::numeric_limits<double>::infinity();
  double out = 0.0;
  const char* b = v.text.data();
  const char* e = b + v.text.size();
  if (*b == '+') ++b;
  auto res = std::from_chars(b, e, out);
  if (res.ec != std::errc() || res.ptr != e || std::isnan(out)) {
    fail(line, "'" + v.text + "' is not a number");
  }
  return out;
}

std::uint64_t to_u64(const Value& v, std::size_t line, std::uint64_t max) {
  if (v.kind != Value::number) fail(line, "expected an integer");
  std::uint64_t out = 0;
  const char* b = v.text.data();
  const char* e = b + v.text.size();
  auto res = std::from_chars(b, e, out);
  if (res.ec != std::errc() || res.ptr != e) fail(line, "'" + v.text + "' is not a non-negative integer");
  if (out > max) fail(line, v.text + " is out of range");
  return out;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + f(xs[i]);
  return out + "]";
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const Value&, std::size_t)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Acc>
Field real(std::string sec, std::string key, Acc acc) {
  return {sec, key, [acc](RunConfig& c, const Value& v, std::size_t l) { acc(c) = to_double(v, l); },
          [acc](const RunConfig& c) { return fmt_double(acc(const_cast<RunConfig&>(c))); }};
}

template <class Acc>
Field integer(std::string sec, std::string key, Acc acc) {
  return {sec, key,
          [acc](RunConfig& c, const Value& v, std::size_t l) {
            using T = std::remove_reference_t<decltype(acc(c))>;
            acc(c) = static_cast<T>(to_u64(v, l, std::numeric_limits<T>::max()));
          },
          [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); }};
}

template <class Acc>
Field boolean(std::string sec, std::string key, Acc acc) {
  return {sec, key,
          [acc](RunConfig& c, const Value& v, std::size_t l) {
            if (v.kind != Value::boolean) fail(l, "expected true or false");
            acc(c) = v.flag;
          },
          [acc](const RunConfig& c) { return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Acc, class Parse, class Show>
Field choice(std::string sec, std::string key, Acc acc, Parse parse, Show show) {
  return {sec, key,
          [acc, parse](RunConfig& c, const Value& v, std::size_t l) {
            if (v.kind != Value::string) fail(l, "expected a quoted string");
            try {
              acc(c) = parse(v.text);
            } catch (const ConfigError& e) {
              fail(l, e.what());
            }
          },
          [acc, show](const RunConfig& c) { return quote(show(acc(const_cast<RunConfig&>(c)))); }};
}

template <class Acc>
Field text(std::string sec, std::string key, Acc acc) {
  return choice(sec, key, acc, [](const std::string& s) { return s; },
                [](const std::string& s) { return s; });
}

template <class Acc>
Field reals(std::string sec, std::string key, Acc acc) {
  return {sec, key,
          [acc](RunConfig& c, const Value& v, std::size_t l) {
            if (v.kind != Value::array) fail(l, "expected an array");
            std::vector<double> out;
            for (const auto& x : v.items) out.push_back(to_double(x, l));
            acc(c) = out;
          },
          [acc](const RunConfig& c) {
            return join<double>(acc(const_cast<RunConfig&>(c)), [](const double& x) { return fmt_double(x); });
          }};
}

template <class Acc>
Field integers(std::string sec, std::string key, Acc acc) {
  return {sec, key,
          [acc](RunConfig& c, const Value& v, std::size_t l) {
            if (v.kind != Value::array) fail(l, "expected an array");
            std::vector<std::uint64_t> out;
            for (const auto& x : v.items) out.push_back(to_u64(x, l, std::numeric_limits<std::uint64_t>::max()));
            acc(c) = out;
          },
          [acc](const RunConfig& c) {
            return join<std::uint64_t>(acc(const_cast<RunConfig&>(c)),
                                       [](const std::uint64_t& x) { return std::to_string(x); });
          }};
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<E> options, const char* what) {
  std::string names;
  for (E e : options) {
    if (to_string(e) == s) return e;
    names += (names.empty() ? "" : ", ") + to_string(e);
  }
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (" + names + ")");
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    // synth
    f.push_back(integer("synth", "num_ids", [](RunConfig& c) -> auto& { return c.synth.num_ids; }));
    f.push_back(integer("synth", "cams_per_id", [](RunConfig& c) -> auto& { return c.synth.cams_per_id; }));
    f.push_back(integer("synth", "images_per_id_cam",
                        [](RunConfig& c) -> auto& { return c.synth.images_per_id_cam; }));
    f.push_back(integer("synth", "seed", [](RunConfig& c) -> auto& { return c.synth.seed; }));
    f.push_back(integer("synth", "grid_h", [](RunConfig& c) -> auto& { return c.synth.grid_h; }));
    f.push_back(integer("synth", "grid_w", [](RunConfig& c) -> auto& { return c.synth.grid_w; }));
    f.push_back(integer("synth", "dim", [](RunConfig& c) -> auto& { return c.synth.dim; }));
    f.push_back(integer("synth", "proj_dim", [](RunConfig& c) -> auto& { return c.synth.proj_dim; }));
    f.push_back(real("synth", "identity_signal_scale",
                     [](RunConfig& c) -> auto& { return c.synth.identity_signal_scale; }));
    f.push_back(real("synth", "camera_shift_scale",
                     [](RunConfig& c) -> auto& { return c.synth.camera_shift_scale; }));
    f.push_back(real("synth", "noise_scale", [](RunConfig& c) -> auto& { return c.synth.noise_scale; }));
    f.push_back(real("synth", "cls_noise_scale", [](RunConfig& c) -> auto& { return c.synth.cls_noise_scale; }));
    f.push_back(real("synth", "part_prototype_scale",
                     [](RunConfig& c) -> auto& { return c.synth.part_prototype_scale; }));
    f.push_back(integer("synth", "num_parts", [](RunConfig& c) -> auto& { return c.synth.num_parts; }));
    f.push_back(real("synth", "part_specificity", [](RunConfig& c) -> auto& { return c.synth.part_specificity; }));
    f.push_back(reals("synth", "region_profile", [](RunConfig& c) -> auto& { return c.synth.region_profile; }));
    f.push_back(real("synth", "train_fraction", [](RunConfig& c) -> auto& { return c.synth.train_fraction; }));
    f.push_back(real("synth", "background_fraction",
                     [](RunConfig& c) -> auto& { return c.synth.background_fraction; }));
    // model
    f.push_back(choice(
        "model", "text_encoder", [](RunConfig& c) -> auto& { return c.model.text.mode; },
        [](const std::string& s) {
          return parse_enum(s, {EncoderMode::toy, EncoderMode::loaded}, "text encoder");
        },
        [](EncoderMode m) { return to_string(m); }));
    f.push_back(integer("model", "text_dim", [](RunConfig& c) -> auto& { return c.model.text.text_dim; }));
    f.push_back(integer("model", "text_blocks", [](RunConfig& c) -> auto& { return c.model.text.blocks; }));
    f.push_back(integer("model", "text_heads", [](RunConfig& c) -> auto& { return c.model.text.heads; }));
    f.push_back(integer("model", "text_max_len", [](RunConfig& c) -> auto& { return c.model.text.max_len; }));
    f.push_back(integer("model", "text_seed", [](RunConfig& c) -> auto& { return c.model.text.seed; }));
    f.push_back(choice(
        "model", "anchor_mode", [](RunConfig& c) -> auto& { return c.model.anchors.mode; },
        [](const std::string& s) {
          return parse_enum(s, {AnchorMode::structured, AnchorMode::free}, "anchor mode");
        },
        [](AnchorMode m) { return to_string(m); }));
    f.push_back(integer("model", "anchors_k", [](RunConfig& c) -> auto& { return c.model.anchors.k; }));
    f.push_back(integer("model", "context_len", [](RunConfig& c) -> auto& { return c.model.anchors.context_len; }));
    f.push_back(integer("model", "domain_anchors_m", [](RunConfig& c) -> auto& { return c.model.anchors.m; }));
    f.push_back(integer("model", "domain_hidden",
                        [](RunConfig& c) -> auto& { return c.model.anchors.domain_hidden; }));
    f.push_back(real("model", "context_init_std",
                     [](RunConfig& c) -> auto& { return c.model.anchors.context_init_std; }));
    f.push_back(integer("model", "refine_blocks", [](RunConfig& c) -> auto& { return c.model.refine.blocks; }));
    f.push_back(integer("model", "refine_heads", [](RunConfig& c) -> auto& { return c.model.refine.heads; }));
    f.push_back(choice(
        "model", "refine_init", [](RunConfig& c) -> auto& { return c.model.refine.init; },
        [](const std::string& s) {
          return parse_enum(s, {RefineInit::zero_out, RefineInit::random, RefineInit::loaded},
                            "refine init");
        },
        [](RefineInit i) { return to_string(i); }));
    f.push_back(boolean("model", "i2t_head", [](RunConfig& c) -> auto& { return c.model.i2t_head; }));
    f.push_back(text("model", "weights", [](RunConfig& c) -> auto& { return c.weights; }));
    // loss
    f.push_back(real("loss", "lambda_tri", [](RunConfig& c) -> auto& { return c.loss.lambda_tri; }));
    f.push_back(real("loss", "lambda_i2t", [](RunConfig& c) -> auto& { return c.loss.lambda_i2t; }));
    f.push_back(real("loss", "lambda_div", [](RunConfig& c) -> auto& { return c.loss.lambda_div; }));
    f.push_back(real("loss", "margin", [](RunConfig& c) -> auto& { return c.loss.margin; }));
    f.push_back(real("loss", "epsilon", [](RunConfig& c) -> auto& { return c.loss.epsilon; }));
    f.push_back(real("loss", "tau", [](RunConfig& c) -> auto& { return c.loss.tau; }));
    // train
    f.push_back(integer("train", "p", [](RunConfig& c) -> auto& { return c.train.p; }));
    f.push_back(integer("train", "k_img", [](RunConfig& c) -> auto& { return c.train.k_img; }));
    f.push_back(integer("train", "epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    f.push_back(real("train", "lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
    f.push_back(real("train", "beta1", [](RunConfig& c) -> auto& { return c.train.beta1; }));
    f.push_back(real("train", "beta2", [](RunConfig& c) -> auto& { return c.train.beta2; }));
    f.push_back(real("train", "adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; }));
    f.push_back(integer("train", "seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
    f.push_back(integer("train", "text_bank_seed", [](RunConfig& c) -> auto& { return c.train.text_bank_seed; }));
    f.push_back(integer("train", "checkpoint_every",
                        [](RunConfig& c) -> auto& { return c.train.checkpoint_every; }));
    // eval
    f.push_back(real("eval", "w_r", [](RunConfig& c) -> auto& { return c.eval.w_r; }));
    f.push_back(real("eval", "w_i", [](RunConfig& c) -> auto& { return c.eval.w_i; }));
    f.push_back(integer("eval", "max_rank", [](RunConfig& c) -> auto& { return c.eval.max_rank; }));
    f.push_back(reals("eval", "ratios", [](RunConfig& c) -> auto& { return c.eval.ratios; }));
    // occlusion
    f.push_back({"occlusion", "kinds",
                 [](RunConfig& c, const Value& v, std::size_t l) {
                   if (v.kind != Value::array) fail(l, "expected an array");
                   std::vector<OcclusionKind> out;
                   for (const auto& x : v.items) {
                     if (x.kind != Value::string) fail(l, "expected quoted kind names");
                     try {
                       out.push_back(parse_occlusion_kind(x.text));
                     } catch (const ConfigError& e) {
                       fail(l, e.what());
                     }
                   }
                   c.occlusion.kinds = out;
                 },
                 [](const RunConfig& c) {
                   return join<OcclusionKind>(c.occlusion.kinds,
                                              [](const OcclusionKind& k) { return quote(to_string(k)); });
                 }});
    f.push_back(reals("occlusion", "coverages", [](RunConfig& c) -> auto& { return c.occlusion.coverages; }));
    f.push_back(integers("occlusion", "seeds", [](RunConfig& c) -> auto& { return c.occlusion.seeds; }));
    f.push_back(choice("occlusion", "fill", [](RunConfig& c) -> auto& { return c.occlusion.fill; },
                       [](const std::string& s) { return parse_fill_mode(s); },
                       [](FillMode m) { return to_string(m); }));
    f.push_back({"occlusion", "noise_scale",
                 [](RunConfig& c, const Value& v, std::size_t l) {
                   if (v.kind == Value::string && v.text == "corpus") {
                     c.occlusion.noise_scale.reset();
                   } else {
                     c.occlusion.noise_scale = to_double(v, l);
                   }
                 },
                 [](const RunConfig& c) {
                   return c.occlusion.noise_scale ? fmt_double(*c.occlusion.noise_scale)
                                                  : std::string("\"corpus\"");
                 }});
    return f;
  }();
  return all;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

nlohmann::ordered_json value_json(const Value& v) {
  switch (v.kind) {
    case Value::boolean: return v.flag;
    case Value::string: return v.text;
    case Value::array: {
      auto a = nlohmann::ordered_json::array();
      for (const auto& x : v.items) a.push_back(value_json(x));
      return a;
    }
    case Value::number: {
      if (v.text.find_first_not_of("0123456789") == std::string::npos) return to_u64(v, 0, ~0ull);
      const double d = to_double(v, 0);
      if (std::isinf(d)) return v.text;
      return d;
    }
  }
  return nullptr;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, const Field*> by_name;
  std::set<std::string> sections;
  for (const auto& f : fields()) {
    by_name[f.section + "." + f.key] = &f;
    sections.insert(f.section);
  }
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    if (s[0] == '[') {
      const auto close = s.find(']');
      if (close == std::string::npos) fail(line, "unterminated section header");
      const std::string rest = trim(std::string_view(s).substr(close + 1));
      if (!rest.empty() && rest[0] != '#') fail(line, "unexpected text after section header");
      section = trim(std::string_view(s).substr(1, close - 1));
      if (!sections.count(section)) fail(line, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(line, "expected key = value");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    if (section.empty()) fail(line, "key '" + key + "' outside a section");
    const std::string name = section + "." + key;
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(line, "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(name).second) fail(line, "duplicate key '" + name + "'");
    LineParser p(std::string_view(s).substr(eq + 1), line);
    Value v = p.value();
    p.end();
    it->second->set(cfg, v, line);
  }
  cfg.check();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_text(const RunConfig& config) {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string to_json_text(const RunConfig& config, int indent) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& f : fields()) {
    const std::string literal = f.get(config);
    LineParser p(literal, 0);
    j[f.section][f.key] = value_json(p.value());
  }
  return j.dump(indent);
}

}  // namespace saga
