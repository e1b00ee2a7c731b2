#include "saga/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace saga {

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kParams = "params.swt";

ParamList all_tensors(Model& m) {
  ParamList out = m.trainable();
  for (const auto& b : m.embed.buffers()) out.push_back({"embed_head." + b.name, b.tensor});
  return out;
}

std::uint64_t parse_hex64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  std::size_t used = 0;
  try {
    v = std::stoull(s, &used, 16);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw FormatError("checkpoint: bad " + what + " '" + s + "'", 0);
  return v;
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t corpus_fingerprint(const Corpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : encode_corpus(corpus)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Model build_model(const RunConfig& config, const Corpus& corpus) {
  config.check();
  std::optional<WeightFile> w;
  if (config.model.text.mode == EncoderMode::loaded || config.model.refine.init == RefineInit::loaded) {
    w = read_weights(config.weights);
  }
  return Model::create(config.model, corpus.header.dim, corpus.header.proj_dim,
                       corpus.person_ids(Split::train), config.train.seed, w ? &*w : nullptr);
}

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const RunConfig& config,
                     const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  Model m = model;
  WeightFile w;
  for (const auto& p : all_tensors(m)) w.tensors.emplace_back(p.name, *p.tensor);
  write_weights(dir / kParams, w, WeightDtype::f64);

  nlohmann::ordered_json j;
  j["format"] = "saga-checkpoint";
  j["version"] = kVersion;
  j["step"] = info.step;
  j["epoch"] = info.epoch;
  j["dim"] = m.dim;
  j["proj_dim"] = m.proj_dim;
  j["class_ids"] = m.class_ids;
  j["embed_stat_updates"] = m.embed.stat_updates;
  j["text_encoder"] = {{"mode", to_string(m.encoder.mode())},
                       {"fingerprint", hex64(m.encoder.fingerprint())}};
  j["corpus_fingerprint"] = hex64(info.corpus_fingerprint);
  j["config"] = nlohmann::ordered_json::parse(to_json_text(config));
  j["config_text"] = to_text(config);
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(dir / kManifest, std::vector<std::uint8_t>(text.begin(), text.end()));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto bytes = read_file_bytes(dir / kManifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: manifest is not JSON: ") + e.what(), e.byte);
  }
  LoadedCheckpoint out;
  try {
    if (j.at("format") != "saga-checkpoint") throw FormatError("checkpoint: not a saga checkpoint", 0);
    out.config = parse_run_config(j.at("config_text").get<std::string>());
    out.info.step = j.at("step").get<std::uint64_t>();
    out.info.epoch = j.at("epoch").get<std::size_t>();
    out.info.corpus_fingerprint = parse_hex64(j.at("corpus_fingerprint").get<std::string>(), "corpus fingerprint");
    const auto class_ids = j.at("class_ids").get<std::vector<std::uint64_t>>();
    const auto dim = j.at("dim").get<std::size_t>();
    const auto proj_dim = j.at("proj_dim").get<std::size_t>();

    std::optional<WeightFile> blob;
    if (out.config.model.text.mode == EncoderMode::loaded ||
        out.config.model.refine.init == RefineInit::loaded) {
      blob = read_weights(out.config.weights);
    }
    out.model = Model::create(out.config.model, dim, proj_dim, class_ids, out.config.train.seed,
                              blob ? &*blob : nullptr);
    const std::string want = j.at("text_encoder").at("fingerprint").get<std::string>();
    if (hex64(out.model.encoder.fingerprint()) != want) {
      throw ConfigError("checkpoint: text encoder fingerprint " + hex64(out.model.encoder.fingerprint()) +
                        " does not match stored " + want);
    }
    out.model.embed.stat_updates = j.at("embed_stat_updates").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest field error: ") + e.what(), 0);
  }

  const WeightFile w = read_weights(dir / kParams);
  std::set<std::string> used;
  for (const auto& p : all_tensors(out.model)) {
    const Tensor* src = w.find(p.name);
    if (src == nullptr) throw FormatError("checkpoint: missing tensor " + p.name, 0);
    if (src->shape() != p.tensor->shape()) {
      throw FormatError("checkpoint: tensor " + p.name + " has shape " + shape_to_string(src->shape()) +
                            ", model expects " + shape_to_string(p.tensor->shape()),
                        0);
    }
    std::copy(src->data().begin(), src->data().end(), p.tensor->data().begin());
    used.insert(p.name);
  }
  for (const auto& [name, t] : w.tensors)
    if (!used.count(name)) throw FormatError("checkpoint: unexpected tensor " + name, 0);
  return out;
}

}  // namespace saga
