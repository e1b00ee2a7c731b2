#include "saga/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "saga/rng.hpp"

namespace saga {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "unknown";
}

void CorpusHeader::check() const {
  if (dim == 0 || proj_dim == 0) throw ConfigError("corpus header: dim and proj_dim must be > 0");
  if (static_cast<std::uint64_t>(grid_h) * grid_w != n_patches) {
    throw ConfigError("corpus header: grid " + std::to_string(grid_h) + "x" +
                      std::to_string(grid_w) + " does not cover " + std::to_string(n_patches) +
                      " patches");
  }
}

std::size_t CorpusHeader::record_bytes() const {
  return 16 + 4 * (static_cast<std::size_t>(dim) + proj_dim +
                   static_cast<std::size_t>(n_patches) * dim);
}

bool FeatureRecord::identical(const FeatureRecord& o) const {
  return person_id == o.person_id && camera_id == o.camera_id && split == o.split &&
         cls.identical(o.cls) && proj.identical(o.proj) && tokens.identical(o.tokens);
}

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == s) out.push_back(i);
  return out;
}

std::vector<std::uint64_t> Corpus::person_ids(Split s) const {
  std::set<std::uint64_t> ids;
  for (const auto& r : records)
    if (r.split == s) ids.insert(r.person_id);
  return {ids.begin(), ids.end()};
}

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f32s(const Tensor& t) {
    for (double v : t.data()) f32(v);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  std::uint64_t offset() const { return pos_; }
  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > in_.size()) throw FormatError("truncated file while reading " + what, pos_);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  Tensor f32s(Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = f32();
    return t;
  }
  bool done() const { return pos_ == in_.size(); }
  const std::uint8_t* here() const { return in_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

void check_record_shapes(const CorpusHeader& h, const FeatureRecord& r, std::size_t index) {
  const auto bad = [&](const char* field, const Tensor& t) {
    throw FormatError("record " + std::to_string(index) + ": " + field + " has shape " +
                          shape_to_string(t.shape()) + " inconsistent with header",
                      kCorpusHeaderBytes + index * h.record_bytes());
  };
  if (r.cls.size() != h.dim) bad("cls", r.cls);
  if (r.proj.size() != h.proj_dim) bad("proj", r.proj);
  if (r.tokens.size() != static_cast<std::size_t>(h.n_patches) * h.dim) bad("tokens", r.tokens);
}

}  // namespace

std::vector<std::uint8_t> encode_corpus(const Corpus& corpus) {
  const CorpusHeader& h = corpus.header;
  h.check();
  if (h.record_count != corpus.records.size()) {
    throw FormatError("header declares " + std::to_string(h.record_count) + " records, have " +
                          std::to_string(corpus.records.size()),
                      4);
  }
  std::vector<std::uint8_t> out;
  out.reserve(kCorpusHeaderBytes + corpus.records.size() * h.record_bytes());
  Writer w(out);
  out.insert(out.end(), kCorpusMagic.begin(), kCorpusMagic.end());
  for (auto v : {h.record_count, h.n_patches, h.dim, h.proj_dim, h.grid_h, h.grid_w}) w.u32(v);
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& r = corpus.records[i];
    check_record_shapes(h, r, i);
    w.u64(r.person_id);
    w.u32(r.camera_id);
    w.u32(static_cast<std::uint32_t>(r.split));
    w.f32s(r.cls);
    w.f32s(r.proj);
    w.f32s(r.tokens);
  }
  return out;
}

Corpus decode_corpus(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  rd.need(4, "magic");
  if (std::memcmp(rd.here(), kCorpusMagic.data(), 4) != 0) throw FormatError("bad magic", 0);
  rd.skip(4);
  rd.need(kCorpusHeaderBytes - 4, "header");
  Corpus c;
  CorpusHeader& h = c.header;
  h.record_count = rd.u32();
  h.n_patches = rd.u32();
  h.dim = rd.u32();
  h.proj_dim = rd.u32();
  h.grid_h = rd.u32();
  h.grid_w = rd.u32();
  try {
    h.check();
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), 8);
  }
  c.records.reserve(h.record_count);
  for (std::uint32_t i = 0; i < h.record_count; ++i) {
    rd.need(h.record_bytes(), "record " + std::to_string(i));
    FeatureRecord r;
    r.person_id = rd.u64();
    r.camera_id = rd.u32();
    const std::uint64_t split_at = rd.offset();
    const std::uint32_t split = rd.u32();
    if (split > 2) {
      throw FormatError("record " + std::to_string(i) + ": invalid split " + std::to_string(split),
                        split_at);
    }
    r.split = static_cast<Split>(split);
    r.cls = rd.f32s({h.dim});
    r.proj = rd.f32s({h.proj_dim});
    r.tokens = rd.f32s({h.n_patches, h.dim});
    c.records.push_back(std::move(r));
  }
  if (!rd.done()) {
    throw FormatError("trailing bytes after " + std::to_string(h.record_count) + " records",
                      rd.offset());
  }
  return c;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  const auto bytes = encode_corpus(corpus);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_corpus(bytes);
}

std::filesystem::path sidecar_path(const std::filesystem::path& corpus_path) {
  auto p = corpus_path;
  p.replace_extension(".meta.json");
  return p;
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  os << fatal.size() << " fatal, " << warnings.size() << " warning(s)";
  for (const auto& f : fatal) os << "\nfatal: " << f.message;
  for (const auto& w : warnings) os << "\nwarning: " << w.message;
  return os.str();
}

ValidationReport validate_corpus(const Corpus& corpus) {
  ValidationReport rep;
  try {
    corpus.header.check();
  } catch (const ConfigError& e) {
    rep.fatal.push_back({e.what(), std::nullopt});
    return rep;
  }
  if (corpus.header.record_count != corpus.records.size()) {
    rep.fatal.push_back({"header record_count " + std::to_string(corpus.header.record_count) +
                             " != " + std::to_string(corpus.records.size()) + " records",
                         std::nullopt});
  }
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& r = corpus.records[i];
    for (const auto* field : {&r.cls, &r.proj, &r.tokens}) {
      if (!field->all_finite()) {
        const char* name = field == &r.cls ? "cls" : field == &r.proj ? "proj" : "tokens";
        rep.fatal.push_back({"record " + std::to_string(i) + ": non-finite value in " + name, i});
      }
    }
  }

  std::map<std::uint64_t, std::set<std::uint32_t>> cams;
  std::map<Split, std::size_t> counts;
  for (const auto& r : corpus.records) {
    cams[r.person_id].insert(r.camera_id);
    ++counts[r.split];
  }
  std::vector<std::uint64_t> single;
  for (const auto& [pid, cs] : cams)
    if (cs.size() < 2) single.push_back(pid);
  if (!single.empty()) {
    std::ostringstream os;
    os << single.size() << " identit" << (single.size() == 1 ? "y" : "ies")
       << " seen by one camera only:";
    for (auto pid : single) os << ' ' << pid;
    rep.warnings.push_back({os.str(), std::nullopt});
  }
  for (Split s : {Split::train, Split::query, Split::gallery}) {
    if (counts[s] == 0) rep.warnings.push_back({"split '" + to_string(s) + "' is empty", std::nullopt});
  }
  if (counts[Split::query] > 0 && counts[Split::gallery] > 0 &&
      counts[Split::query] > counts[Split::gallery]) {
    rep.warnings.push_back({"more query (" + std::to_string(counts[Split::query]) +
                                ") than gallery (" + std::to_string(counts[Split::gallery]) +
                                ") records",
                            std::nullopt});
  }
  const auto train_ids = corpus.person_ids(Split::train);
  const auto query_ids = corpus.person_ids(Split::query);
  std::vector<std::uint64_t> overlap;
  std::set_intersection(train_ids.begin(), train_ids.end(), query_ids.begin(), query_ids.end(),
                        std::back_inserter(overlap));
  if (!overlap.empty()) {
    rep.warnings.push_back({std::to_string(overlap.size()) +
                                " identities appear in both train and query splits",
                            std::nullopt});
  }
  return rep;
}

std::optional<std::size_t> IdentityTextBank::index_of(std::uint64_t person_id) const {
  auto it = std::lower_bound(person_ids.begin(), person_ids.end(), person_id);
  if (it == person_ids.end() || *it != person_id) return std::nullopt;
  return static_cast<std::size_t>(it - person_ids.begin());
}

IdentityTextBank make_text_bank(const Corpus& corpus, std::uint64_t seed) {
  IdentityTextBank bank;
  bank.person_ids = corpus.person_ids(Split::train);
  const std::size_t c = bank.person_ids.size();
  const std::size_t p = corpus.header.proj_dim;
  Rng rng(mix_seed(seed, 0x7e47));
  bank.rows = Tensor({c, p});
  for (std::size_t i = 0; i < c; ++i) {
    auto row = bank.rows.row(i);
    for (auto& v : row) v = rng.normal();
    const double n = l2_norm(row);
    for (auto& v : row) v /= n;
  }
  return bank;
}

}  // namespace saga
