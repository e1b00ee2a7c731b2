#include "saga/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "saga/corpus.hpp"

namespace saga {

const Tensor* WeightFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& WeightFile::get(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("weights: missing tensor '" + name + "'", 0);
}

const Tensor& WeightFile::expect(const std::string& name, const Shape& shape) const {
  const Tensor& t = get(name);
  if (t.shape() != shape) {
    throw DimensionError("weights: tensor '" + name + "' has shape " + shape_to_string(t.shape()) +
                         ", expected " + shape_to_string(shape));
  }
  return t;
}

namespace {

void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& o, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Cursor {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > b.size()) throw FormatError("weights: truncated blob", pos);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_weights(const WeightFile& w, WeightDtype dtype) {
  std::vector<std::uint8_t> o = {'S', 'W', 'T', '1'};
  put_u32(o, static_cast<std::uint32_t>(dtype));
  put_u32(o, static_cast<std::uint32_t>(w.tensors.size()));
  for (const auto& [name, t] : w.tensors) {
    put_u32(o, static_cast<std::uint32_t>(name.size()));
    o.insert(o.end(), name.begin(), name.end());
    put_u32(o, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(o, d);
    for (double v : t.data()) {
      if (dtype == WeightDtype::f32) {
        put_u32(o, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_u64(o, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return o;
}

WeightFile decode_weights(const std::vector<std::uint8_t>& bytes) {
  Cursor c{bytes};
  c.need(4);
  if (std::memcmp(bytes.data(), "SWT1", 4) != 0) throw FormatError("weights: bad magic", 0);
  c.pos = 4;
  const std::size_t dtype_at = c.pos;
  const std::uint32_t dtype = c.u32();
  if (dtype > 1) throw FormatError("weights: unknown dtype " + std::to_string(dtype), dtype_at);
  const std::uint32_t count = c.u32();
  WeightFile w;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = c.u32();
    c.need(len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + c.pos), len);
    c.pos += len;
    const std::uint32_t rank = c.u32();
    if (rank > 8) throw FormatError("weights: tensor '" + name + "' has rank " + std::to_string(rank), c.pos);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(c.u64());
    Tensor t(shape);
    const std::size_t width = dtype == 0 ? 4 : 8;
    c.need(t.size() * width);
    for (auto& v : t.data()) {
      v = dtype == 0 ? static_cast<double>(std::bit_cast<float>(c.u32()))
                     : std::bit_cast<double>(c.u64());
    }
    w.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (c.pos != bytes.size()) throw FormatError("weights: trailing bytes", c.pos);
  return w;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void write_weights(const std::filesystem::path& path, const WeightFile& w, WeightDtype dtype) {
  write_file_bytes(path, encode_weights(w, dtype));
}

WeightFile read_weights(const std::filesystem::path& path) {
  return decode_weights(read_file_bytes(path));
}

std::uint64_t fingerprint(const std::vector<const Tensor*>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (const Tensor* t : tensors) {
    mix(t->rank());
    for (auto d : t->shape()) mix(d);
    for (double v : t->data()) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

}  // namespace saga
