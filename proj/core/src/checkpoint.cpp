#include "samdkif/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "samdkif/errors.hpp"

namespace samdkif {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'M', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    }
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::kF32 : DType::kF64;
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32:
    case DType::kI32:
      return 4;
    case DType::kF64:
      return 8;
    case DType::kU8:
      return 1;
  }
  throw FormatError("unknown dtype");
}

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& tensor) {
  std::vector<double> values(tensor.data().begin(), tensor.data().end());
  put_raw(name, dtype_of<T>(), tensor.shape(), std::move(values));
}

void Checkpoint::put_raw(std::string name, DType dtype, Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("checkpoint entry '" + name + "': shape " + shape_string(shape) + " holds " +
                     std::to_string(values.size()) + " values");
  }
  auto it = std::find_if(tensors_.begin(), tensors_.end(),
                         [&](const NamedTensor& t) { return t.name == name; });
  NamedTensor entry{std::move(name), dtype, std::move(shape), std::move(values)};
  if (it != tensors_.end()) {
    *it = std::move(entry);
  } else {
    tensors_.push_back(std::move(entry));
  }
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const NamedTensor& t) { return t.name == name; });
}

const NamedTensor& Checkpoint::entry(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) {
      return t;
    }
  }
  throw FormatError("checkpoint (" + kind + ") has no tensor '" + name + "'");
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name) const {
  const NamedTensor& e = entry(name);
  std::vector<T> values(e.values.size());
  std::transform(e.values.begin(), e.values.end(), values.begin(),
                 [](double v) { return static_cast<T>(v); });
  return Tensor<T>(e.shape, std::move(values));
}

std::string Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(config.n_layers));
  w.u32(static_cast<std::uint32_t>(config.d_model));
  w.u32(static_cast<std::uint32_t>(config.n_heads));
  w.u32(static_cast<std::uint32_t>(config.d_ffn));
  w.u32(static_cast<std::uint32_t>(config.vocab_size));
  w.u32(static_cast<std::uint32_t>(config.max_seq_len));
  w.u8(config.tied_head ? 1 : 0);
  w.str(kind);
  w.str(meta);
  w.u32(static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (const auto d : t.shape) {
      w.u64(d);
    }
    for (const double v : t.values) {
      switch (t.dtype) {
        case DType::kF32:
          w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
          break;
        case DType::kF64:
          w.u64(std::bit_cast<std::uint64_t>(v));
          break;
        case DType::kI32:
          w.u32(static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
          break;
        case DType::kU8:
          w.u8(static_cast<std::uint8_t>(v));
          break;
      }
    }
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a SAMK checkpoint (bad magic)");
  }
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) {
    r.u8();
  }
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config.n_layers = r.u32();
  ck.config.d_model = r.u32();
  ck.config.n_heads = r.u32();
  ck.config.d_ffn = r.u32();
  ck.config.vocab_size = r.u32();
  ck.config.max_seq_len = r.u32();
  ck.config.tied_head = r.u8() != 0;
  ck.kind = r.str();
  ck.meta = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.dtype = static_cast<DType>(r.u8());
    dtype_size(t.dtype);  // validates
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.u64()));
    }
    const std::size_t n = shape_numel(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      switch (t.dtype) {
        case DType::kF32:
          t.values[k] = std::bit_cast<float>(r.u32());
          break;
        case DType::kF64:
          t.values[k] = std::bit_cast<double>(r.u64());
          break;
        case DType::kI32:
          t.values[k] = static_cast<std::int32_t>(r.u32());
          break;
        case DType::kU8:
          t.values[k] = r.u8();
          break;
      }
    }
    ck.tensors_.push_back(std::move(t));
  }
  if (!r.done()) {
    throw FormatError("trailing bytes after last tensor");
  }
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw FormatError("write failed for '" + path + "'");
  }
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open checkpoint '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return deserialize(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get<float>(const std::string&) const;
template Tensor<double> Checkpoint::get<double>(const std::string&) const;

}  // namespace samdkif
