#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include <zlib.h>

#include "cascn/model.hpp"

namespace cascn {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'N'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw LoadError("checkpoint: unexpected end of data at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string str() {
    std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(p_ + pos_, kMagic, 4) != 0) throw LoadError("checkpoint: bad magic bytes");
    pos_ += 4;
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(Checkpoint::kVersion);
  w.str(ckpt.config_text);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape().dims()) w.u32(static_cast<std::uint32_t>(d));
    for (Scalar v : t.vec()) w.f64(static_cast<double>(v));
  }
  std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.u32(crc);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw LoadError("checkpoint: file too short (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[body + i]) << (8 * i);
  if (crc32_of(bytes.data(), body) != stored) throw LoadError("checkpoint: CRC-32 checksum mismatch");

  Reader r(bytes.data(), body);
  r.expect_magic();
  std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw LoadError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                    std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_text = r.str();
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw LoadError("checkpoint: tensor '" + name + "' has invalid rank");
    std::vector<int> dims;
    for (std::uint32_t k = 0; k < rank; ++k) {
      std::uint32_t d = r.u32();
      if (d == 0 || d > (1u << 30)) throw LoadError("checkpoint: tensor '" + name + "' has invalid shape");
      dims.push_back(static_cast<int>(d));
    }
    Shape shape(dims);
    r.need(shape.numel() * 8);
    std::vector<Scalar> data(shape.numel());
    for (auto& v : data) v = static_cast<Scalar>(r.f64());
    ckpt.tensors.emplace_back(std::move(name), Tensor(shape, std::move(data)));
  }
  if (!r.done()) throw LoadError("checkpoint: trailing bytes before checksum");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void save_model(CascnModel& model, const std::string& path, const std::string& extra_config,
                const std::vector<std::pair<std::string, Tensor>>& extra_tensors) {
  Checkpoint ckpt;
  for (const auto& [k, v] : model_config_entries(model.config())) ckpt.config_text += k + "=" + v + "\n";
  ckpt.config_text += extra_config;
  for (Parameter* p : model.parameters()) ckpt.tensors.emplace_back(p->name, p->value);
  for (auto& [name, t] : model.buffers()) ckpt.tensors.emplace_back(name, *t);
  for (const auto& e : extra_tensors) ckpt.tensors.push_back(e);
  write_checkpoint(path, ckpt);
}

std::unique_ptr<CascnModel> model_from_checkpoint(const Checkpoint& ckpt, const InputSize* expected_input) {
  ModelConfig cfg = ModelConfig::paper();
  for (const auto& [k, v] : parse_kv_lines(ckpt.config_text)) apply_model_entry(cfg, k, v);
  if (expected_input && !(cfg.input == *expected_input)) {
    throw ConfigError("checkpoint declares input size " + std::to_string(cfg.input.height) + "x" +
                      std::to_string(cfg.input.width) + " but " + std::to_string(expected_input->height) + "x" +
                      std::to_string(expected_input->width) + " was requested");
  }
  auto model = std::make_unique<CascnModel>(cfg);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name.emplace(name, &t);
  auto restore = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw LoadError("checkpoint: missing tensor '" + name + "'");
    if (!(it->second->shape() == dst.shape())) {
      throw LoadError("checkpoint: tensor '" + name + "' has shape " + it->second->shape().str() + ", model expects " +
                      dst.shape().str());
    }
    dst = *it->second;
  };
  for (Parameter* p : model->parameters()) {
    restore(p->name, p->value);
    p->grad = Tensor(p->value.shape());
  }
  for (auto& [name, t] : model->buffers()) restore(name, *t);
  return model;
}

std::unique_ptr<CascnModel> load_model(const std::string& path, const InputSize* expected_input, Checkpoint* raw) {
  Checkpoint ckpt = read_checkpoint(path);
  auto model = model_from_checkpoint(ckpt, expected_input);
  if (raw) *raw = std::move(ckpt);
  return model;
}

}  // namespace cascn
