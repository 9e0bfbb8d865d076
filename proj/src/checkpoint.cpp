#include "ageflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ageflow {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

template <typename U>
void append(std::vector<std::uint8_t>& out, U value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename U>
  U read(const char* what) {
    U value;
    take(&value, sizeof(U), what);
    return value;
  }

  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Fault(origin_ + ": truncated checkpoint while reading " + what + " at byte " + std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor<float>& t) {
  tensors_[name] = StoredTensor{DType::F32, t.shape(), {t.values().begin(), t.values().end()}, {}};
}

void Checkpoint::put(const std::string& name, const Tensor<double>& t) {
  tensors_[name] = StoredTensor{DType::F64, t.shape(), {}, {t.values().begin(), t.values().end()}};
}

void Checkpoint::put_scalar(const std::string& name, double value) { put_vector(name, {value}); }

void Checkpoint::put_vector(const std::string& name, const std::vector<double>& values) {
  tensors_[name] = StoredTensor{DType::F64, {static_cast<int>(values.size())}, {}, values};
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  auto it = tensors_.lower_bound(prefix);
  return it != tensors_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

const StoredTensor& Checkpoint::find(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Fault("checkpoint has no tensor '" + name + "'");
  return it->second;
}

Tensor<float> Checkpoint::get_f32(const std::string& name, const Shape& expected) const {
  const StoredTensor& s = find(name);
  if (s.dtype != DType::F32) throw Fault("checkpoint tensor '" + name + "' is not f32");
  if (!expected.empty() && s.shape != expected) {
    throw Fault("checkpoint tensor '" + name + "' has shape " + shape_string(s.shape) + ", expected " +
                shape_string(expected));
  }
  return Tensor<float>(s.shape, s.f32);
}

double Checkpoint::get_scalar(const std::string& name) const {
  const auto v = get_vector(name);
  if (v.size() != 1) throw Fault("checkpoint tensor '" + name + "' is not a scalar");
  return v[0];
}

std::vector<double> Checkpoint::get_vector(const std::string& name) const {
  const StoredTensor& s = find(name);
  if (s.dtype != DType::F64) throw Fault("checkpoint tensor '" + name + "' is not f64");
  return s.f64;
}

void Checkpoint::merge(const Checkpoint& other) {
  for (const auto& [name, t] : other.tensors_) tensors_[name] = t;
}

void Checkpoint::erase_prefix(const std::string& prefix) {
  for (auto it = tensors_.lower_bound(prefix); it != tensors_.end() && it->first.compare(0, prefix.size(), prefix) == 0;)
    it = tensors_.erase(it);
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out{'F', 'L', 'C', 'K'};
  append<std::uint32_t>(out, kCheckpointVersion);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors().size()));
  for (const auto& [name, t] : ckpt.tensors()) {
    append<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    append<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) append<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    if (shape_numel(t.shape) != t.numel()) throw Fault("checkpoint tensor '" + name + "' shape/data mismatch");
    const auto* p = t.dtype == DType::F32 ? reinterpret_cast<const std::uint8_t*>(t.f32.data())
                                          : reinterpret_cast<const std::uint8_t*>(t.f64.data());
    const std::size_t n = t.numel() * (t.dtype == DType::F32 ? 4 : 8);
    out.insert(out.end(), p, p + n);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, "FLCK", 4) != 0) throw Fault(origin + ": bad checkpoint magic (expected FLCK)");
  const auto version = r.read<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Fault(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.read<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.read<std::uint32_t>("name length");
    if (len > bytes.size()) throw Fault(origin + ": implausible tensor name length " + std::to_string(len));
    std::string name(len, '\0');
    r.take(name.data(), len, "tensor name");
    const auto dtype = r.read<std::uint8_t>("dtype");
    if (dtype > 1) throw Fault(origin + ": tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
    const auto ndim = r.read<std::uint32_t>("ndim");
    if (ndim > 16) throw Fault(origin + ": tensor '" + name + "' has implausible rank " + std::to_string(ndim));
    StoredTensor t;
    t.dtype = static_cast<DType>(dtype);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.read<std::uint32_t>("dims");
      if (dim == 0 || dim > bytes.size()) throw Fault(origin + ": tensor '" + name + "' has invalid dimension");
      t.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    if (numel * (t.dtype == DType::F32 ? 4 : 8) > bytes.size()) {
      throw Fault(origin + ": truncated checkpoint in tensor '" + name + "'");
    }
    if (t.dtype == DType::F32) {
      t.f32.resize(numel);
      r.take(t.f32.data(), numel * 4, "tensor data");
    } else {
      t.f64.resize(numel);
      r.take(t.f64.data(), numel * 8, "tensor data");
    }
    if (ckpt.tensors().count(name)) throw Fault(origin + ": duplicate tensor '" + name + "'");
    ckpt.tensors().emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw Fault(origin + ": trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Fault("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Fault("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Fault("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace ageflow
