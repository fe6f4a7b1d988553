#pragma once

// Binary checkpoint: magic "BIFITCKP", u32 format version, u32-length JSON
// config blob, u64 step, u32-length RNG state text, u32 tensor count, then
// per tensor: u32-length name, u32 rank, u32 dims, u8 element width (4|8),
// raw little-endian data. Optimizer moments are stored as "adam.m/<param>"
// and "adam.v/<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "bifit/config.hpp"
#include "bifit/model.hpp"
#include "bifit/optim.hpp"

namespace bifit {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'B', 'I', 'F', 'I', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A tensor as stored on disk, in either width.
struct StoredTensor {
  Shape shape;
  int width = 4;
  std::vector<double> values;  // widened for uniform handling

  template <class T>
  Tensor<T> as() const {
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]);
    return t;
  }
};

struct CheckpointData {
  RunConfig config;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, StoredTensor>> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {
class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <class U>
  void pod(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <class T>
  void tensor(const std::string& name, const Tensor<T>& t) {
    str(name);
    pod(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) pod(static_cast<std::uint32_t>(d));
    pod(static_cast<std::uint8_t>(sizeof(T)));
    bytes(t.data(), t.size() * sizeof(T));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : buf_(std::move(data)), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw IoError(path_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U pod() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (pos_ + n > buf_.size()) throw IoError(path_ + ": truncated checkpoint");
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const std::string& path() const { return path_; }

 private:
  std::string buf_, path_;
  std::size_t pos_ = 0;
};
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, std::uint64_t step, const std::string& rng_state,
                     const ParamStore<T>& params, const AdamW<T>* opt = nullptr) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  w.str(cfg.to_json().dump());
  w.pod(static_cast<std::uint64_t>(step));
  w.str(rng_state);
  std::uint32_t count = static_cast<std::uint32_t>(params.entries().size());
  if (opt) count += 1 + 2 * static_cast<std::uint32_t>(opt->state().size());
  w.pod(count);
  for (const auto& [name, v] : params.entries()) w.tensor(name, v.value());
  if (opt) {
    w.tensor("adam.t", Tensor<T>({1}, std::vector<T>{static_cast<T>(opt->steps_taken())}));
    for (const auto& [name, m] : opt->state()) {
      w.tensor("adam.m/" + name, m.m);
      w.tensor("adam.v/" + name, m.v);
    }
  }
  const auto tmp = path.string() + ".tmp";
  detail::write_file(tmp, w.data());
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  detail::Reader r(detail::read_file(path), path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointData d;
  try {
    d.config = RunConfig::from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed config blob (" + e.what() + ")");
  }
  d.step = r.pod<std::uint64_t>();
  d.rng_state = r.str();
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    StoredTensor t;
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw IoError(path.string() + ": tensor '" + name + "' has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<int>(r.pod<std::uint32_t>()));
    t.width = r.pod<std::uint8_t>();
    const std::size_t n = shape_numel(t.shape);
    t.values.resize(n);
    if (t.width == 4) {
      std::vector<float> f(n);
      r.bytes(f.data(), n * 4);
      std::copy(f.begin(), f.end(), t.values.begin());
    } else if (t.width == 8) {
      r.bytes(t.values.data(), n * 8);
    } else {
      throw IoError(path.string() + ": tensor '" + name + "' has element width " + std::to_string(t.width));
    }
    d.tensors.emplace_back(std::move(name), std::move(t));
  }
  return d;
}

/// Copies stored parameters (and moments, when `opt` is given) into place.
/// Every model parameter must be present with the same shape.
template <class T>
void restore_checkpoint(const CheckpointData& d, ParamStore<T>& params, AdamW<T>* opt = nullptr) {
  for (auto& [name, v] : params.entries()) {
    const StoredTensor* s = d.find(name);
    if (!s) throw IoError("checkpoint lacks parameter '" + name + "'");
    if (s->shape != v.shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(s->shape) + ", model expects " + shape_str(v.shape()));
    v.mutable_value() = s->template as<T>();
  }
  if (!opt) return;
  if (const StoredTensor* t = d.find("adam.t")) opt->set_steps_taken(static_cast<long long>(t->values.at(0)));
  for (const auto& [name, t] : d.tensors) {
    if (name.rfind("adam.m/", 0) == 0) opt->state()[name.substr(7)].m = t.template as<T>();
    if (name.rfind("adam.v/", 0) == 0) opt->state()[name.substr(7)].v = t.template as<T>();
  }
}

}  // namespace bifit
