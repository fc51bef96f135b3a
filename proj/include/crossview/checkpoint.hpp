#pragma once

// Checkpoint container: self-describing named float32 arrays plus a
// key=value metadata block (model/head config), step counter and RNG state.
// Little-endian throughout; array payloads are raw IEEE-754 bits, so a
// save/load cycle is bit-exact for float parameters.

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "crossview/core.hpp"
#include "crossview/kvconfig.hpp"
#include "crossview/model.hpp"

namespace crossview {

inline constexpr char kCheckpointMagic[8] = {'X', 'V', 'I', 'E', 'W', 'C', 'P', '1'};

namespace detail {

struct Writer {
  std::FILE* f;
  void bytes(const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) throw CheckpointError("checkpoint write failed");
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void i64(std::int64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
};

struct Reader {
  std::FILE* f;
  std::string path;
  void bytes(void* p, size_t n) {
    if (std::fread(p, 1, n, f) != n)
      throw CheckpointError("checkpoint error: truncated file " + path + " at offset " +
                            std::to_string(std::ftell(f)));
  }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  std::int64_t i64() { std::int64_t v; bytes(&v, 8); return v; }
  std::string str() {
    std::uint32_t n = u32();
    if (n > (1u << 20)) throw CheckpointError("checkpoint error: implausible string length in " + path);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
};

}  // namespace detail

template <typename T>
void save_named_arrays(const std::string& path, const ParamStore<T>& store, const KvConfig& meta,
                       std::int64_t step, std::uint64_t rng_state, bool include_moments = true) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw CheckpointError("checkpoint error: cannot open for write: " + path);
  detail::Writer w{f};
  w.bytes(kCheckpointMagic, 8);
  w.str(meta.serialize());
  w.i64(step);
  w.u64(rng_state);
  bool moments = include_moments && !store.opt_m.empty();
  std::uint32_t n = std::uint32_t(store.count() * (moments ? 3 : 1));
  w.u32(n);
  auto put = [&](const std::string& name, const Mat<T>& m) {
    w.str(name);
    w.u32(std::uint32_t(m.rows()));
    w.u32(std::uint32_t(m.cols()));
    std::vector<float> buf(size_t(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[size_t(i)] = float(m.data()[i]);
    w.bytes(buf.data(), buf.size() * 4);
  };
  for (size_t i = 0; i < store.count(); ++i) put(store.names[i], store.values[i]);
  if (moments)
    for (size_t i = 0; i < store.count(); ++i) {
      put("adam.m/" + store.names[i], store.opt_m[i]);
      put("adam.v/" + store.names[i], store.opt_v[i]);
    }
  std::fclose(f);
}

template <typename T>
struct LoadedContainer {
  ParamStore<T> store;
  KvConfig meta;
  std::int64_t step = 0;
  std::uint64_t rng_state = 0;
};

template <typename T>
LoadedContainer<T> load_named_arrays(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw CheckpointError("checkpoint error: cannot open: " + path);
  LoadedContainer<T> out;
  try {
    detail::Reader r{f, path};
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
      throw CheckpointError("checkpoint error: bad magic in " + path);
    std::istringstream meta_in(r.str());
    out.meta = KvConfig::parse(meta_in);
    out.step = r.i64();
    out.rng_state = r.u64();
    std::uint32_t n = r.u32();
    std::vector<std::pair<std::string, Mat<T>>> moments_m, moments_v;
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str();
      std::uint32_t rows = r.u32(), cols = r.u32();
      if (std::uint64_t(rows) * cols > (1ull << 28))
        throw CheckpointError("checkpoint error: implausible array size in " + path);
      std::vector<float> buf(size_t(rows) * cols);
      r.bytes(buf.data(), buf.size() * 4);
      Mat<T> m(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = T(buf[size_t(k)]);
      if (name.rfind("adam.m/", 0) == 0)
        moments_m.emplace_back(name.substr(7), std::move(m));
      else if (name.rfind("adam.v/", 0) == 0)
        moments_v.emplace_back(name.substr(7), std::move(m));
      else
        out.store.add(name, std::move(m));
    }
    if (!moments_m.empty()) {
      if (moments_m.size() != out.store.count() || moments_v.size() != out.store.count())
        throw CheckpointError("checkpoint error: incomplete optimizer state in " + path);
      out.store.opt_m.resize(out.store.count());
      out.store.opt_v.resize(out.store.count());
      for (auto& [name, m] : moments_m) out.store.opt_m[size_t(out.store.id(name))] = std::move(m);
      for (auto& [name, m] : moments_v) out.store.opt_v[size_t(out.store.id(name))] = std::move(m);
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return out;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::string& path) {
  save_named_arrays(path, params.store, params.config.to_kv(), params.step_counter, params.rng_state);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path) {
  LoadedContainer<T> c = load_named_arrays<T>(path);
  ModelParams<T> p;
  p.config = ModelConfig::from_kv(c.meta);
  p.config.validate();
  p.store = std::move(c.store);
  p.step_counter = c.step;
  p.rng_state = c.rng_state;
  // Names and shapes must match a freshly built skeleton; no silent reshape.
  ModelParams<T> skel = init_params<T>(p.config, 0);
  if (skel.store.count() != p.store.count())
    throw CheckpointError("checkpoint error: array count mismatch in " + path);
  for (size_t i = 0; i < skel.store.count(); ++i) {
    const auto& name = skel.store.names[i];
    if (!p.store.by_name.count(name))
      throw CheckpointError("checkpoint error: missing array '" + name + "' in " + path);
    const Mat<T>& have = p.store[name];
    const Mat<T>& want = skel.store.values[i];
    if (have.rows() != want.rows() || have.cols() != want.cols())
      throw CheckpointError("checkpoint error: shape mismatch for '" + name + "' in " + path);
  }
  return p;
}

// Loading against an expected architecture; mismatch is an error, never a
// silent reshape.
template <typename T>
ModelParams<T> load_checkpoint_expect(const std::string& path, const ModelConfig& expected) {
  ModelParams<T> p = load_checkpoint<T>(path);
  ModelConfig a = p.config, b = expected;
  a.seed = b.seed = 0;
  if (!(a == b)) throw CheckpointError("checkpoint error: config mismatch for " + path);
  return p;
}

}  // namespace crossview
