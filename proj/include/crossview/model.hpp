#pragma once

// Miniature cross-view completion encoder/decoder.
//
// Encoder: ViT blocks (pre-norm, GELU MLP). Decoder blocks: self-attention
// over the target stream, cross-attention into the source memory, MLP.
// Cross-attention logits/probabilities can be recorded per block, which is
// the raw material for the matching pipelines.
//
// The optional register token is a single learnable vector appended to the
// source stream at the encoder input; it participates in cross-attention
// keys/values but never in queries and carries no positional embedding.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crossview/autodiff.hpp"
#include "crossview/core.hpp"
#include "crossview/image.hpp"
#include "crossview/kvconfig.hpp"
#include "crossview/rng.hpp"

namespace crossview {

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int enc_layers = 6;
  int dec_layers = 6;
  int enc_dim = 192;
  int dec_dim = 128;
  int n_heads = 4;
  double mlp_ratio = 4.0;
  bool use_register_token = true;
  std::uint64_t seed = 0;

  int grid_side() const { return image_size / patch_size; }
  Grid2 grid() const { return {grid_side(), grid_side()}; }
  int tokens() const { return grid_side() * grid_side(); }
  int patch_values() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("need at least one encoder and decoder layer");
    if (n_heads < 1 || enc_dim % n_heads != 0 || dec_dim % n_heads != 0)
      throw ConfigError("enc_dim and dec_dim must be divisible by n_heads");
    if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  }

  bool operator==(const ModelConfig&) const = default;

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("image_size", std::to_string(image_size));
    kv.set("patch_size", std::to_string(patch_size));
    kv.set("enc_layers", std::to_string(enc_layers));
    kv.set("dec_layers", std::to_string(dec_layers));
    kv.set("enc_dim", std::to_string(enc_dim));
    kv.set("dec_dim", std::to_string(dec_dim));
    kv.set("n_heads", std::to_string(n_heads));
    kv.set("mlp_ratio", std::to_string(mlp_ratio));
    kv.set("use_register_token", use_register_token ? "1" : "0");
    kv.set("seed", std::to_string(seed));
    return kv;
  }

  static ModelConfig from_kv(const KvConfig& kv) {
    ModelConfig c;
    c.image_size = kv.get("image_size", c.image_size);
    c.patch_size = kv.get("patch_size", c.patch_size);
    c.enc_layers = kv.get("enc_layers", c.enc_layers);
    c.dec_layers = kv.get("dec_layers", c.dec_layers);
    c.enc_dim = kv.get("enc_dim", c.enc_dim);
    c.dec_dim = kv.get("dec_dim", c.dec_dim);
    c.n_heads = kv.get("n_heads", c.n_heads);
    c.mlp_ratio = kv.get("mlp_ratio", c.mlp_ratio);
    c.use_register_token = kv.get("use_register_token", c.use_register_token);
    c.seed = std::uint64_t(kv.get("seed", std::int64_t(c.seed)));
    return c;
  }
};

template <typename T>
struct TokenGrid {
  Mat<T> tokens;  // (grid.count() [+1 register]) x dim, register row last
  Grid2 grid;
  bool has_register = false;

  int dim() const { return int(tokens.cols()); }
  int rows() const { return int(tokens.rows()); }
  int grid_rows() const { return grid.count(); }
};

template <typename T>
struct AttentionRecord {
  int layer_index = 0;
  std::vector<Mat<T>> logits;  // per head, (n_query x n_key)
  std::vector<Mat<T>> probs;
  // Full-dim projections (heads concatenated) of both streams, kept so that
  // alternative pairings (Q-Q, K-K, V-V) can be formed after the fact.
  Mat<T> q_query, k_query, v_query;  // query-stream tokens under Wq/Wk/Wv
  Mat<T> q_mem, k_mem, v_mem;        // memory-stream tokens under Wq/Wk/Wv
  int n_heads() const { return int(logits.size()); }
};

// Named dense arrays with lazily-allocated optimizer moments.
template <typename T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Mat<T>> values;
  std::vector<Mat<T>> opt_m, opt_v;
  std::unordered_map<std::string, int> by_name;

  int add(const std::string& name, Mat<T> value) {
    require(by_name.count(name) == 0, "duplicate parameter name: " + name);
    by_name[name] = int(values.size());
    names.push_back(name);
    values.push_back(std::move(value));
    return int(values.size()) - 1;
  }

  int id(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  Mat<T>& operator[](const std::string& name) { return values[id(name)]; }
  const Mat<T>& operator[](const std::string& name) const { return values[id(name)]; }
  size_t count() const { return values.size(); }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& m : values) n += m.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& m : values)
      if (!m.allFinite()) return false;
    return true;
  }

  void ensure_moments() {
    if (!opt_m.empty()) return;
    for (const auto& v : values) {
      opt_m.push_back(Mat<T>::Zero(v.rows(), v.cols()));
      opt_v.push_back(Mat<T>::Zero(v.rows(), v.cols()));
    }
  }

  void zero_all() {
    for (auto& v : values) v.setZero();
  }
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  ParamStore<T> store;
  std::int64_t step_counter = 0;
  std::uint64_t rng_state = 0;
};

namespace detail {

template <typename T>
void add_linear(ParamStore<T>& s, Rng& rng, const std::string& prefix, int in, int out) {
  Mat<T> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = T(rng.truncated_normal(0.02));
  s.add(prefix + ".w", std::move(w));
  s.add(prefix + ".b", Mat<T>::Zero(1, out));
}

template <typename T>
void add_norm(ParamStore<T>& s, const std::string& prefix, int dim) {
  s.add(prefix + ".g", Mat<T>::Ones(1, dim));
  s.add(prefix + ".b", Mat<T>::Zero(1, dim));
}

template <typename T>
void add_attention(ParamStore<T>& s, Rng& rng, const std::string& prefix, int dim) {
  add_linear(s, rng, prefix + ".q", dim, dim);
  add_linear(s, rng, prefix + ".k", dim, dim);
  add_linear(s, rng, prefix + ".v", dim, dim);
  add_linear(s, rng, prefix + ".o", dim, dim);
}

template <typename T>
Mat<T> trunc_normal_mat(Rng& rng, int rows, int cols, double std) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(rng.truncated_normal(std));
  return m;
}

}  // namespace detail

// Deterministic for a fixed (config, seed): weights truncated-normal 0.02,
// biases zero, norms identity, learned positional tables.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> p;
  p.config = config;
  p.config.seed = seed;
  p.rng_state = seed;
  Rng rng(seed ^ 0xA02E75C9D1B3F647ULL);
  ParamStore<T>& s = p.store;
  const int c = config.enc_dim, d = config.dec_dim;
  const int mlp_c = int(config.mlp_ratio * c), mlp_d = int(config.mlp_ratio * d);

  detail::add_linear(s, rng, "enc.patch", config.patch_values(), c);
  s.add("enc.pos", detail::trunc_normal_mat<T>(rng, config.tokens(), c, 0.02));
  if (config.use_register_token)
    s.add("src.register", detail::trunc_normal_mat<T>(rng, 1, c, 0.02));
  for (int i = 0; i < config.enc_layers; ++i) {
    std::string b = "enc.b" + std::to_string(i);
    detail::add_norm(s, b + ".ln1", c);
    detail::add_attention(s, rng, b + ".attn", c);
    detail::add_norm(s, b + ".ln2", c);
    detail::add_linear(s, rng, b + ".mlp.1", c, mlp_c);
    detail::add_linear(s, rng, b + ".mlp.2", mlp_c, c);
  }
  detail::add_norm(s, "enc.norm", c);

  detail::add_linear(s, rng, "proj", c, d);
  s.add("dec.pos", detail::trunc_normal_mat<T>(rng, config.tokens(), d, 0.02));
  s.add("dec.mask_token", detail::trunc_normal_mat<T>(rng, 1, d, 0.02));
  for (int i = 0; i < config.dec_layers; ++i) {
    std::string b = "dec.b" + std::to_string(i);
    detail::add_norm(s, b + ".ln1", d);
    detail::add_attention(s, rng, b + ".self", d);
    detail::add_norm(s, b + ".ln2", d);
    detail::add_norm(s, b + ".lnm", d);
    detail::add_attention(s, rng, b + ".cross", d);
    detail::add_norm(s, b + ".ln3", d);
    detail::add_linear(s, rng, b + ".mlp.1", d, mlp_d);
    detail::add_linear(s, rng, b + ".mlp.2", mlp_d, d);
  }
  detail::add_norm(s, "dec.norm", d);
  detail::add_linear(s, rng, "head.recon", d, config.patch_values());
  return p;
}

// Image -> (hw x patch^2*3) matrix of raw patch pixels, row-major patches,
// each patch flattened (y, x, channel).
template <typename T>
Mat<T> image_to_patches(const Image<T>& img, int patch) {
  int gh = img.h / patch, gw = img.w / patch;
  Mat<T> m(gh * gw, patch * patch * 3);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      Eigen::Index row = Eigen::Index(gy) * gw + gx;
      Eigen::Index k = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int ch = 0; ch < 3; ++ch)
            m(row, k++) = img.at(gy * patch + py, gx * patch + px, ch);
    }
  return m;
}

template <typename T>
Image<T> patches_to_image(const Mat<T>& m, int patch, Grid2 grid) {
  Image<T> img(grid.h * patch, grid.w * patch);
  for (int gy = 0; gy < grid.h; ++gy)
    for (int gx = 0; gx < grid.w; ++gx) {
      Eigen::Index row = Eigen::Index(gy) * grid.w + gx;
      Eigen::Index k = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int ch = 0; ch < 3; ++ch)
            img.at(gy * patch + py, gx * patch + px, ch) = m(row, k++);
    }
  return img;
}

// ---- tape-level forward ----

template <typename T>
struct ForwardCtx {
  Tape<T>& tape;
  const ModelParams<T>& params;
  bool trainable = false;
  std::int64_t slot_base = 0;

  Var<T> p(const std::string& name) {
    int id = params.store.id(name);
    return tape.param(params.store.values[id], slot_base + id, trainable);
  }
  Var<T> input(Mat<T> m) { return tape.input(std::move(m), false); }
};

template <typename T>
Var<T> linear(ForwardCtx<T>& ctx, Var<T> x, const std::string& prefix) {
  return add_rowvec(matmul(x, ctx.p(prefix + ".w")), ctx.p(prefix + ".b"));
}

template <typename T>
Var<T> norm(ForwardCtx<T>& ctx, Var<T> x, const std::string& prefix) {
  return layer_norm(x, ctx.p(prefix + ".g"), ctx.p(prefix + ".b"));
}

template <typename T>
Var<T> mlp(ForwardCtx<T>& ctx, Var<T> x, const std::string& prefix) {
  return linear(ctx, gelu(linear(ctx, x, prefix + ".1")), prefix + ".2");
}

template <typename T>
struct AttnVars {
  Var<T> out;
  std::vector<Var<T>> head_logits;
  std::vector<Var<T>> head_probs;
  Var<T> q_query, k_query, v_query;
  Var<T> q_mem, k_mem, v_mem;
};

// Multi-head attention with projections from `prefix`. Heads are column
// slices; logits are scaled by 1/sqrt(d_head); merge is concat + Wo.
template <typename T>
AttnVars<T> multi_head_attention(ForwardCtx<T>& ctx, Var<T> x_q, Var<T> x_kv,
                                 const std::string& prefix, int n_heads,
                                 bool record = false, bool record_pairings = false) {
  AttnVars<T> r;
  Var<T> q = linear(ctx, x_q, prefix + ".q");
  Var<T> k = linear(ctx, x_kv, prefix + ".k");
  Var<T> v = linear(ctx, x_kv, prefix + ".v");
  int dim = int(ctx.tape.val(q).cols());
  int dh = dim / n_heads;
  T inv_sqrt = T(1) / std::sqrt(T(dh));
  Var<T> merged;
  for (int h = 0; h < n_heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh);
    Var<T> kh = slice_cols(k, h * dh, dh);
    Var<T> vh = slice_cols(v, h * dh, dh);
    Var<T> logits = scale(matmul_nt(qh, kh), inv_sqrt);
    Var<T> probs = rowwise_softmax(logits);
    Var<T> oh = matmul(probs, vh);
    merged = h == 0 ? oh : concat_cols(merged, oh);
    if (record) {
      r.head_logits.push_back(logits);
      r.head_probs.push_back(probs);
    }
  }
  r.out = linear(ctx, merged, prefix + ".o");
  if (record) {
    r.q_query = q;
    r.k_mem = k;
    r.v_mem = v;
    if (record_pairings) {
      r.q_mem = linear(ctx, x_kv, prefix + ".q");
      r.k_query = linear(ctx, x_q, prefix + ".k");
      r.v_query = linear(ctx, x_q, prefix + ".v");
    }
  }
  return r;
}

template <typename T>
struct EncoderOut {
  std::vector<Var<T>> layers;   // block outputs, no final norm
  Var<T> final_norm;            // enc.norm applied to the last block
  Grid2 grid;
  bool has_register = false;
};

// `visible` (optional) restricts the grid tokens that enter the encoder;
// positional rows follow the original indices. Register token appended last.
template <typename T>
EncoderOut<T> encode_image(ForwardCtx<T>& ctx, const Image<T>& img, bool with_register,
                           const std::vector<int>* visible = nullptr) {
  const ModelConfig& cfg = ctx.params.config;
  if (img.h != cfg.image_size || img.w != cfg.image_size)
    throw DimensionError("encode_image: image does not match config.image_size");
  Var<T> pixels = ctx.input(image_to_patches(img, cfg.patch_size));
  Var<T> x = linear(ctx, pixels, "enc.patch");
  Var<T> pos = ctx.p("enc.pos");
  if (visible) {
    x = gather_rows(x, *visible);
    pos = gather_rows(pos, *visible);
  }
  x = add(x, pos);
  bool reg = with_register && cfg.use_register_token;
  if (reg) x = concat_rows(x, ctx.p("src.register"));
  EncoderOut<T> out;
  out.grid = cfg.grid();
  out.has_register = reg;
  for (int i = 0; i < cfg.enc_layers; ++i) {
    std::string b = "enc.b" + std::to_string(i);
    Var<T> n1 = norm(ctx, x, b + ".ln1");
    x = add(x, multi_head_attention(ctx, n1, n1, b + ".attn", cfg.n_heads).out);
    x = add(x, mlp(ctx, norm(ctx, x, b + ".ln2"), b + ".mlp"));
    out.layers.push_back(x);
  }
  out.final_norm = norm(ctx, x, "enc.norm");
  return out;
}

// Encoder on an already-embedded token grid (public `encode` op surface).
template <typename T>
EncoderOut<T> encode_tokens(ForwardCtx<T>& ctx, Var<T> x, Grid2 grid, bool has_register) {
  const ModelConfig& cfg = ctx.params.config;
  EncoderOut<T> out;
  out.grid = grid;
  out.has_register = has_register;
  for (int i = 0; i < cfg.enc_layers; ++i) {
    std::string b = "enc.b" + std::to_string(i);
    Var<T> n1 = norm(ctx, x, b + ".ln1");
    x = add(x, multi_head_attention(ctx, n1, n1, b + ".attn", cfg.n_heads).out);
    x = add(x, mlp(ctx, norm(ctx, x, b + ".ln2"), b + ".mlp"));
    out.layers.push_back(x);
  }
  out.final_norm = norm(ctx, x, "enc.norm");
  return out;
}

// Encoder features -> decoder space: shared linear projection; positional
// rows added on grid slots only.
template <typename T>
Var<T> to_decoder_space(ForwardCtx<T>& ctx, Var<T> enc_normed, bool has_register) {
  Var<T> x = linear(ctx, enc_normed, "proj");
  Var<T> pos = ctx.p("dec.pos");
  if (!has_register) return add(x, pos);
  int hw = ctx.params.config.tokens();
  require(int(ctx.tape.val(x).rows()) == hw + 1, "to_decoder_space: register row missing");
  std::vector<int> grid_idx(hw);
  for (int i = 0; i < hw; ++i) grid_idx[i] = i;
  Var<T> grid_part = add(gather_rows(x, grid_idx), pos);
  Var<T> reg_row = gather_rows(x, {hw});
  return concat_rows(grid_part, reg_row);
}

// Decoder target stream for a masked pass: encoded visible tokens projected
// into decoder space, learned mask token elsewhere, positions added on all
// slots, reassembled in grid order.
template <typename T>
Var<T> masked_target_stream(ForwardCtx<T>& ctx, Var<T> enc_visible_normed,
                            const std::vector<int>& visible_idx) {
  const ModelConfig& cfg = ctx.params.config;
  int hw = cfg.tokens();
  int n_vis = int(visible_idx.size());
  Var<T> vis = linear(ctx, enc_visible_normed, "proj");
  Var<T> mask_rows = repeat_rows(ctx.p("dec.mask_token"), hw - n_vis);
  Var<T> stacked = concat_rows(vis, mask_rows);
  // permutation: row r of the output comes from stacked[where(r)]
  std::vector<int> where(hw, -1);
  for (int i = 0; i < n_vis; ++i) where[visible_idx[i]] = i;
  int next_masked = n_vis;
  for (int r = 0; r < hw; ++r)
    if (where[r] < 0) where[r] = next_masked++;
  Var<T> assembled = gather_rows(stacked, where);
  return add(assembled, ctx.p("dec.pos"));
}

template <typename T>
struct RecordVars {
  std::vector<Var<T>> head_logits;
  std::vector<Var<T>> head_probs;
  Var<T> q_query, k_query, v_query;
  Var<T> q_mem, k_mem, v_mem;
};

template <typename T>
struct DecoderOut {
  std::vector<Var<T>> layers;  // block outputs
  Var<T> final_norm;
  std::vector<RecordVars<T>> records;
  Grid2 grid;
};

template <typename T>
DecoderOut<T> decode_stream(ForwardCtx<T>& ctx, Var<T> target_stream, Var<T> memory,
                            bool record_attention, bool record_pairings = false) {
  const ModelConfig& cfg = ctx.params.config;
  DecoderOut<T> out;
  out.grid = cfg.grid();
  Var<T> x = target_stream;
  for (int i = 0; i < cfg.dec_layers; ++i) {
    std::string b = "dec.b" + std::to_string(i);
    Var<T> n1 = norm(ctx, x, b + ".ln1");
    x = add(x, multi_head_attention(ctx, n1, n1, b + ".self", cfg.n_heads).out);
    AttnVars<T> cross = multi_head_attention(ctx, norm(ctx, x, b + ".ln2"),
                                             norm(ctx, memory, b + ".lnm"), b + ".cross",
                                             cfg.n_heads, record_attention, record_pairings);
    x = add(x, cross.out);
    x = add(x, mlp(ctx, norm(ctx, x, b + ".ln3"), b + ".mlp"));
    out.layers.push_back(x);
    if (record_attention) {
      RecordVars<T> rv;
      rv.head_logits = std::move(cross.head_logits);
      rv.head_probs = std::move(cross.head_probs);
      rv.q_query = cross.q_query;
      rv.k_query = cross.k_query;
      rv.v_query = cross.v_query;
      rv.q_mem = cross.q_mem;
      rv.k_mem = cross.k_mem;
      rv.v_mem = cross.v_mem;
      out.records.push_back(std::move(rv));
    }
  }
  out.final_norm = norm(ctx, x, "dec.norm");
  return out;
}

template <typename T>
Var<T> reconstruction_values(ForwardCtx<T>& ctx, Var<T> dec_final_norm) {
  return linear(ctx, dec_final_norm, "head.recon");
}

// ---- value-level op surface ----

// Linear patch embedding + learned positional encoding, row-major order.
template <typename T>
TokenGrid<T> patchify(const Image<T>& image, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.config;
  if (cfg.image_size % cfg.patch_size != 0)
    throw DimensionError("patchify: image_size not divisible by patch_size");
  if (image.h != cfg.image_size || image.w != cfg.image_size)
    throw DimensionError("patchify: image dims do not match config.image_size");
  Mat<T> patches = image_to_patches(image, cfg.patch_size);
  TokenGrid<T> out;
  out.grid = cfg.grid();
  out.has_register = false;
  out.tokens = (patches * params.store["enc.patch.w"]).rowwise() +
               params.store["enc.patch.b"].row(0);
  out.tokens += params.store["enc.pos"];
  return out;
}

template <typename T>
std::vector<TokenGrid<T>> encode(const TokenGrid<T>& tokens, const ModelParams<T>& params,
                                 const std::vector<int>& keep_layers) {
  for (int l : keep_layers)
    if (l < 0 || l >= params.config.enc_layers) throw IndexError("encode: layer index out of range");
  if (keep_layers.empty()) return {};
  Tape<T> tape;
  ForwardCtx<T> ctx{tape, params, false};
  Var<T> x = tape.input(tokens.tokens);
  EncoderOut<T> enc = encode_tokens(ctx, x, tokens.grid, tokens.has_register);
  std::vector<TokenGrid<T>> out;
  for (int l : keep_layers)
    out.push_back(TokenGrid<T>{tape.val(enc.layers[l]), tokens.grid, tokens.has_register});
  return out;
}

namespace detail {
template <typename T>
AttentionRecord<T> extract_record(Tape<T>& tape, const RecordVars<T>& rv, int layer_index) {
  AttentionRecord<T> rec;
  rec.layer_index = layer_index;
  for (const auto& v : rv.head_logits) rec.logits.push_back(tape.val(v));
  for (const auto& v : rv.head_probs) rec.probs.push_back(tape.val(v));
  if (rv.q_query.ok()) rec.q_query = tape.val(rv.q_query);
  if (rv.k_query.ok()) rec.k_query = tape.val(rv.k_query);
  if (rv.v_query.ok()) rec.v_query = tape.val(rv.v_query);
  if (rv.q_mem.ok()) rec.q_mem = tape.val(rv.q_mem);
  if (rv.k_mem.ok()) rec.k_mem = tape.val(rv.k_mem);
  if (rv.v_mem.ok()) rec.v_mem = tape.val(rv.v_mem);
  return rec;
}
}  // namespace detail

// Raw scaled-dot attention over pre-projected streams: logits(i,j) =
// q(i).k(j)/sqrt(d_head) per head, probabilities row-softmaxed, output is
// the per-head prob-weighted value sum with heads concatenated back.
template <typename T>
std::pair<TokenGrid<T>, AttentionRecord<T>> cross_attention(const TokenGrid<T>& query,
                                                            const TokenGrid<T>& key,
                                                            const TokenGrid<T>& value,
                                                            int n_heads, int layer_index = 0) {
  if (!query.tokens.allFinite() || !key.tokens.allFinite() || !value.tokens.allFinite())
    throw NumericError("cross_attention: non-finite input");
  if (key.rows() != value.rows()) throw DimensionError("cross_attention: key/value row mismatch");
  if (query.dim() % n_heads != 0 || key.dim() % n_heads != 0 || value.dim() % n_heads != 0)
    throw DimensionError("cross_attention: dims not divisible by n_heads");
  if (query.dim() != key.dim()) throw DimensionError("cross_attention: query/key dim mismatch");

  AttentionRecord<T> rec;
  rec.layer_index = layer_index;
  int dh = query.dim() / n_heads;
  int dv = value.dim() / n_heads;
  T inv_sqrt = T(1) / std::sqrt(T(dh));
  Mat<T> out(query.rows(), value.dim());
  for (int h = 0; h < n_heads; ++h) {
    Mat<T> logits = query.tokens.middleCols(h * dh, dh) *
                    key.tokens.middleCols(h * dh, dh).transpose() * inv_sqrt;
    Mat<T> probs(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      T mx = logits.row(i).maxCoeff();
      probs.row(i) = (logits.row(i).array() - mx).exp();
      probs.row(i) /= probs.row(i).sum();
    }
    out.middleCols(h * dv, dv) = probs * value.tokens.middleCols(h * dv, dv);
    rec.logits.push_back(std::move(logits));
    rec.probs.push_back(std::move(probs));
  }
  rec.q_query = query.tokens;
  rec.k_mem = key.tokens;
  rec.v_mem = value.tokens;
  TokenGrid<T> og{std::move(out), query.grid, query.has_register};
  return {std::move(og), std::move(rec)};
}

// Runs the decoder over a prepared target stream and source features.
// Inputs of encoder width are projected (and positioned) internally; inputs
// already of decoder width are taken as-is.
template <typename T>
std::pair<std::vector<TokenGrid<T>>, std::vector<AttentionRecord<T>>> decode(
    const TokenGrid<T>& masked_target, const TokenGrid<T>& source_feats,
    const ModelParams<T>& params, const std::vector<int>& keep_layers, bool record_attention) {
  const ModelConfig& cfg = params.config;
  for (int l : keep_layers)
    if (l < 0 || l >= cfg.dec_layers) throw IndexError("decode: layer index out of range");
  if (masked_target.dim() != cfg.enc_dim && masked_target.dim() != cfg.dec_dim)
    throw DimensionError("decode: target dim matches neither encoder nor decoder width");
  if (source_feats.dim() != cfg.enc_dim && source_feats.dim() != cfg.dec_dim)
    throw DimensionError("decode: source dim matches neither encoder nor decoder width");

  Tape<T> tape;
  ForwardCtx<T> ctx{tape, params, false};
  auto prep = [&](const TokenGrid<T>& g) {
    Var<T> x = tape.input(g.tokens);
    if (g.dim() == cfg.enc_dim) x = to_decoder_space(ctx, x, g.has_register);
    return x;
  };
  Var<T> target = prep(masked_target);
  Var<T> memory = prep(source_feats);
  DecoderOut<T> dec = decode_stream(ctx, target, memory, record_attention);

  std::vector<TokenGrid<T>> feats;
  for (int l : keep_layers)
    feats.push_back(TokenGrid<T>{tape.val(dec.layers[l]), cfg.grid(), false});
  std::vector<AttentionRecord<T>> recs;
  for (size_t i = 0; i < dec.records.size(); ++i)
    recs.push_back(detail::extract_record(tape, dec.records[i], int(i)));
  return {std::move(feats), std::move(recs)};
}

// Final-norm + linear projection to patch pixels, un-patchified.
template <typename T>
Image<T> reconstruct_head(const TokenGrid<T>& decoder_out, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.config;
  if (decoder_out.dim() != cfg.dec_dim) throw DimensionError("reconstruct_head: wrong feature dim");
  Tape<T> tape;
  ForwardCtx<T> ctx{tape, params, false};
  Var<T> x = tape.input(decoder_out.tokens);
  Var<T> vals = reconstruction_values(ctx, norm(ctx, x, "dec.norm"));
  return patches_to_image(tape.val(vals), cfg.patch_size, decoder_out.grid);
}

}  // namespace crossview
