#pragma once

// Cross-view completion pretraining: mask most target tokens, encode the
// visible remainder plus the full source view, decode with cross-attention
// and regress the masked patches. Loss is masked-patch MSE, by default on
// per-patch mean/std normalized pixels.

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "crossview/autodiff.hpp"
#include "crossview/checkpoint.hpp"
#include "crossview/core.hpp"
#include "crossview/datagen.hpp"
#include "crossview/model.hpp"
#include "crossview/rng.hpp"

namespace crossview {

struct MaskSpec {
  std::vector<std::uint8_t> mask;  // true = masked
  double ratio = 0.0;

  int masked_count() const {
    int n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
  }
  std::vector<int> masked_indices() const {
    std::vector<int> v;
    for (int i = 0; i < int(mask.size()); ++i)
      if (mask[i]) v.push_back(i);
    return v;
  }
  std::vector<int> visible_indices() const {
    std::vector<int> v;
    for (int i = 0; i < int(mask.size()); ++i)
      if (!mask[i]) v.push_back(i);
    return v;
  }
};

// Exactly round(ratio*hw) tokens masked, uniformly without replacement.
inline MaskSpec sample_mask(int hw, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in (0,1)");
  int k = int(std::lround(ratio * hw));
  std::vector<int> idx(hw);
  for (int i = 0; i < hw; ++i) idx[i] = i;
  for (int i = 0; i < k; ++i) {
    int j = i + int(rng.uniform_int(0, hw - i));
    std::swap(idx[i], idx[j]);
  }
  MaskSpec spec;
  spec.ratio = ratio;
  spec.mask.assign(size_t(hw), 0);
  for (int i = 0; i < k; ++i) spec.mask[size_t(idx[i])] = 1;
  return spec;
}

enum class LossKind { NormalizedMse, Mse };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "normalized_mse") return LossKind::NormalizedMse;
  if (s == "mse") return LossKind::Mse;
  throw ConfigError("unknown loss_kind: " + s);
}

inline std::string loss_kind_to_string(LossKind k) {
  return k == LossKind::NormalizedMse ? "normalized_mse" : "mse";
}

struct TrainConfig {
  std::int64_t steps = 2000;
  int batch_size = 8;
  double learning_rate = 1.5e-4;
  double weight_decay = 0.05;
  double mask_ratio = 0.9;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_frac = 0.05;
  std::string loss_kind = "normalized_mse";
  double max_corner_shift = 0.25;
  PhotometricSpec jitter;
  int threads = 0;  // 0 = hardware default

  void validate() const {
    if (steps <= 0) throw ConfigError("steps must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0,1)");
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("steps", std::to_string(steps));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("learning_rate", std::to_string(learning_rate));
    kv.set("weight_decay", std::to_string(weight_decay));
    kv.set("mask_ratio", std::to_string(mask_ratio));
    kv.set("seed", std::to_string(seed));
    kv.set("adam_beta1", std::to_string(adam_beta1));
    kv.set("adam_beta2", std::to_string(adam_beta2));
    kv.set("adam_eps", std::to_string(adam_eps));
    kv.set("warmup_frac", std::to_string(warmup_frac));
    kv.set("loss_kind", loss_kind);
    kv.set("max_corner_shift", std::to_string(max_corner_shift));
    kv.set("jitter_brightness", std::to_string(jitter.brightness));
    kv.set("jitter_contrast", std::to_string(jitter.contrast));
    kv.set("jitter_gamma", std::to_string(jitter.gamma));
    kv.set("threads", std::to_string(threads));
    return kv;
  }

  static TrainConfig from_kv(const KvConfig& kv) {
    TrainConfig c;
    c.steps = kv.get("steps", c.steps);
    c.batch_size = kv.get("batch_size", c.batch_size);
    c.learning_rate = kv.get("learning_rate", c.learning_rate);
    c.weight_decay = kv.get("weight_decay", c.weight_decay);
    c.mask_ratio = kv.get("mask_ratio", c.mask_ratio);
    c.seed = std::uint64_t(kv.get("seed", std::int64_t(c.seed)));
    c.adam_beta1 = kv.get("adam_beta1", c.adam_beta1);
    c.adam_beta2 = kv.get("adam_beta2", c.adam_beta2);
    c.adam_eps = kv.get("adam_eps", c.adam_eps);
    c.warmup_frac = kv.get("warmup_frac", c.warmup_frac);
    c.loss_kind = kv.get("loss_kind", c.loss_kind);
    c.max_corner_shift = kv.get("max_corner_shift", c.max_corner_shift);
    c.jitter.brightness = kv.get("jitter_brightness", c.jitter.brightness);
    c.jitter.contrast = kv.get("jitter_contrast", c.jitter.contrast);
    c.jitter.gamma = kv.get("jitter_gamma", c.jitter.gamma);
    c.threads = kv.get("threads", c.threads);
    return c;
  }
};

// Target patches in loss space: raw pixels, or per-patch normalized with
// eps 1e-6 inside the sqrt.
template <typename T>
Mat<T> loss_space_patches(const Image<T>& target, int patch, LossKind kind) {
  Mat<T> m = image_to_patches(target, patch);
  if (kind == LossKind::Mse) return m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    T mu = m.row(i).mean();
    T var = (m.row(i).array() - mu).square().mean();
    m.row(i) = (m.row(i).array() - mu) / std::sqrt(var + T(1e-6));
  }
  return m;
}

// Mean squared error over masked patches only. An all-unmasked mask yields
// zero and sets the warning flag.
template <typename T>
T reconstruction_loss(const Mat<T>& pred_values, const Image<T>& target, const MaskSpec& mask,
                      LossKind kind = LossKind::NormalizedMse, bool* all_unmasked_warning = nullptr) {
  int hw = int(mask.mask.size());
  require(pred_values.rows() == hw, "reconstruction_loss: pred row count != mask size");
  int patch = int(std::lround(std::sqrt(double(pred_values.cols()) / 3.0)));
  require(patch * patch * 3 == pred_values.cols(), "reconstruction_loss: pred is not patch values");
  require(target.h * target.w == hw * patch * patch, "reconstruction_loss: target size mismatch");
  Mat<T> tgt = loss_space_patches(target, patch, kind);
  std::vector<int> midx = mask.masked_indices();
  if (midx.empty()) {
    if (all_unmasked_warning) *all_unmasked_warning = true;
    return T(0);
  }
  if (all_unmasked_warning) *all_unmasked_warning = false;
  double acc = 0;
  for (int i : midx) acc += double((pred_values.row(i) - tgt.row(i)).squaredNorm());
  return T(acc / (double(midx.size()) * double(pred_values.cols())));
}

template <typename T>
T reconstruction_loss(const Image<T>& pred, const Image<T>& target, const MaskSpec& mask,
                      LossKind kind = LossKind::NormalizedMse, bool* warn = nullptr) {
  require(pred.same_shape(target), "reconstruction_loss: image shape mismatch");
  int hw = int(mask.mask.size());
  int patch = int(std::lround(std::sqrt(double(pred.h) * pred.w / hw)));
  require(patch * patch * hw == pred.h * pred.w, "reconstruction_loss: mask does not tile image");
  return reconstruction_loss(image_to_patches(pred, patch), target, mask, kind, warn);
}

// Tape-level pretraining loss for one pair. Masked pixels never enter the
// network: the target encoder runs on visible tokens only.
template <typename T>
Var<T> build_pretrain_loss(Tape<T>& tape, const ModelParams<T>& params, const SyntheticPair<T>& pair,
                           const MaskSpec& mask, LossKind kind, bool trainable = true) {
  ForwardCtx<T> ctx{tape, params, trainable};
  const ModelConfig& cfg = params.config;
  std::vector<int> visible = mask.visible_indices();
  std::vector<int> masked = mask.masked_indices();
  require(!masked.empty(), "build_pretrain_loss: nothing to reconstruct");

  EncoderOut<T> enc_src = encode_image(ctx, pair.source, true);
  EncoderOut<T> enc_tgt = encode_image(ctx, pair.target, false, &visible);
  Var<T> memory = to_decoder_space(ctx, enc_src.final_norm, enc_src.has_register);
  Var<T> target_stream = masked_target_stream(ctx, enc_tgt.final_norm, visible);
  DecoderOut<T> dec = decode_stream(ctx, target_stream, memory, false);
  Var<T> pred = reconstruction_values(ctx, dec.final_norm);

  Mat<T> tgt = loss_space_patches(pair.target, cfg.patch_size, kind);
  Mat<T> tgt_masked(Eigen::Index(masked.size()), tgt.cols());
  for (size_t i = 0; i < masked.size(); ++i) tgt_masked.row(Eigen::Index(i)) = tgt.row(masked[i]);
  Var<T> diff = sub(gather_rows(pred, masked), tape.input(std::move(tgt_masked)));
  return mean_all(mul(diff, diff));
}

inline double lr_at_step(double base_lr, double warmup_frac, std::int64_t total, std::int64_t t) {
  std::int64_t warm = std::max<std::int64_t>(1, std::int64_t(warmup_frac * double(total)));
  if (t <= warm) return base_lr * double(t) / double(warm);
  double prog = double(t - warm) / double(std::max<std::int64_t>(1, total - warm));
  prog = std::min(1.0, prog);
  return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * prog));
}

// Decoupled weight decay applied to projection matrices (".w") only.
template <typename T>
void adamw_update(ParamStore<T>& store, const std::vector<Mat<T>>& grads, std::int64_t t,
                  double lr, double beta1, double beta2, double eps, double weight_decay) {
  store.ensure_moments();
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (size_t i = 0; i < store.count(); ++i) {
    if (grads[i].size() == 0) continue;
    Mat<T>& p = store.values[i];
    Mat<T>& m = store.opt_m[i];
    Mat<T>& v = store.opt_v[i];
    m = T(beta1) * m + T(1.0 - beta1) * grads[i];
    v = T(beta2) * v + T(1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
    bool decay = store.names[i].size() >= 2 &&
                 store.names[i].compare(store.names[i].size() - 2, 2, ".w") == 0;
    Mat<T> update = (m / T(bc1)).array() / ((v / T(bc2)).array().sqrt() + T(eps));
    if (decay && weight_decay > 0) update += T(weight_decay) * p;
    p -= T(lr) * update;
  }
}

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0;
  double grad_norm = 0;
  double wall_ms = 0;
};

// One optimizer step over a batch. Per-sample graphs run in parallel;
// gradients are reduced in sample order so results do not depend on the
// thread count.
template <typename T>
StepMetrics train_step(ModelParams<T>& params, const std::vector<SyntheticPair<T>>& batch,
                       const std::vector<MaskSpec>& masks, const TrainConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  require(batch.size() == masks.size() && !batch.empty(), "train_step: batch/mask mismatch");
  LossKind kind = loss_kind_from_string(cfg.loss_kind);
  const int n = int(batch.size());
  int threads = cfg.threads > 0 ? cfg.threads : int(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));

  std::vector<double> losses(size_t(n), 0.0);
  std::vector<std::vector<Mat<T>>> grads(size_t(n));
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string fail_msg;
  auto worker = [&]() {
    while (true) {
      int i = next.fetch_add(1);
      if (i >= n || failed.load()) break;
      try {
        Tape<T> tape;
        tape.reserve(2048);
        Var<T> loss = build_pretrain_loss(tape, params, batch[size_t(i)], masks[size_t(i)], kind);
        losses[size_t(i)] = double(tape.val(loss)(0, 0));
        tape.backward(loss);
        auto& g = grads[size_t(i)];
        g.resize(params.store.count());
        for (size_t k = 0; k < params.store.count(); ++k) g[k] = tape.slot_grad(std::int64_t(k));
      } catch (const std::exception& e) {
        failed.store(true);
        fail_msg = e.what();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failed.load()) throw TrainError("train_step: sample forward failed: " + fail_msg);

  double loss_sum = 0;
  for (double l : losses) loss_sum += l;
  double loss = loss_sum / n;
  if (!std::isfinite(loss))
    throw TrainError("train_step: non-finite loss at step " + std::to_string(params.step_counter + 1) +
                     " (loss=" + std::to_string(loss) + ")");

  std::vector<Mat<T>> total(params.store.count());
  for (int i = 0; i < n; ++i)
    for (size_t k = 0; k < params.store.count(); ++k) {
      if (grads[size_t(i)][k].size() == 0) continue;
      if (total[k].size() == 0)
        total[k] = grads[size_t(i)][k];
      else
        total[k] += grads[size_t(i)][k];
    }
  double gn2 = 0;
  for (auto& g : total)
    if (g.size()) {
      g /= T(n);
      gn2 += double(g.squaredNorm());
    }

  std::int64_t t = ++params.step_counter;
  double lr = lr_at_step(cfg.learning_rate, cfg.warmup_frac, cfg.steps, t);
  adamw_update(params.store, total, t, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
               cfg.weight_decay);

  StepMetrics m;
  m.step = t;
  m.loss = loss;
  m.grad_norm = std::sqrt(gn2);
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

// Pair and mask for a given training step index are pure functions of the
// config seed, which is what makes interrupted runs resumable bit-exactly.
template <typename T>
SyntheticPair<T> training_pair(const TrainConfig& cfg, const ModelConfig& mc, std::int64_t step,
                               int sample) {
  Rng r = Rng(cfg.seed).split(std::uint64_t(step) * 1000003ULL + std::uint64_t(sample));
  Rng r_shift = r.split(1), r_base = r.split(2), r_h = r.split(3), r_j = r.split(4);
  PerturbRanges ranges;
  ranges.width = ranges.height = mc.image_size;
  ranges.max_corner_shift = r_shift.uniform(0.0, cfg.max_corner_shift);
  Image<T> base = generate_base_image<T>(r_base, mc.image_size);
  HomographySpec H = sample_homography(r_h, ranges);
  SyntheticPair<T> pair = render_pair(base, H, cfg.jitter, r_j);
  pair.pair_id = "train_" + std::to_string(step) + "_" + std::to_string(sample);
  return pair;
}

inline MaskSpec training_mask(const TrainConfig& cfg, int hw, std::int64_t step, int sample) {
  Rng r = Rng(cfg.seed ^ 0x6D61736BULL).split(std::uint64_t(step) * 1000033ULL + std::uint64_t(sample));
  return sample_mask(hw, cfg.mask_ratio, r);
}

// Runs steps [params.step_counter, until); appends metrics CSV if a path is
// given. Returns the metrics of every executed step.
template <typename T>
std::vector<StepMetrics> run_pretraining(ModelParams<T>& params, const TrainConfig& cfg,
                                         std::int64_t until, const std::string& metrics_csv = "",
                                         bool quiet = true) {
  cfg.validate();
  std::ofstream csv;
  if (!metrics_csv.empty()) {
    bool fresh = !std::ifstream(metrics_csv).good();
    csv.open(metrics_csv, std::ios::app);
    if (fresh) csv << "step,loss,grad_norm,wall_ms\n";
  }
  std::vector<StepMetrics> history;
  while (params.step_counter < until) {
    std::int64_t step = params.step_counter;  // 0-based data index for the upcoming step
    std::vector<SyntheticPair<T>> batch;
    std::vector<MaskSpec> masks;
    for (int i = 0; i < cfg.batch_size; ++i) {
      batch.push_back(training_pair<T>(cfg, params.config, step, i));
      masks.push_back(training_mask(cfg, params.config.tokens(), step, i));
    }
    StepMetrics m = train_step(params, batch, masks, cfg);
    params.rng_state = std::uint64_t(params.step_counter);
    if (csv.is_open()) {
      csv << m.step << ',' << m.loss << ',' << m.grad_norm << ',' << std::llround(m.wall_ms) << '\n';
      csv.flush();
    }
    if (!quiet && (m.step % 50 == 0 || m.step == 1))
      std::fprintf(stderr, "step %lld loss %.5f grad %.4f (%.0f ms)\n", (long long)m.step, m.loss,
                   m.grad_norm, m.wall_ms);
    history.push_back(m);
  }
  return history;
}

}  // namespace crossview
