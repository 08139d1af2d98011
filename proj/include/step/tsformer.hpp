#pragma once

// Masked-autoencoding pre-training model for long time series.
//
// A window of P patches (each L steps × C channels) is linearly embedded,
// learnable positional embeddings are added to every patch, and a random
// subset of round(r·P) patches is hidden. The encoder (pre-norm Transformer
// blocks) sees only the visible patches. The decoder sees the full sequence:
// encoder outputs at visible slots and a shared mask token plus the slot's
// positional embedding at hidden slots, followed by one Transformer block and
// an MLP head back to L·C values. The loss is the mean absolute error on the
// hidden patches only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "step/checkpoint.hpp"
#include "step/data.hpp"
#include "step/error.hpp"
#include "step/io.hpp"
#include "step/nn.hpp"
#include "step/optim.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"

namespace step::tsformer {

struct TSFormerConfig {
  std::size_t L = 12;  ///< patch length
  std::size_t P = 168;  ///< patches per window
  double r = 0.75;  ///< masking ratio
  std::size_t d = 96;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 1;
  std::size_t heads = 4;
  std::size_t C = 1;

  void validate() const {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("tsformer: masking ratio must lie in (0, 1)");
    if (L == 0 || P == 0 || C == 0 || d == 0) throw ConfigError("tsformer: L, P, C and d must be positive");
    if (heads == 0 || d % heads != 0) throw ConfigError("tsformer: d must be divisible by heads");
    if (enc_layers == 0 || dec_layers == 0) throw ConfigError("tsformer: need at least one encoder and decoder layer");
  }

  json to_json() const {
    return {{"L", L}, {"P", P}, {"r", r}, {"d", d}, {"enc_layers", enc_layers},
            {"dec_layers", dec_layers}, {"heads", heads}, {"C", C}};
  }
  /// Starts from defaults; absent keys keep them, unknown keys are rejected.
  static TSFormerConfig from_json(const json& j) {
    const std::string where = "tsformer config";
    io::check_keys(j, {"L", "P", "r", "d", "enc_layers", "dec_layers", "heads", "C"}, where);
    TSFormerConfig c;
    io::read_key(j, "L", c.L, where);
    io::read_key(j, "P", c.P, where);
    io::read_key(j, "r", c.r, where);
    io::read_key(j, "d", c.d, where);
    io::read_key(j, "enc_layers", c.enc_layers, where);
    io::read_key(j, "dec_layers", c.dec_layers, where);
    io::read_key(j, "heads", c.heads, where);
    io::read_key(j, "C", c.C, where);
    return c;
  }
  std::uint64_t hash() const { return io::fnv1a64(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Hidden and visible patch positions (0-based, each sorted ascending).
struct MaskSpec {
  std::vector<std::size_t> masked, unmasked;
  std::size_t P() const { return masked.size() + unmasked.size(); }
};

/// round(r·P) with halves rounded up.
inline std::size_t mask_count(std::size_t P, double r) {
  return static_cast<std::size_t>(std::floor(r * static_cast<double>(P) + 0.5 + 1e-9));
}

inline MaskSpec sample_mask(Rng& rng, std::size_t P, double r) {
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("sample_mask: masking ratio must lie in (0, 1)");
  const std::size_t k = mask_count(P, r);
  if (k == 0 || k >= P) {
    throw ConfigError("sample_mask: round(r·P) = " + std::to_string(k) + " leaves no masked or no visible patch");
  }
  std::vector<std::size_t> idx(P);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  MaskSpec m;
  m.masked.assign(idx.begin(), idx.begin() + static_cast<long>(k));
  m.unmasked.assign(idx.begin() + static_cast<long>(k), idx.end());
  std::sort(m.masked.begin(), m.masked.end());
  std::sort(m.unmasked.begin(), m.unmasked.end());
  return m;
}

inline MaskSpec no_mask(std::size_t P) {
  MaskSpec m;
  m.unmasked.resize(P);
  std::iota(m.unmasked.begin(), m.unmasked.end(), 0);
  return m;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class TSFormer {
 public:
  TSFormer(const TSFormerConfig& cfg, Rng& rng) : config_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d;
    embed_ = nn::Linear(params_, "embed", cfg.L * cfg.C, d, rng);
    pos_ = params_.add("pos_embedding", nn::uniform_tensor(rng, {cfg.P, d}, 0.02));
    Tensor mt({d});
    for (double& v : mt.data) v = rng.truncated_normal(0.0, 0.02, 2.0);
    mask_token_ = params_.add("mask_token", std::move(mt));
    for (std::size_t i = 0; i < cfg.enc_layers; ++i)
      encoder_.emplace_back(params_, "encoder." + std::to_string(i), d, cfg.heads, rng);
    enc_norm_ = nn::LayerNorm(params_, "encoder.norm", d);
    for (std::size_t i = 0; i < cfg.dec_layers; ++i)
      decoder_.emplace_back(params_, "decoder." + std::to_string(i), d, cfg.heads, rng);
    dec_norm_ = nn::LayerNorm(params_, "decoder.norm", d);
    head_ = nn::Mlp(params_, "head", d, d, cfg.L * cfg.C, rng);
  }

  TSFormer(const TSFormer&) = delete;
  TSFormer& operator=(const TSFormer&) = delete;

  const TSFormerConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  Var& pos_embedding() { return pos_; }
  const Var& pos_embedding() const { return pos_; }
  Var& mask_token() { return mask_token_; }
  nn::Linear& embedding() { return embed_; }

  /// Sequence length seen by the encoder on the most recent encode() call.
  std::size_t last_encoder_length() const { return last_encoder_length_; }

  /// U_j = W·S_j + b for every patch. patches: [B, P, L·C] → [B, P, d].
  Var embed_patches(const Var& patches) const {
    const auto& s = patches.shape();
    if (s.size() != 3 || s[1] != config_.P || s[2] != config_.L * config_.C) {
      throw ShapeError("embed_patches: expected [B," + std::to_string(config_.P) + "," +
                       std::to_string(config_.L * config_.C) + "], got " + to_string(s));
    }
    return embed_(patches);
  }

  /// Adds positional embeddings to all patches, keeps the visible rows in
  /// order and runs the encoder stack. U: [B, P, d] → [B, |unmasked|, d].
  Var encode(const Var& U, const MaskSpec& mask) const {
    if (mask.unmasked.empty()) throw ConfigError("encode: no visible patches");
    if (mask.P() != config_.P) throw ShapeError("encode: mask covers " + std::to_string(mask.P()) + " patches");
    Var x = index_select(add_row(U, pos_), 1, mask.unmasked);
    last_encoder_length_ = x.dim(1);
    for (const auto& block : encoder_) x = block(x);
    return enc_norm_(x);
  }

  /// Rebuilds the full sequence (encoder outputs at visible slots, mask token +
  /// positional embedding at hidden slots), runs the decoder and maps every
  /// slot back to L·C values. H: [B, |unmasked|, d] → [B, P, L·C].
  Var decode(const Var& H, const MaskSpec& mask) const {
    const std::size_t B = H.dim(0), d = config_.d;
    if (H.dim(1) != mask.unmasked.size()) throw ShapeError("decode: hidden rows do not match visible patch count");
    Var full = H;
    if (!mask.masked.empty()) {
      Var tokens = add_row(index_select(pos_, 0, mask.masked), mask_token_);  // [n_m, d]
      Var batch_tokens =
          index_select(reshape(tokens, {1, mask.masked.size(), d}), 0, std::vector<std::size_t>(B, 0));
      full = concat({H, batch_tokens}, 1);
    }
    // Slot order after concat is (unmasked..., masked...); restore positional order.
    std::vector<std::size_t> order(config_.P);
    for (std::size_t k = 0; k < mask.unmasked.size(); ++k) order[mask.unmasked[k]] = k;
    for (std::size_t k = 0; k < mask.masked.size(); ++k) order[mask.masked[k]] = mask.unmasked.size() + k;
    if (full.dim(1) != config_.P) throw Error("decode: slot assembly produced the wrong length");
    Var x = index_select(full, 1, order);
    for (const auto& block : decoder_) x = block(x);
    return head_(dec_norm_(x));
  }

  /// All patches visible. patches: [B, P, L·C] → [B, P, d].
  Var encode_full(const Var& patches) const { return encode(embed_patches(patches), no_mask(config_.P)); }

  /// Masked reconstruction for a batch. patches: [B, P, L·C] → [B, P, L·C].
  Var reconstruct(const Var& patches, const MaskSpec& mask) const {
    return decode(encode(embed_patches(patches), mask), mask);
  }

 private:
  TSFormerConfig config_;
  nn::ParamStore params_;
  nn::Linear embed_;
  Var pos_, mask_token_;
  std::vector<nn::TransformerBlock> encoder_;
  nn::LayerNorm enc_norm_;
  std::vector<nn::TransformerBlock> decoder_;
  nn::LayerNorm dec_norm_;
  nn::Mlp head_;
  mutable std::size_t last_encoder_length_ = 0;
};

/// Mean |Ŝ − S| over the hidden patches and all their L·C entries.
/// Inputs: [B, P, L·C].
inline Var reconstruction_loss(const Var& recon, const Var& target, const MaskSpec& mask) {
  if (recon.shape() != target.shape()) {
    throw ShapeError("reconstruction_loss: shape mismatch " + to_string(recon.shape()) + " vs " +
                     to_string(target.shape()));
  }
  if (mask.masked.empty()) throw ConfigError("reconstruction_loss: empty mask");
  return mean(abs(sub(index_select(recon, 1, mask.masked), index_select(target, 1, mask.masked))));
}

/// Stacks windows into one [B, P, L·C] tensor.
inline Tensor stack_windows(const std::vector<const data::PatchWindow*>& ws) {
  if (ws.empty()) throw ConfigError("stack_windows: empty batch");
  const Shape& s = ws[0]->patches.shape;
  Tensor out({ws.size(), s[0], s[1]});
  for (std::size_t b = 0; b < ws.size(); ++b)
    std::copy(ws[b]->patches.data.begin(), ws[b]->patches.data.end(),
              out.data.begin() + static_cast<long>(b * s[0] * s[1]));
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct PretrainSettings {
  std::size_t epochs = 100;
  std::size_t batch_starts = 1;  ///< window start times per batch; each contributes one window per node
  double base_lr = 5.0e-4;  ///< scaled by (batch windows / 8)
  double weight_decay = 0.0;
  double eps = 1.0e-8;
  double beta1 = 0.9, beta2 = 0.95;
  std::vector<std::size_t> milestones{50};
  double gamma = 0.5;
  double clip = 5.0;
  std::size_t stride = 0;  ///< window stride; 0 means L
  std::uint64_t val_mask_seed = 12345;

  json to_json() const {
    return {{"epochs", epochs}, {"batch_starts", batch_starts}, {"base_lr", base_lr},
            {"weight_decay", weight_decay}, {"eps", eps}, {"beta1", beta1}, {"beta2", beta2},
            {"milestones", milestones}, {"gamma", gamma}, {"clip", clip}, {"stride", stride},
            {"val_mask_seed", val_mask_seed}};
  }

  static PretrainSettings from_json(const json& j) {
    const std::string where = "pretrain settings";
    io::check_keys(j, {"epochs", "batch_starts", "base_lr", "weight_decay", "eps", "beta1", "beta2", "milestones",
                       "gamma", "clip", "stride", "val_mask_seed"},
                   where);
    PretrainSettings s;
    io::read_key(j, "epochs", s.epochs, where);
    io::read_key(j, "batch_starts", s.batch_starts, where);
    io::read_key(j, "base_lr", s.base_lr, where);
    io::read_key(j, "weight_decay", s.weight_decay, where);
    io::read_key(j, "eps", s.eps, where);
    io::read_key(j, "beta1", s.beta1, where);
    io::read_key(j, "beta2", s.beta2, where);
    io::read_key(j, "milestones", s.milestones, where);
    io::read_key(j, "gamma", s.gamma, where);
    io::read_key(j, "clip", s.clip, where);
    io::read_key(j, "stride", s.stride, where);
    io::read_key(j, "val_mask_seed", s.val_mask_seed, where);
    return s;
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

struct PretrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  ///< 0 when no epoch ran (checkpoint = initialization)
};

namespace detail {

/// Groups windows (ordered start-major, node-minor) into batches of
/// `starts_per_batch` consecutive starts, in the given start order.
inline std::vector<std::vector<const data::PatchWindow*>> batches_by_start(
    const std::vector<data::PatchWindow>& ws, std::size_t nodes, const std::vector<std::size_t>& start_order,
    std::size_t starts_per_batch) {
  std::vector<std::vector<const data::PatchWindow*>> out;
  for (std::size_t i = 0; i < start_order.size(); i += starts_per_batch) {
    std::vector<const data::PatchWindow*> b;
    for (std::size_t k = i; k < std::min(start_order.size(), i + starts_per_batch); ++k)
      for (std::size_t n = 0; n < nodes; ++n) b.push_back(&ws[start_order[k] * nodes + n]);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace detail

/// Mean masked reconstruction loss over `windows` with masks drawn from a
/// generator seeded with `mask_seed` (one mask per batch of one start).
inline double evaluate_reconstruction(const TSFormer& model, const std::vector<data::PatchWindow>& windows,
                                      std::size_t nodes, std::uint64_t mask_seed) {
  if (windows.empty()) return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard ng;
  Rng rng(mask_seed);
  std::vector<std::size_t> order(windows.size() / nodes);
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : detail::batches_by_start(windows, nodes, order, 1)) {
    const MaskSpec mask = sample_mask(rng, model.config().P, model.config().r);
    Var x(stack_windows(batch));
    total += reconstruction_loss(model.reconstruct(x, mask), x, mask).item() * static_cast<double>(batch.size());
    count += batch.size();
  }
  return total / static_cast<double>(count);
}

/// Trains `model` in place on windows of the normalized dataset. The model
/// ends holding the parameters of the epoch with the lowest validation loss
/// (training loss when the split yields no validation windows).
inline PretrainResult pretrain(TSFormer& model, const data::RawDataset& ds, const data::SplitSpec& split,
                               const PretrainSettings& st, std::uint64_t seed,
                               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const auto& cfg = model.config();
  if (ds.C != cfg.C) throw ConfigError("pretrain: dataset channel count differs from model C");
  const std::size_t stride = st.stride ? st.stride : cfg.L;
  const auto train = data::make_pretrain_windows(ds, split.train_range, cfg.P, cfg.L, stride);
  std::vector<data::PatchWindow> val;
  if (split.val_range.size() >= cfg.P * cfg.L) {
    val = data::make_pretrain_windows(ds, split.val_range, cfg.P, cfg.L, stride);
  } else if (split.val_range.size() > 0 && split.val_range.end >= cfg.P * cfg.L) {
    val = data::make_pretrain_windows(ds, split.val_range, cfg.P, cfg.L, stride, data::WindowPolicy::kEndInSplit);
  }
  const std::size_t n_starts = train.size() / ds.N;
  const std::size_t batch_windows = std::max<std::size_t>(1, st.batch_starts) * ds.N;
  optim::LrSchedule sched{st.base_lr * static_cast<double>(batch_windows) / 8.0, st.milestones, st.gamma};
  optim::AdamSettings adam{sched.base, st.beta1, st.beta2, st.eps, st.weight_decay};
  optim::OptimizerState opt;
  auto params = model.params().vars();

  Rng rng(seed);
  Rng shuffle_rng = rng.split(1);
  Rng mask_rng = rng.split(2);

  PretrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_values;
  for (std::size_t epoch = 0; epoch < st.epochs; ++epoch) {
    adam.lr = optim::lr_at(sched, epoch);
    std::vector<std::size_t> order(n_starts);
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    double total = 0.0;
    std::size_t count = 0, batch_no = 0;
    for (const auto& batch : detail::batches_by_start(train, ds.N, order, std::max<std::size_t>(1, st.batch_starts))) {
      const MaskSpec mask = sample_mask(mask_rng, cfg.P, cfg.r);
      Var x(stack_windows(batch));
      model.params().zero_grad();
      Var loss = reconstruction_loss(model.reconstruct(x, mask), x, mask);
      if (!std::isfinite(loss.item())) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_no));
      }
      loss.backward();
      optim::clip_gradients(params, st.clip);
      optim::adamw_step(opt, params, adam);
      total += loss.item() * static_cast<double>(batch.size());
      count += batch.size();
      ++batch_no;
    }
    EpochLog log{epoch + 1, adam.lr, total / static_cast<double>(std::max<std::size_t>(count, 1)), std::nullopt};
    if (!val.empty()) log.val_loss = evaluate_reconstruction(model, val, ds.N, st.val_mask_seed);
    const double score = log.val_loss.value_or(log.train_loss);
    if (score < best) {
      best = score;
      result.best_epoch = epoch + 1;
      best_values.clear();
      for (const auto& [n, v] : model.params().entries()) best_values.push_back(v.value());
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (!best_values.empty()) {
    auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].second.mutable_value() = best_values[i];
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline json checkpoint_meta(const TSFormer& model, std::uint64_t seed, std::size_t epoch) {
  return {{"kind", "tsformer"},
          {"config", model.config().to_json()},
          {"config_hash", io::hex64(model.config().hash())},
          {"params_hash", io::hex64(checkpoint::params_hash(model.params()))},
          {"seed", seed},
          {"epoch", epoch}};
}

inline void save_checkpoint(const std::filesystem::path& path, const TSFormer& model, std::uint64_t seed,
                            std::size_t epoch) {
  checkpoint::save(path, model.params(), checkpoint_meta(model, seed, epoch));
}

/// Rebuilds a model from a checkpoint file.
inline std::unique_ptr<TSFormer> load_checkpoint(const std::filesystem::path& path) {
  auto ck = checkpoint::load(path);
  if (ck.meta.value("kind", "") != "tsformer") throw IoError("checkpoint '" + path.string() + "' is not a TSFormer", 0);
  Rng rng(0);
  auto model = std::make_unique<TSFormer>(TSFormerConfig::from_json(ck.meta.at("config")), rng);
  checkpoint::assign(model->params(), ck);
  return model;
}

// ---------------------------------------------------------------------------
// Representation bank
// ---------------------------------------------------------------------------

/// Encoder outputs for every patch of every node for a set of window starts,
/// stored at float32 precision. Representations computed on the fly are
/// rounded the same way, so cached and inline paths agree bit for bit.
class RepresentationBank {
 public:
  RepresentationBank() = default;
  RepresentationBank(std::size_t N, std::size_t P, std::size_t d, std::uint64_t config_hash,
                     std::uint64_t params_hash)
      : N_(N), P_(P), d_(d), config_hash_(config_hash), params_hash_(params_hash) {}

  std::size_t N() const { return N_; }
  std::size_t P() const { return P_; }
  std::size_t d() const { return d_; }
  std::uint64_t config_hash() const { return config_hash_; }
  std::uint64_t params_hash() const { return params_hash_; }
  const std::vector<std::size_t>& starts() const { return starts_; }
  bool contains(std::size_t start) const { return index_of(start).has_value(); }

  void insert(std::size_t start, const Tensor& reps /* [N, P, d] */) {
    if (reps.shape != Shape{N_, P_, d_}) throw ShapeError("bank: representation block has shape " + to_string(reps.shape));
    if (!starts_.empty() && start <= starts_.back()) throw ConfigError("bank: starts must be inserted in increasing order");
    starts_.push_back(start);
    for (double v : reps.data) values_.push_back(static_cast<float>(v));
  }

  /// [N, P, d] block for a window start.
  Tensor block(std::size_t start) const {
    auto k = index_of(start);
    if (!k) throw StaleCacheError("bank: no representations for window start " + std::to_string(start));
    const std::size_t sz = N_ * P_ * d_;
    Tensor out({N_, P_, d_});
    for (std::size_t i = 0; i < sz; ++i) out.data[i] = values_[*k * sz + i];
    return out;
  }

  /// Verifies provenance against the model about to consume the bank.
  void check_provenance(std::uint64_t config_hash, std::uint64_t params_hash) const {
    if (config_hash != config_hash_ || params_hash != params_hash_) {
      throw StaleCacheError("bank: representations were produced by config " + io::hex64(config_hash_) +
                            " / checkpoint " + io::hex64(params_hash_) + ", expected " + io::hex64(config_hash) +
                            " / " + io::hex64(params_hash));
    }
  }

  io::Bytes encode() const {
    json idx = {{"N", N_}, {"P", P_}, {"d", d_}, {"config_hash", io::hex64(config_hash_)},
                {"params_hash", io::hex64(params_hash_)}, {"starts", starts_}};
    const std::string h = idx.dump();
    io::Bytes out;
    io::put_bytes(out, "STRB");
    out.push_back(1);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
    io::put_bytes(out, h);
    for (float v : values_) io::put_le<float>(out, v);
    return out;
  }

  static RepresentationBank decode(const io::Bytes& b) {
    if (b.size() < 9 || std::string(b.begin(), b.begin() + 4) != "STRB") throw IoError("bank: magic mismatch", 0);
    if (b[4] != 1) throw IoError("bank: unsupported version", 4);
    const auto hlen = io::get_le<std::uint32_t>(b, 5);
    if (9 + static_cast<std::uint64_t>(hlen) > b.size()) throw IoError("bank: truncated index", b.size());
    json idx = json::parse(b.begin() + 9, b.begin() + 9 + hlen);
    RepresentationBank bank(idx.at("N"), idx.at("P"), idx.at("d"),
                            std::stoull(idx.at("config_hash").get<std::string>(), nullptr, 16),
                            std::stoull(idx.at("params_hash").get<std::string>(), nullptr, 16));
    bank.starts_ = idx.at("starts").get<std::vector<std::size_t>>();
    const std::size_t n = bank.starts_.size() * bank.N_ * bank.P_ * bank.d_;
    const std::size_t payload = 9 + hlen;
    if (b.size() != payload + 4 * n) throw IoError("bank: payload size mismatch", b.size());
    bank.values_.resize(n);
    for (std::size_t i = 0; i < n; ++i) bank.values_[i] = io::get_le<float>(b, payload + 4 * i);
    return bank;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, encode()); }
  static RepresentationBank load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

  bool operator==(const RepresentationBank&) const = default;

 private:
  std::optional<std::size_t> index_of(std::size_t start) const {
    auto it = std::lower_bound(starts_.begin(), starts_.end(), start);
    if (it == starts_.end() || *it != start) return std::nullopt;
    return static_cast<std::size_t>(it - starts_.begin());
  }

  std::size_t N_ = 0, P_ = 0, d_ = 0;
  std::uint64_t config_hash_ = 0, params_hash_ = 0;
  std::vector<std::size_t> starts_;
  std::vector<float> values_;
};

/// Mask-free encoder outputs for all nodes of the window starting at `start`,
/// rounded to float32. Returns [N, P, d].
inline Tensor represent_window(const TSFormer& model, const data::RawDataset& ds, std::size_t start) {
  const auto& cfg = model.config();
  NoGradGuard ng;
  Tensor x({ds.N, cfg.P, cfg.L * ds.C});
  for (std::size_t n = 0; n < ds.N; ++n) {
    Tensor p = data::extract_patches(ds, n, start, cfg.P, cfg.L);
    std::copy(p.data.begin(), p.data.end(), x.data.begin() + static_cast<long>(n * p.numel()));
  }
  Tensor h = model.encode_full(Var(std::move(x))).value();
  for (double& v : h.data) v = static_cast<double>(static_cast<float>(v));
  return h;
}

/// Encodes every window start in `starts` (deduplicated, ascending).
inline RepresentationBank precompute_representations(const TSFormer& model, const data::RawDataset& ds,
                                                     std::vector<std::size_t> starts) {
  std::sort(starts.begin(), starts.end());
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
  const auto& cfg = model.config();
  RepresentationBank bank(ds.N, cfg.P, cfg.d, cfg.hash(), checkpoint::params_hash(model.params()));
  for (std::size_t s : starts) bank.insert(s, represent_window(model, ds, s));
  return bank;
}

}  // namespace step::tsformer
