#include "tokendrop/model.hpp"

#include <cmath>

#include "tokendrop/error.hpp"

namespace tokendrop {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ffn == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (max_length < 2) throw ConfigError("max_length must be at least 2");
}

namespace {

void add_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionParams& p) {
  out.push_back({prefix + ".wq", p.wq});
  out.push_back({prefix + ".bq", p.bq});
  out.push_back({prefix + ".wk", p.wk});
  out.push_back({prefix + ".wv", p.wv});
  out.push_back({prefix + ".bv", p.bv});
  out.push_back({prefix + ".wo", p.wo});
  out.push_back({prefix + ".bo", p.bo});
}

void add_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FeedForwardParams& p) {
  out.push_back({prefix + ".w1", p.w1});
  out.push_back({prefix + ".b1", p.b1});
  out.push_back({prefix + ".w2", p.w2});
  out.push_back({prefix + ".b2", p.b2});
}

void add_norm(std::vector<NamedTensor>& out, const std::string& prefix, const NormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

}  // namespace

std::vector<NamedTensor> ModelParameters::named() const {
  std::vector<NamedTensor> all;
  all.push_back({"source_embedding", source_embedding});
  all.push_back({"target_embedding", target_embedding});
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    add_attention(all, p + ".self_attn", encoder[l].self_attn);
    add_norm(all, p + ".attn_norm", encoder[l].attn_norm);
    add_ffn(all, p + ".ffn", encoder[l].ffn);
    add_norm(all, p + ".ffn_norm", encoder[l].ffn_norm);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    add_attention(all, p + ".self_attn", decoder[l].self_attn);
    add_norm(all, p + ".self_norm", decoder[l].self_norm);
    add_attention(all, p + ".cross_attn", decoder[l].cross_attn);
    add_norm(all, p + ".cross_norm", decoder[l].cross_norm);
    add_ffn(all, p + ".ffn", decoder[l].ffn);
    add_norm(all, p + ".ffn_norm", decoder[l].ffn_norm);
  }
  all.push_back({"output_weight", output_weight});
  all.push_back({"output_bias", output_bias});
  all.push_back({"rtd_weight", rtd_weight});
  all.push_back({"rtd_bias", rtd_bias});
  all.push_back({"dtp_projection", dtp_projection});

  std::vector<NamedTensor> unique;
  for (auto& entry : all) {
    bool seen = false;
    for (const auto& u : unique) seen = seen || u.tensor.shares_storage(entry.tensor);
    if (!seen) unique.push_back(std::move(entry));
  }
  return unique;
}

std::size_t ModelParameters::count() const {
  std::size_t n = 0;
  for (const auto& p : named()) n += p.tensor.size();
  return n;
}

std::size_t parameter_count(const ModelConfig& config, std::size_t source_vocab,
                            std::size_t target_vocab) {
  return Transformer(config, source_vocab, target_vocab, 0).params().count();
}

Tensor positional_encoding(std::size_t length, std::size_t d_model, std::size_t offset) {
  std::vector<double> pe(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle = static_cast<double>(pos + offset) /
                           std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe[pos * d_model + i] = std::sin(angle);
      if (i + 1 < d_model) pe[pos * d_model + i + 1] = std::cos(angle);
    }
  }
  return Tensor({length, d_model}, std::move(pe));
}

namespace {

Tensor normal_init(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor({rows, cols}, std::move(v), true);
}

Tensor xavier_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * a;
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_param(std::size_t n) { return Tensor::full({n}, 1.0, true); }

AttentionParams make_attention(Rng& rng, std::size_t d) {
  AttentionParams p;
  p.wq = xavier_init(rng, d, d);
  p.bq = zeros_param(d);
  p.wk = xavier_init(rng, d, d);
  p.wv = xavier_init(rng, d, d);
  p.bv = zeros_param(d);
  p.wo = xavier_init(rng, d, d);
  p.bo = zeros_param(d);
  return p;
}

FeedForwardParams make_ffn(Rng& rng, std::size_t d, std::size_t f) {
  return {xavier_init(rng, d, f), zeros_param(f), xavier_init(rng, f, d), zeros_param(d)};
}

NormParams make_norm(std::size_t d) { return {ones_param(d), zeros_param(d)}; }

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(tape, matmul(tape, x, w), b);
}

}  // namespace

Transformer::Transformer(ModelConfig config, std::size_t source_vocab, std::size_t target_vocab,
                         std::uint64_t init_seed)
    : config_(std::move(config)), source_vocab_(source_vocab), target_vocab_(target_vocab) {
  config_.validate();
  if (source_vocab <= kNumSpecials || target_vocab <= kNumSpecials) {
    throw ConfigError("vocabularies must contain content tokens beyond the specials");
  }
  if (config_.shared_vocab && source_vocab != target_vocab) {
    throw ConfigError("shared_vocab requires equal source and target vocabulary sizes");
  }
  const std::size_t d = config_.d_model;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double head_std = 0.02;
  Rng rng(init_seed);

  auto& p = params_;
  p.source_embedding = normal_init(rng, source_vocab, d, embed_std);
  p.target_embedding =
      config_.shared_vocab ? p.source_embedding : normal_init(rng, target_vocab, d, embed_std);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    EncoderLayerParams layer;
    layer.self_attn = make_attention(rng, d);
    layer.attn_norm = make_norm(d);
    layer.ffn = make_ffn(rng, d, config_.d_ffn);
    layer.ffn_norm = make_norm(d);
    p.encoder.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    DecoderLayerParams layer;
    layer.self_attn = make_attention(rng, d);
    layer.self_norm = make_norm(d);
    layer.cross_attn = make_attention(rng, d);
    layer.cross_norm = make_norm(d);
    layer.ffn = make_ffn(rng, d, config_.d_ffn);
    layer.ffn_norm = make_norm(d);
    p.decoder.push_back(std::move(layer));
  }
  p.output_weight =
      config_.tie_output ? p.target_embedding : normal_init(rng, target_vocab, d, head_std);
  p.output_bias = zeros_param(target_vocab);
  p.rtd_weight = normal_init(rng, d, 1, head_std);
  p.rtd_bias = zeros_param(1);
  p.dtp_projection =
      config_.tie_dtp ? p.source_embedding : normal_init(rng, source_vocab, d, embed_std);
}

void Transformer::check_length(std::size_t length) const {
  if (length > config_.max_length) {
    throw DimensionError("sequence length " + std::to_string(length) + " exceeds max_length " +
                         std::to_string(config_.max_length));
  }
}

Embedded Transformer::embed(Tape& tape, const Tensor& table, const IdMatrix& ids,
                            const BitMatrix& mask, DropStrategy strategy,
                            std::size_t position_offset) const {
  if (mask.rows != ids.rows || mask.cols != ids.cols) {
    throw DimensionError("embedding mask shape does not match ids");
  }
  check_length(position_offset + ids.cols);
  const double word_scale = std::sqrt(static_cast<double>(config_.d_model));
  std::vector<double> factors(ids.data.size(), word_scale);
  if (strategy == DropStrategy::ZeroOut) {
    for (std::size_t i = 0; i < factors.size(); ++i)
      if (mask.data[i]) factors[i] = 0.0;
  }
  Embedded out;
  out.word = scale_rows(tape, gather_rows(tape, table, ids.data), factors);

  const Tensor pe = positional_encoding(ids.cols, config_.d_model, position_offset);
  std::vector<double> tiled(ids.data.size() * config_.d_model);
  for (std::size_t r = 0; r < ids.rows; ++r) {
    std::copy(pe.data().begin(), pe.data().end(),
              tiled.begin() + static_cast<std::ptrdiff_t>(r * ids.cols * config_.d_model));
  }
  out.output = add(tape, out.word, Tensor({ids.data.size(), config_.d_model}, std::move(tiled)));
  return out;
}

Tensor Transformer::attention_block(Tape& tape, const AttentionParams& p, const Tensor& queries,
                                    const Tensor& keys_values, const AttentionLayout& layout,
                                    const std::vector<std::uint8_t>& key_valid) const {
  const Tensor q = linear(tape, queries, p.wq, p.bq);
  const Tensor k = matmul(tape, keys_values, p.wk);
  const Tensor v = linear(tape, keys_values, p.wv, p.bv);
  const Tensor heads = attention(tape, q, k, v, layout, key_valid);
  return linear(tape, heads, p.wo, p.bo);
}

Tensor Transformer::feed_forward(Tape& tape, const FeedForwardParams& p, const Tensor& x) const {
  return linear(tape, relu(tape, linear(tape, x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor Transformer::residual_norm(Tape& tape, const Tensor& x, const Tensor& sublayer,
                                  const NormParams& norm, const ForwardContext& ctx) const {
  Tensor s = sublayer;
  if (ctx.training && config_.dropout > 0.0) s = dropout(tape, s, config_.dropout, *ctx.rng);
  return layer_norm(tape, add(tape, x, s), norm.gain, norm.bias);
}

EncodedBatch Transformer::encode(Tape& tape, const CorruptedBatch& source,
                                 const ForwardContext& ctx) const {
  if (ctx.training && config_.dropout > 0.0 && ctx.rng == nullptr) {
    throw ContractError("training-mode forward needs an rng for dropout");
  }
  const auto& ids = source.corrupted_ids;
  EncodedBatch enc;
  enc.batch = ids.rows;
  enc.length = ids.cols;
  enc.key_valid.resize(ids.data.size());
  for (std::size_t i = 0; i < ids.data.size(); ++i) {
    enc.key_valid[i] = source.original_ids.data[i] != kPadId ? 1 : 0;
  }
  Tensor x = embed(tape, params_.source_embedding, ids, source.mask, source.strategy).output;
  if (ctx.training && config_.dropout > 0.0) x = dropout(tape, x, config_.dropout, *ctx.rng);

  const AttentionLayout layout{enc.batch, enc.length, enc.length, config_.n_heads, false};
  for (const auto& layer : params_.encoder) {
    x = residual_norm(tape, x, attention_block(tape, layer.self_attn, x, x, layout, enc.key_valid),
                      layer.attn_norm, ctx);
    x = residual_norm(tape, x, feed_forward(tape, layer.ffn, x), layer.ffn_norm, ctx);
  }
  enc.hidden = x;
  return enc;
}

Tensor Transformer::output_logits(Tape& tape, const Tensor& hidden) const {
  return add_bias(tape, matmul(tape, hidden, transpose(tape, params_.output_weight)),
                  params_.output_bias);
}

Tensor Transformer::decode(Tape& tape, const CorruptedBatch& target_input,
                           const EncodedBatch& encoded, const ForwardContext& ctx) const {
  if (ctx.training && config_.dropout > 0.0 && ctx.rng == nullptr) {
    throw ContractError("training-mode forward needs an rng for dropout");
  }
  const auto& ids = target_input.corrupted_ids;
  if (ids.rows != encoded.batch) throw DimensionError("decoder batch differs from encoder batch");
  Tensor x = embed(tape, params_.target_embedding, ids, target_input.mask, target_input.strategy).output;
  if (ctx.training && config_.dropout > 0.0) x = dropout(tape, x, config_.dropout, *ctx.rng);

  // Padding sits only after real tokens, so causal masking alone keeps real
  // queries away from target padding.
  const std::vector<std::uint8_t> all_valid(ids.data.size(), 1);
  const AttentionLayout self_layout{ids.rows, ids.cols, ids.cols, config_.n_heads, true};
  const AttentionLayout cross_layout{ids.rows, ids.cols, encoded.length, config_.n_heads, false};
  for (const auto& layer : params_.decoder) {
    x = residual_norm(tape, x, attention_block(tape, layer.self_attn, x, x, self_layout, all_valid),
                      layer.self_norm, ctx);
    x = residual_norm(tape, x,
                      attention_block(tape, layer.cross_attn, x, encoded.hidden, cross_layout,
                                      encoded.key_valid),
                      layer.cross_norm, ctx);
    x = residual_norm(tape, x, feed_forward(tape, layer.ffn, x), layer.ffn_norm, ctx);
  }
  return output_logits(tape, x);
}

Tensor Transformer::rtd_head(Tape& tape, const EncodedBatch& encoded) const {
  const Tensor scores = linear(tape, encoded.hidden, params_.rtd_weight, params_.rtd_bias);
  return sigmoid(tape, scores);
}

Tensor Transformer::dtp_head(Tape& tape, const EncodedBatch& encoded,
                             const std::vector<std::size_t>& positions) const {
  const std::size_t rows = encoded.hidden.dim(0);
  std::vector<std::int32_t> idx;
  idx.reserve(positions.size());
  for (auto pos : positions) {
    if (pos >= rows) {
      throw DimensionError("dropped position " + std::to_string(pos) + " outside encoder output of " +
                           std::to_string(rows) + " rows");
    }
    idx.push_back(static_cast<std::int32_t>(pos));
  }
  const Tensor gathered = gather_rows(tape, encoded.hidden, idx);
  return matmul(tape, gathered, transpose(tape, params_.dtp_projection));
}

IncrementalDecoder::IncrementalDecoder(const Transformer& model, const EncodedBatch& encoded)
    : model_(model), encoded_(encoded) {
  Tape tape(false);
  const auto& layers = model_.params_.decoder;
  for (const auto& layer : layers) {
    cross_keys_.push_back(matmul(tape, encoded.hidden, layer.cross_attn.wk));
    cross_values_.push_back(linear(tape, encoded.hidden, layer.cross_attn.wv, layer.cross_attn.bv));
  }
  self_keys_.assign(layers.size(), std::vector<std::vector<double>>(encoded.batch));
  self_values_.assign(layers.size(), std::vector<std::vector<double>>(encoded.batch));
}

Tensor IncrementalDecoder::step(const std::vector<TokenId>& tokens) {
  const std::size_t B = encoded_.batch;
  const std::size_t d = model_.config_.d_model;
  if (tokens.size() != B) throw DimensionError("one token per batch row expected");
  Tape tape(false);
  const ForwardContext eval;

  IdMatrix ids(B, 1);
  ids.data = tokens;
  Tensor x = model_.embed(tape, model_.params_.target_embedding, ids, BitMatrix(B, 1, 0),
                          DropStrategy::UnkTag, position_).output;
  const std::size_t keys = position_ + 1;
  const std::vector<std::uint8_t> all_valid(B * keys, 1);
  const AttentionLayout self_layout{B, 1, keys, model_.config_.n_heads, false};
  const AttentionLayout cross_layout{B, 1, encoded_.length, model_.config_.n_heads, false};

  for (std::size_t l = 0; l < model_.params_.decoder.size(); ++l) {
    const auto& layer = model_.params_.decoder[l];
    const auto& sa = layer.self_attn;
    const Tensor q = linear(tape, x, sa.wq, sa.bq);
    const Tensor k_new = matmul(tape, x, sa.wk);
    const Tensor v_new = linear(tape, x, sa.wv, sa.bv);
    std::vector<double> k_all, v_all;
    k_all.reserve(B * keys * d);
    v_all.reserve(B * keys * d);
    for (std::size_t b = 0; b < B; ++b) {
      auto& kc = self_keys_[l][b];
      auto& vc = self_values_[l][b];
      kc.insert(kc.end(), k_new.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                k_new.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
      vc.insert(vc.end(), v_new.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                v_new.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
      k_all.insert(k_all.end(), kc.begin(), kc.end());
      v_all.insert(v_all.end(), vc.begin(), vc.end());
    }
    const Tensor heads = attention(tape, q, Tensor({B * keys, d}, std::move(k_all)),
                                   Tensor({B * keys, d}, std::move(v_all)), self_layout, all_valid);
    x = model_.residual_norm(tape, x, linear(tape, heads, sa.wo, sa.bo), layer.self_norm, eval);

    const auto& ca = layer.cross_attn;
    const Tensor cq = linear(tape, x, ca.wq, ca.bq);
    const Tensor cross = attention(tape, cq, cross_keys_[l], cross_values_[l], cross_layout,
                                   encoded_.key_valid);
    x = model_.residual_norm(tape, x, linear(tape, cross, ca.wo, ca.bo), layer.cross_norm, eval);
    x = model_.residual_norm(tape, x, model_.feed_forward(tape, layer.ffn, x), layer.ffn_norm, eval);
  }
  ++position_;
  return model_.output_logits(tape, x);
}

}  // namespace tokendrop
