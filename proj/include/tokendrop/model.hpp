#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokendrop/corpus.hpp"
#include "tokendrop/ops.hpp"
#include "tokendrop/rng.hpp"
#include "tokendrop/tensor.hpp"
#include "tokendrop/token_drop.hpp"

namespace tokendrop {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ffn = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  double dropout = 0.1;
  std::size_t max_length = 64;
  /// One embedding matrix for source and target (joint vocabulary).
  bool shared_vocab = false;
  /// DTP projection is the source embedding matrix.
  bool tie_dtp = true;
  /// Translation output projection is the target embedding matrix.
  bool tie_output = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AttentionParams {
  Tensor wq, bq;
  Tensor wk;  // no key bias: a per-key offset cancels inside the softmax
  Tensor wv, bv;
  Tensor wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct NormParams {
  Tensor gain, bias;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  NormParams attn_norm;
  FeedForwardParams ffn;
  NormParams ffn_norm;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  NormParams self_norm;
  AttentionParams cross_attn;
  NormParams cross_norm;
  FeedForwardParams ffn;
  NormParams ffn_norm;
};

// All trainable arrays. Tied matrices are handles to one storage, so an
// update through either name is visible through the other.
struct ModelParameters {
  Tensor source_embedding;  // [V_src x d]
  Tensor target_embedding;  // [V_tgt x d]
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor output_weight;  // [V_tgt x d], logits = h * output_weight^T + output_bias
  Tensor output_bias;
  Tensor rtd_weight;  // [d x 1]
  Tensor rtd_bias;    // [1]
  Tensor dtp_projection;  // [V_src x d]

  /// Every distinct storage once, in a fixed declaration order.
  std::vector<NamedTensor> named() const;
  std::size_t count() const;
};

/// Number of trainable scalars implied by a configuration.
std::size_t parameter_count(const ModelConfig& config, std::size_t source_vocab,
                            std::size_t target_vocab);

/// Training mode enables dropout and needs an rng; eval mode is deterministic.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

struct Embedded {
  Tensor word;    // scaled word embeddings, ZeroOut rows already zeroed
  Tensor output;  // word + positional encoding
};

struct EncodedBatch {
  Tensor hidden;  // [batch*length x d]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> key_valid;  // 0 at source padding
};

/// Sinusoidal encodings for positions [offset, offset+length), [length x d].
Tensor positional_encoding(std::size_t length, std::size_t d_model, std::size_t offset = 0);

class Transformer {
 public:
  Transformer(ModelConfig config, std::size_t source_vocab, std::size_t target_vocab,
              std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  ModelParameters& params() { return params_; }
  const ModelParameters& params() const { return params_; }
  std::size_t source_vocab() const { return source_vocab_; }
  std::size_t target_vocab() const { return target_vocab_; }

  /// Word lookup scaled by sqrt(d_model) plus positions. Under ZeroOut the
  /// rows where mask = 1 are zeroed before positions are added.
  Embedded embed(Tape& tape, const Tensor& table, const IdMatrix& ids, const BitMatrix& mask,
                 DropStrategy strategy, std::size_t position_offset = 0) const;

  EncodedBatch encode(Tape& tape, const CorruptedBatch& source, const ForwardContext& ctx) const;

  /// Translation logits [batch*tgt_len x V_tgt] under causal self-attention.
  Tensor decode(Tape& tape, const CorruptedBatch& target_input, const EncodedBatch& encoded,
                const ForwardContext& ctx) const;

  /// Replaced-token probabilities, one per encoder position [batch*length].
  Tensor rtd_head(Tape& tape, const EncodedBatch& encoded) const;

  /// Logits over the source vocabulary for the listed flat positions.
  Tensor dtp_head(Tape& tape, const EncodedBatch& encoded,
                  const std::vector<std::size_t>& positions) const;

 private:
  friend class IncrementalDecoder;

  Tensor attention_block(Tape& tape, const AttentionParams& p, const Tensor& queries,
                         const Tensor& keys_values, const AttentionLayout& layout,
                         const std::vector<std::uint8_t>& key_valid) const;
  Tensor feed_forward(Tape& tape, const FeedForwardParams& p, const Tensor& x) const;
  Tensor residual_norm(Tape& tape, const Tensor& x, const Tensor& sublayer, const NormParams& norm,
                       const ForwardContext& ctx) const;
  Tensor output_logits(Tape& tape, const Tensor& hidden) const;
  void check_length(std::size_t length) const;

  ModelConfig config_;
  std::size_t source_vocab_;
  std::size_t target_vocab_;
  ModelParameters params_;
};

// Greedy-decoding helper that caches decoder self-attention keys and values
// so each step costs one position instead of the whole prefix. Eval mode only;
// step() yields the same logits as decode() on the full prefix.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Transformer& model, const EncodedBatch& encoded);

  /// Feeds one token per row at the next position; returns logits [batch x V_tgt].
  Tensor step(const std::vector<TokenId>& tokens);

  std::size_t position() const { return position_; }

 private:
  const Transformer& model_;
  const EncodedBatch& encoded_;
  std::size_t position_ = 0;
  std::vector<Tensor> cross_keys_;
  std::vector<Tensor> cross_values_;
  // Per layer, per batch row: flattened [position x d] caches.
  std::vector<std::vector<std::vector<double>>> self_keys_;
  std::vector<std::vector<std::vector<double>>> self_values_;
};

}  // namespace tokendrop
