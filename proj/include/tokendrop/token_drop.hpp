#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokendrop/corpus.hpp"
#include "tokendrop/rng.hpp"

namespace tokendrop {

/// How a dropped token is presented to the network.
enum class DropStrategy {
  ZeroOut,  // id kept; its word embedding is zeroed in the embedding layer
  DropTag,  // id replaced by the dedicated <dropped> tag
  UnkTag,   // id replaced by the generic <unk> token
};

std::string to_string(DropStrategy strategy);
DropStrategy parse_drop_strategy(const std::string& name);

struct DropConfig {
  double p_source = 0.15;
  double p_target = 0.3;
  DropStrategy strategy = DropStrategy::UnkTag;
  std::uint64_t seed = 7;

  void validate() const;
};

// A token matrix after corruption, with everything the auxiliary objectives
// need: which positions were dropped and what was there originally.
struct CorruptedBatch {
  IdMatrix corrupted_ids;
  IdMatrix original_ids;
  BitMatrix mask;       // 1 = dropped
  BitMatrix droppable;  // 1 = eligible (not PAD/BOS/EOS)
  DropStrategy strategy = DropStrategy::UnkTag;
};

struct CorruptedPair {
  CorruptedBatch source;
  CorruptedBatch target_input;
};

/// Positions whose id is not PAD, BOS or EOS.
BitMatrix droppable_positions(const IdMatrix& ids);

/// Independent Bernoulli(p) draw at each droppable position, in row-major order.
BitMatrix sample_mask(const BitMatrix& droppable, double p, Rng& rng);

/// Replaces masked ids according to the strategy.
CorruptedBatch apply_mask(const IdMatrix& ids, BitMatrix mask, DropStrategy strategy);

/// Uncorrupted view of `ids` (all-zero mask).
CorruptedBatch uncorrupted(const IdMatrix& ids, DropStrategy strategy = DropStrategy::UnkTag);

/// Samples fresh masks for the source (p_source) and decoder input (p_target).
/// The decoder labels in batch.target_output are never touched.
CorruptedPair corrupt(const ParallelBatch& batch, const DropConfig& config, Rng& rng);

struct DropRecords {
  std::vector<std::size_t> dropped;  // flat row-major positions with mask = 1
  std::vector<std::size_t> kept;     // droppable positions with mask = 0
  std::vector<TokenId> original;     // original id at each dropped position
};

DropRecords drop_records(const CorruptedBatch& batch);

/// Replaced-token-detection labels (the mask as 0.0 / 1.0).
std::vector<double> rtd_labels(const CorruptedBatch& batch);

}  // namespace tokendrop
