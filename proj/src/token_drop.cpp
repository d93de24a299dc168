#include "tokendrop/token_drop.hpp"

#include "tokendrop/error.hpp"

namespace tokendrop {

std::string to_string(DropStrategy strategy) {
  switch (strategy) {
    case DropStrategy::ZeroOut:
      return "zero_out";
    case DropStrategy::DropTag:
      return "drop_tag";
    case DropStrategy::UnkTag:
      return "unk_tag";
  }
  return "unknown";
}

DropStrategy parse_drop_strategy(const std::string& name) {
  if (name == "zero_out") return DropStrategy::ZeroOut;
  if (name == "drop_tag") return DropStrategy::DropTag;
  if (name == "unk_tag") return DropStrategy::UnkTag;
  throw ConfigError("unknown drop strategy '" + name + "' (expected zero_out, drop_tag or unk_tag)");
}

void DropConfig::validate() const {
  if (!(p_source >= 0.0 && p_source <= 1.0)) throw ConfigError("p_source must lie in [0, 1]");
  if (!(p_target >= 0.0 && p_target <= 1.0)) throw ConfigError("p_target must lie in [0, 1]");
}

BitMatrix droppable_positions(const IdMatrix& ids) {
  BitMatrix out(ids.rows, ids.cols, 0);
  for (std::size_t i = 0; i < ids.data.size(); ++i) out.data[i] = is_structural(ids.data[i]) ? 0 : 1;
  return out;
}

BitMatrix sample_mask(const BitMatrix& droppable, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("drop probability must lie in [0, 1]");
  BitMatrix mask(droppable.rows, droppable.cols, 0);
  for (std::size_t i = 0; i < droppable.data.size(); ++i) {
    if (droppable.data[i]) mask.data[i] = rng.bernoulli(p) ? 1 : 0;
  }
  return mask;
}

CorruptedBatch apply_mask(const IdMatrix& ids, BitMatrix mask, DropStrategy strategy) {
  if (mask.rows != ids.rows || mask.cols != ids.cols) {
    throw DimensionError("drop mask shape does not match the id matrix");
  }
  CorruptedBatch out;
  out.original_ids = ids;
  out.corrupted_ids = ids;
  out.droppable = droppable_positions(ids);
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i] && !out.droppable.data[i]) {
      throw ContractError("drop mask selects a structural token");
    }
  }
  out.mask = std::move(mask);
  out.strategy = strategy;
  if (strategy != DropStrategy::ZeroOut) {
    const TokenId replacement = strategy == DropStrategy::UnkTag ? kUnkId : kDroppedId;
    for (std::size_t i = 0; i < out.mask.data.size(); ++i) {
      if (out.mask.data[i]) out.corrupted_ids.data[i] = replacement;
    }
  }
  return out;
}

CorruptedBatch uncorrupted(const IdMatrix& ids, DropStrategy strategy) {
  return apply_mask(ids, BitMatrix(ids.rows, ids.cols, 0), strategy);
}

CorruptedPair corrupt(const ParallelBatch& batch, const DropConfig& config, Rng& rng) {
  config.validate();
  auto src_mask = sample_mask(droppable_positions(batch.source), config.p_source, rng);
  auto tgt_mask = sample_mask(droppable_positions(batch.target_input), config.p_target, rng);
  return {apply_mask(batch.source, std::move(src_mask), config.strategy),
          apply_mask(batch.target_input, std::move(tgt_mask), config.strategy)};
}

DropRecords drop_records(const CorruptedBatch& batch) {
  DropRecords records;
  for (std::size_t i = 0; i < batch.mask.data.size(); ++i) {
    if (batch.mask.data[i]) {
      records.dropped.push_back(i);
      records.original.push_back(batch.original_ids.data[i]);
    } else if (batch.droppable.data[i]) {
      records.kept.push_back(i);
    }
  }
  return records;
}

std::vector<double> rtd_labels(const CorruptedBatch& batch) {
  return std::vector<double>(batch.mask.data.begin(), batch.mask.data.end());
}

}  // namespace tokendrop
