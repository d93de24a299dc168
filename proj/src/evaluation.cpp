#include "tokendrop/evaluation.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "tokendrop/error.hpp"

namespace tokendrop {

namespace {

IdMatrix source_matrix(const std::vector<TokenSequence>& sources, std::size_t begin,
                       std::size_t end) {
  std::size_t width = 0;
  for (std::size_t i = begin; i < end; ++i) width = std::max(width, sources[i].size() + 1);
  IdMatrix ids(end - begin, width, kPadId);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& s = sources[i];
    for (std::size_t t = 0; t < s.size(); ++t) ids.at(i - begin, t) = s[t];
    ids.at(i - begin, s.size()) = kEosId;
  }
  return ids;
}

TokenId argmax_row(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < logits.size(); ++v)
    if (logits[v] > logits[best]) best = v;
  return static_cast<TokenId>(best);
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, result.ptr);
}

std::vector<TokenSequence> greedy_decode(const Transformer& model,
                                         const std::vector<TokenSequence>& sources,
                                         const DecodeOptions& options) {
  if (options.batch_size == 0) throw ConfigError("decode batch_size must be positive");
  std::vector<TokenSequence> outputs(sources.size());
  const std::size_t limit = model.config().max_length;
  for (std::size_t begin = 0; begin < sources.size(); begin += options.batch_size) {
    const std::size_t end = std::min(sources.size(), begin + options.batch_size);
    const std::size_t rows = end - begin;
    Tape tape(false);
    const EncodedBatch encoded = model.encode(tape, uncorrupted(source_matrix(sources, begin, end)), {});

    std::vector<std::size_t> max_len(rows);
    std::size_t longest = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t wanted =
          options.max_len > 0 ? options.max_len : sources[begin + r].size() + 10;
      max_len[r] = std::min(wanted, limit);
      longest = std::max(longest, max_len[r]);
    }

    IncrementalDecoder decoder(model, encoded);
    std::vector<TokenId> feed(rows, kBosId);
    std::vector<bool> done(rows, false);
    std::size_t active = rows;
    for (std::size_t t = 0; t < longest && active > 0; ++t) {
      const Tensor logits = decoder.step(feed);
      const std::size_t V = logits.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        if (done[r]) {
          feed[r] = kPadId;
          continue;
        }
        const TokenId next = argmax_row(logits.data().subspan(r * V, V));
        if (next == kEosId) {
          done[r] = true;
          --active;
          feed[r] = kPadId;
          continue;
        }
        outputs[begin + r].push_back(next);
        feed[r] = next;
        if (outputs[begin + r].size() >= max_len[r]) {
          done[r] = true;
          --active;
        }
      }
    }
  }
  return outputs;
}

TokenSequence greedy_decode(const Transformer& model, const TokenSequence& source,
                            std::size_t max_len) {
  return greedy_decode(model, std::vector<TokenSequence>{source}, DecodeOptions{max_len, 1})[0];
}

BleuReport evaluate_bleu(const Transformer& model, const std::vector<EncodedPair>& test,
                         const DecodeOptions& options) {
  std::vector<TokenSequence> sources, references;
  for (const auto& pair : test) {
    sources.push_back(pair.source);
    references.push_back(pair.target);
  }
  return corpus_bleu(greedy_decode(model, sources, options), references);
}

void NoiseEvalSpec::validate() const {
  if (rates.empty()) throw ConfigError("noise rates must not be empty");
  for (double r : rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("noise rate " + format_number(r) + " outside [0, 1]");
  if (samples == 0) throw ConfigError("noise samples must be >= 1");
}

TokenSequence add_unk_noise(const TokenSequence& tokens, double rate, Rng& rng) {
  TokenSequence out = tokens;
  for (auto& id : out)
    if (!is_special(id) && rng.bernoulli(rate)) id = kUnkId;
  return out;
}

std::vector<NoiseRow> noise_eval(const Transformer& model, const std::vector<EncodedPair>& test,
                                 const NoiseEvalSpec& spec, const DecodeOptions& options) {
  spec.validate();
  if (test.empty()) throw DataError("noise evaluation needs a non-empty test set");
  std::vector<TokenSequence> clean, references;
  for (const auto& pair : test) {
    clean.push_back(pair.source);
    references.push_back(pair.target);
  }

  std::vector<NoiseRow> rows;
  for (std::size_t r = 0; r < spec.rates.size(); ++r) {
    const double rate = spec.rates[r];
    NoiseRow row{rate, 0.0, 0.0};
    if (rate == 0.0) {
      row.mean_bleu = corpus_bleu(greedy_decode(model, clean, options), references).bleu;
      rows.push_back(row);
      continue;
    }
    std::vector<double> scores;
    for (std::size_t s = 0; s < spec.samples; ++s) {
      // One stream per (rate index, sample) so grids can be extended without
      // disturbing earlier rows.
      Rng rng(derive_seed(derive_seed(spec.seed, r), s));
      std::vector<TokenSequence> noisy;
      noisy.reserve(clean.size());
      for (const auto& source : clean) noisy.push_back(add_unk_noise(source, rate, rng));
      scores.push_back(corpus_bleu(greedy_decode(model, noisy, options), references).bleu);
    }
    double sum = 0.0;
    for (double x : scores) sum += x;
    row.mean_bleu = sum / static_cast<double>(scores.size());
    if (scores.size() > 1) {
      double sq = 0.0;
      for (double x : scores) sq += (x - row.mean_bleu) * (x - row.mean_bleu);
      row.std_bleu = std::sqrt(sq / static_cast<double>(scores.size() - 1));
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<SweepRow> drop_rate_sweep(
    const std::vector<double>& rates, const TrainConfig& base, const TrainingData& data,
    const std::vector<EncodedPair>& test, const DecodeOptions& options,
    const std::function<void(const SweepRow&, const Trainer*)>& on_row) {
  for (double r : rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweep rate " + format_number(r) + " outside [0, 1]");
  std::vector<SweepRow> rows;
  for (double rate : rates) {
    SweepRow row;
    row.p_source = rate;
    TrainConfig config = base;
    config.drop.p_source = rate;
    try {
      Trainer trainer(config, data);
      const RunLog& log = trainer.train();
      row.final_valid_ppl = log.empty() ? 0.0 : log.back().valid_ppl;
      row.bleu = evaluate_bleu(trainer.model(), test, options).bleu;
      rows.push_back(row);
      if (on_row) on_row(rows.back(), &trainer);
    } catch (const Error& e) {
      row.bleu = std::nan("");
      row.error = e.what();
      rows.push_back(row);
      if (on_row) on_row(rows.back(), nullptr);
    }
  }
  return rows;
}

void write_noise_csv(const std::vector<NoiseRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "rate,mean_bleu,std_bleu\n";
  for (const auto& r : rows)
    out << format_number(r.rate) << ',' << format_number(r.mean_bleu) << ','
        << format_number(r.std_bleu) << '\n';
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "p_s,bleu\n";
  for (const auto& r : rows) out << format_number(r.p_source) << ',' << format_number(r.bleu) << '\n';
}

void write_curve_csv(const RunLog& log, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "step,train_ppl,valid_ppl\n";
  for (const auto& r : log)
    out << r.step << ',' << format_number(r.perplexity) << ',' << format_number(r.valid_ppl) << '\n';
}

}  // namespace tokendrop
