#pragma once

// Synthetic multi-language corpora.
//
// A language is an n-gram source over its own contiguous token range plus a
// list of tokens shared with other languages. The conditional distribution for
// each context is a Zipf law over a seeded permutation of the language's
// alphabet. Tables are keyed by alphabet *positions*, so languages built from
// the same grammar seed share one abstract grammar rendered in different
// tokens.

#include "rise/errors.hpp"
#include "rise/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rise {

struct LanguageSpec {
  std::string label;
  TokenId vocab_begin = 0;  // [vocab_begin, vocab_end)
  TokenId vocab_end = 0;
  std::vector<TokenId> overlap_tokens;
  std::uint64_t resource_level = 1;  // token budget
  int ngram_order = 2;
  std::uint64_t seed = 0;          // sampling stream
  std::uint64_t grammar_seed = 0;  // n-gram tables
  double zipf_exponent = 1.5;

  /// Throws ConfigError on an invalid spec.
  void validate(int vocab_size) const;

  /// Sorted union of the range and the overlap tokens.
  std::vector<TokenId> alphabet() const;
};

struct Corpus {
  std::string language;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> held_out;

  std::size_t train_tokens() const;
};

/// Next-token distribution for `history` (only the last ngram_order-1 tokens
/// matter; shorter histories at sequence start have their own tables).
/// Returns probabilities aligned with spec.alphabet().
std::vector<double> ngram_distribution(const LanguageSpec& spec,
                                       const std::vector<TokenId>& history);

/// Samples n_sequences sequences of seq_len tokens and splits them 90/10
/// (prefix to train, remainder to held-out).
Corpus generate(const LanguageSpec& spec, int n_sequences, int seq_len, int vocab_size);

struct SuiteConfig {
  int n_high = 2;
  int n_low = 2;
  int vocab_size = 64;
  double overlap_fraction = 0.0;
  std::uint64_t low_budget = 1024;
  int ngram_order = 2;
  std::uint64_t seed = 7;
  /// Every language uses one grammar seed when true.
  bool shared_grammar = true;
};

/// Splits the vocabulary into n_high + n_low equal contiguous ranges. High
/// resource languages get ten times the low-resource token budget. The first
/// overlap_fraction of every range is shared with every other language.
std::vector<LanguageSpec> make_benchmark_suite(const SuiteConfig& config);

inline constexpr std::uint64_t kHighResourceMultiplier = 10;

// Corpus file: one sequence per line, space-separated token ids.
void write_sequences(const std::vector<TokenSequence>& sequences,
                     const std::filesystem::path& path);
std::vector<TokenSequence> read_sequences(const std::filesystem::path& path);

std::string spec_to_json(const LanguageSpec& spec);
LanguageSpec spec_from_json(const std::string& text);

/// One corpus per spec with floor(resource_level / seq_len) sequences.
std::vector<Corpus> generate_suite(const std::vector<LanguageSpec>& specs, int seq_len,
                                   int vocab_size);

/// Concatenated training splits; each language contributes in proportion to
/// its resource level.
std::vector<TokenSequence> mixed_corpus(const std::vector<Corpus>& corpora);

// Corpus file: {"language", "spec", "train": [[ids...]...], "held_out": [...]}.
struct CorpusFile {
  LanguageSpec spec;
  Corpus corpus;
};

std::string corpus_to_json(const LanguageSpec& spec, const Corpus& corpus);
CorpusFile corpus_from_json(const std::string& text);
void save_corpus(const LanguageSpec& spec, const Corpus& corpus, const std::filesystem::path& path);
CorpusFile load_corpus(const std::filesystem::path& path);

}  // namespace rise
