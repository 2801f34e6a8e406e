#include "rise/synth.hpp"

#include "rise/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace rise {
namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  // splitmix64 finalizer over a running combination.
  std::uint64_t z = h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void LanguageSpec::validate(int vocab_size) const {
  if (label.empty()) throw ConfigError("language spec needs a label");
  if (vocab_begin < 0 || vocab_end > vocab_size || vocab_begin >= vocab_end)
    throw ConfigError("language '" + label + "': vocab range [" + std::to_string(vocab_begin) +
                      ", " + std::to_string(vocab_end) + ") not within [0, " +
                      std::to_string(vocab_size) + ")");
  for (TokenId t : overlap_tokens)
    if (t < 0 || t >= vocab_size)
      throw ConfigError("language '" + label + "': overlap token out of range");
  if (resource_level < 1) throw ConfigError("language '" + label + "': resource_level < 1");
  if (ngram_order < 1) throw ConfigError("language '" + label + "': ngram_order < 1");
  if (!(zipf_exponent >= 0)) throw ConfigError("language '" + label + "': bad zipf exponent");
}

std::vector<TokenId> LanguageSpec::alphabet() const {
  std::vector<TokenId> out(static_cast<std::size_t>(vocab_end - vocab_begin));
  std::iota(out.begin(), out.end(), vocab_begin);
  out.insert(out.end(), overlap_tokens.begin(), overlap_tokens.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t Corpus::train_tokens() const {
  std::size_t n = 0;
  for (const auto& s : train) n += s.size();
  return n;
}

namespace {

std::vector<double> distribution_for(const LanguageSpec& spec,
                                     const std::vector<std::size_t>& context,
                                     std::size_t alphabet_size) {
  std::uint64_t h = mix(spec.grammar_seed, context.size());
  for (auto c : context) h = mix(h, c);
  std::mt19937_64 rng(h);
  std::vector<std::size_t> perm(alphabet_size);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> probs(alphabet_size);
  double total = 0;
  for (std::size_t r = 0; r < alphabet_size; ++r) {
    const double w = 1.0 / std::pow(double(r + 1), spec.zipf_exponent);
    probs[perm[r]] = w;
    total += w;
  }
  for (auto& p : probs) p /= total;
  return probs;
}

std::vector<std::size_t> context_positions(const LanguageSpec& spec,
                                           const std::vector<TokenId>& alphabet,
                                           const std::vector<TokenId>& history) {
  const std::size_t keep = std::min<std::size_t>(history.size(), spec.ngram_order - 1);
  std::vector<std::size_t> ctx;
  for (std::size_t i = history.size() - keep; i < history.size(); ++i) {
    auto it = std::lower_bound(alphabet.begin(), alphabet.end(), history[i]);
    if (it == alphabet.end() || *it != history[i])
      throw InputError("history token outside the language alphabet");
    ctx.push_back(static_cast<std::size_t>(it - alphabet.begin()));
  }
  return ctx;
}

}  // namespace

std::vector<double> ngram_distribution(const LanguageSpec& spec,
                                       const std::vector<TokenId>& history) {
  const auto alphabet = spec.alphabet();
  return distribution_for(spec, context_positions(spec, alphabet, history), alphabet.size());
}

Corpus generate(const LanguageSpec& spec, int n_sequences, int seq_len, int vocab_size) {
  spec.validate(vocab_size);
  if (n_sequences < 1 || seq_len < 1) throw ConfigError("generate: empty request");
  const auto requested = static_cast<std::uint64_t>(n_sequences) * seq_len;
  if (requested > spec.resource_level)
    throw ConfigError("language '" + spec.label + "': " + std::to_string(requested) +
                      " tokens requested exceeds resource level " +
                      std::to_string(spec.resource_level));

  const auto alphabet = spec.alphabet();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  std::vector<std::vector<std::size_t>> cached_keys;
  std::vector<std::vector<double>> cached_cdfs;
  auto cdf_for = [&](const std::vector<std::size_t>& ctx) -> const std::vector<double>& {
    for (std::size_t i = 0; i < cached_keys.size(); ++i)
      if (cached_keys[i] == ctx) return cached_cdfs[i];
    auto probs = distribution_for(spec, ctx, alphabet.size());
    std::partial_sum(probs.begin(), probs.end(), probs.begin());
    cached_keys.push_back(ctx);
    cached_cdfs.push_back(std::move(probs));
    return cached_cdfs.back();
  };

  std::vector<TokenSequence> sequences;
  sequences.reserve(n_sequences);
  for (int s = 0; s < n_sequences; ++s) {
    TokenSequence seq;
    std::vector<std::size_t> positions;
    for (int t = 0; t < seq_len; ++t) {
      const std::size_t keep = std::min<std::size_t>(positions.size(), spec.ngram_order - 1);
      const std::vector<std::size_t> ctx(positions.end() - keep, positions.end());
      const auto& cdf = cdf_for(ctx);
      const double u = uniform(rng) * cdf.back();
      auto idx = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      idx = std::min(idx, alphabet.size() - 1);
      positions.push_back(idx);
      seq.push_back(alphabet[idx]);
    }
    sequences.push_back(std::move(seq));
  }

  Corpus corpus;
  corpus.language = spec.label;
  const std::size_t n_train = (static_cast<std::size_t>(n_sequences) * 9) / 10;
  corpus.train.assign(sequences.begin(), sequences.begin() + n_train);
  corpus.held_out.assign(sequences.begin() + n_train, sequences.end());
  return corpus;
}

std::vector<LanguageSpec> make_benchmark_suite(const SuiteConfig& config) {
  const int n = config.n_high + config.n_low;
  if (config.n_high < 0 || config.n_low < 0 || n < 1)
    throw ConfigError("suite needs at least one language");
  if (config.vocab_size < n)
    throw ConfigError("suite of " + std::to_string(n) + " languages does not fit in a vocabulary of " +
                      std::to_string(config.vocab_size));
  if (!(config.overlap_fraction >= 0.0 && config.overlap_fraction <= 1.0))
    throw ConfigError("overlap_fraction must lie in [0, 1]");
  if (config.low_budget < 1) throw ConfigError("low_budget must be >= 1");

  const int width = config.vocab_size / n;
  const int shared = static_cast<int>(std::floor(config.overlap_fraction * width + 1e-9));
  std::vector<LanguageSpec> specs;
  for (int j = 0; j < n; ++j) {
    LanguageSpec spec;
    const bool high = j < config.n_high;
    spec.label = high ? "high" + std::to_string(j) : "low" + std::to_string(j - config.n_high);
    spec.vocab_begin = j * width;
    spec.vocab_end = (j + 1) * width;
    for (int other = 0; other < n; ++other) {
      if (other == j) continue;
      for (int t = 0; t < shared; ++t) spec.overlap_tokens.push_back(other * width + t);
    }
    spec.resource_level = config.low_budget * (high ? kHighResourceMultiplier : 1);
    spec.ngram_order = config.ngram_order;
    spec.seed = mix(config.seed, static_cast<std::uint64_t>(j) + 1);
    spec.grammar_seed =
        config.shared_grammar ? mix(config.seed, 0) : mix(config.seed ^ 0x5eed, j + 1);
    specs.push_back(std::move(spec));
  }
  return specs;
}

void write_sequences(const std::vector<TokenSequence>& sequences,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
}

std::vector<TokenSequence> read_sequences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    TokenSequence seq;
    long long v;
    while (fields >> v) {
      if (v < 0 || v > std::numeric_limits<TokenId>::max())
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad token id");
      seq.push_back(static_cast<TokenId>(v));
    }
    if (!fields.eof())
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": not an integer list");
    out.push_back(std::move(seq));
  }
  return out;
}

std::string spec_to_json(const LanguageSpec& spec) {
  nlohmann::json j;
  j["label"] = spec.label;
  j["vocab_range"] = {spec.vocab_begin, spec.vocab_end};
  j["overlap_tokens"] = spec.overlap_tokens;
  j["resource_level"] = spec.resource_level;
  j["ngram_order"] = spec.ngram_order;
  j["seed"] = spec.seed;
  j["grammar_seed"] = spec.grammar_seed;
  j["zipf_exponent"] = spec.zipf_exponent;
  return j.dump();
}

LanguageSpec spec_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    LanguageSpec spec;
    spec.label = j.at("label").get<std::string>();
    spec.vocab_begin = j.at("vocab_range").at(0).get<TokenId>();
    spec.vocab_end = j.at("vocab_range").at(1).get<TokenId>();
    spec.overlap_tokens = j.at("overlap_tokens").get<std::vector<TokenId>>();
    spec.resource_level = j.at("resource_level").get<std::uint64_t>();
    spec.ngram_order = j.at("ngram_order").get<int>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.grammar_seed = j.at("grammar_seed").get<std::uint64_t>();
    spec.zipf_exponent = j.at("zipf_exponent").get<double>();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed language spec: ") + e.what());
  }
}

std::vector<Corpus> generate_suite(const std::vector<LanguageSpec>& specs, int seq_len,
                                   int vocab_size) {
  if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
  std::vector<Corpus> out;
  for (const auto& spec : specs) {
    const auto n = spec.resource_level / static_cast<std::uint64_t>(seq_len);
    if (n < 2)
      throw ConfigError("language '" + spec.label + "': resource level " +
                        std::to_string(spec.resource_level) + " holds fewer than two sequences");
    out.push_back(generate(spec, static_cast<int>(n), seq_len, vocab_size));
  }
  return out;
}

std::vector<TokenSequence> mixed_corpus(const std::vector<Corpus>& corpora) {
  std::vector<TokenSequence> out;
  for (const auto& c : corpora) out.insert(out.end(), c.train.begin(), c.train.end());
  return out;
}

std::string corpus_to_json(const LanguageSpec& spec, const Corpus& corpus) {
  nlohmann::json j;
  j["language"] = corpus.language;
  j["spec"] = nlohmann::json::parse(spec_to_json(spec));
  j["train"] = corpus.train;
  j["held_out"] = corpus.held_out;
  return j.dump() + "\n";
}

CorpusFile corpus_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    CorpusFile f;
    f.spec = spec_from_json(j.at("spec").dump());
    f.corpus.language = j.at("language").get<std::string>();
    f.corpus.train = j.at("train").get<std::vector<TokenSequence>>();
    f.corpus.held_out = j.at("held_out").get<std::vector<TokenSequence>>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed corpus file: ") + e.what());
  }
}

void save_corpus(const LanguageSpec& spec, const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << corpus_to_json(spec, corpus);
}

CorpusFile load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return corpus_from_json(buf.str());
}

}  // namespace rise
