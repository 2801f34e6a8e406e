// rise: command-line front end for corpus generation, routing analysis,
// subnetwork selection, selective training and verification.
//
// Every subcommand writes its outputs plus a manifest.json into --out. A
// manifest can be passed back through --config to replay the run.

#include "rise/checkpoint.hpp"
#include "rise/isolation.hpp"
#include "rise/reports.hpp"
#include "rise/selection.hpp"
#include "rise/synth.hpp"
#include "rise/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <functional>
#include <memory>
#include <iostream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rise;

namespace {

constexpr const char* kVersion = "0.3.0";

enum ExitCode { kOk = 0, kUsage = 2, kInputError = 3, kVerifyFailed = 4 };

struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Reads {"<subcommand>": {"<option>": value, ...}, "<global option>": value}.
// A manifest is accepted too; its "config" member has that shape.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw InputError(std::string("config is not valid JSON: ") + e.what());
    }
    if (doc.contains("config") && doc.contains("command")) doc = doc["config"];
    if (!doc.is_object()) throw InputError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : doc.items()) {
      if (value.is_object()) {
        for (const auto& [name, v] : value.items()) items.push_back(item({key}, name, v));
      } else {
        items.push_back(item({}, key, value));
      }
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw InputError("config values must be strings, numbers, booleans or arrays of those");
  }

  static CLI::ConfigItem item(std::vector<std::string> parents, const std::string& name,
                              const json& v) {
    CLI::ConfigItem it;
    it.parents = std::move(parents);
    it.name = name;
    if (v.is_array())
      for (const auto& e : v) it.inputs.push_back(scalar(e));
    else
      it.inputs.push_back(scalar(v));
    return it;
  }
};

// A subcommand whose options remember how to serialise their effective values.
class Command {
 public:
  Command(CLI::App& root, const std::string& name, const std::string& description)
      : app_(root.add_subcommand(name, description)) {}

  template <typename T>
  CLI::Option* option(const std::string& name, T& value, const std::string& description) {
    emit_.push_back([name, &value](json& j) { j[name] = value; });
    return app_->add_option("--" + name, value, description)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& value, const std::string& description) {
    emit_.push_back([name, &value](json& j) { j[name] = value; });
    return app_->add_flag("--" + name, value, description);
  }

  json effective() const {
    json j = json::object();
    for (const auto& e : emit_) e(j);
    return j;
  }

  CLI::App* app() const { return app_; }
  bool parsed() const { return app_->parsed(); }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> emit_;
};

struct Globals {
  int threads = 1;
  bool exact = false;

  int effective_threads() const { return exact ? 1 : std::max(threads, 1); }
};

class Manifest {
 public:
  Manifest(std::string command, json config) : command_(std::move(command)), config_(std::move(config)) {
    started_ = utc_now();
  }

  void input(const fs::path& path) { inputs_.push_back(entry(path)); }
  void output(const fs::path& path) { outputs_.push_back(entry(path)); }
  void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& dir) const {
    json j;
    j["tool"] = "rise";
    j["version"] = kVersion;
    j["command"] = command_;
    j["config"] = config_;
    j["config_hash"] = config_hash(config_);
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["seeds"] = seeds_;
    j["started"] = started_;
    j["finished"] = utc_now();
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    write_file(dir / "manifest.json", j.dump(2) + "\n");
  }

  static std::string config_hash(const json& config) { return "fnv1a64:" + fnv1a(config.dump()); }

 private:
  static json entry(const fs::path& path) {
    return json{{"path", path.string()}, {"fnv1a64", fnv1a(read_file(path))}};
  }

  std::string command_;
  json config_;
  std::string started_;
  json inputs_ = json::array();
  json outputs_ = json::array();
  json seeds_ = json::object();
  json extra_ = json::object();
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
}

std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream out;
  out << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << format_number(losses[i]) << '\n';
  return out.str();
}

std::vector<CorpusFile> load_corpora(const std::vector<std::string>& paths, Manifest& manifest) {
  std::vector<CorpusFile> out;
  for (const auto& p : paths) {
    out.push_back(load_corpus(p));
    manifest.input(p);
  }
  return out;
}

void check_vocab(const std::vector<CorpusFile>& corpora, const ModelConfig& config) {
  for (const auto& c : corpora)
    for (const auto* split : {&c.corpus.train, &c.corpus.held_out})
      for (const auto& seq : *split)
        for (TokenId t : seq)
          if (t < 0 || t >= config.vocab_size)
            throw InputError("corpus " + c.corpus.language + " has token " + std::to_string(t) +
                             " outside the model vocabulary");
}

LayerBoundaries boundaries_or_scaled(const std::vector<int>& given, int n_layers) {
  if (given.empty()) return scaled_boundaries(n_layers);
  if (given.size() != 2) throw ConfigError("--boundaries takes two layers L1,L2");
  LayerBoundaries b{given[0], given[1]};
  b.validate(n_layers);
  return b;
}

// ---------------------------------------------------------------- gen

struct GenOptions {
  std::string out;
  int high = 2, low = 2, vocab = 64, seq_len = 32, ngram = 2;
  double overlap = 0.0, zipf = 1.5;
  std::uint64_t low_budget = 1024, seed = 7;
  bool independent_grammar = false;
};

std::unique_ptr<Command> add_gen(CLI::App& root, GenOptions& o) {
  auto cmd = std::make_unique<Command>(root, "gen", "Generate a synthetic multi-language benchmark suite");
  cmd->option("out", o.out, "Output directory")->required();
  cmd->option("high", o.high, "High-resource languages");
  cmd->option("low", o.low, "Low-resource languages");
  cmd->option("vocab", o.vocab, "Vocabulary size");
  cmd->option("overlap", o.overlap, "Fraction of each range shared across languages");
  cmd->option("low-budget", o.low_budget, "Token budget of a low-resource language");
  cmd->option("seq-len", o.seq_len, "Sequence length");
  cmd->option("ngram", o.ngram, "n-gram order");
  cmd->option("zipf", o.zipf, "Zipf exponent of the next-token laws");
  cmd->option("seed", o.seed, "Suite seed");
  cmd->flag("independent-grammar", o.independent_grammar, "Give every language its own grammar");
  return cmd;
}

int run_gen(const GenOptions& o, Manifest& manifest) {
  SuiteConfig sc;
  sc.n_high = o.high;
  sc.n_low = o.low;
  sc.vocab_size = o.vocab;
  sc.overlap_fraction = o.overlap;
  sc.low_budget = o.low_budget;
  sc.ngram_order = o.ngram;
  sc.seed = o.seed;
  sc.shared_grammar = !o.independent_grammar;
  auto specs = make_benchmark_suite(sc);
  for (auto& s : specs) s.zipf_exponent = o.zipf;
  const auto corpora = generate_suite(specs, o.seq_len, o.vocab);
  const fs::path dir = o.out;
  ensure_dir(dir);
  json languages = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const fs::path file = dir / (specs[i].label + ".corpus.json");
    save_corpus(specs[i], corpora[i], file);
    manifest.output(file);
    manifest.seed(specs[i].label, specs[i].seed);
    languages.push_back({{"language", specs[i].label},
                         {"train_sequences", corpora[i].train.size()},
                         {"held_out_sequences", corpora[i].held_out.size()}});
    std::cout << specs[i].label << ": " << corpora[i].train.size() << " train, "
              << corpora[i].held_out.size() << " held-out sequences\n";
  }
  manifest.seed("suite", o.seed);
  manifest.set("languages", languages);
  return kOk;
}

// ---------------------------------------------------------------- pretrain

struct PretrainOptions {
  std::vector<std::string> corpora;
  std::string out;
  int vocab = 64, d_model = 32, d_hidden = 32, layers = 8, experts = 8, top_k = 2, max_seq_len = 64;
  std::uint64_t model_seed = 7;
  int epochs = 4, batch = 16;
  double lr = 0.005;
  std::string optimizer = "adam";
  std::uint64_t seed = 7;
};

std::unique_ptr<Command> add_pretrain(CLI::App& root, PretrainOptions& o) {
  auto cmd = std::make_unique<Command>(root, "pretrain", "Initialise the toy MoE model and pre-train it on a mixed corpus");
  cmd->option("corpora", o.corpora, "Corpus files")->required();
  cmd->option("out", o.out, "Output directory")->required();
  cmd->option("vocab", o.vocab, "Vocabulary size");
  cmd->option("d-model", o.d_model, "Hidden width");
  cmd->option("d-hidden", o.d_hidden, "Expert hidden width");
  cmd->option("layers", o.layers, "MoE layers");
  cmd->option("experts", o.experts, "Experts per layer");
  cmd->option("top-k", o.top_k, "Experts activated per token and layer");
  cmd->option("max-seq-len", o.max_seq_len, "Longest accepted sequence");
  cmd->option("model-seed", o.model_seed, "Initialisation seed");
  cmd->option("epochs", o.epochs, "Epochs");
  cmd->option("batch", o.batch, "Batch size");
  cmd->option("lr", o.lr, "Learning rate");
  cmd->option("optimizer", o.optimizer, "sgd or adam");
  cmd->option("seed", o.seed, "Shuffling seed");
  return cmd;
}

int run_pretrain(const PretrainOptions& o, Manifest& manifest) {
  ModelConfig mc;
  mc.vocab_size = o.vocab;
  mc.d_model = o.d_model;
  mc.d_expert_hidden = o.d_hidden;
  mc.n_layers = o.layers;
  mc.n_experts = o.experts;
  mc.top_k = o.top_k;
  mc.max_seq_len = o.max_seq_len;
  mc.seed = o.model_seed;
  try {
    mc.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const auto files = load_corpora(o.corpora, manifest);
  check_vocab(files, mc);
  std::vector<Corpus> corpora;
  for (const auto& f : files) corpora.push_back(f.corpus);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.learning_rate = o.lr;
  tc.optimizer = optimizer_from_string(o.optimizer);
  tc.seed = o.seed;
  const Model initial = init_model<double>(mc);
  const auto result = pretrain(initial, mixed_corpus(corpora), tc);

  const fs::path dir = o.out;
  ensure_dir(dir);
  save_checkpoint(initial, dir / "initial.ckpt");
  save_checkpoint(result.model, dir / "final.ckpt");
  write_file(dir / "loss.csv", loss_csv(result.loss_history));
  for (const char* f : {"initial.ckpt", "final.ckpt", "loss.csv"}) manifest.output(dir / f);
  manifest.seed("model", o.model_seed);
  manifest.seed("shuffle", o.seed);
  manifest.set("optimizer", to_string(tc.optimizer));
  json held_out = json::object();
  for (const auto& c : corpora) {
    const double loss = corpus_loss(result.model, c.held_out);
    held_out[c.language] = format_number(loss);
    std::cout << c.language << " held-out loss " << format_number(loss) << '\n';
  }
  manifest.set("held_out_loss", held_out);
  return kOk;
}

// ---------------------------------------------------------------- collect

struct CollectOptions {
  std::string model;
  std::vector<std::string> corpora;
  std::string split = "train";
  std::string out;
};

std::unique_ptr<Command> add_collect(CLI::App& root, CollectOptions& o) {
  auto cmd = std::make_unique<Command>(root, "collect", "Collect per-language expert activation profiles");
  cmd->option("model", o.model, "Checkpoint")->required();
  cmd->option("corpora", o.corpora, "Corpus files")->required();
  cmd->option("split", o.split, "held_out or train")->check(CLI::IsMember({"held_out", "train"}));
  cmd->option("out", o.out, "Output directory")->required();
  return cmd;
}

int run_collect(const CollectOptions& o, const Globals& g, Manifest& manifest) {
  const Model model = load_checkpoint(o.model);
  manifest.input(o.model);
  const auto files = load_corpora(o.corpora, manifest);
  check_vocab(files, model.config);
  const fs::path dir = o.out;
  ensure_dir(dir);
  for (const auto& f : files) {
    const auto& seqs = o.split == "train" ? f.corpus.train : f.corpus.held_out;
    const auto profile = collect_profile(model, seqs, f.corpus.language, g.effective_threads());
    const fs::path file = dir / (f.corpus.language + ".profile.json");
    save_profile(profile, file);
    manifest.output(file);
    std::cout << f.corpus.language << ": " << profile.token_total << " tokens\n";
  }
  manifest.set("threads", g.effective_threads());
  return kOk;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeOptions {
  std::vector<std::string> profiles;
  std::string out;
  int k = 30;
  int per_layer_topk = 0;
  std::vector<int> boundaries;
  std::string reference;
};

std::unique_ptr<Command> add_analyze(CLI::App& root, AnalyzeOptions& o) {
  auto cmd = std::make_unique<Command>(root, "analyze", "Overlap matrix, layer-wise similarity curves and region table");
  cmd->option("profiles", o.profiles, "Profile files")->required();
  cmd->option("out", o.out, "Output directory")->required();
  cmd->option("k", o.k, "Global top-K for the overlap matrix");
  cmd->option("per-layer-topk", o.per_layer_topk, "Experts per layer for curves (0: the model's top-k)");
  cmd->option("boundaries", o.boundaries, "Region boundaries L1,L2 (default: scaled)")->delimiter(',');
  cmd->option("reference", o.reference, "Reference language (default: first profile)");
  return cmd;
}

int inferred_top_k(const RoutingProfile& p) {
  std::uint64_t sum = 0;
  for (int i = 0; i < p.n_experts; ++i) sum += p.count(0, i);
  if (p.token_total == 0 || sum % p.token_total != 0)
    throw InputError("profile " + p.language + " has no whole number of experts per token");
  return static_cast<int>(sum / p.token_total);
}

int run_analyze(const AnalyzeOptions& o, Manifest& manifest) {
  if (o.profiles.size() < 2) throw ConfigError("analyze needs at least two profiles");
  std::vector<RoutingProfile> profiles;
  for (const auto& p : o.profiles) {
    profiles.push_back(load_profile(p));
    manifest.input(p);
  }
  const int n_layers = profiles[0].n_layers;
  const auto boundaries = boundaries_or_scaled(o.boundaries, n_layers);
  const int topk = o.per_layer_topk > 0 ? o.per_layer_topk : inferred_top_k(profiles[0]);
  const std::string ref_name = o.reference.empty() ? profiles[0].language : o.reference;
  const RoutingProfile* ref = nullptr;
  for (const auto& p : profiles)
    if (p.language == ref_name) ref = &p;
  if (ref == nullptr) throw InputError("reference language '" + ref_name + "' has no profile");

  std::vector<std::string> labels;
  for (const auto& p : profiles) labels.push_back(p.language);
  const MatrixXd overlap = overlap_matrix(profiles, o.k);
  std::vector<SimilarityCurve> curves;
  std::vector<RegionRow> rows;
  for (const auto& p : profiles) {
    if (&p == ref) continue;
    curves.push_back(layerwise_similarity(p, *ref, topk));
    rows.push_back({p.language, region_average(curves.back(), boundaries)});
  }
  const fs::path dir = o.out;
  ensure_dir(dir);
  write_file(dir / "overlap.csv", overlap_matrix_csv(labels, overlap));
  write_file(dir / "overlap.pgm", matrix_pgm(overlap));
  write_file(dir / "curves.csv", curves_csv(curves));
  write_file(dir / "regions.csv", region_table_csv(rows));
  for (const char* f : {"overlap.csv", "overlap.pgm", "curves.csv", "regions.csv"}) manifest.output(dir / f);
  manifest.set("boundaries", {boundaries.shallow_end, boundaries.middle_end});
  manifest.set("per_layer_topk", topk);
  std::cout << region_table_csv(rows);
  return kOk;
}

// ---------------------------------------------------------------- select

struct SelectOptions {
  std::vector<std::string> profiles;
  std::string target;
  std::string out;
  int k = 128;
  std::vector<double> ratios{0.35, 0.25, 0.40};
  double alpha = 10.0;
  std::vector<int> boundaries;
};

std::unique_ptr<Command> add_select(CLI::App& root, SelectOptions& o) {
  auto cmd = std::make_unique<Command>(root, "select", "Select a language-specific expert subnetwork");
  cmd->option("profiles", o.profiles, "Profile files, one per language")->required();
  cmd->option("target", o.target, "Target language")->required();
  cmd->option("out", o.out, "Output directory")->required();
  cmd->option("k", o.k, "Expert budget");
  cmd->option("ratios", o.ratios, "Shallow, middle, deep budget ratios")->delimiter(',')->expected(3);
  cmd->option("alpha", o.alpha, "Activation-magnitude weight");
  cmd->option("boundaries", o.boundaries, "Region boundaries L1,L2 (default: scaled)")->delimiter(',');
  return cmd;
}

int run_select(const SelectOptions& o, Manifest& manifest) {
  std::vector<RoutingProfile> profiles;
  for (const auto& p : o.profiles) {
    profiles.push_back(load_profile(p));
    manifest.input(p);
  }
  const auto matrix = ProfileMatrix::from_profiles(profiles);
  SelectionConfig sc;
  sc.target = o.target;
  sc.budget = o.k;
  sc.ratios = {o.ratios.at(0), o.ratios.at(1), o.ratios.at(2)};
  sc.alpha = o.alpha;
  sc.boundaries = boundaries_or_scaled(o.boundaries, matrix.n_layers());
  const auto selection = select_subnetwork(matrix, sc);
  const fs::path dir = o.out;
  ensure_dir(dir);
  save_selection(selection, dir / "selection.json");
  manifest.output(dir / "selection.json");
  manifest.set("budgets", {{"shallow", selection.budget.shallow},
                           {"middle", selection.budget.middle},
                           {"deep", selection.budget.deep}});
  manifest.set("boundaries", {sc.boundaries.shallow_end, sc.boundaries.middle_end});
  std::cout << "budgets: shallow " << selection.budget.shallow << ", middle " << selection.budget.middle
            << ", deep " << selection.budget.deep << '\n';
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string model;
  std::string corpus;
  std::string selection;
  std::vector<std::string> eval;
  std::string out;
  int epochs = 3, batch = 8, max_steps = 0;
  double lr = 2e-5;
  std::string optimizer = "adam";
  std::uint64_t seed = 7;
};

std::unique_ptr<Command> add_train(CLI::App& root, TrainOptions& o) {
  auto cmd = std::make_unique<Command>(root, "train", "Train only the selected experts on the target corpus");
  cmd->option("model", o.model, "Checkpoint")->required();
  cmd->option("corpus", o.corpus, "Target-language corpus file")->required();
  cmd->option("selection", o.selection, "Selection file")->required();
  cmd->option("eval", o.eval, "Other corpus files to monitor");
  cmd->option("out", o.out, "Run directory")->required();
  cmd->option("epochs", o.epochs, "Epochs");
  cmd->option("batch", o.batch, "Batch size");
  cmd->option("max-steps", o.max_steps, "Stop after this many steps (0: no limit)");
  cmd->option("lr", o.lr, "Learning rate");
  cmd->option("optimizer", o.optimizer, "adam or sgd");
  cmd->option("seed", o.seed, "Shuffling seed");
  return cmd;
}

int run_train(const TrainOptions& o, const Globals& g, const json& config, Manifest& manifest) {
  const Model initial = load_checkpoint(o.model);
  manifest.input(o.model);
  const Selection selection = load_selection(o.selection);
  manifest.input(o.selection);
  std::vector<CorpusFile> files = load_corpora({o.corpus}, manifest);
  const auto others = load_corpora(o.eval, manifest);
  files.insert(files.end(), others.begin(), others.end());
  check_vocab(files, initial.config);
  const Corpus& target = files[0].corpus;
  if (target.language != selection.config.target)
    throw InputError("selection targets '" + selection.config.target + "' but the corpus is '" +
                     target.language + "'");

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.learning_rate = o.lr;
  tc.optimizer = optimizer_from_string(o.optimizer);
  tc.seed = o.seed;
  tc.max_steps = o.max_steps;
  const ExpertSet selected = selection.ids();
  const auto mask = build_mask(selected, initial);
  const auto result = train(initial, target.train, mask, tc);

  IsolationReport report;
  report.mode = "train";
  report.optimizer = to_string(tc.optimizer);
  const std::size_t probe = std::min<std::size_t>(target.train.size(), static_cast<std::size_t>(o.batch));
  report.gradients = verify_gradient_isolation(
      initial, {target.train.begin(), target.train.begin() + static_cast<long>(probe)}, selected);
  report.has_gradients = true;
  report.status.push_back(std::string("gradient-isolation: ") +
                          (report.gradients.passed ? "PASS" : "FAIL"));
  bool failed = !report.gradients.passed;
  for (const auto& f : files) {
    const auto& lang = f.corpus.language;
    const auto profile = collect_profile(initial, f.corpus.held_out, lang, g.effective_threads());
    report.supports[lang] = routing_support(profile);
    report.overlap_mass[lang] = overlap_mass(profile, selected);
    report.loss_delta[lang] =
        corpus_loss(result.model, f.corpus.held_out) - corpus_loss(initial, f.corpus.held_out);
    if (&f == &files[0]) continue;
    const auto inv = verify_exact_invariance(initial, result.model, f.corpus.held_out, selected, profile);
    report.status.push_back(lang + ": " + inv.summary());
    if (inv.status == InvarianceStatus::Fail) failed = true;
  }

  const fs::path dir = o.out;
  ensure_dir(dir);
  write_file(dir / "config.json", config.dump(2) + "\n");
  save_checkpoint(initial, dir / "initial.ckpt");
  save_checkpoint(result.model, dir / "final.ckpt");
  write_file(dir / "loss.csv", loss_csv(result.loss_history));
  write_file(dir / "isolation_report.json", report_to_json(report));
  for (const char* f : {"config.json", "initial.ckpt", "final.ckpt", "loss.csv", "isolation_report.json"})
    manifest.output(dir / f);
  manifest.seed("shuffle", o.seed);
  manifest.set("optimizer", to_string(tc.optimizer));
  manifest.set("trained_parameters", masked_parameter_count(mask, initial.config));
  for (const auto& s : report.status) std::cout << s << '\n';
  for (const auto& [lang, d] : report.loss_delta)
    std::cout << lang << " held-out loss change " << format_number(d) << '\n';
  if (failed) throw VerificationFailure("isolation checks failed");
  return kOk;
}

// ---------------------------------------------------------------- prune

struct PruneOptions {
  std::string model;
  std::string selection;
  std::string out;
};

std::unique_ptr<Command> add_prune(CLI::App& root, PruneOptions& o) {
  auto cmd = std::make_unique<Command>(root, "prune", "Remove the selected experts from routing");
  cmd->option("model", o.model, "Checkpoint")->required();
  cmd->option("selection", o.selection, "Selection file")->required();
  cmd->option("out", o.out, "Output directory")->required();
  return cmd;
}

int run_prune(const PruneOptions& o, Manifest& manifest) {
  const Model model = load_checkpoint(o.model);
  manifest.input(o.model);
  const Selection selection = load_selection(o.selection);
  manifest.input(o.selection);
  const Model pruned = prune_experts(model, selection.ids());
  const fs::path dir = o.out;
  ensure_dir(dir);
  save_checkpoint(pruned, dir / "pruned.ckpt");
  manifest.output(dir / "pruned.ckpt");
  std::cout << "pruned " << selection.ids().size() << " experts\n";
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyOptions {
  std::string mode;
  std::string scenario = "disjoint";
  std::string model;
  std::vector<std::string> corpora;
  std::string selection;
  std::string out;
  int batches = 100, batch = 8, steps = 50, trials = 10;
  double lr = 0.05;
  std::string optimizer = "sgd";
  std::uint64_t seed = 7;
};

std::unique_ptr<Command> add_verify(CLI::App& root, VerifyOptions& o) {
  auto cmd = std::make_unique<Command>(root, "verify", "Check gradient isolation, exact invariance or the perturbation bound");
  cmd->option("mode", o.mode, "gradient, invariance or perturbation")
      ->required()
      ->check(CLI::IsMember({"gradient", "invariance", "perturbation"}));
  cmd->option("scenario", o.scenario, "Built-in scenario when no model is given: disjoint or shared")
      ->check(CLI::IsMember({"disjoint", "shared"}));
  cmd->option("model", o.model, "Checkpoint (instead of a scenario)");
  cmd->option("corpora", o.corpora, "Corpus files; the first is the target");
  cmd->option("selection", o.selection, "Selection file");
  cmd->option("out", o.out, "Output directory")->required();
  cmd->option("batches", o.batches, "Batches for the gradient check");
  cmd->option("batch", o.batch, "Batch size");
  cmd->option("steps", o.steps, "Training steps per run");
  cmd->option("trials", o.trials, "Perturbation trials");
  cmd->option("lr", o.lr, "Learning rate");
  cmd->option("optimizer", o.optimizer, "sgd or adam");
  cmd->option("seed", o.seed, "Seed");
  return cmd;
}

struct VerifySetup {
  Model model;
  ExpertSet selected;
  std::vector<Corpus> corpora;  // first is the target
};

VerifySetup verify_setup(const VerifyOptions& o, Manifest& manifest) {
  VerifySetup s;
  if (o.model.empty()) {
    auto sc = make_disjoint_scenario(o.seed, o.scenario == "shared");
    s.model = std::move(sc.model);
    s.selected = std::move(sc.selected);
    s.corpora.push_back({"target", sc.target_train, sc.target_held_out});
    s.corpora.push_back({"other", {}, sc.other_held_out});
    manifest.set("scenario", o.scenario);
    return s;
  }
  if (o.corpora.empty() || o.selection.empty())
    throw ConfigError("--model needs --corpora and --selection");
  s.model = load_checkpoint(o.model);
  manifest.input(o.model);
  s.selected = load_selection(o.selection).ids();
  manifest.input(o.selection);
  const auto files = load_corpora(o.corpora, manifest);
  check_vocab(files, s.model.config);
  for (const auto& f : files) s.corpora.push_back(f.corpus);
  return s;
}

TrainConfig verify_train_config(const VerifyOptions& o, std::uint64_t seed) {
  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.batch_size = o.batch;
  tc.optimizer = optimizer_from_string(o.optimizer);
  tc.seed = seed;
  tc.max_steps = o.steps;
  tc.epochs = 1000000;  // bounded by max_steps
  return tc;
}

int run_verify(const VerifyOptions& o, const Globals& g, Manifest& manifest) {
  const VerifySetup s = verify_setup(o, manifest);
  IsolationReport report;
  report.mode = o.mode;
  report.optimizer = o.optimizer;
  bool failed = false;
  manifest.seed("verify", o.seed);

  if (o.mode == "gradient") {
    std::vector<TokenSequence> pool;
    for (const auto& c : s.corpora) pool.insert(pool.end(), c.train.begin(), c.train.end());
    for (const auto& c : s.corpora) pool.insert(pool.end(), c.held_out.begin(), c.held_out.end());
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    int violations = 0;
    for (int b = 0; b < o.batches; ++b) {
      std::vector<TokenSequence> batch;
      for (int i = 0; i < o.batch; ++i) batch.push_back(pool[pick(rng)]);
      auto r = verify_gradient_isolation(s.model, batch, s.selected);
      if (!r.passed) ++violations;
      if (b == 0 || !r.passed) report.gradients = std::move(r);
    }
    report.has_gradients = true;
    failed = violations > 0;
    report.status.push_back("gradient-isolation: " + std::string(failed ? "FAIL" : "PASS") + " (" +
                            std::to_string(o.batches - violations) + "/" + std::to_string(o.batches) +
                            " batches exactly zero outside the routing support)");
  } else if (o.mode == "invariance") {
    const auto& target = s.corpora[0];
    const auto trained =
        train(s.model, target.train, build_mask(s.selected, s.model), verify_train_config(o, o.seed));
    bool any_not_disjoint = false;
    for (std::size_t i = 1; i < s.corpora.size(); ++i) {
      const auto& other = s.corpora[i];
      const auto profile = collect_profile(s.model, other.held_out, other.language, g.effective_threads());
      report.invariance = verify_exact_invariance(s.model, trained.model, other.held_out, s.selected, profile);
      report.has_invariance = true;
      report.supports[other.language] = routing_support(profile);
      report.overlap_mass[other.language] = overlap_mass(profile, s.selected);
      report.status.push_back(other.language + ": " + report.invariance.summary());
      if (report.invariance.status == InvarianceStatus::Fail) failed = true;
      if (report.invariance.status == InvarianceStatus::NotDisjoint) any_not_disjoint = true;
    }
    if (failed)
      report.status.push_back("exact-invariance: FAIL");
    else if (any_not_disjoint)
      report.status.push_back("exact-invariance: NOT APPLICABLE (selection overlaps another language)");
    else
      report.status.push_back("exact-invariance: PASS (bitwise)");
  } else {
    const auto& target = s.corpora[0];
    std::vector<TokenSequence> samples;
    for (const auto& c : s.corpora) samples.insert(samples.end(), c.held_out.begin(), c.held_out.end());
    std::vector<RoutingProfile> profiles;
    for (const auto& c : s.corpora) profiles.push_back(collect_profile(s.model, c.held_out, c.language, 1));
    int checked = 0, unstable = 0;
    for (int t = 0; t < o.trials; ++t) {
      const auto trained = train(s.model, target.train, build_mask(s.selected, s.model),
                                 verify_train_config(o, o.seed + static_cast<std::uint64_t>(t)));
      double radius = 0;
      for (const auto& [id, n] : update_norms(s.model, trained.model)) radius = std::max(radius, n);
      report.lipschitz = estimate_lipschitz(s.model, samples, 1.5, radius);
      report.has_lipschitz = true;
      for (std::size_t i = 0; i < s.corpora.size(); ++i) {
        auto r = perturbation_check(s.model, trained.model, s.selected, s.corpora[i].held_out,
                                    profiles[i], report.lipschitz);
        if (r.routing_stable && r.within_norm_bound) {
          ++checked;
          if (!r.holds) failed = true;
        } else {
          ++unstable;
        }
        report.perturbations.push_back(std::move(r));
      }
    }
    report.status.push_back("perturbation-bound: " + std::string(failed ? "FAIL" : "PASS") + " (" +
                            std::to_string(checked) + " checks with stable routing, " +
                            std::to_string(unstable) + " skipped)");
  }

  const fs::path dir = o.out;
  ensure_dir(dir);
  write_file(dir / "isolation_report.json", report_to_json(report));
  manifest.output(dir / "isolation_report.json");
  manifest.set("status", report.status);
  for (const auto& line : report.status) std::cout << line << '\n';
  if (failed) throw VerificationFailure("verification failed");
  return kOk;
}

// ---------------------------------------------------------------- report

struct ReportOptions {
  std::string run;
};

std::unique_ptr<Command> add_report(CLI::App& root, ReportOptions& o) {
  auto cmd = std::make_unique<Command>(root, "report", "Summarise a run directory");
  cmd->option("run", o.run, "Run directory")->required();
  return cmd;
}

int run_report(const ReportOptions& o) {
  const fs::path dir = o.run;
  std::ostringstream out;
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw InputError("bad manifest: " + std::string(e.what()));
  }
  out << "command: " << manifest.value("command", "?") << '\n';
  out << "config hash: " << manifest.value("config_hash", "?") << '\n';
  if (manifest.contains("optimizer")) out << "optimizer: " << manifest["optimizer"].get<std::string>() << '\n';
  if (fs::exists(dir / "loss.csv")) {
    std::istringstream in(read_file(dir / "loss.csv"));
    std::string line, first, last;
    std::getline(in, line);
    std::size_t steps = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (steps++ == 0) first = line;
      last = line;
    }
    out << "steps: " << steps << '\n';
    if (steps > 0) {
      out << "first loss: " << first.substr(first.find(',') + 1) << '\n';
      out << "last loss: " << last.substr(last.find(',') + 1) << '\n';
    }
  }
  if (fs::exists(dir / "isolation_report.json")) {
    const auto report = json::parse(read_file(dir / "isolation_report.json"));
    for (const auto& s : report.value("status", json::array())) out << s.get<std::string>() << '\n';
    if (report.contains("loss_delta"))
      for (const auto& [lang, d] : report["loss_delta"].items())
        out << lang << " loss change: " << format_number(d.get<double>()) << '\n';
  }
  write_file(dir / "summary.txt", out.str());
  std::cout << out.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-aware expert subnetwork tools for a toy mixture-of-experts model", "rise"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file (or a manifest to replay)");
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads for profile collection")->capture_default_str();
  app.add_flag("--exact", g.exact, "Single-threaded execution");

  GenOptions gen;
  PretrainOptions pre;
  CollectOptions col;
  AnalyzeOptions ana;
  SelectOptions sel;
  TrainOptions tr;
  PruneOptions pr;
  VerifyOptions ver;
  ReportOptions rep;
  const auto c_gen = add_gen(app, gen);
  const auto c_pre = add_pretrain(app, pre);
  const auto c_col = add_collect(app, col);
  const auto c_ana = add_analyze(app, ana);
  const auto c_sel = add_select(app, sel);
  const auto c_tr = add_train(app, tr);
  const auto c_pr = add_prune(app, pr);
  const auto c_ver = add_verify(app, ver);
  const auto c_rep = add_report(app, rep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }

  try {
    if (c_rep->parsed()) return run_report(rep);
    const std::vector<std::pair<Command*, std::string>> commands = {
        {c_gen.get(), gen.out}, {c_pre.get(), pre.out}, {c_col.get(), col.out},
        {c_ana.get(), ana.out}, {c_sel.get(), sel.out}, {c_tr.get(), tr.out},
        {c_pr.get(), pr.out},   {c_ver.get(), ver.out}};
    Command* active = nullptr;
    fs::path out;
    for (const auto& [c, dir] : commands)
      if (c->parsed()) active = c, out = dir;
    json config;
    config[active->app()->get_name()] = active->effective();
    config["threads"] = g.threads;
    config["exact"] = g.exact;
    Manifest manifest(active->app()->get_name(), config);
    try {
      if (active == c_gen.get()) run_gen(gen, manifest);
      if (active == c_pre.get()) run_pretrain(pre, manifest);
      if (active == c_col.get()) run_collect(col, g, manifest);
      if (active == c_ana.get()) run_analyze(ana, manifest);
      if (active == c_sel.get()) run_select(sel, manifest);
      if (active == c_tr.get()) run_train(tr, g, config, manifest);
      if (active == c_pr.get()) run_prune(pr, manifest);
      if (active == c_ver.get()) run_verify(ver, g, manifest);
    } catch (const VerificationFailure&) {
      manifest.write(out);
      throw;
    }
    manifest.write(out);
    return kOk;
  } catch (const VerificationFailure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kInputError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }
}
