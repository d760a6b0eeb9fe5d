#include "impromptu/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "impromptu/eval.hpp"
#include "impromptu/index.hpp"
#include "impromptu/kernels.hpp"

namespace impromptu::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InputError("config " + where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      if constexpr (std::is_same_v<T, fs::path>) {
        out = j_.at(key).get<std::string>();
      } else {
        out = j_.at(key).get<T>();
      }
    } catch (const json::exception& e) {
      throw InputError("config " + where_ + "." + key + ": " + e.what());
    }
  }

  std::optional<Reader> sub(const char* key) {
    if (!j_.contains(key)) return std::nullopt;
    seen_.insert(key);
    return Reader(j_.at(key), where_ + "." + key);
  }

  const json& raw() const { return j_; }
  void mark(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw InputError("unknown config key " + where_ + "." + k);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

lm::ModelConfig read_model(Reader& r, lm::ModelConfig base) {
  auto m = r.sub("model");
  if (!m) return base;
  m->get("n_layers", base.n_layers);
  m->get("n_heads", base.n_heads);
  m->get("d_model", base.d_model);
  m->get("d_ff", base.d_ff);
  m->get("max_len", base.max_len);
  m->get("n_aug_layers", base.n_aug_layers);
  m->get("dropout", base.dropout);
  m->finish();
  return base;
}

json model_json(const lm::ModelConfig& c) {
  auto j = c.to_json();
  j.erase("vocab_size");
  return j;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  Reader r(j, "$");
  r.get("corpus", c.corpus);
  r.get("seeds", c.seeds);
  r.get("lexicon", c.lexicon);
  r.get("gold", c.gold);
  r.get("workdir", c.workdir);
  if (j.contains("corpus_split")) {
    r.mark("corpus_split");
    c.corpus_split = corpus::parse_split(j.at("corpus_split").get<std::string>());
  }
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.get("k", c.k_list);

  if (auto s = r.sub("synth")) {
    s->get("enabled", c.synth.enabled);
    s->get("n_sentences", c.synth.base.n_sentences);
    s->get("drug_fraction", c.synth.base.drug_fraction);
    s->get("food_fraction", c.synth.base.food_fraction);
    s->get("seeds", c.synth.base.seeds);
    s->get("seed", c.synth.base.seed);
    s->get("planted_per_seed", c.synth.planted_per_seed);
    s->get("occurrences_per_term", c.synth.occurrences_per_term);
    s->finish();
  }
  if (auto p = r.sub("phrases")) {
    p->get("delta", c.phrase_delta);
    p->get("threshold", c.phrase_threshold);
    p->get("min_count", c.min_count);
    p->finish();
  }
  if (auto e = r.sub("embed")) {
    e->get("dim", c.embed.dim);
    e->get("window", c.embed.window);
    e->get("negatives", c.embed.negatives);
    e->get("epochs", c.embed.epochs);
    e->get("lr", c.embed.lr);
    e->get("subsample", c.embed.subsample);
    e->get("workers", c.embed.workers);
    e->finish();
  }
  if (auto co = r.sub("coarse")) {
    co->get("top_n", c.coarse_top_n);
    c.coarse_model = read_model(*co, c.coarse_model);
    co->get("epochs", c.coarse_train.epochs);
    co->get("patience", c.coarse_train.patience);
    co->get("batch_size", c.coarse_train.batch_size);
    co->get("lr", c.coarse_train.lr);
    co->get("threshold", c.filter_threshold);
    co->finish();
  }
  if (auto f = r.sub("fine")) {
    f->get("top_n", c.fine_top_n);
    c.fine_model = read_model(*f, c.fine_model);
    f->get("epochs", c.fine_train.epochs);
    f->get("patience", c.fine_train.patience);
    f->get("batch_size", c.fine_train.batch_size);
    f->get("lr", c.fine_train.lr);
    f->get("cam_rate", c.fine_train.cam_rate);
    f->get("cam_weight", c.fine_train.cam_weight);
    f->get("rounds", c.rounds);
    f->get("keep_fraction", c.keep_fraction);
    f->finish();
  }
  if (auto d = r.sub("devset")) {
    d->get("provider", c.provider);
    d->get("provider_file", c.provider_file);
    d->get("per_seed_sentences", c.devset.per_seed_sentences);
    d->get("euphemisms_per_seed", c.devset.euphemisms_per_seed);
    d->get("max_attempts", c.devset.max_attempts);
    d->finish();
  }
  r.finish();
  if (c.provider != "template" && c.provider != "file" && c.provider != "external") {
    throw InputError("devset.provider must be template, file or external");
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw InputError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

json PipelineConfig::to_json() const {
  return {{"corpus", corpus.string()},
          {"seeds", seeds.string()},
          {"lexicon", lexicon.string()},
          {"gold", gold.string()},
          {"workdir", workdir.string()},
          {"corpus_split", std::string(corpus::split_name(corpus_split))},
          {"seed", seed},
          {"threads", threads},
          {"k", k_list},
          {"synth",
           {{"enabled", synth.enabled},
            {"n_sentences", synth.base.n_sentences},
            {"drug_fraction", synth.base.drug_fraction},
            {"food_fraction", synth.base.food_fraction},
            {"seeds", synth.base.seeds},
            {"seed", synth.base.seed},
            {"planted_per_seed", synth.planted_per_seed},
            {"occurrences_per_term", synth.occurrences_per_term}}},
          {"phrases", {{"delta", phrase_delta}, {"threshold", phrase_threshold}, {"min_count", min_count}}},
          {"embed",
           {{"dim", embed.dim},
            {"window", embed.window},
            {"negatives", embed.negatives},
            {"epochs", embed.epochs},
            {"lr", embed.lr},
            {"subsample", embed.subsample},
            {"workers", embed.workers}}},
          {"coarse",
           {{"top_n", coarse_top_n},
            {"model", model_json(coarse_model)},
            {"epochs", coarse_train.epochs},
            {"patience", coarse_train.patience},
            {"batch_size", coarse_train.batch_size},
            {"lr", coarse_train.lr},
            {"threshold", filter_threshold}}},
          {"fine",
           {{"top_n", fine_top_n},
            {"model", model_json(fine_model)},
            {"epochs", fine_train.epochs},
            {"patience", fine_train.patience},
            {"batch_size", fine_train.batch_size},
            {"lr", fine_train.lr},
            {"cam_rate", fine_train.cam_rate},
            {"cam_weight", fine_train.cam_weight},
            {"rounds", rounds},
            {"keep_fraction", keep_fraction}}},
          {"devset",
           {{"provider", provider},
            {"provider_file", provider_file.string()},
            {"per_seed_sentences", devset.per_seed_sentences},
            {"euphemisms_per_seed", devset.euphemisms_per_seed},
            {"max_attempts", devset.max_attempts}}}};
}

fs::path PipelineConfig::seeds_path() const { return seeds.empty() ? artifact("seeds.txt") : seeds; }
fs::path PipelineConfig::gold_path() const { return gold.empty() ? artifact("gold.jsonl") : gold; }

// ---------------------------------------------------------------------------
// Artifact helpers

std::uint64_t stage_seed(std::uint64_t master, const std::string& stage) {
  return Rng(master).fork(fnv1a(stage)).next_u64();
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << text;
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> read_term_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open term list " + path.string());
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream words(line);
    std::string term;
    if (!(words >> term)) continue;
    std::string extra;
    if (words >> extra) throw InputError(path.string() + ": one term per line expected, got '" + line + "'");
    for (auto& ch : term) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (seen.insert(term).second) out.push_back(term);
  }
  return out;
}

void write_term_list(const fs::path& path, const std::vector<std::string>& terms) {
  std::string text;
  for (const auto& t : terms) text += t + "\n";
  write_file_atomic(path, text);
}

namespace {

std::ifstream open_artifact(const fs::path& path, const std::string& producer) {
  std::ifstream in(path);
  if (!in) {
    throw InputError("missing artifact " + path.string() +
                     (producer.empty() ? std::string() : " (produced by '" + producer + "')"));
  }
  return in;
}

template <class F>
std::string render(F&& f) {
  std::ostringstream out;
  f(out);
  return out.str();
}

void save_atomic(const fs::path& path, const std::function<void(const fs::path&)>& save) {
  const auto tmp = fs::path(path.string() + ".tmp");
  save(tmp);
  fs::rename(tmp, path);
}

std::vector<std::string> load_seeds(const PipelineConfig& c, const corpus::Vocabulary& vocab) {
  const auto path = c.seeds_path();
  if (!fs::exists(path)) throw InputError("missing seed list " + path.string());
  auto seeds = read_term_list(path);
  if (seeds.empty()) throw InputError("seed list " + path.string() + " is empty");
  for (const auto& s : seeds) vocab.require(s);
  return seeds;
}

}  // namespace

LoadedCorpus load_corpus(const PipelineConfig& c) {
  auto vin = open_artifact(c.artifact("vocab.jsonl"), c.synth.enabled ? "synth" : "ingest");
  auto vocab = std::make_shared<const corpus::Vocabulary>(corpus::Vocabulary::read_jsonl(vin));
  auto cin = open_artifact(c.artifact("corpus.jsonl"), c.synth.enabled ? "synth" : "ingest");
  LoadedCorpus out{corpus::encode(corpus::read_text_jsonl(cin), vocab), 0};
  for (const auto& s : out.corpus.sentences) out.max_sentence_len = std::max(out.max_sentence_len, s.tokens.size());
  return out;
}

lm::ModelConfig sized_config(lm::ModelConfig config, const LoadedCorpus& c) {
  config.vocab_size = static_cast<int>(c.corpus.vocab->size());
  config.max_len = std::max(config.max_len, static_cast<int>(c.max_sentence_len));
  config.validate();
  return config;
}

std::vector<fine::DevItem> dev_items(const std::vector<llmgen::DevSample>& samples, const corpus::Vocabulary& vocab,
                                     int max_len) {
  std::vector<fine::DevItem> out;
  std::size_t dropped = 0;
  for (const auto& s : samples) {
    if (static_cast<int>(s.text.size()) > max_len) {
      ++dropped;
      continue;
    }
    fine::DevItem d;
    for (const auto& w : s.text) d.tokens.push_back(vocab.lookup(w));
    for (std::int32_t i = 0; i < s.mask_len; ++i) {
      d.positions.push_back(s.mask_start + i);
      d.tokens[static_cast<std::size_t>(s.mask_start + i)] = vocab.specials().mask;
    }
    d.label = s.label == llmgen::Label::euphemistic ? 1 : 0;
    out.push_back(std::move(d));
  }
  if (dropped) spdlog::warn("{} dev samples longer than {} tokens dropped", dropped, max_len);
  return out;
}

// ---------------------------------------------------------------------------
// Stages

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest",      "synth",       "embed",  "index",   "build-coarse",
                                              "train-coarse", "filter",     "build-fine", "devset", "train-fine",
                                              "iterate",     "score",       "evaluate", "report"};
  return names;
}

namespace {

struct Stage {
  std::vector<std::string> outputs;
  std::function<void(const PipelineConfig&)> run;
};

void stage_synth(const PipelineConfig& c) {
  const auto base = datasets::generate_base_corpus(c.synth.base);
  const auto merged = corpus::merge_phrases(base, c.phrase_delta, c.phrase_threshold);
  auto vocab = std::make_shared<const corpus::Vocabulary>(corpus::build_vocab(merged, c.min_count));
  const auto encoded = corpus::encode(merged, vocab);
  Rng rng = Rng(c.synth.base.seed).fork(fnv1a("plant"));
  const auto [planted, gold] = datasets::plant_impromptu(encoded, c.synth.base.seeds, c.synth.planted_per_seed,
                                                         c.synth.occurrences_per_term, rng);
  spdlog::info("synthetic corpus: {} sentences, {} terms, {} planted terms", planted.sentences.size(),
               planted.vocab->n_terms(), gold.terms.size());
  write_file_atomic(c.artifact("gold.jsonl"), render([&](std::ostream& o) { gold.write_jsonl(o); }));
  write_term_list(c.artifact("seeds.txt"), c.synth.base.seeds);
  write_file_atomic(c.artifact("vocab.jsonl"), render([&](std::ostream& o) { planted.vocab->write_jsonl(o); }));
  write_file_atomic(c.artifact("corpus.jsonl"), render([&](std::ostream& o) { corpus::write_jsonl(o, planted); }));
}

void stage_ingest(const PipelineConfig& c) {
  if (c.corpus.empty()) throw InputError("ingest needs --corpus");
  std::ifstream in(c.corpus);
  if (!in) throw InputError("cannot open corpus " + c.corpus.string());
  const auto text = c.corpus.extension() == ".jsonl" ? corpus::read_text_jsonl(in) : corpus::ingest(in, c.corpus_split);
  if (text.skipped_malformed) spdlog::warn("{} malformed lines skipped", text.skipped_malformed);
  if (text.sentences.empty()) throw InputError("corpus " + c.corpus.string() + " has no sentences");
  const auto merged = corpus::merge_phrases(text, c.phrase_delta, c.phrase_threshold);
  const auto vocab = corpus::build_vocab(merged, c.min_count);
  spdlog::info("ingested {} sentences, {} terms", merged.sentences.size(), vocab.n_terms());
  write_file_atomic(c.artifact("vocab.jsonl"), render([&](std::ostream& o) { vocab.write_jsonl(o); }));
  write_file_atomic(c.artifact("corpus.jsonl"), render([&](std::ostream& o) { corpus::write_jsonl(o, merged); }));
}

void stage_embed(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  auto opts = c.embed;
  opts.seed = stage_seed(c.seed, "embed");
  const auto m = embed::train_embeddings(lc.corpus, opts);
  write_file_atomic(c.artifact("embeddings.txt"), render([&](std::ostream& o) { m.write_text(o); }));
}

embed::EmbeddingMatrix load_embeddings(const PipelineConfig& c) {
  auto in = open_artifact(c.artifact("embeddings.txt"), "embed");
  return embed::EmbeddingMatrix::read_text(in);
}

void stage_index(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto idx = index::build_inverted_index(lc.corpus);
  write_file_atomic(c.artifact("index.jsonl"), render([&](std::ostream& o) { idx.write_jsonl(o); }));
}

index::InvertedIndex load_index(const PipelineConfig& c, const LoadedCorpus& lc) {
  auto in = open_artifact(c.artifact("index.jsonl"), "index");
  return index::InvertedIndex::read_jsonl(in, lc.corpus.vocab);
}

void stage_build_coarse(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto m = load_embeddings(c);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  Rng rng(stage_seed(c.seed, "build-coarse"));
  const auto ds = datasets::build_coarse_dataset(lc.corpus, m, seeds, c.coarse_top_n, rng);
  spdlog::info("coarse dataset: {} train, {} dev", ds.train.size(), ds.dev.size());
  write_file_atomic(c.artifact("coarse_train.jsonl"),
                    render([&](std::ostream& o) { datasets::write_samples_jsonl(o, ds.train, lc.corpus); }));
  write_file_atomic(c.artifact("coarse_dev.jsonl"),
                    render([&](std::ostream& o) { datasets::write_samples_jsonl(o, ds.dev, lc.corpus); }));
}

std::vector<datasets::MaskedSample> load_samples(const fs::path& path, const std::string& producer,
                                                 const corpus::Corpus& corpus) {
  auto in = open_artifact(path, producer);
  return datasets::read_samples_jsonl(in, corpus);
}

void stage_train_coarse(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto train = load_samples(c.artifact("coarse_train.jsonl"), "build-coarse", lc.corpus);
  const auto dev = load_samples(c.artifact("coarse_dev.jsonl"), "build-coarse", lc.corpus);
  auto opts = c.coarse_train;
  opts.seed = stage_seed(c.seed, "train-coarse");
  auto model = coarse::train_coarse(train, dev, sized_config(c.coarse_model, lc), opts);
  model.threshold = c.filter_threshold;
  save_atomic(c.artifact("coarse.ckpt"), [&](const fs::path& p) { model.save(p); });
}

void stage_filter(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto m = load_embeddings(c);
  const auto idx = load_index(c, lc);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  if (!fs::exists(c.artifact("coarse.ckpt"))) throw InputError("missing artifact " + c.artifact("coarse.ckpt").string() + " (produced by 'train-coarse')");
  const auto model = coarse::CoarseModel::load(c.artifact("coarse.ckpt"));
  auto terms = datasets::fine_candidates(m, seeds, c.fine_top_n);
  if (!c.lexicon.empty()) {
    const auto lex = read_term_list(c.lexicon);
    const std::set<std::string> keep(lex.begin(), lex.end());
    std::erase_if(terms, [&](const std::string& t) { return !keep.count(t); });
  }
  // seeds stay in the training set even when they are not their own neighbours
  for (const auto& s : seeds) terms.insert(s);
  const auto r = coarse::filter_candidates(model, lc.corpus, terms, idx, c.filter_threshold);
  spdlog::info("filter kept {} of {} occurrences of {} terms", r.kept.size(), r.scored.size(), terms.size());
  write_term_list(c.artifact("fine_candidates.txt"), {terms.begin(), terms.end()});
  write_file_atomic(c.artifact("filter_scored.jsonl"),
                    render([&](std::ostream& o) { coarse::write_refined_jsonl(o, r.scored); }));
  write_file_atomic(c.artifact("refined.jsonl"), render([&](std::ostream& o) { coarse::write_refined_jsonl(o, r.kept); }));
}

std::vector<coarse::Occurrence> load_refined(const PipelineConfig& c) {
  auto in = open_artifact(c.artifact("refined.jsonl"), "filter");
  auto occ = coarse::read_refined_jsonl(in);
  if (occ.empty()) throw InvariantError("the refined set is empty; the coarse filter removed every occurrence");
  return occ;
}

void stage_build_fine(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto samples = fine::occurrence_samples(lc.corpus, load_refined(c));
  write_file_atomic(c.artifact("fine_samples.jsonl"),
                    render([&](std::ostream& o) { datasets::write_samples_jsonl(o, samples, lc.corpus); }));
}

std::unique_ptr<llmgen::GenerationProvider> make_provider(const PipelineConfig& c, const LoadedCorpus& lc) {
  if (c.provider == "file") {
    if (c.provider_file.empty()) throw InputError("devset.provider_file is required for the file provider");
    return std::make_unique<llmgen::FileProvider>(c.provider_file);
  }
  if (c.provider == "external") return std::make_unique<llmgen::ExternalProvider>(llmgen::ExternalConfig::from_env());
  // benign occurrences of fine candidates: the same words in ordinary use
  std::set<std::string> candidates;
  if (fs::exists(c.artifact("fine_candidates.txt"))) {
    const auto terms = read_term_list(c.artifact("fine_candidates.txt"));
    candidates.insert(terms.begin(), terms.end());
  }
  std::vector<llmgen::MarkedSentence> pool;
  for (const auto& s : lc.corpus.sentences) {
    if (s.split != corpus::Split::white || s.tokens.size() < 3) continue;
    auto words = lc.corpus.decode(s);
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (candidates.empty() || candidates.count(words[i])) pool.push_back({words, i});
    }
  }
  return std::make_unique<llmgen::TemplateProvider>(stage_seed(c.seed, "template"), std::move(pool));
}

void stage_devset(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto idx = load_index(c, lc);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  std::set<std::string> exclude;
  if (fs::exists(c.gold_path())) {
    std::ifstream in(c.gold_path());
    exclude = datasets::GoldLabels::read_jsonl(in).planted_terms();
  }
  auto provider = make_provider(c, lc);
  auto opts = c.devset;
  opts.seed = stage_seed(c.seed, "devset");
  const auto ds = llmgen::build_dev_set(*provider, seeds, lc.corpus, idx, opts, exclude);
  spdlog::info("dev set: {} samples from the {} provider", ds.samples.size(), provider->kind());
  write_file_atomic(c.artifact("devset_euphemisms.json"), json(ds.euphemisms).dump(2) + "\n");
  write_file_atomic(c.artifact("devset.jsonl"), render([&](std::ostream& o) { llmgen::write_dev_jsonl(o, ds.samples); }));
}

std::vector<fine::DevItem> load_dev(const PipelineConfig& c, const LoadedCorpus& lc, int max_len) {
  const auto path = c.artifact("devset.jsonl");
  if (!fs::exists(path)) {
    spdlog::warn("no dev set at {}; fine training runs every epoch", path.string());
    return {};
  }
  std::ifstream in(path);
  return dev_items(llmgen::read_dev_jsonl(in), *lc.corpus.vocab, max_len);
}

std::vector<corpus::TermId> seed_ids(const std::vector<std::string>& seeds, const corpus::Vocabulary& v) {
  std::vector<corpus::TermId> out;
  for (const auto& s : seeds) out.push_back(v.require(s));
  return out;
}

fine::TrainOptions fine_options(const PipelineConfig& c) {
  auto o = c.fine_train;
  o.seed = stage_seed(c.seed, "train-fine");
  return o;
}

void stage_train_fine(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  const auto config = sized_config(c.fine_model, lc);
  const auto dev = load_dev(c, lc, config.max_len);
  const auto samples = fine::occurrence_samples(lc.corpus, load_refined(c));
  const auto model = fine::train_fine(samples, config, dev, seed_ids(seeds, *lc.corpus.vocab), fine_options(c));
  save_atomic(c.artifact("fine.ckpt"), [&](const fs::path& p) { model.save(p); });
}

void stage_iterate(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  const auto config = sized_config(c.fine_model, lc);
  const auto dev = load_dev(c, lc, config.max_len);
  std::optional<fine::FineModel> round0;
  if (fs::exists(c.artifact("fine.ckpt"))) round0 = fine::FineModel::load(c.artifact("fine.ckpt"));
  std::optional<datasets::GoldLabels> gold;
  if (fs::exists(c.gold_path())) {
    std::ifstream in(c.gold_path());
    gold = datasets::GoldLabels::read_jsonl(in);
  }
  fine::IterateOptions opts;
  opts.rounds = c.rounds;
  opts.keep_fraction = c.keep_fraction;
  opts.train = fine_options(c);
  opts.checkpoint_dir = c.workdir;
  opts.round0_model = round0 ? &*round0 : nullptr;
  const auto r = fine::iterate_training(lc.corpus, load_refined(c), config, dev, seeds, opts, gold ? &*gold : nullptr);
  save_atomic(c.artifact("fine_final.ckpt"), [&](const fs::path& p) { r.model.save(p); });
  write_file_atomic(c.artifact("iteration.json"), r.history_json().dump(2) + "\n");
}

void stage_score(const PipelineConfig& c) {
  const auto lc = load_corpus(c);
  const auto seeds = load_seeds(c, *lc.corpus.vocab);
  if (!fs::exists(c.artifact("fine_final.ckpt"))) {
    throw InputError("missing artifact " + c.artifact("fine_final.ckpt").string() + " (produced by 'iterate')");
  }
  const auto model = fine::FineModel::load(c.artifact("fine_final.ckpt"));
  const auto scores = fine::score_candidates(model.params, lc.corpus, load_refined(c), seed_ids(seeds, *lc.corpus.vocab));
  const auto ranking = fine::to_ranking(scores, {seeds.begin(), seeds.end()});
  write_file_atomic(c.artifact("ranking.jsonl"), render([&](std::ostream& o) { eval::write_ranking_jsonl(o, ranking); }));
}

std::vector<eval::RankedTerm> load_ranking(const PipelineConfig& c) {
  auto in = open_artifact(c.artifact("ranking.jsonl"), "score");
  return eval::read_ranking_jsonl(in);
}

datasets::GoldLabels load_gold(const PipelineConfig& c) {
  auto in = open_artifact(c.gold_path(), c.synth.enabled ? "synth" : "");
  return datasets::GoldLabels::read_jsonl(in);
}

void stage_evaluate(const PipelineConfig& c) {
  const auto ranking = load_ranking(c);
  const auto gold = load_gold(c);
  const auto lc = load_corpus(c);
  const auto idx = load_index(c, lc);
  const auto report = eval::evaluate_detections(ranking, gold, idx, c.k_list);
  write_file_atomic(c.artifact("report.json"), report.to_json().dump(2) + "\n");
  write_file_atomic(c.artifact("report.csv"), render([&](std::ostream& o) { report.write_csv(o); }));
}

json read_json_if(const fs::path& p) {
  if (!fs::exists(p)) return nullptr;
  std::ifstream in(p);
  return json::parse(in);
}

void stage_report(const PipelineConfig& c) {
  auto rin = open_artifact(c.artifact("report.json"), "evaluate");
  const auto report = json::parse(rin);
  const auto ranking = load_ranking(c);
  const auto gold = load_gold(c);
  const auto lc = load_corpus(c);
  const auto idx = load_index(c, lc);

  std::vector<std::string> pool;
  for (const auto& r : ranking) pool.push_back(r.term);
  std::string pr = "k,precision_permille,recall,random_recall\n";
  json baseline = json::array();
  for (const auto& row : report.at("results")) {
    const auto k = row.at("k").get<std::size_t>();
    const double rnd = eval::random_baseline_recall(pool, gold, idx, k);
    baseline.push_back({{"k", k}, {"random_recall", rnd}});
    pr += fmt::format("{},{:.4f},{:.4f},{:.4f}\n", k, row.at("precision_permille").get<double>(),
                      row.at("recall").get<double>(), rnd);
  }
  const auto ranks = eval::rank_positions(ranking, gold);
  std::string rk = "term,seed,rank\n";
  for (std::size_t i = 0; i < gold.terms.size(); ++i) {
    rk += fmt::format("{},{},{}\n", gold.terms[i].term, gold.terms[i].seed, ranks[i]);
  }
  json coarse_hist = nullptr, fine_hist = nullptr;
  if (fs::exists(c.artifact("coarse.ckpt"))) {
    const auto m = coarse::CoarseModel::load(c.artifact("coarse.ckpt"));
    coarse_hist = json::array();
    for (const auto& e : m.history) {
      coarse_hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_loss", e.dev_loss},
                             {"dev_accuracy", e.dev_accuracy}});
    }
  }
  if (fs::exists(c.artifact("fine_final.ckpt"))) {
    const auto m = fine::FineModel::load(c.artifact("fine_final.ckpt"));
    fine_hist = json::array();
    for (const auto& e : m.history) {
      fine_hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss},
                           {"dev_accuracy", e.dev_accuracy ? json(*e.dev_accuracy) : json(nullptr)}});
    }
  }
  const json summary{{"config", c.to_json()},
                     {"detection", report},
                     {"random_baseline", baseline},
                     {"n_ranked", ranking.size()},
                     {"coarse_history", coarse_hist},
                     {"fine_history", fine_hist},
                     {"iteration", read_json_if(c.artifact("iteration.json"))}};
  write_file_atomic(c.artifact("pr_series.csv"), pr);
  write_file_atomic(c.artifact("rank_series.csv"), rk);
  write_file_atomic(c.artifact("summary.json"), summary.dump(2) + "\n");
}

const std::map<std::string, Stage>& stages() {
  static const std::map<std::string, Stage> s{
      {"synth", {{"corpus.jsonl", "vocab.jsonl", "gold.jsonl", "seeds.txt"}, stage_synth}},
      {"ingest", {{"corpus.jsonl", "vocab.jsonl"}, stage_ingest}},
      {"embed", {{"embeddings.txt"}, stage_embed}},
      {"index", {{"index.jsonl"}, stage_index}},
      {"build-coarse", {{"coarse_train.jsonl", "coarse_dev.jsonl"}, stage_build_coarse}},
      {"train-coarse", {{"coarse.ckpt"}, stage_train_coarse}},
      {"filter", {{"fine_candidates.txt", "filter_scored.jsonl", "refined.jsonl"}, stage_filter}},
      {"build-fine", {{"fine_samples.jsonl"}, stage_build_fine}},
      {"devset", {{"devset.jsonl", "devset_euphemisms.json"}, stage_devset}},
      {"train-fine", {{"fine.ckpt"}, stage_train_fine}},
      {"iterate", {{"fine_final.ckpt", "iteration.json"}, stage_iterate}},
      {"score", {{"ranking.jsonl"}, stage_score}},
      {"evaluate", {{"report.json", "report.csv"}, stage_evaluate}},
      {"report", {{"summary.json", "pr_series.csv", "rank_series.csv"}, stage_report}},
  };
  return s;
}

}  // namespace

StageResult run_stage(const std::string& name, const PipelineConfig& c, bool force) {
  const auto it = stages().find(name);
  if (it == stages().end()) throw InputError("unknown stage '" + name + "'");
  if (c.threads > 0) kernels::set_threads(c.threads);
  StageResult r{name, false, {}};
  for (const auto& o : it->second.outputs) r.outputs.push_back(c.artifact(o));
  bool done = std::all_of(r.outputs.begin(), r.outputs.end(), [](const fs::path& p) { return fs::exists(p); });
  if (done && !force) {
    // rerun when an artifact of an earlier stage is newer than our oldest output
    auto oldest = fs::file_time_type::max();
    for (const auto& p : r.outputs) oldest = std::min(oldest, fs::last_write_time(p));
    for (const auto& prior : stage_names()) {
      if (prior == name) break;
      for (const auto& o : stages().at(prior).outputs) {
        const auto p = c.artifact(o);
        if (std::find(r.outputs.begin(), r.outputs.end(), p) != r.outputs.end()) continue;
        if (fs::exists(p) && fs::last_write_time(p) > oldest) {
          spdlog::info("stage {}: {} is newer than its outputs, rerunning", name, o);
          done = false;
        }
      }
      if (!done) break;
    }
  }
  if (done && !force) {
    spdlog::info("stage {}: outputs present, skipped", name);
    r.skipped = true;
    return r;
  }
  fs::create_directories(c.workdir);
  const auto t0 = std::chrono::steady_clock::now();
  it->second.run(c);
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  spdlog::info("stage {} finished in {:.1f}s", name, dt.count());
  return r;
}

std::vector<StageResult> run_pipeline(const PipelineConfig& c, bool force) {
  std::vector<StageResult> out;
  for (const auto& name : stage_names()) {
    if (name == (c.synth.enabled ? "ingest" : "synth")) continue;
    out.push_back(run_stage(name, c, force));
  }
  return out;
}

}  // namespace impromptu::pipeline
