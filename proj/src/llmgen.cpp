#include "impromptu/llmgen.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace impromptu::llmgen {

using nlohmann::json;

std::string DevSample::joined() const { return corpus::detokenize(text); }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool contains_run(const std::vector<std::string>& text, const std::vector<std::string>& run) {
  if (run.empty() || run.size() > text.size()) return false;
  return std::search(text.begin(), text.end(), run.begin(), run.end()) != text.end();
}

}  // namespace

std::vector<std::string> parse_numbered_list(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> items;
  std::string word, cur;
  std::size_t expected = 1;
  bool open = false;
  while (in >> word) {
    if (word == std::to_string(expected) + ".") {
      if (open) items.push_back(trim(cur));
      cur.clear();
      open = true;
      ++expected;
      continue;
    }
    if (!open) continue;
    if (!cur.empty()) cur.push_back(' ');
    cur += word;
  }
  if (open) items.push_back(trim(cur));
  std::erase_if(items, [](const std::string& s) { return s.empty(); });
  return items;
}

namespace {

// Seeds match case-insensitively, with '_' and ' ' interchangeable.
std::string seed_key(const std::string& seed) {
  auto k = lower(trim(seed));
  std::replace(k.begin(), k.end(), '_', ' ');
  return k;
}

}  // namespace

std::string normalize_term(const std::string& term) { return corpus::detokenize(corpus::tokenize(term)); }

// ---------------------------------------------------------------------------
// File provider

FileProvider::FileProvider(const std::filesystem::path& path) : origin_(path.string()) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open provider file " + path.string());
  parse(in);
}

FileProvider::FileProvider(std::istream& in, std::string origin) : origin_(std::move(origin)) { parse(in); }

void FileProvider::parse(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.rfind("benign:", 0) == 0) {
      benign_.push_back(trim(t.substr(7)));
      continue;
    }
    const auto bar = t.find('|');
    if (bar == std::string::npos) {
      spdlog::warn("{}:{}: unrecognized line skipped", origin_, lineno);
      continue;
    }
    const auto seed = seed_key(t.substr(0, bar));
    auto items = parse_numbered_list(t.substr(bar + 1));
    if (seed.empty() || items.empty()) {
      spdlog::warn("{}:{}: empty euphemism row skipped", origin_, lineno);
      continue;
    }
    auto& list = lists_[seed];
    list.insert(list.end(), items.begin(), items.end());
  }
}

std::vector<std::string> FileProvider::euphemisms(const std::string& seed, std::size_t n) {
  auto it = lists_.find(seed_key(seed));
  if (it == lists_.end()) throw ProviderError(origin_ + " has no euphemism list for '" + seed + "'", 1);
  const auto& v = it->second;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

std::string FileProvider::benign_sentence(const BenignRequest& r) {
  if (benign_.empty()) throw ProviderError(origin_ + " has no benign sentences", r.attempt + 1);
  // later attempts step through the pool with a stride coprime-ish to its size
  const std::size_t i = (r.index + static_cast<std::size_t>(r.attempt) * 7919) % benign_.size();
  return benign_[i];
}

// ---------------------------------------------------------------------------
// Template provider

namespace {

const std::vector<std::string> kOnsets{"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "gl", "tr", "sn"};
const std::vector<std::string> kNuclei{"a", "e", "i", "o", "u", "oo", "ai"};
const std::vector<std::string> kCodas{"", "", "x", "n", "sh", "k", "z"};

const std::vector<std::string> kFrames{
    "we walked the [dog] along the river before lunch",
    "my sister painted the [fence] last weekend",
    "the [library] closes early on sundays",
    "he fixed the [bicycle] in the garage",
    "they planted a [tree] near the school",
    "she reads the [newspaper] every morning",
    "our [neighbor] brought over some soup",
    "the [train] was late again this morning",
    "i finally cleaned the [kitchen] yesterday",
    "the kids played [football] after class",
    "we booked a [cabin] by the lake",
    "the [museum] has a new exhibit on birds",
};

std::string pseudo_word(Rng& rng) {
  std::string w;
  const int syl = 2 + static_cast<int>(rng.uniform_index(2));
  for (int i = 0; i < syl; ++i) {
    w += kOnsets[rng.uniform_index(kOnsets.size())];
    w += kNuclei[rng.uniform_index(kNuclei.size())];
  }
  w += kCodas[rng.uniform_index(kCodas.size())];
  return w;
}

}  // namespace

TemplateProvider::TemplateProvider(std::uint64_t rng_seed, std::vector<MarkedSentence> pool)
    : rng_seed_(rng_seed), pool_(std::move(pool)) {
  for (const auto& s : pool_) {
    if (s.mark >= s.tokens.size()) throw InputError("template pool: marked position out of range");
  }
}

std::vector<std::string> TemplateProvider::euphemisms(const std::string& seed, std::size_t n) {
  Rng rng = Rng(rng_seed_).fork(fnv1a(lower(seed)));
  std::vector<std::string> out;
  std::set<std::string> seen;
  while (out.size() < n) {
    auto w = pseudo_word(rng);
    if (seen.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

std::string TemplateProvider::benign_sentence(const BenignRequest& r) {
  Rng rng = Rng(rng_seed_ ^ 0x5bd1e995ULL).fork(r.index * 131 + static_cast<std::size_t>(r.attempt));
  if (pool_.empty()) return kFrames[rng.uniform_index(kFrames.size())];
  const auto& s = pool_[rng.uniform_index(pool_.size())];
  std::string out;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += i == s.mark ? "[" + s.tokens[i] + "]" : s.tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// External provider

ExternalConfig ExternalConfig::from_env() {
  ExternalConfig c;
  if (const char* url = std::getenv("IMPROMPTU_PROVIDER_URL")) c.url = url;
  if (c.url.empty()) throw InputError("IMPROMPTU_PROVIDER_URL is not set");
  if (const char* var = std::getenv("IMPROMPTU_PROVIDER_KEY_VAR")) {
    const char* key = std::getenv(var);
    if (!key) throw InputError(std::string("provider key variable ") + var + " is not set");
    c.api_key = key;
  }
  if (const char* t = std::getenv("IMPROMPTU_PROVIDER_TIMEOUT")) {
    try {
      c.timeout = std::chrono::seconds(std::stoi(t));
    } catch (const std::exception&) {
      throw InputError(std::string("IMPROMPTU_PROVIDER_TIMEOUT is not an integer: ") + t);
    }
  }
  return c;
}

ExternalProvider::ExternalProvider(ExternalConfig config) : config_(std::move(config)) {
  if (config_.max_attempts < 1) throw InputError("provider max_attempts must be positive");
}

std::vector<std::string> ExternalProvider::complete(const std::string& prompt, int n) {
  const auto scheme_end = config_.url.find("://");
  const auto path_start = config_.url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const auto host = config_.url.substr(0, path_start);
  const auto path = path_start == std::string::npos ? std::string("/") : config_.url.substr(path_start);
  httplib::Client client(host);
  if (!client.is_valid()) throw InputError("provider URL not supported: " + config_.url);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  const auto body = json{{"prompt", prompt}, {"n", n}}.dump();

  std::string last;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      last = httplib::to_string(res.error());
    } else if (res->status != 200) {
      last = "HTTP " + std::to_string(res->status);
    } else {
      try {
        const auto j = json::parse(res->body);
        std::vector<std::string> out;
        for (const auto& c : j.at("choices")) {
          if (c.is_string()) {
            out.push_back(c.get<std::string>());
          } else {
            spdlog::warn("provider returned a non-string choice; skipped");
          }
        }
        return out;
      } catch (const json::exception& e) {
        last = std::string("malformed response: ") + e.what();
      }
    }
    spdlog::warn("provider attempt {}/{} failed: {}", attempt, config_.max_attempts, last);
  }
  throw ProviderError("provider request failed after " + std::to_string(config_.max_attempts) +
                          " attempts: " + last,
                      config_.max_attempts);
}

std::string euphemism_prompt(const std::string& seed, std::size_t n) {
  return "List " + std::to_string(n) + " euphemisms or slang names that people use for the drug \"" + seed +
         "\". Answer with a numbered list only, for example: 1. term 2. term";
}

std::string benign_prompt(const BenignRequest& r) {
  return "Here is a sentence where \"" + r.euphemism + "\" is used as a euphemism for " + r.seed + ": \"" +
         corpus::detokenize(r.positive_text) +
         "\". Write one new everyday sentence on a similar topic length that contains no drug reference and no "
         "euphemism. Wrap exactly one ordinary noun in square brackets, like [word].";
}

std::vector<std::string> ExternalProvider::euphemisms(const std::string& seed, std::size_t n) {
  std::vector<std::string> out;
  for (const auto& choice : complete(euphemism_prompt(seed, n), 1)) {
    auto items = parse_numbered_list(choice);
    if (items.empty() && !trim(choice).empty()) items.push_back(trim(choice));
    out.insert(out.end(), items.begin(), items.end());
  }
  if (out.size() > n) out.resize(n);
  return out;
}

std::string ExternalProvider::benign_sentence(const BenignRequest& r) {
  const auto choices = complete(benign_prompt(r), 1);
  if (choices.empty()) return {};
  return choices.front();
}

// ---------------------------------------------------------------------------
// Dev set

std::map<std::string, std::vector<std::string>> generate_euphemism_candidates(
    GenerationProvider& provider, const std::vector<std::string>& seeds, std::size_t n_per_seed,
    const std::set<std::string>& exclude) {
  std::map<std::string, std::vector<std::string>> out;
  if (n_per_seed == 0) return out;
  std::set<std::string> excluded;
  for (const auto& e : exclude) excluded.insert(normalize_term(e));
  for (const auto& seed : seeds) {
    auto& list = out[seed];
    std::set<std::string> seen;
    for (const auto& raw : provider.euphemisms(seed, n_per_seed)) {
      const auto term = normalize_term(raw);
      if (term.empty()) {
        spdlog::warn("unusable euphemism '{}' for {} skipped", raw, seed);
        continue;
      }
      if (excluded.count(term) || !seen.insert(term).second) continue;
      list.push_back(term);
    }
  }
  return out;
}

std::optional<DevSample> parse_marked(const std::string& text, const std::string& seed) {
  const auto open = text.find('[');
  const auto close = text.find(']', open == std::string::npos ? 0 : open);
  if (open == std::string::npos || close == std::string::npos) return std::nullopt;
  if (text.find('[', open + 1) < close || text.find_first_of("[]", close + 1) != std::string::npos) {
    return std::nullopt;
  }
  auto before = corpus::tokenize(text.substr(0, open));
  const auto span = corpus::tokenize(text.substr(open + 1, close - open - 1));
  const auto after = corpus::tokenize(text.substr(close + 1));
  if (span.empty()) return std::nullopt;
  DevSample s;
  s.label = Label::benign;
  s.seed = seed;
  s.mask_start = static_cast<std::int32_t>(before.size());
  s.mask_len = static_cast<std::int32_t>(span.size());
  s.term = corpus::detokenize(span);
  s.text = std::move(before);
  s.text.insert(s.text.end(), span.begin(), span.end());
  s.text.insert(s.text.end(), after.begin(), after.end());
  return s;
}

namespace {

std::optional<std::string> check_sample(const DevSample& s, const std::vector<std::vector<std::string>>& euph) {
  if (s.text.empty()) return "empty text";
  if (s.mask_len < 1 || s.mask_start < 0 ||
      static_cast<std::size_t>(s.mask_start) + static_cast<std::size_t>(s.mask_len) > s.text.size()) {
    return "mask span out of range";
  }
  const auto first = s.text.begin() + s.mask_start;
  const std::vector<std::string> span(first, first + s.mask_len);
  if (std::any_of(span.begin(), span.end(), [](const std::string& t) { return t.empty(); })) {
    return "mask span token absent";
  }
  if (s.label == Label::euphemistic) {
    if (span != corpus::tokenize(s.term)) return "positive text lacks the inserted euphemism '" + s.term + "'";
  } else {
    for (const auto& e : euph) {
      if (contains_run(s.text, e)) return "negative text contains euphemism '" + corpus::detokenize(e) + "'";
    }
  }
  return std::nullopt;
}

}  // namespace

Validation validate_dev_set(const std::vector<DevSample>& samples, const std::set<std::string>* euphemisms) {
  std::set<std::string> terms;
  if (euphemisms) {
    terms = *euphemisms;
  } else {
    for (const auto& s : samples) {
      if (s.label == Label::euphemistic) terms.insert(s.term);
    }
  }
  std::vector<std::vector<std::string>> euph;
  for (const auto& t : terms) {
    auto toks = corpus::tokenize(t);
    if (!toks.empty()) euph.push_back(std::move(toks));
  }
  Validation v;
  std::set<std::vector<std::string>> texts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto reason = check_sample(samples[i], euph);
    if (!reason && !texts.insert(samples[i].text).second) reason = "duplicate text";
    if (reason) {
      v.rejected.push_back({i, *reason});
    } else {
      v.accepted.push_back(samples[i]);
    }
  }
  return v;
}

DevSet build_dev_set(GenerationProvider& provider, const std::vector<std::string>& seeds,
                     const corpus::Corpus& c, const index::InvertedIndex& idx, const DevSetOptions& o,
                     const std::set<std::string>& exclude) {
  if (o.per_seed_sentences == 0) throw InputError("per_seed_sentences must be positive");
  if (o.max_attempts < 1) throw InputError("max_attempts must be positive");
  DevSet out;
  out.euphemisms = generate_euphemism_candidates(provider, seeds, o.euphemisms_per_seed, exclude);
  std::set<std::string> all_terms;
  std::vector<std::vector<std::string>> all_tokens;
  for (const auto& [seed, list] : out.euphemisms) {
    for (const auto& t : list) {
      if (all_terms.insert(t).second) all_tokens.push_back(corpus::tokenize(t));
    }
  }

  Rng rng(o.seed);
  std::vector<DevSample> positives;
  for (const auto& seed : seeds) {
    const auto& list = out.euphemisms[seed];
    if (list.empty()) throw InputError("no usable euphemisms for seed '" + seed + "'");
    std::vector<index::Posting> sites;
    std::set<corpus::SentenceId> used;
    for (const auto& p : idx.postings(seed)) {
      if (used.insert(p.sid).second) sites.push_back(p);
    }
    if (sites.size() < o.per_seed_sentences) {
      throw InputError("seed '" + seed + "' occurs in " + std::to_string(sites.size()) + " sentences, need " +
                       std::to_string(o.per_seed_sentences));
    }
    rng.shuffle(sites);
    sites.resize(o.per_seed_sentences);
    std::sort(sites.begin(), sites.end());
    for (std::size_t j = 0; j < sites.size(); ++j) {
      const auto* sent = c.find(sites[j].sid);
      if (!sent) throw InvariantError("index refers to a sentence missing from the corpus");
      const auto words = c.decode(*sent);
      DevSample pos;
      bool ok = false;
      for (int attempt = 0; attempt < o.max_attempts && !ok; ++attempt) {
        const auto& term = list[(j + static_cast<std::size_t>(attempt)) % list.size()];
        const auto toks = corpus::tokenize(term);
        pos = DevSample{{}, sites[j].pos, static_cast<std::int32_t>(toks.size()), Label::euphemistic, seed, term};
        pos.text.assign(words.begin(), words.begin() + sites[j].pos);
        pos.text.insert(pos.text.end(), toks.begin(), toks.end());
        pos.text.insert(pos.text.end(), words.begin() + sites[j].pos + 1, words.end());
        std::vector<DevSample> trial = positives;
        trial.push_back(pos);
        ok = validate_dev_set(trial, &all_terms).rejected.empty();
      }
      if (!ok) {
        throw ProviderError("could not build a valid positive for seed '" + seed + "'", o.max_attempts);
      }
      positives.push_back(std::move(pos));
    }
  }

  std::vector<DevSample> negatives;
  std::set<std::vector<std::string>> texts;
  for (const auto& p : positives) texts.insert(p.text);
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const auto& p = positives[i];
    std::string last;
    bool ok = false;
    for (int attempt = 0; attempt < o.max_attempts && !ok; ++attempt) {
      const auto text = provider.benign_sentence({p.seed, p.term, p.text, i, attempt});
      auto neg = parse_marked(text, p.seed);
      if (!neg) {
        last = "malformed benign sentence '" + text + "'";
        spdlog::warn("{}", last);
        continue;
      }
      if (auto reason = check_sample(*neg, all_tokens)) {
        last = *reason;
      } else if (texts.count(neg->text)) {
        last = "duplicate text";
      } else {
        texts.insert(neg->text);
        negatives.push_back(std::move(*neg));
        ok = true;
      }
    }
    if (!ok) {
      throw ProviderError("benign sample " + std::to_string(i) + " rejected after " +
                              std::to_string(o.max_attempts) + " attempts: " + last,
                          o.max_attempts);
    }
  }

  for (std::size_t i = 0; i < positives.size(); ++i) {
    out.samples.push_back(std::move(positives[i]));
    out.samples.push_back(std::move(negatives[i]));
  }
  return out;
}

void write_dev_jsonl(std::ostream& out, const std::vector<DevSample>& samples) {
  for (const auto& s : samples) {
    out << json{{"text", s.joined()},
                {"mask_start", s.mask_start},
                {"mask_len", s.mask_len},
                {"label", s.label == Label::euphemistic ? "euph" : "benign"},
                {"seed", s.seed}}
               .dump()
        << '\n';
  }
}

std::vector<DevSample> read_dev_jsonl(std::istream& in) {
  std::vector<DevSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto row = json::parse(line);
      DevSample s;
      std::istringstream words(row.at("text").get<std::string>());
      for (std::string w; words >> w;) s.text.push_back(w);
      s.mask_start = row.at("mask_start").get<std::int32_t>();
      s.mask_len = row.at("mask_len").get<std::int32_t>();
      const auto label = row.at("label").get<std::string>();
      if (label != "euph" && label != "benign") throw InputError("label must be euph or benign");
      s.label = label == "euph" ? Label::euphemistic : Label::benign;
      s.seed = row.at("seed").get<std::string>();
      if (s.mask_start < 0 || s.mask_len < 1 ||
          static_cast<std::size_t>(s.mask_start + s.mask_len) > s.text.size()) {
        throw InputError("mask span out of range");
      }
      s.term = corpus::detokenize({s.text.begin() + s.mask_start, s.text.begin() + s.mask_start + s.mask_len});
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw InputError("dev set line " + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("dev set line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace impromptu::llmgen
