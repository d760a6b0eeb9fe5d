#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "impromptu/llmgen.hpp"

using namespace impromptu;
using namespace impromptu::llmgen;
using impromptu::testing::make_corpus;

namespace {

const std::string kProviderFile = std::string(IMPROMPTU_TEST_DATA) + "/provider_22.txt";

const std::vector<std::string> kSeeds{
    "alprazolam", "amphetamine",     "cocaine",          "ecstasy",    "ghb",         "heroin",
    "hydrocodone", "ketamine",       "lsd",              "marijuana_concentrates",    "mescaline",
    "methamphetamine", "methylphenidate", "opium",       "oxycodone",  "pcp",         "percocet",
    "promethazine", "psilocybin_mushrooms", "steroids",  "synthetic_cathinones",      "fentanyl"};

// four sentences per seed, plus filler
corpus::Corpus seed_corpus() {
  const std::vector<std::string> frames{"he tried to buy {} near the station", "the price of {} went up again",
                                        "someone offered me {} at the party", "never mix {} with alcohol"};
  std::vector<std::string> lines;
  for (const auto& s : kSeeds) {
    for (const auto& f : frames) {
      auto l = f;
      l.replace(l.find("{}"), 2, s);
      lines.push_back(l);
    }
  }
  lines.push_back("the weather was nice today");
  return make_corpus(lines);
}

DevSample sample(std::vector<std::string> text, std::int32_t start, std::int32_t len, Label label,
                 std::string term) {
  return {std::move(text), start, len, label, "cocaine", std::move(term)};
}

}  // namespace

TEST(ParseNumberedList, Examples) {
  EXPECT_EQ(parse_numbered_list("1. Coke 2. Blow 3. Nose candy"),
            (std::vector<std::string>{"Coke", "Blow", "Nose candy"}));
  const auto h = parse_numbered_list("16. x 1. Vikes 2. Norco 3. 7.5s 4. Hydros");
  EXPECT_EQ(h, (std::vector<std::string>{"Vikes", "Norco", "7.5s", "Hydros"}));
  EXPECT_EQ(parse_numbered_list("1. a\n2. b\n"), (std::vector<std::string>{"a", "b"}));
  EXPECT_TRUE(parse_numbered_list("no numbers here").empty());
  EXPECT_EQ(parse_numbered_list("1. 2. b"), (std::vector<std::string>{"b"}));
}

TEST(FileProvider, ReadsFixture) {
  FileProvider p(kProviderFile);
  EXPECT_EQ(p.lists().size(), 22u);
  for (const auto& [seed, list] : p.lists()) EXPECT_EQ(list.size(), 20u) << seed;
  const auto coke = p.euphemisms("Cocaine", 20);
  ASSERT_EQ(coke.size(), 20u);
  EXPECT_EQ(coke[0], "Coke");
  EXPECT_EQ(coke[1], "Blow");
  EXPECT_EQ(coke[2], "Snow");
  EXPECT_EQ(p.euphemisms("cocaine", 3), (std::vector<std::string>{"Coke", "Blow", "Snow"}));
  EXPECT_EQ(p.euphemisms("marijuana_concentrates", 20), p.euphemisms("Marijuana Concentrates", 20));
  const auto hydro = p.euphemisms("hydrocodone", 20);
  EXPECT_EQ(hydro[17], "7.5s");
  EXPECT_GE(p.benign_pool_size(), 66u);
  EXPECT_THROW(p.euphemisms("caffeine", 5), ProviderError);
  EXPECT_THROW(FileProvider("/nonexistent/provider.txt"), InputError);
}

TEST(FileProvider, InlineRowsAndBenignCycling) {
  std::istringstream in("# c\nFoo Bar | 1. x 2. y\nnot a row\nbenign: a [b] c\nbenign: d [e]\n");
  FileProvider p(in, "inline");
  EXPECT_EQ(p.euphemisms("foo_bar", 5), (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(p.benign_sentence({"s", "x", {}, 0, 0}), "a [b] c");
  EXPECT_EQ(p.benign_sentence({"s", "x", {}, 1, 0}), "d [e]");
  std::istringstream empty("Foo | 1. x\n");
  FileProvider q(empty, "empty");
  EXPECT_THROW(q.benign_sentence({"s", "x", {}, 0, 0}), ProviderError);
}

TEST(GenerateCandidates, NormalizesDeduplicatesExcludes) {
  std::istringstream in("S | 1. Nose  Candy 2. nose candy 3. Coke 4. !!! 5. Blow\n");
  FileProvider p(in, "inline");
  const auto m = generate_euphemism_candidates(p, {"s"}, 5, {"blow"});
  EXPECT_EQ(m.at("s"), (std::vector<std::string>{"nose candy", "coke"}));
  EXPECT_TRUE(generate_euphemism_candidates(p, {"s"}, 0).empty());
}

TEST(TemplateProvider, DeterministicAndDistinct) {
  TemplateProvider a(7), b(7), c(8);
  const auto x = a.euphemisms("cocaine", 20);
  EXPECT_EQ(x, b.euphemisms("cocaine", 20));
  EXPECT_NE(x, c.euphemisms("cocaine", 20));
  EXPECT_NE(x, a.euphemisms("heroin", 20));
  EXPECT_EQ(std::set<std::string>(x.begin(), x.end()).size(), 20u);
  EXPECT_EQ(a.benign_sentence({"s", "e", {}, 3, 1}), b.benign_sentence({"s", "e", {}, 3, 1}));
  EXPECT_TRUE(parse_marked(a.benign_sentence({"s", "e", {}, 0, 0}), "s"));
  TemplateProvider pooled(1, {{{"we", "saw", "a", "heron"}, 3}});
  EXPECT_EQ(pooled.benign_sentence({"s", "e", {}, 0, 0}), "we saw a [heron]");
  EXPECT_THROW(TemplateProvider(1, {{{"a"}, 1}}), InputError);
}

TEST(ParseMarked, Examples) {
  const auto s = parse_marked("We baked fresh [Bread] today", "x");
  ASSERT_TRUE(s);
  EXPECT_EQ(s->text, (std::vector<std::string>{"we", "baked", "fresh", "bread", "today"}));
  EXPECT_EQ(s->mask_start, 3);
  EXPECT_EQ(s->mask_len, 1);
  EXPECT_EQ(s->term, "bread");
  EXPECT_EQ(s->label, Label::benign);
  const auto two = parse_marked("[ice cream] is cold", "x");
  ASSERT_TRUE(two);
  EXPECT_EQ(two->mask_start, 0);
  EXPECT_EQ(two->mask_len, 2);
  EXPECT_FALSE(parse_marked("no marks", "x"));
  EXPECT_FALSE(parse_marked("two [a] and [b]", "x"));
  EXPECT_FALSE(parse_marked("empty [] span", "x"));
  EXPECT_FALSE(parse_marked("[nested [a]]", "x"));
}

TEST(Validate, RejectsLeaksDuplicatesAndBadSpans) {
  const std::vector<DevSample> v{
      sample({"buy", "coke", "now"}, 1, 1, Label::euphemistic, "coke"),
      sample({"a", "coke", "please"}, 0, 1, Label::benign, "a"),
      sample({"buy", "coke", "now"}, 1, 1, Label::euphemistic, "coke"),
      sample({"x", "y"}, 1, 2, Label::benign, "y"),
      sample({"buy", "snow", "now"}, 1, 1, Label::euphemistic, "coke"),
      sample({"a", "dog", "ran"}, 1, 1, Label::benign, "dog"),
  };
  const auto r = validate_dev_set(v);
  ASSERT_EQ(r.rejected.size(), 4u);
  EXPECT_EQ(r.rejected[0].index, 1u);
  EXPECT_NE(r.rejected[0].reason.find("coke"), std::string::npos);
  EXPECT_EQ(r.rejected[1].reason, "duplicate text");
  EXPECT_EQ(r.rejected[2].reason, "mask span out of range");
  EXPECT_EQ(r.rejected[3].index, 4u);
  EXPECT_EQ(r.accepted.size(), 2u);
  const std::set<std::string> extra{"ran"};
  EXPECT_EQ(validate_dev_set({v[5]}, &extra).rejected.size(), 1u);
}

TEST(BuildDevSet, TwentyTwoSeedsGive132CleanSamples) {
  const auto c = seed_corpus();
  const auto idx = index::build_inverted_index(c);
  FileProvider p(kProviderFile);
  const auto d = build_dev_set(p, kSeeds, c, idx, {});
  ASSERT_EQ(d.samples.size(), 132u);
  std::map<std::string, int> pos_per_seed;
  std::size_t n_pos = 0;
  std::set<std::string> terms;
  for (const auto& [seed, list] : d.euphemisms) terms.insert(list.begin(), list.end());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    EXPECT_EQ(s.label, i % 2 == 0 ? Label::euphemistic : Label::benign);
    if (s.label == Label::euphemistic) {
      ++n_pos;
      ++pos_per_seed[s.seed];
      EXPECT_TRUE(terms.count(s.term));
      EXPECT_FALSE(std::count(s.text.begin(), s.text.end(), s.seed));
    }
  }
  EXPECT_EQ(n_pos, 66u);
  for (const auto& s : kSeeds) EXPECT_EQ(pos_per_seed[s], 3) << s;
  EXPECT_TRUE(validate_dev_set(d.samples, &terms).rejected.empty());
  // same inputs, same output
  FileProvider p2(kProviderFile);
  EXPECT_EQ(build_dev_set(p2, kSeeds, c, idx, {}).samples, d.samples);
}

TEST(BuildDevSet, TemplateProviderIsClean) {
  const auto c = seed_corpus();
  const auto idx = index::build_inverted_index(c);
  TemplateProvider p(3);
  DevSetOptions o;
  o.per_seed_sentences = 2;
  const auto d = build_dev_set(p, {"cocaine", "heroin", "lsd"}, c, idx, o);
  EXPECT_EQ(d.samples.size(), 12u);
  EXPECT_TRUE(validate_dev_set(d.samples).rejected.empty());
}

TEST(BuildDevSet, Errors) {
  const auto c = seed_corpus();
  const auto idx = index::build_inverted_index(c);
  FileProvider p(kProviderFile);
  DevSetOptions o;
  o.per_seed_sentences = 5;
  EXPECT_THROW(build_dev_set(p, {"cocaine"}, c, idx, o), InputError);
  o.per_seed_sentences = 0;
  EXPECT_THROW(build_dev_set(p, {"cocaine"}, c, idx, o), InputError);

  // every benign sentence leaks a euphemism
  std::istringstream in("cocaine | 1. snow\nbenign: fresh [snow] fell\n");
  FileProvider leaky(in, "leaky");
  try {
    build_dev_set(leaky, {"cocaine"}, c, idx, {});
    FAIL() << "expected ProviderError";
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.attempts(), 3);
  }
}

TEST(DevJsonl, RoundTrip) {
  const std::vector<DevSample> v{sample({"buy", "nose", "candy", "now"}, 1, 2, Label::euphemistic, "nose candy"),
                                 sample({"a", "dog", "ran"}, 1, 1, Label::benign, "dog")};
  std::stringstream io;
  write_dev_jsonl(io, v);
  EXPECT_EQ(read_dev_jsonl(io), v);
  std::istringstream bad(R"({"text":"a b","mask_start":1,"mask_len":2,"label":"euph","seed":"s"})");
  EXPECT_THROW(read_dev_jsonl(bad), InputError);
  std::istringstream label(R"({"text":"a b","mask_start":0,"mask_len":1,"label":"maybe","seed":"s"})");
  EXPECT_THROW(read_dev_jsonl(label), InputError);
}

namespace {

// Local stand-in for a completion endpoint.
struct StubServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;
  int calls = 0;

  explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server.Post("/v1/complete", [this, handler](const httplib::Request& rq, httplib::Response& rs) {
      ++calls;
      handler(rq, rs);
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~StubServer() {
    server.stop();
    thread.join();
  }
  ExternalConfig config() const {
    ExternalConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/complete";
    c.timeout = std::chrono::seconds(5);
    return c;
  }
};

}  // namespace

TEST(ExternalProvider, ParsesChoices) {
  StubServer stub([](const httplib::Request& rq, httplib::Response& rs) {
    const auto body = nlohmann::json::parse(rq.body);
    EXPECT_TRUE(body.contains("prompt"));
    rs.set_content(R"({"choices": ["1. Coke 2. Blow 3. Snow"]})", "application/json");
  });
  ExternalProvider p(stub.config());
  EXPECT_EQ(p.euphemisms("cocaine", 2), (std::vector<std::string>{"Coke", "Blow"}));
}

TEST(ExternalProvider, RetriesThenProviderError) {
  StubServer stub([](const httplib::Request&, httplib::Response& rs) { rs.status = 503; });
  auto cfg = stub.config();
  cfg.max_attempts = 2;
  ExternalProvider p(cfg);
  try {
    p.complete("x", 1);
    FAIL() << "expected ProviderError";
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.attempts(), 2);
    EXPECT_NE(std::string(e.what()).find("HTTP 503"), std::string::npos);
  }
  EXPECT_EQ(stub.calls, 2);
}

TEST(ExternalProvider, MalformedResponseIsRetried) {
  StubServer stub([](const httplib::Request&, httplib::Response& rs) { rs.set_content("not json", "text/plain"); });
  auto cfg = stub.config();
  cfg.max_attempts = 3;
  ExternalProvider p(cfg);
  EXPECT_THROW(p.complete("x", 1), ProviderError);
  EXPECT_EQ(stub.calls, 3);
}

TEST(ExternalProvider, LiveEndpointOptIn) {
  if (!std::getenv("IMPROMPTU_PROVIDER_URL")) GTEST_SKIP() << "IMPROMPTU_PROVIDER_URL not set";
  ExternalProvider p(ExternalConfig::from_env());
  EXPECT_FALSE(p.euphemisms("cocaine", 5).empty());
}
