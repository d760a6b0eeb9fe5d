#include <algorithm>
#include <map>
#include <sstream>

#include "impromptu/datasets.hpp"

namespace impromptu::datasets {

namespace {

using Pool = std::vector<std::string>;

// Slot fillers for one topic that uses the shared purchase/consumption frames.
struct FrameTopic {
  Pool items;     // {D}
  Pool units;     // {U}
  Pool sources;   // {V}
  Pool quality;   // {A}
  Pool context;   // {C}
  Pool verbs;     // {VB}
  Pool effects;   // {E}
  Pool mixers;    // {MIX}
};

struct BenignTopic {
  Pool nouns;      // {N}
  Pool adjectives; // {AJ}
  Pool verbs;      // {VB}
  Pool places;     // {PL}
};

const Pool kQuantities{"two", "three", "five", "ten", "half", "a", "some", "1", "2", "3", "20"};
const Pool kTimes{"week", "night", "month", "weekend", "friday", "saturday", "summer", "year", "tuesday"};
const Pool kPlaces{"town", "downtown", "the_city", "campus", "uptown", "the_suburbs", "chicago", "ohio"};
const Pool kAdverbs{"hard", "fast", "different", "better", "slow"};

const Pool kDrugUnits{"grams", "g", "points", "bags", "caps", "tabs"};
const Pool kDrugSources{"dealer", "plug", "vendor", "connect", "guy", "friend"};
const Pool kDrugQuality{"pure", "strong", "weak", "cut", "clean", "potent", "dirty", "legit", "decent"};
const Pool kDrugEffects{"high", "euphoric", "numb", "sick", "paranoid", "wired", "sedated", "calm"};
const Pool kDrugMixers{"alcohol", "benzos", "weed", "xanax", "booze"};

std::map<std::string, FrameTopic> drug_topics() {
  std::map<std::string, FrameTopic> t;
  t["cocaine"] = {{}, kDrugUnits, kDrugSources, kDrugQuality,
                  {"nose", "lines", "rails", "bump", "powder", "drip", "rock", "key", "baggie", "straw", "mirror", "razor"},
                  {"snort", "sniff", "rail"}, kDrugEffects, kDrugMixers};
  t["heroin"] = {{}, kDrugUnits, kDrugSources, kDrugQuality,
                 {"needle", "nod", "tar", "spoon", "junkie", "withdrawal", "bundle", "stamp", "cotton", "fix", "vein", "tourniquet"},
                 {"shoot", "smoke", "bang"}, kDrugEffects, kDrugMixers};
  t["ketamine"] = {{}, kDrugUnits, kDrugSources, kDrugQuality,
                   {"hole", "dissociation", "horse", "vet", "crystals", "trip", "wonky", "sedation", "vial", "tranq", "bladder", "couch"},
                   {"sniff", "bump", "inject"}, kDrugEffects, kDrugMixers};
  t["mescaline"] = {{}, kDrugUnits, kDrugSources, kDrugQuality,
                    {"cactus", "peyote", "visuals", "desert", "sacred", "brew", "extraction", "buttons", "shaman", "tea", "nausea", "san_pedro"},
                    {"brew", "drink", "eat"}, kDrugEffects, kDrugMixers};
  t["oxycodone"] = {{}, kDrugUnits, kDrugSources, kDrugQuality,
                    {"pills", "prescription", "pharmacy", "opioid", "pain", "tolerance", "blues", "doctor", "script", "refill", "milligrams", "press"},
                    {"swallow", "crush", "take"}, kDrugEffects, kDrugMixers};
  for (auto& [name, topic] : t) topic.items = {name};
  return t;
}

FrameTopic food_topic() {
  return {{"pizza", "pasta", "coffee", "coke", "tea", "bread", "cheese", "chicken", "rice", "cake",
           "soup", "cookies", "salad", "burgers", "noodles", "candy", "juice", "chocolate", "ice_cream", "tacos"},
          {"slices", "pounds", "boxes", "bottles", "cups", "loaves"},
          {"shop", "market", "store", "bakery", "deli", "friend"},
          {"fresh", "tasty", "stale", "cheap", "sweet", "spicy", "decent", "legit"},
          {"oven", "plate", "sauce", "crust", "kitchen", "recipe", "fridge", "spoon", "lunch", "dinner"},
          {"eat", "cook", "bake", "heat"},
          {"full", "happy", "stuffed", "sleepy", "great"},
          {"milk", "wine", "ketchup", "soda"}};
}

std::vector<BenignTopic> benign_topics() {
  return {
      {{"team", "game", "coach", "player", "season", "ball", "stadium", "goal", "league", "match", "jersey", "world_cup"},
       {"amazing", "boring", "close", "rough", "lucky", "intense"},
       {"watch", "play", "win", "coach", "train", "score"},
       {"stadium", "gym", "field", "bar"}},
      {{"rain", "storm", "snow", "forecast", "wind", "sky", "clouds", "heat", "umbrella", "thunder", "fog", "sunrise"},
       {"cold", "warm", "cloudy", "windy", "humid", "clear"},
       {"check", "expect", "avoid", "enjoy", "predict", "track"},
       {"coast", "valley", "beach", "mountains"}},
      {{"laptop", "phone", "battery", "screen", "app", "update", "keyboard", "charger", "server", "router", "printer", "software"},
       {"broken", "slow", "new", "buggy", "fast", "cheap"},
       {"fix", "install", "reboot", "replace", "upgrade", "test"},
       {"office", "repair_shop", "desk", "lab"}},
      {{"car", "engine", "tires", "brakes", "truck", "mechanic", "oil", "transmission", "bumper", "garage", "mileage", "dashboard"},
       {"noisy", "reliable", "used", "rusty", "smooth", "expensive"},
       {"drive", "repair", "wash", "park", "sell", "tow"},
       {"highway", "dealership", "parking_lot", "driveway"}},
      {{"movie", "actor", "sequel", "trailer", "director", "plot", "scene", "ending", "cinema", "series", "episode", "soundtrack"},
       {"funny", "scary", "long", "weird", "beautiful", "predictable"},
       {"watch", "stream", "review", "rewatch", "recommend", "skip"},
       {"theater", "couch", "festival", "premiere"}},
      {{"exam", "teacher", "homework", "essay", "class", "grade", "professor", "lecture", "library", "textbook", "semester", "quiz"},
       {"hard", "easy", "unfair", "useful", "confusing", "early"},
       {"study", "finish", "submit", "read", "grade", "skip"},
       {"school", "dorm", "classroom", "college"}},
      {{"flight", "hotel", "passport", "luggage", "airport", "ticket", "train", "tour", "beach", "museum", "visa", "itinerary"},
       {"delayed", "cheap", "crowded", "lovely", "late", "relaxing"},
       {"book", "pack", "cancel", "visit", "plan", "explore"},
       {"europe", "japan", "mexico", "italy"}},
      {{"dog", "cat", "puppy", "kitten", "leash", "collar", "vet", "treats", "litter", "fish", "hamster", "kennel"},
       {"cute", "lazy", "playful", "sick", "tiny", "loyal"},
       {"feed", "walk", "adopt", "groom", "train", "bathe"},
       {"park", "shelter", "yard", "clinic"}},
      {{"song", "album", "guitar", "band", "concert", "drummer", "lyrics", "chorus", "vinyl", "playlist", "singer", "piano"},
       {"catchy", "loud", "classic", "underrated", "sad", "epic"},
       {"play", "hear", "record", "tune", "learn", "stream"},
       {"venue", "studio", "festival", "club"}},
      {{"tomatoes", "seeds", "soil", "roses", "hose", "weeds", "shovel", "compost", "fence", "lawn", "garden", "fertilizer"},
       {"green", "dry", "healthy", "overgrown", "muddy", "fresh"},
       {"plant", "water", "prune", "dig", "grow", "mow"},
       {"backyard", "greenhouse", "balcony", "allotment"}},
  };
}

// Shared frames. {D} item, {Q} quantity, {U} unit, {V} source, {T} time,
// {A} quality, {C} context, {VB} verb, {E} effect, {MIX} mixer, {P} place,
// {ADV} adverb.
const std::vector<std::string> kItemFrames{
    "i bought {Q} {U} of {D} from my {V} last {T}",
    "the {D} from this {V} was {A} and the {C} was {A}",
    "anyone know where to get {A} {D} in {P}",
    "{D} hits {ADV} when you {VB} it",
    "my {V} said the {D} is {A} this {T}",
    "first time trying {D} and i felt {E} for hours",
    "never mix {D} with {MIX} unless you want to feel {E}",
    "{D} prices went up again in {P} this {T}",
    "how long does {D} last if you {VB} it with a {C}",
    "i think the {D} was {A} because the {C} felt {E}",
    "got some {D} and a {C} for the {T}",
    "is {Q} {U} of {D} too much for one {T}",
    "we split the {D} and the {C} at my place",
    "cant find {A} {D} anywhere near {P} lately",
};

const std::vector<std::string> kContextFrames{
    "the {C} was {A} and i felt {E} all {T}",
    "my {V} ran out so i waited all {T} for the {C}",
    "used a {C} and felt {E} for hours",
    "need a new {C} before {T}",
};

const std::vector<std::string> kBenignFrames{
    "the {N} was {AJ} last {T}",
    "i need to {VB} the {N} before {T}",
    "we saw a {AJ} {N} in {P}",
    "does anyone have a {AJ} {N} for the {N2}",
    "my {N} is {AJ} and the {N2} is {AJ}",
    "{Q} {N} and a {N2} at the {PL}",
    "how do you {VB} a {N} without a {N2}",
    "this {N} makes the {N2} look {AJ}",
    "cant believe the {N} at the {PL} was so {AJ}",
    "going to {VB} the {N} this {T} with my family",
};

const std::string& pick(const Pool& p, Rng& rng) { return p[rng.uniform_index(p.size())]; }

std::string fill(const std::string& frame, const std::map<std::string, const Pool*>& slots,
                 Rng& rng) {
  std::string out;
  std::size_t i = 0;
  std::map<std::string, std::string> chosen_n;  // keep {N} and {N2} distinct
  while (i < frame.size()) {
    if (frame[i] == '{') {
      const auto close = frame.find('}', i);
      const auto key = frame.substr(i + 1, close - i - 1);
      const auto it = slots.find(key);
      if (it == slots.end()) throw InvariantError("unfilled slot {" + key + "}");
      std::string word = pick(*it->second, rng);
      if (key == "N2") {
        for (int tries = 0; tries < 8 && word == chosen_n["N"]; ++tries) word = pick(*it->second, rng);
      }
      chosen_n[key] = word;
      out += word;
      i = close + 1;
    } else {
      out.push_back(frame[i++]);
    }
  }
  return out;
}

std::map<std::string, const Pool*> frame_slots(const FrameTopic& t) {
  return {{"D", &t.items},   {"U", &t.units},   {"V", &t.sources},  {"A", &t.quality},
          {"C", &t.context}, {"VB", &t.verbs},  {"E", &t.effects},  {"MIX", &t.mixers},
          {"Q", &kQuantities}, {"T", &kTimes},  {"P", &kPlaces},    {"ADV", &kAdverbs}};
}

}  // namespace

std::vector<std::string> builtin_drug_topics() {
  std::vector<std::string> out;
  for (auto& [name, _] : drug_topics()) out.push_back(name);
  return out;
}

corpus::TextCorpus generate_base_corpus(const SynthOptions& o) {
  if (o.seeds.empty()) throw InputError("synthetic corpus needs at least one seed");
  if (o.drug_fraction < 0 || o.food_fraction < 0 || o.drug_fraction + o.food_fraction > 1.0) {
    throw InputError("synthetic corpus fractions must be in [0,1] and sum to at most 1");
  }
  const auto drugs = drug_topics();
  for (const auto& s : o.seeds) {
    if (!drugs.count(s)) throw InputError("no built-in synthetic topic for seed '" + s + "'");
  }
  const auto food = food_topic();
  const auto benign = benign_topics();
  Rng rng(o.seed);

  const auto n_drug = static_cast<std::size_t>(o.drug_fraction * static_cast<double>(o.n_sentences));
  const auto n_food = static_cast<std::size_t>(o.food_fraction * static_cast<double>(o.n_sentences));

  // a fixed interleaving of sentence kinds: 0 drug, 1 food, 2 benign
  std::vector<int> kinds(o.n_sentences, 2);
  std::fill(kinds.begin(), kinds.begin() + static_cast<std::ptrdiff_t>(n_drug), 0);
  std::fill(kinds.begin() + static_cast<std::ptrdiff_t>(n_drug),
            kinds.begin() + static_cast<std::ptrdiff_t>(n_drug + n_food), 1);
  rng.shuffle(kinds);

  corpus::TextCorpus out;
  out.sentences.reserve(o.n_sentences);
  std::size_t drug_counter = 0;
  for (std::size_t i = 0; i < o.n_sentences; ++i) {
    std::string text;
    corpus::Split split = corpus::Split::white;
    if (kinds[i] == 0) {
      const auto& topic = drugs.at(o.seeds[drug_counter++ % o.seeds.size()]);
      const auto slots = frame_slots(topic);
      const bool named = rng.uniform() < 0.85;
      text = fill(named ? pick(kItemFrames, rng) : pick(kContextFrames, rng), slots, rng);
      split = corpus::Split::dedup;
    } else if (kinds[i] == 1) {
      text = fill(pick(kItemFrames, rng), frame_slots(food), rng);
    } else {
      const auto& topic = benign[rng.uniform_index(benign.size())];
      const std::map<std::string, const Pool*> slots{
          {"N", &topic.nouns}, {"N2", &topic.nouns}, {"AJ", &topic.adjectives},
          {"VB", &topic.verbs}, {"PL", &topic.places}, {"Q", &kQuantities},
          {"T", &kTimes}, {"P", &kPlaces}};
      text = fill(pick(kBenignFrames, rng), slots, rng);
    }
    auto tokens = corpus::tokenize(text);
    out.sentences.push_back(corpus::TextSentence{static_cast<corpus::SentenceId>(i),
                                                 std::move(tokens), split, text});
  }
  return out;
}

}  // namespace impromptu::datasets
