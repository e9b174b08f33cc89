// Deterministic generator for the bundled desk-scale corpus. Writes
// English-like prose (seeded grammar over a fixed word list) so the training
// harness has stable character statistics without shipping external text.
// Regenerate with:  make_desk_corpus <out-path> [bytes] [seed]

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "attnprior/prng.hpp"

namespace {

using attnprior::Prng;

const char* kNouns[] = {
    "river",   "engine",  "harbor",  "letter",  "garden",   "ladder",  "market",  "mirror",
    "signal",  "valley",  "window",  "bridge",  "candle",   "copper",  "dinner",  "farmer",
    "hammer",  "island",  "jacket",  "kettle",  "lantern",  "meadow",  "needle",  "orchard",
    "pencil",  "quarry",  "ribbon",  "saddle",  "timber",   "vessel",  "wagon",   "anchor",
    "barrel",  "cellar",  "desk",    "fence",   "glass",    "hill",    "iron",    "journal",
    "key",     "lamp",    "map",     "nail",    "oven",     "page",    "quill",   "rope",
    "stone",   "table",   "umbrella", "violin", "wheel",    "yard",    "archive", "balcony",
    "compass", "draft",   "estate",  "furnace", "granary",  "harvest", "inkwell", "junction",
    "keel",    "loft",    "mill",    "notice",  "outpost",  "parlor",  "quay",    "rail",
    "shed",    "tower",   "union",   "vault",   "workshop", "season",  "morning", "evening",
    "winter",  "summer",  "autumn",  "spring",  "village",  "city",    "road",    "field",
    "coast",   "forest",  "storm",   "cloud",   "shadow",   "light",   "voice",   "sound",
    "silence", "question", "answer", "story",   "record",   "account", "measure", "figure"};

const char* kAdjectives[] = {
    "old",     "quiet",   "narrow",  "bright",  "heavy",  "pale",    "steady",  "rough",
    "gentle",  "broad",   "distant", "early",   "late",   "plain",   "sharp",   "smooth",
    "warm",    "cold",    "dry",     "damp",    "long",   "short",   "tall",    "low",
    "deep",    "clear",   "faint",   "grand",   "humble", "iron",    "wooden",  "stone",
    "copper",  "green",   "grey",    "blue",    "red",    "white",   "black",   "golden",
    "silver",  "patient", "careful", "curious", "honest", "weary",   "eager",   "silent",
    "crooked", "straight", "hollow", "solid",   "fresh",  "ancient", "modern",  "common",
    "rare",    "simple",  "certain", "formal",  "proper", "usual",   "northern", "southern"};

const char* kVerbsPast[] = {
    "crossed",  "opened",   "closed",   "carried",  "lifted",  "followed", "watched",
    "measured", "repaired", "gathered", "planted",  "counted", "painted",  "folded",
    "gripped",  "hauled",   "gazed at", "borrowed", "returned", "weighed",  "traced",
    "gathered", "gathered up", "set down", "passed", "reached", "entered",  "left",
    "studied",  "described", "recorded", "marked",  "signed",  "sealed",   "mended",
    "stacked",  "sorted",   "cleaned",  "covered",  "uncovered", "visited", "crossed out",
    "remembered", "forgot", "noticed",  "ignored",  "answered", "questioned"};

const char* kVerbsPresent[] = {
    "crosses",  "opens",   "closes",  "carries", "lifts",   "follows", "watches", "measures",
    "repairs",  "gathers", "plants",  "counts",  "paints",  "folds",   "grips",   "hauls",
    "borrows",  "returns", "weighs",  "traces",  "passes",  "reaches", "enters",  "leaves",
    "studies",  "describes", "records", "marks", "signs",   "seals",   "mends",   "stacks"};

const char* kAdverbs[] = {"slowly",   "carefully", "quietly", "often",    "rarely",  "almost",
                          "nearly",   "suddenly",  "finally", "together", "apart",   "upstream",
                          "downhill", "gladly",    "barely",  "plainly",  "steadily", "at once"};

const char* kPreps[] = {"under", "over",   "beside", "beyond", "near",    "within",
                        "against", "along", "across", "behind", "through", "toward"};

const char* kNames[] = {"Alder",  "Bram",   "Corin",  "Della",  "Edmund", "Ferris",
                        "Greta",  "Halvor", "Imre",   "Jonas",  "Karsten", "Lena",
                        "Marlow", "Nils",   "Otto",   "Petra",  "Quentin", "Rosa",
                        "Sigrid", "Tomas",  "Ulrich", "Vera",   "Willem",  "Yrsa"};

const char* kConnectives[] = {"and",        "but",          "so",        "yet",
                              "because",    "although",     "while",     "until",
                              "after that", "even so",      "meanwhile", "in the end"};

template <size_t N>
const char* pick(const char* (&arr)[N], Prng& rng) {
  return arr[rng.uniform_int(N)];
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string noun_phrase(Prng& rng, bool allow_name) {
  if (allow_name && rng.uniform() < 0.12) return pick(kNames, rng);
  std::string np = rng.uniform() < 0.5 ? "the" : (rng.uniform() < 0.5 ? "a" : "that");
  if (rng.uniform() < 0.55) np += std::string(" ") + pick(kAdjectives, rng);
  np += std::string(" ") + pick(kNouns, rng);
  if (rng.uniform() < 0.18)
    np += std::string(" ") + pick(kPreps, rng) + " the " + pick(kNouns, rng);
  return np;
}

std::string clause(Prng& rng) {
  std::string c = noun_phrase(rng, true);
  c += " ";
  if (rng.uniform() < 0.25) c += std::string(pick(kAdverbs, rng)) + " ";
  c += rng.uniform() < 0.7 ? pick(kVerbsPast, rng) : pick(kVerbsPresent, rng);
  c += " " + noun_phrase(rng, false);
  if (rng.uniform() < 0.3) c += std::string(" ") + pick(kPreps, rng) + " " + noun_phrase(rng, false);
  return c;
}

std::string sentence(Prng& rng) {
  const double u = rng.uniform();
  std::string s;
  if (u < 0.08) {
    s = "\"" + capitalize(clause(rng)) + ",\" said " + pick(kNames, rng) + ".";
  } else if (u < 0.14) {
    s = capitalize(std::string("did ") + noun_phrase(rng, true) + " ever reach " +
                   noun_phrase(rng, false) + "?");
  } else if (u < 0.20) {
    const int year = 1800 + static_cast<int>(rng.uniform_int(180));
    const int count = 2 + static_cast<int>(rng.uniform_int(98));
    s = "In " + std::to_string(year) + " there were " + std::to_string(count) + " " +
        pick(kNouns, rng) + "s " + pick(kPreps, rng) + " " + noun_phrase(rng, false) + ".";
  } else if (u < 0.45) {
    s = capitalize(clause(rng)) + ", " + pick(kConnectives, rng) + " " + clause(rng) + ".";
  } else {
    s = capitalize(clause(rng)) + ".";
  }
  // A sprinkle of characters too rare to clear min_count, so <unk> is real.
  if (rng.uniform() < 4e-4) s += " \xC3\xA9";  // e-acute
  if (rng.uniform() < 3e-4) s += " \xE2\x80\x94";  // em dash
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: make_desk_corpus <out-path> [bytes] [seed]\n";
    return 2;
  }
  const std::string out_path = argv[1];
  const size_t target = argc > 2 ? static_cast<size_t>(std::stoul(argv[2])) : 1000000;
  const std::uint64_t seed = argc > 3 ? std::stoull(argv[3]) : 20240811ULL;

  Prng rng(seed);
  std::string text;
  text.reserve(target + 4096);
  while (text.size() < target) {
    const int n_sentences = 3 + static_cast<int>(rng.uniform_int(5));
    for (int s = 0; s < n_sentences && text.size() < target; ++s) {
      text += sentence(rng);
      text += ' ';
    }
    text.back() = '\n';
    if (rng.uniform() < 0.3) text += '\n';
  }

  std::ofstream out(out_path, std::ios::binary);
  if (!out) {
    std::cerr << "cannot open " << out_path << "\n";
    return 1;
  }
  out << text;
  std::cout << "wrote " << text.size() << " bytes to " << out_path << "\n";
  return 0;
}
