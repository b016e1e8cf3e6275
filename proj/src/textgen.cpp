#include "potq/textgen.hpp"

#include <array>
#include <cctype>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "potq/rng.hpp"

namespace potq {

namespace {

const std::array<const char*, 200> kWords = {
    "the",      "of",       "and",      "to",        "in",       "that",     "was",      "his",
    "he",       "it",       "with",     "is",        "for",      "as",       "had",      "you",
    "not",      "be",       "her",      "on",        "at",       "by",       "which",    "have",
    "or",       "from",     "this",     "him",       "but",      "all",      "she",      "they",
    "were",     "my",       "are",      "me",        "one",      "their",    "so",       "an",
    "said",     "them",     "we",       "who",       "would",    "been",     "will",     "no",
    "when",     "there",    "if",       "more",      "out",      "up",       "into",     "do",
    "any",      "your",     "what",     "has",       "man",      "could",    "other",    "than",
    "our",      "some",     "very",     "time",      "upon",     "about",    "may",      "its",
    "only",     "now",      "like",     "little",    "then",     "can",      "made",     "should",
    "did",      "us",       "such",     "a",         "great",    "before",   "must",     "two",
    "these",    "see",      "know",     "over",      "much",     "down",     "after",    "first",
    "good",     "men",      "own",      "never",     "most",     "old",      "shall",    "day",
    "where",    "those",    "came",     "come",      "himself",  "way",      "work",     "life",
    "without",  "go",       "make",     "well",      "through",  "being",    "long",     "say",
    "might",    "how",      "am",       "too",       "even",     "held",     "again",    "many",
    "back",     "here",     "think",    "every",     "people",   "went",     "same",     "last",
    "thought",  "away",     "under",    "take",      "found",    "hand",     "eyes",     "still",
    "place",    "while",    "just",     "also",      "young",    "yet",      "though",   "against",
    "things",   "get",      "ever",     "give",      "god",      "years",    "off",      "face",
    "nothing",  "right",    "once",     "another",   "left",     "part",     "saw",      "house",
    "world",    "head",     "three",    "word",      "love",     "father",   "side",     "heart",
    "stood",    "soon",     "far",      "done",      "put",      "mind",     "called",   "few",
    "night",    "mother",   "among",    "light",     "want",     "heard",    "something", "moment",
    "water",    "told",     "knew",     "why",       "whole",    "herself",  "high",     "look",
};

const std::array<const char*, 12> kNames = {"Adler", "Brook",  "Calder", "Devon", "Ellis", "Flint",
                                            "Grace", "Harlow", "Imre",   "Jasper", "Kestrel", "Laurel"};

// Zipf-like cumulative weights over the word bank: weight 1/(rank + 3).
std::vector<double> word_cdf() {
  std::vector<double> cdf(kWords.size());
  double acc = 0.0;
  for (size_t i = 0; i < kWords.size(); ++i) {
    acc += 1.0 / double(i + 3);
    cdf[i] = acc;
  }
  for (auto& v : cdf) v /= acc;
  return cdf;
}

size_t pick_word(Pcg64& rng, const std::vector<double>& cdf) {
  const double u = rng.next_double();
  size_t lo = 0, hi = cdf.size() - 1;
  while (lo < hi) {
    const size_t mid = (lo + hi) / 2;
    if (cdf[mid] < u)
      lo = mid + 1;
    else
      hi = mid;
  }
  return lo;
}

}  // namespace

std::string synthetic_text(int64_t approx_chars, uint64_t seed) {
  if (approx_chars < 1) throw std::invalid_argument("synthetic_text: size must be >= 1");
  Pcg64 rng(seed, rng_stream::kCorpus);
  const auto cdf = word_cdf();
  std::string out;
  out.reserve(size_t(approx_chars) + 256);

  while (int64_t(out.size()) < approx_chars) {
    const int sentences = 3 + int(rng.next_below(6));
    for (int s = 0; s < sentences; ++s) {
      const int words = 4 + int(rng.next_below(9));
      for (int w = 0; w < words; ++w) {
        std::string word;
        if (rng.next_below(40) == 0) {
          word = kNames[rng.next_below(kNames.size())];
        } else {
          word = kWords[pick_word(rng, cdf)];
        }
        if (w == 0) word[0] = char(std::toupper(word[0]));
        out += word;
        if (w + 1 < words) {
          if (w > 1 && rng.next_below(12) == 0) out += ',';
          out += ' ';
        }
      }
      const uint64_t punct = rng.next_below(12);
      out += punct == 0 ? '?' : (punct == 1 ? '!' : '.');
      out += ' ';
    }
    out.back() = '\n';
    if (rng.next_below(4) == 0) out += '\n';
  }
  out.resize(size_t(approx_chars));
  return out;
}

void write_synthetic_corpus(const std::string& path, int64_t approx_chars, uint64_t seed) {
  const std::string text = synthetic_text(approx_chars, seed);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("corpus: cannot open " + path + " for writing");
  f.write(text.data(), int64_t(text.size()));
  if (!f) throw std::runtime_error("corpus: write failed for " + path);
}

}  // namespace potq
