#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "potq/corpus.hpp"
#include "potq/textgen.hpp"

using namespace potq;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("utf8 round-trips ascii and multi-byte text") {
  const std::string s = "hello, \n w\xc3\xb6rld \xe2\x82\xac!";  // o-umlaut and euro sign
  const auto cps = utf8_decode(s);
  CHECK(utf8_encode(cps) == s);
  CHECK(cps.size() < s.size());  // multi-byte sequences collapse to single codepoints
}

TEST_CASE("utf8 rejects malformed input") {
  CHECK_THROWS_AS((void)utf8_decode(std::string("\xff")), std::runtime_error);
  CHECK_THROWS_AS((void)utf8_decode(std::string("\xc3")), std::runtime_error);        // truncated
  CHECK_THROWS_AS((void)utf8_decode(std::string("\xc3\x28")), std::runtime_error);    // bad continuation
}

TEST_CASE("vocab ids follow sorted codepoint order") {
  const auto cps = utf8_decode("bca\nB");
  const auto v = CharVocab::from_codepoints(cps);
  CHECK(v.size() == 5);
  // sorted codepoints: \n < B < a < b < c
  CHECK(v.codepoints == std::vector<uint32_t>{'\n', 'B', 'a', 'b', 'c'});
  CHECK(v.to_id.at('a') == 2);
  CHECK_THROWS_AS((void)v.encode_utf8("z"), std::runtime_error);
}

TEST_CASE("corpus splits 1000 chars into 800/100/100 and V('abab') == 2") {
  std::string text;
  for (int i = 0; i < 250; ++i) text += "abcd";
  const Corpus c = corpus_from_text(text);
  CHECK(c.train.size() == 800);
  CHECK(c.val.size() == 100);
  CHECK(c.test.size() == 100);
  CHECK(corpus_from_text("abab").vocab.size() == 2);
  CHECK_THROWS_AS((void)corpus_from_text(""), std::runtime_error);
}

TEST_CASE("encode/decode round-trips corpus substrings") {
  const std::string text = synthetic_text(5000, 3);
  const Corpus c = corpus_from_text(text);
  const std::string sub = text.substr(1234, 321);
  CHECK(c.vocab.decode_utf8(c.vocab.encode_utf8(sub)) == sub);
}

TEST_CASE("load_corpus reads a file and is order-preserving") {
  const std::string path = temp_path("potq_corpus_test.txt");
  {
    std::ofstream f(path, std::ios::trunc);
    for (int i = 0; i < 100; ++i) f << "0123456789";
  }
  const Corpus c = load_corpus(path);
  CHECK(c.train.size() == 800);
  // positional split: train is the first 80% in document order
  CHECK(c.vocab.decode_utf8(std::vector<int32_t>(c.train.begin(), c.train.begin() + 10)) == "0123456789");
  std::filesystem::remove(path);
  CHECK_THROWS_AS((void)load_corpus(path), std::runtime_error);
}

TEST_CASE("sample_batch: y is x shifted by one, deterministic per seed") {
  const Corpus c = corpus_from_text(synthetic_text(4000, 9));
  Pcg64 r1(77), r2(77);
  const Batch a = sample_batch(c.train, 4, 16, r1);
  const Batch b = sample_batch(c.train, 4, 16, r2);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t t = 0; t + 1 < 16; ++t) CHECK(a.y[size_t(i * 16 + t)] == a.x[size_t(i * 16 + t + 1)]);
}

TEST_CASE("sample_batch offsets always leave room for the shifted target") {
  // property: over many draws every window stays in bounds, so the maximum
  // start offset is len - T - 1
  const int64_t n = 61, T = 13;
  std::vector<int32_t> split(size_t(n));
  for (int64_t i = 0; i < n; ++i) split[size_t(i)] = int32_t(i);
  Pcg64 rng(5);
  int64_t max_off = 0;
  for (int i = 0; i < 100000; ++i) {
    const Batch b = sample_batch(split, 1, T, rng);
    max_off = std::max(max_off, int64_t(b.x[0]));
    CHECK(b.y[size_t(T - 1)] == b.x[0] + int32_t(T));  // last target exists
  }
  CHECK(max_off == n - T - 1);  // the extreme offset is reachable and never exceeded
}

TEST_CASE("sample_batch rejects too-short splits") {
  std::vector<int32_t> tiny(8, 0);
  Pcg64 rng(1);
  CHECK_THROWS_AS((void)sample_batch(tiny, 1, 8, rng), std::runtime_error);
  CHECK_NOTHROW((void)sample_batch(tiny, 1, 7, rng));
}

TEST_CASE("synthetic corpus is deterministic per seed") {
  CHECK(synthetic_text(2000, 4) == synthetic_text(2000, 4));
  CHECK(synthetic_text(2000, 4) != synthetic_text(2000, 5));
}
