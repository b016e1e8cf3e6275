#pragma once

// Character corpus ingestion: UTF-8 decoding, deterministic sorted-codepoint
// vocabulary, positional 80/10/10 splits, and batch sampling.

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "potq/rng.hpp"

namespace potq {

std::vector<uint32_t> utf8_decode(const std::string& text);
std::string utf8_encode(std::span<const uint32_t> codepoints);

struct CharVocab {
  std::vector<uint32_t> codepoints;  // sorted ascending, ids are positions
  std::unordered_map<uint32_t, int32_t> to_id;

  int64_t size() const { return int64_t(codepoints.size()); }
  static CharVocab from_codepoints(std::span<const uint32_t> text);

  std::vector<int32_t> encode(std::span<const uint32_t> text) const;  // throws on unknown char
  std::vector<uint32_t> decode(std::span<const int32_t> ids) const;

  std::vector<int32_t> encode_utf8(const std::string& text) const;
  std::string decode_utf8(std::span<const int32_t> ids) const;
};

enum class Split { Train, Val, Test };

struct Corpus {
  CharVocab vocab;
  std::vector<int32_t> train;
  std::vector<int32_t> val;
  std::vector<int32_t> test;

  const std::vector<int32_t>& split(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Val: return val;
      default: return test;
    }
  }
};

// Positional 80/10/10 partition of the encoded text (no shuffling).
Corpus load_corpus(const std::string& path);
Corpus corpus_from_text(const std::string& text);

struct Batch {
  std::vector<int32_t> x;  // [B*T]
  std::vector<int32_t> y;  // [B*T], x shifted one position
  int64_t batch = 0;
  int64_t seq = 0;
};

// Uniform random windows; y[b,t] == split[offset_b + t + 1].
Batch sample_batch(std::span<const int32_t> split, int64_t batch, int64_t seq, Pcg64& rng);

}  // namespace potq
