#pragma once

// Deterministic pseudo-English corpus generator for desk-scale experiments.
// The text is sampled from a fixed word bank with Zipf-ish weights, simple
// sentence templates and punctuation, giving a character stream a small
// transformer can learn well below 2 nats/char while staying non-trivial.

#include <cstdint>
#include <string>

namespace potq {

std::string synthetic_text(int64_t approx_chars, uint64_t seed);
void write_synthetic_corpus(const std::string& path, int64_t approx_chars, uint64_t seed);

}  // namespace potq
