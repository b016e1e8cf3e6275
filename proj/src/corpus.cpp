#include "potq/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace potq {

std::vector<uint32_t> utf8_decode(const std::string& text) {
  std::vector<uint32_t> out;
  out.reserve(text.size());
  const auto* p = reinterpret_cast<const uint8_t*>(text.data());
  const size_t n = text.size();
  size_t i = 0;
  while (i < n) {
    const uint8_t b0 = p[i];
    uint32_t cp = 0;
    size_t len = 0;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      len = 2;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      len = 3;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      len = 4;
    } else {
      throw std::runtime_error("utf8: invalid lead byte at offset " + std::to_string(i));
    }
    if (i + len > n) throw std::runtime_error("utf8: truncated sequence at offset " + std::to_string(i));
    for (size_t j = 1; j < len; ++j) {
      const uint8_t b = p[i + j];
      if ((b & 0xC0) != 0x80)
        throw std::runtime_error("utf8: invalid continuation byte at offset " + std::to_string(i + j));
      cp = (cp << 6) | uint32_t(b & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string utf8_encode(std::span<const uint32_t> codepoints) {
  std::string out;
  out.reserve(codepoints.size());
  for (const uint32_t cp : codepoints) {
    if (cp < 0x80) {
      out.push_back(char(cp));
    } else if (cp < 0x800) {
      out.push_back(char(0xC0 | (cp >> 6)));
      out.push_back(char(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(char(0xE0 | (cp >> 12)));
      out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(char(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(char(0xF0 | (cp >> 18)));
      out.push_back(char(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(char(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

CharVocab CharVocab::from_codepoints(std::span<const uint32_t> text) {
  CharVocab v;
  v.codepoints.assign(text.begin(), text.end());
  std::sort(v.codepoints.begin(), v.codepoints.end());
  v.codepoints.erase(std::unique(v.codepoints.begin(), v.codepoints.end()), v.codepoints.end());
  for (size_t i = 0; i < v.codepoints.size(); ++i) v.to_id.emplace(v.codepoints[i], int32_t(i));
  return v;
}

std::vector<int32_t> CharVocab::encode(std::span<const uint32_t> text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (const uint32_t cp : text) {
    const auto it = to_id.find(cp);
    if (it == to_id.end())
      throw std::runtime_error("vocab: character U+" + std::to_string(cp) + " not in vocabulary");
    ids.push_back(it->second);
  }
  return ids;
}

std::vector<uint32_t> CharVocab::decode(std::span<const int32_t> ids) const {
  std::vector<uint32_t> out;
  out.reserve(ids.size());
  for (const int32_t id : ids) {
    if (id < 0 || size_t(id) >= codepoints.size())
      throw std::out_of_range("vocab: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(codepoints.size()));
    out.push_back(codepoints[size_t(id)]);
  }
  return out;
}

std::vector<int32_t> CharVocab::encode_utf8(const std::string& text) const {
  const auto cps = utf8_decode(text);
  return encode(cps);
}

std::string CharVocab::decode_utf8(std::span<const int32_t> ids) const { return utf8_encode(decode(ids)); }

Corpus corpus_from_text(const std::string& text) {
  if (text.empty()) throw std::runtime_error("corpus: input text is empty");
  const auto cps = utf8_decode(text);
  Corpus c;
  c.vocab = CharVocab::from_codepoints(cps);
  const auto ids = c.vocab.encode(cps);
  const int64_t n = int64_t(ids.size());
  const int64_t n_train = n * 8 / 10;
  const int64_t n_val = n / 10;
  c.train.assign(ids.begin(), ids.begin() + n_train);
  c.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  c.test.assign(ids.begin() + n_train + n_val, ids.end());
  return c;
}

Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("corpus: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return corpus_from_text(ss.str());
}

Batch sample_batch(std::span<const int32_t> split, int64_t batch, int64_t seq, Pcg64& rng) {
  if (batch < 1 || seq < 1) throw std::invalid_argument("sample_batch: batch and seq must be >= 1");
  const int64_t n = int64_t(split.size());
  if (n <= seq)
    throw std::runtime_error("sample_batch: split of " + std::to_string(n) +
                             " chars is too short for context length " + std::to_string(seq));
  Batch b;
  b.batch = batch;
  b.seq = seq;
  b.x.resize(size_t(batch * seq));
  b.y.resize(size_t(batch * seq));
  const uint64_t range = uint64_t(n - seq);  // offsets in [0, n - seq - 1]
  for (int64_t i = 0; i < batch; ++i) {
    const int64_t off = int64_t(rng.next_below(range));
    for (int64_t t = 0; t < seq; ++t) {
      b.x[size_t(i * seq + t)] = split[size_t(off + t)];
      b.y[size_t(i * seq + t)] = split[size_t(off + t + 1)];
    }
  }
  return b;
}

}  // namespace potq
