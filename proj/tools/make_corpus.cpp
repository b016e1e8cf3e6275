// Writes a deterministic pseudo-English character corpus for desk-scale runs.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "potq/textgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic character corpus"};
  std::string out = "corpus.txt";
  int64_t size = 1'000'000;
  uint64_t seed = 7;
  app.add_option("--out", out, "output path");
  app.add_option("--size", size, "approximate size in characters");
  app.add_option("--seed", seed, "seed");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    potq::write_synthetic_corpus(out, size, seed);
    std::printf("wrote %s (%ld chars, seed %llu)\n", out.c_str(), long(size),
                (unsigned long long)seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
