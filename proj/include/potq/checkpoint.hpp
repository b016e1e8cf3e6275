#pragma once

// On-disk model format shared by all CLI commands. Little-endian fixed-width
// binary, lengths as u32. Layout:
//
//   magic "POTQ1" | version u8
//   config: vocab_size, n_layer, n_head, n_embd, block_size (u32), dropout f32
//   metadata: iter u32, val_loss f32,
//             quant scheme u8, quant levels/bits u32, ste mode u8
//   vocab: count u32, then count codepoints (u32)
//   tensors: count u32, then per tensor
//     name (u32 length + bytes) | dtype u8 | ndim u32 | dims u32...
//     f32 payload: numel * 4 bytes
//     pot4 payload: scale f32, then ceil(numel/2) packed code bytes
//
// Save -> load round-trips are byte-exact; parse errors carry file offsets.

#include <cstdint>
#include <string>
#include <vector>

#include "potq/corpus.hpp"
#include "potq/model.hpp"
#include "potq/quant.hpp"

namespace potq {

inline constexpr char kCheckpointMagic[5] = {'P', 'O', 'T', 'Q', '1'};
inline constexpr uint8_t kCheckpointVersion = 1;

enum class TensorDtype : uint8_t { F32 = 0, Pot4 = 1 };

struct TensorEntry {
  std::string name;
  TensorDtype dtype = TensorDtype::F32;
  Shape shape;
  std::vector<float> f32;      // dtype == F32
  float scale = 1.0f;          // dtype == Pot4
  std::vector<uint8_t> codes;  // dtype == Pot4, nibble-packed

  int64_t numel() const { return numel_of(shape); }
};

struct QuantMeta {
  QuantScheme scheme = QuantScheme::None;
  uint32_t levels_or_bits = 0;  // PoT level count or affine bit width
  SteMode ste = SteMode::Identity;
};

struct Checkpoint {
  ModelConfig config;
  uint32_t iter = 0;
  float val_loss = 0.0f;
  QuantMeta quant;
  std::vector<uint32_t> vocab_codepoints;
  std::vector<TensorEntry> tensors;
};

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_model(const Model& model, const CharVocab& vocab, uint32_t iter, float val_loss,
                                 const QuantMeta& quant);

// Reconstructs float master parameters; pot4 entries are dequantized onto the
// PoT grid.
Model model_from_checkpoint(const Checkpoint& ckpt);

CharVocab vocab_from_checkpoint(const Checkpoint& ckpt);

}  // namespace potq
