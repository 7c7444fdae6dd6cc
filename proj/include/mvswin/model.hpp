#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mvswin/blocks.hpp"

namespace mvswin {

/// Whether the two dual-stream views share one parameter set or own one each.
enum class ViewWeights { Shared, Separate };

/// Per-stage geometry derived from a ModelConfig.
struct StageGeometry {
  std::size_t grid = 0;      // token grid side at this stage
  std::size_t channels = 0;
  std::size_t heads = 0;
  std::size_t depth = 0;
  std::size_t window = 0;    // clipped to the grid side
  std::size_t shift = 0;     // 0 when one window covers the grid
  bool dual = false;         // Omni-Attention (two views) or single stream
};

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t in_channels = 1;
  std::size_t patch = 4;
  std::size_t window = 7;
  std::size_t stem_dim = 96;
  std::array<std::size_t, 4> depths{2, 2, 6, 2};
  std::array<std::size_t, 4> heads{3, 6, 12, 24};
  int fusion_stage = 2;
  FuseMode fuse_mode = Concatenation{};
  std::size_t mlp_ratio = 4;
  bool rel_bias = true;
  ViewWeights view_weights = ViewWeights::Shared;
  std::uint64_t seed = 0;

  /// Tiny-variant layout (dim 96, depths 2/2/6/2, heads 3/6/12/24) with the
  /// window at image_size / 32, i.e. 7 for 224 and 12 for 384.
  static ModelConfig tiny(std::size_t image_size, int fusion_stage = 2,
                          FuseMode fuse = Concatenation{});
  /// 8x8 single-channel images, patch 1, dim 8, depths 2/2/2/2, heads
  /// 2/2/2/2, window 2, relative bias off.
  static ModelConfig toy();

  std::size_t grid() const { return patch ? image_size / patch : 0; }
  /// Every violated constraint, empty when valid.
  std::vector<std::string> violations() const;
  /// Throws ConfigError listing every violation.
  void validate() const;
  std::vector<StageGeometry> stages() const;
};

/// Dual-stream parameters for one view: stem, merges and blocks of the
/// stages up to and including the fusion stage.
template <typename T>
struct ViewStream {
  Tensor<T> embed_w;  // [patch*patch*in_channels, stem_dim]
  Tensor<T> embed_b;
  std::vector<PatchMergeParams<T>> merges;  // merges[s - 1] precedes dual stage s
  std::vector<std::vector<OmniBlockParams<T>>> stages;
};

template <typename T>
struct Model {
  ModelConfig config;
  ViewStream<T> cc;
  ViewStream<T> mlo;  // holds the same tensors as cc under ViewWeights::Shared
  Tensor<T> fusion_w;  // [2C, C]
  Tensor<T> fusion_b;  // [C]
  std::vector<PatchMergeParams<T>> merges;  // one per single stage
  std::vector<std::vector<SwinBlockParams<T>>> stages;
  Tensor<T> head_w;  // [C_last, 1]
  Tensor<T> head_b;  // [1]

  /// Every distinct parameter tensor with its stable name, in build order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
};

/// Deterministic, seeded initialization. Throws ConfigError listing every
/// violation for an invalid config.
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

/// Channel concatenation of the two views followed by w [2C, C] + b.
template <typename T>
FeatureMap<T> fuse_views(const ViewPair<T>& pair, const Tensor<T>& w, const Tensor<T>& b);

/// Logits [B] for image pairs [B, S, S, in_channels].
template <typename T>
Tensor<T> forward_pair(const Model<T>& m, const Tensor<T>& cc, const Tensor<T>& mlo);

/// Single-view baseline through the same geometry: the CC stream's
/// projections with self attention only, no fusion layer.
template <typename T>
Tensor<T> forward_single(const Model<T>& m, const Tensor<T>& view);

template <typename T>
std::size_t count_params(const Model<T>& m);

/// Directory with manifest.json plus one MVST file per parameter.
template <typename T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& dir);

/// Fills the parameters of `m` from a checkpoint directory. Names and shapes
/// must match exactly; the error names the first offending parameter.
template <typename T>
void load_checkpoint(Model<T>& m, const std::filesystem::path& dir);

}  // namespace mvswin
