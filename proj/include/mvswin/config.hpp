#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "mvswin/harness.hpp"

namespace mvswin {

enum class Precision { F32, F64 };

struct DataConfig {
  std::size_t train_size = 4000;  // split 80/20 into train and validation
  std::size_t test_size = 1000;
  std::uint64_t seed = 1;
  std::uint64_t test_seed = 1001;
  BlobParams blob;
};

/// One JSON document: {"model": {...}, "train": {...}, "data": {...},
/// "mode": "pair" | "single", "precision": "f32" | "f64"}. Every section and
/// key is optional; omitted values keep their defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  ViewMode mode = ViewMode::Pair;
  Precision precision = Precision::F32;
};

/// Parses and validates. Throws ConfigError listing every problem, each
/// prefixed by its JSON path (e.g. "$.model.window").
RunConfig parse_run_config(const nlohmann::json& doc);
/// Reads a file: IoError if unreadable, ConfigError if malformed or invalid.
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace mvswin
