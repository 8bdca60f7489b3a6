#pragma once
// Trajectory data model and its on-disk interchange formats.
//
// A manifest is JSON Lines, one trajectory per line. Each trajectory's token
// hidden states live in a separate .hsb block referenced by relative path:
//
//   bytes 0-3    magic "HSB1"
//   bytes 4-7    version (u32 LE, = 1)
//   bytes 8-11   hidden dim d (u32 LE)
//   bytes 12-15  total token count (u32 LE)
//   then         count x d float32 LE, row-major, tokens in generation order
//
// Step boundaries come from the manifest's num_tokens list.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cotwatch {

inline constexpr std::uint32_t kHsbVersion = 1;
inline constexpr int kManifestVersion = 1;

/// Row-major L x d block of float32 token hidden states.
class TokenStates {
 public:
  TokenStates() = default;
  TokenStates(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  TokenStates(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }

  /// Bit-level equality (distinguishes -0.0 from 0.0).
  bool bit_equal(const TokenStates& other) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

struct Step {
  TokenStates hidden_states;                       // L_t x d
  std::optional<std::vector<double>> token_probs;  // length L_t, entries in (0,1]
  std::optional<bool> a_step;
  std::optional<bool> a_prefix;

  std::size_t num_tokens() const noexcept { return hidden_states.rows(); }
};

struct Trajectory {
  std::string id;
  std::vector<Step> steps;
  std::optional<bool> final_correct;  // true = final answer correct
  std::size_t hidden_dim = 0;
  std::size_t layer_index = 0;

  std::size_t num_steps() const noexcept { return steps.size(); }
  std::size_t total_tokens() const noexcept;
  bool has_step_labels() const noexcept;
  bool has_prefix_labels() const noexcept;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::uint64_t split_seed = 0;
};

/// Throw Error on any violated type invariant; records are never repaired.
void check_invariants(const Step& step, std::size_t hidden_dim);
void check_invariants(const Trajectory& traj);
void check_invariants(const Dataset& ds);

/// Field-for-field equality, bit-exact on hidden states.
bool equal(const Trajectory& a, const Trajectory& b);
bool equal(const Dataset& a, const Dataset& b);

std::vector<std::byte> encode_hsb(const Trajectory& traj);
/// Decodes a block into (d, row-major float data). Validates magic/version and size.
std::pair<std::size_t, std::vector<float>> decode_hsb(std::span<const std::byte> bytes);

Dataset read_dataset(const std::filesystem::path& manifest_path);
/// Writes manifest.jsonl, dataset.json and hsb/NNNNNN.hsb under out_dir.
std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& out_dir);

/// Deterministic trajectory-granular partition into (train, eval).
std::pair<Dataset, Dataset> train_eval_split(const Dataset& ds, double fraction, std::uint64_t seed);

}  // namespace cotwatch
