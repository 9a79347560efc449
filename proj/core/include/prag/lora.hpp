#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prag/delta.hpp"
#include "prag/model.hpp"
#include "prag/tensor.hpp"

namespace prag::lora {

using num::Tensor;

struct LoraTarget {
  std::size_t layer = 0;
  FfnRole role = FfnRole::In;
  Tensor a;  // [r x d_in]
  Tensor b;  // [d_out x r]
};

/// Low-rank update of every FFN matrix; targets are ordered `layer * 2 + role`.
struct LoraAdapter {
  std::string doc_id;
  std::int32_t rank = 0;
  float alpha = 0.0f;
  std::vector<LoraTarget> targets;

  float scaling() const { return alpha / static_cast<float>(rank); }
  std::size_t n_layers() const noexcept { return targets.size() / 2; }
};

/// A ~ N(0, 0.02^2), B = 0.
LoraAdapter init_adapter(const lm::ModelConfig& config, std::string doc_id, std::int32_t rank, float alpha,
                         std::uint64_t seed);

/// Throws ShapeError unless the adapter covers exactly the FFN matrices of `config`.
void check_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config);

/// Dense update (alpha/r) * (B A)^T per target, in the weight's [d_in x d_out] layout.
DeltaSet to_delta(const LoraAdapter& adapter);

DeltaSet zero_delta(const lm::ModelConfig& config);

/// into += d; shapes must agree.
void accumulate(DeltaSet& into, const DeltaSet& d);

struct MergeOptions {
  bool average = false;  // divide the sum by the number of adapters
};

/// Sum of the adapters' deltas. Adapters are summed in a canonical order
/// (doc_id, then contents) so any permutation of the same multiset gives a
/// bitwise-identical result. Ranks must agree.
DeltaSet merge(std::span<const LoraAdapter* const> adapters, const MergeOptions& options = {});
DeltaSet merge(const std::vector<LoraAdapter>& adapters, const MergeOptions& options = {});

/// All A matrices then all B matrices, each in target order, row-major.
std::vector<float> flatten(const LoraAdapter& adapter);
std::size_t flat_size(const lm::ModelConfig& config, std::int32_t rank);
/// Inverse of flatten for an adapter with the given metadata.
LoraAdapter unflatten(std::span<const float> flat, const lm::ModelConfig& config, std::string doc_id,
                      std::int32_t rank, float alpha);

/// u.v / (|u| |v|), accumulated in double. Throws ConfigError on a length
/// mismatch or a zero vector.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

/// "PRAGLORA", u32 version, doc_id, i32 rank, f32 alpha, i32 n_layers, d_model,
/// d_ff, u32 matrix count, named matrices, SHA-256 trailer.
std::string serialize_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config);
void save_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config, const std::filesystem::path& path);
/// Throws CorruptFileError on damaged files and ShapeError when the stored
/// dimensions do not belong to `config`.
LoraAdapter load_adapter(const std::filesystem::path& path, const lm::ModelConfig& config);

/// Directory of adapter files plus a manifest (manifest.json) mapping
/// doc_id to file name. File names are content keys, so a changed document
/// or hyperparameter set never reuses a stale adapter.
class AdapterStore {
 public:
  explicit AdapterStore(std::filesystem::path dir);

  const std::filesystem::path& dir() const noexcept { return dir_; }
  std::filesystem::path path_for(const std::string& key) const { return dir_ / (key + ".lora"); }

  /// True when the keyed file exists and passes its checksum.
  bool valid(const std::string& key) const;
  void put(const std::string& key, const LoraAdapter& adapter, const lm::ModelConfig& config) const;
  LoraAdapter get(const std::string& key, const lm::ModelConfig& config) const;

  /// doc_id -> key.
  std::map<std::string, std::string> read_manifest() const;
  void write_manifest(const std::map<std::string, std::string>& entries) const;
  LoraAdapter get_doc(const std::string& doc_id, const lm::ModelConfig& config) const;

 private:
  std::filesystem::path dir_;
};

}  // namespace prag::lora
