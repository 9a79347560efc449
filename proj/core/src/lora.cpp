#include "prag/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/ops.hpp"
#include "prag/rng.hpp"

namespace prag::lora {

namespace {

constexpr std::uint32_t kVersion = 1;

std::size_t sz(std::int32_t v) { return static_cast<std::size_t>(v); }

std::pair<std::size_t, std::size_t> dims(const lm::ModelConfig& c, FfnRole role) {
  return role == FfnRole::In ? std::pair{sz(c.d_model), sz(c.d_ff)} : std::pair{sz(c.d_ff), sz(c.d_model)};
}

std::string matrix_name(const LoraTarget& t, char which) {
  return "layers." + std::to_string(t.layer) + "." + role_name(t.role) + "." + which;
}

// Canonical order for summation: doc_id, then raw contents.
bool canonical_less(const LoraAdapter* x, const LoraAdapter* y) {
  if (x->doc_id != y->doc_id) return x->doc_id < y->doc_id;
  if (x->rank != y->rank) return x->rank < y->rank;
  if (x->alpha != y->alpha) return x->alpha < y->alpha;
  const auto fx = flatten(*x), fy = flatten(*y);
  if (fx.size() != fy.size()) return fx.size() < fy.size();
  return std::memcmp(fx.data(), fy.data(), fx.size() * sizeof(float)) < 0;
}

}  // namespace

LoraAdapter init_adapter(const lm::ModelConfig& config, std::string doc_id, std::int32_t rank, float alpha,
                         std::uint64_t seed) {
  config.validate();
  if (rank < 1) throw ConfigError("init_adapter: rank must be >= 1");
  if (rank > std::min(config.d_model, config.d_ff))
    throw ConfigError("init_adapter: rank " + std::to_string(rank) + " exceeds min(d_model, d_ff)");
  LoraAdapter a;
  a.doc_id = std::move(doc_id);
  a.rank = rank;
  a.alpha = alpha;
  Rng rng(seed);
  for (std::size_t l = 0; l < sz(config.n_layers); ++l) {
    for (auto role : {FfnRole::In, FfnRole::Out}) {
      auto [d_in, d_out] = dims(config, role);
      LoraTarget t{l, role, Tensor({sz(rank), d_in}), Tensor({d_out, sz(rank)})};
      for (auto& x : t.a.values()) x = static_cast<float>(rng.normal() * 0.02);
      a.targets.push_back(std::move(t));
    }
  }
  return a;
}

void check_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config) {
  if (adapter.rank < 1) throw ShapeError("adapter " + adapter.doc_id + ": rank must be >= 1");
  if (adapter.targets.size() != sz(config.n_layers) * 2)
    throw ShapeError("adapter " + adapter.doc_id + ": expected " + std::to_string(config.n_layers * 2) +
                     " targets, found " + std::to_string(adapter.targets.size()));
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    const auto& t = adapter.targets[i];
    if (t.layer != i / 2 || static_cast<std::size_t>(t.role) != i % 2)
      throw ShapeError("adapter " + adapter.doc_id + ": targets out of order");
    auto [d_in, d_out] = dims(config, t.role);
    if (t.a.shape() != num::Shape{sz(adapter.rank), d_in} || t.b.shape() != num::Shape{d_out, sz(adapter.rank)})
      throw ShapeError("adapter " + adapter.doc_id + ": " + matrix_name(t, 'A') + " has shape " +
                       num::shape_string(t.a.shape()) + ", B " + num::shape_string(t.b.shape()));
  }
}

DeltaSet to_delta(const LoraAdapter& adapter) {
  DeltaSet d;
  const float s = adapter.scaling();
  for (const auto& t : adapter.targets) {
    const std::size_t r = t.a.rows(), d_in = t.a.cols(), d_out = t.b.rows();
    if (t.b.cols() != r) throw ShapeError("to_delta: rank mismatch in " + matrix_name(t, 'B'));
    Tensor delta({d_in, d_out});
    // delta = s * A^T B^T
    num::gemm(true, true, d_in, d_out, r, s, t.a.data(), d_in, t.b.data(), r, 0.0f, delta.data(), d_out);
    d.deltas.push_back(std::move(delta));
  }
  return d;
}

DeltaSet zero_delta(const lm::ModelConfig& config) {
  DeltaSet d;
  for (std::size_t l = 0; l < sz(config.n_layers); ++l)
    for (auto role : {FfnRole::In, FfnRole::Out}) {
      auto [d_in, d_out] = dims(config, role);
      d.deltas.emplace_back(num::Shape{d_in, d_out});
    }
  return d;
}

void accumulate(DeltaSet& into, const DeltaSet& d) {
  if (into.deltas.size() != d.deltas.size()) throw ShapeError("delta sets cover different targets");
  for (std::size_t i = 0; i < d.deltas.size(); ++i) num::add_inplace(into.deltas[i], d.deltas[i]);
}

DeltaSet merge(std::span<const LoraAdapter* const> adapters, const MergeOptions& options) {
  if (adapters.empty()) throw ConfigError("merge: no adapters");
  std::vector<const LoraAdapter*> order(adapters.begin(), adapters.end());
  for (const auto* a : order) {
    if (a->rank != order.front()->rank)
      throw ConfigError("merge: heterogeneous ranks (" + std::to_string(a->rank) + " vs " +
                        std::to_string(order.front()->rank) + ")");
    if (a->targets.size() != order.front()->targets.size()) throw ShapeError("merge: adapters cover different models");
  }
  std::stable_sort(order.begin(), order.end(), canonical_less);
  DeltaSet sum = to_delta(*order.front());
  for (std::size_t i = 1; i < order.size(); ++i) {
    const DeltaSet d = to_delta(*order[i]);
    for (std::size_t k = 0; k < d.deltas.size(); ++k)
      if (d.deltas[k].shape() != sum.deltas[k].shape()) throw ShapeError("merge: adapters cover different models");
    accumulate(sum, d);
  }
  if (options.average) {
    const float inv = 1.0f / static_cast<float>(order.size());
    for (auto& t : sum.deltas)
      for (auto& x : t.values()) x *= inv;
  }
  return sum;
}

DeltaSet merge(const std::vector<LoraAdapter>& adapters, const MergeOptions& options) {
  std::vector<const LoraAdapter*> ptrs;
  for (const auto& a : adapters) ptrs.push_back(&a);
  return merge(ptrs, options);
}

std::vector<float> flatten(const LoraAdapter& adapter) {
  std::vector<float> out;
  for (const auto& t : adapter.targets) out.insert(out.end(), t.a.values().begin(), t.a.values().end());
  for (const auto& t : adapter.targets) out.insert(out.end(), t.b.values().begin(), t.b.values().end());
  return out;
}

std::size_t flat_size(const lm::ModelConfig& config, std::int32_t rank) {
  return sz(config.n_layers) * 2 * sz(rank) * (sz(config.d_model) + sz(config.d_ff));
}

LoraAdapter unflatten(std::span<const float> flat, const lm::ModelConfig& config, std::string doc_id,
                      std::int32_t rank, float alpha) {
  if (flat.size() != flat_size(config, rank))
    throw ShapeError("unflatten: expected " + std::to_string(flat_size(config, rank)) + " values, got " +
                     std::to_string(flat.size()));
  LoraAdapter a = init_adapter(config, std::move(doc_id), rank, alpha, 0);
  std::size_t pos = 0;
  for (auto& t : a.targets) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.a.size(), t.a.data());
    pos += t.a.size();
  }
  for (auto& t : a.targets) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.b.size(), t.b.data());
    pos += t.b.size();
  }
  return a;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    throw ConfigError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += double(u[i]) * v[i];
    nu += double(u[i]) * u[i];
    nv += double(v[i]) * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw ConfigError("cosine_similarity: undefined for a zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

std::string serialize_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config) {
  check_adapter(adapter, config);
  io::BinaryWriter w;
  w.raw("PRAGLORA");
  w.u32(kVersion);
  w.str(adapter.doc_id);
  w.i32(adapter.rank);
  w.f32(adapter.alpha);
  w.i32(config.n_layers);
  w.i32(config.d_model);
  w.i32(config.d_ff);
  w.u32(static_cast<std::uint32_t>(adapter.targets.size() * 2));
  for (const auto& t : adapter.targets) {
    w.tensor(matrix_name(t, 'A'), t.a);
    w.tensor(matrix_name(t, 'B'), t.b);
  }
  w.seal();
  return w.bytes();
}

void save_adapter(const LoraAdapter& adapter, const lm::ModelConfig& config, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_adapter(adapter, config));
}

LoraAdapter load_adapter(const std::filesystem::path& path, const lm::ModelConfig& config) {
  auto r = io::BinaryReader::sealed(io::read_file(path), "adapter " + path.string());
  if (r.raw(8) != "PRAGLORA") r.fail("bad magic");
  if (r.u32() != kVersion) r.fail("unsupported version");
  LoraAdapter a;
  a.doc_id = r.str();
  a.rank = r.i32();
  a.alpha = r.f32();
  const auto n_layers = r.i32(), d_model = r.i32(), d_ff = r.i32();
  if (a.rank < 1 || n_layers < 1) r.fail("invalid header");
  if (n_layers != config.n_layers || d_model != config.d_model || d_ff != config.d_ff)
    throw ShapeError("adapter " + path.string() + " was trained for layers=" + std::to_string(n_layers) +
                     " d_model=" + std::to_string(d_model) + " d_ff=" + std::to_string(d_ff));
  const std::uint32_t count = r.u32();
  if (count != sz(n_layers) * 4) r.fail("matrix count does not match header");
  for (std::size_t i = 0; i < sz(n_layers) * 2; ++i) {
    LoraTarget t;
    t.layer = i / 2;
    t.role = static_cast<FfnRole>(i % 2);
    auto [na, ta] = r.tensor();
    auto [nb, tb] = r.tensor();
    if (na != matrix_name(t, 'A') || nb != matrix_name(t, 'B')) r.fail("unexpected matrix " + na + "/" + nb);
    t.a = std::move(ta);
    t.b = std::move(tb);
    a.targets.push_back(std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes");
  check_adapter(a, config);
  return a;
}

AdapterStore::AdapterStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create adapter store " + dir_.string() + ": " + ec.message());
}

bool AdapterStore::valid(const std::string& key) const {
  const auto p = path_for(key);
  if (!std::filesystem::exists(p)) return false;
  try {
    io::BinaryReader::sealed(io::read_file(p), p.string());
    return true;
  } catch (const Error&) {
    return false;
  }
}

void AdapterStore::put(const std::string& key, const LoraAdapter& adapter, const lm::ModelConfig& config) const {
  save_adapter(adapter, config, path_for(key));
}

LoraAdapter AdapterStore::get(const std::string& key, const lm::ModelConfig& config) const {
  return load_adapter(path_for(key), config);
}

std::map<std::string, std::string> AdapterStore::read_manifest() const {
  const auto p = dir_ / "manifest.json";
  std::map<std::string, std::string> out;
  if (!std::filesystem::exists(p)) return out;
  try {
    const auto j = nlohmann::json::parse(io::read_file(p));
    for (const auto& e : j.at("adapters")) out[e.at("doc_id").get<std::string>()] = e.at("key").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("adapter manifest " + p.string() + ": " + e.what());
  }
  return out;
}

void AdapterStore::write_manifest(const std::map<std::string, std::string>& entries) const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [doc, key] : entries)
    list.push_back({{"doc_id", doc}, {"key", key}, {"file", path_for(key).filename().string()}});
  io::write_file_atomic(dir_ / "manifest.json", nlohmann::json{{"adapters", list}}.dump(1) + "\n");
}

LoraAdapter AdapterStore::get_doc(const std::string& doc_id, const lm::ModelConfig& config) const {
  const auto m = read_manifest();
  auto it = m.find(doc_id);
  if (it == m.end()) throw ConfigError("no adapter for document " + doc_id);
  return get(it->second, config);
}

}  // namespace prag::lora
