#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "romelab/dataset.hpp"
#include "romelab/model.hpp"
#include "romelab/numerics.hpp"
#include "romelab/tracing.hpp"

namespace romelab {

using Json = nlohmann::json;

// Files --------------------------------------------------------------------

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);
Json read_json(const std::string& path);
void write_json(const std::string& path, const Json& doc);

std::uint64_t fnv1a64(const std::string& data);
std::string hex64(std::uint64_t x);

// Numerics -----------------------------------------------------------------

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);
Json vector_to_json(const Vector& v);
Vector vector_from_json(const Json& j);

Json covariance_to_json(const CovarianceAccumulator& acc, int layer);
CovarianceAccumulator covariance_from_json(const Json& j, int* layer = nullptr);

// Model --------------------------------------------------------------------

Json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const Json& j);

/// Named parameter blocks; `only` restricts the blocks written (empty = all).
Json parameters_to_json(const Parameters& p, const std::vector<BlockId>& only = {});
/// Overwrites the blocks present in `j` (shapes must match).
void apply_parameter_json(Parameters* p, const Json& j);

struct Checkpoint {
  Parameters params;
  std::uint64_t seed = 0;
  Json training_meta = Json::object();
  Json tokenizer = Json::array();
  Json edit = nullptr;  // provenance block for edited checkpoints
};

Json checkpoint_to_json(const Checkpoint& ck);
/// A sparse checkpoint (one with a "base" entry) is resolved relative to its
/// own directory.
Checkpoint load_checkpoint(const std::string& path);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
/// Stores only `blocks` plus a reference to `base_path`.
void save_sparse_checkpoint(const std::string& path, const Checkpoint& ck,
                            const std::string& base_path, const std::vector<BlockId>& blocks);

Json tokenizer_to_json(const Tokenizer& tok);
Tokenizer tokenizer_from_json(const Json& j);

// Dataset ------------------------------------------------------------------

Json world_to_json(const WorldModel& w);
WorldModel world_from_json(const Json& j);
Json record_to_json(const CounterfactRecord& r);
CounterfactRecord record_from_json(const Json& j);

// Tracing ------------------------------------------------------------------

Json trace_grid_to_json(const TraceGrid& g, const Tokenizer& tok);
TraceGrid trace_grid_from_json(const Json& j);
/// token_index, token_text, layer, restored_p, effect
std::string trace_grid_csv(const TraceGrid& g, const Tokenizer& tok);
Json averaged_grid_to_json(const AveragedGrid& a);
std::string averaged_grid_csv(const AveragedGrid& a);

}  // namespace romelab
