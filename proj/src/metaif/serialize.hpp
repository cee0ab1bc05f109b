#pragma once

// On-disk formats.
//
// Binary containers are little-endian: a 4-byte magic, a u32 version, then a
// type-specific body. "MIFP" holds a ParamVector with its architecture
// header, "MIFV" a bare float64 vector, "MIFE" an EkfacState.
//
// A MetaState checkpoint is a directory: lambda.bin, theta_<id>.bin per task
// and manifest.json (config, task ids, convergence norms, seed).

#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include <json.hpp>

#include "metaif/bilevel.hpp"
#include "metaif/ihvp.hpp"
#include "metaif/influence.hpp"

namespace metaif {

void write_param_vector(const std::filesystem::path& path, const ParamVector& p);
ParamVector read_param_vector(const std::filesystem::path& path);
void write_vector(const std::filesystem::path& path, std::span<const double> v);
// Accepts both MIFV and MIFP files (the architecture is dropped).
Vector read_vector(const std::filesystem::path& path);

void write_ekfac(const std::filesystem::path& path, const EkfacState& st);
EkfacState read_ekfac(const std::filesystem::path& path);

nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j, const std::string& where = "architecture");
nlohmann::json param_vector_to_json(const ParamVector& p);

nlohmann::json bilevel_config_to_json(const BilevelConfig& c);
// Missing fields keep their defaults; wrong types or values raise config
// errors naming `where.field`.
BilevelConfig bilevel_config_from_json(const nlohmann::json& j, const std::string& where = "bilevel");

struct Checkpoint {
    MetaState state;
    std::optional<Architecture> arch;
    nlohmann::json extra;  // free-form provenance (data bundle, etc.)
};

void save_checkpoint(const std::filesystem::path& dir, const MetaState& state, const Architecture* arch,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& dir);

nlohmann::json influence_manifest(const InfluenceVector& inf);
// Writes <stem>.json and <stem>.bin.
void save_influence(const std::filesystem::path& stem, const InfluenceVector& inf);
InfluenceVector load_influence(const std::filesystem::path& stem);

}  // namespace metaif
