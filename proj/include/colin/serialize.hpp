#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "colin/adapter.hpp"
#include "colin/matrix.hpp"

namespace colin {

inline constexpr const char* kAdapterFormat = "colin-adapter/1";

// {"rows": r, "cols": c, "data": [row-major values]}
nlohmann::json to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ColinAdapter& a);
ColinAdapter adapter_from_json(const nlohmann::json& j);

/// Same layout as the adapter minus the factor matrices, plus "fused": true
/// and the dense w_down / w_up.
nlohmann::json to_json(const FusedAdapter& f);
FusedAdapter fused_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace colin
