#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace corrreid::detail {

/// Serializes with object keys sorted (nlohmann::json keeps them sorted) and
/// every floating-point value printed with a fixed number of decimals.
std::string dump_fixed(const nlohmann::json& value, int decimals = 6, int indent = 2);

}  // namespace corrreid::detail
