#pragma once

// Field access for JSON configs with path-qualified error messages.

#include <algorithm>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "metaif/error.hpp"

namespace metaif::jsonu {

template <class T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& where, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(ErrorCode::config, where + "." + key + ": wrong type");
    }
}

inline void require_object(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) fail(ErrorCode::config, where + ": expected an object");
}

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> known) {
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&k](const char* n) { return k == n; }))
            fail(ErrorCode::config, where + "." + k + ": unknown field");
    }
}

}  // namespace metaif::jsonu
