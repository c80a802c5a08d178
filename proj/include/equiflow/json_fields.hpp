#pragma once

#include "json.hpp"

#include <set>
#include <stdexcept>
#include <string>

namespace equiflow::fields {

/// Schema error raised by the helpers below; callers translate it to their own error type.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string path(const std::string& where, const std::string& key) {
    return where.empty() ? key : where + "." + key;
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw SchemaError((where.empty() ? std::string("document") : where) + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw SchemaError("unknown field: " + path(where, key));
}

template <class T>
T required(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw SchemaError("missing field: " + path(where, key));
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw SchemaError("wrong type for field: " + path(where, key));
    }
}

template <class T>
T optional(const nlohmann::json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    return required<T>(j, key, where);
}

}  // namespace equiflow::fields
