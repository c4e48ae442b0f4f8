#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "nesbs/error.hpp"

namespace nesbs::toml {

// Minimal TOML subset: [table] headers, key = value pairs, values limited to
// strings, booleans, integers, floats and flat arrays, plus # comments.
// Flattened into dotted keys ("sampler.delta"). Covers the whole config
// surface of this project; anything fancier is rejected loudly.
struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<std::string, std::int64_t, double, bool, Array> v;

    bool is_string() const { return std::holds_alternative<std::string>(v); }
    bool is_int() const { return std::holds_alternative<std::int64_t>(v); }
    bool is_float() const { return std::holds_alternative<double>(v); }
    bool is_bool() const { return std::holds_alternative<bool>(v); }
    bool is_array() const { return std::holds_alternative<Array>(v); }

    const std::string& as_string() const {
        if (!is_string()) throw ConfigError("expected a TOML string");
        return std::get<std::string>(v);
    }
    std::int64_t as_int() const {
        if (is_int()) return std::get<std::int64_t>(v);
        throw ConfigError("expected a TOML integer");
    }
    double as_number() const {
        if (is_int()) return static_cast<double>(std::get<std::int64_t>(v));
        if (is_float()) return std::get<double>(v);
        throw ConfigError("expected a TOML number");
    }
    bool as_bool() const {
        if (!is_bool()) throw ConfigError("expected a TOML boolean");
        return std::get<bool>(v);
    }
    const Array& as_array() const {
        if (!is_array()) throw ConfigError("expected a TOML array");
        return std::get<Array>(v);
    }
};

using Table = std::map<std::string, Value>;

namespace detail {

inline std::string strip(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// removes a trailing comment, respecting quoted strings
inline std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

inline Value parse_scalar(const std::string& raw, int lineno) {
    const std::string s = strip(raw);
    if (s.empty()) throw ConfigError("empty TOML value at line " + std::to_string(lineno));
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw ConfigError("unterminated string at line " + std::to_string(lineno));
        std::string out;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            if (s[i] == '\\' && i + 2 < s.size()) {
                ++i;
                switch (s[i]) {
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                default:
                    throw ConfigError("unsupported escape at line " + std::to_string(lineno));
                }
            } else {
                out.push_back(s[i]);
            }
        }
        return Value{out};
    }
    if (s == "true") return Value{true};
    if (s == "false") return Value{false};
    // integer or float
    const bool looks_float = s.find_first_of(".eE") != std::string::npos &&
                             s.find_first_not_of("+-0123456789.eE") == std::string::npos;
    try {
        std::size_t pos = 0;
        if (!looks_float) {
            const std::int64_t i = std::stoll(s, &pos);
            if (pos == s.size()) return Value{i};
        }
        const double d = std::stod(s, &pos);
        if (pos == s.size()) return Value{d};
    } catch (const std::exception&) {
    }
    throw ConfigError("cannot parse TOML value '" + s + "' at line " + std::to_string(lineno));
}

inline Value parse_value(const std::string& raw, int lineno) {
    const std::string s = strip(raw);
    if (!s.empty() && s.front() == '[') {
        if (s.back() != ']')
            throw ConfigError("unterminated array at line " + std::to_string(lineno));
        Array arr;
        std::string body = s.substr(1, s.size() - 2);
        std::string cur;
        bool in_string = false;
        for (char c : body) {
            if (c == '"') in_string = !in_string;
            if (c == ',' && !in_string) {
                if (!strip(cur).empty()) arr.push_back(parse_scalar(cur, lineno));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!strip(cur).empty()) arr.push_back(parse_scalar(cur, lineno));
        return Value{arr};
    }
    return parse_scalar(s, lineno);
}

} // namespace detail

inline Table parse(const std::string& text) {
    Table table;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::strip(detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("malformed table header at line " + std::to_string(lineno));
            section = detail::strip(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("empty table name at line " + std::to_string(lineno));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " + std::to_string(lineno));
        const std::string key = detail::strip(line.substr(0, eq));
        if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
        const std::string full = section.empty() ? key : section + "." + key;
        table[full] = detail::parse_value(line.substr(eq + 1), lineno);
    }
    return table;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out.push_back(c);
    }
    return out;
}

inline std::string serialize_value(const Value& v) {
    std::ostringstream os;
    if (v.is_string()) {
        os << '"' << escape(v.as_string()) << '"';
    } else if (v.is_bool()) {
        os << (v.as_bool() ? "true" : "false");
    } else if (v.is_int()) {
        os << v.as_int();
    } else if (v.is_float()) {
        os.precision(17);
        os << std::get<double>(v.v);
        // keep floats recognizable as floats on re-parse
        const std::string s = os.str();
        if (s.find_first_of(".eE") == std::string::npos) return s + ".0";
        return s;
    } else {
        os << "[";
        const Array& arr = v.as_array();
        for (std::size_t i = 0; i < arr.size(); ++i) os << (i ? ", " : "") << serialize_value(arr[i]);
        os << "]";
    }
    return os.str();
}

// Canonical serialization: dotted keys grouped into sorted sections. The
// output re-parses to the same table, so hashing it pins the configuration.
inline std::string serialize(const Table& table) {
    std::map<std::string, std::map<std::string, const Value*>> sections;
    for (const auto& [key, value] : table) {
        const std::size_t dot = key.rfind('.');
        if (dot == std::string::npos)
            sections[""][key] = &value;
        else
            sections[key.substr(0, dot)][key.substr(dot + 1)] = &value;
    }
    std::ostringstream os;
    for (const auto& [section, entries] : sections) {
        if (!section.empty()) os << "[" << section << "]\n";
        for (const auto& [key, value] : entries)
            os << key << " = " << serialize_value(*value) << "\n";
    }
    return os.str();
}

} // namespace nesbs::toml
